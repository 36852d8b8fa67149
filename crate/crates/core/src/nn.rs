//! Minimal layer toolkit on top of `candle_core`: a seeded parameter store and
//! the handful of layers the two backbones need. Every layer is built from
//! differentiable tensor ops so `Tensor::backward` reaches all parameters.

use std::collections::BTreeMap;

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter initialization rule.
#[derive(Debug, Clone)]
pub enum Init {
    Const(f64),
    Uniform { bound: f64 },
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal { std: f64 },
    Values(Vec<f64>),
}

enum Source {
    Fresh(ChaCha8Rng),
    Loaded(BTreeMap<String, Tensor>),
}

/// Named parameters and buffers, ordered by name.
///
/// A fresh store draws every parameter from one seeded stream in
/// construction order, so initialization is a pure function of the network
/// layout and the seed. A loaded store hands back stored tensors and reports
/// anything missing as a configuration error.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    source: Source,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn fresh(seed: u64, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            source: Source::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn loaded(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            source: Source::Loaded(tensors),
            dtype,
            device: Device::Cpu,
        }
    }

    /// Next value of the init stream, for layers with custom sampling.
    pub fn draw_seed(&mut self) -> u64 {
        match &mut self.source {
            Source::Fresh(rng) => rng.random(),
            Source::Loaded(_) => 0,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn take_loaded(&mut self, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
        match &mut self.source {
            Source::Fresh(_) => Ok(None),
            Source::Loaded(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is missing from the checkpoint")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                Ok(Some(t.to_dtype(self.dtype)?))
            }
        }
    }

    fn sample(&mut self, shape: &[usize], init: &Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![*c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!("{} init values for {n} elements", v.len())));
                }
                v.clone()
            }
            Init::Uniform { bound } => {
                let Source::Fresh(rng) = &mut self.source else { unreachable!() };
                (0..n).map(|_| rng.random_range(-bound..=*bound)).collect()
            }
            Init::TruncNormal { std } => {
                let Source::Fresh(rng) = &mut self.source else { unreachable!() };
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = match self.take_loaded(name, shape)? {
            Some(t) => t,
            None => self.sample(shape, &init)?,
        };
        let v = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: f64) -> Result<Var> {
        let t = match self.take_loaded(name, shape)? {
            Some(t) => t,
            None => Tensor::full(init, shape, &self.device)?.to_dtype(self.dtype)?,
        };
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Fails when a loaded store still holds tensors nothing asked for.
    pub fn finish(&self) -> Result<()> {
        if let Source::Loaded(map) = &self.source {
            if let Some(name) = map.keys().next() {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}` in checkpoint")));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }
}

/// PyTorch's default fan-in bound for linear and conv layers.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(&join(prefix, "weight"), &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(store.param(&join(prefix, "bias"), &[out_dim], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    /// Applies the layer over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap();
        let rows = x.elem_count() / in_dim.max(1);
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = (y + tile(b.as_tensor(), rows, 1)?.squeeze(2)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&join(prefix, "weight"), &[dim], Init::Const(1.0))?,
            bias: store.param(&join(prefix, "bias"), &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last axis.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let rows = x.elem_count() / x.dim(D::Minus1)?.max(1);
        let w = tile(self.weight.as_tensor(), rows, 1)?.reshape(x.shape())?;
        let b = tile(self.bias.as_tensor(), rows, 1)?.reshape(x.shape())?;
        Ok(((normed * w)? + b)?)
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&join(prefix, "weight"), &[channels], Init::Const(1.0))?,
            bias: store.param(&join(prefix, "bias"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&join(prefix, "running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&join(prefix, "running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Statistics and affine maps are applied on a `(C, B·H·W)` view so that
    /// every broadcast reduces over the contiguous trailing axis.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let col = (c, 1);
        let rows = x.transpose(0, 1)?.reshape((c, b * h * w))?;
        let (mean, var) = if train {
            let mean = rows.mean_keepdim(1)?;
            let var = rows.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor().detach() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(col)?,
                self.running_var.as_tensor().reshape(col)?,
            )
        };
        let y = rows
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.as_tensor().reshape(col)?)?
            .broadcast_add(&self.bias.as_tensor().reshape(col)?)?;
        Ok(y.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Geometry of a stride-1 square-kernel unfold over channels-last `(B, H, W, C)`.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    /// Visits every (column offset, image offset) pair of channel runs that
    /// lie inside the image; each run is `c` values long.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (c, kk) = (self.c, self.k * self.k);
        for bi in 0..self.b {
            for y in 0..ho {
                for x in 0..wo {
                    let row = ((bi * ho + y) * wo + x) * kk * c;
                    for tap in 0..kk {
                        let (sy, sx) = (y + tap / self.k, x + tap % self.k);
                        if sy < self.pad || sy - self.pad >= self.h || sx < self.pad || sx - self.pad >= self.w {
                            continue;
                        }
                        let img = ((bi * self.h + sy - self.pad) * self.w + sx - self.pad) * c;
                        f(row + tap * c, img);
                    }
                }
            }
        }
    }
}

fn cpu_slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s.as_slice::<T>()?[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op: "unfold" }),
    }
}

fn unfold_cpu<T: candle_core::WithDType>(g: &Unfold, src: &[T], forward: bool) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let c = g.c;
    let len = if forward { g.b * ho * wo * g.k * g.k * c } else { g.b * g.h * g.w * c };
    let mut out = vec![T::zero(); len];
    if forward {
        g.for_each(|col, img| out[col..col + c].copy_from_slice(&src[img..img + c]));
    } else {
        g.for_each(|col, img| {
            for (o, v) in out[img..img + c].iter_mut().zip(&src[col..col + c]) {
                *o += *v;
            }
        });
    }
    out
}

macro_rules! dispatch_unfold {
    ($s:expr, $l:expr, $g:expr, $fwd:expr) => {
        match $s {
            CpuStorage::F32(_) => CpuStorage::F32(unfold_cpu($g, cpu_slice::<f32>($s, $l)?, $fwd)),
            CpuStorage::F64(_) => CpuStorage::F64(unfold_cpu($g, cpu_slice::<f64>($s, $l)?, $fwd)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "unfold")),
        }
    };
}

/// Repeats a vector of length `m` into `(pre, m, post)`.
struct Tile {
    pre: usize,
    post: usize,
}

/// Adjoint of [`Tile`]: sums `(pre, m, post)` down to `(m)`.
struct Untile {
    pre: usize,
    post: usize,
}

fn tile_cpu<T: candle_core::WithDType>(src: &[T], pre: usize, post: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(pre * src.len() * post);
    for _ in 0..pre {
        for &v in src {
            out.extend(std::iter::repeat(v).take(post));
        }
    }
    out
}

fn untile_cpu<T: candle_core::WithDType>(src: &[T], pre: usize, post: usize) -> Vec<T> {
    let m = src.len() / (pre * post).max(1);
    let mut out = vec![T::zero(); m];
    for block in src.chunks_exact(m * post) {
        for (o, run) in out.iter_mut().zip(block.chunks_exact(post)) {
            for &v in run {
                *o += v;
            }
        }
    }
    out
}

impl CustomOp1 for Tile {
    fn name(&self) -> &'static str {
        "tile"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let m = l.shape().elem_count();
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(tile_cpu(cpu_slice::<f32>(s, l)?, self.pre, self.post)),
            CpuStorage::F64(_) => CpuStorage::F64(tile_cpu(cpu_slice::<f64>(s, l)?, self.pre, self.post)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "tile")),
        };
        Ok((storage, Shape::from((self.pre, m, self.post))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1_no_bwd(&Untile { pre: self.pre, post: self.post })?;
        Ok(Some(g.reshape(arg.shape())?))
    }
}

impl CustomOp1 for Untile {
    fn name(&self) -> &'static str {
        "untile"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let m = l.shape().elem_count() / (self.pre * self.post).max(1);
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(untile_cpu(cpu_slice::<f32>(s, l)?, self.pre, self.post)),
            CpuStorage::F64(_) => CpuStorage::F64(untile_cpu(cpu_slice::<f64>(s, l)?, self.pre, self.post)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "untile")),
        };
        Ok((storage, Shape::from(m)))
    }
}

/// Repeats the values of `v` into a `(pre, v.elem_count(), post)` tensor.
/// Equivalent to a broadcast, with a gradient that sums in a single pass.
pub fn tile(v: &Tensor, pre: usize, post: usize) -> Result<Tensor> {
    Ok(v.contiguous()?.apply_op1(Tile { pre, post })?)
}

/// `(B, H, W, C)` to `(B·Ho·Wo, k²·C)`, columns ordered (tap, channel).
struct Im2Col(Unfold);

/// Adjoint of [`Im2Col`]: sums columns back onto the image.
struct Col2Im(Unfold);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (ho, wo) = g.out_hw();
        Ok((dispatch_unfold!(s, l, g, true), Shape::from((g.b * ho * wo, g.k * g.k * g.c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        Ok((dispatch_unfold!(s, l, g, false), Shape::from((g.b, g.h, g.w, g.c))))
    }
}

/// Stride-1 patch unfold of a channels-last `(B, H, W, C)` tensor with zero
/// padding, differentiable in `x`.
pub fn im2col(x: &Tensor, k: usize, pad: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if k == 0 || 2 * pad + 1 < k || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("im2col: kernel {k} with padding {pad} on {h}x{w}")));
    }
    Ok(x.contiguous()?.apply_op1(Im2Col(Unfold { b, c, h, w, k, pad }))?)
}


#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_ch * kernel * kernel);
        let weight = store.param(
            &join(prefix, "weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Uniform { bound },
        )?;
        let bias = if bias {
            Some(store.param(&join(prefix, "bias"), &[out_ch], Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Lowered to matrix products: non-overlapping patches (stride equal to
    /// kernel, no padding) are reshaped into rows, stride-1 kernels are
    /// unfolded with [`im2col`]. Other geometries use the
    /// backend convolution.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out, _, k, _) = self.weight.dims4()?;
        let (s, p) = (self.stride, self.padding);
        let y = if s == k && p == 0 && h % k == 0 && w % k == 0 {
            let (ho, wo) = (h / k, w / k);
            let cols = x
                .reshape(vec![b, c, ho, k, wo, k])?
                .permute(vec![0, 2, 4, 1, 3, 5])?
                .reshape((b * ho * wo, c * k * k))?;
            let wt = self.weight.reshape((out, c * k * k))?;
            cols.matmul(&wt.t()?)?
                .reshape((b, ho, wo, out))?
                .permute((0, 3, 1, 2))?
                .contiguous()?
        } else if s == 1 && 2 * p + 1 >= k {
            let (ho, wo) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
            let cols = im2col(&x.permute((0, 2, 3, 1))?, k, p)?;
            let wt = self.weight.permute((0, 2, 3, 1))?.reshape((out, k * k * c))?;
            cols.matmul(&wt.t()?)?
                .reshape((b, ho, wo, out))?
                .permute((0, 3, 1, 2))?
                .contiguous()?
        } else {
            x.conv2d(self.weight.as_tensor(), p, s, 1, 1)?
        };
        match &self.bias {
            None => Ok(y),
            Some(bias) => {
                let (yb, _, yh, yw) = y.dims4()?;
                Ok((&y + tile(bias.as_tensor(), yb, yh * yw)?.reshape(y.shape())?)?)
            }
        }
    }
}

/// Per-channel `k × k` convolution with zero padding, stride 1, odd `k`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    weight: Var,
    bias: Var,
    kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {kernel}")));
        }
        let bound = fan_in_bound(kernel * kernel);
        Ok(Self {
            weight: store.param(
                &join(prefix, "weight"),
                &[channels, 1, kernel, kernel],
                Init::Uniform { bound },
            )?,
            bias: store.param(&join(prefix, "bias"), &[channels], Init::Uniform { bound })?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let k = self.kernel;
        let pad = k / 2;
        let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let weight = self.weight.as_tensor().reshape((c, k * k))?;
        let mut acc = self.bias.as_tensor().reshape((1, c, 1, 1))?.broadcast_as(x.shape())?;
        for i in 0..k {
            for j in 0..k {
                let tap = weight.narrow(1, i * k + j, 1)?.reshape((1, c, 1, 1))?;
                let window = padded.narrow(2, i, h)?.narrow(3, j, w)?;
                acc = (acc + window.broadcast_mul(&tap)?)?;
            }
        }
        Ok(acc)
    }
}

/// `log(1 + e^x)` computed without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Softmax over axis 1 of a `(B, C, ...)` tensor.
pub fn softmax_classes(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Row-stochastic `(out, in)` matrix averaging the adaptive-pooling bins
/// `[floor(i·in/out), ceil((i+1)·in/out))`.
pub fn adaptive_pool_matrix(input: usize, output: usize, dtype: DType) -> Result<Tensor> {
    if output == 0 || output > input {
        return Err(Error::Domain(format!(
            "cannot pool {input} positions down to {output}"
        )));
    }
    let mut m = vec![0.0f64; output * input];
    for i in 0..output {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        let wgt = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * input + j] = wgt;
        }
    }
    Ok(Tensor::from_vec(m, (output, input), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `(2n, n)` bilinear ×2 interpolation matrix with aligned corners.
pub fn bilinear_up_matrix(n: usize, dtype: DType) -> Result<Tensor> {
    let out = 2 * n;
    let mut m = vec![0.0f64; out * n];
    for i in 0..out {
        if n == 1 {
            m[i] = 1.0;
            continue;
        }
        let src = i as f64 * (n - 1) as f64 / (out - 1) as f64;
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = src - lo as f64;
        m[i * n + lo] += 1.0 - frac;
        m[i * n + hi] += frac;
    }
    Ok(Tensor::from_vec(m, (out, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear ×2 upsampling of `(B, C, H, W)` (align-corners convention).
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mh = bilinear_up_matrix(h, x.dtype())?;
    let mw = bilinear_up_matrix(w, x.dtype())?;
    let y = x.broadcast_matmul(&mw.t()?)?;
    Ok(mh.broadcast_matmul(&y)?)
}
