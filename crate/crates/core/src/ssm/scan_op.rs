//! Batched selective scan as a differentiable tensor op.
//!
//! Channels are split into `K` groups (one per scan direction); every channel
//! of group `g` reads the input-dependent `B`/`C` rows of that group. The
//! backward pass recomputes the hidden states one row at a time, so peak
//! memory is `L × N` per worker rather than `B × KD × L × N`.

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};
use rayon::prelude::*;

use super::Discretization;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    groups: usize,
    channels: usize,
    per_group: usize,
    state: usize,
    len: usize,
}

impl Dims {
    fn x(&self, b: usize, c: usize) -> usize {
        (b * self.channels + c) * self.len
    }

    fn bc(&self, b: usize, g: usize) -> usize {
        (b * self.groups + g) * self.state * self.len
    }
}

/// Decay `e^{delta·a}`, input gain, and `e^{delta·a} - 1` from a single
/// exponential.
#[inline]
fn discretize(mode: Discretization, delta: f64, a: f64) -> (f64, f64, f64) {
    let z = delta * a;
    let em1 = z.exp_m1();
    let gain = match mode {
        Discretization::FirstOrder => delta,
        Discretization::Exact if z.abs() < 1e-300 => delta,
        Discretization::Exact => delta * em1 / z,
    };
    (em1 + 1.0, gain, em1)
}

/// Partials of the input gain in `delta` and `a`.
#[inline]
fn gain_partials(mode: Discretization, delta: f64, a: f64, a_bar: f64, em1: f64) -> (f64, f64) {
    match mode {
        Discretization::FirstOrder => (1.0, 0.0),
        Discretization::Exact => {
            let z = delta * a;
            let dg_da = if z.abs() < 1e-4 {
                delta * delta * (0.5 + z / 3.0 + z * z / 8.0)
            } else {
                (z * a_bar - em1) / (a * a)
            };
            (a_bar, dg_da)
        }
    }
}

/// Per-step values recorded by the backward recomputation, laid out `(L, N)`.
struct Trace {
    states: Vec<f64>,
    a_bar: Vec<f64>,
    gain: Vec<f64>,
    em1: Vec<f64>,
}

struct Inputs<'a> {
    dims: Dims,
    x: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
}

impl Inputs<'_> {
    /// Forward recurrence over one `(batch, channel)` row. Writes outputs into
    /// `y` and, when given, the post-update states and step coefficients.
    fn run_row(
        &self,
        mode: Discretization,
        bi: usize,
        ch: usize,
        y: &mut [f64],
        mut trace: Option<&mut Trace>,
    ) {
        let d = self.dims;
        let g = ch / d.per_group;
        let xo = d.x(bi, ch);
        let bco = d.bc(bi, g);
        let a_row = &self.a[ch * d.state..(ch + 1) * d.state];
        let mut h = vec![0.0f64; d.state];
        for l in 0..d.len {
            let xv = self.x[xo + l];
            let dt = self.delta[xo + l];
            let mut acc = 0.0;
            for n in 0..d.state {
                let (a_bar, gn, em1) = discretize(mode, dt, a_row[n]);
                let idx = bco + n * d.len + l;
                h[n] = a_bar * h[n] + gn * self.b[idx] * xv;
                acc += self.c[idx] * h[n];
                if let Some(t) = trace.as_deref_mut() {
                    let k = l * d.state + n;
                    t.states[k] = h[n];
                    t.a_bar[k] = a_bar;
                    t.gain[k] = gn;
                    t.em1[k] = em1;
                }
            }
            y[l] = acc;
        }
    }
}

fn forward(mode: Discretization, inp: &Inputs) -> Vec<f64> {
    let d = inp.dims;
    let mut y = vec![0.0f64; d.batch * d.channels * d.len];
    y.par_chunks_mut(d.len).enumerate().for_each(|(row, out)| {
        let (bi, ch) = (row / d.channels, row % d.channels);
        inp.run_row(mode, bi, ch, out, None);
    });
    y
}

struct GroupGrads {
    dx: Vec<f64>,
    ddelta: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dc: Vec<f64>,
}

fn backward_group(mode: Discretization, inp: &Inputs, gy: &[f64], bi: usize, g: usize) -> GroupGrads {
    let d = inp.dims;
    let (n_state, len) = (d.state, d.len);
    let bco = d.bc(bi, g);
    let mut out = GroupGrads {
        dx: vec![0.0; d.per_group * len],
        ddelta: vec![0.0; d.per_group * len],
        da: vec![0.0; d.per_group * n_state],
        db: vec![0.0; n_state * len],
        dc: vec![0.0; n_state * len],
    };
    let mut trace = Trace {
        states: vec![0.0; len * n_state],
        a_bar: vec![0.0; len * n_state],
        gain: vec![0.0; len * n_state],
        em1: vec![0.0; len * n_state],
    };
    let mut scratch = vec![0.0f64; len];
    let mut dh = vec![0.0f64; n_state];
    for j in 0..d.per_group {
        let ch = g * d.per_group + j;
        inp.run_row(mode, bi, ch, &mut scratch, Some(&mut trace));
        let xo = d.x(bi, ch);
        let a_row = &inp.a[ch * n_state..(ch + 1) * n_state];
        dh.iter_mut().for_each(|v| *v = 0.0);
        for l in (0..len).rev() {
            let dy = gy[xo + l];
            let xv = inp.x[xo + l];
            let dt = inp.delta[xo + l];
            let mut dx = 0.0;
            let mut ddt = 0.0;
            for n in 0..n_state {
                let idx = n * len + l;
                let a = a_row[n];
                let cval = inp.c[bco + idx];
                let bval = inp.b[bco + idx];
                let k = l * n_state + n;
                let h = trace.states[k];
                let h_prev = if l > 0 { trace.states[k - n_state] } else { 0.0 };
                dh[n] += dy * cval;
                out.dc[idx] += dy * h;
                let (a_bar, gn) = (trace.a_bar[k], trace.gain[k]);
                let (dg_ddt, dg_da) = gain_partials(mode, dt, a, a_bar, trace.em1[k]);
                let d_abar = dh[n] * h_prev;
                let d_gain = dh[n] * bval * xv;
                dx += dh[n] * gn * bval;
                out.db[idx] += dh[n] * gn * xv;
                ddt += d_abar * a_bar * a + d_gain * dg_ddt;
                out.da[j * n_state + n] += d_abar * a_bar * dt + d_gain * dg_da;
                dh[n] *= a_bar;
            }
            out.dx[j * len + l] = dx;
            out.ddelta[j * len + l] = ddt;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct SelectiveScanOp {
    mode: Discretization,
    groups: usize,
}

fn storage_to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("selective scan expects contiguous inputs".into()))?;
    match s {
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        other => Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "selective-scan")),
    }
}

fn tensor_to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

impl SelectiveScanOp {
    fn dims(&self, xd: &[usize], a: &[usize]) -> candle_core::Result<Dims> {
        let (batch, channels, len) = (xd[1], xd[2], xd[3]);
        Ok(Dims {
            batch,
            groups: self.groups,
            channels,
            per_group: channels / self.groups,
            state: a[1],
            len,
        })
    }
}

impl CustomOp3 for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective-scan"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = self.dims(l1.dims(), l2.dims())?;
        let xd = storage_to_f64(s1, l1)?;
        let a = storage_to_f64(s2, l2)?;
        let bc = storage_to_f64(s3, l3)?;
        let half = xd.len() / 2;
        let bc_half = bc.len() / 2;
        let inp = Inputs {
            dims,
            x: &xd[..half],
            delta: &xd[half..],
            a: &a,
            b: &bc[..bc_half],
            c: &bc[bc_half..],
        };
        let y = forward(self.mode, &inp);
        let shape = Shape::from((dims.batch, dims.channels, dims.len));
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(y.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(y),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        arg3: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = self.dims(arg1.dims(), arg2.dims())?;
        let xd = tensor_to_f64(arg1)?;
        let a = tensor_to_f64(arg2)?;
        let bc = tensor_to_f64(arg3)?;
        let gy = tensor_to_f64(grad_res)?;
        let half = xd.len() / 2;
        let bc_half = bc.len() / 2;
        let inp = Inputs {
            dims,
            x: &xd[..half],
            delta: &xd[half..],
            a: &a,
            b: &bc[..bc_half],
            c: &bc[bc_half..],
        };
        let tasks: Vec<(usize, usize)> = (0..dims.batch)
            .flat_map(|b| (0..dims.groups).map(move |g| (b, g)))
            .collect();
        let parts: Vec<GroupGrads> = tasks
            .par_iter()
            .map(|&(b, g)| backward_group(self.mode, &inp, &gy, b, g))
            .collect();

        let mut dxd = vec![0.0f64; xd.len()];
        let mut da = vec![0.0f64; a.len()];
        let mut dbc = vec![0.0f64; bc.len()];
        let row = dims.per_group * dims.len;
        let sl = dims.state * dims.len;
        let ga = dims.per_group * dims.state;
        // fixed (batch, group) order keeps the dA reduction deterministic
        for (&(b, g), p) in tasks.iter().zip(&parts) {
            let xo = dims.x(b, g * dims.per_group);
            dxd[xo..xo + row].copy_from_slice(&p.dx);
            dxd[half + xo..half + xo + row].copy_from_slice(&p.ddelta);
            for (dst, src) in da[g * ga..(g + 1) * ga].iter_mut().zip(&p.da) {
                *dst += src;
            }
            let bo = dims.bc(b, g);
            dbc[bo..bo + sl].copy_from_slice(&p.db);
            dbc[bc_half + bo..bc_half + bo + sl].copy_from_slice(&p.dc);
        }
        let dtype = arg1.dtype();
        let dev = arg1.device();
        let to_t = |v: Vec<f64>, shape: &[usize]| -> candle_core::Result<Tensor> {
            Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)
        };
        Ok((
            Some(to_t(dxd, arg1.dims())?),
            Some(to_t(da, arg2.dims())?),
            Some(to_t(dbc, arg3.dims())?),
        ))
    }
}

/// Selective scan over `K` channel groups.
///
/// Shapes: `x`, `delta`: `(B, K·D, L)`; `a`: `(K·D, N)`; `b`, `c`:
/// `(B, K, N, L)`; optional skip `d`: `(K·D)`. Returns `(B, K·D, L)` with
/// `y = C·h + D·x`. `delta` must be positive; initial states are zero.
pub fn selective_scan_tensor(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: Option<&Tensor>,
    mode: Discretization,
) -> Result<Tensor> {
    let (bsz, channels, len) = x.dims3()?;
    if delta.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "delta shape {:?} != input shape {:?}",
            delta.dims(),
            x.dims()
        )));
    }
    let (a_ch, state) = a.dims2()?;
    let (b_b, groups, b_n, b_l) = b.dims4()?;
    if a_ch != channels || b_b != bsz || b_n != state || b_l != len || c.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "inconsistent scan shapes: x {:?}, a {:?}, b {:?}, c {:?}",
            x.dims(),
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Shape(format!(
            "{channels} channels cannot be split into {groups} groups"
        )));
    }
    let xd = Tensor::stack(&[x, delta], 0)?.contiguous()?;
    let bc = Tensor::stack(&[b, c], 0)?.contiguous()?;
    let y = xd.apply_op3(&a.contiguous()?, &bc, SelectiveScanOp { mode, groups })?;
    match d {
        None => Ok(y),
        Some(d) => {
            if d.dims() != [channels] {
                return Err(Error::Shape(format!("skip D must be ({channels}), got {:?}", d.dims())));
            }
            Ok((y + (x * crate::nn::tile(d, bsz, len)?)?)?)
        }
    }
}
