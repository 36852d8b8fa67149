use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};

use super::{cross_merge, scan_op::selective_scan_tensor, Discretization, DirectionalSequences, Reduction};
use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, inverse_softplus, join, softplus, tile, DepthwiseConv2d, Init, LayerNorm, Linear, ParamStore};

const DIRECTIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VssConfig {
    pub dim: usize,
    pub state_size: usize,
    pub expand: usize,
    /// Rank of the Δ projection; `None` means `ceil(dim / 16)`.
    pub dt_rank: Option<usize>,
    pub conv_kernel: usize,
    pub discretization: Discretization,
    pub reduction: Reduction,
}

impl VssConfig {
    pub fn new(dim: usize, state_size: usize) -> Self {
        Self {
            dim,
            state_size,
            expand: 2,
            dt_rank: None,
            conv_kernel: 3,
            discretization: Discretization::Exact,
            reduction: Reduction::Mean,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.dim
    }

    pub fn rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.dim.div_ceil(16))
    }
}

/// Visual state-space block on channels-last `(B, H, W, C)` tokens.
///
/// `x + out_proj(out_norm(merge(scan(silu(dwconv(in_x))))) * silu(z))`, where
/// `[in_x, z] = in_proj(norm(x))` and each of the four scan directions has
/// its own `B`, `C`, `Δ` projections and `A`, `D` parameters.
#[derive(Debug, Clone)]
pub struct VssBlock {
    cfg: VssConfig,
    norm: LayerNorm,
    in_proj: Linear,
    conv: DepthwiseConv2d,
    x_proj: Var,
    dt_weight: Var,
    dt_bias: Var,
    a_log: Var,
    d_skip: Var,
    out_norm: LayerNorm,
    out_proj: Linear,
}

impl VssBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &VssConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.state_size == 0 || cfg.expand == 0 {
            return Err(Error::Config(format!("invalid VSS block config {cfg:?}")));
        }
        let (dim, inner, n, rank) = (cfg.dim, cfg.inner_dim(), cfg.state_size, cfg.rank());
        let norm = LayerNorm::new(store, &join(prefix, "norm"), dim)?;
        let in_proj = Linear::new(
            store,
            &join(prefix, "in_proj"),
            dim,
            2 * inner,
            false,
            Init::TruncNormal { std: 0.02 },
        )?;
        let conv = DepthwiseConv2d::new(store, &join(prefix, "conv"), inner, cfg.conv_kernel)?;
        let x_proj = store.param(
            &join(prefix, "x_proj_weight"),
            &[DIRECTIONS, rank + 2 * n, inner],
            Init::Uniform {
                bound: fan_in_bound(inner),
            },
        )?;
        let dt_weight = store.param(
            &join(prefix, "dt_projs_weight"),
            &[DIRECTIONS, inner, rank],
            Init::Uniform {
                bound: (rank as f64).powf(-0.5),
            },
        )?;
        // Δ bias: softplus⁻¹ of a log-uniform draw in [1e-3, 1e-1]
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(store.draw_seed());
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_init: Vec<f64> = (0..DIRECTIONS * inner)
            .map(|_| inverse_softplus(rng.random_range(lo..hi).exp().max(1e-4)))
            .collect();
        let dt_bias = store.param(&join(prefix, "dt_projs_bias"), &[DIRECTIONS, inner], Init::Values(dt_init))?;
        let a_init: Vec<f64> = (0..DIRECTIONS * inner)
            .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
            .collect();
        let a_log = store.param(&join(prefix, "A_logs"), &[DIRECTIONS * inner, n], Init::Values(a_init))?;
        let d_skip = store.param(&join(prefix, "Ds"), &[DIRECTIONS * inner], Init::Const(1.0))?;
        let out_norm = LayerNorm::new(store, &join(prefix, "out_norm"), inner)?;
        let out_proj = Linear::new(
            store,
            &join(prefix, "out_proj"),
            inner,
            dim,
            false,
            Init::TruncNormal { std: 0.02 },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            norm,
            in_proj,
            conv,
            x_proj,
            dt_weight,
            dt_bias,
            a_log,
            d_skip,
            out_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &VssConfig {
        &self.cfg
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out_proj
    }

    /// `(B, H, W, C) -> (B, H, W, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.cfg.dim {
            return Err(Error::Shape(format!("block expects {} channels, got {c}", self.cfg.dim)));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty spatial grid".into()));
        }
        let inner = self.cfg.inner_dim();
        let (n, rank, l) = (self.cfg.state_size, self.cfg.rank(), h * w);

        let xz = self.in_proj.forward(&self.norm.forward(x)?)?;
        let xi = xz.narrow(3, 0, inner)?.permute((0, 3, 1, 2))?.contiguous()?;
        let z = xz.narrow(3, inner, inner)?;
        let xi = self.conv.forward(&xi)?.silu()?;

        let seqs = super::cross_scan(&xi)?.into_data(); // (B, 4, inner, L)
        let proj = self.x_proj.unsqueeze(0)?.broadcast_matmul(&seqs)?; // (B, 4, R+2N, L)
        let dts = proj.narrow(2, 0, rank)?;
        let bs = proj.narrow(2, rank, n)?.contiguous()?;
        let cs = proj.narrow(2, rank + n, n)?.contiguous()?;
        let dts = self.dt_weight.unsqueeze(0)?.broadcast_matmul(&dts)?; // (B, 4, inner, L)
        let dts = (&dts + tile(&self.dt_bias, b, l)?.reshape(dts.shape())?)?;
        let delta = softplus(&dts)?.reshape((b, DIRECTIONS * inner, l))?;
        let a = self.a_log.exp()?.neg()?;
        let u = seqs.reshape((b, DIRECTIONS * inner, l))?;
        let y = selective_scan_tensor(
            &u,
            &delta,
            &a,
            &bs,
            &cs,
            Some(self.d_skip.as_tensor()),
            self.cfg.discretization,
        )?;
        let y = DirectionalSequences::new(y.reshape((b, DIRECTIONS, inner, l))?, h, w)?;
        let y = cross_merge(&y, self.cfg.reduction)?.permute((0, 2, 3, 1))?;
        let y = self.out_norm.forward(&y)?.mul(&z.silu()?)?;
        let y = self.out_proj.forward(&y)?;
        Ok((x + y)?)
    }

    /// `(B, C, H, W)` (or unbatched `(C, H, W)`) convenience wrapper.
    pub fn forward_chw(&self, x: &Tensor) -> Result<Tensor> {
        let batched = match x.rank() {
            3 => x.unsqueeze(0)?,
            4 => x.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4, got {r}"))),
        };
        let y = self
            .forward(&batched.permute((0, 2, 3, 1))?.contiguous()?)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        if x.rank() == 3 {
            Ok(y.squeeze(0)?)
        } else {
            Ok(y)
        }
    }
}
