//! Training objectives: supervised Dice + cross-entropy, pseudo-label cross
//! supervision between the two networks, and the pooled, channel-normalized
//! feature-consistency loss.
//!
//! All losses return rank-0 tensors so they can be summed and backpropagated.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adaptive_pool_matrix, softmax_classes};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to at least this before the logarithm.
pub const CE_CLAMP: f64 = 1e-12;
/// Default side length of the pooled projector grid.
pub const DEFAULT_PROJECTOR_GRID: usize = 14;

/// Integer class masks, `(B, H, W)` of `u32`, values in `0..classes`.
#[derive(Debug, Clone)]
pub struct LabelMap {
    data: Tensor,
    classes: usize,
}

impl LabelMap {
    pub fn new(data: Tensor, classes: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("label map must be (B, H, W), got {:?}", data.dims())));
        }
        let data = data.to_dtype(DType::U32)?;
        let max = data.max_all()?.to_scalar::<u32>().unwrap_or(0);
        if data.elem_count() > 0 && max as usize >= classes {
            return Err(Error::ClassRange {
                value: max,
                classes,
                context: "label map".into(),
            });
        }
        Ok(Self { data, classes })
    }

    pub fn from_masks(masks: &[ndarray::Array2<u8>], classes: usize) -> Result<Self> {
        let (h, w) = masks
            .first()
            .map(|m| m.dim())
            .ok_or_else(|| Error::Shape("no masks".into()))?;
        let mut flat = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dim() != (h, w) {
                return Err(Error::Shape("masks in a batch must share a size".into()));
            }
            flat.extend(m.iter().map(|&v| v as u32));
        }
        Self::new(
            Tensor::from_vec(flat, (masks.len(), h, w), &candle_core::Device::Cpu)?,
            classes,
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(B, C, H, W)` one-hot encoding in `dtype`.
    pub fn one_hot(&self, dtype: DType) -> Result<Tensor> {
        let classes = Tensor::arange(0u32, self.classes as u32, self.data.device())?
            .reshape((1, self.classes, 1, 1))?;
        Ok(self.data.unsqueeze(1)?.broadcast_eq(&classes)?.to_dtype(dtype)?)
    }

    pub fn to_masks(&self) -> Result<Vec<ndarray::Array2<u8>>> {
        let (b, h, w) = self.data.dims3()?;
        let flat = self.data.flatten_all()?.to_vec1::<u32>()?;
        Ok((0..b)
            .map(|i| {
                ndarray::Array2::from_shape_fn((h, w), |(y, x)| flat[(i * h + y) * w + x] as u8)
            })
            .collect())
    }
}

fn check_pair(probs: &Tensor, target: &LabelMap) -> Result<()> {
    let (b, c, h, w) = probs.dims4()?;
    if c != target.classes() {
        return Err(Error::Shape(format!(
            "prediction has {c} classes, target has {}",
            target.classes()
        )));
    }
    if target.tensor().dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} disagree",
            probs.dims(),
            target.tensor().dims()
        )));
    }
    Ok(())
}

/// `1 - mean_c (2Σpg + ε) / (Σp + Σg + ε)`, sums taken over the whole batch.
pub fn dice_loss(probs: &Tensor, target: &LabelMap) -> Result<Tensor> {
    check_pair(probs, target)?;
    let g = target.one_hot(probs.dtype())?;
    let inter = (probs * &g)?.sum((0, 2, 3))?;
    let p_sum = probs.sum((0, 2, 3))?;
    let g_sum = g.sum((0, 2, 3))?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&((p_sum + g_sum)? + DICE_SMOOTH)?)?;
    Ok((1.0 - dice.mean_all()?)?)
}

/// Mean over pixels of `-ln max(p_target, CE_CLAMP)`.
pub fn cross_entropy_loss(probs: &Tensor, target: &LabelMap) -> Result<Tensor> {
    check_pair(probs, target)?;
    let g = target.one_hot(probs.dtype())?;
    let p_true = (probs * g)?.sum(1)?.maximum(CE_CLAMP)?;
    Ok(p_true.log()?.mean_all()?.neg()?)
}

/// Cross entropy plus Dice on the softmax of `logits`.
pub fn supervised_loss(logits: &Tensor, target: &LabelMap) -> Result<Tensor> {
    let probs = softmax_classes(logits)?;
    Ok((cross_entropy_loss(&probs, target)? + dice_loss(&probs, target)?)?)
}

/// Per-pixel argmax over classes, detached from the producing graph. Ties go
/// to the lowest class index.
pub fn pseudo_label(logits: &Tensor) -> Result<LabelMap> {
    let (_, c, _, _) = logits.dims4()?;
    let lg = logits.detach();
    // first maximal index: mask the maxima, then take the smallest index among them
    let max = lg.max_keepdim(1)?;
    let is_max = lg.broadcast_eq(&max)?;
    let idx = Tensor::arange(0u32, c as u32, lg.device())?.reshape((1, c, 1, 1))?;
    let sentinel = Tensor::full(c as u32, is_max.shape(), lg.device())?;
    let cand = is_max.where_cond(&idx.broadcast_as(is_max.shape())?, &sentinel)?;
    let label = cand.min(1)?;
    LabelMap::new(label, c)
}

/// Pseudo-label cross supervision: each network's prediction is trained
/// against the other's detached argmax. Returns `(semi1, semi2)`.
pub fn cross_supervision_loss(logits1: &Tensor, logits2: &Tensor) -> Result<(Tensor, Tensor)> {
    if logits1.dims() != logits2.dims() {
        return Err(Error::Shape(format!(
            "logit maps disagree: {:?} vs {:?}",
            logits1.dims(),
            logits2.dims()
        )));
    }
    let from2 = pseudo_label(logits2)?;
    let from1 = pseudo_label(logits1)?;
    Ok((supervised_loss(logits1, &from2)?, supervised_loss(logits2, &from1)?))
}

/// Pooled features with unit-norm channel vectors, `(B, C, g, g)`.
#[derive(Debug, Clone)]
pub struct ProjectedFeatures {
    data: Tensor,
}

impl ProjectedFeatures {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Adaptive average pooling to `grid × grid`, then L2 normalization along the
/// channel axis. All-zero channel vectors stay zero.
pub fn project_features(features: &Tensor, grid: usize) -> Result<ProjectedFeatures> {
    let (_, _, h, w) = features.dims4()?;
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Domain(format!(
            "projector grid {grid} does not fit a {h}x{w} feature map"
        )));
    }
    let ph = adaptive_pool_matrix(h, grid, features.dtype())?;
    let pw = adaptive_pool_matrix(w, grid, features.dtype())?;
    let pooled = ph.broadcast_matmul(&features.broadcast_matmul(&pw.t()?)?)?;
    let norm = pooled.sqr()?.sum_keepdim(1)?.maximum(1e-24)?.sqrt()?;
    Ok(ProjectedFeatures {
        data: pooled.broadcast_div(&norm)?,
    })
}

/// Mean squared difference over all elements.
pub fn contrastive_loss(p1: &ProjectedFeatures, p2: &ProjectedFeatures) -> Result<Tensor> {
    if p1.data.dims() != p2.data.dims() {
        return Err(Error::Shape(format!(
            "projected features disagree: {:?} vs {:?}",
            p1.data.dims(),
            p2.data.dims()
        )));
    }
    Ok((&p1.data - &p2.data)?.sqr()?.mean_all()?)
}

/// The five loss terms of one step and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub contra: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [(&'static str, f64); 5] {
        [
            ("sup1", self.sup1),
            ("sup2", self.sup2),
            ("semi1", self.semi1),
            ("semi2", self.semi2),
            ("contra", self.contra),
        ]
    }

    pub fn sum_of_parts(&self) -> f64 {
        self.sup1 + self.sup2 + self.semi1 + self.semi2 + self.contra
    }
}

/// Builds the breakdown, refusing non-finite terms.
pub fn total_loss(sup1: f64, sup2: f64, semi1: f64, semi2: f64, contra: f64) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        sup1,
        sup2,
        semi1,
        semi2,
        contra,
        total: 0.0,
    };
    b.total = b.sum_of_parts();
    if let Some((term, _)) = b.parts().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericalAbort { term, breakdown: b });
    }
    Ok(b)
}
