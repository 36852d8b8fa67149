use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{join, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::ssm::{VssBlock, VssConfig};

const LINEAR_INIT: Init = Init::TruncNormal { std: 0.02 };

/// `(B, H, W, C) -> (B, H/2, W/2, 2C)`: gather each 2×2 neighbourhood into
/// channels, normalize, project.
#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &join(prefix, "norm"), 4 * dim)?,
            reduction: Linear::new(store, &join(prefix, "reduction"), 4 * dim, 2 * dim, false, LINEAR_INIT)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        // channel order: (0,0), (1,0), (0,1), (1,1) as (row, column) offsets
        let x = x
            .reshape(vec![b, h / 2, 2, w / 2, 2, c])?
            .permute(vec![0, 1, 3, 4, 2, 5])?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&x)?)
    }
}

/// Linear expansion followed by a pixel shuffle: `(B, H, W, C) ->
/// (B, sH, sW, C·f / s²)`, then layer norm.
#[derive(Debug, Clone)]
struct PatchExpand {
    expand: Linear,
    norm: LayerNorm,
    scale: usize,
}

impl PatchExpand {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, factor: usize, scale: usize) -> Result<Self> {
        let out = dim * factor / (scale * scale);
        Ok(Self {
            expand: Linear::new(store, &join(prefix, "expand"), dim, dim * factor, false, LINEAR_INIT)?,
            norm: LayerNorm::new(store, &join(prefix, "norm"), out)?,
            scale,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.expand.forward(x)?;
        let (b, h, w, c) = x.dims4()?;
        let s = self.scale;
        let out = c / (s * s);
        let x = x
            .reshape(vec![b, h, w, s, s, out])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .reshape((b, h * s, w * s, out))?;
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fuse: Linear,
    blocks: Vec<VssBlock>,
    upsample: Option<PatchExpand>,
}

/// U-shaped network of visual state-space blocks: patch embedding, four
/// encoder stages joined by patch merging, a mirrored decoder of patch
/// expansions with concatenate-and-project skips, and a final ×4 expansion.
#[derive(Debug, Clone)]
pub struct MambaUnet {
    embed: Conv2d,
    embed_norm: LayerNorm,
    in_chans: usize,
    encoder: Vec<(Vec<VssBlock>, Option<PatchMerging>)>,
    norm: LayerNorm,
    bottleneck_up: PatchExpand,
    decoder: Vec<DecoderStage>,
    norm_up: LayerNorm,
    final_up: PatchExpand,
    head: Conv2d,
}

pub struct MambaLayout<'a> {
    pub in_chans: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: &'a [usize],
    pub block: VssConfig,
    pub classes: usize,
}

impl MambaUnet {
    pub fn new(store: &mut ParamStore, layout: &MambaLayout) -> Result<Self> {
        let stages = layout.depths.len();
        let dims: Vec<usize> = (0..stages).map(|i| layout.embed_dim << i).collect();
        let block_cfg = |dim: usize| VssConfig {
            dim,
            ..layout.block.clone()
        };
        let embed = Conv2d::new(
            store,
            "patch_embed.proj",
            layout.in_chans,
            layout.embed_dim,
            layout.patch,
            layout.patch,
            0,
            true,
        )?;
        let embed_norm = LayerNorm::new(store, "patch_embed.norm", layout.embed_dim)?;

        let mut encoder = Vec::with_capacity(stages);
        for (i, (&dim, &depth)) in dims.iter().zip(layout.depths).enumerate() {
            let blocks = (0..depth)
                .map(|j| VssBlock::new(store, &format!("layers.{i}.blocks.{j}"), &block_cfg(dim)))
                .collect::<Result<Vec<_>>>()?;
            let down = if i + 1 < stages {
                Some(PatchMerging::new(store, &format!("layers.{i}.downsample"), dim)?)
            } else {
                None
            };
            encoder.push((blocks, down));
        }
        let deepest = dims[stages - 1];
        let norm = LayerNorm::new(store, "norm", deepest)?;
        let bottleneck_up = PatchExpand::new(store, "layers_up.0", deepest, 2, 2)?;

        let mut decoder = Vec::with_capacity(stages - 1);
        for i in 1..stages {
            let dim = dims[stages - 1 - i];
            let fuse = Linear::new(store, &format!("concat_back_dim.{i}"), 2 * dim, dim, true, LINEAR_INIT)?;
            let blocks = (0..layout.depths[stages - 1 - i])
                .map(|j| VssBlock::new(store, &format!("layers_up.{i}.blocks.{j}"), &block_cfg(dim)))
                .collect::<Result<Vec<_>>>()?;
            let upsample = if i + 1 < stages {
                Some(PatchExpand::new(store, &format!("layers_up.{i}.upsample"), dim, 2, 2)?)
            } else {
                None
            };
            decoder.push(DecoderStage { fuse, blocks, upsample });
        }
        let norm_up = LayerNorm::new(store, "norm_up", layout.embed_dim)?;
        let p = layout.patch;
        let final_up = PatchExpand::new(store, "up", layout.embed_dim, p * p, p)?;
        let head = Conv2d::new(store, "output", layout.embed_dim, layout.classes, 1, 1, 0, false)?;
        Ok(Self {
            embed,
            embed_norm,
            in_chans: layout.in_chans,
            encoder,
            norm,
            bottleneck_up,
            decoder,
            norm_up,
            final_up,
            head,
        })
    }

    /// `(B, 1, H, W)` grayscale in; `(logits, features)` out, features being
    /// the normalized full-resolution embedding before the 1×1 head.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = if x.dim(1)? == 1 && self.in_chans > 1 {
            x.repeat((1, self.in_chans, 1, 1))?
        } else {
            x.clone()
        };
        let h = self.embed.forward(&x)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut h = self.embed_norm.forward(&h)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (blocks, down) in &self.encoder {
            skips.push(h.clone());
            for blk in blocks {
                h = blk.forward(&h)?;
            }
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        h = self.bottleneck_up.forward(&self.norm.forward(&h)?)?;
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev().skip(1)) {
            h = stage.fuse.forward(&Tensor::cat(&[&h, skip], 3)?)?;
            for blk in &stage.blocks {
                h = blk.forward(&h)?;
            }
            if let Some(up) = &stage.upsample {
                h = up.forward(&h)?;
            }
        }
        let h = self.final_up.forward(&self.norm_up.forward(&h)?)?;
        let features = h.permute((0, 3, 1, 2))?.contiguous()?;
        let logits = self.head.forward(&features)?;
        Ok((logits, features))
    }
}
