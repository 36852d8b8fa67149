use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{join, leaky_relu, upsample_bilinear2x, BatchNorm2d, Conv2d, ParamStore};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), in_ch, out_ch, 3, 1, 1, true)?,
            bn1: BatchNorm2d::new(store, &join(prefix, "bn1"), out_ch)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), out_ch, out_ch, 3, 1, 1, true)?,
            bn2: BatchNorm2d::new(store, &join(prefix, "bn2"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = leaky_relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?, LEAKY_SLOPE)?;
        leaky_relu(&self.bn2.forward(&self.conv2.forward(&x)?, train)?, LEAKY_SLOPE)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    reduce: Conv2d,
    conv: ConvBlock,
}

impl UpBlock {
    fn new(store: &mut ParamStore, prefix: &str, deep: usize, skip: usize, out: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(store, &join(prefix, "reduce"), deep, skip, 1, 1, 0, true)?,
            conv: ConvBlock::new(store, &join(prefix, "conv"), 2 * skip, out)?,
        })
    }

    fn forward(&self, deep: &Tensor, skip: &Tensor, train: bool) -> Result<Tensor> {
        let up = upsample_bilinear2x(&self.reduce.forward(deep)?)?;
        self.conv.forward(&Tensor::cat(&[skip, &up], 1)?, train)
    }
}

/// Five-level UNet: double 3×3 conv blocks with batch norm and leaky ReLU,
/// max-pool downsampling, bilinear upsampling and concatenated skips.
#[derive(Debug, Clone)]
pub struct CnnUnet {
    encoder: Vec<ConvBlock>,
    decoder: Vec<UpBlock>,
    head: Conv2d,
}

impl CnnUnet {
    pub fn new(store: &mut ParamStore, base_width: usize, in_ch: usize, classes: usize) -> Result<Self> {
        let widths: Vec<usize> = (0..5).map(|i| base_width << i).collect();
        let mut encoder = Vec::with_capacity(5);
        let mut prev = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(store, &format!("encoder.{i}"), prev, w)?);
            prev = w;
        }
        let mut decoder = Vec::with_capacity(4);
        for i in 0..4 {
            let deep = widths[4 - i];
            let skip = widths[3 - i];
            decoder.push(UpBlock::new(store, &format!("decoder.{i}"), deep, skip, skip)?);
        }
        let head = Conv2d::new(store, "head", widths[0], classes, 3, 1, 1, true)?;
        Ok(Self { encoder, decoder, head })
    }

    /// Returns `(logits, features)`; features are the last decoder block's
    /// output at full resolution.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let mut skips = Vec::with_capacity(5);
        let mut h = self.encoder[0].forward(x, train)?;
        for block in &self.encoder[1..] {
            skips.push(h.clone());
            h = block.forward(&h.max_pool2d(2)?, train)?;
        }
        for (up, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = up.forward(&h, skip, train)?;
        }
        let logits = self.head.forward(&h)?;
        Ok((logits, h))
    }
}
