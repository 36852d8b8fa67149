//! Semi-supervised medical image segmentation with a cross-supervised pair of
//! networks: a Visual-Mamba U-shaped network and a CNN UNet, trained jointly
//! with supervised Dice+CE, pseudo-label cross supervision and a pooled
//! feature-consistency term.

pub mod backbones;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
