//! The two segmentation networks: a U-shaped network of visual state-space
//! blocks and a CNN UNet. Both map `(B, 1, S, S)` grayscale batches to
//! `(B, C, S, S)` logits plus a full-resolution feature map.

mod cnn;
mod mamba;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_classes, ParamStore};
use crate::objectives::{pseudo_label, LabelMap};
use crate::ssm::{Discretization, VssConfig};

pub use cnn::CnnUnet;
pub use mamba::{MambaLayout, MambaUnet};

/// Checkpoint `format` metadata value.
pub const CHECKPOINT_FORMAT: &str = "semimamba-network";
/// Checkpoint `version` metadata value.
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    CnnUnet,
    MambaUnet,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-unet" => Ok(Variant::CnnUnet),
            "mamba-unet" => Ok(Variant::MambaUnet),
            other => Err(Error::Config(format!(
                "unknown network variant `{other}` (expected cnn-unet or mamba-unet)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::CnnUnet => "cnn-unet",
            Variant::MambaUnet => "mamba-unet",
        })
    }
}

fn default_input_size() -> usize {
    224
}
fn default_base_width() -> usize {
    16
}
fn default_patch_size() -> usize {
    4
}
fn default_embed_dim() -> usize {
    96
}
fn default_depths() -> Vec<usize> {
    vec![2, 2, 2, 2]
}
fn default_state_size() -> usize {
    16
}
fn default_in_chans() -> usize {
    3
}

/// Architecture description. Fields irrelevant to the chosen variant are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_state_size")]
    pub state_size: usize,
    /// Channels seen by the patch embedding; grayscale input is repeated.
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    #[serde(default)]
    pub discretization: Discretization,
}

impl NetworkSpec {
    pub fn new(variant: Variant, classes: usize) -> Self {
        Self {
            variant,
            classes,
            input_size: default_input_size(),
            base_width: default_base_width(),
            patch_size: default_patch_size(),
            embed_dim: default_embed_dim(),
            depths: default_depths(),
            state_size: default_state_size(),
            in_chans: default_in_chans(),
            discretization: Discretization::Exact,
        }
    }

    pub fn cnn_unet(classes: usize) -> Self {
        Self::new(Variant::CnnUnet, classes)
    }

    pub fn mamba_unet(classes: usize) -> Self {
        Self::new(Variant::MambaUnet, classes)
    }

    /// Narrow 32×32 build for gradient checks.
    pub fn debug(variant: Variant, classes: usize) -> Self {
        Self {
            input_size: 32,
            base_width: 2,
            embed_dim: 4,
            state_size: 2,
            ..Self::new(variant, classes)
        }
    }

    /// Side length the input must be a multiple of.
    pub fn size_multiple(&self) -> usize {
        match self.variant {
            Variant::CnnUnet => 16,
            Variant::MambaUnet => self.patch_size << self.depths.len().saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        match self.variant {
            Variant::CnnUnet => {
                if self.base_width == 0 {
                    return bad("base_width must be positive".into());
                }
            }
            Variant::MambaUnet => {
                if self.patch_size == 0 || self.embed_dim == 0 || self.state_size == 0 || self.in_chans == 0 {
                    return bad("patch_size, embed_dim, state_size and in_chans must be positive".into());
                }
                if self.depths.len() < 2 || self.depths.contains(&0) {
                    return bad(format!("depths must list at least two positive stages, got {:?}", self.depths));
                }
            }
        }
        let m = self.size_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of {m} for {}",
                self.input_size, self.variant
            ));
        }
        Ok(())
    }
}

/// Grayscale batch `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let (_, c, _, _) = data.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("image batch must have one channel, got {c}")));
        }
        Ok(Self { data })
    }

    pub fn from_images(images: &[ndarray::Array2<f32>], dtype: DType) -> Result<Self> {
        let (h, w) = images
            .first()
            .map(|m| m.dim())
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let mut flat = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if im.dim() != (h, w) {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
            flat.extend(im.iter().copied());
        }
        let t = Tensor::from_vec(flat, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Per-class scores `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct LogitMap {
    data: Tensor,
}

impl LogitMap {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn probabilities(&self) -> Result<Tensor> {
        softmax_classes(&self.data)
    }

    pub fn labels(&self) -> Result<LabelMap> {
        pseudo_label(&self.data)
    }
}

/// Decoder features before the classification head, `(B, F, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

#[derive(Debug, Clone)]
enum Body {
    Cnn(CnnUnet),
    Mamba(MambaUnet),
}

/// Re-emits the safetensors JSON header with keys in sorted order, so equal
/// networks give equal bytes. The metadata map is otherwise written in hash
/// order.
fn sorted_header(data: Vec<u8>) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::Checkpoint(format!("malformed archive: {m}"));
    let n = u64::from_le_bytes(data.get(..8).ok_or_else(|| bad("short"))?.try_into().unwrap()) as usize;
    let header = data.get(8..8 + n).ok_or_else(|| bad("header length"))?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
    let mut json = serde_json::to_vec(&value).map_err(|e| bad(&e.to_string()))?;
    json.resize(json.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + json.len() + data.len() - 8 - n);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data[8 + n..]);
    Ok(out)
}

/// A built network together with its parameters and running statistics.
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    body: Body,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

/// Builds a single-precision network whose initial parameters depend only on
/// `(spec, seed)`.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    Network::new(spec, seed, DType::F32)
}

impl Network {
    pub fn new(spec: &NetworkSpec, seed: u64, dtype: DType) -> Result<Self> {
        Self::assemble(spec, ParamStore::fresh(seed, dtype))
    }

    fn assemble(spec: &NetworkSpec, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let body = match spec.variant {
            Variant::CnnUnet => Body::Cnn(CnnUnet::new(&mut store, spec.base_width, 1, spec.classes)?),
            Variant::MambaUnet => {
                let block = VssConfig {
                    discretization: spec.discretization,
                    ..VssConfig::new(spec.embed_dim, spec.state_size)
                };
                Body::Mamba(MambaUnet::new(
                    &mut store,
                    &MambaLayout {
                        in_chans: spec.in_chans,
                        patch: spec.patch_size,
                        embed_dim: spec.embed_dim,
                        depths: &spec.depths,
                        block,
                        classes: spec.classes,
                    },
                )?)
            }
        };
        store.finish()?;
        Ok(Self {
            spec: spec.clone(),
            store,
            body,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, batch: &ImageBatch) -> Result<(LogitMap, FeatureMap)> {
        self.forward_mode(batch.tensor(), false)
    }

    /// Forward pass on a raw `(B, 1, S, S)` tensor. `train` selects batch
    /// statistics in batch-norm layers and updates their running averages.
    pub fn forward_mode(&self, x: &Tensor, train: bool) -> Result<(LogitMap, FeatureMap)> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.spec.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "{} expects (B, 1, {s}, {s}) input, got {:?}",
                self.spec.variant,
                x.dims()
            )));
        }
        let x = x.to_dtype(self.dtype())?;
        let (logits, features) = match &self.body {
            Body::Cnn(net) => net.forward(&x, train)?,
            Body::Mamba(net) => net.forward(&x)?,
        };
        Ok((LogitMap { data: logits }, FeatureMap { data: features }))
    }

    /// Trainable parameters in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.store.params().values().cloned().collect()
    }

    pub fn named_parameters(&self) -> &BTreeMap<String, Var> {
        self.store.params()
    }

    pub fn named_buffers(&self) -> &BTreeMap<String, Var> {
        self.store.buffers()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Parameter counts grouped by the first `depth` segments of each name.
    pub fn parameter_groups(&self, depth: usize) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.store.params() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += v.elem_count(),
                None => groups.push((key, v.elem_count())),
            }
        }
        groups
    }

    /// Copies every parameter and buffer from `other`, which must share the
    /// same spec.
    pub fn copy_from(&self, other: &Network) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Config("cannot copy weights between different specs".into()));
        }
        let pairs = self
            .store
            .params()
            .values()
            .zip(other.store.params().values())
            .chain(self.store.buffers().values().zip(other.store.buffers().values()));
        for (dst, src) in pairs {
            dst.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Writes a safetensors archive holding all parameters and buffers, with
    /// the spec as JSON metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, v) in self.store.params().iter().chain(self.store.buffers()) {
            tensors.push((name.clone(), v.as_tensor().contiguous()?));
        }
        let dtype = self.dtype();
        let st_dtype = match dtype {
            DType::F32 => safetensors::Dtype::F32,
            DType::F64 => safetensors::Dtype::F64,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        let mut bytes: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            let raw = match dtype {
                DType::F32 => t.flatten_all()?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                _ => t.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            bytes.push((name.clone(), raw, t.dims().to_vec()));
        }
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                safetensors::tensor::TensorView::new(st_dtype, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = serde_json::to_string(&self.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("spec".to_string(), spec),
        ]);
        let data = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, sorted_header(data)?).map_err(|e| Error::io(path, e))
    }

    /// Restores a network saved by [`Network::save`], in its stored dtype.
    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, meta) = safetensors::SafeTensors::read_metadata(&data).map_err(|e| fail(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(fail("not a network checkpoint".into()));
        }
        if meta.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
            return Err(fail(format!("unsupported version {:?}", meta.get("version"))));
        }
        let spec: NetworkSpec = serde_json::from_str(meta.get("spec").ok_or_else(|| fail("missing spec".into()))?)
            .map_err(|e| fail(format!("bad spec: {e}")))?;
        let st = safetensors::SafeTensors::deserialize(&data).map_err(|e| fail(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let mut dtype = DType::F32;
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let t = match view.dtype() {
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = view
                        .data()
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                safetensors::Dtype::F64 => {
                    dtype = DType::F64;
                    let v: Vec<f64> = view
                        .data()
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => return Err(fail(format!("tensor `{name}` has unsupported dtype {other:?}"))),
            };
            tensors.insert(name, t);
        }
        Self::assemble(&spec, ParamStore::loaded(tensors, dtype))
    }
}
