//! Joint training of the two networks: supervised Dice+CE on the labelled
//! half of each batch, cross pseudo-label supervision on the unlabelled half,
//! and the projector consistency term on the whole batch, summed with unit
//! weights and optimized by momentum SGD in a single backward pass.

use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{Network, NetworkSpec, Variant};
use crate::data::{augment, load_dataset, resize_sample, sample_rng, split, Sample, SplitManifest, Splits};
use crate::error::{Error, Result};
use crate::evaluation::mean_dice;
use crate::objectives::{
    contrastive_loss, cross_supervision_loss, project_features, supervised_loss, total_loss, LabelMap,
    LossBreakdown, DEFAULT_PROJECTOR_GRID,
};

/// Which per-pixel maps the consistency projector compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastSource {
    /// Softmax class probabilities of both networks.
    #[default]
    Probabilities,
    /// Penultimate decoder features; both networks must emit the same width.
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Labelled images per batch; the rest of the batch is unlabelled.
    pub labelled_per_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub validate_every: usize,
    pub seed: u64,
    /// Build both networks from the same seed (identical weights when the
    /// specs match).
    pub shared_init: bool,
    pub network1: NetworkSpec,
    pub network2: NetworkSpec,
    pub supervised: bool,
    pub semi: bool,
    pub contra: bool,
    pub projector_grid: usize,
    pub contrast_source: ContrastSource,
    pub augment: bool,
    pub deterministic: bool,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 16,
            labelled_per_batch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            validate_every: 200,
            seed: 1337,
            shared_init: false,
            network1: NetworkSpec::mamba_unet(4),
            network2: NetworkSpec::cnn_unet(4),
            supervised: true,
            semi: true,
            contra: true,
            projector_grid: DEFAULT_PROJECTOR_GRID,
            contrast_source: ContrastSource::Probabilities,
            augment: true,
            deterministic: true,
            precision: Precision::F32,
            eval_batch_size: 8,
        }
    }
}

fn feature_width(spec: &NetworkSpec) -> usize {
    match spec.variant {
        Variant::CnnUnet => spec.base_width,
        Variant::MambaUnet => spec.embed_dim,
    }
}

impl TrainConfig {
    pub fn unlabelled_per_batch(&self) -> usize {
        self.batch_size.saturating_sub(self.labelled_per_batch)
    }

    pub fn uses_unlabelled(&self) -> bool {
        self.semi || self.contra
    }

    pub fn classes(&self) -> usize {
        self.network1.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.network1.validate()?;
        self.network2.validate()?;
        if self.batch_size == 0 || self.labelled_per_batch == 0 || self.labelled_per_batch > self.batch_size {
            return bad(format!(
                "labelled_per_batch must be in 1..={}, got {}",
                self.batch_size, self.labelled_per_batch
            ));
        }
        if self.uses_unlabelled() && self.unlabelled_per_batch() == 0 {
            return bad("semi/contra terms need unlabelled images in the batch".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive, momentum in [0, 1), weight_decay non-negative".into());
        }
        if self.validate_every == 0 || self.eval_batch_size == 0 || self.projector_grid == 0 {
            return bad("validate_every, eval_batch_size and projector_grid must be positive".into());
        }
        if self.network1.classes != self.network2.classes || self.network1.input_size != self.network2.input_size {
            return bad("both networks must share classes and input_size".into());
        }
        if self.projector_grid > self.network1.input_size {
            return bad(format!(
                "projector_grid {} exceeds input size {}",
                self.projector_grid, self.network1.input_size
            ));
        }
        if self.contra
            && self.contrast_source == ContrastSource::Features
            && feature_width(&self.network1) != feature_width(&self.network2)
        {
            return bad(format!(
                "feature consistency needs equal decoder widths, got {} and {}",
                feature_width(&self.network1),
                feature_width(&self.network2)
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v` (classical, non-Nesterov).
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor().detach();
            let mut d = g.detach();
            if self.weight_decay != 0.0 {
                d = (d + (&theta * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + d)?,
                _ => d,
            };
            var.set(&(theta - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    pub fn velocity(&self, i: usize) -> Option<&Tensor> {
        self.velocity[i].as_ref()
    }
}

pub fn build_optimizer(network: &Network, config: &TrainConfig) -> Sgd {
    Sgd::new(network.vars(), config.learning_rate, config.momentum, config.weight_decay)
}

/// Cycles through one subset, reshuffling at the start of every pass.
#[derive(Debug, Clone)]
struct Stream {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    tag: u64,
}

impl Stream {
    fn new(len: usize, seed: u64, tag: u64) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            tag,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            self.order
                .shuffle(&mut sample_rng(self.seed ^ self.tag, self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One training batch: labelled images with masks, then unlabelled images.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub labelled: Tensor,
    pub labels: LabelMap,
    pub unlabelled: Option<Tensor>,
}

impl TrainingBatch {
    pub fn labelled_len(&self) -> usize {
        self.labelled.dim(0).unwrap_or(0)
    }
}

/// Draws labelled and unlabelled samples from independent shuffled streams.
pub struct BatchComposer<'a> {
    labelled: &'a [Sample],
    unlabelled: &'a [Sample],
    l_stream: Stream,
    u_stream: Stream,
    n_labelled: usize,
    n_unlabelled: usize,
    classes: usize,
    augment: bool,
    seed: u64,
    draws: u64,
    dtype: DType,
}

impl<'a> BatchComposer<'a> {
    pub fn new(labelled: &'a [Sample], unlabelled: &'a [Sample], config: &TrainConfig) -> Result<Self> {
        if labelled.is_empty() {
            return Err(Error::Config("the labelled set is empty".into()));
        }
        let n_unlabelled = if config.uses_unlabelled() { config.unlabelled_per_batch() } else { 0 };
        if n_unlabelled > 0 && unlabelled.is_empty() {
            return Err(Error::Config("the unlabelled set is empty".into()));
        }
        Ok(Self {
            labelled,
            unlabelled,
            l_stream: Stream::new(labelled.len(), config.seed, 0x4c41_4245_4c4c_4544),
            u_stream: Stream::new(unlabelled.len(), config.seed, 0x554e_4c41_4245_4c4c),
            n_labelled: config.labelled_per_batch,
            n_unlabelled,
            classes: config.classes(),
            augment: config.augment,
            seed: config.seed,
            draws: 0,
            dtype: config.precision.dtype(),
        })
    }

    fn draw(&mut self, s: &Sample) -> Sample {
        self.draws += 1;
        if self.augment {
            augment(s, &mut sample_rng(self.seed, self.draws))
        } else {
            s.clone()
        }
    }

    fn stack(images: &[Sample], dtype: DType) -> Result<Tensor> {
        let (h, w) = images[0].image.dim();
        let flat: Vec<f32> = images.iter().flat_map(|s| s.image.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn next_batch(&mut self) -> Result<TrainingBatch> {
        let labelled: Vec<Sample> = (0..self.n_labelled)
            .map(|_| {
                let i = self.l_stream.next();
                self.draw(&self.labelled[i])
            })
            .collect();
        let unlabelled: Vec<Sample> = (0..self.n_unlabelled)
            .map(|_| {
                let i = self.u_stream.next();
                self.draw(&self.unlabelled[i])
            })
            .collect();
        let masks = labelled
            .iter()
            .map(|s| {
                s.mask.clone().ok_or_else(|| {
                    Error::Validation(format!("labelled slice {} of `{}` has no mask", s.slice_index, s.case_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingBatch {
            labelled: Self::stack(&labelled, self.dtype)?,
            labels: LabelMap::from_masks(&masks, self.classes)?,
            unlabelled: if unlabelled.is_empty() {
                None
            } else {
                Some(Self::stack(&unlabelled, self.dtype)?)
            },
        })
    }
}

/// Both networks and their optimizers.
pub struct TrainState {
    pub config: TrainConfig,
    pub net1: Network,
    pub net2: Network,
    pub opt1: Sgd,
    pub opt2: Sgd,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let seed2 = if config.shared_init { config.seed } else { config.seed.wrapping_add(1) };
        let net1 = Network::new(&config.network1, config.seed, dtype)?;
        let net2 = Network::new(&config.network2, seed2, dtype)?;
        let opt1 = build_optimizer(&net1, config);
        let opt2 = build_optimizer(&net2, config);
        Ok(Self {
            config: config.clone(),
            net1,
            net2,
            opt1,
            opt2,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Loss terms of one batch as differentiable scalars (disabled terms absent).
pub struct StepLosses {
    pub sup1: Option<Tensor>,
    pub sup2: Option<Tensor>,
    pub semi1: Option<Tensor>,
    pub semi2: Option<Tensor>,
    pub contra: Option<Tensor>,
}

impl StepLosses {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose().map(|x| x.unwrap_or(0.0));
        total_loss(v(&self.sup1)?, v(&self.sup2)?, v(&self.semi1)?, v(&self.semi2)?, v(&self.contra)?)
    }

    pub fn total(&self) -> Result<Option<Tensor>> {
        let mut acc: Option<Tensor> = None;
        for t in [&self.sup1, &self.sup2, &self.semi1, &self.semi2, &self.contra].into_iter().flatten() {
            acc = Some(match acc {
                None => t.clone(),
                Some(a) => (a + t)?,
            });
        }
        Ok(acc)
    }
}

/// Forward both networks on `batch` in training mode and build every enabled
/// loss term. Unlabelled images are only forwarded when a term uses them.
pub fn compute_losses(state: &TrainState, batch: &TrainingBatch) -> Result<StepLosses> {
    let cfg = &state.config;
    let nl = batch.labelled_len();
    let x = match (&batch.unlabelled, cfg.uses_unlabelled()) {
        (Some(u), true) => Tensor::cat(&[&batch.labelled, u], 0)?,
        _ => batch.labelled.clone(),
    };
    let nu = x.dim(0)? - nl;
    let (l1, f1) = state.net1.forward_mode(&x, true)?;
    let (l2, f2) = state.net2.forward_mode(&x, true)?;
    let (l1, l2) = (l1.tensor(), l2.tensor());

    let (sup1, sup2) = if cfg.supervised {
        (
            Some(supervised_loss(&l1.narrow(0, 0, nl)?, &batch.labels)?),
            Some(supervised_loss(&l2.narrow(0, 0, nl)?, &batch.labels)?),
        )
    } else {
        (None, None)
    };
    let (semi1, semi2) = if cfg.semi && nu > 0 {
        let (a, b) = cross_supervision_loss(&l1.narrow(0, nl, nu)?, &l2.narrow(0, nl, nu)?)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let contra = if cfg.contra {
        let (m1, m2) = match cfg.contrast_source {
            ContrastSource::Probabilities => (crate::nn::softmax_classes(l1)?, crate::nn::softmax_classes(l2)?),
            ContrastSource::Features => (f1.tensor().clone(), f2.tensor().clone()),
        };
        let p1 = project_features(&m1, cfg.projector_grid)?;
        let p2 = project_features(&m2, cfg.projector_grid)?;
        Some(contrastive_loss(&p1, &p2)?)
    } else {
        None
    };
    Ok(StepLosses {
        sup1,
        sup2,
        semi1,
        semi2,
        contra,
    })
}

/// One optimization step on the summed loss; refuses to update on a
/// non-finite term.
pub fn train_step(state: &mut TrainState, batch: &TrainingBatch) -> Result<LossBreakdown> {
    let losses = compute_losses(state, batch)?;
    let breakdown = losses.breakdown()?;
    if let Some(total) = losses.total()? {
        let grads = total.backward()?;
        state.opt1.step(&grads)?;
        state.opt2.step(&grads)?;
    }
    Ok(breakdown)
}

/// Mean foreground Dice of a frozen network on the validation set.
pub fn validate(network: &Network, validation: &[Sample], batch_size: usize) -> Result<f64> {
    mean_dice(network, validation, network.spec().classes, batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub val_dice_f1: f64,
    pub val_dice_f2: f64,
    pub checkpoint_f1: Option<PathBuf>,
    pub checkpoint_f2: Option<PathBuf>,
    pub config_hash: String,
}

/// One row of `train_log.csv`; validation columns are empty between
/// validations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub contra: f64,
    pub total: f64,
    pub val_dice_f1: Option<f64>,
    pub val_dice_f2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: CheckpointRecord,
    pub log: Vec<LogRow>,
    /// Best-record history, one entry per improvement.
    pub improvements: Vec<CheckpointRecord>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const RECORD_FILE: &str = "best_record.json";
pub const BEST_F1: &str = "best_f1.safetensors";
pub const BEST_F2: &str = "best_f2.safetensors";

fn save_atomic(net: &Network, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    net.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_record(record: &CheckpointRecord, out_dir: &Path) -> Result<()> {
    let path = out_dir.join(RECORD_FILE);
    let tmp = path.with_extension("tmp");
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Runs the full loop on in-memory splits (images already at the networks'
/// input size). Selection uses network 1's validation Dice.
pub fn train_on(config: &TrainConfig, splits: &Splits, out_dir: &Path) -> Result<(TrainOutcome, TrainState)> {
    in_pool(config.deterministic, || {
        let mut state = TrainState::new(config)?;
        let outcome = run(&mut state, splits, out_dir)?;
        Ok((outcome, state))
    })
}

/// Deterministic mode pins the rayon pool to one thread.
fn in_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if !deterministic {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?
        .install(f)
}

fn run(state: &mut TrainState, splits: &Splits, out_dir: &Path) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = csv::Writer::from_path(&log_path).map_err(|e| Error::Parse {
        path: log_path.clone(),
        reason: e.to_string(),
    })?;
    let csv_fail = |e: csv::Error| Error::Parse {
        path: log_path.clone(),
        reason: e.to_string(),
    };
    let hash = cfg.hash();
    let has_val = !splits.validation.is_empty();
    let mut record = CheckpointRecord {
        iteration: 0,
        val_dice_f1: f64::NAN,
        val_dice_f2: f64::NAN,
        checkpoint_f1: None,
        checkpoint_f2: None,
        config_hash: hash.clone(),
    };
    if cfg.iterations == 0 {
        if has_val {
            record.val_dice_f1 = validate(&state.net1, &splits.validation, cfg.eval_batch_size)?;
            record.val_dice_f2 = validate(&state.net2, &splits.validation, cfg.eval_batch_size)?;
        }
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;
        return Ok(TrainOutcome {
            record,
            log: Vec::new(),
            improvements: Vec::new(),
        });
    }
    if !has_val {
        return Err(Error::Config("training needs a non-empty validation set".into()));
    }

    let mut composer = BatchComposer::new(&splits.labelled, &splits.unlabelled, &cfg)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut improvements = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for it in 1..=cfg.iterations {
        let batch = composer.next_batch()?;
        let b = match train_step(state, &batch) {
            Ok(b) => b,
            Err(e) => {
                log_file.flush().map_err(|e| Error::io(&log_path, e))?;
                return Err(e);
            }
        };
        let (mut v1, mut v2) = (None, None);
        if it % cfg.validate_every == 0 || it == cfg.iterations {
            let d1 = validate(&state.net1, &splits.validation, cfg.eval_batch_size)?;
            let d2 = validate(&state.net2, &splits.validation, cfg.eval_batch_size)?;
            info!("iteration {it}: loss {:.4}, val dice f1 {d1:.4}, f2 {d2:.4}", b.total);
            (v1, v2) = (Some(d1), Some(d2));
            if d1 > best {
                best = d1;
                let p1 = out_dir.join(BEST_F1);
                let p2 = out_dir.join(BEST_F2);
                save_atomic(&state.net1, &p1)?;
                save_atomic(&state.net2, &p2)?;
                record = CheckpointRecord {
                    iteration: it,
                    val_dice_f1: d1,
                    val_dice_f2: d2,
                    checkpoint_f1: Some(p1),
                    checkpoint_f2: Some(p2),
                    config_hash: hash.clone(),
                };
                write_record(&record, out_dir)?;
                improvements.push(record.clone());
            }
        }
        let row = LogRow {
            iteration: it,
            sup1: b.sup1,
            sup2: b.sup2,
            semi1: b.semi1,
            semi2: b.semi2,
            contra: b.contra,
            total: b.total,
            val_dice_f1: v1,
            val_dice_f2: v2,
        };
        log_file.serialize(&row).map_err(csv_fail)?;
        log.push(row);
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        record,
        log,
        improvements,
    })
}

/// Loads the dataset under `data_root`, resizes every slice to the networks'
/// input size, splits it by `manifest` and trains.
pub fn train(config: &TrainConfig, data_root: &Path, manifest: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = SplitManifest::read(manifest)?;
    let size = config.network1.input_size;
    let samples: Vec<Sample> = load_dataset(data_root, config.classes())?
        .iter()
        .map(|s| resize_sample(s, size))
        .collect();
    let splits = split(&samples, &manifest)?;
    Ok(train_on(config, &splits, out_dir)?.0)
}
