//! Segmentation metrics (Dice, accuracy, precision, sensitivity, specificity,
//! HD95, ASD), per-image IoU and report files.
//!
//! Conventions: a ratio with an empty denominator is 1; surface distances
//! use 4-connected boundaries with the image border counted as background;
//! when exactly one mask is empty, HD95 and ASD take the image diagonal.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbones::{ImageBatch, Network};
use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_same(a: &ArrayView2<u8>, b: &ArrayView2<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// One-vs-rest pixel counts for `class`.
pub fn confusion(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class: u8) -> Result<ConfusionCounts> {
    check_same(&pred, &gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Similarity {
    pub dice: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn similarity_metrics(c: &ConfusionCounts) -> Similarity {
    Similarity {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Foreground pixels with at least one 4-neighbour outside the mask.
pub fn boundary(mask: ArrayView2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[(y as usize, x as usize)];
    let mut out = Vec::new();
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (yi, xi) = (y as isize, x as isize);
        if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
            out.push((y, x));
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `seeds`.
pub fn squared_distance_transform(seeds: ArrayView2<bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut d = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        let col: Vec<f64> = d.column(x).to_vec();
        edt_1d(&col, &mut buf[..h]);
        d.column_mut(x).iter_mut().zip(&buf[..h]).for_each(|(o, v)| *o = *v);
    }
    for y in 0..h {
        let row: Vec<f64> = d.row(y).to_vec();
        edt_1d(&row, &mut buf[..w]);
        d.row_mut(y).iter_mut().zip(&buf[..w]).for_each(|(o, v)| *o = *v);
    }
    d
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn directed(from: &[(usize, usize)], to_dist: &Array2<f64>) -> Vec<f64> {
    from.iter().map(|&p| to_dist[p].sqrt()).collect()
}

/// `(hd95, asd)` between two binary masks, in pixels.
pub fn surface_distances(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("masks differ in shape: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let (h, w) = pred.dim();
    let bp = boundary(pred);
    let bg = boundary(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok((0.0, 0.0)),
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return Ok((diag, diag));
        }
        _ => {}
    }
    let seeds = |b: &[(usize, usize)]| {
        let mut m = Array2::from_elem((h, w), false);
        b.iter().for_each(|&p| m[p] = true);
        m
    };
    let d_pg = directed(&bp, &squared_distance_transform(seeds(&bg).view()));
    let d_gp = directed(&bg, &squared_distance_transform(seeds(&bp).view()));
    let hd95 = percentile(&d_pg, 0.95).max(percentile(&d_gp, 0.95));
    let asd = (d_pg.iter().sum::<f64>() + d_gp.iter().sum::<f64>()) / (d_pg.len() + d_gp.len()) as f64;
    Ok((hd95, asd))
}

/// Mean over foreground classes `1..classes` of `tp / (tp + fp + fn)`.
pub fn per_image_iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, classes: usize) -> Result<f64> {
    check_same(&pred, &gt)?;
    let mut total = 0.0;
    for c in 1..classes {
        let k = confusion(pred, gt, c as u8)?;
        total += ratio(k.tp, k.tp + k.fp + k.fn_);
    }
    Ok(total / (classes - 1).max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub dice: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl MetricRow {
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let sum = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            dice: sum(|r| r.dice),
            accuracy: sum(|r| r.accuracy),
            precision: sum(|r| r.precision),
            sensitivity: sum(|r| r.sensitivity),
            specificity: sum(|r| r.specificity),
            hd95: sum(|r| r.hd95),
            asd: sum(|r| r.asd),
        }
    }
}

/// All seven metrics for one class of one image.
pub fn class_metrics(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class: u8) -> Result<MetricRow> {
    let s = similarity_metrics(&confusion(pred, gt, class)?);
    let (hd95, asd) = surface_distances(pred.mapv(|v| v == class).view(), gt.mapv(|v| v == class).view())?;
    Ok(MetricRow {
        dice: s.dice,
        accuracy: s.accuracy,
        precision: s.precision,
        sensitivity: s.sensitivity,
        specificity: s.specificity,
        hd95,
        asd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub case_id: String,
    pub slice_index: usize,
    /// Mean over foreground classes.
    pub metrics: MetricRow,
    pub per_class: Vec<MetricRow>,
    pub iou: f64,
}

pub fn image_result(
    case_id: &str,
    slice_index: usize,
    pred: ArrayView2<u8>,
    gt: ArrayView2<u8>,
    classes: usize,
) -> Result<ImageResult> {
    let per_class = (1..classes)
        .map(|c| class_metrics(pred, gt, c as u8))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageResult {
        case_id: case_id.to_string(),
        slice_index,
        metrics: MetricRow::mean(&per_class),
        per_class,
        iou: per_image_iou(pred, gt, classes)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub images: Vec<ImageResult>,
    pub aggregate: MetricRow,
    pub mean_iou: f64,
}

impl Evaluation {
    pub fn from_images(images: Vec<ImageResult>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Validation("nothing to evaluate".into()));
        }
        let rows: Vec<MetricRow> = images.iter().map(|r| r.metrics).collect();
        let mean_iou = images.iter().map(|r| r.iou).sum::<f64>() / images.len() as f64;
        Ok(Self {
            aggregate: MetricRow::mean(&rows),
            images,
            mean_iou,
        })
    }

    pub fn dice_values(&self) -> Vec<f64> {
        self.images.iter().map(|r| r.metrics.dice).collect()
    }

    pub fn iou_values(&self) -> Vec<f64> {
        self.images.iter().map(|r| r.iou).collect()
    }
}

/// Scores predicted masks against the ground-truth masks of `samples`.
pub fn evaluate_predictions(samples: &[Sample], preds: &[Array2<u8>], classes: usize) -> Result<Evaluation> {
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples but {} predictions", samples.len(), preds.len())));
    }
    let images = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let gt = s.mask.as_ref().ok_or_else(|| {
                Error::Validation(format!("slice {} of case `{}` has no mask", s.slice_index, s.case_id))
            })?;
            image_result(&s.case_id, s.slice_index, p.view(), gt.view(), classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_images(images)
}

/// Argmax masks from a frozen network, processed `batch_size` images at a
/// time. Images must already have the network's input size.
pub fn predict_masks(network: &Network, images: &[&Array2<f32>], batch_size: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let owned: Vec<Array2<f32>> = chunk.iter().map(|a| (*a).clone()).collect();
        let batch = ImageBatch::from_images(&owned, network.dtype())?;
        let (logits, _) = network.forward(&batch)?;
        out.extend(logits.labels()?.to_masks()?);
    }
    Ok(out)
}

/// Mean over images of the mean foreground-class Dice, computed from pixel
/// counts only. Equals `evaluate_testset(..).aggregate.dice`.
pub fn mean_dice(network: &Network, samples: &[Sample], classes: usize, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("empty validation set".into()));
    }
    let images: Vec<&Array2<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(network, &images, batch_size)?;
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s.mask.as_ref().ok_or_else(|| {
            Error::Validation(format!("slice {} of case `{}` has no mask", s.slice_index, s.case_id))
        })?;
        let per_class = (1..classes)
            .map(|c| Ok(similarity_metrics(&confusion(p.view(), gt.view(), c as u8)?).dice))
            .collect::<Result<Vec<f64>>>()?;
        total += per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Predicts every sample and scores it; see [`evaluate_predictions`].
pub fn evaluate_testset(network: &Network, samples: &[Sample], classes: usize, batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let images: Vec<&Array2<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(network, &images, batch_size)?;
    evaluate_predictions(samples, &preds, classes)
}

/// Five-number summary with Tukey hinges: quartiles are medians of the lower
/// and upper halves, the median itself excluded when the count is odd.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Validation("box statistics need at least one value".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let half = n / 2;
    let (lower, upper) = if n == 1 { (&v[..], &v[..]) } else { (&v[..half], &v[n - half..]) };
    Ok(BoxStats {
        min: v[0],
        q1: median_sorted(lower),
        median: median_sorted(&v),
        q3: median_sorted(upper),
        max: v[n - 1],
        n,
    })
}

/// Number of equal-width IoU bins on `[0, 1]`.
pub const IOU_BINS: usize = 10;

/// Counts per bin `[i/10, (i+1)/10)`, the last bin closed at 1.
pub fn iou_histogram(values: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; IOU_BINS];
    for &v in values {
        let i = ((v * IOU_BINS as f64).floor() as isize).clamp(0, IOU_BINS as isize - 1) as usize;
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 / IOU_BINS as f64, (i + 1) as f64 / IOU_BINS as f64, c))
        .collect()
}

/// One line of `metrics.csv`: `scope` is `image` or `aggregate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scope: String,
    pub case_id: String,
    pub slice_index: String,
    pub dice: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hd95: f64,
    pub asd: f64,
    pub iou: f64,
}

impl MetricsRecord {
    fn new(scope: &str, case_id: &str, slice_index: String, m: &MetricRow, iou: f64) -> Self {
        Self {
            scope: scope.into(),
            case_id: case_id.into(),
            slice_index,
            dice: m.dice,
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            hd95: m.hd95,
            asd: m.asd,
            iou,
        }
    }
}

pub fn metrics_records(eval: &Evaluation) -> Vec<MetricsRecord> {
    let mut rows: Vec<MetricsRecord> = eval
        .images
        .iter()
        .map(|r| MetricsRecord::new("image", &r.case_id, r.slice_index.to_string(), &r.metrics, r.iou))
        .collect();
    rows.push(MetricsRecord::new("aggregate", "", String::new(), &eval.aggregate, eval.mean_iou));
    rows
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads back the per-image rows of a `metrics.csv`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect::<Result<Vec<MetricsRecord>>>()
}

/// Writes `metrics.csv`.
pub fn write_metrics_csv(eval: &Evaluation, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for r in metrics_records(eval) {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes `iou_histogram.csv` and `dice_boxplot.csv` from per-image values.
pub fn write_distributions(method: &str, dice: &[f64], iou: &[f64], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("iou_histogram.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["bin_lower", "bin_upper", "count"]).map_err(|e| csv_err(&path, e))?;
    for (lo, hi, c) in iou_histogram(iou) {
        w.write_record([format!("{lo:.1}"), format!("{hi:.1}"), c.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("dice_boxplot.csv");
    let b = box_stats(dice)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["method", "min", "q1", "median", "q3", "max", "n"])
        .map_err(|e| csv_err(&path, e))?;
    w.write_record([
        method.to_string(),
        b.min.to_string(),
        b.q1.to_string(),
        b.median.to_string(),
        b.q3.to_string(),
        b.max.to_string(),
        b.n.to_string(),
    ])
    .map_err(|e| csv_err(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes `metrics.csv`, `iou_histogram.csv` and `dice_boxplot.csv`.
pub fn emit_report(eval: &Evaluation, method: &str, out_dir: &Path) -> Result<()> {
    write_metrics_csv(eval, out_dir)?;
    write_distributions(method, &eval.dice_values(), &eval.iou_values(), out_dir)
}

/// Rebuilds the distribution files from an existing `metrics.csv`.
pub fn report_from_metrics(metrics: &Path, method: &str, out_dir: &Path) -> Result<()> {
    let rows: Vec<MetricsRecord> = read_metrics_csv(metrics)?
        .into_iter()
        .filter(|r| r.scope == "image")
        .collect();
    if rows.is_empty() {
        return Err(Error::Validation(format!("{} has no per-image rows", metrics.display())));
    }
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let iou: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    write_distributions(method, &dice, &iou, out_dir)
}
