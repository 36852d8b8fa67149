//! Acceptance suite. Runs every criterion in order and prints one verdict line
//! each; pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semimamba::backbones::{build_network, Network, NetworkSpec, Variant};
use semimamba::data::{split, synth_generate, synth_samples, Splits, SynthConfig};
use semimamba::evaluation::{class_metrics, mean_dice};
use semimamba::nn::ParamStore;
use semimamba::objectives::{
    contrastive_loss, cross_entropy_loss, cross_supervision_loss, dice_loss, project_features, LabelMap,
};
use semimamba::ssm::{
    cross_merge, cross_scan, selective_scan, selective_scan_tensor, zoh_discretize, ContinuousSSM, Discretization,
    Reduction, StateMatrix, VssBlock, VssConfig,
};
use semimamba::trainer::{compute_losses, train_on, BatchComposer, TrainConfig, TrainState};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// `e^{M}` by plain Taylor summation; only used with `‖M‖ ≤ 1`.
fn expm_series(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..60 {
        term = &term * m / k as f64;
        sum += &term;
    }
    sum
}

/// `Σ_k Δ^{k+1} A^k / (k+1)!`, equal to `(e^{ΔA} - I) A⁻¹` without an inverse.
fn input_gain_series(a: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n) * delta;
    let mut sum = term.clone();
    for k in 1..60 {
        term = &term * a * delta / (k + 1) as f64;
        sum += &term;
    }
    sum
}

fn random_stable(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut a = DMatrix::from_fn(n, n, |_, _| r.random_range(-0.3..0.3));
    for i in 0..n {
        a[(i, i)] -= 1.0 + i as f64 * 0.25;
    }
    a
}

fn criterion_1() -> Outcome {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = 2 + trial % 4;
        let a = random_stable(n, &mut r);
        let b = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let c = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let dense = ContinuousSSM::new(StateMatrix::Dense(a.clone()), b.clone(), c.clone(), 0.0).map_err(|e| e.to_string())?;
        let diag_a = DVector::from_fn(n, |i, _| a[(i, i)]);
        let diag = ContinuousSSM::new(StateMatrix::Diagonal(diag_a.clone()), b.clone(), c, 0.0).map_err(|e| e.to_string())?;
        for delta in [0.5, 0.1, 1e-2, 1e-3] {
            let d = zoh_discretize(&dense, delta, Discretization::Exact).map_err(|e| e.to_string())?;
            let want_a = expm_series(&(&a * delta));
            let want_b = input_gain_series(&a, delta) * &b;
            worst = worst.max(rel(d.a_bar.to_dense().as_slice(), want_a.as_slice()));
            worst = worst.max(rel(d.b_bar.as_slice(), want_b.as_slice()));
            let dm = DMatrix::from_diagonal(&diag_a);
            let d = zoh_discretize(&diag, delta, Discretization::Exact).map_err(|e| e.to_string())?;
            worst = worst.max(rel(d.a_bar.to_dense().as_slice(), expm_series(&(&dm * delta)).as_slice()));
            worst = worst.max(rel(d.b_bar.as_slice(), (input_gain_series(&dm, delta) * &b).as_slice()));
        }
    }
    check(worst < 1e-10, format!("expm oracle relative error {worst:.3e}"))?;

    // first-order error slope
    let a = random_stable(4, &mut r);
    let b = DVector::from_fn(4, |_, _| r.random_range(-1.0..1.0));
    let m = ContinuousSSM::new(StateMatrix::Dense(a.clone()), b.clone(), DVector::zeros(4), 0.0).map_err(|e| e.to_string())?;
    let deltas = [1e-1, 1e-2, 1e-3];
    let mut pts = Vec::new();
    for &delta in &deltas {
        let approx = zoh_discretize(&m, delta, Discretization::FirstOrder).map_err(|e| e.to_string())?;
        let exact = input_gain_series(&a, delta) * &b;
        pts.push((delta.ln(), (approx.b_bar - exact).norm().ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    check((slope - 2.0).abs() <= 0.15, format!("first-order slope {slope:.4}"))?;

    // cross_merge ∘ cross_scan
    for (shape, dtype) in [((2, 3, 4, 5), DType::F32), ((1, 2, 7, 3), DType::F64), ((3, 1, 1, 6), DType::F32)] {
        let (a, b, c, d) = shape;
        let x = uniform(&mut r, &[a, b, c, d], -1.0, 1.0).to_dtype(dtype).unwrap();
        let back = cross_merge(&cross_scan(&x).map_err(|e| e.to_string())?, Reduction::Mean).map_err(|e| e.to_string())?;
        check(flat(&back) == flat(&x), format!("merge∘scan not bit-exact for {shape:?}"))?;
    }

    // linearity of the scan, reference and tensor kernel
    let mut lin: f64 = 0.0;
    let model = ContinuousSSM::s4d_real(
        6,
        DVector::from_fn(6, |_, _| r.random_range(-1.0..1.0)),
        DVector::from_fn(6, |_, _| r.random_range(-1.0..1.0)),
        0.3,
    )
    .map_err(|e| e.to_string())?;
    let len = 40;
    let deltas: Vec<f64> = (0..len).map(|_| r.random_range(0.01..0.5)).collect();
    let x1: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    let x2: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    let (alpha, beta) = (1.7, -0.6);
    let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
    let h0 = DVector::zeros(6);
    for mode in [Discretization::Exact, Discretization::FirstOrder] {
        let y1 = selective_scan(&x1, &deltas, &model, &h0, mode).map_err(|e| e.to_string())?;
        let y2 = selective_scan(&x2, &deltas, &model, &h0, mode).map_err(|e| e.to_string())?;
        let ym = selective_scan(&mix, &deltas, &model, &h0, mode).map_err(|e| e.to_string())?;
        let want: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| alpha * a + beta * b).collect();
        lin = lin.max(rel(&ym, &want));
    }
    let dev = Device::Cpu;
    let (bsz, ch, l, n) = (2, 8, 12, 4);
    let t = |v: Vec<f64>, s: &[usize]| Tensor::from_vec(v, s, &dev).unwrap();
    let rand_vec = |r: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64| (0..k).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
    let u1 = t(rand_vec(&mut r, bsz * ch * l, -1.0, 1.0), &[bsz, ch, l]);
    let u2 = t(rand_vec(&mut r, bsz * ch * l, -1.0, 1.0), &[bsz, ch, l]);
    let dl = t(rand_vec(&mut r, bsz * ch * l, 0.01, 0.5), &[bsz, ch, l]);
    let a = t(rand_vec(&mut r, ch * n, -3.0, -0.1), &[ch, n]);
    let bm = t(rand_vec(&mut r, bsz * 4 * n * l, -1.0, 1.0), &[bsz, 4, n, l]);
    let cm = t(rand_vec(&mut r, bsz * 4 * n * l, -1.0, 1.0), &[bsz, 4, n, l]);
    let dskip = t(rand_vec(&mut r, ch, -1.0, 1.0), &[ch]);
    let run = |u: &Tensor| {
        flat(&selective_scan_tensor(u, &dl, &a, &bm, &cm, Some(&dskip), Discretization::Exact).unwrap())
    };
    let um = ((&u1 * alpha).unwrap() + (&u2 * beta).unwrap()).unwrap();
    let want: Vec<f64> = run(&u1).iter().zip(run(&u2)).map(|(a, b)| alpha * a + beta * b).collect();
    lin = lin.max(rel(&run(&um), &want));
    check(lin < 1e-10, format!("scan linearity error {lin:.3e}"))?;
    Ok(format!("expm rel err {worst:.1e}, first-order slope {slope:.3}, merge∘scan bit-exact, linearity {lin:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

/// Norm-wise relative error between the autograd gradient of `f` at `x0`
/// and central differences.
fn grad_error(x0: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let x = Var::from_tensor(x0).unwrap();
    let grads = f(x.as_tensor()).backward().unwrap();
    let analytic = flat(grads.get(&x).unwrap());
    let base = flat(x0);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, x0.shape(), x0.device()).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    rel(&analytic, &numeric)
}

/// Same as [`grad_error`] for a parameter that lives inside a layer.
fn param_grad_error(param: &Var, f: &dyn Fn() -> Tensor) -> f64 {
    let grads = f().backward().unwrap();
    let analytic = grads.get(param).map(flat).unwrap_or_else(|| vec![0.0; param.elem_count()]);
    let base = flat(param.as_tensor());
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                param.set(&Tensor::from_vec(v, param.shape(), param.device()).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let g = (eval(h) - eval(-h)) / (2.0 * h);
            param.set(&Tensor::from_vec(base.clone(), param.shape(), param.device()).unwrap()).unwrap();
            g
        })
        .collect();
    rel(&analytic, &numeric)
}

fn criterion_2() -> Outcome {
    let mut r = rng(5);
    let masks: Vec<Array2<u8>> = vec![Array2::from_shape_fn((4, 4), |_| r.random_range(0..4u8))];
    let target = LabelMap::from_masks(&masks, 4).map_err(|e| e.to_string())?;
    let logits = uniform(&mut r, &[1, 4, 4, 4], -2.0, 2.0);
    let probs = semimamba::nn::softmax_classes(&logits).map_err(|e| e.to_string())?;
    let mut report = Vec::new();

    let e = grad_error(&probs, &|p| dice_loss(p, &target).unwrap());
    report.push(("dice", e));
    let e = grad_error(&probs, &|p| cross_entropy_loss(p, &target).unwrap());
    report.push(("cross-entropy", e));

    let feats = uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let other = uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
    let weights = uniform(&mut r, &[1, 4, 2, 2], -1.0, 1.0);
    let e = grad_error(&feats, &|f| {
        (project_features(f, 2).unwrap().tensor() * &weights).unwrap().sum_all().unwrap()
    });
    report.push(("project_features", e));
    let p_other = project_features(&other, 2).unwrap();
    let e = grad_error(&feats, &|f| contrastive_loss(&project_features(f, 2).unwrap(), &p_other).unwrap());
    report.push(("contrastive", e));

    let mut store = ParamStore::fresh(3, DType::F64);
    let block = VssBlock::new(&mut store, "vss", &VssConfig::new(4, 4)).map_err(|e| e.to_string())?;
    // at initialization the timescale path carries gradients near 1e-9, below
    // what central differences resolve, so check at a generic point instead
    for p in store.params().values() {
        p.set(&uniform(&mut r, p.dims(), -1.0, 1.0)).unwrap();
    }
    let x = uniform(&mut r, &[4, 3, 3], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3], -1.0, 1.0);
    let e = grad_error(&x, &|x| (block.forward_chw(x).unwrap() * &w).unwrap().sum_all().unwrap());
    report.push(("vss input", e));
    let mut worst_param: f64 = 0.0;
    let mut bad = Vec::new();
    for (name, p) in store.params() {
        let e = param_grad_error(p, &|| (block.forward_chw(&x).unwrap() * &w).unwrap().sum_all().unwrap());
        if e >= 1e-4 {
            bad.push(format!("{name} {e:.3e}"));
        }
        worst_param = worst_param.max(e);
    }
    check(bad.is_empty(), format!("vss parameters off: {}", bad.join(", ")))?;
    report.push(("vss parameters", worst_param));

    for (name, e) in &report {
        check(*e < 1e-4, format!("{name}: relative error {e:.3e}"))?;
    }
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!("{} gradient checks, worst relative error {worst:.1e}", report.len()))
}

// ---------------------------------------------------------------- criterion 3

fn oracle_ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Mask pixels with a 4-neighbour that is background or off-image.
fn oracle_boundary(m: &Array2<bool>) -> Vec<(f64, f64)> {
    let (h, w) = m.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m[(y, x)] {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let open = edge || !m[(y - 1, x)] || !m[(y + 1, x)] || !m[(y, x - 1)] || !m[(y, x + 1)];
            if open {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn oracle_pct95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= v.len() {
        v[i]
    } else {
        v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
    }
}

fn oracle_surface(p: &Array2<bool>, g: &Array2<bool>) -> (f64, f64) {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    let (h, w) = p.dim();
    if bp.is_empty() && bg.is_empty() {
        return (0.0, 0.0);
    }
    if bp.is_empty() || bg.is_empty() {
        let d = ((h * h + w * w) as f64).sqrt();
        return (d, d);
    }
    let nearest = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|a| to.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let (d1, d2) = (nearest(&bp, &bg), nearest(&bg, &bp));
    let n = (d1.len() + d2.len()) as f64;
    let asd = (d1.iter().sum::<f64>() + d2.iter().sum::<f64>()) / n;
    (oracle_pct95(d1).max(oracle_pct95(d2)), asd)
}

fn criterion_3() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for pair in 0..100 {
        // mix of noisy and blocky masks so that boundaries vary in length
        let blocky = pair % 2 == 0;
        let draw = |r: &mut ChaCha8Rng| {
            if blocky {
                let (cy, cx, rad) = (r.random_range(0..8) as i32, r.random_range(0..8) as i32, r.random_range(1..5) as i32);
                let cls = r.random_range(1..4u8);
                Array2::from_shape_fn((8, 8), |(y, x)| {
                    let inside = (y as i32 - cy).abs() + (x as i32 - cx).abs() <= rad;
                    if inside { cls } else if r.random_bool(0.1) { r.random_range(0..4u8) } else { 0 }
                })
            } else {
                Array2::from_shape_fn((8, 8), |_| r.random_range(0..4u8))
            }
        };
        let (pred, gt) = (draw(&mut r), draw(&mut r));
        for class in 0..4u8 {
            let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
            for (p, g) in pred.iter().zip(gt.iter()) {
                match (*p == class, *g == class) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let got = class_metrics(pred.view(), gt.view(), class).map_err(|e| e.to_string())?;
            let want = [
                oracle_ratio(2 * tp, 2 * tp + fp + fn_),
                oracle_ratio(tp + tn, 64),
                oracle_ratio(tp, tp + fp),
                oracle_ratio(tp, tp + fn_),
                oracle_ratio(tn, tn + fp),
            ];
            let have = [got.dice, got.accuracy, got.precision, got.sensitivity, got.specificity];
            check(have == want, format!("pair {pair} class {class}: counts {have:?} vs {want:?}"))?;
            let (hd, asd) = oracle_surface(&pred.mapv(|v| v == class), &gt.mapv(|v| v == class));
            worst = worst.max((got.hd95 - hd).abs()).max((got.asd - asd).abs());
            compared += 1;
        }
    }
    check(worst < 1e-9, format!("surface distance mismatch {worst:.3e}"))?;
    Ok(format!("{compared} class comparisons exact, surface distances within {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 4

const CNN_TARGET: usize = 1_813_764;
const MAMBA_TARGET: usize = 19_121_472;

fn vss_block_params(d: usize, n: usize) -> usize {
    let inner = 2 * d;
    let rank = d.div_ceil(16);
    let norm = 2 * d;
    let in_proj = d * 2 * inner;
    let conv = inner * 9 + inner;
    let x_proj = 4 * (rank + 2 * n) * inner;
    let dt = 4 * inner * rank + 4 * inner;
    let a_and_d = 4 * inner * n + 4 * inner;
    let out = 2 * inner + inner * d;
    norm + in_proj + conv + x_proj + dt + a_and_d + out
}

/// Closed-form component counts of the default Mamba-UNet.
fn mamba_components() -> Vec<(&'static str, usize)> {
    let (e, n, p) = (96, 16, 4);
    let dims = [e, 2 * e, 4 * e, 8 * e];
    let ln = |d: usize| 2 * d;
    let expand = |d: usize, factor: usize, out: usize| d * d * factor + ln(out);
    vec![
        ("patch_embed.proj", 3 * p * p * e + e),
        ("patch_embed.norm", ln(e)),
        ("encoder VSS blocks", dims.iter().map(|&d| 2 * vss_block_params(d, n)).sum()),
        ("patch merging", dims[..3].iter().map(|&d| ln(4 * d) + 4 * d * 2 * d).sum()),
        ("bottleneck norm", ln(8 * e)),
        ("layers_up.0 expand", expand(8 * e, 2, 4 * e)),
        ("concat_back_dim", dims[..3].iter().map(|&d| 2 * d * d + d).sum()),
        ("decoder VSS blocks", dims[..3].iter().map(|&d| 2 * vss_block_params(d, n)).sum()),
        ("decoder expands", expand(4 * e, 2, 2 * e) + expand(2 * e, 2, e)),
        ("norm_up", ln(e)),
        ("final x4 expand", expand(e, p * p, e)),
        ("output", e * 4),
    ]
}

fn criterion_4() -> Outcome {
    let cnn = build_network(&NetworkSpec::cnn_unet(4), 0).map_err(|e| e.to_string())?;
    check(cnn.num_parameters() == CNN_TARGET, format!("cnn-unet has {} parameters", cnn.num_parameters()))?;
    let mamba = build_network(&NetworkSpec::mamba_unet(4), 0).map_err(|e| e.to_string())?;
    let count = mamba.num_parameters();
    let components = mamba_components();
    let oracle: usize = components.iter().map(|c| c.1).sum();
    println!("    mamba-unet component accounting:");
    for (name, c) in &components {
        println!("      {name:<22} {c:>10}");
    }
    println!("      {:<22} {oracle:>10}", "total");
    println!("      {:<22} {:>10}", "built network", count);
    println!("      {:<22} {:>10}", "reference", MAMBA_TARGET);
    let dev = count as i64 - MAMBA_TARGET as i64;
    check(oracle == count, format!("closed-form total {oracle} != built {count}"))?;
    // the only admissible deviation is one LayerNorm over the embedding width
    check(count == MAMBA_TARGET || dev == 2 * 96, format!("unexplained deviation {dev}"))?;
    Ok(format!("cnn-unet {CNN_TARGET} exact; mamba-unet {count} vs reference {MAMBA_TARGET} {dev:+} (one LayerNorm(96))"))
}

// ---------------------------------------------------------------- criterion 5

/// Desk-scale schedule: 32×32 inputs, narrow networks, short runs.
const BENCH_SEEDS: [u64; 3] = [1, 2, 3];
const BENCH_ITERATIONS: usize = 600;
const BENCH_DICE: f64 = 0.85;
const BENCH_GAIN: f64 = 0.02;

fn bench_config(seed: u64, ssl: bool) -> TrainConfig {
    let mut m = NetworkSpec::mamba_unet(4);
    m.input_size = 32;
    m.embed_dim = 16;
    m.state_size = 4;
    let mut c = NetworkSpec::cnn_unet(4);
    c.input_size = 32;
    c.base_width = 8;
    TrainConfig {
        iterations: BENCH_ITERATIONS,
        validate_every: 50,
        seed,
        network1: m,
        network2: c,
        projector_grid: 8,
        semi: ssl,
        contra: ssl,
        ..TrainConfig::default()
    }
}

fn bench_data() -> Result<Splits, String> {
    let cfg = SynthConfig { size: 32, ..SynthConfig::default() };
    let (samples, manifest) = synth_samples(&cfg).map_err(|e| e.to_string())?;
    split(&samples, &manifest).map_err(|e| e.to_string())
}

fn test_dice(cfg: &TrainConfig, splits: &Splits) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (outcome, _) = train_on(cfg, splits, dir.path()).map_err(|e| e.to_string())?;
    let best = Network::load(outcome.record.checkpoint_f1.as_ref().ok_or("no checkpoint")?).map_err(|e| e.to_string())?;
    mean_dice(&best, &splits.test, 4, 8).map_err(|e| e.to_string())
}

fn criterion_5() -> Outcome {
    let splits = bench_data()?;
    let (mut semi, mut sup) = (Vec::new(), Vec::new());
    for seed in BENCH_SEEDS {
        semi.push(test_dice(&bench_config(seed, true), &splits)?);
        sup.push(test_dice(&bench_config(seed, false), &splits)?);
        println!("    seed {seed}: semi-supervised {:.4}, supervised-only {:.4}", semi.last().unwrap(), sup.last().unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, mb) = (mean(&semi), mean(&sup));
    let detail = format!("mean test Dice {ms:.4} (needs {BENCH_DICE}), gain over supervised-only {:+.4} (needs {BENCH_GAIN})", ms - mb);
    check(ms >= BENCH_DICE && ms - mb >= BENCH_GAIN, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 6

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 4,
        labelled_per_batch: 2,
        validate_every: 3,
        seed,
        network1: NetworkSpec::debug(Variant::MambaUnet, 4),
        network2: NetworkSpec::debug(Variant::CnnUnet, 4),
        projector_grid: 4,
        ..TrainConfig::default()
    }
}

fn tiny_data() -> Result<Splits, String> {
    let cfg = SynthConfig { cases: 6, slices_per_case: 3, size: 32, ..SynthConfig::default() };
    let (samples, manifest) = synth_samples(&cfg).map_err(|e| e.to_string())?;
    split(&samples, &manifest).map_err(|e| e.to_string())
}

fn criterion_6() -> Outcome {
    let splits = tiny_data()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (outcome, _) = train_on(&tiny_config(4), &splits, dir.path()).map_err(|e| e.to_string())?;
    for row in &outcome.log {
        let sum = row.sup1 + row.sup2 + row.semi1 + row.semi2 + row.contra;
        check((row.total - sum).abs() <= 1e-9, format!("step {}: total {} vs parts {sum}", row.iteration, row.total))?;
    }

    let mut shared = tiny_config(4);
    shared.shared_init = true;
    shared.network2 = shared.network1.clone();
    let state = TrainState::new(&shared).map_err(|e| e.to_string())?;
    let mut composer = BatchComposer::new(&splits.labelled, &splits.unlabelled, &shared).map_err(|e| e.to_string())?;
    let batch = composer.next_batch().map_err(|e| e.to_string())?;
    let losses = compute_losses(&state, &batch).map_err(|e| e.to_string())?;
    let contra = losses.contra.as_ref().ok_or("contra term missing")?.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    check(contra == 0.0, format!("contrastive term {contra:e} at step 0 with shared init"))?;

    // semi1 must not reach network 2, nor semi2 network 1
    let state = TrainState::new(&tiny_config(4)).map_err(|e| e.to_string())?;
    let losses = compute_losses(&state, &batch).map_err(|e| e.to_string())?;
    let probe = |loss: &Tensor, own: &Network, producer: &Network| -> Result<(f64, f64), String> {
        let grads = loss.backward().map_err(|e| e.to_string())?;
        let norm = |net: &Network| {
            net.vars()
                .iter()
                .filter_map(|v| grads.get(v))
                .map(|g| g.sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap())
                .sum::<f64>()
                .sqrt()
        };
        Ok((norm(own), norm(producer)))
    };
    let (own1, leak1) = probe(losses.semi1.as_ref().ok_or("semi1 missing")?, &state.net1, &state.net2)?;
    let (own2, leak2) = probe(losses.semi2.as_ref().ok_or("semi2 missing")?, &state.net2, &state.net1)?;
    check(leak1 == 0.0 && leak2 == 0.0, format!("pseudo-label producers received gradient {leak1:e}, {leak2:e}"))?;
    check(own1 > 0.0 && own2 > 0.0, "cross supervision did not reach its consumers")?;

    // the same property on bare logits
    let mut r = rng(6);
    let l1 = Var::from_tensor(&uniform(&mut r, &[2, 4, 4, 4], -2.0, 2.0)).unwrap();
    let l2 = Var::from_tensor(&uniform(&mut r, &[2, 4, 4, 4], -2.0, 2.0)).unwrap();
    let (s1, _) = cross_supervision_loss(l1.as_tensor(), l2.as_tensor()).map_err(|e| e.to_string())?;
    let g = s1.backward().unwrap();
    check(g.get(&l2).is_none() && g.get(&l1).is_some(), "semi1 gradient reached the producer logits")?;
    Ok(format!(
        "{} steps sum exactly, contra 0 under shared init, producer gradient norms {leak1} / {leak2}",
        outcome.log.len()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7() -> Outcome {
    let splits = tiny_data()?;
    let mut cfg = tiny_config(99);
    cfg.iterations = 12;
    let trace = |cfg: &TrainConfig| -> Result<Vec<[u64; 6]>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (o, _) = train_on(cfg, &splits, dir.path()).map_err(|e| e.to_string())?;
        Ok(o.log
            .iter()
            .map(|r| [r.sup1, r.sup2, r.semi1, r.semi2, r.contra, r.total].map(f64::to_bits))
            .collect())
    };
    let (a, b) = (trace(&cfg)?, trace(&cfg)?);
    check(a.len() >= 10 && a == b, "loss traces differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig { cases: 4, slices_per_case: 3, size: 48, seed: 5, ..SynthConfig::default() };
    synth_generate(&synth, &dir.path().join("a")).map_err(|e| e.to_string())?;
    synth_generate(&synth, &dir.path().join("b")).map_err(|e| e.to_string())?;
    let (fa, fb) = (tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));
    check(!fa.is_empty() && fa == fb, "synthetic datasets differ")?;
    Ok(format!("{} identical loss steps, {} identical dataset files", a.len(), fa.len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "SSM correctness", criterion_1),
        (2, "gradient suite", criterion_2),
        (3, "metric oracles", criterion_3),
        (4, "architecture replication", criterion_4),
        (5, "pipeline smoke benchmark", criterion_5),
        (6, "loss structure", criterion_6),
        (7, "determinism", criterion_7),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
