//! Built-in verification suite: naive reference implementations of every
//! metric, central finite-difference gradient checking, and the check
//! runner behind the `check` CLI subcommand.
//!
//! The naive references deliberately re-derive each quantity with plain
//! triple loops so they stay independent of the production code paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cube::{self, Hypercube, RangeMask, RangeKind};
use crate::metrics::{self, SsimParams, PSNR_CAP_DB};
use crate::nn::{self, LayerSpec, ModelKind, ModelSpec, Weights};
use crate::train;

/// Finite-difference step used everywhere.
pub const FD_STEP: f64 = 1e-6;
/// Gradient tolerance at 64-bit precision.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Metric oracle tolerance (relative).
pub const METRIC_TOLERANCE: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Naive metric references
// ---------------------------------------------------------------------------

pub fn naive_mae(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..y.height() {
        for w in 0..y.width() {
            for &c in &mask.indices {
                sum += (y.value(h, w, c) - yhat.value(h, w, c)).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn naive_mse(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..y.height() {
        for w in 0..y.width() {
            for &c in &mask.indices {
                let d = y.value(h, w, c) - yhat.value(h, w, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn naive_rmse(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> f64 {
    naive_mse(y, yhat, mask).sqrt()
}

pub fn naive_psnr(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask, max_value: f64) -> f64 {
    let mse = naive_mse(y, yhat, mask);
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

pub fn naive_sam(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..y.height() {
        for w in 0..y.width() {
            let mut dot = 0.0;
            let mut ny = 0.0;
            let mut nh = 0.0;
            for &c in &mask.indices {
                dot += y.value(h, w, c) * yhat.value(h, w, c);
                ny += y.value(h, w, c) * y.value(h, w, c);
                nh += yhat.value(h, w, c) * yhat.value(h, w, c);
            }
            if ny.sqrt() > 1e-12 && nh.sqrt() > 1e-12 {
                sum += (dot / (ny.sqrt() * nh.sqrt())).clamp(-1.0, 1.0).acos();
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn naive_mrae(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask, epsilon: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..y.height() {
        for w in 0..y.width() {
            for &c in &mask.indices {
                let denom = y.value(h, w, c).abs().max(epsilon);
                sum += (y.value(h, w, c) - yhat.value(h, w, c)).abs() / denom;
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Relative difference with a unit floor, the usual gradcheck metric.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &mut [f64],
    i: usize,
    step: f64,
) -> f64 {
    let original = x[i];
    x[i] = original + step;
    let plus = f(x);
    x[i] = original - step;
    let minus = f(x);
    x[i] = original;
    (plus - minus) / (2.0 * step)
}

/// Result of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare analytic weight and input gradients of `<grad_out, forward(x)>`
/// against central finite differences on a random instance.
pub fn gradient_check(spec: &ModelSpec, height: usize, width: usize, seed: u64) -> GradCheckReport {
    gradient_check_with_fault(spec, height, width, seed, 0.0)
}

/// Same as [`gradient_check`] but adds `fault` to one analytic gradient
/// entry first; a test hook for exercising failure reporting.
pub fn gradient_check_with_fault(
    spec: &ModelSpec,
    height: usize,
    width: usize,
    seed: u64,
    fault: f64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = height * width;
    let cin = spec.input_channels();
    let cout = spec.output_channels;
    let weights = nn::init_weights(spec, seed ^ 0x5eed);
    let mut input: Vec<f64> = (0..pixels * cin).map(|_| rng.gen_range(0.1..1.0)).collect();
    let grad_out: Vec<f64> = (0..pixels * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (mut grad_w, grad_x) =
        nn::backward(spec, &weights, &input, height, width, &grad_out).expect("backward failed");
    if fault != 0.0 && !grad_w.is_empty() {
        grad_w[0] += fault;
    }

    let objective = |params: &[f64], input: &[f64]| -> f64 {
        let w = Weights {
            params: params.to_vec(),
        };
        let out = nn::forward_channels(spec, &w, input, height, width).expect("forward failed");
        out.iter().zip(grad_out.iter()).map(|(o, g)| o * g).sum()
    };

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let mut params = weights.params.clone();
    for i in 0..params.len() {
        let input_ref = &input;
        let fd = central_difference(|p| objective(p, input_ref), &mut params, i, FD_STEP);
        max_err = max_err.max(rel_error(grad_w[i], fd));
        checked += 1;
    }
    let params_fixed = weights.params.clone();
    for i in 0..input.len() {
        let fd = central_difference(|x| objective(&params_fixed, x), &mut input, i, FD_STEP);
        max_err = max_err.max(rel_error(grad_x[i], fd));
        checked += 1;
    }
    GradCheckReport {
        max_rel_error: max_err,
        checked,
    }
}

/// One small random instance per layer kind, shape varying with `index`.
pub fn gradient_check_cases(index: usize) -> Vec<(String, ModelSpec, usize, usize)> {
    let h = 2 + index % 3;
    let w = 2 + (index / 3) % 3;
    let mk = |name: &str, layers: Vec<LayerSpec>, out: usize| {
        (
            name.to_string(),
            ModelSpec {
                name: ModelKind::PixelFeatureNet,
                layers,
                output_channels: out,
            },
            h,
            w,
        )
    };
    vec![
        mk("dense", vec![LayerSpec::dense(3, 4)], 4),
        mk("conv3", vec![LayerSpec::conv3(2, 3)], 3),
        mk("conv1", vec![LayerSpec::conv1(3, 4)], 4),
        mk(
            "relu_composite",
            vec![
                LayerSpec::dense(3, 5),
                LayerSpec::relu(5),
                LayerSpec::dense(5, 2),
            ],
            2,
        ),
        mk(
            "spectral_attention",
            vec![LayerSpec::spectral_attention(4, 2)],
            4,
        ),
    ]
}

// ---------------------------------------------------------------------------
// Check suite
// ---------------------------------------------------------------------------

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn random_cube_pair(h: usize, w: usize, c: usize, seed: u64) -> (Hypercube, Hypercube) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wl: Vec<f64> = (0..c).map(|i| 550.0 + 40.0 * i as f64).collect();
    let a: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    (
        Hypercube::new(h, w, wl.clone(), a).unwrap(),
        Hypercube::new(h, w, wl, b).unwrap(),
    )
}

fn full_mask(c: usize) -> RangeMask {
    RangeMask {
        kind: RangeKind::Full,
        indices: (0..c).collect(),
    }
}

/// Run the metric oracle comparison over `pairs` random pairs with shapes
/// up to 8x8x7; returns the worst relative deviation per metric.
pub fn metric_oracle_errors(pairs: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("mae".to_string(), 0.0f64),
        ("rmse".to_string(), 0.0),
        ("psnr".to_string(), 0.0),
        ("sam".to_string(), 0.0),
        ("mrae".to_string(), 0.0),
    ];
    for i in 0..pairs {
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        // c >= 2: with a single channel every spectrum pair is parallel and
        // the angle mean sits at the acos resolution floor, where relative
        // comparison is meaningless
        let c = rng.gen_range(2..=7);
        let (y, yhat) = random_cube_pair(h, w, c, seed ^ (i as u64 + 1));
        let mask = full_mask(c);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        let checks = [
            rel(
                metrics::mae(&y, &yhat, &mask).unwrap(),
                naive_mae(&y, &yhat, &mask),
            ),
            rel(
                metrics::rmse(&y, &yhat, &mask).unwrap(),
                naive_rmse(&y, &yhat, &mask),
            ),
            rel(
                metrics::psnr(&y, &yhat, &mask, 1.0).unwrap(),
                naive_psnr(&y, &yhat, &mask, 1.0),
            ),
            rel(
                metrics::sam(&y, &yhat, &mask).unwrap(),
                naive_sam(&y, &yhat, &mask),
            ),
            rel(
                metrics::mrae(&y, &yhat, &mask, 1e-8).unwrap(),
                naive_mrae(&y, &yhat, &mask, 1e-8),
            ),
        ];
        for (slot, err) in worst.iter_mut().zip(checks) {
            slot.1 = slot.1.max(err);
        }
    }
    worst
}

/// Run the whole verification suite. `fault` is a test hook: `"gradient"`
/// perturbs one analytic gradient so the corresponding check fails.
pub fn run_all(fault: Option<&str>) -> Vec<Check> {
    let mut checks = Vec::new();

    // parameter counts against the derived architecture table
    for (kind, c, expected) in [
        (ModelKind::PixelFeatureNet, 27usize, 1611usize),
        (ModelKind::PixelFeatureNet, 100, 4020),
        (ModelKind::LocalFeatureNet, 27, 6923),
        (ModelKind::LocalFeatureNet, 100, 9332),
    ] {
        let got = nn::param_count(&kind.build(c));
        checks.push(Check::new(
            format!("param_count {} C={}", kind.as_str(), c),
            got == expected,
            format!("{}", got),
        ));
    }

    // metric oracles
    for (name, err) in metric_oracle_errors(40, 20240501) {
        checks.push(Check::new(
            format!("metric_oracle {}", name),
            err <= METRIC_TOLERANCE,
            format!("max rel err {:.3e}", err),
        ));
    }

    // identity metrics
    {
        let (y, _) = random_cube_pair(6, 5, 4, 7);
        let mask = full_mask(4);
        let ok = metrics::mae(&y, &y, &mask).unwrap() == 0.0
            && metrics::rmse(&y, &y, &mask).unwrap() == 0.0
            && metrics::sam(&y, &y, &mask).unwrap() == 0.0
            && metrics::mrae(&y, &y, &mask, 1e-8).unwrap() == 0.0
            && metrics::psnr(&y, &y, &mask, 1.0).unwrap() == PSNR_CAP_DB;
        checks.push(Check::new("metric_identity", ok, "yhat = y"));
    }

    // ssim constant-image analytic value
    {
        let wl = vec![500.0];
        let (a, b) = (0.5f64, 0.25f64);
        let y = Hypercube::new(11, 11, wl.clone(), vec![a; 121]).unwrap();
        let yhat = Hypercube::new(11, 11, wl, vec![b; 121]).unwrap();
        let params = SsimParams::default();
        let expected = (2.0 * a * b + params.c1) / (a * a + b * b + params.c1);
        let got = metrics::ssim(&y, &yhat, &params).unwrap();
        checks.push(Check::new(
            "ssim_constant_window",
            (got - expected).abs() < 1e-9,
            format!("{} vs analytic {}", got, expected),
        ));
    }

    // gradient checks, one instance per layer kind here; the full
    // 20-instance sweep lives in the acceptance suite
    let fault_grad = match fault {
        Some("gradient") => 1e-2,
        _ => 0.0,
    };
    for (name, spec, h, w) in gradient_check_cases(1) {
        let report = gradient_check_with_fault(&spec, h, w, 99, fault_grad);
        checks.push(Check::new(
            format!("gradient {}", name),
            report.max_rel_error <= GRAD_TOLERANCE,
            format!("max rel err {:.3e}", report.max_rel_error),
        ));
    }

    // loss gradients
    for (name, err) in loss_gradient_errors(11) {
        checks.push(Check::new(
            format!("loss_gradient {}", name),
            err <= 1e-6,
            format!("max rel err {:.3e}", err),
        ));
    }

    // scheduler endpoints
    {
        let lr0 = 1e-4;
        let eta = 1e-6;
        let start = train::cosine_lr(0, 1000, lr0, eta).unwrap();
        let end = train::cosine_lr(1000, 1000, lr0, eta).unwrap();
        checks.push(Check::new(
            "scheduler_endpoints",
            start == lr0 && end == eta,
            format!("lr(0) = {}, lr(T) = {}", start, end),
        ));
    }

    // serialization round-trips (in memory)
    {
        let (y, _) = random_cube_pair(3, 4, 5, 31);
        let q = y.quantized_to_f32();
        let cube_ok = cube::decode_cube(&cube::encode_cube(&q)).map(|b| b == q).unwrap_or(false);
        checks.push(Check::new("hsc1_roundtrip", cube_ok, "3x4x5 cube"));
        let spec = ModelSpec::pixel_feature_net(6);
        let weights = nn::init_weights(&spec, 5).quantized_to_f32();
        let ckpt_ok = nn::encode_weights(&spec, &weights)
            .and_then(|b| nn::decode_weights(&b))
            .map(|(s, w)| s == spec && w == weights)
            .unwrap_or(false);
        checks.push(Check::new("hsw1_roundtrip", ckpt_ok, "pixel_feature_net C=6"));
    }

    checks
}

/// Worst relative FD error of the two loss gradients on a random instance.
pub fn loss_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut yhat: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();

    let mut out = Vec::new();
    {
        let (_, grad) = train::loss_l1(&y, &yhat).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            let y_ref = &y;
            let fd = central_difference(
                |p| train::loss_l1(y_ref, p).unwrap().0,
                &mut yhat,
                i,
                FD_STEP,
            );
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8));
        }
        out.push(("l1".to_string(), worst));
    }
    {
        let eps = 1e-8;
        let (_, grad) = train::loss_mrae(&y, &yhat, eps).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            let y_ref = &y;
            let fd = central_difference(
                |p| train::loss_mrae(y_ref, p, eps).unwrap().0,
                &mut yhat,
                i,
                FD_STEP,
            );
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8));
        }
        out.push(("mrae".to_string(), worst));
    }
    out
}
