//! Reconstruction-quality metrics with micro-average, per-channel and
//! range-restricted evaluation, plus aggregation over an image set.
//!
//! All error metrics pool the masked H*W*C elements equally (micro-average);
//! SAM is the per-spatial-pixel spectral angle averaged over pixels.

use thiserror::Error;

use crate::cube::{Hypercube, RangeMask, RangeMasks};

/// PSNR reported for a zero-MSE pair, so aggregation stays finite.
pub const PSNR_CAP_DB: f64 = 300.0;
/// Spectra with a norm at or below this are excluded from SAM.
pub const SAM_NORM_EPSILON: f64 = 1e-12;
/// Default denominator guard for MRAE.
pub const MRAE_DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

fn check_pair(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> Result<(), MetricError> {
    if !y.same_shape(yhat) {
        return Err(MetricError::Shape(format!(
            "label {}x{}x{} vs prediction {}x{}x{}",
            y.height(),
            y.width(),
            y.channels(),
            yhat.height(),
            yhat.width(),
            yhat.channels()
        )));
    }
    if let Some(&i) = mask.indices.iter().find(|&&i| i >= y.channels()) {
        return Err(MetricError::Shape(format!(
            "mask index {} out of range for {} channels",
            i,
            y.channels()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Element-pooled metrics
// ---------------------------------------------------------------------------

/// Mean absolute error over the masked elements.
pub fn mae(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> Result<f64, MetricError> {
    check_pair(y, yhat, mask)?;
    if mask.is_empty() {
        return Err(MetricError::Degenerate("empty mask".into()));
    }
    let c = y.channels();
    let mut acc = 0.0;
    for (py, ph) in y.data().chunks(c).zip(yhat.data().chunks(c)) {
        for &i in &mask.indices {
            acc += (py[i] - ph[i]).abs();
        }
    }
    Ok(acc / (y.height() * y.width() * mask.len()) as f64)
}

fn masked_mse(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> Result<f64, MetricError> {
    check_pair(y, yhat, mask)?;
    if mask.is_empty() {
        return Err(MetricError::Degenerate("empty mask".into()));
    }
    let c = y.channels();
    let mut acc = 0.0;
    for (py, ph) in y.data().chunks(c).zip(yhat.data().chunks(c)) {
        for &i in &mask.indices {
            let d = py[i] - ph[i];
            acc += d * d;
        }
    }
    Ok(acc / (y.height() * y.width() * mask.len()) as f64)
}

/// Root mean squared error over the masked elements.
pub fn rmse(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> Result<f64, MetricError> {
    Ok(masked_mse(y, yhat, mask)?.sqrt())
}

/// Peak signal-to-noise ratio in dB: `10 log10(max^2 / mse)`. A zero MSE
/// returns the [`PSNR_CAP_DB`] sentinel.
pub fn psnr(
    y: &Hypercube,
    yhat: &Hypercube,
    mask: &RangeMask,
    max_value: f64,
) -> Result<f64, MetricError> {
    if max_value <= 0.0 {
        return Err(MetricError::Degenerate(format!(
            "max_value must be positive, got {}",
            max_value
        )));
    }
    let mse = masked_mse(y, yhat, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Mean relative absolute error: `|y - yhat| / max(|y|, epsilon)` pooled
/// over the masked elements.
pub fn mrae(
    y: &Hypercube,
    yhat: &Hypercube,
    mask: &RangeMask,
    epsilon: f64,
) -> Result<f64, MetricError> {
    if epsilon <= 0.0 {
        return Err(MetricError::Degenerate(format!(
            "epsilon must be positive, got {}",
            epsilon
        )));
    }
    check_pair(y, yhat, mask)?;
    if mask.is_empty() {
        return Err(MetricError::Degenerate("empty mask".into()));
    }
    let c = y.channels();
    let mut acc = 0.0;
    for (py, ph) in y.data().chunks(c).zip(yhat.data().chunks(c)) {
        for &i in &mask.indices {
            acc += (py[i] - ph[i]).abs() / py[i].abs().max(epsilon);
        }
    }
    Ok(acc / (y.height() * y.width() * mask.len()) as f64)
}

// ---------------------------------------------------------------------------
// Spectral angle
// ---------------------------------------------------------------------------

/// Angle in radians between two spectra, in [0, pi]. Zero-norm input gives 0.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    // sqrt of the product (not product of sqrts): for bitwise-identical
    // spectra the denominator then equals the dot product exactly, so the
    // angle of a spectrum with itself is exactly zero.
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0).acos()
}

/// Spectral angle mapper: the per-pixel angle between label and prediction
/// spectra (restricted to the masked channels), averaged over the pixels
/// where both spectra have a norm above [`SAM_NORM_EPSILON`].
pub fn sam(y: &Hypercube, yhat: &Hypercube, mask: &RangeMask) -> Result<f64, MetricError> {
    check_pair(y, yhat, mask)?;
    if mask.is_empty() {
        return Err(MetricError::Degenerate("empty mask".into()));
    }
    let c = y.channels();
    let mut acc = 0.0;
    let mut count = 0usize;
    for (py, ph) in y.data().chunks(c).zip(yhat.data().chunks(c)) {
        let mut dot = 0.0;
        let mut ny = 0.0;
        let mut nh = 0.0;
        for &i in &mask.indices {
            dot += py[i] * ph[i];
            ny += py[i] * py[i];
            nh += ph[i] * ph[i];
        }
        if ny.sqrt() > SAM_NORM_EPSILON && nh.sqrt() > SAM_NORM_EPSILON {
            acc += (dot / (ny * nh).sqrt()).clamp(-1.0, 1.0).acos();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::Degenerate(
            "every pixel has a zero-norm spectrum".into(),
        ));
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Sliding-window SSIM parameters.
#[derive(Debug, Clone)]
pub struct SsimParams {
    /// Window side length in pixels; odd, at least 3.
    pub window: usize,
    pub window_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub data_range: f64,
}

impl SsimParams {
    /// Standard parameterization for a given dynamic range L:
    /// 11x11 Gaussian window with sigma 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    pub fn for_range(data_range: f64) -> Self {
        Self {
            window: 11,
            window_sigma: 1.5,
            c1: (0.01 * data_range).powi(2),
            c2: (0.03 * data_range).powi(2),
            data_range,
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..side)
        .map(|k| (-((k as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(side * side);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    let mass: f64 = w.iter().sum();
    for v in &mut w {
        *v /= mass;
    }
    w
}

/// Structural similarity: per channel, a Gaussian-weighted sliding-window
/// SSIM map; the result is the mean over all window positions and channels.
pub fn ssim(y: &Hypercube, yhat: &Hypercube, params: &SsimParams) -> Result<f64, MetricError> {
    if !y.same_shape(yhat) {
        return Err(MetricError::Shape("pair shapes differ".into()));
    }
    if params.window < 3 || params.window % 2 == 0 {
        return Err(MetricError::Degenerate(format!(
            "window must be odd and >= 3, got {}",
            params.window
        )));
    }
    if params.c1 <= 0.0 || params.c2 <= 0.0 {
        return Err(MetricError::Degenerate("c1 and c2 must be positive".into()));
    }
    let (h, w, c) = (y.height(), y.width(), y.channels());
    let win = params.window;
    if h < win || w < win {
        return Err(MetricError::Shape(format!(
            "image {}x{} smaller than the {}x{} window",
            h, w, win, win
        )));
    }
    let weights = gaussian_window(win, params.window_sigma);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for wy in 0..=(h - win) {
            for wx in 0..=(w - win) {
                let mut mu_y = 0.0;
                let mut mu_h = 0.0;
                let mut yy = 0.0;
                let mut hh = 0.0;
                let mut yh = 0.0;
                let mut wi = 0usize;
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = weights[wi];
                        wi += 1;
                        let a = y.value(wy + dy, wx + dx, ch);
                        let b = yhat.value(wy + dy, wx + dx, ch);
                        mu_y += wgt * a;
                        mu_h += wgt * b;
                        yy += wgt * a * a;
                        hh += wgt * b * b;
                        yh += wgt * a * b;
                    }
                }
                let var_y = yy - mu_y * mu_y;
                let var_h = hh - mu_h * mu_h;
                let cov = yh - mu_y * mu_h;
                let num = (2.0 * mu_y * mu_h + params.c1) * (2.0 * cov + params.c2);
                let den = (mu_y * mu_y + mu_h * mu_h + params.c1) * (var_y + var_h + params.c2);
                acc += num / den;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// Per-channel curves
// ---------------------------------------------------------------------------

/// MAE and PSNR per channel, each computed over that channel's H*W elements.
pub fn per_channel_curves(
    y: &Hypercube,
    yhat: &Hypercube,
    psnr_max: f64,
) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    if !y.same_shape(yhat) {
        return Err(MetricError::Shape("pair shapes differ".into()));
    }
    let c = y.channels();
    let pixels = (y.height() * y.width()) as f64;
    let mut mae_acc = vec![0.0f64; c];
    let mut mse_acc = vec![0.0f64; c];
    for (py, ph) in y.data().chunks(c).zip(yhat.data().chunks(c)) {
        for i in 0..c {
            let d = py[i] - ph[i];
            mae_acc[i] += d.abs();
            mse_acc[i] += d * d;
        }
    }
    let mae_curve: Vec<f64> = mae_acc.iter().map(|&a| a / pixels).collect();
    let psnr_curve: Vec<f64> = mse_acc
        .iter()
        .map(|&s| {
            let mse = s / pixels;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                10.0 * (psnr_max * psnr_max / mse).log10()
            }
        })
        .collect();
    Ok((mae_curve, psnr_curve))
}

// ---------------------------------------------------------------------------
// Per-image evaluation and report aggregation
// ---------------------------------------------------------------------------

/// Knobs shared by the whole evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ssim: SsimParams,
    pub mrae_epsilon: f64,
    pub psnr_max: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            mrae_epsilon: MRAE_DEFAULT_EPSILON,
            psnr_max: 1.0,
        }
    }
}

/// All metric values for one label/prediction pair.
#[derive(Debug, Clone)]
pub struct PerImageMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub sam: f64,
    pub ssim: f64,
    pub mrae: f64,
    pub visible_mae: Option<f64>,
    pub extended_mae: Option<f64>,
    pub channel_mae: Vec<f64>,
    pub channel_psnr: Vec<f64>,
}

/// Run the full metric suite on one pair. Empty visible or extended masks
/// yield `None` for the corresponding range MAE.
pub fn evaluate_pair(
    y: &Hypercube,
    yhat: &Hypercube,
    masks: &RangeMasks,
    opts: &EvalOptions,
) -> Result<PerImageMetrics, MetricError> {
    let (channel_mae, channel_psnr) = per_channel_curves(y, yhat, opts.psnr_max)?;
    Ok(PerImageMetrics {
        mae: mae(y, yhat, &masks.full)?,
        rmse: rmse(y, yhat, &masks.full)?,
        psnr: psnr(y, yhat, &masks.full, opts.psnr_max)?,
        sam: sam(y, yhat, &masks.full)?,
        ssim: ssim(y, yhat, &opts.ssim)?,
        mrae: mrae(y, yhat, &masks.full, opts.mrae_epsilon)?,
        visible_mae: if masks.visible.is_empty() {
            None
        } else {
            Some(mae(y, yhat, &masks.visible)?)
        },
        extended_mae: if masks.extended.is_empty() {
            None
        } else {
            Some(mae(y, yhat, &masks.extended)?)
        },
        channel_mae,
        channel_psnr,
    })
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn from_values(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Aggregated metrics over an image set: mean/std per metric, per channel
/// and per wavelength range.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mae: Stat,
    pub rmse: Stat,
    pub psnr: Stat,
    pub sam: Stat,
    pub ssim: Stat,
    pub mrae: Stat,
    pub channel_mae: Vec<Stat>,
    pub channel_psnr: Vec<Stat>,
    pub full_mae: Stat,
    pub visible_mae: Option<Stat>,
    pub extended_mae: Option<Stat>,
}

/// Unweighted mean and population std across images, per metric.
pub fn aggregate_reports(per_image: &[PerImageMetrics]) -> Result<MetricReport, MetricError> {
    if per_image.is_empty() {
        return Err(MetricError::Degenerate("no images to aggregate".into()));
    }
    let channels = per_image[0].channel_mae.len();
    if per_image
        .iter()
        .any(|m| m.channel_mae.len() != channels || m.channel_psnr.len() != channels)
    {
        return Err(MetricError::Shape(
            "per-image channel curves have different lengths".into(),
        ));
    }
    let collect = |f: fn(&PerImageMetrics) -> f64| -> Stat {
        Stat::from_values(&per_image.iter().map(f).collect::<Vec<_>>())
    };
    let collect_opt = |f: fn(&PerImageMetrics) -> Option<f64>| -> Option<Stat> {
        let vals: Vec<f64> = per_image.iter().filter_map(f).collect();
        if vals.len() == per_image.len() {
            Some(Stat::from_values(&vals))
        } else {
            None
        }
    };
    let channel_stat = |get: fn(&PerImageMetrics) -> &Vec<f64>, c: usize| -> Stat {
        Stat::from_values(&per_image.iter().map(|m| get(m)[c]).collect::<Vec<_>>())
    };
    Ok(MetricReport {
        mae: collect(|m| m.mae),
        rmse: collect(|m| m.rmse),
        psnr: collect(|m| m.psnr),
        sam: collect(|m| m.sam),
        ssim: collect(|m| m.ssim),
        mrae: collect(|m| m.mrae),
        channel_mae: (0..channels)
            .map(|c| channel_stat(|m| &m.channel_mae, c))
            .collect(),
        channel_psnr: (0..channels)
            .map(|c| channel_stat(|m| &m.channel_psnr, c))
            .collect(),
        full_mae: collect(|m| m.mae),
        visible_mae: collect_opt(|m| m.visible_mae),
        extended_mae: collect_opt(|m| m.extended_mae),
    })
}

// ---------------------------------------------------------------------------
// CSV export / import
// ---------------------------------------------------------------------------

/// `metric,mean,std` rows for the six headline metrics.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("metric,mean,std\n");
    for (name, stat) in [
        ("mae", report.mae),
        ("rmse", report.rmse),
        ("psnr", report.psnr),
        ("sam", report.sam),
        ("ssim", report.ssim),
        ("mrae", report.mrae),
    ] {
        out.push_str(&format!("{},{},{}\n", name, stat.mean, stat.std));
    }
    out
}

/// `range,mae_mean,mae_std` rows for full/visible/extended MAE.
pub fn ranges_csv(report: &MetricReport) -> String {
    let mut out = String::from("range,mae_mean,mae_std\n");
    let mut push = |name: &str, stat: Option<Stat>| {
        if let Some(s) = stat {
            out.push_str(&format!("{},{},{}\n", name, s.mean, s.std));
        }
    };
    push("full", Some(report.full_mae));
    push("visible", report.visible_mae);
    push("extended", report.extended_mae);
    out
}

/// `channel,wavelength_nm,mae_mean,mae_std,psnr_mean,psnr_std` rows.
pub fn per_channel_csv(report: &MetricReport, wavelengths: &[f64]) -> String {
    let mut out = String::from("channel,wavelength_nm,mae_mean,mae_std,psnr_mean,psnr_std\n");
    for (c, wl) in wavelengths.iter().enumerate() {
        let m = report.channel_mae[c];
        let p = report.channel_psnr[c];
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c, wl, m.mean, m.std, p.mean, p.std
        ));
    }
    out
}

/// Parse a CSV produced by the exporters above into (first column, numeric
/// columns) rows, checking the expected header.
pub fn parse_csv(
    text: &str,
    expected_header: &str,
) -> Result<Vec<(String, Vec<f64>)>, MetricError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        other => {
            return Err(MetricError::Shape(format!(
                "bad header {:?}, expected {:?}",
                other, expected_header
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let key = fields
            .next()
            .ok_or_else(|| MetricError::Shape("empty row".into()))?
            .to_string();
        let mut nums = Vec::new();
        for f in fields {
            nums.push(
                f.parse::<f64>()
                    .map_err(|e| MetricError::Shape(format!("bad number {:?}: {}", f, e)))?,
            );
        }
        rows.push((key, nums));
    }
    Ok(rows)
}
