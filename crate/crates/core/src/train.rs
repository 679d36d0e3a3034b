//! Losses, Adam optimizer, cosine-annealing schedule, paired geometric
//! augmentation, the training/validation loop with best-epoch selection,
//! and transfer-learning fine-tuning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cube::{Hypercube, RgbImage};
use crate::nn::{self, ModelSpec, NnError, Weights};
use crate::synth::{Dataset, DatasetPair, Split};

/// Adam denominator guard.
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("numerics error: {0}")]
    NonFinite(String),
    #[error("numerics error at epoch {epoch}: {message}")]
    Numerics { epoch: usize, message: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mrae,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mrae => "mrae",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mrae" => Ok(LossKind::Mrae),
            other => Err(TrainError::Range(format!(
                "unknown loss {:?}; valid: l1, mrae",
                other
            ))),
        }
    }
}

/// Geometric augmentation settings. The same transform is applied to the
/// RGB input and its paired cube; outputs are resized to the target size.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub target_h: usize,
    pub target_w: usize,
    /// Probability of a horizontal flip, and independently of a vertical one.
    pub flip_prob: f64,
    /// Shift range as a fraction of the target size.
    pub shift_frac: f64,
    pub scale_range: (f64, f64),
    /// Rotation range in degrees (symmetric).
    pub rotate_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_h: 288,
            target_w: 480,
            flip_prob: 0.5,
            shift_frac: 0.1,
            scale_range: (0.9, 1.1),
            rotate_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation at a fixed size.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            target_h: h,
            target_w: w,
            flip_prob: 0.0,
            shift_frac: 0.0,
            scale_range: (1.0, 1.0),
            rotate_deg: 0.0,
        }
    }

    /// True when applying this config to an `h x w` image cannot change it.
    pub fn is_identity_for(&self, h: usize, w: usize) -> bool {
        self.target_h == h
            && self.target_w == w
            && self.flip_prob == 0.0
            && self.shift_frac == 0.0
            && self.scale_range == (1.0, 1.0)
            && self.rotate_deg == 0.0
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.target_h == 0 || self.target_w == 0 {
            return Err(TrainError::Range("augment target dims must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TrainError::Range("flip_prob must be in [0, 1]".into()));
        }
        if self.shift_frac < 0.0 || self.rotate_deg < 0.0 {
            return Err(TrainError::Range("augment magnitudes must be >= 0".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(TrainError::Range("invalid scale range".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eta_min: f64,
    pub loss: LossKind,
    pub mrae_epsilon: f64,
    /// Samples per optimizer step: whole images when `patch` is 0, tiles
    /// otherwise.
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub fine_tune_epochs: usize,
    /// Side length of the square tiles each training image is cut into
    /// (after augmentation); 0 trains on full-image gradients. Tiling
    /// multiplies the optimizer steps per epoch, which small datasets need
    /// for the low-rate recipe to converge.
    pub patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eta_min: 1e-6,
            loss: LossKind::L1,
            mrae_epsilon: 1e-8,
            batch_size: 1,
            seed: 0,
            augment: AugmentConfig::default(),
            fine_tune_epochs: 50,
            patch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.fine_tune_epochs == 0 {
            return Err(TrainError::Range("epochs must be >= 1".into()));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.lr0) {
            return Err(TrainError::Range(format!(
                "need 0 < eta_min <= lr0, got eta_min {} lr0 {}",
                self.eta_min, self.lr0
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(TrainError::Range(format!("{} must be in (0, 1)", name)));
            }
        }
        if self.mrae_epsilon <= 0.0 {
            return Err(TrainError::Range("mrae_epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Range("batch_size must be >= 1".into()));
        }
        self.augment.validate()
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_lens(y: &[f64], yhat: &[f64]) -> Result<(), TrainError> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(TrainError::Shape(format!(
            "label has {} values, prediction {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// L1 loss: mean absolute error over all elements, with its gradient with
/// respect to the prediction (`sign(yhat - y) / N`, 0 at ties).
pub fn loss_l1(y: &[f64], yhat: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    check_lens(y, yhat)?;
    let n = y.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; y.len()];
    for ((g, &a), &b) in grad.iter_mut().zip(y).zip(yhat) {
        let d = b - a;
        value += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((value / n, grad))
}

/// Mean relative absolute error loss with epsilon-guarded denominators,
/// and its gradient with respect to the prediction.
pub fn loss_mrae(y: &[f64], yhat: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>), TrainError> {
    if epsilon <= 0.0 {
        return Err(TrainError::Range("epsilon must be positive".into()));
    }
    check_lens(y, yhat)?;
    let n = y.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; y.len()];
    for ((g, &a), &b) in grad.iter_mut().zip(y).zip(yhat) {
        let denom = a.abs().max(epsilon);
        let d = b - a;
        value += d.abs() / denom;
        *g = if d > 0.0 {
            1.0 / (n * denom)
        } else if d < 0.0 {
            -1.0 / (n * denom)
        } else {
            0.0
        };
    }
    Ok((value / n, grad))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    state: &mut OptimizerState,
    weights: &mut Weights,
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<(), TrainError> {
    if grad.len() != weights.len() || state.m.len() != weights.len() {
        return Err(TrainError::Shape(format!(
            "gradient has {} entries for {} weights",
            grad.len(),
            weights.len()
        )));
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite(format!("gradient entry {}", g)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        weights.params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// Cosine annealing from `lr0` at iteration 0 to `eta_min` at
/// `total_iterations`, exact at both endpoints.
pub fn cosine_lr(
    iteration: usize,
    total_iterations: usize,
    lr0: f64,
    eta_min: f64,
) -> Result<f64, TrainError> {
    if total_iterations == 0 || iteration > total_iterations {
        return Err(TrainError::Range(format!(
            "iteration {} outside [0, {}]",
            iteration, total_iterations
        )));
    }
    let progress = iteration as f64 / total_iterations as f64;
    let weight = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(lr0 * weight + eta_min * (1.0 - weight))
}

// ---------------------------------------------------------------------------
// Paired augmentation
// ---------------------------------------------------------------------------

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

struct Transform {
    flip_h: bool,
    flip_v: bool,
    shift_y: f64,
    shift_x: f64,
    scale: f64,
    angle: f64,
}

impl Transform {
    /// Source coordinates (in input pixel space) for an output pixel.
    fn source(
        &self,
        oy: usize,
        ox: usize,
        th: usize,
        tw: usize,
        ih: usize,
        iw: usize,
    ) -> (f64, f64) {
        let mut v = oy as f64 - (th as f64 - 1.0) / 2.0 - self.shift_y;
        let mut u = ox as f64 - (tw as f64 - 1.0) / 2.0 - self.shift_x;
        if self.angle != 0.0 {
            let (sin, cos) = self.angle.sin_cos();
            let (v2, u2) = (cos * v + sin * u, -sin * v + cos * u);
            v = v2;
            u = u2;
        }
        v /= self.scale;
        u /= self.scale;
        if self.flip_v {
            v = -v;
        }
        if self.flip_h {
            u = -u;
        }
        let src_y = v * (ih as f64 / th as f64) + (ih as f64 - 1.0) / 2.0;
        let src_x = u * (iw as f64 / tw as f64) + (iw as f64 - 1.0) / 2.0;
        (src_y, src_x)
    }
}

/// Apply one random geometric transform to an RGB/cube pair: both move
/// identically, the RGB is resampled bilinearly, the cube with nearest
/// neighbor (no inter-spectrum blending), out-of-frame samples reflect.
pub fn augment_pair(
    rgb: &RgbImage,
    cube: &Hypercube,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, Hypercube), TrainError> {
    config.validate()?;
    if rgb.height() != cube.height() || rgb.width() != cube.width() {
        return Err(TrainError::Shape(format!(
            "rgb {}x{} vs cube {}x{}",
            rgb.height(),
            rgb.width(),
            cube.height(),
            cube.width()
        )));
    }
    let (ih, iw) = (rgb.height(), rgb.width());
    let (th, tw) = (config.target_h, config.target_w);
    let transform = Transform {
        flip_h: rng.gen::<f64>() < config.flip_prob,
        flip_v: rng.gen::<f64>() < config.flip_prob,
        shift_y: rng.gen_range(-1.0..=1.0) * config.shift_frac * th as f64,
        shift_x: rng.gen_range(-1.0..=1.0) * config.shift_frac * tw as f64,
        scale: rng.gen_range(config.scale_range.0..=config.scale_range.1),
        angle: rng.gen_range(-1.0..=1.0) * config.rotate_deg.to_radians(),
    };

    let c = cube.channels();
    let mut rgb_out = vec![0.0; th * tw * 3];
    let mut cube_out = vec![0.0; th * tw * c];
    for oy in 0..th {
        for ox in 0..tw {
            let (sy, sx) = transform.source(oy, ox, th, tw, ih, iw);
            // bilinear with reflection for the rgb image
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let y0i = y0 as isize;
            let x0i = x0 as isize;
            let corners = [
                (reflect(y0i, ih), reflect(x0i, iw), (1.0 - fy) * (1.0 - fx)),
                (reflect(y0i, ih), reflect(x0i + 1, iw), (1.0 - fy) * fx),
                (reflect(y0i + 1, ih), reflect(x0i, iw), fy * (1.0 - fx)),
                (reflect(y0i + 1, ih), reflect(x0i + 1, iw), fy * fx),
            ];
            let out_base = (oy * tw + ox) * 3;
            for k in 0..3 {
                let mut acc = 0.0;
                for &(ry, rx, wgt) in &corners {
                    acc += wgt * rgb.data()[(ry * iw + rx) * 3 + k];
                }
                rgb_out[out_base + k] = acc.clamp(0.0, 1.0);
            }
            // nearest neighbor keeps spectra intact for the cube
            let ny = reflect(sy.round() as isize, ih);
            let nx = reflect(sx.round() as isize, iw);
            let src = cube.spectrum(ny, nx);
            cube_out[(oy * tw + ox) * c..(oy * tw + ox + 1) * c].copy_from_slice(src);
        }
    }
    let rgb_aug =
        RgbImage::new(th, tw, rgb_out).map_err(|e| TrainError::Shape(e.to_string()))?;
    let cube_aug = Hypercube::new(th, tw, cube.wavelengths().to_vec(), cube_out)
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    Ok((rgb_aug, cube_aug))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of a training run: best-validation weights plus the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn compute_loss(
    config: &TrainConfig,
    y: &[f64],
    yhat: &[f64],
) -> Result<(f64, Vec<f64>), TrainError> {
    match config.loss {
        LossKind::L1 => loss_l1(y, yhat),
        LossKind::Mrae => loss_mrae(y, yhat, config.mrae_epsilon),
    }
}

/// Mean loss of the model over a set of pairs (no augmentation).
pub fn split_loss(
    spec: &ModelSpec,
    weights: &Weights,
    pairs: &[&DatasetPair],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Dataset("empty evaluation split".into()));
    }
    let mut acc = 0.0;
    for pair in pairs {
        let out = nn::forward_channels(
            spec,
            weights,
            pair.rgb.data(),
            pair.rgb.height(),
            pair.rgb.width(),
        )?;
        let (value, _) = compute_loss(config, pair.cube.data(), &out)?;
        acc += value;
    }
    Ok(acc / pairs.len() as f64)
}

/// Train from freshly initialized weights; see [`TrainConfig`] for the
/// recipe. Returns the weights of the best validation epoch.
pub fn train_model(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    spec.validate()?;
    let init = nn::init_weights(spec, config.seed);
    train_from(spec, init, dataset, config)
}

/// Train starting from the given weights (warm start).
pub fn train_with_weights(
    spec: &ModelSpec,
    init: Weights,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    spec.validate()?;
    train_from(spec, init, dataset, config)
}

/// Replace the head to match the new dataset's channel count, then train
/// for `fine_tune_epochs` epochs starting from the pretrained body.
pub fn fine_tune(
    spec: &ModelSpec,
    pretrained: &Weights,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelSpec, TrainOutcome), TrainError> {
    config.validate()?;
    let new_c = dataset.channels();
    if new_c == 0 {
        return Err(TrainError::Dataset("dataset has no pairs".into()));
    }
    let (new_spec, new_weights) = nn::replace_head(spec, pretrained, new_c, config.seed)?;
    let ft_config = TrainConfig {
        epochs: config.fine_tune_epochs,
        ..config.clone()
    };
    let outcome = train_from(&new_spec, new_weights, dataset, &ft_config)?;
    Ok((new_spec, outcome))
}

/// One training sample: a tile of one (possibly augmented) train image.
#[derive(Clone, Copy)]
struct Sample {
    image: usize,
    y0: usize,
    x0: usize,
}

fn train_from(
    spec: &ModelSpec,
    init: Weights,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if spec.output_channels != dataset.channels() {
        return Err(TrainError::Dataset(format!(
            "model outputs {} channels, dataset has {}",
            spec.output_channels,
            dataset.channels()
        )));
    }
    let train_pairs = dataset.split(Split::Train);
    let val_pairs = dataset.split(Split::Val);
    if train_pairs.is_empty() {
        return Err(TrainError::Dataset("empty train split".into()));
    }
    if val_pairs.is_empty() {
        return Err(TrainError::Dataset("empty validation split".into()));
    }

    // per-image view sizes are fixed across epochs, so the step count and
    // the scheduler length are known upfront
    let identity: Vec<bool> = train_pairs
        .iter()
        .map(|p| config.augment.is_identity_for(p.rgb.height(), p.rgb.width()))
        .collect();
    let view_dims: Vec<(usize, usize)> = train_pairs
        .iter()
        .zip(&identity)
        .map(|(p, &id)| {
            if id {
                (p.rgb.height(), p.rgb.width())
            } else {
                (config.augment.target_h, config.augment.target_w)
            }
        })
        .collect();
    let mut samples_per_epoch = 0usize;
    for &(vh, vw) in &view_dims {
        if config.patch == 0 {
            samples_per_epoch += 1;
        } else {
            let tiles = (vh / config.patch) * (vw / config.patch);
            if tiles == 0 {
                return Err(TrainError::Dataset(format!(
                    "patch {} larger than the {}x{} training view",
                    config.patch, vh, vw
                )));
            }
            samples_per_epoch += tiles;
        }
    }
    let batches_per_epoch = samples_per_epoch.div_ceil(config.batch_size);
    let total_iters = config.epochs * batches_per_epoch;

    let mut weights = init;
    let mut state = OptimizerState::new(weights.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x517));
    let mut iteration = 0usize;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_weights = weights.clone();
    let mut grad_acc = vec![0.0; weights.len()];
    let mut samples: Vec<Sample> = Vec::with_capacity(samples_per_epoch);
    let mut rgb_tile = Vec::new();
    let mut cube_tile = Vec::new();
    let channels = dataset.channels();

    for epoch in 1..=config.epochs {
        // fresh augmentation draws per image per epoch
        let mut augmented: Vec<Option<(RgbImage, Hypercube)>> =
            Vec::with_capacity(train_pairs.len());
        for (pair, &id) in train_pairs.iter().zip(&identity) {
            augmented.push(if id {
                None
            } else {
                Some(augment_pair(&pair.rgb, &pair.cube, &config.augment, &mut rng)?)
            });
        }
        let view = |i: usize| -> (&RgbImage, &Hypercube) {
            match &augmented[i] {
                Some((r, c)) => (r, c),
                None => (&train_pairs[i].rgb, &train_pairs[i].cube),
            }
        };

        samples.clear();
        for (i, &(vh, vw)) in view_dims.iter().enumerate() {
            if config.patch == 0 {
                samples.push(Sample {
                    image: i,
                    y0: 0,
                    x0: 0,
                });
            } else {
                for ty in 0..vh / config.patch {
                    for tx in 0..vw / config.patch {
                        samples.push(Sample {
                            image: i,
                            y0: ty * config.patch,
                            x0: tx * config.patch,
                        });
                    }
                }
            }
        }
        samples.shuffle(&mut rng);

        let lr_epoch = cosine_lr(iteration, total_iters, config.lr0, config.eta_min)?;
        let mut epoch_loss = 0.0;
        let mut batch_count = 0usize;
        for batch in samples.chunks(config.batch_size) {
            let lr = cosine_lr(iteration, total_iters, config.lr0, config.eta_min)?;
            grad_acc.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for sample in batch {
                let (rgb, cube) = view(sample.image);
                let (input, label, sh, sw): (&[f64], &[f64], usize, usize) = if config.patch == 0
                {
                    (rgb.data(), cube.data(), rgb.height(), rgb.width())
                } else {
                    let p = config.patch;
                    rgb_tile.clear();
                    cube_tile.clear();
                    for dy in 0..p {
                        let row = sample.y0 + dy;
                        let rb = (row * rgb.width() + sample.x0) * 3;
                        rgb_tile.extend_from_slice(&rgb.data()[rb..rb + p * 3]);
                        let cb = (row * cube.width() + sample.x0) * channels;
                        cube_tile.extend_from_slice(&cube.data()[cb..cb + p * channels]);
                    }
                    (&rgb_tile, &cube_tile, p, p)
                };
                let trace = nn::forward_trace(spec, &weights, input, sh, sw)?;
                let (value, grad_out) = compute_loss(config, label, trace.output())?;
                if !value.is_finite() {
                    return Err(TrainError::Numerics {
                        epoch,
                        message: format!("training loss became {}", value),
                    });
                }
                let (grad_w, _) = nn::backward_from_trace(spec, &weights, &trace, &grad_out)?;
                for (acc, g) in grad_acc.iter_mut().zip(&grad_w) {
                    *acc += g;
                }
                batch_loss += value;
            }
            let inv = 1.0 / batch.len() as f64;
            grad_acc.iter_mut().for_each(|g| *g *= inv);
            adam_step(
                &mut state,
                &mut weights,
                &grad_acc,
                lr,
                config.beta1,
                config.beta2,
            )
            .map_err(|e| match e {
                TrainError::NonFinite(message) => TrainError::Numerics { epoch, message },
                other => other,
            })?;
            epoch_loss += batch_loss * inv;
            batch_count += 1;
            iteration += 1;
        }
        let val_loss = split_loss(spec, &weights, &val_pairs, config)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Numerics {
                epoch,
                message: format!("validation loss became {}", val_loss),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batch_count as f64,
            val_loss,
            lr: lr_epoch,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_weights = weights.clone();
        }
    }
    Ok(TrainOutcome {
        weights: best_weights,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

// ---------------------------------------------------------------------------
// Constant-predictor baseline
// ---------------------------------------------------------------------------

/// Per-channel mean of the cubes in a set of pairs (the best constant
/// predictor under squared error, in closed form).
pub fn per_channel_mean(pairs: &[&DatasetPair]) -> Vec<f64> {
    let c = pairs.first().map(|p| p.cube.channels()).unwrap_or(0);
    let mut sums = vec![0.0f64; c];
    let mut count = 0usize;
    for pair in pairs {
        for px in pair.cube.data().chunks(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        count += pair.cube.height() * pair.cube.width();
    }
    for s in &mut sums {
        *s /= count as f64;
    }
    sums
}

/// Mean over pairs of the per-image RMSE of the constant predictor.
pub fn constant_predictor_rmse(channel_means: &[f64], pairs: &[&DatasetPair]) -> f64 {
    let mut acc = 0.0;
    for pair in pairs {
        let c = pair.cube.channels();
        let mut sq = 0.0;
        for px in pair.cube.data().chunks(c) {
            for (&v, &m) in px.iter().zip(channel_means) {
                sq += (v - m) * (v - m);
            }
        }
        acc += (sq / pair.cube.data().len() as f64).sqrt();
    }
    acc / pairs.len() as f64
}

/// Mean over pairs of the per-image RMSE of the model's predictions.
pub fn model_rmse(
    spec: &ModelSpec,
    weights: &Weights,
    pairs: &[&DatasetPair],
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Dataset("empty evaluation split".into()));
    }
    let mut acc = 0.0;
    for pair in pairs {
        let out = nn::forward_channels(
            spec,
            weights,
            pair.rgb.data(),
            pair.rgb.height(),
            pair.rgb.width(),
        )?;
        let mut sq = 0.0;
        for (&p, &y) in out.iter().zip(pair.cube.data()) {
            sq += (p - y) * (p - y);
        }
        acc += (sq / out.len() as f64).sqrt();
    }
    Ok(acc / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// History CSV
// ---------------------------------------------------------------------------

/// `epoch,train_loss,val_loss,lr` rows.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.lr
        ));
    }
    out
}

/// Parse a history CSV written by [`history_csv`].
pub fn parse_history_csv(text: &str) -> Result<Vec<EpochStats>, TrainError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,train_loss,val_loss,lr") => {}
        other => {
            return Err(TrainError::Range(format!(
                "bad history header {:?}",
                other
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TrainError::Range(format!("bad history row {:?}", line)));
        }
        rows.push(EpochStats {
            epoch: fields[0]
                .parse()
                .map_err(|e| TrainError::Range(format!("bad epoch: {}", e)))?,
            train_loss: fields[1]
                .parse()
                .map_err(|e| TrainError::Range(format!("bad train_loss: {}", e)))?,
            val_loss: fields[2]
                .parse()
                .map_err(|e| TrainError::Range(format!("bad val_loss: {}", e)))?,
            lr: fields[3]
                .parse()
                .map_err(|e| TrainError::Range(format!("bad lr: {}", e)))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelKind};
    use crate::verify;

    fn constant_pair(name: &str, split: Split, rgb_v: f64, cube_v: f64) -> DatasetPair {
        let (h, w) = (4, 4);
        DatasetPair {
            name: name.to_string(),
            split,
            seed: 0,
            rgb: RgbImage::new(h, w, vec![rgb_v; h * w * 3]).unwrap(),
            cube: Hypercube::new(h, w, vec![500.0], vec![cube_v; h * w]).unwrap(),
        }
    }

    fn constant_dataset() -> Dataset {
        Dataset {
            pairs: vec![
                constant_pair("a", Split::Train, 0.5, 0.3),
                constant_pair("b", Split::Train, 0.5, 0.3),
                constant_pair("c", Split::Train, 0.5, 0.3),
                constant_pair("v", Split::Val, 0.5, 0.3),
            ],
        }
    }

    fn scalar_head_spec() -> ModelSpec {
        ModelSpec {
            name: ModelKind::PixelFeatureNet,
            layers: vec![LayerSpec::dense(3, 1)],
            output_channels: 1,
        }
    }

    #[test]
    fn loss_l1_examples() {
        let (v, g) = loss_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = loss_l1(&[0.0], &[2.0]).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn loss_l1_gradient_matches_finite_differences() {
        let y = vec![0.3, 0.8, 0.1, 0.9, 0.4, 0.6];
        let mut yhat = vec![0.5, 0.2, 0.7, 0.1, 0.95, 0.3];
        let (_, grad) = loss_l1(&y, &yhat).unwrap();
        for i in 0..y.len() {
            let y_ref = &y;
            let fd = verify::central_difference(
                |p| loss_l1(y_ref, p).unwrap().0,
                &mut yhat,
                i,
                1e-6,
            );
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs());
            assert!(rel <= 1e-6, "index {}: {} vs {}", i, grad[i], fd);
        }
    }

    #[test]
    fn loss_mrae_examples_and_scale_invariance() {
        let (v, _) = loss_mrae(&[2.0], &[2.5], 1e-8).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        let (zero, _) = loss_mrae(&[1.0, 2.0], &[1.0, 2.0], 1e-8).unwrap();
        assert_eq!(zero, 0.0);
        let y = [0.4, 1.2, 0.7];
        let yhat = [0.5, 1.0, 0.9];
        let (a, _) = loss_mrae(&y, &yhat, 1e-8).unwrap();
        let alpha = 3.0;
        let ys: Vec<f64> = y.iter().map(|v| v * alpha).collect();
        let yhs: Vec<f64> = yhat.iter().map(|v| v * alpha).collect();
        let (b, _) = loss_mrae(&ys, &yhs, 1e-8).unwrap();
        assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn loss_mrae_gradient_matches_finite_differences() {
        let y = vec![0.5, 0.0, 1.5, 0.2];
        let mut yhat = vec![0.7, 0.1, 1.2, 0.4];
        let eps = 1e-3;
        let (_, grad) = loss_mrae(&y, &yhat, eps).unwrap();
        for i in 0..y.len() {
            let y_ref = &y;
            let fd = verify::central_difference(
                |p| loss_mrae(y_ref, p, eps).unwrap().0,
                &mut yhat,
                i,
                1e-7,
            );
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs());
            assert!(rel <= 1e-5, "index {}: {} vs {}", i, grad[i], fd);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_fresh_weights() {
        let mut state = OptimizerState::new(3);
        let mut weights = Weights {
            params: vec![0.5, -0.25, 1.0],
        };
        let before = weights.clone();
        adam_step(&mut state, &mut weights, &[0.0; 3], 1e-3, 0.9, 0.999).unwrap();
        assert_eq!(weights, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut state = OptimizerState::new(2);
        let mut weights = Weights {
            params: vec![1.0, 1.0],
        };
        let lr = 1e-3;
        adam_step(&mut state, &mut weights, &[0.4, -0.7], lr, 0.9, 0.999).unwrap();
        // bias-corrected m/sqrt(v) = sign(g) up to the epsilon guard
        assert!((weights.params[0] - (1.0 - lr)).abs() < lr * 1e-6);
        assert!((weights.params[1] - (1.0 + lr)).abs() < lr * 1e-6);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_non_finite() {
        let run = || {
            let mut state = OptimizerState::new(2);
            let mut weights = Weights {
                params: vec![0.1, 0.2],
            };
            for i in 0..5 {
                adam_step(
                    &mut state,
                    &mut weights,
                    &[0.3 + i as f64 * 0.01, -0.2],
                    1e-3,
                    0.9,
                    0.999,
                )
                .unwrap();
            }
            weights
        };
        assert_eq!(run(), run());
        let mut state = OptimizerState::new(1);
        let mut weights = Weights { params: vec![0.0] };
        assert!(matches!(
            adam_step(&mut state, &mut weights, &[f64::NAN], 1e-3, 0.9, 0.999).unwrap_err(),
            TrainError::NonFinite(_)
        ));
    }

    #[test]
    fn cosine_schedule_endpoints_exact_and_monotone() {
        let (lr0, eta) = (1e-4, 1e-6);
        assert_eq!(cosine_lr(0, 1000, lr0, eta).unwrap(), lr0);
        assert_eq!(cosine_lr(1000, 1000, lr0, eta).unwrap(), eta);
        let mid = cosine_lr(500, 1000, lr0, eta).unwrap();
        assert!((mid - 5.05e-5).abs() < 1e-12, "midpoint {}", mid);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = cosine_lr(i, 1000, lr0, eta).unwrap();
            assert!(lr <= prev, "schedule increased at {}", i);
            prev = lr;
        }
        assert!(matches!(
            cosine_lr(1001, 1000, lr0, eta).unwrap_err(),
            TrainError::Range(_)
        ));
    }

    #[test]
    fn augment_identity_config_is_exact_identity() {
        let pair = constant_pair("x", Split::Train, 0.4, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = AugmentConfig::identity(4, 4);
        let (rgb, cube) = augment_pair(&pair.rgb, &pair.cube, &config, &mut rng).unwrap();
        assert_eq!(rgb, pair.rgb);
        assert_eq!(cube, pair.cube);
    }

    #[test]
    fn augment_flip_twice_restores_input() {
        let (h, w) = (6, 5);
        let mut rgb_data = vec![0.0; h * w * 3];
        for (i, v) in rgb_data.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 17.0;
        }
        let rgb = RgbImage::new(h, w, rgb_data).unwrap();
        let cube_data: Vec<f64> = (0..h * w * 2).map(|i| (i % 13) as f64 / 13.0).collect();
        let cube = Hypercube::new(h, w, vec![500.0, 600.0], cube_data).unwrap();
        let config = AugmentConfig {
            target_h: h,
            target_w: w,
            flip_prob: 1.0,
            shift_frac: 0.0,
            scale_range: (1.0, 1.0),
            rotate_deg: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rgb1, cube1) = augment_pair(&rgb, &cube, &config, &mut rng).unwrap();
        let (rgb2, cube2) = augment_pair(&rgb1, &cube1, &config, &mut rng).unwrap();
        assert_eq!(rgb2, rgb);
        assert_eq!(cube2, cube);
    }

    #[test]
    fn augment_moves_marker_identically_in_both_images() {
        let (h, w) = (24, 24);
        let (my, mx) = (7usize, 11usize);
        let mut rgb_data = vec![0.0; h * w * 3];
        rgb_data[(my * w + mx) * 3] = 1.0;
        let rgb = RgbImage::new(h, w, rgb_data).unwrap();
        let mut cube_data = vec![0.0; h * w];
        cube_data[my * w + mx] = 1.0;
        let cube = Hypercube::new(h, w, vec![500.0], cube_data).unwrap();
        // flips and shifts only: the mapping sends pixel centers near pixel
        // centers, so marker positions must agree exactly
        let exact_config = AugmentConfig {
            target_h: h,
            target_w: w,
            flip_prob: 0.5,
            shift_frac: 0.2,
            scale_range: (1.0, 1.0),
            rotate_deg: 0.0,
        };
        // rotation, shift, flips and upscaling: upscaling duplicates source
        // pixels, so the bilinear peak may sit one output pixel away from a
        // nearest copy (downscaling could drop the marker from the
        // nearest-sampled cube entirely, which would make positions
        // incomparable)
        let full_config = AugmentConfig {
            target_h: h,
            target_w: w,
            scale_range: (1.0, 1.1),
            ..AugmentConfig::default()
        };
        for (config, tol) in [(exact_config, 0i64), (full_config, 1i64)] {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (rgb_a, cube_a) = augment_pair(&rgb, &cube, &config, &mut rng).unwrap();
                let rgb_argmax = rgb_a
                    .data()
                    .chunks(3)
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a[0].partial_cmp(&b[0]).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let cube_argmax = cube_a
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let (ry, rx) = ((rgb_argmax / w) as i64, (rgb_argmax % w) as i64);
                let (cy, cx) = ((cube_argmax / w) as i64, (cube_argmax % w) as i64);
                assert!(
                    (ry - cy).abs() <= tol && (rx - cx).abs() <= tol,
                    "seed {}: marker at ({}, {}) in rgb but ({}, {}) in cube",
                    seed,
                    ry,
                    rx,
                    cy,
                    cx
                );
            }
        }
    }

    #[test]
    fn training_on_constant_target_descends() {
        let dataset = constant_dataset();
        let config = TrainConfig {
            epochs: 12,
            lr0: 1e-3,
            eta_min: 1e-6,
            seed: 4,
            augment: AugmentConfig::identity(4, 4),
            ..TrainConfig::default()
        };
        let spec = scalar_head_spec();
        let outcome = train_model(&spec, &dataset, &config).unwrap();
        assert_eq!(outcome.history.len(), 12);
        for pair in outcome.history.windows(2).take(9) {
            assert!(
                pair[1].train_loss < pair[0].train_loss,
                "loss not strictly decreasing: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
        assert!(outcome.history.last().unwrap().train_loss < outcome.history[0].train_loss);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let dataset = constant_dataset();
        let config = TrainConfig {
            epochs: 5,
            lr0: 1e-3,
            seed: 9,
            augment: AugmentConfig::identity(4, 4),
            ..TrainConfig::default()
        };
        let spec = scalar_head_spec();
        let a = train_model(&spec, &dataset, &config).unwrap();
        let b = train_model(&spec, &dataset, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn best_epoch_weights_reproduce_recorded_val_loss() {
        let dataset = constant_dataset();
        let config = TrainConfig {
            epochs: 8,
            lr0: 1e-3,
            seed: 2,
            augment: AugmentConfig::identity(4, 4),
            ..TrainConfig::default()
        };
        let spec = scalar_head_spec();
        let outcome = train_model(&spec, &dataset, &config).unwrap();
        let val_pairs = dataset.split(Split::Val);
        let re_eval = split_loss(&spec, &outcome.weights, &val_pairs, &config).unwrap();
        assert_eq!(re_eval, outcome.best_val_loss);
        let recorded = outcome.history[outcome.best_epoch - 1].val_loss;
        assert_eq!(recorded, outcome.best_val_loss);
    }

    #[test]
    fn empty_splits_are_dataset_errors() {
        let mut dataset = constant_dataset();
        dataset.pairs.retain(|p| p.split != Split::Val);
        let config = TrainConfig {
            epochs: 1,
            augment: AugmentConfig::identity(4, 4),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_model(&scalar_head_spec(), &dataset, &config).unwrap_err(),
            TrainError::Dataset(_)
        ));
    }

    #[test]
    fn fine_tune_respects_epoch_cap() {
        use crate::synth::{make_dataset, make_endmembers, SceneSpec};
        use crate::cube::CameraResponse;
        let grid: Vec<f64> = (0..8).map(|i| 520.0 + 30.0 * i as f64).collect();
        let template = SceneSpec {
            height: 6,
            width: 6,
            lambda_min: 520.0,
            lambda_max: 730.0,
            lambda_step: 30.0,
            endmembers: make_endmembers(&grid, 2, 3).unwrap(),
            blob_count: 2,
            noise_sigma: 0.0,
            seed: 5,
        };
        let response = CameraResponse::boxcar_thirds(&grid).unwrap();
        let dataset = make_dataset(4, &template, &response, (0.5, 0.25, 0.25)).unwrap();
        let spec = ModelSpec::pixel_feature_net(20);
        let pretrained = nn::init_weights(&spec, 1);
        let config = TrainConfig {
            fine_tune_epochs: 3,
            lr0: 1e-3,
            seed: 8,
            augment: AugmentConfig::identity(6, 6),
            ..TrainConfig::default()
        };
        let (new_spec, outcome) = fine_tune(&spec, &pretrained, &dataset, &config).unwrap();
        assert_eq!(new_spec.output_channels, 8);
        assert_eq!(outcome.history.len(), 3);
        assert!(outcome.history.len() <= 50);
    }

    #[test]
    fn trained_model_beats_constant_predictor_on_synthetic_data() {
        use crate::cube::CameraResponse;
        use crate::synth::{make_dataset, make_endmembers, SceneSpec};
        let grid: Vec<f64> = (0..10).map(|i| 500.0 + 25.0 * i as f64).collect();
        let template = SceneSpec {
            height: 16,
            width: 16,
            lambda_min: 500.0,
            lambda_max: 725.0,
            lambda_step: 25.0,
            endmembers: make_endmembers(&grid, 3, 7).unwrap(),
            blob_count: 4,
            noise_sigma: 0.002,
            seed: 7,
        };
        let response = CameraResponse::boxcar_thirds(&grid).unwrap();
        let dataset = make_dataset(8, &template, &response, (0.625, 0.125, 0.25)).unwrap();
        let spec = crate::nn::ModelSpec::pixel_feature_net(10);
        let config = TrainConfig {
            epochs: 30,
            lr0: 1e-3,
            patch: 8,
            seed: 3,
            augment: AugmentConfig::identity(16, 16),
            ..TrainConfig::default()
        };
        let outcome = train_model(&spec, &dataset, &config).unwrap();
        let val_pairs = dataset.split(Split::Val);
        let train_pairs = dataset.split(Split::Train);
        let means = per_channel_mean(&train_pairs);
        let baseline = constant_predictor_rmse(&means, &val_pairs);
        let model = model_rmse(&spec, &outcome.weights, &val_pairs).unwrap();
        assert!(
            model < baseline,
            "validation RMSE {} not below the constant-predictor baseline {}",
            model,
            baseline
        );
    }

    #[test]
    fn history_csv_roundtrip() {
        let history = vec![
            EpochStats {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 1e-4,
            },
            EpochStats {
                epoch: 2,
                train_loss: 0.375,
                val_loss: 0.1875,
                lr: 9.5e-5,
            },
        ];
        let text = history_csv(&history);
        assert!(text.starts_with("epoch,train_loss,val_loss,lr\n"));
        let parsed = parse_history_csv(&text).unwrap();
        assert_eq!(parsed, history);
    }

    #[test]
    fn baseline_beats_nothing_on_constant_data() {
        let dataset = constant_dataset();
        let train_pairs = dataset.split(Split::Train);
        let means = per_channel_mean(&train_pairs);
        assert!((means[0] - 0.3).abs() < 1e-12);
        let rmse = constant_predictor_rmse(&means, &train_pairs);
        assert!(rmse < 1e-12, "constant data has zero baseline rmse");
    }
}
