//! Minimal neural-network engine: dense, 3x3 convolution, 1x1 convolution,
//! ReLU and a single spectral-wise self-attention block, with exact analytic
//! gradients. Everything runs in f64; checkpoints are stored as f32.

mod kernels;

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cube::{Hypercube, RgbImage};
use crate::fsio;

/// Magic bytes at the start of every weight checkpoint.
pub const HSW1_MAGIC: &[u8; 4] = b"HSW1";
/// Current checkpoint format version.
pub const HSW1_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv3,
    Conv1,
    Relu,
    SpectralAttention,
}

impl LayerKind {
    fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv3 => 1,
            LayerKind::Conv1 => 2,
            LayerKind::Relu => 3,
            LayerKind::SpectralAttention => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self, NnError> {
        Ok(match code {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv3,
            2 => LayerKind::Conv1,
            3 => LayerKind::Relu,
            4 => LayerKind::SpectralAttention,
            other => return Err(NnError::Format(format!("unknown layer kind {}", other))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Attention only; 1 elsewhere.
    pub heads: usize,
}

impl LayerSpec {
    pub fn dense(i: usize, o: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_channels: i,
            out_channels: o,
            heads: 1,
        }
    }

    pub fn conv3(i: usize, o: usize) -> Self {
        Self {
            kind: LayerKind::Conv3,
            in_channels: i,
            out_channels: o,
            heads: 1,
        }
    }

    pub fn conv1(i: usize, o: usize) -> Self {
        Self {
            kind: LayerKind::Conv1,
            in_channels: i,
            out_channels: o,
            heads: 1,
        }
    }

    pub fn relu(c: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_channels: c,
            out_channels: c,
            heads: 1,
        }
    }

    pub fn spectral_attention(dim: usize, heads: usize) -> Self {
        Self {
            kind: LayerKind::SpectralAttention,
            in_channels: dim,
            out_channels: dim,
            heads,
        }
    }

    /// Learnable parameter count, biases included.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense | LayerKind::Conv1 => {
                self.in_channels * self.out_channels + self.out_channels
            }
            LayerKind::Conv3 => 9 * self.in_channels * self.out_channels + self.out_channels,
            LayerKind::Relu => 0,
            LayerKind::SpectralAttention => 3 * self.in_channels * self.in_channels,
        }
    }
}

/// The three model architectures the toolkit ships.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PixelFeatureNet,
    LocalFeatureNet,
    SpectralAttentionNet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::PixelFeatureNet,
        ModelKind::LocalFeatureNet,
        ModelKind::SpectralAttentionNet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::PixelFeatureNet => "pixel_feature_net",
            ModelKind::LocalFeatureNet => "local_feature_net",
            ModelKind::SpectralAttentionNet => "spectral_attention_net",
        }
    }

    /// Canonical architecture for `output_channels` output channels.
    pub fn build(&self, output_channels: usize) -> ModelSpec {
        match self {
            ModelKind::PixelFeatureNet => ModelSpec::pixel_feature_net(output_channels),
            ModelKind::LocalFeatureNet => ModelSpec::local_feature_net(output_channels),
            ModelKind::SpectralAttentionNet => ModelSpec::spectral_attention_net(output_channels),
        }
    }
}

impl FromStr for ModelKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        ModelKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| {
                NnError::Spec(format!(
                    "unknown model {:?}; valid names: {}",
                    s,
                    ModelKind::ALL.map(|k| k.as_str()).join(", ")
                ))
            })
    }
}

/// An ordered layer graph mapping a 3-channel image to `output_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: ModelKind,
    pub layers: Vec<LayerSpec>,
    pub output_channels: usize,
}

impl ModelSpec {
    /// Four fully-connected layers applied per pixel, widths 8/16/32.
    pub fn pixel_feature_net(c: usize) -> ModelSpec {
        ModelSpec {
            name: ModelKind::PixelFeatureNet,
            layers: vec![
                LayerSpec::dense(3, 8),
                LayerSpec::relu(8),
                LayerSpec::dense(8, 16),
                LayerSpec::relu(16),
                LayerSpec::dense(16, 32),
                LayerSpec::relu(32),
                LayerSpec::dense(32, c),
            ],
            output_channels: c,
        }
    }

    /// Convolutional variant: three 3x3 layers and a 1x1 head, widths 8/16/32.
    pub fn local_feature_net(c: usize) -> ModelSpec {
        ModelSpec {
            name: ModelKind::LocalFeatureNet,
            layers: vec![
                LayerSpec::conv3(3, 8),
                LayerSpec::relu(8),
                LayerSpec::conv3(8, 16),
                LayerSpec::relu(16),
                LayerSpec::conv3(16, 32),
                LayerSpec::relu(32),
                LayerSpec::conv1(32, c),
            ],
            output_channels: c,
        }
    }

    /// Toy demonstrator of channel-wise self-attention between two 1x1 convs.
    pub fn spectral_attention_net(c: usize) -> ModelSpec {
        ModelSpec {
            name: ModelKind::SpectralAttentionNet,
            layers: vec![
                LayerSpec::conv1(3, 16),
                LayerSpec::relu(16),
                LayerSpec::spectral_attention(16, 4),
                LayerSpec::conv1(16, c),
            ],
            output_channels: c,
        }
    }

    /// Check channel chaining, attention divisibility and the output width.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Spec("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels == 0 || layer.out_channels == 0 {
                return Err(NnError::Spec(format!("layer {} has a zero channel count", i)));
            }
            match layer.kind {
                LayerKind::Relu | LayerKind::SpectralAttention
                    if layer.in_channels != layer.out_channels =>
                {
                    return Err(NnError::Spec(format!(
                        "layer {} must preserve channel count",
                        i
                    )));
                }
                LayerKind::SpectralAttention if layer.in_channels % layer.heads != 0 => {
                    return Err(NnError::Spec(format!(
                        "layer {}: {} channels not divisible by {} heads",
                        i, layer.in_channels, layer.heads
                    )));
                }
                _ => {}
            }
            if i + 1 < self.layers.len()
                && layer.out_channels != self.layers[i + 1].in_channels
            {
                return Err(NnError::Spec(format!(
                    "layer {} outputs {} channels but layer {} expects {}",
                    i,
                    layer.out_channels,
                    i + 1,
                    self.layers[i + 1].in_channels
                )));
            }
        }
        let last = self.layers.last().unwrap();
        if last.out_channels != self.output_channels {
            return Err(NnError::Spec(format!(
                "final layer outputs {} channels, spec says {}",
                last.out_channels, self.output_channels
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map(|l| l.in_channels).unwrap_or(0)
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// (offset, length) of each layer's slice in the flat parameter vector.
    pub fn layer_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let len = layer.param_count();
            spans.push((offset, len));
            offset += len;
        }
        spans
    }
}

/// Exact parameter count of a model, biases included.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_count()
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Flat f64 parameter store for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: Vec<f64>,
}

impl Weights {
    pub fn zeros(spec: &ModelSpec) -> Weights {
        Weights {
            params: vec![0.0; spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Round every parameter to f32, the precision of the checkpoint format.
    pub fn quantized_to_f32(&self) -> Weights {
        Weights {
            params: self.params.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Output-layer draws are damped relative to the hidden-layer bound:
/// targets are normalized reflectance (magnitude ~1/C), and a full-width
/// random head would swamp them with variance the low training rate
/// cannot unwind.
pub const HEAD_INIT_DAMPING: f64 = 0.1;

/// Deterministic fan-scaled uniform initialization; biases are zero.
/// The final layer is drawn with [`HEAD_INIT_DAMPING`] times the bound.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::zeros(spec);
    let last = spec.layers.len() - 1;
    for (i, (layer, (offset, len))) in spec.layers.iter().zip(spec.layer_spans()).enumerate() {
        let scale = if i == last { HEAD_INIT_DAMPING } else { 1.0 };
        init_layer(layer, &mut weights.params[offset..offset + len], &mut rng, scale);
    }
    weights
}

fn init_layer(layer: &LayerSpec, params: &mut [f64], rng: &mut ChaCha8Rng, scale: f64) {
    match layer.kind {
        LayerKind::Dense | LayerKind::Conv1 => {
            let bound = scale * glorot_bound(layer.in_channels, layer.out_channels);
            let n = layer.in_channels * layer.out_channels;
            for p in params.iter_mut().take(n) {
                *p = rng.gen_range(-bound..bound);
            }
            // biases stay zero
        }
        LayerKind::Conv3 => {
            let bound = scale * glorot_bound(9 * layer.in_channels, 9 * layer.out_channels);
            let n = 9 * layer.in_channels * layer.out_channels;
            for p in params.iter_mut().take(n) {
                *p = rng.gen_range(-bound..bound);
            }
        }
        LayerKind::Relu => {}
        LayerKind::SpectralAttention => {
            let d = layer.in_channels;
            let bound = scale * glorot_bound(d, d);
            for p in params.iter_mut() {
                *p = rng.gen_range(-bound..bound);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Cached activations of one forward pass: the input of every layer plus
/// the final output.
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
    height: usize,
    width: usize,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

fn check_weights(spec: &ModelSpec, weights: &Weights) -> Result<(), NnError> {
    if weights.len() != spec.param_count() {
        return Err(NnError::Shape(format!(
            "weight vector has {} parameters, spec needs {}",
            weights.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Run the model on a channel-last buffer, keeping per-layer inputs for a
/// later backward pass.
pub fn forward_trace(
    spec: &ModelSpec,
    weights: &Weights,
    input: &[f64],
    height: usize,
    width: usize,
) -> Result<ForwardTrace, NnError> {
    spec.validate()?;
    check_weights(spec, weights)?;
    let pixels = height * width;
    if input.len() != pixels * spec.input_channels() {
        return Err(NnError::Shape(format!(
            "input has {} values, expected {}x{}x{}",
            input.len(),
            height,
            width,
            spec.input_channels()
        )));
    }
    let spans = spec.layer_spans();
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(input.to_vec());
    for (layer, (offset, len)) in spec.layers.iter().zip(spans) {
        let params = &weights.params[offset..offset + len];
        let x = activations.last().unwrap();
        let out = match layer.kind {
            LayerKind::Dense | LayerKind::Conv1 => kernels::dense_forward(
                params,
                x,
                pixels,
                layer.in_channels,
                layer.out_channels,
            ),
            LayerKind::Conv3 => kernels::conv3_forward(
                params,
                x,
                height,
                width,
                layer.in_channels,
                layer.out_channels,
            ),
            LayerKind::Relu => kernels::relu_forward(x),
            LayerKind::SpectralAttention => {
                let (out, _) =
                    kernels::attention_forward(params, x, pixels, layer.in_channels, layer.heads);
                out
            }
        };
        activations.push(out);
    }
    Ok(ForwardTrace {
        activations,
        height,
        width,
    })
}

/// Run the model on a channel-last buffer and return the output buffer.
pub fn forward_channels(
    spec: &ModelSpec,
    weights: &Weights,
    input: &[f64],
    height: usize,
    width: usize,
) -> Result<Vec<f64>, NnError> {
    let mut trace = forward_trace(spec, weights, input, height, width)?;
    Ok(trace.activations.pop().unwrap())
}

/// Predict a hypercube from an RGB image. The output carries a nominal
/// 1..=C nm wavelength axis; callers overlay the dataset axis with
/// [`Hypercube::with_wavelengths`].
pub fn forward(spec: &ModelSpec, weights: &Weights, rgb: &RgbImage) -> Result<Hypercube, NnError> {
    if spec.input_channels() != 3 {
        return Err(NnError::Spec(format!(
            "model expects {} input channels, rgb has 3",
            spec.input_channels()
        )));
    }
    let data = forward_channels(spec, weights, rgb.data(), rgb.height(), rgb.width())?;
    let wavelengths = (1..=spec.output_channels).map(|i| i as f64).collect();
    Hypercube::new(rgb.height(), rgb.width(), wavelengths, data)
        .map_err(|e| NnError::Shape(e.to_string()))
}

/// Gradients of `<grad_out, forward(input)>` with respect to the weights and
/// the input, reusing a cached forward trace.
pub fn backward_from_trace(
    spec: &ModelSpec,
    weights: &Weights,
    trace: &ForwardTrace,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    check_weights(spec, weights)?;
    let pixels = trace.height * trace.width;
    if grad_out.len() != pixels * spec.output_channels {
        return Err(NnError::Shape(format!(
            "grad_out has {} values, expected {}",
            grad_out.len(),
            pixels * spec.output_channels
        )));
    }
    let spans = spec.layer_spans();
    let mut grad_params = vec![0.0; spec.param_count()];
    let mut grad = grad_out.to_vec();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let (offset, len) = spans[i];
        let params = &weights.params[offset..offset + len];
        let x = &trace.activations[i];
        let mut grad_x = vec![0.0; x.len()];
        let gp = &mut grad_params[offset..offset + len];
        match layer.kind {
            LayerKind::Dense | LayerKind::Conv1 => kernels::dense_backward(
                params,
                x,
                &grad,
                pixels,
                layer.in_channels,
                layer.out_channels,
                gp,
                &mut grad_x,
            ),
            LayerKind::Conv3 => kernels::conv3_backward(
                params,
                x,
                &grad,
                trace.height,
                trace.width,
                layer.in_channels,
                layer.out_channels,
                gp,
                &mut grad_x,
            ),
            LayerKind::Relu => kernels::relu_backward(x, &grad, &mut grad_x),
            LayerKind::SpectralAttention => {
                // recompute the cheap projection/attention state
                let (_, state) =
                    kernels::attention_forward(params, x, pixels, layer.in_channels, layer.heads);
                kernels::attention_backward(
                    params,
                    x,
                    &state,
                    &grad,
                    pixels,
                    layer.in_channels,
                    layer.heads,
                    gp,
                    &mut grad_x,
                );
            }
        }
        grad = grad_x;
    }
    Ok((grad_params, grad))
}

/// Forward plus backward in one call.
pub fn backward(
    spec: &ModelSpec,
    weights: &Weights,
    input: &[f64],
    height: usize,
    width: usize,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let trace = forward_trace(spec, weights, input, height, width)?;
    backward_from_trace(spec, weights, &trace, grad_out)
}

/// Stand-alone spectral attention block on an `pixels x dim` buffer.
/// `params` holds Wq, Wk, Wv, each `dim x dim` row-major.
pub fn spectral_attention_forward(
    params: &[f64],
    x: &[f64],
    pixels: usize,
    dim: usize,
    heads: usize,
) -> Result<Vec<f64>, NnError> {
    if heads == 0 || dim % heads != 0 {
        return Err(NnError::Shape(format!(
            "{} channels not divisible by {} heads",
            dim, heads
        )));
    }
    if params.len() != 3 * dim * dim {
        return Err(NnError::Shape(format!(
            "attention params {} != 3*{}^2",
            params.len(),
            dim
        )));
    }
    if x.len() != pixels * dim {
        return Err(NnError::Shape("input buffer size mismatch".into()));
    }
    Ok(kernels::attention_forward(params, x, pixels, dim, heads).0)
}

/// The row-stochastic attention matrices of each head for a given input.
pub fn spectral_attention_matrices(
    params: &[f64],
    x: &[f64],
    pixels: usize,
    dim: usize,
    heads: usize,
) -> Result<Vec<Vec<f64>>, NnError> {
    if heads == 0 || dim % heads != 0 {
        return Err(NnError::Shape(format!(
            "{} channels not divisible by {} heads",
            dim, heads
        )));
    }
    let (_, state) = kernels::attention_forward(params, x, pixels, dim, heads);
    Ok(state.attn)
}

// ---------------------------------------------------------------------------
// Head replacement
// ---------------------------------------------------------------------------

/// Swap the final dense/1x1 layer for one with `new_output_channels`
/// outputs. Body parameters are preserved bit-exactly; the new head is
/// re-initialized from `seed`.
pub fn replace_head(
    spec: &ModelSpec,
    weights: &Weights,
    new_output_channels: usize,
    seed: u64,
) -> Result<(ModelSpec, Weights), NnError> {
    spec.validate()?;
    check_weights(spec, weights)?;
    if new_output_channels == 0 {
        return Err(NnError::Spec("head must have at least one output".into()));
    }
    let last = *spec.layers.last().unwrap();
    if !matches!(last.kind, LayerKind::Dense | LayerKind::Conv1) {
        return Err(NnError::Spec(
            "final layer must be dense or 1x1 conv to replace the head".into(),
        ));
    }
    let mut new_spec = spec.clone();
    {
        let head = new_spec.layers.last_mut().unwrap();
        head.out_channels = new_output_channels;
    }
    new_spec.output_channels = new_output_channels;

    let body_len = spec.param_count() - last.param_count();
    let mut new_weights = Weights::zeros(&new_spec);
    new_weights.params[..body_len].copy_from_slice(&weights.params[..body_len]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new_head = *new_spec.layers.last().unwrap();
    init_layer(
        &new_head,
        &mut new_weights.params[body_len..],
        &mut rng,
        HEAD_INIT_DAMPING,
    );
    Ok((new_spec, new_weights))
}

// ---------------------------------------------------------------------------
// Checkpoint format (HSW1)
// ---------------------------------------------------------------------------

/// Serialize spec + weights: magic, version, model name, layer list,
/// output channel count, then the flat parameters as f32 little-endian.
pub fn encode_weights(spec: &ModelSpec, weights: &Weights) -> Result<Vec<u8>, NnError> {
    spec.validate()?;
    check_weights(spec, weights)?;
    let name = spec.name.as_str().as_bytes();
    let mut out = Vec::new();
    out.extend_from_slice(HSW1_MAGIC);
    out.push(HSW1_VERSION);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(spec.layers.len() as u32).to_le_bytes());
    for layer in &spec.layers {
        out.push(layer.kind.code());
        out.extend_from_slice(&(layer.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_channels as u32).to_le_bytes());
        out.extend_from_slice(&(layer.heads as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.output_channels as u32).to_le_bytes());
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for &p in &weights.params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse an HSW1 checkpoint.
pub fn decode_weights(bytes: &[u8]) -> Result<(ModelSpec, Weights), NnError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::Format(format!(
                "unexpected end of checkpoint while reading {}",
                what
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize, what: &str| -> Result<u32, NnError> {
        let b = take(pos, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 4, "magic")? != HSW1_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    if take(&mut pos, 1, "version")?[0] != HSW1_VERSION {
        return Err(NnError::Format("unsupported version".into()));
    }
    let name_len = {
        let b = take(&mut pos, 2, "name length")?;
        u16::from_le_bytes([b[0], b[1]]) as usize
    };
    let name_bytes = take(&mut pos, name_len, "name")?;
    let name_str = std::str::from_utf8(name_bytes)
        .map_err(|_| NnError::Format("model name is not utf-8".into()))?;
    let name = ModelKind::from_str(name_str).map_err(|e| NnError::Format(e.to_string()))?;

    let layer_count = u32_at(&mut pos, "layer count")? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let kind = LayerKind::from_code(take(&mut pos, 1, "layer kind")?[0])?;
        let in_channels = u32_at(&mut pos, "in channels")? as usize;
        let out_channels = u32_at(&mut pos, "out channels")? as usize;
        let heads = u32_at(&mut pos, "heads")? as usize;
        if heads == 0 {
            return Err(NnError::Format(format!("layer {} has zero heads", i)));
        }
        layers.push(LayerSpec {
            kind,
            in_channels,
            out_channels,
            heads,
        });
    }
    let output_channels = u32_at(&mut pos, "output channels")? as usize;
    let declared = {
        let b = take(&mut pos, 8, "parameter count")?;
        u64::from_le_bytes(b.try_into().unwrap()) as usize
    };
    let spec = ModelSpec {
        name,
        layers,
        output_channels,
    };
    spec.validate().map_err(|e| NnError::Format(e.to_string()))?;
    if declared != spec.param_count() {
        return Err(NnError::Format(format!(
            "checkpoint declares {} parameters, spec needs {}",
            declared,
            spec.param_count()
        )));
    }
    let mut params = Vec::with_capacity(declared);
    for _ in 0..declared {
        let b = take(&mut pos, 4, "parameter")?;
        params.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    }
    if pos != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - pos
        )));
    }
    Ok((spec, Weights { params }))
}

/// Write a checkpoint atomically.
pub fn save_weights(spec: &ModelSpec, weights: &Weights, path: &Path) -> Result<(), NnError> {
    let bytes = encode_weights(spec, weights)?;
    fsio::write_atomic(path, &bytes)?;
    Ok(())
}

/// Load a checkpoint.
pub fn load_weights(path: &Path) -> Result<(ModelSpec, Weights), NnError> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify;
    use rand::Rng;

    fn random_input(pixels: usize, channels: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pixels * channels).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn param_counts_match_derived_values() {
        assert_eq!(param_count(&ModelSpec::pixel_feature_net(27)), 1611);
        assert_eq!(param_count(&ModelSpec::pixel_feature_net(100)), 4020);
        assert_eq!(param_count(&ModelSpec::local_feature_net(27)), 6923);
        assert_eq!(param_count(&ModelSpec::local_feature_net(100)), 9332);
    }

    #[test]
    fn param_counts_round_to_reported_sizes() {
        let k = |n: usize| (n as f64 / 100.0).round() / 10.0;
        assert_eq!(k(param_count(&ModelSpec::pixel_feature_net(27))), 1.6);
        assert_eq!(k(param_count(&ModelSpec::pixel_feature_net(100))), 4.0);
        assert_eq!(k(param_count(&ModelSpec::local_feature_net(27))), 6.9);
        assert_eq!(k(param_count(&ModelSpec::local_feature_net(100))), 9.3);
    }

    #[test]
    fn model_name_parsing() {
        assert_eq!(
            ModelKind::from_str("pixel_feature_net").unwrap(),
            ModelKind::PixelFeatureNet
        );
        let err = ModelKind::from_str("resnet").unwrap_err();
        assert!(err.to_string().contains("local_feature_net"));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::pixel_feature_net(5);
        let a = init_weights(&spec, 42);
        let b = init_weights(&spec, 42);
        assert_eq!(a, b, "same seed must give identical weights");
        let c = init_weights(&spec, 43);
        assert_ne!(a, c, "different seeds must differ");
        // first dense layer is 3 -> 8: |w| <= sqrt(6 / (3 + 8))
        let bound = (6.0f64 / 11.0).sqrt();
        for &v in &a.params[..24] {
            assert!(v.abs() <= bound, "{} exceeds {}", v, bound);
        }
        // biases are zero
        for &v in &a.params[24..32] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let spec = ModelSpec::pixel_feature_net(4);
        let mut weights = Weights::zeros(&spec);
        // final layer bias lives at the tail of the parameter vector
        let n = weights.len();
        for (i, p) in weights.params[n - 4..].iter_mut().enumerate() {
            *p = 0.25 * (i + 1) as f64;
        }
        let out = forward_channels(&spec, &weights, &random_input(6, 3, 1), 2, 3).unwrap();
        for px in out.chunks(4) {
            assert_eq!(px, &[0.25, 0.5, 0.75, 1.0]);
        }
    }

    #[test]
    fn weight_length_mismatch_is_shape_error() {
        let spec = ModelSpec::pixel_feature_net(4);
        let weights = Weights {
            params: vec![0.0; 3],
        };
        assert!(matches!(
            forward_channels(&spec, &weights, &random_input(4, 3, 1), 2, 2).unwrap_err(),
            NnError::Shape(_)
        ));
    }

    #[test]
    fn pixel_feature_net_is_pixelwise_local() {
        let spec = ModelSpec::pixel_feature_net(6);
        let weights = init_weights(&spec, 7);
        let (h, w) = (5, 4);
        let a = random_input(h * w, 3, 2);
        let mut b = a.clone();
        b[0] += 0.3;
        b[1] -= 0.1;
        let out_a = forward_channels(&spec, &weights, &a, h, w).unwrap();
        let out_b = forward_channels(&spec, &weights, &b, h, w).unwrap();
        for p in 0..h * w {
            let differs = out_a[p * 6..(p + 1) * 6]
                .iter()
                .zip(&out_b[p * 6..(p + 1) * 6])
                .any(|(x, y)| x != y);
            if p == 0 {
                assert!(differs, "perturbed pixel must change");
            } else {
                assert!(!differs, "pixel {} changed without input change", p);
            }
        }
    }

    #[test]
    fn local_feature_net_receptive_field_is_bounded() {
        // three stacked 3x3 layers reach radius 3; the 1x1 head adds nothing,
        // so nothing outside radius 4 (nor even radius 3) may change
        let spec = ModelSpec::local_feature_net(5);
        let weights = init_weights(&spec, 11);
        let (h, w) = (11, 11);
        let a = random_input(h * w, 3, 3);
        let mut b = a.clone();
        let center = (5 * w + 5) * 3;
        b[center] += 0.5;
        let out_a = forward_channels(&spec, &weights, &a, h, w).unwrap();
        let out_b = forward_channels(&spec, &weights, &b, h, w).unwrap();
        let mut max_changed_radius = 0i64;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let differs = out_a[p * 5..(p + 1) * 5]
                    .iter()
                    .zip(&out_b[p * 5..(p + 1) * 5])
                    .any(|(u, v)| u != v);
                if differs {
                    let radius = (y as i64 - 5).abs().max((x as i64 - 5).abs());
                    max_changed_radius = max_changed_radius.max(radius);
                }
            }
        }
        assert!(max_changed_radius >= 1, "perturbation had no spatial spread");
        assert!(
            max_changed_radius <= 3,
            "change escaped the receptive field: radius {}",
            max_changed_radius
        );
    }

    #[test]
    fn backward_zero_grad_out_gives_zero_grads() {
        let spec = ModelSpec::local_feature_net(4);
        let weights = init_weights(&spec, 5);
        let input = random_input(12, 3, 9);
        let grad_out = vec![0.0; 12 * 4];
        let (gw, gx) = backward(&spec, &weights, &input, 3, 4, &grad_out).unwrap();
        assert!(gw.iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_dense_scalar_gradient_is_input() {
        // one dense 1 -> 1 layer: d(w x + b)/dw = x, /db = 1, /dx = w
        let spec = ModelSpec {
            name: ModelKind::PixelFeatureNet,
            layers: vec![LayerSpec::dense(1, 1)],
            output_channels: 1,
        };
        let weights = Weights {
            params: vec![0.7, 0.2],
        };
        let (gw, gx) = backward(&spec, &weights, &[3.0], 1, 1, &[1.0]).unwrap();
        assert_eq!(gw, vec![3.0, 1.0]);
        assert_eq!(gx, vec![0.7]);
    }

    #[test]
    fn gradients_match_finite_differences_per_layer() {
        for (name, spec, h, w) in verify::gradient_check_cases(4) {
            let report = verify::gradient_check(&spec, h, w, 1234);
            assert!(
                report.max_rel_error <= 1e-5,
                "{}: max relative error {} at 64-bit",
                name,
                report.max_rel_error
            );
        }
    }

    #[test]
    fn attention_identity_projection_doubles_single_channel() {
        // D = heads = 1 with identity projections: softmax over one token is
        // 1, so out = x + x
        let params = vec![1.0, 1.0, 1.0];
        let x = vec![0.4, -0.3, 0.9, 0.1];
        let out = spectral_attention_forward(&params, &x, 4, 1, 1).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 8;
        let heads = 2;
        let params: Vec<f64> = (0..3 * dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x = random_input(10, dim, 23);
        let mats = spectral_attention_matrices(&params, &x, 10, dim, heads).unwrap();
        assert_eq!(mats.len(), heads);
        let dh = dim / heads;
        for mat in &mats {
            for row in mat.chunks(dh) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sums to {}", sum);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn attention_head_mismatch_is_shape_error() {
        let params = vec![0.0; 3 * 9];
        let x = vec![0.0; 6];
        assert!(matches!(
            spectral_attention_forward(&params, &x, 2, 3, 2).unwrap_err(),
            NnError::Shape(_)
        ));
    }

    #[test]
    fn replace_head_preserves_body_bitwise() {
        let spec = ModelSpec::pixel_feature_net(100);
        let weights = init_weights(&spec, 77);
        let (new_spec, new_weights) = replace_head(&spec, &weights, 27, 5).unwrap();
        assert_eq!(new_spec.output_channels, 27);
        assert_eq!(new_spec.param_count(), 1611);
        // body = 1611 - 33*27 = 720 parameters
        let body = 720;
        assert_eq!(new_weights.params[..body], weights.params[..body]);
        assert_eq!(new_weights.len(), 1611);
        // head biases are zero after re-init
        assert!(new_weights.params[1611 - 27..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replace_head_same_width_redraws_head() {
        let spec = ModelSpec::pixel_feature_net(10);
        let weights = init_weights(&spec, 1);
        let (new_spec, new_weights) = replace_head(&spec, &weights, 10, 2).unwrap();
        assert_eq!(new_spec, spec);
        let body = spec.param_count() - spec.layers.last().unwrap().param_count();
        assert_eq!(new_weights.params[..body], weights.params[..body]);
        assert_ne!(new_weights.params[body..], weights.params[body..]);
    }

    #[test]
    fn replace_head_is_deterministic() {
        let spec = ModelSpec::local_feature_net(20);
        let weights = init_weights(&spec, 3);
        let (_, a) = replace_head(&spec, &weights, 7, 99).unwrap();
        let (_, b) = replace_head(&spec, &weights, 7, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replace_head_rejects_non_linear_tail() {
        let spec = ModelSpec {
            name: ModelKind::PixelFeatureNet,
            layers: vec![LayerSpec::dense(3, 4), LayerSpec::relu(4)],
            output_channels: 4,
        };
        let weights = init_weights(&spec, 0);
        assert!(matches!(
            replace_head(&spec, &weights, 2, 0).unwrap_err(),
            NnError::Spec(_)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let spec = ModelSpec::spectral_attention_net(9);
        let weights = init_weights(&spec, 123).quantized_to_f32();
        let bytes = encode_weights(&spec, &weights).unwrap();
        let (spec2, weights2) = decode_weights(&bytes).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(weights2, weights);
        // encoding again gives identical bytes
        assert_eq!(encode_weights(&spec2, &weights2).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hsw1");
        let spec = ModelSpec::pixel_feature_net(6);
        let weights = init_weights(&spec, 9).quantized_to_f32();
        save_weights(&spec, &weights, &path).unwrap();
        let (spec2, weights2) = load_weights(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(weights2, weights);
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let spec = ModelSpec::pixel_feature_net(4);
        let weights = init_weights(&spec, 2);
        let mut bytes = encode_weights(&spec, &weights).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_weights(&bytes).unwrap_err(),
            NnError::Format(_)
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::local_feature_net(8);
        let weights = init_weights(&spec, 10);
        let input = random_input(30, 3, 4);
        let a = forward_channels(&spec, &weights, &input, 5, 6).unwrap();
        let b = forward_channels(&spec, &weights, &input, 5, 6).unwrap();
        assert_eq!(a, b);
    }
}
