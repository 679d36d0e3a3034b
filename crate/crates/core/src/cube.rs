//! Hypercube / RGB data model, HSC1 file I/O, L1 normalization, RGB synthesis
//! from hyperspectral data, histogram equalization and spectral-range
//! partitioning.
//!
//! Storage layout is channel-last row-major `(h, w, c)`, so every pixel's
//! spectrum is a contiguous slice.

use std::path::Path;

use thiserror::Error;

use crate::fsio;

/// Magic bytes at the start of every cube file.
pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
/// Current cube file format version.
pub const HSC1_VERSION: u8 = 1;

/// Lower bound of the visible wavelength range, nm (inclusive).
pub const VISIBLE_MIN_NM: f64 = 400.0;
/// Upper bound of the visible wavelength range, nm (inclusive).
pub const VISIBLE_MAX_NM: f64 = 680.0;

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: {0}")]
    Truncation(String),
    #[error("wavelength axis error: {0}")]
    Axis(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid cube: {0}")]
    Validation(String),
    #[error("index out of bounds: {0}")]
    Index(String),
}

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// An H x W x C reflectance volume with a strictly increasing wavelength axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercube {
    height: usize,
    width: usize,
    channels: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
}

impl Hypercube {
    /// Build a cube, checking every invariant: dims at least 1, wavelength
    /// axis strictly increasing with length C, all values finite.
    pub fn new(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        data: Vec<f64>,
    ) -> Result<Self, CubeError> {
        if height == 0 || width == 0 || wavelengths.is_empty() {
            return Err(CubeError::Validation(format!(
                "dimensions must be at least 1x1x1, got {}x{}x{}",
                height,
                width,
                wavelengths.len()
            )));
        }
        let channels = wavelengths.len();
        check_strictly_increasing(&wavelengths)?;
        if data.len() != height * width * channels {
            return Err(CubeError::Validation(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(v) = data.iter().chain(wavelengths.iter()).find(|v| !v.is_finite()) {
            return Err(CubeError::Validation(format!("non-finite value {}", v)));
        }
        Ok(Self {
            height,
            width,
            channels,
            wavelengths,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value at `(h, w, c)`. Panics on out-of-range indices.
    pub fn value(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// The contiguous spectrum of the pixel at `(h, w)`.
    pub fn spectrum(&self, h: usize, w: usize) -> &[f64] {
        let base = (h * self.width + w) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Same shape as `(other)`: equal height, width and channel count.
    pub fn same_shape(&self, other: &Hypercube) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Replace the wavelength axis, keeping the data. Used to attach the
    /// target axis to network predictions, which are born with a nominal one.
    pub fn with_wavelengths(self, wavelengths: Vec<f64>) -> Result<Self, CubeError> {
        Hypercube::new(self.height, self.width, wavelengths, self.data)
    }

    /// Round every value (data and wavelengths) to f32 precision, the
    /// precision of the on-disk format. A quantized cube survives
    /// save/load bit-exactly.
    pub fn quantized_to_f32(&self) -> Hypercube {
        Hypercube {
            height: self.height,
            width: self.width,
            channels: self.channels,
            wavelengths: self.wavelengths.iter().map(|&v| v as f32 as f64).collect(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// An H x W x 3 image with values in [0, 1]; channel order (r, g, b).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, CubeError> {
        if height == 0 || width == 0 {
            return Err(CubeError::Validation("empty image".into()));
        }
        if data.len() != height * width * 3 {
            return Err(CubeError::Validation(format!(
                "rgb data length {} does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CubeError::Validation(format!(
                "rgb value {} outside [0, 1]",
                v
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// (r, g, b) at `(h, w)`.
    pub fn pixel(&self, h: usize, w: usize) -> [f64; 3] {
        let base = (h * self.width + w) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn quantized_to_f32(&self) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

fn check_strictly_increasing(wavelengths: &[f64]) -> Result<(), CubeError> {
    for pair in wavelengths.windows(2) {
        if pair[1] <= pair[0] {
            return Err(CubeError::Axis(format!(
                "wavelengths not strictly increasing at {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Range masks
// ---------------------------------------------------------------------------

/// Which wavelength range a mask covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeKind {
    Full,
    Visible,
    Extended,
}

impl RangeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RangeKind::Full => "full",
            RangeKind::Visible => "visible",
            RangeKind::Extended => "extended",
        }
    }
}

/// A sorted subset of channel indices selecting one wavelength range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeMask {
    pub kind: RangeKind,
    pub indices: Vec<usize>,
}

impl RangeMask {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The full/visible/extended partition of a wavelength axis.
#[derive(Debug, Clone)]
pub struct RangeMasks {
    pub full: RangeMask,
    pub visible: RangeMask,
    pub extended: RangeMask,
}

/// Partition channel indices into full, visible (400 <= lambda <= 680 nm,
/// boundaries inclusive) and extended (the complement) masks.
pub fn make_range_masks(wavelengths: &[f64]) -> Result<RangeMasks, CubeError> {
    if wavelengths.is_empty() {
        return Err(CubeError::Axis("empty wavelength list".into()));
    }
    check_strictly_increasing(wavelengths)?;
    let mut visible = Vec::new();
    let mut extended = Vec::new();
    for (i, &wl) in wavelengths.iter().enumerate() {
        if (VISIBLE_MIN_NM..=VISIBLE_MAX_NM).contains(&wl) {
            visible.push(i);
        } else {
            extended.push(i);
        }
    }
    Ok(RangeMasks {
        full: RangeMask {
            kind: RangeKind::Full,
            indices: (0..wavelengths.len()).collect(),
        },
        visible: RangeMask {
            kind: RangeKind::Visible,
            indices: visible,
        },
        extended: RangeMask {
            kind: RangeKind::Extended,
            indices: extended,
        },
    })
}

// ---------------------------------------------------------------------------
// Camera response
// ---------------------------------------------------------------------------

/// Three sensitivity curves sampled on a cube's wavelength grid, used to
/// aggregate spectral channels into an RGB image. Curve order is (r, g, b).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraResponse {
    pub wavelengths: Vec<f64>,
    pub curves: [Vec<f64>; 3],
}

impl CameraResponse {
    /// Validate the invariants: curves sampled on the grid, non-negative,
    /// each with positive total mass.
    pub fn new(wavelengths: Vec<f64>, curves: [Vec<f64>; 3]) -> Result<Self, CubeError> {
        check_strictly_increasing(&wavelengths)?;
        for (name, curve) in ["red", "green", "blue"].iter().zip(curves.iter()) {
            if curve.len() != wavelengths.len() {
                return Err(CubeError::Axis(format!(
                    "{} curve has {} samples for {} wavelengths",
                    name,
                    curve.len(),
                    wavelengths.len()
                )));
            }
            if curve.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(CubeError::Validation(format!(
                    "{} curve has a negative or non-finite sensitivity",
                    name
                )));
            }
            if curve.iter().sum::<f64>() <= 0.0 {
                return Err(CubeError::Axis(format!("{} curve sums to zero", name)));
            }
        }
        Ok(Self {
            wavelengths,
            curves,
        })
    }

    /// Boxcar response splitting the grid channels that fall inside the
    /// visible range into three equal contiguous bands: the lowest third is
    /// blue, the middle green, the highest red. The response is therefore
    /// supported only on 400-680 nm regardless of the grid extent.
    pub fn boxcar_thirds(wavelengths: &[f64]) -> Result<Self, CubeError> {
        check_strictly_increasing(wavelengths)?;
        let visible: Vec<usize> = wavelengths
            .iter()
            .enumerate()
            .filter(|(_, &wl)| (VISIBLE_MIN_NM..=VISIBLE_MAX_NM).contains(&wl))
            .map(|(i, _)| i)
            .collect();
        if visible.len() < 3 {
            return Err(CubeError::Axis(format!(
                "need at least 3 channels inside {}-{} nm, found {}",
                VISIBLE_MIN_NM,
                VISIBLE_MAX_NM,
                visible.len()
            )));
        }
        let n = visible.len();
        let third = n / 3;
        let cut_bg = third; // blue | green boundary
        let cut_gr = n - third; // green | red boundary
        let mut curves = [
            vec![0.0; wavelengths.len()],
            vec![0.0; wavelengths.len()],
            vec![0.0; wavelengths.len()],
        ];
        for (pos, &ch) in visible.iter().enumerate() {
            if pos < cut_bg {
                curves[2][ch] = 1.0;
            } else if pos < cut_gr {
                curves[1][ch] = 1.0;
            } else {
                curves[0][ch] = 1.0;
            }
        }
        CameraResponse::new(wavelengths.to_vec(), curves)
    }
}

// ---------------------------------------------------------------------------
// File format (HSC1)
// ---------------------------------------------------------------------------

/// Serialize a cube to HSC1 bytes: magic, version, H/W/C as u32 LE, then
/// C f32 wavelengths and H*W*C f32 values, channel-last row-major.
pub fn encode_cube(cube: &Hypercube) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 4 * (cube.channels + cube.data.len()));
    out.extend_from_slice(HSC1_MAGIC);
    out.push(HSC1_VERSION);
    out.extend_from_slice(&(cube.height as u32).to_le_bytes());
    out.extend_from_slice(&(cube.width as u32).to_le_bytes());
    out.extend_from_slice(&(cube.channels as u32).to_le_bytes());
    for &wl in &cube.wavelengths {
        out.extend_from_slice(&(wl as f32).to_le_bytes());
    }
    for &v in &cube.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parse HSC1 bytes back into a cube.
pub fn decode_cube(bytes: &[u8]) -> Result<Hypercube, CubeError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != HSC1_MAGIC {
        return Err(CubeError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(HSC1_MAGIC)
        )));
    }
    let version = r.take(1, "version")?[0];
    if version != HSC1_VERSION {
        return Err(CubeError::Format(format!(
            "unsupported version {}, expected {}",
            version, HSC1_VERSION
        )));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(CubeError::Format(format!(
            "zero dimension in header: {}x{}x{}",
            h, w, c
        )));
    }
    let mut wavelengths = Vec::with_capacity(c);
    for i in 0..c {
        wavelengths.push(r.f32(&format!("wavelength {}", i))? as f64);
    }
    check_strictly_increasing(&wavelengths)?;
    let count = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| CubeError::Format("dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32("data")? as f64);
    }
    if r.remaining() != 0 {
        return Err(CubeError::Format(format!(
            "{} trailing bytes after payload",
            r.remaining()
        )));
    }
    Hypercube::new(h, w, wavelengths, data)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CubeError> {
        if self.pos + n > self.bytes.len() {
            return Err(CubeError::Truncation(format!(
                "unexpected end of data while reading {} (need {} bytes at offset {}, have {})",
                what,
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CubeError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32, CubeError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Load a cube from an HSC1 file.
pub fn load_cube(path: &Path) -> Result<Hypercube, CubeError> {
    let bytes = std::fs::read(path)?;
    decode_cube(&bytes)
}

/// Save a cube to an HSC1 file. Validates the cube first so invalid data is
/// rejected before anything touches the disk; the write itself is atomic.
pub fn save_cube(cube: &Hypercube, path: &Path) -> Result<(), CubeError> {
    // re-run the constructor checks so nothing invalid ever hits the disk
    Hypercube::new(
        cube.height,
        cube.width,
        cube.wavelengths.clone(),
        cube.data.clone(),
    )?;
    fsio::write_atomic(path, &encode_cube(cube))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Scale every pixel spectrum so the sum of absolute values equals 1.
/// All-zero spectra pass through unchanged.
pub fn l1_normalize(cube: &Hypercube) -> Hypercube {
    let mut data = cube.data.clone();
    for px in data.chunks_mut(cube.channels) {
        let mass: f64 = px.iter().map(|v| v.abs()).sum();
        if mass > 0.0 {
            for v in px.iter_mut() {
                *v /= mass;
            }
        }
    }
    Hypercube {
        height: cube.height,
        width: cube.width,
        channels: cube.channels,
        wavelengths: cube.wavelengths.clone(),
        data,
    }
}

/// Aggregate spectral channels into RGB: each output band is the
/// response-weighted mean of the pixel spectrum, clamped to [0, 1].
pub fn synthesize_rgb(cube: &Hypercube, response: &CameraResponse) -> Result<RgbImage, CubeError> {
    if response.wavelengths != cube.wavelengths {
        return Err(CubeError::Axis(
            "camera response is not sampled on the cube's wavelength grid".into(),
        ));
    }
    let mut mass = [0.0f64; 3];
    for k in 0..3 {
        mass[k] = response.curves[k].iter().sum();
        if mass[k] <= 0.0 {
            return Err(CubeError::Axis(format!(
                "{} response has zero mass on this grid",
                ["red", "green", "blue"][k]
            )));
        }
    }
    let mut data = Vec::with_capacity(cube.height * cube.width * 3);
    for px in cube.data.chunks(cube.channels) {
        for k in 0..3 {
            let mut acc = 0.0;
            for (c, &v) in px.iter().enumerate() {
                acc += response.curves[k][c] * v;
            }
            data.push((acc / mass[k]).clamp(0.0, 1.0));
        }
    }
    RgbImage::new(cube.height, cube.width, data)
}

/// Remap each channel independently through its empirical CDF (rank / N
/// convention, so the channel maximum maps to 1.0). Preserves the ordering
/// of values within a channel.
pub fn histogram_equalize(cube: &Hypercube) -> Hypercube {
    let pixels = cube.height * cube.width;
    let mut data = cube.data.clone();
    let mut channel = Vec::with_capacity(pixels);
    for c in 0..cube.channels {
        channel.clear();
        channel.extend((0..pixels).map(|p| cube.data[p * cube.channels + c]));
        let mut sorted = channel.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (p, &v) in channel.iter().enumerate() {
            // rank = number of values <= v
            let rank = sorted.partition_point(|&s| s <= v);
            data[p * cube.channels + c] = rank as f64 / pixels as f64;
        }
    }
    Hypercube {
        height: cube.height,
        width: cube.width,
        channels: cube.channels,
        wavelengths: cube.wavelengths.clone(),
        data,
    }
}

/// The spectrum of one pixel, for CSV export and point-spectrum plots.
pub fn extract_spectrum(cube: &Hypercube, h: usize, w: usize) -> Result<Vec<f64>, CubeError> {
    if h >= cube.height || w >= cube.width {
        return Err(CubeError::Index(format!(
            "pixel ({}, {}) outside {}x{}",
            h, w, cube.height, cube.width
        )));
    }
    Ok(cube.spectrum(h, w).to_vec())
}

/// CSV body for one spectrum: header `wavelength_nm,value` then C rows.
pub fn spectrum_csv(wavelengths: &[f64], values: &[f64]) -> String {
    let mut out = String::from("wavelength_nm,value\n");
    for (wl, v) in wavelengths.iter().zip(values.iter()) {
        out.push_str(&format!("{},{}\n", wl, v));
    }
    out
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
