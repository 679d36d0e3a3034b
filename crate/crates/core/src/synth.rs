//! Synthetic paired RGB/HSI dataset generator. Scenes are convex mixtures
//! of smooth endmember spectra over blobby abundance maps, so every pixel
//! has analytically known structure.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cube::{self, CameraResponse, CubeError, Hypercube, RgbImage};
use crate::fsio;
use crate::metrics::spectral_angle;

/// Minimum pairwise spectral angle between generated endmembers, radians.
pub const ENDMEMBER_MIN_ANGLE: f64 = 0.1;
/// Nominal wavelength labels for RGB planes stored as HSC1 (ascending, so
/// the stored channel order is blue, green, red).
pub const RGB_NOMINAL_WAVELENGTHS: [f64; 3] = [460.0, 540.0, 620.0];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Cube(#[from] CubeError),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Endmembers
// ---------------------------------------------------------------------------

/// A pure-material reference spectrum, non-negative with unit L1 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Endmember {
    pub name: String,
    pub spectrum: Vec<f64>,
}

fn random_spectrum(grid: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let span = grid[grid.len() - 1] - grid[0];
    let bumps = rng.gen_range(2..=4usize);
    // small positive floor keeps spectra strictly positive; the bumps carry
    // almost all of the mass so different endmembers stay visually distinct
    let mut spectrum = vec![0.01; grid.len()];
    for _ in 0..bumps {
        let center = rng.gen_range(grid[0]..=grid[grid.len() - 1]);
        let width = rng.gen_range(span / 20.0..span / 6.0);
        let amp = rng.gen_range(0.3..1.0);
        for (v, &wl) in spectrum.iter_mut().zip(grid) {
            *v += amp * (-((wl - center) * (wl - center)) / (2.0 * width * width)).exp();
        }
    }
    let mass: f64 = spectrum.iter().sum();
    for v in &mut spectrum {
        *v /= mass;
    }
    spectrum
}

/// Generate `k` smooth, L1-normalized spectra on `grid` with pairwise
/// spectral angle at least [`ENDMEMBER_MIN_ANGLE`].
pub fn make_endmembers(
    grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<Endmember>, SynthError> {
    if k == 0 {
        return Err(SynthError::Generation("need at least one endmember".into()));
    }
    if grid.len() < 2 {
        return Err(SynthError::Generation(
            "wavelength grid needs at least two samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Endmember> = Vec::with_capacity(k);
    for i in 0..k {
        let mut accepted = false;
        for _ in 0..200 {
            let spectrum = random_spectrum(grid, &mut rng);
            let separated = members
                .iter()
                .all(|m| spectral_angle(&m.spectrum, &spectrum) >= ENDMEMBER_MIN_ANGLE);
            if separated {
                members.push(Endmember {
                    name: format!("endmember_{}", i),
                    spectrum,
                });
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(SynthError::Generation(format!(
                "could not place endmember {} with pairwise angle >= {}",
                i, ENDMEMBER_MIN_ANGLE
            )));
        }
    }
    Ok(members)
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// Recipe for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_step: f64,
    pub endmembers: Vec<Endmember>,
    pub blob_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn wavelength_grid(&self) -> Vec<f64> {
        let mut grid = Vec::new();
        let mut wl = self.lambda_min;
        while wl <= self.lambda_max + 1e-9 {
            grid.push(wl);
            wl += self.lambda_step;
        }
        grid
    }

    fn validate(&self) -> Result<Vec<f64>, SynthError> {
        if self.height == 0 || self.width == 0 {
            return Err(SynthError::Generation("empty scene".into()));
        }
        if self.blob_count == 0 {
            return Err(SynthError::Generation("blob_count must be at least 1".into()));
        }
        if self.lambda_step <= 0.0 || self.lambda_max <= self.lambda_min {
            return Err(SynthError::Generation("invalid wavelength grid".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::Generation("negative noise sigma".into()));
        }
        let grid = self.wavelength_grid();
        if self.endmembers.is_empty() {
            return Err(SynthError::Generation("no endmembers".into()));
        }
        for m in &self.endmembers {
            if m.spectrum.len() != grid.len() {
                return Err(SynthError::Generation(format!(
                    "endmember {} has {} samples for a {}-channel grid",
                    m.name,
                    m.spectrum.len(),
                    grid.len()
                )));
            }
        }
        Ok(grid)
    }
}

/// Per-pixel endmember abundances of a rendered scene, pixel-major.
#[derive(Debug, Clone)]
pub struct AbundanceMaps {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl AbundanceMaps {
    /// Abundances of the pixel at flat index `p`; they sum to 1.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.count..(p + 1) * self.count]
    }
}

struct Blob {
    endmember: usize,
    cy: f64,
    cx: f64,
    radius: f64,
    amplitude: f64,
}

/// Render a scene: blobby abundance fields define a convex combination of
/// the endmember spectra per pixel, plus Gaussian noise clipped so
/// reflectance stays non-negative.
pub fn render_scene(scene: &SceneSpec) -> Result<(Hypercube, AbundanceMaps), SynthError> {
    let grid = scene.validate()?;
    let k = scene.endmembers.len();
    let (h, w) = (scene.height, scene.width);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);

    let min_dim = h.min(w) as f64;
    let blobs: Vec<Blob> = (0..scene.blob_count)
        .map(|j| Blob {
            endmember: j % k,
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            radius: rng.gen_range(min_dim / 8.0..min_dim / 3.0),
            amplitude: rng.gen_range(0.5..1.5),
        })
        .collect();

    let mut abundances = vec![0.0; h * w * k];
    let mut data = vec![0.0; h * w * grid.len()];
    let mut fields = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            // small positive base keeps the mixture well defined everywhere
            fields.iter_mut().for_each(|f| *f = 0.05);
            for blob in &blobs {
                let dy = y as f64 - blob.cy;
                let dx = x as f64 - blob.cx;
                let r2 = 2.0 * blob.radius * blob.radius;
                fields[blob.endmember] += blob.amplitude * (-(dy * dy + dx * dx) / r2).exp();
            }
            let total: f64 = fields.iter().sum();
            let a = &mut abundances[p * k..(p + 1) * k];
            for (slot, &f) in a.iter_mut().zip(fields.iter()) {
                *slot = f / total;
            }
            let px = &mut data[p * grid.len()..(p + 1) * grid.len()];
            for (e, member) in scene.endmembers.iter().enumerate() {
                let weight = a[e];
                for (v, &s) in px.iter_mut().zip(&member.spectrum) {
                    *v += weight * s;
                }
            }
        }
    }
    if scene.noise_sigma > 0.0 {
        for v in &mut data {
            // Box-Muller
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (*v + scene.noise_sigma * z).max(0.0);
        }
    }
    let cube = Hypercube::new(h, w, grid, data)?;
    Ok((
        cube,
        AbundanceMaps {
            height: h,
            width: w,
            count: k,
            data: abundances,
        },
    ))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SynthError::Dataset(format!("unknown split {:?}", other))),
        }
    }
}

/// One paired RGB input and hyperspectral label.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub rgb: RgbImage,
    pub cube: Hypercube,
}

/// A set of paired images with train/val/test assignments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<DatasetPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn channels(&self) -> usize {
        self.pairs.first().map(|p| p.cube.channels()).unwrap_or(0)
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        self.pairs
            .first()
            .map(|p| p.cube.wavelengths().to_vec())
            .unwrap_or_default()
    }
}

/// Deterministic split sizes from fractions (largest block first, remainder
/// to test).
pub fn split_counts(fractions: (f64, f64, f64), n: usize) -> Result<(usize, usize, usize), SynthError> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(SynthError::Dataset(format!(
            "split fractions must be non-negative and sum to 1, got ({}, {}, {})",
            ft, fv, fe
        )));
    }
    let n_train = ((ft * n as f64) + 1e-9).floor() as usize;
    let n_val = ((fv * n as f64) + 1e-9).floor() as usize;
    if n_train + n_val > n {
        return Err(SynthError::Dataset("split fractions overflow".into()));
    }
    let n_test = n - n_train - n_val;
    if n_train == 0 {
        return Err(SynthError::Dataset("degenerate split: empty train set".into()));
    }
    Ok((n_train, n_val, n_test))
}

/// Render `scene_count` scenes from per-scene seeds derived from the
/// template's seed, pair each with its synthesized RGB image, and split
/// deterministically. All values are quantized to f32 so the dataset
/// round-trips through HSC1 files bit-exactly.
pub fn make_dataset(
    scene_count: usize,
    template: &SceneSpec,
    response: &CameraResponse,
    fractions: (f64, f64, f64),
) -> Result<Dataset, SynthError> {
    if scene_count == 0 {
        return Err(SynthError::Dataset("scene_count must be at least 1".into()));
    }
    let (n_train, n_val, _) = split_counts(fractions, scene_count)?;
    let mut pairs = Vec::with_capacity(scene_count);
    for i in 0..scene_count {
        let seed = splitmix64(
            template
                .seed
                .wrapping_add((i as u64).wrapping_mul(0x9E3779B97F4A7C15)),
        );
        let scene = SceneSpec {
            seed,
            ..template.clone()
        };
        let (cube, _) = render_scene(&scene)?;
        let cube = cube.quantized_to_f32();
        let rgb = cube::synthesize_rgb(&cube, response)?.quantized_to_f32();
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        pairs.push(DatasetPair {
            name: format!("scene_{:04}", i),
            split,
            seed,
            rgb,
            cube,
        });
    }
    Ok(Dataset { pairs })
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

/// RGB image as the cube stored on disk: ascending nominal wavelengths, so
/// the planes are b, g, r.
pub fn rgb_as_storage_cube(rgb: &RgbImage) -> Hypercube {
    let mut data = Vec::with_capacity(rgb.data().len());
    for px in rgb.data().chunks(3) {
        data.push(px[2]);
        data.push(px[1]);
        data.push(px[0]);
    }
    Hypercube::new(
        rgb.height(),
        rgb.width(),
        RGB_NOMINAL_WAVELENGTHS.to_vec(),
        data,
    )
    .expect("rgb planes always form a valid cube")
}

/// Inverse of [`rgb_as_storage_cube`].
pub fn storage_cube_as_rgb(cube: &Hypercube) -> Result<RgbImage, SynthError> {
    if cube.channels() != 3 {
        return Err(SynthError::Dataset(format!(
            "rgb file has {} channels",
            cube.channels()
        )));
    }
    let mut data = Vec::with_capacity(cube.data().len());
    for px in cube.data().chunks(3) {
        data.push(px[2]);
        data.push(px[1]);
        data.push(px[0]);
    }
    Ok(RgbImage::new(cube.height(), cube.width(), data)?)
}

/// Write a dataset directory: one cube and one RGB file per pair, plus a
/// `manifest.csv` with `file,split,seed` rows.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(CubeError::Io)?;
    let mut manifest = String::from("file,split,seed\n");
    for pair in &dataset.pairs {
        cube::save_cube(&pair.cube, &dir.join(format!("{}.cube.hsc1", pair.name)))?;
        cube::save_cube(
            &rgb_as_storage_cube(&pair.rgb),
            &dir.join(format!("{}.rgb.hsc1", pair.name)),
        )?;
        manifest.push_str(&format!(
            "{},{},{}\n",
            pair.name,
            pair.split.as_str(),
            pair.seed
        ));
    }
    fsio::write_atomic(&dir.join("manifest.csv"), manifest.as_bytes()).map_err(CubeError::Io)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        SynthError::Dataset(format!("cannot read {}: {}", manifest_path.display(), e))
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("file,split,seed") => {}
        other => {
            return Err(SynthError::Dataset(format!(
                "bad manifest header {:?}",
                other
            )))
        }
    }
    let mut pairs = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(SynthError::Dataset(format!("bad manifest row {:?}", line)));
        }
        let name = fields[0].to_string();
        let split = Split::from_str(fields[1])?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|e| SynthError::Dataset(format!("bad seed in {:?}: {}", line, e)))?;
        let cube = cube::load_cube(&dir.join(format!("{}.cube.hsc1", name)))?;
        let rgb = storage_cube_as_rgb(&cube::load_cube(&dir.join(format!("{}.rgb.hsc1", name)))?)?;
        if rgb.height() != cube.height() || rgb.width() != cube.width() {
            return Err(SynthError::Dataset(format!(
                "{}: rgb and cube dimensions differ",
                name
            )));
        }
        pairs.push(DatasetPair {
            name,
            split,
            seed,
            rgb,
            cube,
        });
    }
    if pairs.is_empty() {
        return Err(SynthError::Dataset("manifest lists no files".into()));
    }
    let wavelengths = pairs[0].cube.wavelengths().to_vec();
    if pairs
        .iter()
        .any(|p| p.cube.wavelengths() != wavelengths.as_slice())
    {
        return Err(SynthError::Dataset(
            "cubes in the dataset have different wavelength axes".into(),
        ));
    }
    Ok(Dataset { pairs })
}

/// Per-split pair counts, in manifest order of the split labels.
pub fn split_sizes(dataset: &Dataset) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        counts.insert(split.as_str(), dataset.split(split).len());
    }
    counts
}
