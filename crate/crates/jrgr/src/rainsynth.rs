//! Procedural rain synthesis: two statistically distinct rain styles layered
//! over procedural (or user-supplied) clean backgrounds, plus a dataset
//! builder that writes paired/unpaired/test splits with a JSON manifest.
//!
//! Rain stays strictly additive — a rainy image is exactly `B + R` before
//! quantization — so the decomposition identities hold on generated data.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{compose_rainy, load_image, random_crop, save_image, ImageTensor};
use crate::seed::SeedTree;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

/// Parameters of one rain style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainDomainSpec {
    /// Mean streak angle in degrees from vertical.
    pub angle_mean: f32,
    /// Angle spread in degrees.
    pub angle_std: f32,
    /// Expected streak count per pixel.
    pub density: f32,
    /// Streak length bounds in pixels.
    pub length_range: (f32, f32),
    /// Streak width bounds in pixels.
    pub width_range: (f32, f32),
    /// Additive streak brightness bounds, within [0, 1].
    pub intensity_range: (f32, f32),
    /// Gaussian blur radius applied to the streak field.
    pub blur_sigma: f32,
    /// Amplitude of the additive low-frequency veil, within [0, 1].
    pub veil_strength: f32,
    pub seed: u64,
}

impl Default for RainDomainSpec {
    /// The synthetic preset; configs that tweak a field inherit the rest.
    fn default() -> Self {
        Self::synthetic_preset()
    }
}

impl RainDomainSpec {
    /// Sharp, narrowly distributed rain with no veiling haze.
    pub fn synthetic_preset() -> Self {
        Self {
            angle_mean: 0.0,
            angle_std: 1.0,
            density: 0.004,
            length_range: (8.0, 20.0),
            width_range: (1.0, 2.0),
            intensity_range: (0.06, 0.18),
            blur_sigma: 0.5,
            veil_strength: 0.0,
            seed: 11,
        }
    }

    /// Diverse, blurry, hazy rain; the gap to [`Self::synthetic_preset`] in
    /// angle spread, blur, and veiling is what makes the two styles
    /// separable.
    pub fn real_preset() -> Self {
        Self {
            angle_std: 8.0,
            blur_sigma: 1.5,
            veil_strength: 0.25,
            seed: 22,
            ..Self::synthetic_preset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("intensity_range", self.intensity_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must satisfy 0 <= min <= max, got ({lo}, {hi})"
                )));
            }
        }
        if self.intensity_range.1 > 1.0 {
            return Err(Error::Validation(format!(
                "intensity_range must stay within [0, 1], got ({}, {})",
                self.intensity_range.0, self.intensity_range.1
            )));
        }
        for (name, v) in [
            ("density", self.density),
            ("angle_std", self.angle_std),
            ("blur_sigma", self.blur_sigma),
            ("veil_strength", self.veil_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.angle_mean.is_finite() {
            return Err(Error::Validation("angle_mean must be finite".into()));
        }
        if self.veil_strength > 1.0 {
            return Err(Error::Validation(format!(
                "veil_strength must stay within [0, 1], got {}",
                self.veil_strength
            )));
        }
        Ok(())
    }
}

/// Clean-background texture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Vertical luminance ramp, 0 at the top row to 1 at the bottom row.
    Gradient,
    /// Alternating 0/1 blocks of size 8.
    Checker,
    /// Two-octave bilinear value noise, independent per channel.
    Noise,
    /// Random crops from user-supplied clean photos.
    PhotoFromDirectory,
}

/// Clean-background generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub size: usize,
    pub texture_kind: TextureKind,
    /// Source directory for [`TextureKind::PhotoFromDirectory`].
    #[serde(default)]
    pub photo_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// 64-pixel value-noise scenes, the toy experiment's background source.
    fn default() -> Self {
        Self {
            size: 64,
            texture_kind: TextureKind::Noise,
            photo_dir: None,
            seed: 33,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Validation(format!(
                "scene size must be at least 32, got {}",
                self.size
            )));
        }
        if self.texture_kind == TextureKind::PhotoFromDirectory && self.photo_dir.is_none() {
            return Err(Error::Validation(
                "photo_from_directory texture needs photo_dir".into(),
            ));
        }
        Ok(())
    }
}

/// Checkerboard block side used by [`TextureKind::Checker`].
pub const CHECKER_BLOCK: usize = 8;

// ---------------------------------------------------------------------------
// Rain layer synthesis
// ---------------------------------------------------------------------------

/// Draws the streak count for one image: Poisson with mean
/// `density * size^2`.
pub fn draw_streak_count(density: f32, size: usize, rng: &mut impl Rng) -> usize {
    let lambda = f64::from(density) * (size * size) as f64;
    if lambda <= 0.0 {
        return 0;
    }
    let poisson = Poisson::new(lambda).expect("validated positive mean");
    poisson.sample(rng) as usize
}

/// Renders one anti-aliased rain layer. Single channel, non-negative,
/// deterministic given `rng`.
pub fn synth_rain_layer(
    spec: &RainDomainSpec,
    size: usize,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    spec.validate()?;
    if size < 32 {
        return Err(Error::Validation(format!(
            "rain layer size must be at least 32, got {size}"
        )));
    }
    let mut layer = Array2::<f32>::zeros((size, size));

    let count = draw_streak_count(spec.density, size, rng);
    let angle = Normal::new(spec.angle_mean, spec.angle_std)
        .map_err(|e| Error::Validation(format!("angle distribution: {e}")))?;
    for _ in 0..count {
        let cx = rng.random_range(0.0..size as f32);
        let cy = rng.random_range(0.0..size as f32);
        let theta = angle.sample(rng).to_radians();
        let len = rng.random_range(spec.length_range.0..=spec.length_range.1);
        let width = rng.random_range(spec.width_range.0..=spec.width_range.1);
        let intensity = rng.random_range(spec.intensity_range.0..=spec.intensity_range.1);
        // Angle measured from vertical: 0 degrees falls straight down.
        let (dx, dy) = (theta.sin(), theta.cos());
        let half = len / 2.0;
        let p0 = (cx - dx * half, cy - dy * half);
        let p1 = (cx + dx * half, cy + dy * half);
        render_streak(&mut layer, p0, p1, width, intensity);
    }

    if spec.blur_sigma > 0.0 {
        layer = gaussian_blur(&layer, spec.blur_sigma);
    }

    if spec.veil_strength > 0.0 {
        let grid = Array2::from_shape_fn((4, 4), |_| rng.random::<f32>());
        let veil = bicubic_upsample(&grid, size);
        for (l, &v) in layer.iter_mut().zip(veil.iter()) {
            *l += spec.veil_strength * v.clamp(0.0, 1.0);
        }
    }

    let (h, w) = layer.dim();
    ImageTensor::from_array(
        layer
            .into_shape_with_order((1, h, w))
            .expect("same element count"),
    )
}

/// Adds one capsule-shaped streak with a one-pixel linear anti-aliasing ramp.
fn render_streak(layer: &mut Array2<f32>, p0: (f32, f32), p1: (f32, f32), width: f32, value: f32) {
    let (h, w) = layer.dim();
    let half = width / 2.0;
    let margin = half + 1.0;
    let x_lo = (p0.0.min(p1.0) - margin).floor().max(0.0) as usize;
    let x_hi = (p0.0.max(p1.0) + margin).ceil().min(w as f32 - 1.0) as usize;
    let y_lo = (p0.1.min(p1.1) - margin).floor().max(0.0) as usize;
    let y_hi = (p0.1.max(p1.1) + margin).ceil().min(h as f32 - 1.0) as usize;
    if x_lo > x_hi || y_lo > y_hi {
        return;
    }

    let seg = (p1.0 - p0.0, p1.1 - p0.1);
    let seg_len_sq = seg.0 * seg.0 + seg.1 * seg.1;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let px = (x as f32 + 0.5, y as f32 + 0.5);
            let rel = (px.0 - p0.0, px.1 - p0.1);
            let t = if seg_len_sq > 0.0 {
                ((rel.0 * seg.0 + rel.1 * seg.1) / seg_len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let nearest = (p0.0 + t * seg.0, p0.1 + t * seg.1);
            let dist = ((px.0 - nearest.0).powi(2) + (px.1 - nearest.1).powi(2)).sqrt();
            let coverage = (half + 0.5 - dist).clamp(0.0, 1.0);
            if coverage > 0.0 {
                layer[(y, x)] += value * coverage;
            }
        }
    }
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(src: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        let x = i as f32;
        kernel.push((-0.5 * (x / sigma).powi(2)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (h, w) = src.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut horiz = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + i as isize - radius, w);
                acc += k * src[(y, sx)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + i as isize - radius, h);
                acc += k * horiz[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn catmull_rom(p0: f32, p1: f32, p2: f32, p3: f32, t: f32) -> f32 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * ((2.0 * p1)
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
        + (3.0 * (p1 - p2) + p3 - p0) * t3)
}

/// Bicubic (Catmull-Rom) upsampling of a small grid to `out x out`, with
/// clamped border sampling.
fn bicubic_upsample(grid: &Array2<f32>, out: usize) -> Array2<f32> {
    let (gh, gw) = grid.dim();
    let sample = |gy: isize, gx: isize| -> f32 {
        let y = gy.clamp(0, gh as isize - 1) as usize;
        let x = gx.clamp(0, gw as isize - 1) as usize;
        grid[(y, x)]
    };
    Array2::from_shape_fn((out, out), |(y, x)| {
        let gy = (y as f32 + 0.5) * gh as f32 / out as f32 - 0.5;
        let gx = (x as f32 + 0.5) * gw as f32 / out as f32 - 0.5;
        let iy = gy.floor();
        let ix = gx.floor();
        let ty = gy - iy;
        let tx = gx - ix;
        let (iy, ix) = (iy as isize, ix as isize);
        let mut rows = [0.0f32; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            let yy = iy - 1 + r as isize;
            *row = catmull_rom(
                sample(yy, ix - 1),
                sample(yy, ix),
                sample(yy, ix + 1),
                sample(yy, ix + 2),
                tx,
            );
        }
        catmull_rom(rows[0], rows[1], rows[2], rows[3], ty)
    })
}

// ---------------------------------------------------------------------------
// Backgrounds
// ---------------------------------------------------------------------------

/// Bilinear upsampling of a value-noise grid (clamped border).
fn bilinear_upsample(grid: &Array2<f32>, out: usize) -> Array2<f32> {
    let (gh, gw) = grid.dim();
    let sample = |gy: isize, gx: isize| -> f32 {
        let y = gy.clamp(0, gh as isize - 1) as usize;
        let x = gx.clamp(0, gw as isize - 1) as usize;
        grid[(y, x)]
    };
    Array2::from_shape_fn((out, out), |(y, x)| {
        let gy = (y as f32 + 0.5) * gh as f32 / out as f32 - 0.5;
        let gx = (x as f32 + 0.5) * gw as f32 / out as f32 - 0.5;
        let iy = gy.floor();
        let ix = gx.floor();
        let ty = gy - iy;
        let tx = gx - ix;
        let (iy, ix) = (iy as isize, ix as isize);
        let top = sample(iy, ix) * (1.0 - tx) + sample(iy, ix + 1) * tx;
        let bot = sample(iy + 1, ix) * (1.0 - tx) + sample(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Generates one 3-channel clean background in [0, 1].
pub fn synth_background(spec: &SceneSpec, rng: &mut impl Rng) -> Result<ImageTensor> {
    spec.validate()?;
    let size = spec.size;
    match spec.texture_kind {
        TextureKind::Gradient => {
            let img = Array3::from_shape_fn((3, size, size), |(_, y, _)| {
                y as f32 / (size - 1) as f32
            });
            ImageTensor::from_array(img)
        }
        TextureKind::Checker => {
            let img = Array3::from_shape_fn((3, size, size), |(_, y, x)| {
                (((y / CHECKER_BLOCK) + (x / CHECKER_BLOCK)) % 2) as f32
            });
            ImageTensor::from_array(img)
        }
        TextureKind::Noise => {
            let mut img = Array3::<f32>::zeros((3, size, size));
            for c in 0..3 {
                let coarse = Array2::from_shape_fn((4, 4), |_| rng.random::<f32>());
                let fine = Array2::from_shape_fn((8, 8), |_| rng.random::<f32>());
                let coarse = bilinear_upsample(&coarse, size);
                let fine = bilinear_upsample(&fine, size);
                let mut plane = img.index_axis_mut(ndarray::Axis(0), c);
                for ((p, &a), &b) in plane.iter_mut().zip(coarse.iter()).zip(fine.iter()) {
                    *p = (0.65 * a + 0.35 * b).clamp(0.0, 1.0);
                }
            }
            ImageTensor::from_array(img)
        }
        TextureKind::PhotoFromDirectory => {
            let dir = spec.photo_dir.as_ref().expect("validated");
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir.clone(), e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "no PNG/JPEG images found in {}",
                    dir.display()
                )));
            }
            files.sort();
            let chosen = &files[rng.random_range(0..files.len())];
            let img = load_image(chosen)?;
            if img.height() < size || img.width() < size {
                return Err(Error::Data(format!(
                    "photo {} is {}x{}, smaller than scene size {size}",
                    chosen.display(),
                    img.height(),
                    img.width()
                )));
            }
            let crop = random_crop(&img, size, rng)?;
            if crop.channels() == 3 {
                Ok(crop)
            } else {
                crop.broadcast_channels(3)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset builder
// ---------------------------------------------------------------------------

/// One rainy/clean pair in a manifest (paths relative to the manifest file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub rainy: String,
    pub clean: String,
}

/// One unpaired rainy image; its withheld clean counterpart is kept for
/// evaluation only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedEntry {
    pub id: String,
    pub rainy: String,
    pub clean_heldout: String,
}

/// Listing of every generated file plus the specs and seeds that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub paired: Vec<PairEntry>,
    pub unpaired: Vec<UnpairedEntry>,
    pub test: Vec<PairEntry>,
    pub syn_spec: RainDomainSpec,
    pub real_spec: RainDomainSpec,
    pub scene: SceneSpec,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn write_png(img: &ImageTensor, dir: &Path, rel: &str) -> Result<String> {
    save_image(img, dir.join(rel))?;
    Ok(rel.to_string())
}

/// Generates the three dataset splits under `out_dir` and writes
/// `manifest.json` beside them. Returns the manifest.
///
/// Layout: `paired/{rainy,clean}/NNNN.png`, `unpaired/rainy/NNNN.png` with
/// withheld counterparts under `unpaired/clean_heldout/NNNN.png`, and
/// `test/{rainy,clean}/NNNN.png`.
pub fn build_toy_datasets(
    syn_spec: &RainDomainSpec,
    real_spec: &RainDomainSpec,
    scene: &SceneSpec,
    counts: (usize, usize, usize),
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    syn_spec.validate()?;
    real_spec.validate()?;
    scene.validate()?;
    let (n_paired, n_unpaired, n_test) = counts;
    if n_paired == 0 || n_unpaired == 0 || n_test == 0 {
        return Err(Error::Validation(format!(
            "all split counts must be at least 1, got {counts:?}"
        )));
    }
    let out_dir = out_dir.as_ref();

    let scene_tree = SeedTree::new(scene.seed);
    let syn_tree = SeedTree::new(syn_spec.seed);
    let real_tree = SeedTree::new(real_spec.seed);

    let make = |split: &str,
                rain_spec: &RainDomainSpec,
                rain_tree: &SeedTree,
                index: usize|
     -> Result<(ImageTensor, ImageTensor)> {
        let mut scene_rng = scene_tree.rng_indexed(&format!("scene/{split}"), index as u64);
        let clean = synth_background(scene, &mut scene_rng)?;
        let mut rain_rng = rain_tree.rng_indexed(&format!("rain/{split}"), index as u64);
        let rain = synth_rain_layer(rain_spec, scene.size, &mut rain_rng)?;
        let rainy = compose_rainy(&clean, &rain.broadcast_channels(clean.channels())?)?;
        Ok((rainy, clean))
    };

    let mut paired = Vec::with_capacity(n_paired);
    for i in 0..n_paired {
        let (rainy, clean) = make("paired", syn_spec, &syn_tree, i)?;
        paired.push(PairEntry {
            id: format!("paired-{i:04}"),
            rainy: write_png(&rainy, out_dir, &format!("paired/rainy/{i:04}.png"))?,
            clean: write_png(&clean, out_dir, &format!("paired/clean/{i:04}.png"))?,
        });
    }

    let mut unpaired = Vec::with_capacity(n_unpaired);
    for i in 0..n_unpaired {
        let (rainy, clean) = make("unpaired", real_spec, &real_tree, i)?;
        unpaired.push(UnpairedEntry {
            id: format!("unpaired-{i:04}"),
            rainy: write_png(&rainy, out_dir, &format!("unpaired/rainy/{i:04}.png"))?,
            clean_heldout: write_png(
                &clean,
                out_dir,
                &format!("unpaired/clean_heldout/{i:04}.png"),
            )?,
        });
    }

    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let (rainy, clean) = make("test", real_spec, &real_tree, i)?;
        test.push(PairEntry {
            id: format!("test-{i:04}"),
            rainy: write_png(&rainy, out_dir, &format!("test/rainy/{i:04}.png"))?,
            clean: write_png(&clean, out_dir, &format!("test/clean/{i:04}.png"))?,
        });
    }

    let manifest = DatasetManifest {
        image_size: scene.size,
        paired,
        unpaired,
        test,
        syn_spec: syn_spec.clone(),
        real_spec: real_spec.clone(),
        scene: scene.clone(),
    };
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
