//! Restoration metrics and analysis artifacts.
//!
//! Three layers live here:
//!
//! * scalar image metrics — [`psnr`] and [`ssim`] on `[0, 1]` tensors, with
//!   per-image [`EvalRecord`]s and per-method [`MethodScore`] summaries;
//! * rain-embedding analysis — [`collect_rain_embeddings`] runs both
//!   translation passes, turns every intermediate rain layer into a fixed-size
//!   feature vector, and projects the four resulting classes to 2-D with the
//!   exact t-SNE in [`crate::tsne`];
//! * report emission — [`emit_report`] writes the five analysis files
//!   (`metrics.csv`, `table.md`, `grid.png`, `tsne_points.csv`, `tsne.png`)
//!   into an output directory.
//!
//! Both metrics clamp their inputs to `[0, 1]` before comparing, so callers
//! can pass raw network outputs without pre-processing. PSNR is computed over
//! all channels; SSIM first reduces each image to its channel-mean grayscale.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datasets::{PairedDataset, UnpairedDataset};
use crate::error::{Error, Result};
use crate::imaging::{resize_area, save_image, ImageTensor};
use crate::networks::JrgrModel;
use crate::pipeline::{run_bundle, BundleImages, TranslateDirection};
use crate::tsne::{run_tsne, TsneConfig};

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Upper bound on reported PSNR; identical images score exactly this.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Side of the SSIM smoothing window.
pub const SSIM_WINDOW: usize = 11;

/// Standard deviation of the SSIM smoothing window.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_C1: f64 = 1e-4; // (0.01 * L)^2 with L = 1
const SSIM_C2: f64 = 9e-4; // (0.03 * L)^2 with L = 1

fn check_metric_inputs(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    // Finiteness is already an `ImageTensor` construction invariant.
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "metric inputs must share a shape, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels on clamped `[0, 1]` intensities.
///
/// `10 * log10(1 / mse)` over every channel, capped at [`PSNR_CAP_DB`];
/// identical images score the cap exactly. A uniform difference of `0.5`
/// scores `10 * log10(4) ≈ 6.0206` dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_metric_inputs(a, b)?;
    let mut sum = 0.0f64;
    for (&av, &bv) in a.data().iter().zip(b.data()) {
        let d = f64::from(av.clamp(0.0, 1.0)) - f64::from(bv.clamp(0.0, 1.0));
        sum += d * d;
    }
    let mse = sum / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 11-tap Gaussian window.
fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let denom = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *v = (-d * d / denom).exp();
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Channel-mean grayscale of the clamped image as an `f64` matrix.
fn gray_map(img: &ImageTensor) -> Array2<f64> {
    let g = img.clamped01().to_gray();
    let (_, h, w) = g.shape();
    Array2::from_shape_fn((h, w), |(y, x)| f64::from(g.data()[[0, y, x]]))
}

/// Valid (no padding) separable convolution with the SSIM window.
fn smooth_valid(src: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = src.dim();
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity on the channel-mean grayscale of both images.
///
/// Local statistics use an 11x11 Gaussian window (`sigma = 1.5`) over valid
/// positions only, with stability constants for a unit dynamic range. Images
/// smaller than the window are a size error. An image compared against
/// itself scores exactly `1.0`, and the metric is symmetric in its arguments.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_metric_inputs(a, b)?;
    let (_, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let ga = gray_map(a);
    let gb = gray_map(b);
    let k = ssim_window();
    let mu_a = smooth_valid(&ga, &k);
    let mu_b = smooth_valid(&gb, &k);
    let s_aa = smooth_valid(&(&ga * &ga), &k);
    let s_bb = smooth_valid(&(&gb * &gb), &k);
    let s_ab = smooth_valid(&(&ga * &gb), &k);

    let mut total = 0.0f64;
    for ((((&ma, &mb), &aa), &bb), &ab) in mu_a
        .iter()
        .zip(&mu_b)
        .zip(&s_aa)
        .zip(&s_bb)
        .zip(&s_ab)
    {
        let var_a = aa - ma * ma;
        let var_b = bb - mb * mb;
        let cov = ab - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Records and summaries
// ---------------------------------------------------------------------------

/// Metrics of one restored image against its clean reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Scores both metrics for one (restored, reference) pair.
pub fn evaluate_pair(
    id: impl Into<String>,
    restored: &ImageTensor,
    reference: &ImageTensor,
) -> Result<EvalRecord> {
    Ok(EvalRecord {
        id: id.into(),
        psnr_db: psnr(restored, reference)?,
        ssim: ssim(restored, reference)?,
    })
}

/// Mean metrics of one method over an evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Averages per-image records into one row of the summary table.
pub fn summarize(method: impl Into<String>, records: &[EvalRecord]) -> Result<MethodScore> {
    if records.is_empty() {
        return Err(Error::Data(
            "cannot summarize an empty set of evaluation records".into(),
        ));
    }
    let n = records.len() as f64;
    Ok(MethodScore {
        method: method.into(),
        psnr_db: records.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}

// ---------------------------------------------------------------------------
// Rain embeddings
// ---------------------------------------------------------------------------

/// Upper bound on `n_per_class`, keeping the exact t-SNE within its point cap.
pub const MAX_EMBED_PER_CLASS: usize = 500;

/// Rain layers are downsampled to this square side before flattening.
const EMBED_SIDE: usize = 32;

/// Fixed projection seed so repeated analyses of one model line up.
const EMBED_TSNE_SEED: u64 = 0x4a52_4752;

/// Provenance of one rain layer in the embedding scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RainClass {
    /// Rain extracted from a synthetic rainy input.
    DecomposedSynthetic,
    /// Rain translated into the synthetic style from real inputs.
    GeneratedSynthetic,
    /// Rain extracted from a real rainy input.
    DecomposedReal,
    /// Rain translated into the real style from synthetic inputs.
    GeneratedReal,
}

impl RainClass {
    pub const ALL: [RainClass; 4] = [
        RainClass::DecomposedSynthetic,
        RainClass::GeneratedSynthetic,
        RainClass::DecomposedReal,
        RainClass::GeneratedReal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RainClass::DecomposedSynthetic => "decomposed_synthetic",
            RainClass::GeneratedSynthetic => "generated_synthetic",
            RainClass::DecomposedReal => "decomposed_real",
            RainClass::GeneratedReal => "generated_real",
        }
    }
}

/// 2-D embedding of rain-layer features, one labeled row per layer.
#[derive(Debug, Clone)]
pub struct RainEmbeddings {
    /// `(4 * n_per_class, 2)` scatter coordinates, class-major in
    /// [`RainClass::ALL`] order.
    pub points: Array2<f64>,
    /// Class of each row of `points`.
    pub classes: Vec<RainClass>,
    pub n_per_class: usize,
}

impl RainEmbeddings {
    /// Mean embedding point of each class, in [`RainClass::ALL`] order.
    pub fn class_centroids(&self) -> [[f64; 2]; 4] {
        let mut sums = [[0.0f64; 2]; 4];
        let mut counts = [0usize; 4];
        for (row, &class) in self.classes.iter().enumerate() {
            let slot = RainClass::ALL
                .iter()
                .position(|&c| c == class)
                .expect("class list is exhaustive");
            sums[slot][0] += self.points[[row, 0]];
            sums[slot][1] += self.points[[row, 1]];
            counts[slot] += 1;
        }
        for (sum, &count) in sums.iter_mut().zip(&counts) {
            let n = count.max(1) as f64;
            sum[0] /= n;
            sum[1] /= n;
        }
        sums
    }

    /// Euclidean distance between two class centroids.
    pub fn centroid_distance(&self, a: RainClass, b: RainClass) -> f64 {
        let centroids = self.class_centroids();
        let ia = RainClass::ALL.iter().position(|&c| c == a).expect("variant");
        let ib = RainClass::ALL.iter().position(|&c| c == b).expect("variant");
        let dx = centroids[ia][0] - centroids[ib][0];
        let dy = centroids[ia][1] - centroids[ib][1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Full 4x4 centroid distance table in [`RainClass::ALL`] order.
    pub fn centroid_distance_table(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (i, &a) in RainClass::ALL.iter().enumerate() {
            for (j, &b) in RainClass::ALL.iter().enumerate() {
                out[i][j] = self.centroid_distance(a, b);
            }
        }
        out
    }
}

/// Center-crops `img` so both spatial sides are multiples of `stride`.
pub(crate) fn center_aligned(img: &ImageTensor, stride: usize) -> Result<ImageTensor> {
    let (_, h, w) = img.shape();
    let ah = h - h % stride;
    let aw = w - w % stride;
    if ah == 0 || aw == 0 {
        return Err(Error::Size(format!(
            "image of {h}x{w} pixels is smaller than the network stride {stride}"
        )));
    }
    if ah == h && aw == w {
        return Ok(img.clone());
    }
    let oy = (h - ah) / 2;
    let ox = (w - aw) / 2;
    ImageTensor::from_array(
        img.data()
            .slice(s![.., oy..oy + ah, ox..ox + aw])
            .to_owned(),
    )
}

/// Grayscale 32x32 thumbnail of a rain layer, flattened to 1024 values.
fn rain_feature(layer: &ImageTensor) -> Result<Vec<f64>> {
    let gray = if layer.channels() == 1 {
        layer.clone()
    } else {
        layer.to_gray()
    };
    let small = resize_area(&gray, EMBED_SIDE, EMBED_SIDE)?;
    Ok(small.data().iter().map(|&v| f64::from(v)).collect())
}

/// Embeds rain layers from both translation passes into 2-D.
///
/// The first `n_per_class` paired (synthetic) and unpaired (real) rainy
/// images are run through the synthetic-to-real and real-to-synthetic passes
/// respectively. Four rain populations are collected — extracted synthetic
/// rain, translated-to-synthetic rain, extracted real rain, and
/// translated-to-real rain — each downsampled to a 32x32 grayscale thumbnail,
/// flattened, standardized per feature dimension, and embedded with the exact
/// t-SNE under a fixed seed, so repeated calls on one model reproduce the
/// same coordinates. Images whose sides are not multiples of the network
/// stride are center-cropped first.
///
/// Fails with a validation error when `n_per_class` is zero or above
/// [`MAX_EMBED_PER_CLASS`], and with a data error when either split holds
/// fewer than `n_per_class` images.
pub fn collect_rain_embeddings(
    model: &JrgrModel<f32>,
    paired: &PairedDataset,
    unpaired: &UnpairedDataset,
    n_per_class: usize,
) -> Result<RainEmbeddings> {
    if n_per_class == 0 || n_per_class > MAX_EMBED_PER_CLASS {
        return Err(Error::Validation(format!(
            "n_per_class must be in 1..={MAX_EMBED_PER_CLASS}, got {n_per_class}"
        )));
    }
    if paired.len() < n_per_class {
        return Err(Error::Data(format!(
            "embedding needs {n_per_class} paired images, dataset holds {}",
            paired.len()
        )));
    }
    if unpaired.len() < n_per_class {
        return Err(Error::Data(format!(
            "embedding needs {n_per_class} unpaired images, dataset holds {}",
            unpaired.len()
        )));
    }

    let stride = model.config.stride_multiple();
    let syn_in: Vec<ImageTensor> = paired.samples()[..n_per_class]
        .iter()
        .map(|s| center_aligned(&s.rainy, stride))
        .collect::<Result<_>>()?;
    let real_in: Vec<ImageTensor> = unpaired.samples()[..n_per_class]
        .iter()
        .map(|s| center_aligned(&s.rainy, stride))
        .collect::<Result<_>>()?;

    let s2r = run_bundle(model, TranslateDirection::S2R, &syn_in)?;
    let r2s = run_bundle(model, TranslateDirection::R2S, &real_in)?;

    // Class-major feature rows in `RainClass::ALL` order.
    let populations: [(&[ImageTensor], RainClass); 4] = [
        (&s2r.r1, RainClass::DecomposedSynthetic),
        (&r2s.r2, RainClass::GeneratedSynthetic),
        (&r2s.r1, RainClass::DecomposedReal),
        (&s2r.r2, RainClass::GeneratedReal),
    ];
    let dim = EMBED_SIDE * EMBED_SIDE;
    let rows = 4 * n_per_class;
    let mut features = Array2::<f64>::zeros((rows, dim));
    let mut classes = Vec::with_capacity(rows);
    let mut row = 0usize;
    for (layers, class) in populations {
        for layer in layers {
            let feat = rain_feature(layer)?;
            for (col, v) in feat.into_iter().enumerate() {
                features[[row, col]] = v;
            }
            classes.push(class);
            row += 1;
        }
    }

    // Standardize each feature dimension so no single pixel dominates.
    for mut col in features.columns_mut() {
        let mean = col.sum() / rows as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
        let std = var.sqrt().max(1e-8);
        col.mapv_inplace(|v| (v - mean) / std);
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(
            "rain features contain non-finite values".into(),
        ));
    }

    let cfg = TsneConfig {
        seed: EMBED_TSNE_SEED,
        ..TsneConfig::default()
    };
    let points = run_tsne(&features, &cfg)?;
    Ok(RainEmbeddings {
        points,
        classes,
        n_per_class,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// Columns of the showcase grid (five stages per translation half).
pub const GRID_COLS: usize = 2;

/// Rows of the showcase grid.
pub const GRID_ROWS: usize = 5;

/// Square side of the rendered embedding scatter in pixels.
pub const TSNE_PLOT_SIZE: usize = 512;

/// Everything one analysis report is built from.
#[derive(Debug)]
pub struct ReportInputs<'a> {
    /// Per-image metrics; at least one row is required.
    pub records: &'a [EvalRecord],
    /// Per-method means for the summary table; at least one row is required.
    pub methods: &'a [MethodScore],
    /// Showcase translation pass; the first image of every stage is shown.
    pub bundle: &'a BundleImages,
    /// Clean reference for the showcase image, when one exists.
    pub ground_truth: Option<&'a ImageTensor>,
    /// Rain-layer embedding scatter.
    pub embeddings: &'a RainEmbeddings,
}

/// Locations of the five files a report writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub metrics_csv: PathBuf,
    pub table_md: PathBuf,
    pub grid_png: PathBuf,
    pub tsne_points_csv: PathBuf,
    pub tsne_png: PathBuf,
}

fn csv_format_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes a metrics CSV with columns `id,psnr_db,ssim`, one row per record.
pub fn write_metrics_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "psnr_db", "ssim"])
        .map_err(|e| csv_format_err(path, e))?;
    for r in records {
        w.write_record([r.id.as_str(), &r.psnr_db.to_string(), &r.ssim.to_string()])
            .map_err(|e| csv_format_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the per-method summary as a small Markdown table.
fn write_table_md(path: &Path, methods: &[MethodScore]) -> Result<()> {
    let mut text = String::from("| Method | PSNR (dB) | SSIM |\n| --- | --- | --- |\n");
    for m in methods {
        text.push_str(&format!(
            "| {} | {:.2} | {:.4} |\n",
            m.method, m.psnr_db, m.ssim
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Clamped three-channel version of a panel image.
fn as_rgb_panel(img: &ImageTensor) -> Result<ImageTensor> {
    let clamped = img.clamped01();
    match clamped.channels() {
        3 => Ok(clamped),
        1 => clamped.broadcast_channels(3),
        c => Err(Error::Dimension(format!(
            "grid panels must have 1 or 3 channels, got {c}"
        ))),
    }
}

fn first_panel<'a>(stage: &'a [ImageTensor], name: &str) -> Result<&'a ImageTensor> {
    stage.first().ok_or_else(|| {
        Error::Validation(format!("showcase bundle holds no {name} image"))
    })
}

/// Renders the ten showcase panels into one image.
///
/// Column one walks the forward half (input, background, extracted rain,
/// translated rain, generated image); column two walks the return half
/// (second background, its rain, back-translated rain, reconstruction) and
/// ends with the clean reference — or a neutral gray placeholder when no
/// reference exists.
fn render_grid(bundle: &BundleImages, ground_truth: Option<&ImageTensor>) -> Result<ImageTensor> {
    let o_in = first_panel(&bundle.o_in, "input")?;
    let (_, h, w) = o_in.shape();
    let gray = ImageTensor::from_array(Array3::from_elem((3, h, w), 0.5f32))?;
    let reference = match ground_truth {
        Some(gt) => as_rgb_panel(gt)?,
        None => gray,
    };
    let panels = [
        as_rgb_panel(o_in)?,
        as_rgb_panel(first_panel(&bundle.b1, "first background")?)?,
        as_rgb_panel(first_panel(&bundle.r1, "extracted rain")?)?,
        as_rgb_panel(first_panel(&bundle.r2, "translated rain")?)?,
        as_rgb_panel(first_panel(&bundle.o_gen, "generated image")?)?,
        as_rgb_panel(first_panel(&bundle.b2, "second background")?)?,
        as_rgb_panel(first_panel(&bundle.r3, "re-extracted rain")?)?,
        as_rgb_panel(first_panel(&bundle.r4, "back-translated rain")?)?,
        as_rgb_panel(first_panel(&bundle.o_rec, "reconstruction")?)?,
        reference,
    ];
    for p in &panels {
        let (_, ph, pw) = p.shape();
        if (ph, pw) != (h, w) {
            return Err(Error::Dimension(format!(
                "grid panels must share the input size {h}x{w}, got {ph}x{pw}"
            )));
        }
    }
    let mut canvas = Array3::<f32>::zeros((3, GRID_ROWS * h, GRID_COLS * w));
    for (i, p) in panels.iter().enumerate() {
        let (row, col) = (i % GRID_ROWS, i / GRID_ROWS);
        let (y0, x0) = (row * h, col * w);
        canvas
            .slice_mut(s![.., y0..y0 + h, x0..x0 + w])
            .assign(p.data());
    }
    ImageTensor::from_array(canvas)
}

/// Scatter color of each rain class (warm synthetic, cool real).
fn class_color(class: RainClass) -> [f32; 3] {
    match class {
        RainClass::DecomposedSynthetic => [0.85, 0.20, 0.20],
        RainClass::GeneratedSynthetic => [0.95, 0.60, 0.10],
        RainClass::DecomposedReal => [0.15, 0.35, 0.85],
        RainClass::GeneratedReal => [0.10, 0.70, 0.90],
    }
}

/// Renders the embedding scatter on a white square canvas.
fn render_tsne(embeddings: &RainEmbeddings) -> Result<ImageTensor> {
    let size = TSNE_PLOT_SIZE;
    let margin = 16usize;
    let usable = (size - 2 * margin - 1) as f64;
    let mut canvas = Array3::<f32>::from_elem((3, size, size), 1.0);

    let xs = embeddings.points.column(0);
    let ys = embeddings.points.column(1);
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in xs.iter().zip(&ys) {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let span = (x_max - x_min).max(y_max - y_min).max(1e-12);
    let scale = usable / span;
    let x_pad = (usable - (x_max - x_min) * scale) / 2.0;
    let y_pad = (usable - (y_max - y_min) * scale) / 2.0;

    for (row, &class) in embeddings.classes.iter().enumerate() {
        let color = class_color(class);
        let px = margin as f64 + x_pad + (embeddings.points[[row, 0]] - x_min) * scale;
        // Flip vertically so larger y plots higher.
        let py = (size - 1 - margin) as f64 - y_pad - (embeddings.points[[row, 1]] - y_min) * scale;
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                    continue;
                }
                for (ch, &v) in color.iter().enumerate() {
                    canvas[[ch, y as usize, x as usize]] = v;
                }
            }
        }
    }
    ImageTensor::from_array(canvas)
}

/// Writes `tsne_points.csv` with columns `x,y,class`, one row per layer.
fn write_tsne_csv(path: &Path, embeddings: &RainEmbeddings) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["x", "y", "class"])
        .map_err(|e| csv_format_err(path, e))?;
    for (row, &class) in embeddings.classes.iter().enumerate() {
        w.write_record([
            embeddings.points[[row, 0]].to_string().as_str(),
            embeddings.points[[row, 1]].to_string().as_str(),
            class.label(),
        ])
        .map_err(|e| csv_format_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the five analysis files into `out_dir`, creating it if needed.
///
/// * `metrics.csv` — per-image rows with columns `id,psnr_db,ssim`;
/// * `table.md` — Markdown summary table, one row per method;
/// * `grid.png` — ten showcase panels in two five-row columns, sized exactly
///   `(2 * width) x (5 * height)` of the showcase input;
/// * `tsne_points.csv` — embedding rows with columns `x,y,class`, exactly
///   `4 * n_per_class` of them;
/// * `tsne.png` — the same embedding rendered as a colored scatter.
///
/// Text outputs are newline-terminated UTF-8. Requires at least one record
/// and one method row; an unwritable directory is an I/O error.
pub fn emit_report(inputs: &ReportInputs, out_dir: impl AsRef<Path>) -> Result<ReportPaths> {
    let out_dir = out_dir.as_ref();
    if inputs.records.is_empty() {
        return Err(Error::Validation(
            "report needs at least one evaluated image".into(),
        ));
    }
    if inputs.methods.is_empty() {
        return Err(Error::Validation(
            "report needs at least one summarized method".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let paths = ReportPaths {
        metrics_csv: out_dir.join("metrics.csv"),
        table_md: out_dir.join("table.md"),
        grid_png: out_dir.join("grid.png"),
        tsne_points_csv: out_dir.join("tsne_points.csv"),
        tsne_png: out_dir.join("tsne.png"),
    };
    write_metrics_csv(&paths.metrics_csv, inputs.records)?;
    write_table_md(&paths.table_md, inputs.methods)?;
    save_image(&render_grid(inputs.bundle, inputs.ground_truth)?, &paths.grid_png)?;
    write_tsne_csv(&paths.tsne_points_csv, inputs.embeddings)?;
    save_image(&render_tsne(inputs.embeddings)?, &paths.tsne_png)?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::load_dataset;
    use crate::imaging::load_image;
    use crate::networks::ModelConfig;
    use crate::pipeline::Domain;
    use crate::rainsynth::{build_toy_datasets, RainDomainSpec, SceneSpec, TextureKind};
    use crate::seed::SeedTree;
    use ndarray::Array3;
    use rand::Rng;

    fn filled(c: usize, h: usize, w: usize, v: f32) -> ImageTensor {
        ImageTensor::from_array(Array3::from_elem((c, h, w), v)).unwrap()
    }

    fn random_image(c: usize, h: usize, w: usize, label: &str) -> ImageTensor {
        let mut rng = SeedTree::new(416).rng(label);
        ImageTensor::from_array(Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>()))
            .unwrap()
    }

    // -- direct reference implementations (independent slow path) ----------

    fn naive_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (&av, &bv) in a.data().iter().zip(b.data()) {
            let d = f64::from(av.clamp(0.0, 1.0)) - f64::from(bv.clamp(0.0, 1.0));
            sum += d * d;
            count += 1;
        }
        let mse = sum / count as f64;
        if mse == 0.0 {
            100.0
        } else {
            (10.0 * (1.0 / mse).log10()).min(100.0)
        }
    }

    /// Direct windowed SSIM: explicit loops, a full 2-D kernel, and the
    /// (x - mu)^2 variance form — a different floating-point path from the
    /// separable production code. The grayscale reduction mirrors the
    /// production single-precision channel mean so both paths score the same
    /// intensities.
    fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let gray = |img: &ImageTensor| -> Vec<Vec<f64>> {
            let (c, h, w) = img.shape();
            let mut out = vec![vec![0.0f64; w]; h];
            for (y, row) in out.iter_mut().enumerate() {
                for (x, px) in row.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for ch in 0..c {
                        acc += img.data()[[ch, y, x]].clamp(0.0, 1.0);
                    }
                    *px = f64::from(acc / c as f32);
                }
            }
            out
        };
        let ga = gray(a);
        let gb = gray(b);
        let h = ga.len();
        let w = ga[0].len();
        let mut kernel = [[0.0f64; 11]; 11];
        let mut ksum = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, kv) in row.iter_mut().enumerate() {
                let dy = i as f64 - 5.0;
                let dx = j as f64 - 5.0;
                *kv = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                ksum += *kv;
            }
        }
        for row in kernel.iter_mut() {
            for kv in row.iter_mut() {
                *kv /= ksum;
            }
        }
        let c1 = 1e-4;
        let c2 = 9e-4;
        let mut total = 0.0;
        let mut windows = 0usize;
        for cy in 0..h - 10 {
            for cx in 0..w - 10 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for (i, row) in kernel.iter().enumerate() {
                    for (j, &kv) in row.iter().enumerate() {
                        mu_a += kv * ga[cy + i][cx + j];
                        mu_b += kv * gb[cy + i][cx + j];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for (i, row) in kernel.iter().enumerate() {
                    for (j, &kv) in row.iter().enumerate() {
                        let da = ga[cy + i][cx + j] - mu_a;
                        let db = gb[cy + i][cx + j] - mu_b;
                        var_a += kv * da * da;
                        var_b += kv * db * db;
                        cov += kv * da * db;
                    }
                }
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                windows += 1;
            }
        }
        total / windows as f64
    }

    // -- scalar metrics -----------------------------------------------------

    #[test]
    fn psnr_matches_uniform_difference_closed_forms() {
        let a = filled(3, 16, 16, 0.0);
        let b = filled(3, 16, 16, 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);

        let c = filled(3, 16, 16, 0.5);
        let p = psnr(&a, &c).unwrap();
        assert!((p - 10.0 * 4.0f64.log10()).abs() < 1e-9);
        assert!((p - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_caps_at_one_hundred_decibels() {
        let a = random_image(3, 16, 16, "cap");
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        let nudged =
            ImageTensor::from_array(a.data().mapv(|v| (v * 0.999999).clamp(0.0, 1.0))).unwrap();
        assert_eq!(psnr(&a, &nudged).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_clamps_inputs_to_the_unit_range() {
        let a = filled(3, 16, 16, 0.5);
        let hot = filled(3, 16, 16, 3.0); // clamps to 1.0, a uniform 0.5 gap
        let p = psnr(&a, &hot).unwrap();
        assert!((p - 10.0 * 4.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_are_dimension_errors() {
        let a = filled(3, 16, 16, 0.2);
        let b = filled(3, 16, 20, 0.2);
        assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_is_exactly_one_for_identical_images() {
        let a = random_image(3, 24, 24, "self-similarity");
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_the_constant_pair_closed_form() {
        let a = filled(1, 16, 16, 0.2);
        let b = filled(1, 16, 16, 0.6);
        let ma = f64::from(0.2f32);
        let mb = f64::from(0.6f32);
        let expected = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = filled(1, 10, 16, 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::Size(_))));
        let b = filled(1, 11, 11, 0.5);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn metrics_match_a_direct_reference_implementation() {
        // Binary checkerboard against its inverse: structurally anti-similar.
        let checker = ImageTensor::from_array(Array3::from_shape_fn(
            (1, 16, 16),
            |(_, y, x)| ((y + x) % 2) as f32,
        ))
        .unwrap();
        let inverse = ImageTensor::from_array(checker.data().mapv(|v| 1.0 - v)).unwrap();
        let fast = ssim(&checker, &inverse).unwrap();
        assert!((fast - naive_ssim(&checker, &inverse)).abs() < 1e-9);
        assert!(fast < 0.5);

        // Random pairs cross-validate both metrics and their symmetry.
        for trial in 0..20 {
            let a = random_image(3, 24, 24, &format!("ref-a-{trial}"));
            let b = random_image(3, 24, 24, &format!("ref-b-{trial}"));
            let p = psnr(&a, &b).unwrap();
            let s = ssim(&a, &b).unwrap();
            assert!((p - naive_psnr(&a, &b)).abs() < 1e-9);
            assert!((s - naive_ssim(&a, &b)).abs() < 1e-9);
            assert_eq!(p, psnr(&b, &a).unwrap());
            assert_eq!(s, ssim(&b, &a).unwrap());
        }
    }

    #[test]
    fn summarize_averages_and_rejects_empty() {
        let records = vec![
            EvalRecord {
                id: "a".into(),
                psnr_db: 20.0,
                ssim: 0.8,
            },
            EvalRecord {
                id: "b".into(),
                psnr_db: 30.0,
                ssim: 0.6,
            },
        ];
        let score = summarize("ours", &records).unwrap();
        assert_eq!(score.method, "ours");
        assert!((score.psnr_db - 25.0).abs() < 1e-12);
        assert!((score.ssim - 0.7).abs() < 1e-12);
        assert!(matches!(summarize("ours", &[]), Err(Error::Data(_))));
    }

    // -- embeddings ----------------------------------------------------------

    fn tiny_model() -> JrgrModel<f32> {
        let config = ModelConfig {
            removal_base_channels: 4,
            removal_depth: 2,
            translator_base_channels: 4,
            translator_depth: 1,
            disc_base_channels: 4,
            ..ModelConfig::default()
        };
        JrgrModel::new(config, &SeedTree::new(9)).unwrap()
    }

    fn toy_splits(dir: &Path) -> (PairedDataset, UnpairedDataset) {
        let scene = SceneSpec {
            size: 32,
            texture_kind: TextureKind::Noise,
            photo_dir: None,
            seed: 5,
        };
        build_toy_datasets(
            &RainDomainSpec::synthetic_preset(),
            &RainDomainSpec::real_preset(),
            &scene,
            (3, 3, 1),
            dir,
        )
        .unwrap();
        load_dataset(crate::datasets::manifest_path_in(dir), 32).unwrap()
    }

    #[test]
    fn rain_embeddings_cover_four_balanced_classes() {
        let dir = tempfile::tempdir().unwrap();
        let (paired, unpaired) = toy_splits(dir.path());
        let model = tiny_model();

        let emb = collect_rain_embeddings(&model, &paired, &unpaired, 2).unwrap();
        assert_eq!(emb.points.dim(), (8, 2));
        assert_eq!(emb.n_per_class, 2);
        let expected: Vec<RainClass> = RainClass::ALL
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, 2))
            .collect();
        assert_eq!(emb.classes, expected);
        assert!(emb.points.iter().all(|v| v.is_finite()));

        // Same model, same data, fixed internal seed: identical coordinates.
        let again = collect_rain_embeddings(&model, &paired, &unpaired, 2).unwrap();
        assert_eq!(emb.points, again.points);

        // Centroid helpers agree with a hand count.
        let centroids = emb.class_centroids();
        let mean_x = (emb.points[[0, 0]] + emb.points[[1, 0]]) / 2.0;
        assert!((centroids[0][0] - mean_x).abs() < 1e-12);
        let table = emb.centroid_distance_table();
        assert_eq!(table[0][0], 0.0);
        assert!((table[0][2] - emb.centroid_distance(
            RainClass::DecomposedSynthetic,
            RainClass::DecomposedReal,
        ))
        .abs()
            < 1e-12);
    }

    #[test]
    fn embedding_requests_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let (paired, unpaired) = toy_splits(dir.path());
        let model = tiny_model();

        assert!(matches!(
            collect_rain_embeddings(&model, &paired, &unpaired, 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            collect_rain_embeddings(&model, &paired, &unpaired, MAX_EMBED_PER_CLASS + 1),
            Err(Error::Validation(_))
        ));
        // Only three images per split exist.
        assert!(matches!(
            collect_rain_embeddings(&model, &paired, &unpaired, 5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn center_alignment_crops_to_the_stride() {
        let img = random_image(3, 34, 37, "align");
        let aligned = center_aligned(&img, 4).unwrap();
        assert_eq!(aligned.shape(), (3, 32, 36));
        // Content comes from the middle of the original.
        assert_eq!(
            aligned.data()[[1, 0, 0]],
            img.data()[[1, 1, 0]],
        );

        let exact = random_image(3, 32, 32, "aligned");
        assert_eq!(center_aligned(&exact, 4).unwrap().data(), exact.data());

        let tiny = random_image(3, 3, 3, "tiny");
        assert!(matches!(center_aligned(&tiny, 4), Err(Error::Size(_))));
    }

    // -- report --------------------------------------------------------------

    fn fake_bundle(h: usize, w: usize) -> BundleImages {
        let img = |v: f32| vec![filled(3, h, w, v)];
        let rain = |v: f32| vec![filled(1, h, w, v)];
        BundleImages {
            origin: Domain::Synthetic,
            o_in: img(0.1),
            b1: img(0.2),
            r1: rain(0.3),
            r2: rain(0.4),
            o_gen: img(0.5),
            b2: img(0.6),
            r3: rain(0.7),
            r4: rain(0.8),
            o_rec: img(0.9),
        }
    }

    fn fake_embeddings(n_per_class: usize) -> RainEmbeddings {
        let rows = 4 * n_per_class;
        let mut rng = SeedTree::new(77).rng("fake-embeddings");
        let points = Array2::from_shape_fn((rows, 2), |_| rng.random::<f64>() * 10.0 - 5.0);
        let classes = RainClass::ALL
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, n_per_class))
            .collect();
        RainEmbeddings {
            points,
            classes,
            n_per_class,
        }
    }

    #[test]
    fn report_writes_the_five_documented_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report");
        let records = vec![
            EvalRecord {
                id: "img-0".into(),
                psnr_db: 24.5,
                ssim: 0.81,
            },
            EvalRecord {
                id: "img-1".into(),
                psnr_db: 26.0,
                ssim: 0.84,
            },
        ];
        let methods = vec![
            summarize("proposed", &records).unwrap(),
            MethodScore {
                method: "rainy-input".into(),
                psnr_db: 18.0,
                ssim: 0.6,
            },
        ];
        let bundle = fake_bundle(8, 12);
        let gt = filled(3, 8, 12, 0.95);
        let embeddings = fake_embeddings(2);
        let inputs = ReportInputs {
            records: &records,
            methods: &methods,
            bundle: &bundle,
            ground_truth: Some(&gt),
            embeddings: &embeddings,
        };

        let paths = emit_report(&inputs, &out).unwrap();
        for p in [
            &paths.metrics_csv,
            &paths.table_md,
            &paths.grid_png,
            &paths.tsne_points_csv,
            &paths.tsne_png,
        ] {
            assert!(p.exists(), "missing {}", p.display());
        }

        // Text artifacts: header + rows, newline-terminated.
        let metrics = fs::read_to_string(&paths.metrics_csv).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert!(metrics.starts_with("id,psnr_db,ssim\n"));
        assert!(metrics.ends_with('\n'));
        let table = fs::read_to_string(&paths.table_md).unwrap();
        assert!(table.contains("| proposed |"));
        assert!(table.contains("| rainy-input | 18.00 | 0.6000 |"));
        assert!(table.ends_with('\n'));
        let points = fs::read_to_string(&paths.tsne_points_csv).unwrap();
        assert_eq!(points.lines().count(), 1 + 8);
        assert!(points.starts_with("x,y,class\n"));
        assert!(points.contains("decomposed_real"));

        // Image artifacts: the documented grid layout and plot size.
        let grid = load_image(&paths.grid_png).unwrap();
        assert_eq!(grid.shape(), (3, GRID_ROWS * 8, GRID_COLS * 12));
        let scatter = load_image(&paths.tsne_png).unwrap();
        assert_eq!(scatter.shape(), (3, TSNE_PLOT_SIZE, TSNE_PLOT_SIZE));

        // The ground-truth panel fills the bottom-right cell.
        assert!((grid.data()[[0, 4 * 8 + 4, 12 + 6]] - 0.95).abs() < 0.01);
    }

    #[test]
    fn report_requires_scores_and_panels() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![EvalRecord {
            id: "img-0".into(),
            psnr_db: 24.5,
            ssim: 0.81,
        }];
        let methods = vec![summarize("proposed", &records).unwrap()];
        let bundle = fake_bundle(8, 8);
        let embeddings = fake_embeddings(1);

        let no_records = ReportInputs {
            records: &[],
            methods: &methods,
            bundle: &bundle,
            ground_truth: None,
            embeddings: &embeddings,
        };
        assert!(matches!(
            emit_report(&no_records, dir.path()),
            Err(Error::Validation(_))
        ));

        let mut empty_bundle = fake_bundle(8, 8);
        empty_bundle.o_in.clear();
        let no_panels = ReportInputs {
            records: &records,
            methods: &methods,
            bundle: &empty_bundle,
            ground_truth: None,
            embeddings: &embeddings,
        };
        assert!(matches!(
            emit_report(&no_panels, dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unwritable_report_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("occupied");
        fs::write(&blocker, b"file, not a directory").unwrap();
        let records = vec![EvalRecord {
            id: "img-0".into(),
            psnr_db: 24.5,
            ssim: 0.81,
        }];
        let methods = vec![summarize("proposed", &records).unwrap()];
        let bundle = fake_bundle(8, 8);
        let embeddings = fake_embeddings(1);
        let inputs = ReportInputs {
            records: &records,
            methods: &methods,
            bundle: &bundle,
            ground_truth: None,
            embeddings: &embeddings,
        };
        assert!(matches!(
            emit_report(&inputs, blocker.join("sub")),
            Err(Error::Io { .. })
        ));
    }
}
