//! Command-line front-end and experiment configuration.
//!
//! The binary has five subcommands — `synth`, `train`, `derain`, `generate`,
//! `analyze` — all driven by one TOML [`ExperimentConfig`] with sections
//! `data`, `model`, `train`, `eval`, and `output`. Every field has a default,
//! so an empty (or absent) config file describes the full toy experiment;
//! unknown keys are rejected rather than silently ignored. Flags override the
//! config file, and the `JRGR_OUT` environment variable overrides the output
//! root (an explicit `--out` flag wins over both).
//!
//! All randomness hangs off explicit seeds in the config; `--seed` rewrites
//! every one of them from a single root value, so one flag reproduces an
//! entire experiment. Exit codes: 0 success, 1 validation, 2 runtime error,
//! 3 non-finite loss abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datasets::{load_dataset, load_test_pairs, manifest_path_in};
use crate::error::{Error, Result};
use crate::eval::{
    center_aligned, collect_rain_embeddings, emit_report, evaluate_pair, summarize,
    write_metrics_csv, EvalRecord, RainClass, ReportInputs, ReportPaths,
};
use crate::imaging::{load_image, save_image, ImageTensor};
use crate::networks::{JrgrModel, ModelConfig};
use crate::pipeline::{derain, run_bundle, TranslateDirection};
use crate::rainsynth::{build_toy_datasets, RainDomainSpec, SceneSpec};
use crate::seed::SeedTree;
use crate::trainer::{
    joint_train, latest_checkpoint, load_checkpoint, pretrain_removal, save_checkpoint,
    MetricsLog, Strategy, TrainConfig, PHASE_DONE, PHASE_JOINT,
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// `[data]` section: where datasets live and how the toy ones are rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; `synth` writes here, `train`/`analyze` read.
    pub dir: PathBuf,
    /// Paired (synthetic-style) training images.
    pub paired: usize,
    /// Unpaired (real-style) training images.
    pub unpaired: usize,
    /// Held-out real-style test pairs.
    pub test: usize,
    pub scene: SceneSpec,
    pub synthetic_rain: RainDomainSpec,
    pub real_rain: RainDomainSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            paired: 200,
            unpaired: 200,
            test: 50,
            scene: SceneSpec::default(),
            synthetic_rain: RainDomainSpec::synthetic_preset(),
            real_rain: RainDomainSpec::real_preset(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data.paired", self.paired),
            ("data.unpaired", self.unpaired),
            ("data.test", self.test),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be at least 1")));
            }
        }
        self.scene.validate()?;
        self.synthetic_rain.validate()?;
        self.real_rain.validate()
    }
}

/// `[eval]` section: analysis options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rain layers embedded per class by `analyze`.
    pub n_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_class: 200 }
    }
}

/// `[output]` section: where artifacts are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// The complete experiment description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are a validation error.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("invalid config: {e}")))
    }

    /// Reads and parses a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every section before any command takes effect.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.n_per_class == 0 || self.eval.n_per_class > crate::eval::MAX_EMBED_PER_CLASS {
            return Err(Error::Validation(format!(
                "eval.n_per_class must be in 1..={}, got {}",
                crate::eval::MAX_EMBED_PER_CLASS,
                self.eval.n_per_class
            )));
        }
        Ok(())
    }

    /// Rewrites every seed field from one root value, leaving everything
    /// else untouched, so a single flag reproduces the whole experiment.
    pub fn apply_root_seed(&mut self, root: u64) {
        use rand::Rng;
        let tree = SeedTree::new(root);
        self.data.scene.seed = tree.rng("seed/scene").random();
        self.data.synthetic_rain.seed = tree.rng("seed/synthetic_rain").random();
        self.data.real_rain.seed = tree.rng("seed/real_rain").random();
        self.train.seed = tree.rng("seed/train").random();
    }

    fn manifest_path(&self) -> PathBuf {
        manifest_path_in(&self.data.dir)
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Translation direction argument for `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    /// Synthetic input, real-style output.
    S2r,
    /// Real input, synthetic-style output.
    R2s,
}

impl DirectionArg {
    fn translate(self) -> TranslateDirection {
        match self {
            DirectionArg::S2r => TranslateDirection::S2R,
            DirectionArg::R2s => TranslateDirection::R2S,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            DirectionArg::S2r => "s2r",
            DirectionArg::R2s => "r2s",
        }
    }
}

/// Rain-cycle training and analysis workbench.
#[derive(Debug, Parser)]
#[command(name = "jrgr", version, about)]
pub struct Cli {
    /// TOML experiment config; omitted sections fall back to defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root seed; rewrites every seed in the config deterministically.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output root; overrides the config file and JRGR_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured toy datasets and print the manifest path.
    Synth {
        /// Write the dataset here instead of the configured data dir.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Run the configured training schedule end to end.
    Train {
        /// Override the training strategy (init-1, init-2, proposed).
        #[arg(long, value_name = "NAME")]
        strategy: Option<Strategy>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Disable a loss group (adv, cyc, mse); repeatable.
        #[arg(long = "disable-loss", value_name = "TERM")]
        disable_loss: Vec<String>,
    },
    /// Restore every image in a directory with the trained removal network.
    Derain {
        /// Checkpoint manifest to load.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Directory of rainy images; a `clean/` subdirectory with matching
        /// filenames enables metrics.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output directory (default: `<out>/derained`).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Translate rainy images across domains and emit their panels.
    Generate {
        /// Checkpoint manifest to load.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Directory of source rainy images.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Translation direction.
        #[arg(long, value_enum)]
        direction: DirectionArg,
        /// Output directory (default: `<out>/generated`).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Score the test split and emit the full analysis report.
    Analyze {
        /// Checkpoint manifest to load.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Rain layers embedded per class (default: config `eval.n_per_class`).
        #[arg(long, value_name = "N")]
        n_per_class: Option<usize>,
        /// Output directory (default: `<out>/report`).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

/// Builds the toy datasets and returns the manifest path.
pub fn cmd_synth(config: &ExperimentConfig, data_dir: Option<&Path>) -> Result<PathBuf> {
    let dir = data_dir.unwrap_or(&config.data.dir);
    build_toy_datasets(
        &config.data.synthetic_rain,
        &config.data.real_rain,
        &config.data.scene,
        (config.data.paired, config.data.unpaired, config.data.test),
        dir,
    )?;
    Ok(manifest_path_in(dir))
}

/// Applies subcommand-level training overrides onto the config.
fn apply_train_overrides(
    cfg: &mut TrainConfig,
    strategy: Option<Strategy>,
    disable_loss: &[String],
) -> Result<()> {
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    for term in disable_loss {
        cfg.ablation.disable(term)?;
    }
    cfg.validate()
}

/// Returns the configuration under which a checkpoint may be resumed: every
/// stream-affecting field must match; only a longer joint schedule may
/// differ.
fn check_resume_compat(current: &TrainConfig, saved: &TrainConfig) -> Result<()> {
    let mut saved_adjusted = saved.clone();
    saved_adjusted.joint_epochs = current.joint_epochs;
    if &saved_adjusted != current {
        return Err(Error::Validation(
            "cannot resume: the training configuration differs from the checkpoint's \
             (only joint_epochs may change between runs)"
                .into(),
        ));
    }
    Ok(())
}

/// Runs the configured schedule and returns the final checkpoint manifest.
///
/// Checkpoints land in `<out>/checkpoints` — one after pretraining, one every
/// ten joint epochs, and a final one tagged as completed — and every
/// iteration appends a row to `<out>/metrics.csv`. With `resume`, training
/// continues from the latest checkpoint (replaying its metrics history into
/// a fresh CSV), which also extends a completed run whose `joint_epochs`
/// grew.
pub fn cmd_train(
    config: &ExperimentConfig,
    strategy: Option<Strategy>,
    resume: bool,
    disable_loss: &[String],
) -> Result<PathBuf> {
    let mut train_cfg = config.train.clone();
    apply_train_overrides(&mut train_cfg, strategy, disable_loss)?;

    let out = &config.output.dir;
    let ckpt_dir = out.join("checkpoints");
    let metrics_path = out.join("metrics.csv");
    let manifest = config.manifest_path();
    let (paired, unpaired) = load_dataset(&manifest, train_cfg.crop)?;

    // Fresh start, or pick up the latest checkpoint.
    let mut start_iteration = 0u64;
    let mut pretrained = false;
    let mut old_rows = Vec::new();
    let mut model = match latest_checkpoint(&ckpt_dir)? {
        Some(path) if resume => {
            let (model, meta) = load_checkpoint(&path)?;
            if meta.model_config != config.model {
                return Err(Error::Validation(
                    "cannot resume: the model configuration differs from the checkpoint's".into(),
                ));
            }
            check_resume_compat(&train_cfg, &meta.train_config)?;
            start_iteration = meta.iteration;
            pretrained = true; // boundary checkpoints are written after pretraining
            if metrics_path.exists() {
                old_rows = MetricsLog::load(&metrics_path)?;
            }
            model
        }
        _ => JrgrModel::new(config.model.clone(), &SeedTree::new(train_cfg.seed))?,
    };

    let mut log = MetricsLog::to_file(&metrics_path)?;
    for row in old_rows {
        // Keep completed history: pretraining plus joint rows at or before
        // the resume point.
        if row.phase != PHASE_JOINT || row.iteration <= start_iteration {
            log.push(row)?;
        }
    }

    if !pretrained {
        pretrain_removal(&mut model, &paired, &train_cfg, &mut log)?;
        save_checkpoint(&model, &train_cfg, 0, PHASE_JOINT, &ckpt_dir)?;
    }
    let total = joint_train(
        &mut model,
        &paired,
        &unpaired,
        &train_cfg,
        &mut log,
        start_iteration,
        |m, epoch, iteration| {
            if epoch % 10 == 0 {
                save_checkpoint(m, &train_cfg, iteration, PHASE_JOINT, &ckpt_dir)?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&model, &train_cfg, total, PHASE_DONE, &ckpt_dir)
}

/// Files with an image extension directly inside `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no images (png/jpg) found in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// What `derain` did: restored image count and the metrics file, if scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerainSummary {
    pub restored: usize,
    pub metrics_csv: Option<PathBuf>,
}

/// Restores every image in `input` with the real-domain removal network.
///
/// Each `<name>.png` output matches its input filename. When
/// `input/clean/<name>` exists for an image, it is scored against that
/// reference; if any image was scored, a `metrics.csv` with per-image rows
/// plus a `mean` summary row lands next to the outputs.
pub fn cmd_derain(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<DerainSummary> {
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let stride = model.config.stride_multiple();
    let inputs = list_images(input)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::new();
    for path in &inputs {
        let rainy = load_image(path)?;
        let restored = derain(&model.f_r, stride, &rainy)?;
        let stem = file_stem(path);
        save_image(&restored, out_dir.join(format!("{stem}.png")))?;

        let clean_path = input.join("clean").join(
            path.file_name()
                .expect("listed files have names"),
        );
        if clean_path.is_file() {
            let clean = load_image(&clean_path)?;
            records.push(evaluate_pair(stem, &restored, &clean)?);
        }
    }

    let metrics_csv = if records.is_empty() {
        None
    } else {
        let mean = summarize("mean", &records)?;
        records.push(EvalRecord {
            id: mean.method,
            psnr_db: mean.psnr_db,
            ssim: mean.ssim,
        });
        let path = out_dir.join("metrics.csv");
        write_metrics_csv(&path, &records)?;
        Some(path)
    };
    Ok(DerainSummary {
        restored: inputs.len(),
        metrics_csv,
    })
}

/// Translates every image in `input` and writes its panel set.
///
/// Per input `<stem>`, four files tagged with the direction are emitted:
/// the generated cross-domain image (`o_gen`), the predicted background
/// (`b1`), the extracted rain (`r1`), and the translated rain (`r2`). Before
/// quantization the panels satisfy `o_gen = b1 + r2` exactly. Inputs are
/// center-cropped to the network stride when needed. Returns the number of
/// translated images.
pub fn cmd_generate(
    checkpoint: &Path,
    input: &Path,
    direction: DirectionArg,
    out_dir: &Path,
) -> Result<usize> {
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let stride = model.config.stride_multiple();
    let inputs = list_images(input)?;
    let images: Vec<ImageTensor> = inputs
        .iter()
        .map(|p| center_aligned(&load_image(p)?, stride))
        .collect::<Result<_>>()?;
    let bundle = run_bundle(&model, direction.translate(), &images)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let tag = direction.tag();
    for (i, path) in inputs.iter().enumerate() {
        let stem = file_stem(path);
        for (panel, imgs) in [
            ("o_gen", &bundle.o_gen),
            ("b1", &bundle.b1),
            ("r1", &bundle.r1),
            ("r2", &bundle.r2),
        ] {
            save_image(&imgs[i], out_dir.join(format!("{stem}.{tag}.{panel}.png")))?;
        }
    }
    Ok(inputs.len())
}

/// What `analyze` produced: file locations and the centroid-distance table.
#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub paths: ReportPaths,
    /// Pairwise centroid distances in [`RainClass::ALL`] order.
    pub centroid_table: [[f64; 4]; 4],
}

fn test_records(
    model: &JrgrModel<f32>,
    manifest: &Path,
) -> Result<(Vec<EvalRecord>, Vec<EvalRecord>)> {
    let stride = model.config.stride_multiple();
    let tests = load_test_pairs(manifest)?;
    let mut restored_records = Vec::with_capacity(tests.len());
    let mut rainy_records = Vec::with_capacity(tests.len());
    for pair in &tests {
        let restored = derain(&model.f_r, stride, &pair.rainy)?;
        restored_records.push(evaluate_pair(pair.id.clone(), &restored, &pair.clean)?);
        rainy_records.push(evaluate_pair(pair.id.clone(), &pair.rainy, &pair.clean)?);
    }
    Ok((restored_records, rainy_records))
}

/// Scores the held-out test pairs, embeds rain layers, and emits the report.
///
/// The metrics CSV covers the restored test split; the summary table also
/// lists the unrestored rainy inputs as a baseline. The showcase grid runs
/// the synthetic-to-real pass on the first paired sample, whose clean image
/// fills the reference panel.
pub fn cmd_analyze(
    config: &ExperimentConfig,
    checkpoint: &Path,
    n_per_class: Option<usize>,
    out_dir: &Path,
) -> Result<AnalyzeSummary> {
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let manifest = config.manifest_path();
    let (paired, unpaired) = load_dataset(&manifest, config.train.crop)?;
    let n = n_per_class.unwrap_or(config.eval.n_per_class);

    let embeddings = collect_rain_embeddings(&model, &paired, &unpaired, n)?;
    let (records, rainy_records) = test_records(&model, &manifest)?;
    let methods = vec![
        summarize("restored", &records)?,
        summarize("rainy-input", &rainy_records)?,
    ];

    let stride = model.config.stride_multiple();
    let showcase = &paired.samples()[0];
    let showcase_in = center_aligned(&showcase.rainy, stride)?;
    let ground_truth = center_aligned(&showcase.clean, stride)?;
    let bundle = run_bundle(&model, TranslateDirection::S2R, std::slice::from_ref(&showcase_in))?;

    let paths = emit_report(
        &ReportInputs {
            records: &records,
            methods: &methods,
            bundle: &bundle,
            ground_truth: Some(&ground_truth),
            embeddings: &embeddings,
        },
        out_dir,
    )?;
    Ok(AnalyzeSummary {
        paths,
        centroid_table: embeddings.centroid_distance_table(),
    })
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn print_centroid_table(table: &[[f64; 4]; 4]) {
    println!("centroid distances between rain classes:");
    print!("{:>24}", "");
    for class in RainClass::ALL {
        print!(" {:>22}", class.label());
    }
    println!();
    for (i, class) in RainClass::ALL.iter().enumerate() {
        print!("{:>24}", class.label());
        for j in 0..4 {
            print!(" {:>22.4}", table[i][j]);
        }
        println!();
    }
}

/// Executes one parsed invocation. Prints results to stdout; the caller maps
/// errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.apply_root_seed(seed);
    }
    if let Ok(env_out) = std::env::var("JRGR_OUT") {
        if !env_out.is_empty() {
            config.output.dir = PathBuf::from(env_out);
        }
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    config.validate()?;

    match &cli.command {
        Command::Synth { data_dir } => {
            let manifest = cmd_synth(&config, data_dir.as_deref())?;
            println!("{}", manifest.display());
        }
        Command::Train {
            strategy,
            resume,
            disable_loss,
        } => {
            let checkpoint = cmd_train(&config, *strategy, *resume, disable_loss)?;
            println!("{}", checkpoint.display());
        }
        Command::Derain {
            checkpoint,
            input,
            out_dir,
        } => {
            let out_dir = out_dir
                .clone()
                .unwrap_or_else(|| config.output.dir.join("derained"));
            let summary = cmd_derain(checkpoint, input, &out_dir)?;
            println!("restored {} images into {}", summary.restored, out_dir.display());
            if let Some(metrics) = &summary.metrics_csv {
                println!("{}", metrics.display());
            }
        }
        Command::Generate {
            checkpoint,
            input,
            direction,
            out_dir,
        } => {
            let out_dir = out_dir
                .clone()
                .unwrap_or_else(|| config.output.dir.join("generated"));
            let count = cmd_generate(checkpoint, input, *direction, &out_dir)?;
            println!(
                "generated {count} {} image sets into {}",
                direction.tag(),
                out_dir.display()
            );
        }
        Command::Analyze {
            checkpoint,
            n_per_class,
            out_dir,
        } => {
            let out_dir = out_dir
                .clone()
                .unwrap_or_else(|| config.output.dir.join("report"));
            let summary = cmd_analyze(&config, checkpoint, *n_per_class, &out_dir)?;
            print_centroid_table(&summary.centroid_table);
            println!("{}", summary.paths.metrics_csv.display());
            println!("{}", summary.paths.table_md.display());
            println!("{}", summary.paths.grid_png.display());
            println!("{}", summary.paths.tsne_points_csv.display());
            println!("{}", summary.paths.tsne_png.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
