//! Training schedules.
//!
//! Two phases drive the model: supervised pretraining of the removal
//! networks on the paired synthetic set, then the alternating
//! generator/discriminator loop on the full joint objective. Both phases
//! log one metrics row per iteration, abort hard on any non-finite loss,
//! and draw every random decision from per-iteration seed streams so a
//! resumed run samples exactly the batches the uninterrupted run would
//! have seen.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::datasets::{
    sample_training_batch, ImagePool, PairedDataset, TrainingBatch, UnpairedDataset,
    POOL_CAPACITY,
};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::losses::{
    full_objective, generator_losses, loss_adv_b_discriminator, loss_adv_o, AblationMask,
    AdvSide, GanMode, LossReport, LossWeights,
};
use crate::networks::{Bound, JrgrModel, Network};
use crate::pipeline::{
    batch_from_images, bind_model, images_from_batch, r2s_forward, s2r_forward, Domain,
    ModelBinding,
};
use crate::seed::SeedTree;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Initialization strategy: which removal networks get supervised
/// pretraining before the joint loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Strategy {
    /// No pretraining; everything starts from random init.
    #[serde(rename = "init-1")]
    Init1,
    /// Only the synthetic-domain removal network `f_s` is pretrained.
    #[serde(rename = "init-2")]
    Init2,
    /// Both removal networks are pretrained on the paired synthetic set.
    #[default]
    #[serde(rename = "proposed")]
    Proposed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Init1, Strategy::Init2, Strategy::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Init1 => "init-1",
            Strategy::Init2 => "init-2",
            Strategy::Proposed => "proposed",
        }
    }

    pub fn pretrains_fs(self) -> bool {
        matches!(self, Strategy::Init2 | Strategy::Proposed)
    }

    pub fn pretrains_fr(self) -> bool {
        matches!(self, Strategy::Proposed)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init-1" => Ok(Strategy::Init1),
            "init-2" => Ok(Strategy::Init2),
            "proposed" => Ok(Strategy::Proposed),
            other => Err(Error::Validation(format!(
                "unknown strategy {other:?}; expected init-1, init-2, or proposed"
            ))),
        }
    }
}

/// Everything the training loop needs to know. Defaults are the toy-scale
/// schedule: 20 pretraining epochs, 50 joint epochs, batch 8, 64-pixel
/// crops, Adam(0.5, 0.999) at 1e-4 with the pretrained removal networks
/// fine-tuned at 1/10 (`f_r`) and 1/100 (`f_s`) of the base rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub base_lr: f64,
    /// Joint-phase learning-rate divisor for a pretrained `f_r`.
    pub lr_divisor_fr: f64,
    /// Joint-phase learning-rate divisor for a pretrained `f_s`.
    pub lr_divisor_fs: f64,
    pub batch: usize,
    pub crop: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub ablation: AblationMask,
    pub gan_mode: GanMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Proposed,
            pretrain_epochs: 20,
            joint_epochs: 50,
            base_lr: 1e-4,
            lr_divisor_fr: 10.0,
            lr_divisor_fs: 100.0,
            batch: 8,
            crop: 64,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            ablation: AblationMask::default(),
            gan_mode: GanMode::default(),
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Validation("batch must be >= 1".into()));
        }
        if self.crop == 0 {
            return Err(Error::Validation("crop must be >= 1".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Validation(format!(
                "base_lr must be finite and positive, got {}",
                self.base_lr
            )));
        }
        for (name, d) in [
            ("lr_divisor_fr", self.lr_divisor_fr),
            ("lr_divisor_fs", self.lr_divisor_fs),
        ] {
            if !d.is_finite() || d < 1.0 {
                return Err(Error::Validation(format!(
                    "{name} must be finite and >= 1, got {d}"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        self.weights.validate()
    }

    /// Joint-phase learning rate for one network by name. Removal networks
    /// that went through pretraining are fine-tuned at a reduced rate; every
    /// other network (including one skipped by the strategy) trains at the
    /// base rate.
    pub fn joint_lr(&self, net: &str) -> f64 {
        match net {
            "f_s" if self.strategy.pretrains_fs() => self.base_lr / self.lr_divisor_fs,
            "f_r" if self.strategy.pretrains_fr() => self.base_lr / self.lr_divisor_fr,
            _ => self.base_lr,
        }
    }
}

/// Iterations that make up one epoch over a set of `n` samples.
pub fn iterations_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam epsilon.
pub const ADAM_EPS: f64 = 1e-8;

/// Per-network Adam state. Missing gradients (a parameter untouched by the
/// current objective) count as zero: the moments decay and the parameter
/// still moves along its remaining momentum, exactly as if a zero gradient
/// had been observed.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    step: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(net: &Network<f32>, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            step: 0,
            m: net.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: net.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// One update of `net` from `grads` (index-aligned with `net.params`)
    /// at learning rate `lr`.
    pub fn apply(
        &mut self,
        net: &mut Network<f32>,
        grads: &[Option<ArrayD<f32>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != net.params.len() {
            return Err(Error::Dimension(format!(
                "optimizer for {} got {} gradients for {} parameters",
                net.name,
                grads.len(),
                net.params.len()
            )));
        }
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = (1.0 - self.beta1.powi(self.step as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(self.step as i32)) as f32;
        let lr = lr as f32;
        let eps = ADAM_EPS as f32;
        for ((param, grad), (m, v)) in net
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if let Some(gr) = grad {
                if gr.shape() != param.value.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} does not match parameter {} {:?}",
                        gr.shape(),
                        param.name,
                        param.value.shape()
                    )));
                }
                ndarray::Zip::from(&mut *m).and(&mut *v).and(gr).for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
            } else {
                m.mapv_inplace(|m| b1 * m);
                v.mapv_inplace(|v| b2 * v);
            }
            ndarray::Zip::from(&mut param.value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

fn collect_grads(g: &Graph<f32>, bound: &Bound) -> Vec<Option<ArrayD<f32>>> {
    bound.ids.iter().map(|&id| g.grad(id).cloned()).collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

pub const PHASE_PRETRAIN_FS: &str = "pretrain_fs";
pub const PHASE_PRETRAIN_FR: &str = "pretrain_fr";
pub const PHASE_JOINT: &str = "joint";
/// Phase recorded on the final checkpoint of a completed schedule.
pub const PHASE_DONE: &str = "done";

/// One metrics row: phase, 1-based iteration within the phase, every loss
/// term, and seconds since the phase group started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub iteration: u64,
    pub adv_b: f64,
    pub adv_os: f64,
    pub adv_or: f64,
    pub cyc_os: f64,
    pub cyc_or: f64,
    pub cyc_bs: f64,
    pub cyc_br: f64,
    pub mse_bs: f64,
    pub total: f64,
    pub d_b: f64,
    pub d_os: f64,
    pub d_or: f64,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn from_report(phase: &str, iteration: u64, r: &LossReport, wall_clock_s: f64) -> Self {
        Self {
            phase: phase.to_string(),
            iteration,
            adv_b: r.adv_b,
            adv_os: r.adv_os,
            adv_or: r.adv_or,
            cyc_os: r.cyc_os,
            cyc_or: r.cyc_or,
            cyc_bs: r.cyc_bs,
            cyc_br: r.cyc_br,
            mse_bs: r.mse_bs,
            total: r.total,
            d_b: r.d_b,
            d_os: r.d_os,
            d_or: r.d_or,
            wall_clock_s,
        }
    }

    /// Pretraining row: the supervised MSE is both the `mse_bs` entry and
    /// the optimized total; every other term is zero.
    pub fn pretrain(phase: &str, iteration: u64, mse: f64, wall_clock_s: f64) -> Self {
        let report = LossReport {
            mse_bs: mse,
            total: mse,
            ..LossReport::default()
        };
        Self::from_report(phase, iteration, &report, wall_clock_s)
    }

    /// The loss fields reassembled into a report.
    pub fn report(&self) -> LossReport {
        LossReport {
            adv_b: self.adv_b,
            adv_os: self.adv_os,
            adv_or: self.adv_or,
            cyc_os: self.cyc_os,
            cyc_or: self.cyc_or,
            cyc_bs: self.cyc_bs,
            cyc_br: self.cyc_br,
            mse_bs: self.mse_bs,
            total: self.total,
            d_b: self.d_b,
            d_os: self.d_os,
            d_or: self.d_or,
        }
    }
}

/// Collects metrics rows, optionally streaming them to a CSV file as they
/// arrive (flushed per row so an aborted run leaves a readable file).
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    writer: Option<csv::Writer<File>>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            rows: Vec::new(),
            writer: None,
            path: None,
        }
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            rows: Vec::new(),
            writer: Some(csv::Writer::from_writer(file)),
            path: Some(path),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let path = self.path.clone().unwrap_or_default();
            w.serialize(&row)
                .and_then(|()| w.flush().map_err(csv::Error::from))
                .map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: format!("cannot append metrics row: {e}"),
                })?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Reads a metrics CSV back into rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        reader
            .deserialize()
            .map(|row| {
                row.map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}

fn nan_abort(term: &str, iteration: u64, snapshot: String) -> Error {
    Error::NanAbort {
        term: term.to_string(),
        iteration,
        snapshot,
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

fn validate_for_training(
    model: &JrgrModel<f32>,
    paired: &PairedDataset,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if paired.is_empty() {
        return Err(Error::Data("training needs a non-empty paired set".into()));
    }
    if paired.crop() != cfg.crop {
        return Err(Error::Validation(format!(
            "dataset crop {} does not match configured crop {}",
            paired.crop(),
            cfg.crop
        )));
    }
    let align = model.config.stride_multiple();
    if cfg.crop % align != 0 {
        return Err(Error::Validation(format!(
            "crop {} is not a multiple of the model's stride alignment {align}",
            cfg.crop
        )));
    }
    Ok(())
}

/// Supervised pretraining of the removal networks selected by the strategy:
/// plain MSE between the predicted and true background on paired synthetic
/// crops, at the base learning rate. A no-op under `init-1`.
pub fn pretrain_removal(
    model: &mut JrgrModel<f32>,
    paired: &PairedDataset,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    validate_for_training(model, paired, cfg)?;
    let tree = SeedTree::new(cfg.seed);
    let total = cfg.pretrain_epochs as u64 * iterations_per_epoch(paired.len(), cfg.batch);
    let started = Instant::now();
    for phase in [PHASE_PRETRAIN_FS, PHASE_PRETRAIN_FR] {
        let enabled = match phase {
            PHASE_PRETRAIN_FS => cfg.strategy.pretrains_fs(),
            _ => cfg.strategy.pretrains_fr(),
        };
        if !enabled {
            continue;
        }
        let net = if phase == PHASE_PRETRAIN_FS {
            &mut model.f_s
        } else {
            &mut model.f_r
        };
        let mut opt = Adam::new(net, cfg);
        for it in 0..total {
            let iteration = it + 1;
            let mut rng = tree.rng_indexed(&format!("{phase}/batch"), it);
            let mut rainy = Vec::with_capacity(cfg.batch);
            let mut clean = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let idx = rng.random_range(0..paired.len());
                let (o, b) = paired.crop_pair(idx, &mut rng)?;
                rainy.push(o);
                clean.push(b);
            }
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.input(batch_from_images(&rainy)?);
            let target = g.input(batch_from_images(&clean)?);
            let y = net.forward(&mut g, &bound, x)?;
            let loss = g.mse_mean(y, target)?;
            let value = f64::from(g.scalar(loss));
            if !value.is_finite() {
                let snapshot = format!("{{\"phase\":\"{phase}\",\"mse\":\"{value}\"}}");
                return Err(nan_abort("mse_bs", iteration, snapshot));
            }
            g.backward(loss)?;
            let grads = collect_grads(&g, &bound);
            opt.apply(net, &grads, cfg.base_lr)?;
            log.push(MetricsRow::pretrain(
                phase,
                iteration,
                value,
                started.elapsed().as_secs_f64(),
            ))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Joint loop
// ---------------------------------------------------------------------------

/// Fresh generator outputs that the discriminators will judge, detached
/// from the generator graph.
struct FakeImages {
    /// The four predicted backgrounds: s2r B1, s2r B2, r2s B1, r2s B2.
    backgrounds: [Vec<ImageTensor>; 4],
    /// r2s generations — synthetic-style rainy images, judged by `d_os`.
    syn_style: Vec<ImageTensor>,
    /// s2r generations — real-style rainy images, judged by `d_or`.
    real_style: Vec<ImageTensor>,
}

struct PooledFakes {
    backgrounds: [Vec<ImageTensor>; 4],
    syn_style: Vec<ImageTensor>,
    real_style: Vec<ImageTensor>,
}

struct DiscPools {
    d_b: ImagePool,
    d_os: ImagePool,
    d_or: ImagePool,
}

impl DiscPools {
    fn new(tree: &SeedTree) -> Self {
        Self {
            d_b: ImagePool::new(POOL_CAPACITY, tree.rng("pool/d_b")),
            d_os: ImagePool::new(POOL_CAPACITY, tree.rng("pool/d_os")),
            d_or: ImagePool::new(POOL_CAPACITY, tree.rng("pool/d_or")),
        }
    }

    fn absorb(&mut self, fakes: FakeImages) -> PooledFakes {
        PooledFakes {
            backgrounds: fakes.backgrounds.map(|imgs| self.d_b.query_batch(imgs)),
            syn_style: self.d_os.query_batch(fakes.syn_style),
            real_style: self.d_or.query_batch(fakes.real_style),
        }
    }
}

struct GenOptimizers {
    f_s: Adam,
    f_r: Adam,
    g_s: Adam,
    g_r: Adam,
}

struct DiscOptimizers {
    d_b: Adam,
    d_os: Adam,
    d_or: Adam,
}

/// One generator update: both translation passes, the full objective,
/// backprop, and an Adam step per removal/translation network at its wired
/// learning rate. Discriminator parameters enter the graph frozen. Returns
/// the loss report (discriminator fields zero) and the fresh fakes.
fn generator_step(
    model: &mut JrgrModel<f32>,
    opt: &mut GenOptimizers,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<(LossReport, FakeImages)> {
    let mut g = Graph::new();
    let mb = bind_model(&mut g, model, true, false);
    let o_s = g.input(batch_from_images(&batch.o_s)?);
    let b_gt = g.input(batch_from_images(&batch.b)?);
    let o_r = g.input(batch_from_images(&batch.o_r)?);
    let s2r = s2r_forward(&mut g, model, &mb, o_s)?;
    let r2s = r2s_forward(&mut g, model, &mb, o_r)?;
    let terms = generator_losses(&mut g, model, &mb, &s2r, &r2s, b_gt, cfg.gan_mode)?;
    let total = full_objective(&mut g, &terms, &cfg.weights, &cfg.ablation)?;
    let report = LossReport::from_generator_graph(&g, &terms, total);
    if let Some(term) = report.first_non_finite() {
        let snapshot = serde_json::to_string(&report).unwrap_or_default();
        return Err(nan_abort(term, iteration, snapshot));
    }
    g.backward(total)?;
    let nets = [
        (&mut model.f_s, &mb.f_s, &mut opt.f_s),
        (&mut model.f_r, &mb.f_r, &mut opt.f_r),
        (&mut model.g_s, &mb.g_s, &mut opt.g_s),
        (&mut model.g_r, &mb.g_r, &mut opt.g_r),
    ];
    for (net, bound, adam) in nets {
        let grads = collect_grads(&g, bound);
        let lr = cfg.joint_lr(&net.name);
        adam.apply(net, &grads, lr)?;
    }
    let fakes = FakeImages {
        backgrounds: [
            images_from_batch(g.value(s2r.b1))?,
            images_from_batch(g.value(s2r.b2))?,
            images_from_batch(g.value(r2s.b1))?,
            images_from_batch(g.value(r2s.b2))?,
        ],
        syn_style: images_from_batch(g.value(r2s.o_gen))?,
        real_style: images_from_batch(g.value(s2r.o_gen))?,
    };
    Ok((report, fakes))
}

/// Binds only the discriminators (trainable); the translation networks get
/// empty bindings since the discriminator graph never runs them.
fn bind_discriminators(g: &mut Graph<f32>, model: &JrgrModel<f32>) -> ModelBinding {
    ModelBinding {
        f_s: Bound::default(),
        f_r: Bound::default(),
        g_s: Bound::default(),
        g_r: Bound::default(),
        d_b: model.d_b.bind(g, true),
        d_os: model.d_os.bind(g, true),
        d_or: model.d_or.bind(g, true),
    }
}

/// One discriminator update on pooled fakes and the current real batch:
/// `d_b` sees the four predicted backgrounds against the true background,
/// `d_os`/`d_or` see generated rainy images against genuine ones from
/// their domain. Generator parameters are not part of the graph at all.
fn discriminator_step(
    model: &mut JrgrModel<f32>,
    opt: &mut DiscOptimizers,
    batch: &TrainingBatch,
    pooled: &PooledFakes,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let mb = bind_discriminators(&mut g, model);
    let real_b = g.input(batch_from_images(&batch.b)?);
    let real_os = g.input(batch_from_images(&batch.o_s)?);
    let real_or = g.input(batch_from_images(&batch.o_r)?);
    let fake_bgs = pooled
        .backgrounds
        .iter()
        .map(|imgs| Ok(g.input(batch_from_images(imgs)?)))
        .collect::<Result<Vec<NodeId>>>()?;
    let fake_os = g.input(batch_from_images(&pooled.syn_style)?);
    let fake_or = g.input(batch_from_images(&pooled.real_style)?);
    let l_b = loss_adv_b_discriminator(&mut g, model, &mb, &fake_bgs, real_b, &cfg.weights, cfg.gan_mode)?;
    // Origin picks the judge: r2s fakes imitate the synthetic domain
    // (origin real -> d_os), s2r fakes the real domain (origin synthetic
    // -> d_or).
    let l_os = loss_adv_o(
        &mut g,
        model,
        &mb,
        Domain::Real,
        AdvSide::Discriminator {
            real: real_os,
            pooled_fake: fake_os,
        },
        cfg.gan_mode,
    )?;
    let l_or = loss_adv_o(
        &mut g,
        model,
        &mb,
        Domain::Synthetic,
        AdvSide::Discriminator {
            real: real_or,
            pooled_fake: fake_or,
        },
        cfg.gan_mode,
    )?;
    let values = (
        f64::from(g.scalar(l_b)),
        f64::from(g.scalar(l_os)),
        f64::from(g.scalar(l_or)),
    );
    for (name, v) in [("d_b", values.0), ("d_os", values.1), ("d_or", values.2)] {
        if !v.is_finite() {
            let snapshot = format!(
                "{{\"d_b\":{},\"d_os\":{},\"d_or\":{}}}",
                values.0, values.1, values.2
            );
            return Err(nan_abort(name, iteration, snapshot));
        }
    }
    let combined = g.weighted_sum(&[(1.0, l_b), (1.0, l_os), (1.0, l_or)])?;
    g.backward(combined)?;
    let nets = [
        (&mut model.d_b, &mb.d_b, &mut opt.d_b),
        (&mut model.d_os, &mb.d_os, &mut opt.d_os),
        (&mut model.d_or, &mb.d_or, &mut opt.d_or),
    ];
    for (net, bound, adam) in nets {
        let grads = collect_grads(&g, bound);
        adam.apply(net, &grads, cfg.base_lr)?;
    }
    Ok(values)
}

/// Runs the alternating joint loop from `start_iteration` (0-based; pass
/// the iteration count recorded in a checkpoint to resume) through the
/// configured number of epochs. One iteration is one generator update
/// followed by one discriminator update on pooled fakes. `on_epoch_end`
/// fires after each completed epoch with the 1-based epoch index and the
/// global iteration count — the checkpointing hook. Returns the total
/// iteration count.
///
/// An epoch spans `ceil(max(paired, unpaired) / batch)` iterations, so the
/// larger set is covered once per epoch in expectation.
pub fn joint_train(
    model: &mut JrgrModel<f32>,
    paired: &PairedDataset,
    unpaired: &UnpairedDataset,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    start_iteration: u64,
    mut on_epoch_end: impl FnMut(&JrgrModel<f32>, u64, u64) -> Result<()>,
) -> Result<u64> {
    validate_for_training(model, paired, cfg)?;
    if unpaired.is_empty() {
        return Err(Error::Data("joint training needs a non-empty unpaired set".into()));
    }
    let per_epoch = iterations_per_epoch(paired.len().max(unpaired.len()), cfg.batch);
    let total = cfg.joint_epochs as u64 * per_epoch;
    if start_iteration > total {
        return Err(Error::Validation(format!(
            "cannot resume at iteration {start_iteration}: the schedule ends at {total}"
        )));
    }
    let tree = SeedTree::new(cfg.seed);
    let mut pools = DiscPools::new(&tree);
    let mut gen_opt = GenOptimizers {
        f_s: Adam::new(&model.f_s, cfg),
        f_r: Adam::new(&model.f_r, cfg),
        g_s: Adam::new(&model.g_s, cfg),
        g_r: Adam::new(&model.g_r, cfg),
    };
    let mut disc_opt = DiscOptimizers {
        d_b: Adam::new(&model.d_b, cfg),
        d_os: Adam::new(&model.d_os, cfg),
        d_or: Adam::new(&model.d_or, cfg),
    };
    let started = Instant::now();
    for it in start_iteration..total {
        let iteration = it + 1;
        let mut rng = tree.rng_indexed("joint/batch", it);
        let batch = sample_training_batch(paired, unpaired, cfg.batch, &mut rng)?;
        let (mut report, fakes) = generator_step(model, &mut gen_opt, &batch, cfg, iteration)?;
        if !cfg.ablation.adv {
            let pooled = pools.absorb(fakes);
            let (d_b, d_os, d_or) =
                discriminator_step(model, &mut disc_opt, &batch, &pooled, cfg, iteration)?;
            report.d_b = d_b;
            report.d_os = d_os;
            report.d_or = d_or;
        }
        log.push(MetricsRow::from_report(
            PHASE_JOINT,
            iteration,
            &report,
            started.elapsed().as_secs_f64(),
        ))?;
        if iteration % per_epoch == 0 {
            on_epoch_end(model, iteration / per_epoch, iteration)?;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"JRGRCKP1";
const MAX_NAME_LEN: usize = 4096;

/// Sidecar of every checkpoint archive: where training stood and the exact
/// configs needed to rebuild a compatible model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed iterations within `phase`.
    pub iteration: u64,
    pub phase: String,
    pub model_config: crate::networks::ModelConfig,
    pub train_config: TrainConfig,
}

fn write_str(w: &mut impl std::io::Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl std::io::Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > MAX_NAME_LEN {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "unreasonable name length",
        ));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 name"))
}

/// Writes `{iteration:08}.archive` (binary parameters) and
/// `{iteration:08}.manifest` (JSON metadata) into `dir`, each through a
/// temporary file renamed into place so a crash never leaves a torn
/// checkpoint. Optimizer moments are not stored: a resumed run restarts
/// Adam's statistics. Returns the manifest path.
pub fn save_checkpoint(
    model: &JrgrModel<f32>,
    cfg: &TrainConfig,
    iteration: u64,
    phase: &str,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{iteration:08}");
    let archive_path = dir.join(format!("{stem}.archive"));
    let tmp_archive = dir.join(format!("{stem}.archive.tmp"));
    {
        let file = File::create(&tmp_archive).map_err(|e| Error::io(&tmp_archive, e))?;
        let mut w = BufWriter::new(file);
        let io_res: std::io::Result<()> = (|| {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_u32::<LittleEndian>(model.networks().len() as u32)?;
            for net in model.networks() {
                write_str(&mut w, &net.name)?;
                w.write_u32::<LittleEndian>(net.params.len() as u32)?;
                for p in &net.params {
                    write_str(&mut w, &p.name)?;
                    w.write_u32::<LittleEndian>(p.value.ndim() as u32)?;
                    for &d in p.value.shape() {
                        w.write_u64::<LittleEndian>(d as u64)?;
                    }
                    for &x in p.value.iter() {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
            }
            w.flush()
        })();
        io_res.map_err(|e| Error::io(&tmp_archive, e))?;
    }
    fs::rename(&tmp_archive, &archive_path).map_err(|e| Error::io(&archive_path, e))?;

    let meta = CheckpointMeta {
        iteration,
        phase: phase.to_string(),
        model_config: model.config.clone(),
        train_config: cfg.clone(),
    };
    let manifest_path = dir.join(format!("{stem}.manifest"));
    let tmp_manifest = dir.join(format!("{stem}.manifest.tmp"));
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&tmp_manifest, json.as_bytes()).map_err(|e| Error::io(&tmp_manifest, e))?;
    fs::rename(&tmp_manifest, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Restores a model from a checkpoint manifest: rebuilds the architecture
/// from the stored config, then overwrites every parameter from the
/// archive. Any disagreement between archive and architecture (network
/// names, parameter names, shapes, trailing data) is a compatibility
/// error.
pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<(JrgrModel<f32>, CheckpointMeta)> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    meta.train_config.validate()?;
    let mut model = JrgrModel::new(
        meta.model_config.clone(),
        &SeedTree::new(meta.train_config.seed),
    )?;

    let archive_path = manifest_path.with_extension("archive");
    let file = File::open(&archive_path).map_err(|e| Error::io(&archive_path, e))?;
    let mut r = BufReader::new(file);
    let ioerr = |e: std::io::Error| Error::io(archive_path.clone(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ioerr)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Compatibility(format!(
            "{} is not a checkpoint archive",
            archive_path.display()
        )));
    }
    let net_count = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
    let expected = model.networks().len();
    if net_count != expected {
        return Err(Error::Compatibility(format!(
            "archive holds {net_count} networks, the model has {expected}"
        )));
    }
    for net in model.networks_mut() {
        let name = read_str(&mut r).map_err(ioerr)?;
        if name != net.name {
            return Err(Error::Compatibility(format!(
                "archive network {name:?} does not match expected {:?}",
                net.name
            )));
        }
        let param_count = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
        if param_count != net.params.len() {
            return Err(Error::Compatibility(format!(
                "network {} has {param_count} parameters in the archive, {} in the model",
                net.name,
                net.params.len()
            )));
        }
        for p in &mut net.params {
            let pname = read_str(&mut r).map_err(ioerr)?;
            if pname != p.name {
                return Err(Error::Compatibility(format!(
                    "parameter {pname:?} does not match expected {:?} in {}",
                    p.name, net.name
                )));
            }
            let ndim = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(ioerr)? as usize);
            }
            if shape != p.value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {} of {} has shape {:?} in the archive, {:?} in the model",
                    p.name,
                    net.name,
                    shape,
                    p.value.shape()
                )));
            }
            for x in p.value.iter_mut() {
                *x = r.read_f32::<LittleEndian>().map_err(ioerr)?;
            }
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(ioerr)? != 0 {
        return Err(Error::Compatibility(format!(
            "{} has trailing data after the last parameter",
            archive_path.display()
        )));
    }
    Ok((model, meta))
}

/// The manifest with the highest iteration number in `dir`, if any.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) != Some("manifest") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Ok(iteration) = stem.parse::<u64>() else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| iteration > *b) {
            best = Some((iteration, path));
        }
    }
    Ok(best.map(|(_, path)| path))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
