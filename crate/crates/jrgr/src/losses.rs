//! Loss assembly for joint training.
//!
//! Generator-side terms (adversarial, cycle, background supervision) are built
//! on top of translation bundles; discriminator-side terms take pooled,
//! detached fakes. Every builder returns a scalar graph node so the caller can
//! combine, log, and backprop them uniformly.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::networks::{Bound, JrgrModel, Network};
use crate::pipeline::{Domain, ModelBinding, TranslationBundle};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Adversarial objective family. The default is the non-saturating BCE form;
/// a least-squares variant is available behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    NonSaturating,
    LeastSquares,
}

/// Scalar weights of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the real-image term inside the background-discriminator
    /// update (it sees four fake batches per real batch).
    pub alpha: f64,
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            lambda_adv: 10.0,
            lambda_cyc: 1.0,
            lambda_mse: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_adv", self.lambda_adv),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_mse", self.lambda_mse),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Set of loss groups removed from the training objective.
///
/// A disabled group is still evaluated and logged, but it is excluded from the
/// total, so no gradient flows from it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationMask {
    pub adv: bool,
    pub cyc: bool,
    pub mse: bool,
}

impl AblationMask {
    pub const TERMS: [&'static str; 3] = ["adv", "cyc", "mse"];

    /// Disables one loss group by name (`adv`, `cyc`, or `mse`).
    pub fn disable(&mut self, term: &str) -> Result<()> {
        match term {
            "adv" => self.adv = true,
            "cyc" => self.cyc = true,
            "mse" => self.mse = true,
            other => {
                return Err(Error::Validation(format!(
                    "unknown loss term {other:?}; expected one of {:?}",
                    Self::TERMS
                )))
            }
        }
        Ok(())
    }

    pub fn from_terms<S: AsRef<str>>(terms: &[S]) -> Result<Self> {
        let mut mask = Self::default();
        for t in terms {
            mask.disable(t.as_ref())?;
        }
        Ok(mask)
    }

    /// Names of the disabled groups.
    pub fn disabled(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.adv {
            out.push("adv");
        }
        if self.cyc {
            out.push("cyc");
        }
        if self.mse {
            out.push("mse");
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        !(self.adv || self.cyc || self.mse)
    }
}

impl Serialize for AblationMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.disabled().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AblationMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let terms = Vec::<String>::deserialize(deserializer)?;
        Self::from_terms(&terms).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Score-level helpers
// ---------------------------------------------------------------------------

fn score_loss_real<T: Scalar>(g: &mut Graph<T>, scores: NodeId, mode: GanMode) -> Result<NodeId> {
    match mode {
        GanMode::NonSaturating => Ok(g.bce_real_mean(scores)),
        GanMode::LeastSquares => {
            let ones = g.input(ArrayD::from_elem(g.value(scores).raw_dim(), T::one()));
            g.mse_mean(scores, ones)
        }
    }
}

fn score_loss_fake<T: Scalar>(g: &mut Graph<T>, scores: NodeId, mode: GanMode) -> Result<NodeId> {
    match mode {
        GanMode::NonSaturating => Ok(g.bce_fake_mean(scores)),
        GanMode::LeastSquares => {
            let zeros = g.input(ArrayD::zeros(g.value(scores).raw_dim()));
            g.mse_mean(scores, zeros)
        }
    }
}

fn batch_len<T: Scalar>(g: &Graph<T>, id: NodeId) -> usize {
    g.value(id).shape()[0]
}

/// Mean of per-batch score losses over several batches. When every batch has
/// the same size this folds them into a single discriminator pass (a mean
/// over the concatenated batch is exactly the mean of the per-batch means).
fn mean_score_loss_over<T: Scalar>(
    g: &mut Graph<T>,
    disc: &Network<T>,
    bound: &Bound,
    batches: &[NodeId],
    mode: GanMode,
    real_label: bool,
) -> Result<NodeId> {
    let n0 = batch_len(g, batches[0]);
    let uniform = batches.iter().all(|&b| batch_len(g, b) == n0);
    let score_loss = |g: &mut Graph<T>, s: NodeId| {
        if real_label {
            score_loss_real(g, s, mode)
        } else {
            score_loss_fake(g, s, mode)
        }
    };
    if uniform {
        let cat = g.concat_batch(batches)?;
        let scores = disc.forward(g, bound, cat)?;
        score_loss(g, scores)
    } else {
        let w = 1.0 / batches.len() as f64;
        let mut terms = Vec::with_capacity(batches.len());
        for &b in batches {
            let scores = disc.forward(g, bound, b)?;
            terms.push((w, score_loss(g, scores)?));
        }
        g.weighted_sum(&terms)
    }
}

// ---------------------------------------------------------------------------
// Adversarial losses
// ---------------------------------------------------------------------------

/// Generator-side background-adversarial loss: the mean of the real-label
/// score loss over the four predicted backgrounds (both decompositions of
/// both translation passes).
pub fn loss_adv_b_generator<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    s2r: &TranslationBundle,
    r2s: &TranslationBundle,
    mode: GanMode,
) -> Result<NodeId> {
    let backgrounds = [s2r.b1, s2r.b2, r2s.b1, r2s.b2];
    mean_score_loss_over(g, &model.d_b, &mb.d_b, &backgrounds, mode, true)
}

/// Background-discriminator loss: `alpha` times the real-label loss on the
/// clean-background batch plus the sum of fake-label losses over the pooled
/// fake backgrounds (one per predicted background in the joint step).
pub fn loss_adv_b_discriminator<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    pooled_fakes: &[NodeId],
    real_b: NodeId,
    weights: &LossWeights,
    mode: GanMode,
) -> Result<NodeId> {
    if pooled_fakes.is_empty() {
        return Err(Error::Validation(
            "background discriminator needs at least one fake batch".into(),
        ));
    }
    let mut terms = Vec::with_capacity(2);
    if weights.alpha > 0.0 {
        let real_scores = model.d_b.forward(g, &mb.d_b, real_b)?;
        terms.push((weights.alpha, score_loss_real(g, real_scores, mode)?));
    }
    // Sum over fakes = (count) x (mean over fakes).
    let fake_mean = mean_score_loss_over(g, &model.d_b, &mb.d_b, pooled_fakes, mode, false)?;
    terms.push((pooled_fakes.len() as f64, fake_mean));
    g.weighted_sum(&terms)
}

/// Which side of the rainy-image adversarial game is being built.
#[derive(Debug, Clone, Copy)]
pub enum AdvSide {
    /// Generator view: score the freshly generated rainy image as real.
    Generator { o_gen: NodeId },
    /// Discriminator view: a real batch from the target domain against a
    /// pooled, detached fake.
    Discriminator { real: NodeId, pooled_fake: NodeId },
}

/// Rainy-image adversarial loss for one translation pass. `origin` is the
/// domain of the pass input; the generated image lives in the opposite
/// domain, whose discriminator judges it: a synthetic-origin pass feeds the
/// real-domain discriminator and vice versa.
pub fn loss_adv_o<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    origin: Domain,
    side: AdvSide,
    mode: GanMode,
) -> Result<NodeId> {
    let (disc, bound) = match origin {
        Domain::Synthetic => (&model.d_or, &mb.d_or),
        Domain::Real => (&model.d_os, &mb.d_os),
    };
    match side {
        AdvSide::Generator { o_gen } => {
            let scores = disc.forward(g, bound, o_gen)?;
            score_loss_real(g, scores, mode)
        }
        AdvSide::Discriminator { real, pooled_fake } => {
            let real_scores = disc.forward(g, bound, real)?;
            let real_term = score_loss_real(g, real_scores, mode)?;
            let fake_scores = disc.forward(g, bound, pooled_fake)?;
            let fake_term = score_loss_fake(g, fake_scores, mode)?;
            g.weighted_sum(&[(1.0, real_term), (1.0, fake_term)])
        }
    }
}

// ---------------------------------------------------------------------------
// Reconstruction losses
// ---------------------------------------------------------------------------

/// Cycle consistency on rainy images: `mean |O_in - O_rec|`.
pub fn loss_cyc_o<T: Scalar>(g: &mut Graph<T>, bundle: &TranslationBundle) -> Result<NodeId> {
    g.l1_mean(bundle.o_in, bundle.o_rec)
}

/// Internal background consistency: `mean |B1 - B2|` within one pass.
pub fn loss_cyc_b<T: Scalar>(g: &mut Graph<T>, bundle: &TranslationBundle) -> Result<NodeId> {
    g.l1_mean(bundle.b1, bundle.b2)
}

/// Supervised background reconstruction on the synthetic-origin pass:
/// `MSE(B1, B_gt) + MSE(B2, B_gt)`.
pub fn loss_mse_bs<T: Scalar>(
    g: &mut Graph<T>,
    s2r: &TranslationBundle,
    b_gt: NodeId,
) -> Result<NodeId> {
    let first = g.mse_mean(s2r.b1, b_gt)?;
    let second = g.mse_mean(s2r.b2, b_gt)?;
    g.weighted_sum(&[(1.0, first), (1.0, second)])
}

// ---------------------------------------------------------------------------
// Full objective
// ---------------------------------------------------------------------------

/// Scalar nodes of the eight generator-side terms.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLossNodes {
    pub adv_b: NodeId,
    /// Adversarial term on synthetic-style generated images (real-to-synthetic pass).
    pub adv_os: NodeId,
    /// Adversarial term on real-style generated images (synthetic-to-real pass).
    pub adv_or: NodeId,
    /// Cycle loss of the synthetic-origin pass.
    pub cyc_os: NodeId,
    /// Cycle loss of the real-origin pass.
    pub cyc_or: NodeId,
    pub cyc_bs: NodeId,
    pub cyc_br: NodeId,
    pub mse_bs: NodeId,
}

/// Builds all eight generator-side loss terms for one joint iteration.
/// `b_gt` is the clean-background batch paired with the synthetic input.
pub fn generator_losses<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    s2r: &TranslationBundle,
    r2s: &TranslationBundle,
    b_gt: NodeId,
    mode: GanMode,
) -> Result<GeneratorLossNodes> {
    if s2r.origin != Domain::Synthetic || r2s.origin != Domain::Real {
        return Err(Error::Validation(
            "generator_losses expects a synthetic-origin and a real-origin bundle".into(),
        ));
    }
    Ok(GeneratorLossNodes {
        adv_b: loss_adv_b_generator(g, model, mb, s2r, r2s, mode)?,
        adv_os: loss_adv_o(
            g,
            model,
            mb,
            r2s.origin,
            AdvSide::Generator { o_gen: r2s.o_gen },
            mode,
        )?,
        adv_or: loss_adv_o(
            g,
            model,
            mb,
            s2r.origin,
            AdvSide::Generator { o_gen: s2r.o_gen },
            mode,
        )?,
        cyc_os: loss_cyc_o(g, s2r)?,
        cyc_or: loss_cyc_o(g, r2s)?,
        cyc_bs: loss_cyc_b(g, s2r)?,
        cyc_br: loss_cyc_b(g, r2s)?,
        mse_bs: loss_mse_bs(g, s2r, b_gt)?,
    })
}

/// Weighted total of the generator terms. Groups disabled in `mask`
/// contribute neither value nor gradient.
pub fn full_objective<T: Scalar>(
    g: &mut Graph<T>,
    terms: &GeneratorLossNodes,
    weights: &LossWeights,
    mask: &AblationMask,
) -> Result<NodeId> {
    weights.validate()?;
    let mut parts = Vec::with_capacity(8);
    if !mask.adv {
        parts.push((weights.lambda_adv, terms.adv_b));
        parts.push((weights.lambda_adv, terms.adv_os));
        parts.push((weights.lambda_adv, terms.adv_or));
    }
    if !mask.cyc {
        parts.push((weights.lambda_cyc, terms.cyc_os));
        parts.push((weights.lambda_cyc, terms.cyc_or));
        parts.push((weights.lambda_cyc, terms.cyc_bs));
        parts.push((weights.lambda_cyc, terms.cyc_br));
    }
    if !mask.mse {
        parts.push((weights.lambda_mse, terms.mse_bs));
    }
    g.weighted_sum(&parts)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// One iteration's loss values, CSV-ready.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
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
}

impl LossReport {
    /// Reads the generator-side values out of a graph; discriminator fields
    /// are filled by the caller once its step has run.
    pub fn from_generator_graph<T: Scalar>(
        g: &Graph<T>,
        terms: &GeneratorLossNodes,
        total: NodeId,
    ) -> Self {
        Self {
            adv_b: g.scalar(terms.adv_b).to_f64(),
            adv_os: g.scalar(terms.adv_os).to_f64(),
            adv_or: g.scalar(terms.adv_or).to_f64(),
            cyc_os: g.scalar(terms.cyc_os).to_f64(),
            cyc_or: g.scalar(terms.cyc_or).to_f64(),
            cyc_bs: g.scalar(terms.cyc_bs).to_f64(),
            cyc_br: g.scalar(terms.cyc_br).to_f64(),
            mse_bs: g.scalar(terms.mse_bs).to_f64(),
            total: g.scalar(total).to_f64(),
            d_b: 0.0,
            d_os: 0.0,
            d_or: 0.0,
        }
    }

    /// Total recomputed from the individual terms under the given weights and
    /// mask.
    pub fn expected_total(&self, weights: &LossWeights, mask: &AblationMask) -> f64 {
        let mut t = 0.0;
        if !mask.adv {
            t += weights.lambda_adv * (self.adv_b + self.adv_os + self.adv_or);
        }
        if !mask.cyc {
            t += weights.lambda_cyc * (self.cyc_os + self.cyc_or + self.cyc_bs + self.cyc_br);
        }
        if !mask.mse {
            t += weights.lambda_mse * self.mse_bs;
        }
        t
    }

    /// Checks that the reported total matches the weighted term sum to within
    /// a small relative error.
    pub fn total_is_consistent(&self, weights: &LossWeights, mask: &AblationMask) -> bool {
        let expected = self.expected_total(weights, mask);
        (self.total - expected).abs() <= 1e-6 * expected.abs().max(1.0)
    }

    pub fn all_finite(&self) -> bool {
        [
            self.adv_b, self.adv_os, self.adv_or, self.cyc_os, self.cyc_or, self.cyc_bs,
            self.cyc_br, self.mse_bs, self.total, self.d_b, self.d_os, self.d_or,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let fields = [
            ("adv_b", self.adv_b),
            ("adv_os", self.adv_os),
            ("adv_or", self.adv_or),
            ("cyc_os", self.cyc_os),
            ("cyc_or", self.cyc_or),
            ("cyc_bs", self.cyc_bs),
            ("cyc_br", self.cyc_br),
            ("mse_bs", self.mse_bs),
            ("total", self.total),
            ("d_b", self.d_b),
            ("d_os", self.d_os),
            ("d_or", self.d_or),
        ];
        fields.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

// ---------------------------------------------------------------------------
