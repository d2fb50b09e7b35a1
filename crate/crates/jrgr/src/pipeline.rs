//! The disentangle -> translate -> entangle modules and image-space
//! inference wrappers.
//!
//! A translation run decomposes a rainy image `O = B + R`, translates the
//! rain layer across domains, re-entangles it onto the predicted background,
//! then repeats the decomposition on the generated image to close the cycle.
//! Because entangling is a literal addition on the tape, the additive
//! identities (`o_in = b1 + r1`, `o_gen = b1 + r2`, `o_rec = b2 + r4`) hold
//! to float precision by construction — tests enforce them.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::imaging::{crop_at, pad_reflect, ImageTensor};
use crate::networks::{Bound, JrgrModel, Network, RainChannels};
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

/// Which rain domain an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Synthetic,
    Real,
}

/// Direction of one translation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslateDirection {
    /// Synthetic rainy input, generated real-style rainy image.
    S2R,
    /// Real rainy input, generated synthetic-style rainy image.
    R2S,
}

impl TranslateDirection {
    pub fn source_domain(self) -> Domain {
        match self {
            TranslateDirection::S2R => Domain::Synthetic,
            TranslateDirection::R2S => Domain::Real,
        }
    }
}

/// Parameter bindings of all seven networks in one graph.
pub struct ModelBinding {
    pub f_s: Bound,
    pub f_r: Bound,
    pub g_s: Bound,
    pub g_r: Bound,
    pub d_b: Bound,
    pub d_os: Bound,
    pub d_or: Bound,
}

/// Binds every network into `g`, marking removal/translation networks and
/// discriminators trainable independently — the generator step freezes the
/// discriminators and vice versa.
pub fn bind_model<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    trainable_translators: bool,
    trainable_discs: bool,
) -> ModelBinding {
    ModelBinding {
        f_s: model.f_s.bind(g, trainable_translators),
        f_r: model.f_r.bind(g, trainable_translators),
        g_s: model.g_s.bind(g, trainable_translators),
        g_r: model.g_r.bind(g, trainable_translators),
        d_b: model.d_b.bind(g, trainable_discs),
        d_os: model.d_os.bind(g, trainable_discs),
        d_or: model.d_or.bind(g, trainable_discs),
    }
}

/// Every intermediate of one translation pass, as tape nodes.
///
/// All rain layers are in image-channel space so the additive identities
/// hold exactly: `o_in = b1 + r1`, `o_gen = b1 + r2`, `o_rec = b2 + r4`,
/// and `r3 = o_gen - b2`.
pub struct TranslationBundle {
    /// Domain of `o_in` (`o_gen` lives in the opposite domain).
    pub origin: Domain,
    pub o_in: NodeId,
    /// First decomposition: predicted background of `o_in`.
    pub b1: NodeId,
    /// Extracted rain `o_in - b1`.
    pub r1: NodeId,
    /// Translated rain (image channels).
    pub r2: NodeId,
    /// Generated cross-domain rainy image `b1 + r2`.
    pub o_gen: NodeId,
    /// Second decomposition: predicted background of `o_gen`.
    pub b2: NodeId,
    /// Rain extracted from the generated image, `o_gen - b2`.
    pub r3: NodeId,
    /// Rain translated back to the origin domain.
    pub r4: NodeId,
    /// Cycle reconstruction `b2 + r4`, compared against `o_in`.
    pub o_rec: NodeId,
}

/// Runs one rain translator on an image-space rain layer, reducing to
/// luminance and broadcasting back when the model is configured to.
fn rain_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    net: &Network<T>,
    bound: &Bound,
    rain: NodeId,
) -> Result<NodeId> {
    let channels = g.value(rain).shape()[1];
    match model.config.rain_channels {
        RainChannels::Luminance if channels > 1 => {
            let lum = g.channel_mean(rain)?;
            let translated = net.forward(g, bound, lum)?;
            g.broadcast_c(translated, channels)
        }
        _ => net.forward(g, bound, rain),
    }
}

/// One full translation pass over a rainy batch already on the tape.
pub fn translate<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    direction: TranslateDirection,
    o_in: NodeId,
) -> Result<TranslationBundle> {
    // (removal, translator) for the input domain, then for the generated one.
    let (f1, f1b, g1, g1b, f2, f2b, g2, g2b) = match direction {
        TranslateDirection::S2R => (
            &model.f_s, &mb.f_s, &model.g_s, &mb.g_s, &model.f_r, &mb.f_r, &model.g_r, &mb.g_r,
        ),
        TranslateDirection::R2S => (
            &model.f_r, &mb.f_r, &model.g_r, &mb.g_r, &model.f_s, &mb.f_s, &model.g_s, &mb.g_s,
        ),
    };
    let b1 = f1.forward(g, f1b, o_in)?;
    let r1 = g.sub(o_in, b1)?;
    let r2 = rain_forward(g, model, g1, g1b, r1)?;
    let o_gen = g.add(b1, r2)?;
    let b2 = f2.forward(g, f2b, o_gen)?;
    let r3 = g.sub(o_gen, b2)?;
    let r4 = rain_forward(g, model, g2, g2b, r3)?;
    let o_rec = g.add(b2, r4)?;
    Ok(TranslationBundle {
        origin: direction.source_domain(),
        o_in,
        b1,
        r1,
        r2,
        o_gen,
        b2,
        r3,
        r4,
        o_rec,
    })
}

/// Synthetic-to-real pass (`o_in` is synthetic-domain rainy).
pub fn s2r_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    o_s: NodeId,
) -> Result<TranslationBundle> {
    translate(g, model, mb, TranslateDirection::S2R, o_s)
}

/// Real-to-synthetic pass (`o_in` is real-domain rainy).
pub fn r2s_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &JrgrModel<T>,
    mb: &ModelBinding,
    o_r: NodeId,
) -> Result<TranslationBundle> {
    translate(g, model, mb, TranslateDirection::R2S, o_r)
}

// ----------------------------------------------------------------------
// Image-space inference wrappers
// ----------------------------------------------------------------------

/// Stacks same-shaped images into a `(n, c, h, w)` batch.
pub fn batch_from_images(imgs: &[ImageTensor]) -> Result<ArrayD<f32>> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::Data("cannot batch zero images".into()))?;
    let (c, h, w) = first.shape();
    let mut out = ndarray::Array4::<f32>::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        if img.shape() != (c, h, w) {
            return Err(Error::Dimension(format!(
                "batch images disagree: {:?} vs {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img.data());
    }
    Ok(out.into_dyn())
}

/// Splits a `(n, c, h, w)` batch back into images.
pub fn images_from_batch(batch: &ArrayD<f32>) -> Result<Vec<ImageTensor>> {
    let b4 = batch
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::Dimension(format!("expected 4-d batch, got {:?}", batch.shape())))?;
    (0..b4.dim().0)
        .map(|i| ImageTensor::from_array(b4.index_axis(Axis(0), i).to_owned()))
        .collect()
}

/// Runs a removal network on one image of arbitrary size: reflection-pads
/// to the network's stride alignment, predicts the background, crops back,
/// and clamps to the displayable range.
pub fn derain(net: &Network<f32>, align: usize, img: &ImageTensor) -> Result<ImageTensor> {
    let (_, h, w) = img.shape();
    let pad_b = (align - h % align) % align;
    let pad_r = (align - w % align) % align;
    let padded = if pad_b > 0 || pad_r > 0 {
        pad_reflect(img, pad_b, pad_r)?
    } else {
        img.clone()
    };
    let mut g = Graph::<f32>::new();
    let x = g.input(batch_from_images(std::slice::from_ref(&padded))?);
    let bound = net.bind(&mut g, false);
    let y = net.forward(&mut g, &bound, x)?;
    let out = images_from_batch(g.value(y))?;
    let full = out.into_iter().next().expect("one sample in, one out");
    Ok(crop_at(&full, h, w, 0, 0)?.clamped01())
}

/// Image-space mirror of [`TranslationBundle`] for evaluation and export.
#[derive(Debug, Clone)]
pub struct BundleImages {
    pub origin: Domain,
    pub o_in: Vec<ImageTensor>,
    pub b1: Vec<ImageTensor>,
    pub r1: Vec<ImageTensor>,
    pub r2: Vec<ImageTensor>,
    pub o_gen: Vec<ImageTensor>,
    pub b2: Vec<ImageTensor>,
    pub r3: Vec<ImageTensor>,
    pub r4: Vec<ImageTensor>,
    pub o_rec: Vec<ImageTensor>,
}

/// Runs a translation pass in inference mode over images (chunked to keep
/// activation memory flat). Inputs must already be stride-aligned.
pub fn run_bundle(
    model: &JrgrModel<f32>,
    direction: TranslateDirection,
    imgs: &[ImageTensor],
) -> Result<BundleImages> {
    let mut out = BundleImages {
        origin: direction.source_domain(),
        o_in: Vec::new(),
        b1: Vec::new(),
        r1: Vec::new(),
        r2: Vec::new(),
        o_gen: Vec::new(),
        b2: Vec::new(),
        r3: Vec::new(),
        r4: Vec::new(),
        o_rec: Vec::new(),
    };
    for chunk in imgs.chunks(8) {
        let mut g = Graph::<f32>::new();
        let mb = bind_model(&mut g, model, false, false);
        let o_in = g.input(batch_from_images(chunk)?);
        let bundle = translate(&mut g, model, &mb, direction, o_in)?;
        for (field, node) in [
            (&mut out.o_in, bundle.o_in),
            (&mut out.b1, bundle.b1),
            (&mut out.r1, bundle.r1),
            (&mut out.r2, bundle.r2),
            (&mut out.o_gen, bundle.o_gen),
            (&mut out.b2, bundle.b2),
            (&mut out.r3, bundle.r3),
            (&mut out.r4, bundle.r4),
            (&mut out.o_rec, bundle.o_rec),
        ] {
            field.extend(images_from_batch(g.value(node))?);
        }
    }
    Ok(out)
}
