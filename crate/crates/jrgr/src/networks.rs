//! Network architectures: removal/translation U-Nets, PatchGAN
//! discriminators, and the seven-network model bundle.
//!
//! All seven networks share one representation — a flat, ordered parameter
//! list plus an architecture tag — so the trainer can bind any of them into
//! an autodiff [`Graph`] as trainable or frozen leaves. A `SingleConv`
//! architecture stands in for any network in the double-precision gradient
//! oracle, and `Identity` supports exactness tests of the translation
//! pipeline.

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::seed::SeedTree;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// How rain layers are represented between disentangle and entangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RainChannels {
    /// Rain is reduced to a single luminance channel before translation and
    /// broadcast back to image channels afterwards (rain is near-achromatic).
    Luminance,
    /// Rain keeps full image channels through translation.
    Full,
}

/// Hyperparameters for the seven-network model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base channel width of the removal U-Nets (`f_s`, `f_r`).
    pub removal_base_channels: usize,
    /// Encoder depth (number of stride-2 stages) of the removal U-Nets.
    pub removal_depth: usize,
    /// Base channel width of the rain-translation U-Nets (`g_s`, `g_r`).
    pub translator_base_channels: usize,
    /// Encoder depth of the rain-translation U-Nets.
    pub translator_depth: usize,
    /// Base channel width of the PatchGAN discriminators.
    pub disc_base_channels: usize,
    pub rain_channels: RainChannels,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            removal_base_channels: 12,
            removal_depth: 3,
            translator_base_channels: 8,
            translator_depth: 2,
            disc_base_channels: 12,
            rain_channels: RainChannels::Luminance,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("removal_base_channels", self.removal_base_channels),
            ("removal_depth", self.removal_depth),
            ("translator_base_channels", self.translator_base_channels),
            ("translator_depth", self.translator_depth),
            ("disc_base_channels", self.disc_base_channels),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{what} must be >= 1")));
            }
        }
        if self.removal_depth > 6 || self.translator_depth > 6 {
            return Err(Error::Validation(
                "network depth > 6 is unsupported (inputs would need 64-pixel alignment)".into(),
            ));
        }
        Ok(())
    }

    /// Spatial alignment the translation pipeline requires of its inputs.
    pub fn stride_multiple(&self) -> usize {
        1 << self.removal_depth.max(self.translator_depth)
    }

    /// Channel count of rain layers between disentangle and entangle.
    pub fn rain_layer_channels(&self) -> usize {
        match self.rain_channels {
            RainChannels::Luminance => 1,
            RainChannels::Full => 3,
        }
    }
}

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    /// Encoder-decoder with skip concatenations and a full-resolution skip
    /// of the raw input just before the linear head. Stride-2 3x3 encoder
    /// convs, 2x2 stride-2 transposed-conv upsampling, instance norm, leaky
    /// ReLU. Requires spatial dims divisible by `2^depth`. When the input
    /// and output channel counts match, the head is residual: the network
    /// predicts a correction added to its input, so a freshly initialized
    /// model is close to the identity map and training only has to learn
    /// the (small) rain-dependent part.
    UNet {
        in_channels: usize,
        out_channels: usize,
        base_channels: usize,
        depth: usize,
    },
    /// 4x4 PatchGAN: three stride-2 convs, one stride-1 conv, and a stride-1
    /// 1-channel head; no norm on the first layer, instance norm after.
    /// Maps 256x256 -> 30x30 and 64x64 -> 6x6 score maps.
    PatchDisc { in_channels: usize, base_channels: usize },
    /// One linear 3x3 conv — the miniature stand-in used by the gradient
    /// oracle, where every network must stay cheap and smooth.
    SingleConv { in_channels: usize, out_channels: usize },
    /// Parameterless pass-through for pipeline exactness tests.
    Identity,
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// A network: architecture tag plus flat ordered parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub name: String,
    pub arch: Arch,
    pub params: Vec<Param<T>>,
}

/// Leaky-ReLU slope used throughout.
pub const LRELU_SLOPE: f64 = 0.2;
/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

fn init_weight<T: Scalar>(shape: &[usize], rng: &mut (impl Rng + ?Sized)) -> ArrayD<T> {
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f64(normal.sample(rng)))
}

impl<T: Scalar> Network<T> {
    /// Builds a network with Gaussian(0, 0.02) weights and zero biases drawn
    /// from `rng` in a fixed architecture-walk order.
    pub fn new(name: impl Into<String>, arch: Arch, rng: &mut impl Rng) -> Self {
        fn conv<T: Scalar>(
            params: &mut Vec<Param<T>>,
            pname: &str,
            c_out: usize,
            c_in: usize,
            k: usize,
            rng: &mut (impl Rng + ?Sized),
        ) {
            params.push(Param {
                name: format!("{pname}.weight"),
                value: init_weight(&[c_out, c_in, k, k], rng),
            });
            params.push(Param {
                name: format!("{pname}.bias"),
                value: ArrayD::zeros(IxDyn(&[c_out])),
            });
        }
        // Transposed-conv weights are (c_in, c_out, k, k).
        fn convt<T: Scalar>(
            params: &mut Vec<Param<T>>,
            pname: &str,
            c_in: usize,
            c_out: usize,
            k: usize,
            rng: &mut (impl Rng + ?Sized),
        ) {
            params.push(Param {
                name: format!("{pname}.weight"),
                value: init_weight(&[c_in, c_out, k, k], rng),
            });
            params.push(Param {
                name: format!("{pname}.bias"),
                value: ArrayD::zeros(IxDyn(&[c_out])),
            });
        }
        let mut params = Vec::new();
        match arch {
            Arch::UNet {
                in_channels,
                out_channels,
                base_channels,
                depth,
            } => {
                let ch = |i: usize| base_channels << i;
                let mut prev = in_channels;
                for i in 0..depth {
                    conv(&mut params, &format!("enc{i}"), ch(i), prev, 3, rng);
                    prev = ch(i);
                }
                conv(&mut params, "mid", prev, prev, 3, rng);
                for i in (1..depth).rev() {
                    convt(&mut params, &format!("up{i}"), ch(i), ch(i - 1), 2, rng);
                    conv(&mut params, &format!("fuse{i}"), ch(i - 1), 2 * ch(i - 1), 3, rng);
                }
                convt(&mut params, "up0", base_channels, base_channels, 2, rng);
                conv(&mut params, "head", out_channels, base_channels + in_channels, 3, rng);
            }
            Arch::PatchDisc {
                in_channels,
                base_channels,
            } => {
                let b = base_channels;
                conv(&mut params, "layer0", b, in_channels, 4, rng);
                conv(&mut params, "layer1", 2 * b, b, 4, rng);
                conv(&mut params, "layer2", 4 * b, 2 * b, 4, rng);
                conv(&mut params, "layer3", 8 * b, 4 * b, 4, rng);
                conv(&mut params, "head", 1, 8 * b, 4, rng);
            }
            Arch::SingleConv {
                in_channels,
                out_channels,
            } => {
                conv(&mut params, "conv", out_channels, in_channels, 3, rng);
            }
            Arch::Identity => {}
        }
        Self {
            name: name.into(),
            arch,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts this network's parameters into `g` — as trainable leaves if
    /// `trainable`, otherwise as frozen constants that receive no gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        Bound { ids }
    }

    /// Runs the network on `x` inside `g`, consuming `bound`'s parameter ids
    /// in the same order [`Network::new`] created them.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let mut next = bound.ids.iter().copied();
        let mut take = || -> Result<(NodeId, NodeId)> {
            let w = next.next();
            let b = next.next();
            match (w, b) {
                (Some(w), Some(b)) => Ok((w, b)),
                _ => Err(Error::Dimension(format!(
                    "network {} bound with too few parameters",
                    self.name
                ))),
            }
        };
        match &self.arch {
            Arch::UNet {
                in_channels,
                out_channels,
                depth,
                ..
            } => {
                let depth = *depth;
                let residual = in_channels == out_channels;
                let (_, _, h, w) = {
                    let v = g.value(x);
                    if v.ndim() != 4 {
                        return Err(Error::Dimension(format!(
                            "network {} expects (n, c, h, w) input",
                            self.name
                        )));
                    }
                    (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3])
                };
                let align = 1usize << depth;
                if h % align != 0 || w % align != 0 {
                    return Err(Error::Dimension(format!(
                        "input {h}x{w} not divisible by {align} (U-Net depth {depth})"
                    )));
                }
                let x0 = x;
                let mut skips = Vec::new();
                let mut cur = x;
                for i in 0..depth {
                    let (wt, bs) = take()?;
                    cur = g.conv2d(cur, wt, Some(bs), 2, 1)?;
                    cur = g.instance_norm(cur, NORM_EPS)?;
                    cur = g.leaky_relu(cur, LRELU_SLOPE);
                    if i < depth - 1 {
                        skips.push(cur);
                    }
                }
                let (wt, bs) = take()?;
                cur = g.conv2d(cur, wt, Some(bs), 1, 1)?;
                cur = g.instance_norm(cur, NORM_EPS)?;
                cur = g.leaky_relu(cur, LRELU_SLOPE);
                for i in (1..depth).rev() {
                    let (wt, bs) = take()?;
                    cur = g.conv_transpose2d(cur, wt, Some(bs), 2, 0)?;
                    cur = g.instance_norm(cur, NORM_EPS)?;
                    cur = g.leaky_relu(cur, LRELU_SLOPE);
                    cur = g.concat_c(cur, skips[i - 1])?;
                    let (wt, bs) = take()?;
                    cur = g.conv2d(cur, wt, Some(bs), 1, 1)?;
                    cur = g.instance_norm(cur, NORM_EPS)?;
                    cur = g.leaky_relu(cur, LRELU_SLOPE);
                }
                let (wt, bs) = take()?;
                cur = g.conv_transpose2d(cur, wt, Some(bs), 2, 0)?;
                cur = g.instance_norm(cur, NORM_EPS)?;
                cur = g.leaky_relu(cur, LRELU_SLOPE);
                cur = g.concat_c(cur, x0)?;
                let (wt, bs) = take()?;
                let head = g.conv2d(cur, wt, Some(bs), 1, 1)?;
                if residual {
                    g.add(head, x0)
                } else {
                    Ok(head)
                }
            }
            Arch::PatchDisc { .. } => {
                let (wt, bs) = take()?;
                let mut cur = g.conv2d(x, wt, Some(bs), 2, 1)?;
                cur = g.leaky_relu(cur, LRELU_SLOPE);
                for _ in 0..2 {
                    let (wt, bs) = take()?;
                    cur = g.conv2d(cur, wt, Some(bs), 2, 1)?;
                    cur = g.instance_norm(cur, NORM_EPS)?;
                    cur = g.leaky_relu(cur, LRELU_SLOPE);
                }
                let (wt, bs) = take()?;
                cur = g.conv2d(cur, wt, Some(bs), 1, 1)?;
                cur = g.instance_norm(cur, NORM_EPS)?;
                cur = g.leaky_relu(cur, LRELU_SLOPE);
                let (wt, bs) = take()?;
                g.conv2d(cur, wt, Some(bs), 1, 1)
            }
            Arch::SingleConv { .. } => {
                let (wt, bs) = take()?;
                g.conv2d(x, wt, Some(bs), 1, 1)
            }
            Arch::Identity => Ok(x),
        }
    }
}

/// Parameter node ids of one network bound into a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// The seven networks: two removal U-Nets, two rain translators, and three
/// discriminators (backgrounds, synthetic-domain rainy, real-domain rainy).
#[derive(Debug, Clone)]
pub struct JrgrModel<T: Scalar> {
    pub f_s: Network<T>,
    pub f_r: Network<T>,
    pub g_s: Network<T>,
    pub g_r: Network<T>,
    pub d_b: Network<T>,
    pub d_os: Network<T>,
    pub d_or: Network<T>,
    pub config: ModelConfig,
}

/// Stable iteration order of the seven networks (checkpoints, optimizers).
pub const NETWORK_NAMES: [&str; 7] = ["f_s", "f_r", "g_s", "g_r", "d_b", "d_os", "d_or"];

impl<T: Scalar> JrgrModel<T> {
    /// Initializes all seven networks, one seed stream per network so the
    /// init of any network is independent of the others' sizes.
    pub fn new(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        config.validate()?;
        let removal = Arch::UNet {
            in_channels: 3,
            out_channels: 3,
            base_channels: config.removal_base_channels,
            depth: config.removal_depth,
        };
        let rain_ch = config.rain_layer_channels();
        let translator = Arch::UNet {
            in_channels: rain_ch,
            out_channels: rain_ch,
            base_channels: config.translator_base_channels,
            depth: config.translator_depth,
        };
        let disc = Arch::PatchDisc {
            in_channels: 3,
            base_channels: config.disc_base_channels,
        };
        let net = |name: &str, arch: Arch| {
            Network::new(name, arch, &mut seeds.rng(&format!("init/{name}")))
        };
        Ok(Self {
            f_s: net("f_s", removal.clone()),
            f_r: net("f_r", removal),
            g_s: net("g_s", translator.clone()),
            g_r: net("g_r", translator),
            d_b: net("d_b", disc.clone()),
            d_os: net("d_os", disc.clone()),
            d_or: net("d_or", disc),
            config,
        })
    }

    /// Miniature stand-in for the gradient oracle: every network is a single
    /// linear 3x3 conv over 1-channel images.
    pub fn miniature(seeds: &SeedTree) -> Self {
        let config = ModelConfig {
            removal_base_channels: 1,
            removal_depth: 1,
            translator_base_channels: 1,
            translator_depth: 1,
            disc_base_channels: 1,
            rain_channels: RainChannels::Luminance,
        };
        let sc = Arch::SingleConv {
            in_channels: 1,
            out_channels: 1,
        };
        let net = |name: &str| {
            Network::new(name, sc.clone(), &mut seeds.rng(&format!("init/{name}")))
        };
        Self {
            f_s: net("f_s"),
            f_r: net("f_r"),
            g_s: net("g_s"),
            g_r: net("g_r"),
            d_b: net("d_b"),
            d_os: net("d_os"),
            d_or: net("d_or"),
            config,
        }
    }

    /// Image channel count the model operates on (1 for the miniature).
    pub fn image_channels(&self) -> usize {
        match self.f_s.arch {
            Arch::UNet { in_channels, .. } | Arch::SingleConv { in_channels, .. } => in_channels,
            _ => 3,
        }
    }

    pub fn networks(&self) -> [&Network<T>; 7] {
        [
            &self.f_s, &self.f_r, &self.g_s, &self.g_r, &self.d_b, &self.d_os, &self.d_or,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network<T>; 7] {
        [
            &mut self.f_s,
            &mut self.f_r,
            &mut self.g_s,
            &mut self.g_r,
            &mut self.d_b,
            &mut self.d_os,
            &mut self.d_or,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn forward_once(net: &Network<f32>, shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = crate::seed::rng_from_seed(seed);
        let x = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f32>());
        let mut g = Graph::new();
        let xid = g.input(x);
        let bound = net.bind(&mut g, false);
        let y = net.forward(&mut g, &bound, xid).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn parameter_counts_match_fixtures() {
        let seeds = SeedTree::new(7);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        assert_eq!(model.f_s.param_count(), 53_940);
        assert_eq!(model.f_r.param_count(), 53_940);
        assert_eq!(model.g_s.param_count(), 5_594);
        assert_eq!(model.g_r.param_count(), 5_594);
        assert_eq!(model.d_b.param_count(), 99_061);
        assert_eq!(model.param_count(), 416_251);

        let wide = ModelConfig {
            removal_base_channels: 16,
            disc_base_channels: 16,
            ..ModelConfig::default()
        };
        let model = JrgrModel::<f32>::new(wide, &seeds).unwrap();
        assert_eq!(model.f_s.param_count(), 95_444);
        assert_eq!(model.d_b.param_count(), 175_089);
        assert_eq!(model.param_count(), 727_343);

        let full = ModelConfig {
            rain_channels: RainChannels::Full,
            ..ModelConfig::default()
        };
        let model = JrgrModel::<f32>::new(full, &seeds).unwrap();
        assert_eq!(model.g_s.param_count(), 5_956);
    }

    #[test]
    fn disc_score_map_shapes() {
        let seeds = SeedTree::new(1);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        let y = forward_once(&model.d_b, &[1, 3, 256, 256], 1);
        assert_eq!(y.shape(), &[1, 1, 30, 30]);
        let y = forward_once(&model.d_b, &[2, 3, 64, 64], 2);
        assert_eq!(y.shape(), &[2, 1, 6, 6]);
    }

    #[test]
    fn unet_preserves_shape() {
        let seeds = SeedTree::new(2);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        let y = forward_once(&model.f_s, &[2, 3, 64, 64], 3);
        assert_eq!(y.shape(), &[2, 3, 64, 64]);
        let y = forward_once(&model.g_s, &[1, 1, 32, 32], 4);
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn unet_is_near_identity_at_init() {
        // The residual head means a freshly initialized removal network
        // should barely perturb its input; rain correction is learned, not
        // baked in. The perturbation comes only from the N(0, 0.02) head.
        let seeds = SeedTree::new(21);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        let mut rng = crate::seed::rng_from_seed(9);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 32, 32]), |_| rng.random::<f32>());
        let mut g = Graph::new();
        let xid = g.input(x.clone());
        let bound = model.f_r.bind(&mut g, false);
        let y = model.f_r.forward(&mut g, &bound, xid).unwrap();
        let diff = (g.value(y) - &x).mapv(|d| d * d).mean().unwrap();
        assert!(diff < 0.05, "init output strays from input: mse {diff}");
    }

    #[test]
    fn unet_rejects_unaligned_input() {
        let seeds = SeedTree::new(3);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 3, 65, 64])));
        let bound = model.f_s.bind(&mut g, false);
        assert!(model.f_s.forward(&mut g, &bound, x).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let a = JrgrModel::<f32>::new(ModelConfig::default(), &SeedTree::new(11)).unwrap();
        let b = JrgrModel::<f32>::new(ModelConfig::default(), &SeedTree::new(11)).unwrap();
        let c = JrgrModel::<f32>::new(ModelConfig::default(), &SeedTree::new(12)).unwrap();
        for (x, y) in a.networks().iter().zip(b.networks().iter()) {
            for (p, q) in x.params.iter().zip(y.params.iter()) {
                assert_eq!(p.name, q.name);
                assert_eq!(p.value, q.value);
            }
        }
        assert_ne!(a.f_s.params[0].value, c.f_s.params[0].value);
        // Different networks of one model must not share weights.
        assert_ne!(a.f_s.params[0].value, a.f_r.params[0].value);
    }

    #[test]
    fn init_distribution_statistics() {
        let seeds = SeedTree::new(4);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        // Biases exactly zero.
        for p in &model.f_s.params {
            if p.name.ends_with(".bias") {
                assert!(p.value.iter().all(|&v| v == 0.0), "{} nonzero", p.name);
            }
        }
        // Largest weight tensor: sample std within 5% of 0.02.
        let w = model
            .f_s
            .params
            .iter()
            .max_by_key(|p| p.value.len())
            .unwrap();
        let n = w.value.len() as f64;
        let mean: f64 = w.value.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var: f64 = w
            .value
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() < 0.05 * INIT_STD,
            "weight std {std} far from {INIT_STD}"
        );
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt() + 1e-4);
    }

    #[test]
    fn forward_is_deterministic() {
        let seeds = SeedTree::new(5);
        let model = JrgrModel::<f32>::new(ModelConfig::default(), &seeds).unwrap();
        let a = forward_once(&model.f_r, &[1, 3, 32, 32], 9);
        let b = forward_once(&model.f_r, &[1, 3, 32, 32], 9);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_arch_passes_through() {
        let mut rng = crate::seed::rng_from_seed(6);
        let net: Network<f32> = Network::new("id", Arch::Identity, &mut rng);
        assert_eq!(net.param_count(), 0);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.random::<f32>());
        let mut g = Graph::new();
        let xid = g.input(x.clone());
        let bound = net.bind(&mut g, true);
        let y = net.forward(&mut g, &bound, xid).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn miniature_is_single_conv_per_network() {
        let model = JrgrModel::<f64>::miniature(&SeedTree::new(8));
        for net in model.networks() {
            assert_eq!(net.params.len(), 2);
            assert_eq!(net.params[0].value.shape(), &[1, 1, 3, 3]);
        }
        assert_eq!(model.image_channels(), 1);
        let mut g = Graph::<f64>::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.5));
        let bound = model.f_s.bind(&mut g, true);
        let y = model.f_s.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 8, 8]);
    }
}
