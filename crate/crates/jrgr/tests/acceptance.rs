//! Acceptance gates for the whole workspace, one test per criterion.
//!
//! Each test prints a single `criterion N: PASS — ...` line with its
//! measured evidence (visible under `--nocapture`; the harness result line
//! carries the verdict otherwise). The heavyweight toy experiment — dataset
//! build plus three seeded training runs per strategy — is built once and
//! shared, with every component's wall-clock recorded at build time so the
//! runtime gates hold no matter which test touches the state first.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use jrgr::autodiff::{Graph, NodeId};
use jrgr::datasets::{load_dataset, load_test_pairs, PairedDataset, PairedSample, UnpairedDataset};
use jrgr::eval::{collect_rain_embeddings, psnr, ssim, RainClass};
use jrgr::imaging::ImageTensor;
use jrgr::losses::{
    full_objective, generator_losses, loss_adv_b_discriminator, loss_adv_b_generator, loss_adv_o,
    loss_cyc_b, loss_cyc_o, loss_mse_bs, AblationMask, AdvSide, GanMode, GeneratorLossNodes,
    LossWeights,
};
use jrgr::networks::{Arch, JrgrModel, ModelConfig, Network, RainChannels};
use jrgr::pipeline::{bind_model, derain, r2s_forward, s2r_forward, Domain, TranslationBundle};
use jrgr::rainsynth::{build_toy_datasets, RainDomainSpec, SceneSpec};
use jrgr::seed::SeedTree;
use jrgr::trainer::{
    joint_train, pretrain_removal, MetricsLog, MetricsRow, Strategy, TrainConfig, PHASE_JOINT,
    PHASE_PRETRAIN_FR, PHASE_PRETRAIN_FS,
};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::Rng;
use tempfile::{tempdir, TempDir};

const LN2: f64 = std::f64::consts::LN_2;

// ---------------------------------------------------------------------------
// Shared toy experiment
// ---------------------------------------------------------------------------

/// Training seeds for the three-seed medians; the first doubles as the root
/// seed of the determinism rerun.
const RUN_SEEDS: [u64; 3] = [1, 2, 3];
const TOY_COUNTS: (usize, usize, usize) = (200, 200, 50);

struct Toy {
    _dir: TempDir,
    root: PathBuf,
    paired: PairedDataset,
    unpaired: UnpairedDataset,
    test: Vec<PairedSample>,
    /// Mean PSNR of the untouched rainy test inputs against their cleans.
    rainy_psnr: f64,
    build_secs: f64,
}

fn build_toy_into(dir: &Path) -> PathBuf {
    build_toy_datasets(
        &RainDomainSpec::synthetic_preset(),
        &RainDomainSpec::real_preset(),
        &SceneSpec::default(),
        TOY_COUNTS,
        dir,
    )
    .expect("toy dataset build");
    dir.join("manifest.json")
}

fn load_toy(dir: TempDir, build_secs: f64) -> Toy {
    let root = dir.path().to_path_buf();
    let manifest = root.join("manifest.json");
    let (paired, unpaired) = load_dataset(&manifest, 64).expect("load toy datasets");
    let test = load_test_pairs(&manifest).expect("load toy test pairs");
    let rainy_psnr = mean_psnr(test.iter().map(|p| (&p.rainy, &p.clean)));
    Toy { _dir: dir, root, paired, unpaired, test, rainy_psnr, build_secs }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let started = Instant::now();
        let dir = tempdir().expect("tempdir");
        build_toy_into(dir.path());
        let build_secs = started.elapsed().as_secs_f64();
        load_toy(dir, build_secs)
    })
}

/// One trained run: final model, full metrics history, and test scores.
struct Run {
    model: JrgrModel<f32>,
    rows: Vec<MetricsRow>,
    /// Mean test PSNR of `f_r` restorations after joint training.
    restored: f64,
    /// Mean test PSNR of the pretrained `f_s` before any joint training
    /// (absent for strategies that skip that pretraining phase).
    baseline: Option<f64>,
    secs: f64,
}

fn run_strategy(data: &Toy, strategy: Strategy, seed: u64) -> Run {
    let started = Instant::now();
    let mut model =
        JrgrModel::<f32>::new(ModelConfig::default(), &SeedTree::new(seed)).expect("model init");
    let cfg = TrainConfig { strategy, seed, ..TrainConfig::default() };
    let mut log = MetricsLog::in_memory();
    pretrain_removal(&mut model, &data.paired, &cfg, &mut log).expect("pretraining");
    let stride = model.config.stride_multiple();
    let baseline = strategy
        .pretrains_fs()
        .then(|| mean_test_psnr(&model.f_s, stride, &data.test));
    joint_train(&mut model, &data.paired, &data.unpaired, &cfg, &mut log, 0, |_, _, _| Ok(()))
        .expect("joint training");
    let restored = mean_test_psnr(&model.f_r, stride, &data.test);
    Run { rows: log.rows().to_vec(), model, restored, baseline, secs: started.elapsed().as_secs_f64() }
}

fn proposed_runs() -> &'static Vec<Run> {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        RUN_SEEDS.iter().map(|&s| run_strategy(toy(), Strategy::Proposed, s)).collect()
    })
}

fn init1_runs() -> &'static Vec<Run> {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        RUN_SEEDS.iter().map(|&s| run_strategy(toy(), Strategy::Init1, s)).collect()
    })
}

fn mean_psnr<'a>(pairs: impl Iterator<Item = (&'a ImageTensor, &'a ImageTensor)>) -> f64 {
    let scores: Vec<f64> =
        pairs.map(|(a, b)| psnr(a, b).expect("psnr")).collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn mean_test_psnr(net: &Network<f32>, stride: usize, test: &[PairedSample]) -> f64 {
    let restored: Vec<ImageTensor> = test
        .iter()
        .map(|p| derain(net, stride, &p.rainy).expect("derain"))
        .collect();
    mean_psnr(restored.iter().zip(test).map(|(r, p)| (r, &p.clean)))
}

fn median3(values: [f64; 3]) -> f64 {
    let mut v = values;
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

fn max_abs_residual(sum: &ArrayD<f32>, expected: &ArrayD<f32>) -> f64 {
    sum.iter()
        .zip(expected)
        .map(|(&s, &e)| (f64::from(s) - f64::from(e)).abs())
        .fold(0.0, f64::max)
}

fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_array(Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>()))
        .expect("random image")
}

fn random_batch(rng: &mut impl Rng, shape: [usize; 4]) -> ArrayD<f32> {
    Array4::from_shape_fn(shape, |_| rng.random::<f32>()).into_dyn()
}

// ---------------------------------------------------------------------------
// 1. Additive identities across random bundles
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_additive_identities() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut bundles = 0u32;
    for model_idx in 0..10u64 {
        let config = ModelConfig {
            removal_base_channels: 2,
            removal_depth: 1,
            translator_base_channels: 2,
            translator_depth: 1,
            disc_base_channels: 2,
            rain_channels: if model_idx % 2 == 0 {
                RainChannels::Luminance
            } else {
                RainChannels::Full
            },
        };
        let model =
            JrgrModel::<f32>::new(config, &SeedTree::new(1000 + model_idx)).expect("model");
        let mut rng = SeedTree::new(model_idx).rng("bundle-inputs");
        for input_idx in 0..10 {
            let mut g = Graph::<f32>::new();
            let mb = bind_model(&mut g, &model, false, false);
            let x = g.input(random_batch(&mut rng, [1, 3, 16, 16]));
            let b = if input_idx % 2 == 0 {
                s2r_forward(&mut g, &model, &mb, x).expect("s2r")
            } else {
                r2s_forward(&mut g, &model, &mb, x).expect("r2s")
            };
            for (lhs, b_part, r_part) in
                [(b.o_in, b.b1, b.r1), (b.o_gen, b.b1, b.r2), (b.o_rec, b.b2, b.r4)]
            {
                let sum = g.value(b_part) + g.value(r_part);
                worst = worst.max(max_abs_residual(&sum, g.value(lhs)));
            }
            bundles += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(bundles, 100);
    assert!(worst < 1e-6, "additive identity residual {worst:.3e} >= 1e-6");
    assert!(secs < 10.0, "runtime {secs:.1}s >= 10s");
    println!(
        "criterion 1: PASS — 100 bundles, max |O - (B + R)| = {worst:.3e} (< 1e-6), {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// 2. Closed-form loss values
// ---------------------------------------------------------------------------

/// Constant-filled batch node.
fn const_input(g: &mut Graph<f64>, v: f64) -> NodeId {
    g.input(ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), v))
}

/// Bundle of constant tensors; fields not under test share a filler node.
fn const_bundle(g: &mut Graph<f64>, origin: Domain, vals: [f64; 5]) -> TranslationBundle {
    let [o_in, b1, o_gen, b2, o_rec] = vals.map(|v| const_input(g, v));
    let filler = const_input(g, 0.0);
    TranslationBundle {
        origin,
        o_in,
        b1,
        r1: filler,
        r2: filler,
        o_gen,
        b2,
        r3: filler,
        r4: filler,
        o_rec,
    }
}

fn zero_net(net: &mut Network<f64>) {
    for p in &mut net.params {
        p.value.fill(0.0);
    }
}

#[test]
fn criterion_2_loss_closed_forms() {
    let started = Instant::now();
    let mode = GanMode::NonSaturating;
    let weights = LossWeights::default();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    // A zeroed discriminator scores 0 everywhere, so every binary-cross-
    // entropy term collapses to ln 2.
    let mut model = JrgrModel::<f64>::miniature(&SeedTree::new(7));
    zero_net(&mut model.d_b);
    zero_net(&mut model.d_or);
    let mut g = Graph::<f64>::new();
    let mb = bind_model(&mut g, &model, false, false);
    let s2r = const_bundle(&mut g, Domain::Synthetic, [0.5; 5]);
    let r2s = const_bundle(&mut g, Domain::Real, [0.5; 5]);
    let adv_b = loss_adv_b_generator(&mut g, &model, &mb, &s2r, &r2s, mode).unwrap();
    checks.push(("generator adv_b at zeroed d_b", g.scalar(adv_b), LN2));
    let adv_or = loss_adv_o(
        &mut g,
        &model,
        &mb,
        Domain::Synthetic,
        AdvSide::Generator { o_gen: s2r.o_gen },
        mode,
    )
    .unwrap();
    checks.push(("generator adv_or at zeroed d_or", g.scalar(adv_or), LN2));

    // Discriminator side at the default alpha = 4 with four pooled fakes:
    // 4 * ln 2 (real) + 4 * ln 2 (fakes).
    let fakes: Vec<NodeId> = (0..4).map(|_| const_input(&mut g, 0.25)).collect();
    let real = const_input(&mut g, 0.75);
    let d_b =
        loss_adv_b_discriminator(&mut g, &model, &mb, &fakes, real, &weights, mode).unwrap();
    checks.push(("discriminator adv_b at zeroed d_b", g.scalar(d_b), 8.0 * LN2));

    // All-ones terms under the default weights: 10 * 3 + 1 * 4 + 10 * 1.
    let one = |g: &mut Graph<f64>| g.input(ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let terms = GeneratorLossNodes {
        adv_b: one(&mut g),
        adv_os: one(&mut g),
        adv_or: one(&mut g),
        cyc_os: one(&mut g),
        cyc_or: one(&mut g),
        cyc_bs: one(&mut g),
        cyc_br: one(&mut g),
        mse_bs: one(&mut g),
    };
    let total = full_objective(&mut g, &terms, &weights, &AblationMask::default()).unwrap();
    checks.push(("weighted total of all-ones terms", g.scalar(total), 44.0));

    // Constant offsets: |0.5 - 0.6| on the outer cycle, |0.5 - 0.9| on the
    // background cycle, and (0.5 - 0.4)^2 + 0 on the supervised term.
    let bundle = const_bundle(&mut g, Domain::Synthetic, [0.6, 0.5, 0.0, 0.4, 0.5]);
    let b_gt = const_input(&mut g, 0.4);
    let cyc_o = loss_cyc_o(&mut g, &bundle).unwrap();
    checks.push(("cycle L1 at constant offset 0.1", g.scalar(cyc_o), 0.1));
    let bundle_b = const_bundle(&mut g, Domain::Real, [0.0, 0.9, 0.0, 0.5, 0.0]);
    let cyc_b = loss_cyc_b(&mut g, &bundle_b).unwrap();
    checks.push(("background L1 at constant offset 0.4", g.scalar(cyc_b), 0.4));
    let mse = loss_mse_bs(&mut g, &bundle, b_gt).unwrap();
    checks.push(("supervised MSE at constant offset 0.1", g.scalar(mse), 0.01));

    let mut worst = 0.0f64;
    for (name, got, want) in &checks {
        let err = (got - want).abs();
        worst = worst.max(err);
        assert!(err < 1e-6, "{name}: got {got}, want {want} (err {err:.3e})");
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "runtime {secs:.1}s >= 5s");
    println!(
        "criterion 2: PASS — {} closed forms, max abs error = {worst:.3e} (< 1e-6), {secs:.2}s",
        checks.len()
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient oracle on the miniature model
// ---------------------------------------------------------------------------

/// Fixed data tensors shared by the analytic and finite-difference passes.
struct FdData {
    o_s: ArrayD<f64>,
    o_r: ArrayD<f64>,
    b_gt: ArrayD<f64>,
    db_fakes: Vec<ArrayD<f64>>,
    db_real: ArrayD<f64>,
    dos_real: ArrayD<f64>,
    dos_fake: ArrayD<f64>,
    dor_real: ArrayD<f64>,
    dor_fake: ArrayD<f64>,
}

impl FdData {
    fn new(seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).rng("fd-data");
        let mut t = || {
            ArrayD::from_shape_fn(IxDyn(&[2, 1, 6, 6]), |_| f64::from(rng.random::<f32>()))
        };
        Self {
            o_s: t(),
            o_r: t(),
            b_gt: t(),
            db_fakes: (0..4).map(|_| t()).collect(),
            db_real: t(),
            dos_real: t(),
            dos_fake: t(),
            dor_real: t(),
            dor_fake: t(),
        }
    }
}

const FD_TERM_NAMES: [&str; 11] = [
    "adv_b", "adv_os", "adv_or", "cyc_os", "cyc_or", "cyc_bs", "cyc_br", "mse_bs", "d_b", "d_os",
    "d_or",
];

/// Builds the full joint-iteration loss graph and returns the eleven term
/// nodes plus the parameter nodes of all seven networks (bound trainable).
fn build_fd_graph(
    model: &JrgrModel<f64>,
    data: &FdData,
) -> (Graph<f64>, Vec<Vec<NodeId>>, [NodeId; 11]) {
    let mode = GanMode::NonSaturating;
    let mut g = Graph::<f64>::new();
    let mb = bind_model(&mut g, model, true, true);
    let o_s = g.input(data.o_s.clone());
    let o_r = g.input(data.o_r.clone());
    let b_gt = g.input(data.b_gt.clone());
    let s2r = s2r_forward(&mut g, model, &mb, o_s).expect("s2r");
    let r2s = r2s_forward(&mut g, model, &mb, o_r).expect("r2s");
    let gen = generator_losses(&mut g, model, &mb, &s2r, &r2s, b_gt, mode).expect("generator");

    let fakes: Vec<NodeId> = data.db_fakes.iter().map(|a| g.input(a.clone())).collect();
    let real = g.input(data.db_real.clone());
    let d_b = loss_adv_b_discriminator(
        &mut g,
        model,
        &mb,
        &fakes,
        real,
        &LossWeights::default(),
        mode,
    )
    .expect("d_b");
    let dos_real = g.input(data.dos_real.clone());
    let dos_fake = g.input(data.dos_fake.clone());
    let d_os = loss_adv_o(
        &mut g,
        model,
        &mb,
        Domain::Real,
        AdvSide::Discriminator { real: dos_real, pooled_fake: dos_fake },
        mode,
    )
    .expect("d_os");
    let dor_real = g.input(data.dor_real.clone());
    let dor_fake = g.input(data.dor_fake.clone());
    let d_or = loss_adv_o(
        &mut g,
        model,
        &mb,
        Domain::Synthetic,
        AdvSide::Discriminator { real: dor_real, pooled_fake: dor_fake },
        mode,
    )
    .expect("d_or");

    let params = [&mb.f_s, &mb.f_r, &mb.g_s, &mb.g_r, &mb.d_b, &mb.d_os, &mb.d_or]
        .map(|b| b.ids.clone())
        .to_vec();
    let terms = [
        gen.adv_b, gen.adv_os, gen.adv_or, gen.cyc_os, gen.cyc_or, gen.cyc_bs, gen.cyc_br,
        gen.mse_bs, d_b, d_os, d_or,
    ];
    (g, params, terms)
}

#[test]
fn criterion_3_gradient_oracle() {
    let started = Instant::now();
    let model = JrgrModel::<f64>::miniature(&SeedTree::new(9));
    let data = FdData::new(8);

    // The four cycle terms take absolute values, whose derivative jumps at
    // zero: a residual element closer to zero than the probe can reach makes
    // the central difference measure the kink instead of the slope. The data
    // seed is chosen so every L1 residual clears the +-1e-5 probe window by
    // a wide margin, and the guard below keeps that choice honest.
    {
        let mut g = Graph::<f64>::new();
        let mb = bind_model(&mut g, &model, false, false);
        let xs = g.input(data.o_s.clone());
        let xr = g.input(data.o_r.clone());
        let s2r = s2r_forward(&mut g, &model, &mb, xs).expect("s2r");
        let r2s = r2s_forward(&mut g, &model, &mb, xr).expect("r2s");
        let mut clearance = f64::INFINITY;
        for (lhs, rhs) in [
            (s2r.b2, s2r.b1),
            (r2s.b2, r2s.b1),
            (s2r.o_rec, s2r.o_in),
            (r2s.o_rec, r2s.o_in),
        ] {
            for (&x, &y) in g.value(lhs).iter().zip(g.value(rhs)) {
                clearance = clearance.min((x - y).abs());
            }
        }
        assert!(clearance > 5e-4, "L1 residual {clearance:.3e} too close to the kink");
    }

    // Analytic gradients: one backward pass per loss term.
    let mut analytic: Vec<Vec<ArrayD<f64>>> = Vec::with_capacity(FD_TERM_NAMES.len());
    for t in 0..FD_TERM_NAMES.len() {
        let (mut g, params, terms) = build_fd_graph(&model, &data);
        g.backward(terms[t]).expect("backward");
        let grads = params
            .iter()
            .flatten()
            .map(|&id| {
                g.grad(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()))
            })
            .collect();
        analytic.push(grads);
    }

    // Central finite differences over every scalar parameter.
    let h = 1e-5;
    let flat: Vec<(usize, usize, IxDyn)> = model
        .networks()
        .iter()
        .enumerate()
        .flat_map(|(n, net)| {
            net.params.iter().enumerate().flat_map(move |(p, param)| {
                param.value.indexed_iter().map(move |(idx, _)| (n, p, idx)).collect::<Vec<_>>()
            })
        })
        .collect();

    let probe = |n: usize, p: usize, idx: &IxDyn, delta: f64| -> [f64; 11] {
        let mut m = model.clone();
        m.networks_mut()[n].params[p].value[idx] += delta;
        let (g, _, terms) = build_fd_graph(&m, &data);
        terms.map(|t| g.scalar(t))
    };

    let mut worst = 0.0f64;
    for (n, p, idx) in &flat {
        let plus = probe(*n, *p, idx, h);
        let minus = probe(*n, *p, idx, -h);
        for (t, name) in FD_TERM_NAMES.iter().enumerate() {
            let fd = (plus[t] - minus[t]) / (2.0 * h);
            let a = analytic[t][flat_param_offset(&model, *n, *p)][idx];
            let denom = a.abs().max(fd.abs());
            let err = (a - fd).abs();
            // Relative error, with an absolute floor so a pair of exact
            // zeros (terms that do not touch this parameter) compares clean.
            assert!(
                err <= 1e-4 * denom + 1e-8,
                "term {name}, net {n} param {p} idx {idx:?}: analytic {a:.6e} vs fd {fd:.6e}"
            );
            if denom > 1e-8 {
                worst = worst.max(err / denom);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "runtime {secs:.1}s >= 2min");
    println!(
        "criterion 3: PASS — 11 terms x {} parameters vs central differences (h = 1e-5), \
         worst relative error = {worst:.3e} (< 1e-4), {secs:.1}s",
        flat.len()
    );
}

/// Index of network `n`'s parameter `p` in the flattened per-term gradient
/// list (networks contribute their parameters in declaration order).
fn flat_param_offset(model: &JrgrModel<f64>, n: usize, p: usize) -> usize {
    model.networks().iter().take(n).map(|net| net.params.len()).sum::<usize>() + p
}

// ---------------------------------------------------------------------------
// 4. Convolution arithmetic
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_shape_arithmetic() {
    let started = Instant::now();
    let seeds = SeedTree::new(4);
    let disc = Network::<f32>::new(
        "d",
        Arch::PatchDisc { in_channels: 3, base_channels: 12 },
        &mut seeds.rng("disc"),
    );
    for (side, expected) in [(256usize, 30usize), (64, 6)] {
        let mut g = Graph::<f32>::new();
        let bound = disc.bind(&mut g, false);
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 3, side, side])));
        let y = disc.forward(&mut g, &bound, x).expect("disc forward");
        assert_eq!(
            g.value(y).shape(),
            [1, 1, expected, expected],
            "score map of a {side}px input"
        );
    }

    let unet = Network::<f32>::new(
        "u",
        Arch::UNet { in_channels: 3, out_channels: 3, base_channels: 12, depth: 3 },
        &mut seeds.rng("unet"),
    );
    for shape in [[2usize, 3, 64, 64], [1, 3, 40, 48]] {
        let mut g = Graph::<f32>::new();
        let bound = unet.bind(&mut g, false);
        let x = g.input(ArrayD::zeros(IxDyn(&shape)));
        let y = unet.forward(&mut g, &bound, x).expect("unet forward");
        assert_eq!(g.value(y).shape(), shape, "u-net output of a {shape:?} input");
    }

    // Odd input sizes round-trip through the reflect-pad + crop path.
    let mut rng = seeds.rng("derain");
    let img = random_image(&mut rng, 3, 65, 67);
    let restored = derain(&unet, 8, &img).expect("derain");
    assert_eq!(restored.shape(), (3, 65, 67));

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "runtime {secs:.1}s >= 10s");
    println!(
        "criterion 4: PASS — score maps 256->30x30 and 64->6x6, u-net preserves 64x64 and \
         40x48, derain round-trips 65x67, {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// 5. Toy domain-gap experiment
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_toy_domain_gap() {
    let data = toy();
    let runs = proposed_runs();

    let restored = median3([runs[0].restored, runs[1].restored, runs[2].restored]);
    let baselines: Vec<f64> = runs.iter().map(|r| r.baseline.expect("baseline")).collect();
    let baseline = median3([baselines[0], baselines[1], baselines[2]]);
    let rainy = data.rainy_psnr;
    let total_secs = data.build_secs + runs.iter().map(|r| r.secs).sum::<f64>();

    for (i, run) in runs.iter().enumerate() {
        println!(
            "  seed {}: restored {:.2} dB, pretrained-f_s baseline {:.2} dB ({:.0}s)",
            RUN_SEEDS[i],
            run.restored,
            baselines[i],
            run.secs
        );
    }
    assert!(
        restored >= rainy + 3.0,
        "median restored {restored:.2} dB < rainy input {rainy:.2} dB + 3 dB"
    );
    assert!(
        restored >= baseline + 0.5,
        "median restored {restored:.2} dB < pretrain-only baseline {baseline:.2} dB + 0.5 dB"
    );
    assert!(total_secs <= 1800.0, "experiment took {total_secs:.0}s > 30min");
    println!(
        "criterion 5: PASS — median restored {restored:.2} dB vs rainy {rainy:.2} dB \
         (gain {:.2} dB >= 3) and pretrain-only {baseline:.2} dB (gain {:.2} dB >= 0.5); \
         datasets + 3 runs in {:.0}s (<= 1800s)",
        restored - rainy,
        restored - baseline,
        total_secs
    );
}

// ---------------------------------------------------------------------------
// 6. Staged-training ablation
// ---------------------------------------------------------------------------

/// Number of rows per phase plus a check that phases appear in order.
fn phase_profile(rows: &[MetricsRow]) -> (usize, usize, usize) {
    let phase_rank = |p: &str| match p {
        PHASE_PRETRAIN_FS => 0,
        PHASE_PRETRAIN_FR => 1,
        PHASE_JOINT => 2,
        other => panic!("unexpected metrics phase {other}"),
    };
    let ranks: Vec<u8> = rows.iter().map(|r| phase_rank(&r.phase)).collect();
    assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "phases out of order");
    let count = |r: u8| ranks.iter().filter(|&&x| x == r).count();
    (count(0), count(1), count(2))
}

#[test]
fn criterion_6_staged_training_ablation() {
    let data = toy();
    let proposed = proposed_runs();
    let init1 = init1_runs();

    // Every documented phase must actually run: both pretraining phases for
    // the proposed strategy, f_s only for init-2, none for init-1. The toy
    // budget gives 25 iterations per epoch (200 samples, batch 8).
    for run in proposed {
        assert_eq!(phase_profile(&run.rows), (500, 500, 1250), "proposed phases");
    }
    for run in init1 {
        assert_eq!(phase_profile(&run.rows), (0, 0, 1250), "init-1 phases");
    }
    let micro = TrainConfig {
        strategy: Strategy::Init2,
        pretrain_epochs: 2,
        joint_epochs: 2,
        seed: RUN_SEEDS[0],
        ..TrainConfig::default()
    };
    let mut model =
        JrgrModel::<f32>::new(ModelConfig::default(), &SeedTree::new(RUN_SEEDS[0])).unwrap();
    let mut log = MetricsLog::in_memory();
    pretrain_removal(&mut model, &data.paired, &micro, &mut log).expect("init-2 pretraining");
    joint_train(&mut model, &data.paired, &data.unpaired, &micro, &mut log, 0, |_, _, _| Ok(()))
        .expect("init-2 joint");
    assert_eq!(phase_profile(log.rows()), (50, 0, 50), "init-2 phases");

    let med_proposed = median3([proposed[0].restored, proposed[1].restored, proposed[2].restored]);
    let med_init1 = median3([init1[0].restored, init1[1].restored, init1[2].restored]);
    assert!(
        med_proposed >= med_init1 - 0.2,
        "proposed median {med_proposed:.2} dB < init-1 median {med_init1:.2} dB - 0.2 dB"
    );
    println!(
        "criterion 6: PASS — toy medians: proposed {med_proposed:.2} dB vs init-1 \
         {med_init1:.2} dB (margin {:.2} dB >= -0.2); all three strategies ran their \
         documented phases; full-scale reference ordering (not gated): proposed 35.59 > \
         init-2 34.54 > init-1 33.97 dB",
        med_proposed - med_init1
    );
}

// ---------------------------------------------------------------------------
// 7. Rain-embedding alignment
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_rain_embedding_alignment() {
    let data = toy();
    let runs = proposed_runs();
    // The run with the median test PSNR represents the trained model.
    let mut order: Vec<&Run> = runs.iter().collect();
    order.sort_by(|a, b| a.restored.partial_cmp(&b.restored).unwrap());
    let model = &order[1].model;

    let started = Instant::now();
    let embeddings =
        collect_rain_embeddings(model, &data.paired, &data.unpaired, 200).expect("embeddings");
    let table = embeddings.centroid_distance_table();
    let idx = |c: RainClass| RainClass::ALL.iter().position(|&x| x == c).unwrap();
    let ds = idx(RainClass::DecomposedSynthetic);
    let gs = idx(RainClass::GeneratedSynthetic);
    let dr = idx(RainClass::DecomposedReal);
    let gr = idx(RainClass::GeneratedReal);

    let real_pair = table[dr][gr];
    let cross = table[dr][ds];
    let syn_pair = table[ds][gs];
    assert!(
        real_pair < cross,
        "decomposed-real is closer to decomposed-syn ({cross:.2}) than to generated-real \
         ({real_pair:.2})"
    );
    assert!(
        syn_pair < cross,
        "decomposed-syn is closer to decomposed-real ({cross:.2}) than to generated-syn \
         ({syn_pair:.2})"
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "runtime {secs:.1}s >= 2min");
    println!(
        "criterion 7: PASS — centroid distances: real pair {real_pair:.2} and synthetic pair \
         {syn_pair:.2} both < cross-domain {cross:.2}; 200 points/class in {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// 8. Metric cross-validation
// ---------------------------------------------------------------------------

/// Reference PSNR from the definition: clamp to [0, 1], mean squared error
/// in double precision over all channels, 10 log10(1/mse) capped at 100 dB.
fn oracle_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x.clamp(0.0, 1.0)) - f64::from(y.clamp(0.0, 1.0));
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

/// Reference SSIM built independently: double-precision channel-mean
/// grayscale, an explicit 11x11 Gaussian kernel (sigma 1.5) over valid
/// positions, and centered-moment window statistics.
fn oracle_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    const WIN: usize = 11;
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    let gray = |img: &ImageTensor| -> Vec<Vec<f64>> {
        let (c, h, w) = img.shape();
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        (0..c)
                            .map(|ch| f64::from(img.data()[[ch, y, x]].clamp(0.0, 1.0)))
                            .sum::<f64>()
                            / c as f64
                    })
                    .collect()
            })
            .collect()
    };
    let mut kernel = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in &mut kernel {
        for v in row {
            *v /= total;
        }
    }

    let ga = gray(a);
    let gb = gray(b);
    let (_, h, w) = a.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..=(h - WIN) {
        for x in 0..=(w - WIN) {
            let mut ma = 0.0;
            let mut mb = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    ma += k * ga[y + i][x + j];
                    mb += k * gb[y + i][x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (i, row) in kernel.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let da = ga[y + i][x + j] - ma;
                    let db = gb[y + i][x + j] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn criterion_8_metric_cross_validation() {
    let mut rng = SeedTree::new(8).rng("metric-pairs");
    let mut worst_psnr = 0.0f64;
    let mut worst_ssim = 0.0f64;
    for _ in 0..20 {
        let c = if rng.random::<bool>() { 3 } else { 1 };
        let h = rng.random_range(11..40);
        let w = rng.random_range(11..40);
        let a = random_image(&mut rng, c, h, w);
        let b = random_image(&mut rng, c, h, w);
        let psnr_err = (psnr(&a, &b).unwrap() - oracle_psnr(&a, &b)).abs();
        let ssim_err = (ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs();
        worst_psnr = worst_psnr.max(psnr_err);
        worst_ssim = worst_ssim.max(ssim_err);
    }
    assert!(worst_psnr < 1e-6, "psnr oracle disagreement {worst_psnr:.3e} >= 1e-6");
    assert!(worst_ssim < 1e-4, "ssim oracle disagreement {worst_ssim:.3e} >= 1e-4");

    let x = random_image(&mut rng, 3, 24, 24);
    let self_score = ssim(&x, &x).unwrap();
    assert_eq!(self_score, 1.0, "ssim of an image with itself must be exactly 1");

    let dark = ImageTensor::from_array(Array3::from_elem((3, 16, 16), 0.0)).unwrap();
    let offset = ImageTensor::from_array(Array3::from_elem((3, 16, 16), 0.1)).unwrap();
    let twenty = psnr(&dark, &offset).unwrap();
    assert!((twenty - 20.0).abs() < 1e-6, "0.1-offset case gave {twenty} dB");

    println!(
        "criterion 8: PASS — 20 pairs: max |psnr - oracle| = {worst_psnr:.3e} (< 1e-6), \
         max |ssim - oracle| = {worst_ssim:.3e} (< 1e-4); ssim(x, x) = 1 exactly; \
         0.1-offset PSNR = {twenty:.9} dB"
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism
// ---------------------------------------------------------------------------

/// All files under `dir`, as paths relative to it, sorted.
fn file_tree(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).expect("relative path").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let first = toy();
    let first_run = &proposed_runs()[0];

    // A second dataset build from the same corpus recipe must be
    // byte-for-byte identical, manifest included.
    let dir = tempdir().expect("tempdir");
    build_toy_into(dir.path());
    let tree_a = file_tree(&first.root);
    let tree_b = file_tree(dir.path());
    assert_eq!(tree_a, tree_b, "dataset file listings differ");
    for rel in &tree_a {
        let a = std::fs::read(first.root.join(rel)).expect("read first tree");
        let b = std::fs::read(dir.path().join(rel)).expect("read second tree");
        assert_eq!(a, b, "dataset file {} differs between builds", rel.display());
    }

    // Retraining from the same root seed on the rebuilt data must land on
    // the same final test PSNR.
    let second = load_toy(dir, 0.0);
    let second_run = run_strategy(&second, Strategy::Proposed, RUN_SEEDS[0]);
    let delta = (first_run.restored - second_run.restored).abs();
    assert!(
        delta < 0.01,
        "reruns disagree: {:.6} dB vs {:.6} dB (|delta| = {delta:.6})",
        first_run.restored,
        second_run.restored
    );
    println!(
        "criterion 9: PASS — {} dataset files byte-identical across builds; repeated run \
         differs by {delta:.6} dB (< 0.01)",
        tree_a.len()
    );
}
