//! Desk-scale training of [`ToyNet`] under the SSI-stage loss recipes and the
//! SI-stage objective, with held-out evaluation after every epoch.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::align::align_mean_scale;
use crate::error::{invalid_arg, Result};
use crate::grid::{resize_grid, CameraIntrinsics, MultiGrid, NormalGrid, ScalarGrid, ValidMask};
use crate::losses::{pair_term, si_net_loss, ssi_stage_loss, LossReport, LossWeights, PairLossKind, SsiStageConfig, DEFAULT_SCALES};
use crate::metrics::{evaluate_all, EvalConfig, EvalMode, PredSpace};
use crate::pipeline::{assemble_si_input, fix_gt_scale, resize_area};
use crate::sampling::{sample_pairs, PairSampleConfig};
use crate::synth::{corrupt, scene_batch, Corruption, Scene};
use crate::toy_model::{AdamConfig, AdamState, OutputActivation, ToyConfig, ToyNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    Ssi,
    Ranking,
    SsiRanking,
    SsiSo,
    Si,
}

impl Recipe {
    pub const SSI_STAGE: [Recipe; 4] = [Recipe::Ssi, Recipe::Ranking, Recipe::SsiRanking, Recipe::SsiSo];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Ssi => "ssi",
            Recipe::Ranking => "ranking",
            Recipe::SsiRanking => "ssi-ranking",
            Recipe::SsiSo => "ssi-so",
            Recipe::Si => "si",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Recipe::Ssi, Recipe::Ranking, Recipe::SsiRanking, Recipe::SsiSo, Recipe::Si]
            .into_iter()
            .find(|r| r.name() == s)
            .map_or_else(|| invalid_arg(format!("unknown recipe {s:?}")), Ok)
    }

    /// SSI-stage objective; gradient matching is part of every recipe.
    fn stage_config(self, cfg: &TrainConfig, pairs: PairSampleConfig) -> SsiStageConfig {
        let w = &cfg.weights;
        let base = SsiStageConfig::new(w, pairs);
        match self {
            Recipe::Ssi => SsiStageConfig { pair_weight: 0.0, ..base },
            Recipe::Ranking => SsiStageConfig { ssi_weight: 0.0, pair_kind: PairLossKind::Ranking, ..base },
            Recipe::SsiRanking => SsiStageConfig { pair_kind: PairLossKind::Ranking, ..base },
            Recipe::SsiSo | Recipe::Si => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub pair_count: usize,
    pub delta: f64,
    pub num_scales: usize,
    /// SI recipe only: train the RGB-only twin.
    pub rgb_only: bool,
    pub eval_pairs: usize,
}

impl TrainConfig {
    pub fn new(recipe: Recipe, epochs: usize, seed: u64) -> Self {
        Self {
            recipe,
            epochs,
            seed,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            pair_count: 2500,
            delta: 0.01,
            num_scales: DEFAULT_SCALES,
            rgb_only: false,
            eval_pairs: 5000,
        }
    }

    pub fn net_config(&self) -> ToyConfig {
        match self.recipe {
            Recipe::Si => ToyConfig {
                output: OutputActivation::Softplus,
                ..ToyConfig::with_input(if self.rgb_only { 3 } else { 5 })
            },
            _ => ToyConfig::with_input(3),
        }
    }
}

/// One training or held-out example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: MultiGrid,
    /// Normalized disparity (SSI stage) or scale-fixed inverse depth (SI stage).
    pub target: ScalarGrid,
    pub mask: ValidMask,
    pub gt_depth: ScalarGrid,
    pub gt_normals: NormalGrid,
    pub intrinsics: CameraIntrinsics,
}

fn normalized_disparity(scene: &Scene) -> ScalarGrid {
    let q = scene.disparity();
    let (lo, hi) = q.min_max();
    let span = (hi - lo).max(1e-12);
    q.map(|v| (v - lo) / span).expect("finite")
}

pub fn ssi_sample(scene: &Scene) -> TrainSample {
    TrainSample {
        input: scene.rgb.clone(),
        target: normalized_disparity(scene),
        mask: scene.mask.clone(),
        gt_depth: scene.depth.clone(),
        gt_normals: scene.normals.clone(),
        intrinsics: scene.intrinsics,
    }
}

/// Stand-ins for SSI network outputs: a coarse, blurred estimate and a
/// sharp, noisier one, each under its own random affine map.
pub fn synthetic_ssi_inputs(scene: &Scene, seed: u64) -> Result<(ScalarGrid, ScalarGrid)> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = normalized_disparity(scene);
    let (w, h) = (n.width(), n.height());
    let coarse = resize_area(&n, (w / 4).max(1), (h / 4).max(1))?;
    let mut low = corrupt(&resize_grid(&coarse, w, h)?, &Corruption::Blur { sigma: 1.0 })?;
    low = corrupt(&low, &Corruption::Affine { a: rng.random_range(0.6..1.0), b: rng.random_range(0.0..0.2) })?;
    low = corrupt(&low, &Corruption::Noise { sigma: 0.01, seed: rng.next_u64() })?;
    let mut high = corrupt(&n, &Corruption::Noise { sigma: 0.02, seed: rng.next_u64() })?;
    high = corrupt(&high, &Corruption::Affine { a: rng.random_range(0.6..1.0), b: rng.random_range(0.0..0.2) })?;
    let high = align_mean_scale(&high, &low, &scene.mask)?;
    Ok((low, high))
}

/// SI-stage example. The target is ground-truth inverse depth with its scale
/// fixed against `O^L`; the RGB-only twin fixes it against the normalized
/// ground-truth disparity instead.
pub fn si_sample(scene: &Scene, seed: u64, rgb_only: bool) -> Result<TrainSample> {
    let (low, high) = synthetic_ssi_inputs(scene, seed)?;
    let gt_inv = scene.disparity();
    let (input, target) = if rgb_only {
        (scene.rgb.clone(), fix_gt_scale(&gt_inv, &normalized_disparity(scene), &scene.mask)?)
    } else {
        (assemble_si_input(&scene.rgb, &low, &high)?, fix_gt_scale(&gt_inv, &low, &scene.mask)?)
    };
    Ok(TrainSample {
        input,
        target,
        mask: scene.mask.clone(),
        gt_depth: scene.depth.clone(),
        gt_normals: scene.normals.clone(),
        intrinsics: scene.intrinsics,
    })
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    SplitMix64::seed_from_u64(base.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))).next_u64()
}

/// Fixed train / held-out split of procedural scenes.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub heldout: Vec<Scene>,
    pub seed: u64,
}

impl Benchmark {
    pub fn new(train_count: usize, heldout_count: usize, size: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            train: scene_batch(train_count, size, size, seed)?,
            heldout: scene_batch(heldout_count, size, size, derive_seed(seed, 0x4e1d))?,
            seed,
        })
    }

    pub fn samples(&self, cfg: &TrainConfig) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
        let build = |scenes: &[Scene], salt: u64| -> Result<Vec<TrainSample>> {
            scenes
                .iter()
                .enumerate()
                .map(|(i, s)| match cfg.recipe {
                    Recipe::Si => si_sample(s, derive_seed(self.seed ^ salt, i as u64), cfg.rgb_only),
                    _ => Ok(ssi_sample(s)),
                })
                .collect()
        };
        Ok((build(&self.train, 1)?, build(&self.heldout, 2)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub ord: f64,
    pub d3r: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub mean_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch, evaluated before each update.
    pub train_loss: f64,
    pub heldout: HeldoutMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    /// Reason training stopped early, if it did.
    pub aborted: Option<String>,
}

pub fn sample_loss(recipe: Recipe, cfg: &TrainConfig, sample: &TrainSample, pred: &ScalarGrid, pair_seed: u64) -> Result<LossReport> {
    let pairs = PairSampleConfig { pair_count: cfg.pair_count, seed: pair_seed, delta: cfg.delta };
    match recipe {
        Recipe::Si => si_net_loss(
            pred,
            &sample.target,
            &sample.gt_normals,
            &sample.intrinsics,
            &sample.mask,
            &cfg.weights,
            cfg.num_scales,
        ),
        r => ssi_stage_loss(pred, &sample.target, &sample.mask, &r.stage_config(cfg, pairs)),
    }
}

/// Mean held-out metrics. SSI-stage predictions are aligned with scale and
/// shift in disparity space, SI-stage predictions with scale only.
pub fn evaluate_heldout(net: &ToyNet, samples: &[TrainSample], recipe: Recipe, eval_pairs: usize, seed: u64) -> Result<HeldoutMetrics> {
    let mode = if recipe == Recipe::Si { EvalMode::Si } else { EvalMode::Ssi };
    let mut ecfg = EvalConfig { pred_space: PredSpace::Disparity, ..EvalConfig::new(mode) };
    ecfg.ord.pair_count = eval_pairs;
    let mut acc = HeldoutMetrics::default();
    for (i, s) in samples.iter().enumerate() {
        ecfg.ord.seed = derive_seed(seed, i as u64);
        let pred = net.forward(&s.input)?;
        let r = evaluate_all(&pred, &s.gt_depth, Some(&s.gt_normals), Some(&s.intrinsics), &s.mask, &ecfg)?;
        acc.ord += r.ord;
        acc.d3r += r.d3r.value;
        acc.abs_rel += r.abs_rel;
        acc.delta1 += r.delta1;
        acc.rmse += r.rmse;
        acc.mean_angle_deg += r.normals.map_or(0.0, |n| n.mean_angle_deg);
    }
    let n = samples.len().max(1) as f64;
    Ok(HeldoutMetrics {
        ord: acc.ord / n,
        d3r: acc.d3r / n,
        abs_rel: acc.abs_rel / n,
        delta1: acc.delta1 / n,
        rmse: acc.rmse / n,
        mean_angle_deg: acc.mean_angle_deg / n,
    })
}

/// Plain loop: batch size 1, samples in order, one Adam step per sample.
/// Pair draws depend only on the seed and the sample index.
pub fn train(net: &mut ToyNet, train_set: &[TrainSample], heldout: &[TrainSample], cfg: &TrainConfig) -> Result<TrainLog> {
    if train_set.is_empty() {
        return invalid_arg("training set is empty");
    }
    for s in train_set.iter().chain(heldout) {
        if s.input.channels() != net.config().in_channels() {
            return invalid_arg(format!(
                "sample has {} channels, network expects {}",
                s.input.channels(),
                net.config().in_channels()
            ));
        }
    }
    let mut adam = AdamState::new(cfg.adam, net.params().len())?;
    let mut log = TrainLog { config: cfg.clone(), epochs: Vec::with_capacity(cfg.epochs), aborted: None };
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (i, s) in train_set.iter().enumerate() {
            let pred = net.forward_train(&s.input)?;
            let report = sample_loss(cfg.recipe, cfg, s, &pred, derive_seed(cfg.seed, i as u64))?;
            if !report.value.is_finite() {
                log.aborted = Some(format!("non-finite loss at epoch {epoch}, sample {i}"));
                return Ok(log);
            }
            total += report.value;
            let grads = net.backward(&report.grad)?;
            if let Err(e) = adam.step(net.params_mut(), &grads) {
                log.aborted = Some(format!("epoch {epoch}, sample {i}: {e}"));
                return Ok(log);
            }
        }
        let heldout_metrics = evaluate_heldout(net, heldout, cfg.recipe, cfg.eval_pairs, cfg.seed)?;
        log.epochs.push(EpochLog { epoch, train_loss: total / train_set.len() as f64, heldout: heldout_metrics });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub recipe: Recipe,
    pub rgb_only: bool,
    pub final_heldout: HeldoutMetrics,
    pub log: TrainLog,
}

/// Trains one fresh network per `(recipe, rgb_only)` with the same seed and budget.
pub fn run_ablation(bench: &Benchmark, runs: &[(Recipe, bool)], epochs: usize, seed: u64) -> Result<Vec<AblationEntry>> {
    runs.iter()
        .map(|&(recipe, rgb_only)| {
            let cfg = TrainConfig { rgb_only, ..TrainConfig::new(recipe, epochs, seed) };
            let (train_set, heldout) = bench.samples(&cfg)?;
            let mut net = ToyNet::new(cfg.net_config(), seed)?;
            let log = train(&mut net, &train_set, &heldout, &cfg)?;
            let final_heldout = match log.epochs.last() {
                Some(e) => e.heldout,
                None => evaluate_heldout(&net, &heldout, recipe, cfg.eval_pairs, seed)?,
            };
            Ok(AblationEntry { recipe, rgb_only, final_heldout, log })
        })
        .collect()
}

/// Sum of per-pair gradient magnitudes `|dL/dO_i| + |dL/dO_j|` over sampled
/// pairs that are already correctly ordered (`|dgt| >= delta`).
pub fn correct_pair_gradient_mass(
    kind: PairLossKind,
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    cfg: &PairSampleConfig,
) -> Result<(f64, usize)> {
    let sample = sample_pairs(mask, cfg.pair_count, cfg.seed)?;
    let (p, t) = (pred.data(), gt.data());
    let mut mass = 0.0;
    let mut count = 0;
    for &q in &sample.pairs {
        let (dp, dt) = (p[q.i] - p[q.j], t[q.i] - t[q.j]);
        if dt.abs() >= cfg.delta && dp * dt > 0.0 {
            let term = pair_term(kind, p, t, q, cfg.delta);
            mass += term.d_pred_i.abs() + term.d_pred_j.abs();
            count += 1;
        }
    }
    Ok((mass, count))
}
