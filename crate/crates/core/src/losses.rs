//! Training objectives with hand-derived gradients with respect to the
//! prediction, plus a central finite-difference gradient checker.
//!
//! Every loss returns a [`LossReport`]. Losses with non-smooth branches (ReLU,
//! L1) also report a per-pixel *kink margin*: how far the pixel can move before
//! some term it participates in switches branch. The checker uses it to skip
//! samples where central differences straddle a kink.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::{fit_scale_shift, moments, AffineFit};
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{normal_pass, NormalStencil};
use crate::grid::{
    downsample_masked, downsample_masked_adjoint, dot3, CameraIntrinsics, NormalGrid, ScalarGrid, ValidMask,
};
use crate::sampling::{rng_from_seed, sample_pairs, PairSampleConfig, PixelPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponent {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// `d value / d prediction`, zero at masked-out pixels.
    pub grad: ScalarGrid,
    /// Weighted sub-losses; `value == sum(weight * value)` when non-empty.
    pub components: Vec<LossComponent>,
    /// Per-pixel distance to the nearest branch switch, in prediction units.
    pub kink_margin: Option<Vec<f64>>,
    /// Fit parameters, sampling flags and similar side information.
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossReport {
    fn smooth(value: f64, grad: ScalarGrid) -> Self {
        Self { value, grad, components: Vec::new(), kink_margin: None, diagnostics: BTreeMap::new() }
    }

    /// Weighted sum of named reports. Zero-weight parts are dropped.
    pub fn combine(width: usize, height: usize, parts: Vec<(&str, f64, LossReport)>) -> LossReport {
        let mut value = 0.0;
        let mut grad = vec![0.0; width * height];
        let mut margin: Option<Vec<f64>> = None;
        let mut components = Vec::new();
        let mut diagnostics = BTreeMap::new();
        for (name, weight, part) in parts {
            if weight == 0.0 {
                continue;
            }
            value += weight * part.value;
            for (g, p) in grad.iter_mut().zip(part.grad.data()) {
                *g += weight * p;
            }
            if let Some(m) = part.kink_margin {
                let acc = margin.get_or_insert_with(|| vec![f64::INFINITY; width * height]);
                for (a, b) in acc.iter_mut().zip(m) {
                    *a = a.min(b);
                }
            }
            for (k, v) in part.diagnostics {
                diagnostics.insert(format!("{name}.{k}"), v);
            }
            components.push(LossComponent { name: name.to_string(), weight, value: part.value });
        }
        LossReport {
            value,
            grad: ScalarGrid::from_raw(width, height, grad),
            components,
            kink_margin: margin,
            diagnostics,
        }
    }

    pub fn component(&self, name: &str) -> Option<&LossComponent> {
        self.components.iter().find(|c| c.name == name)
    }
}

/// Loss weights for both stages. Defaults are the published values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssi: f64,
    pub lambda_so: f64,
    pub lambda_ssig: f64,
    pub lambda_d: f64,
    pub lambda_dg: f64,
    pub lambda_n: f64,
    pub lambda_ng: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssi: 3.0,
            lambda_so: 1.0,
            lambda_ssig: 0.1,
            lambda_d: 1.0,
            lambda_dg: 0.5,
            lambda_n: 0.1,
            lambda_ng: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ssi,
            self.lambda_so,
            self.lambda_ssig,
            self.lambda_d,
            self.lambda_dg,
            self.lambda_n,
            self.lambda_ng,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid_arg("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

pub const DEFAULT_SCALES: usize = 4;

fn check_pair(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask) -> Result<()> {
    pred.check_same_shape(gt, "loss")?;
    mask.check_gates(pred)
}

fn masked_count(mask: &ValidMask) -> Result<usize> {
    match mask.count() {
        0 => Err(Error::InsufficientData("loss has no valid pixels".into())),
        n => Ok(n),
    }
}

/// Mean squared residual after the least-squares scale/shift fit of `pred`
/// onto `gt`.
///
/// The gradient goes through the fit. Because `(a, b)` minimizes the same
/// sum, its partial derivatives vanish and only `2 a r_k / N` survives; when
/// `a` is clamped it is constant and `b` is still optimal, so the same form
/// holds.
pub fn ssi_loss(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask) -> Result<LossReport> {
    check_pair(pred, gt, mask)?;
    let fit = fit_scale_shift(pred, gt, mask)?;
    let n = masked_count(mask)? as f64;
    let grad = pred
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .map(|(i, (&p, &t))| if mask.is_valid(i) { 2.0 * fit.a * (fit.apply(p) - t) / n } else { 0.0 })
        .collect();
    let mut report = LossReport::smooth(fit.residual_sse / n, ScalarGrid::from_raw(pred.width(), pred.height(), grad));
    insert_fit(&mut report.diagnostics, &fit);
    Ok(report)
}

fn insert_fit(diag: &mut BTreeMap<String, f64>, fit: &AffineFit) {
    diag.insert("a".into(), fit.a);
    diag.insert("b".into(), fit.b);
    diag.insert("clamped".into(), if fit.clamped { 1.0 } else { 0.0 });
}

/// Value of one pair term and its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerm {
    pub value: f64,
    pub d_pred_i: f64,
    pub d_pred_j: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLossKind {
    Ordinal,
    Ranking,
}

/// Sparse ordinal pair term: squared difference for ground-truth ties,
/// one-sided linear penalty on wrongly ordered pairs otherwise.
pub fn ordinal_pair_loss(pred_i: f64, pred_j: f64, gt_i: f64, gt_j: f64, delta: f64) -> PairTerm {
    let d_pred = pred_i - pred_j;
    let d_gt = gt_i - gt_j;
    if d_gt.abs() < delta {
        return PairTerm { value: d_pred * d_pred, d_pred_i: 2.0 * d_pred, d_pred_j: -2.0 * d_pred };
    }
    let s = d_gt.signum();
    let arg = -d_pred * s;
    if arg > 0.0 {
        PairTerm { value: arg, d_pred_i: -s, d_pred_j: s }
    } else {
        PairTerm { value: 0.0, d_pred_i: 0.0, d_pred_j: 0.0 }
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Classical ranking pair term: `log(1 + exp(-sgn(dgt) * dpred))` for ordered
/// pairs, squared difference for ties under the same `delta`.
pub fn ranking_pair_loss(pred_i: f64, pred_j: f64, gt_i: f64, gt_j: f64, delta: f64) -> PairTerm {
    let d_pred = pred_i - pred_j;
    let d_gt = gt_i - gt_j;
    if d_gt.abs() < delta {
        return PairTerm { value: d_pred * d_pred, d_pred_i: 2.0 * d_pred, d_pred_j: -2.0 * d_pred };
    }
    let s = d_gt.signum();
    let x = -s * d_pred;
    let slope = -s * sigmoid(x);
    PairTerm { value: softplus(x), d_pred_i: slope, d_pred_j: -slope }
}

pub fn pair_term(kind: PairLossKind, pred: &[f64], gt: &[f64], pair: PixelPair, delta: f64) -> PairTerm {
    let f = match kind {
        PairLossKind::Ordinal => ordinal_pair_loss,
        PairLossKind::Ranking => ranking_pair_loss,
    };
    f(pred[pair.i], pred[pair.j], gt[pair.i], gt[pair.j], delta)
}

/// Sum of pair terms over an explicit pair list.
pub fn pair_loss_over(
    kind: PairLossKind,
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    pairs: &[PixelPair],
    delta: f64,
) -> Result<LossReport> {
    pred.check_same_shape(gt, "pair loss")?;
    let (p, t) = (pred.data(), gt.data());
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    let mut margin = vec![f64::INFINITY; p.len()];
    for &pair in pairs {
        let term = pair_term(kind, p, t, pair, delta);
        value += term.value;
        grad[pair.i] += term.d_pred_i;
        grad[pair.j] += term.d_pred_j;
        if kind == PairLossKind::Ordinal && (t[pair.i] - t[pair.j]).abs() >= delta {
            let m = (p[pair.i] - p[pair.j]).abs();
            margin[pair.i] = margin[pair.i].min(m);
            margin[pair.j] = margin[pair.j].min(m);
        }
    }
    let mut report = LossReport::smooth(value, ScalarGrid::from_raw(pred.width(), pred.height(), grad));
    if kind == PairLossKind::Ordinal {
        report.kink_margin = Some(margin);
    }
    report.diagnostics.insert("pairs".into(), pairs.len() as f64);
    Ok(report)
}

fn sampled_pair_loss(
    kind: PairLossKind,
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    cfg: &PairSampleConfig,
) -> Result<LossReport> {
    check_pair(pred, gt, mask)?;
    cfg.validate()?;
    let sample = sample_pairs(mask, cfg.pair_count, cfg.seed)?;
    let mut report = pair_loss_over(kind, pred, gt, &sample.pairs, cfg.delta)?;
    report
        .diagnostics
        .insert("with_replacement".into(), if sample.with_replacement { 1.0 } else { 0.0 });
    Ok(report)
}

/// Sparse ordinal loss summed (not averaged) over seeded random pairs.
pub fn sparse_ordinal_loss(
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    cfg: &PairSampleConfig,
) -> Result<LossReport> {
    sampled_pair_loss(PairLossKind::Ordinal, pred, gt, mask, cfg)
}

/// Ranking loss over the same pair sampling as [`sparse_ordinal_loss`].
pub fn ranking_loss(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask, cfg: &PairSampleConfig) -> Result<LossReport> {
    sampled_pair_loss(PairLossKind::Ranking, pred, gt, mask, cfg)
}

fn check_pyramid(width: usize, height: usize, num_scales: usize) -> Result<()> {
    if num_scales == 0 {
        return invalid_arg("num_scales must be at least 1");
    }
    let shift = num_scales - 1;
    if (width >> shift) < 4 || (height >> shift) < 4 {
        return invalid_arg(format!(
            "{width}x{height} grid too small for {num_scales} scales (coarsest level must be at least 4x4)"
        ));
    }
    Ok(())
}

struct Pyramid {
    levels: Vec<(ScalarGrid, ValidMask)>,
}

impl Pyramid {
    fn build(base: ScalarGrid, mask: ValidMask, num_scales: usize) -> Result<Self> {
        let mut levels = vec![(base, mask)];
        for _ in 1..num_scales {
            let (g, m) = levels.last().expect("non-empty");
            let next = downsample_masked(g, m)?;
            levels.push(next);
        }
        Ok(Self { levels })
    }

    /// Adjoint of the whole pyramid: sums per-level gradients onto level 0.
    fn pull_back(&self, mut per_level: Vec<Vec<f64>>) -> Vec<f64> {
        let mut carry = per_level.pop().expect("non-empty");
        for m in (0..per_level.len()).rev() {
            let up = downsample_masked_adjoint(&carry, &self.levels[m].1);
            carry = per_level.pop().expect("level");
            for (c, u) in carry.iter_mut().zip(up) {
                *c += u;
            }
        }
        carry
    }
}

/// Mean over pyramid levels of `(sum |dx R| + sum |dy R|) / N_valid` for the
/// residual `R`, using forward differences between valid neighbors. Returns
/// the value, `dvalue/dR` at level 0, and the per-pixel kink margin in
/// residual units.
fn gradient_match(residual: ScalarGrid, mask: &ValidMask, num_scales: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pyramid(residual.width(), residual.height(), num_scales)?;
    let pyramid = Pyramid::build(residual, mask.clone(), num_scales)?;
    let inv_m = 1.0 / num_scales as f64;
    let mut value = 0.0;
    let mut per_level = Vec::with_capacity(num_scales);
    let mut level_margins = Vec::with_capacity(num_scales);
    for (r, m) in &pyramid.levels {
        let (w, h) = (r.width(), r.height());
        let n = m.count();
        let mut g = vec![0.0; w * h];
        let mut margin = vec![f64::INFINITY; w * h];
        if n > 0 {
            let scale = inv_m / n as f64;
            let mut level_sum = 0.0;
            let d = r.data();
            let mut site = |p: usize, q: usize, g: &mut [f64], margin: &mut [f64]| {
                let diff = d[q] - d[p];
                level_sum += diff.abs();
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[q] += s * scale;
                g[p] -= s * scale;
                margin[p] = margin[p].min(diff.abs());
                margin[q] = margin[q].min(diff.abs());
            };
            for row in 0..h {
                for col in 0..w {
                    let p = row * w + col;
                    if !m.is_valid(p) {
                        continue;
                    }
                    if col + 1 < w && m.is_valid(p + 1) {
                        site(p, p + 1, &mut g, &mut margin);
                    }
                    if row + 1 < h && m.is_valid(p + w) {
                        site(p, p + w, &mut g, &mut margin);
                    }
                }
            }
            value += level_sum / n as f64;
        }
        per_level.push(g);
        level_margins.push(margin);
    }
    let (w0, h0) = (pyramid.levels[0].0.width(), pyramid.levels[0].0.height());
    let mut margin = vec![f64::INFINITY; w0 * h0];
    for (lvl, lm) in level_margins.iter().enumerate() {
        let lw = pyramid.levels[lvl].0.width();
        let lh = pyramid.levels[lvl].0.height();
        for (i, out) in margin.iter_mut().enumerate() {
            let (r, c) = ((i / w0) >> lvl, (i % w0) >> lvl);
            if r < lh && c < lw {
                *out = out.min(lm[r * lw + c]);
            }
        }
    }
    let grad = pyramid.pull_back(per_level);
    Ok((value * inv_m, grad, margin))
}

/// Multi-scale L1 gradient matching on the raw residual `pred - gt`.
pub fn multiscale_gradient_loss(
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    num_scales: usize,
) -> Result<LossReport> {
    check_pair(pred, gt, mask)?;
    let residual = pred.zip_map(gt, |p, t| p - t)?;
    let (value, grad, margin) = gradient_match(residual, mask, num_scales)?;
    let mut grad = grad;
    for (i, g) in grad.iter_mut().enumerate() {
        if !mask.is_valid(i) {
            *g = 0.0;
        }
    }
    let mut report = LossReport::smooth(value, ScalarGrid::from_raw(pred.width(), pred.height(), grad));
    report.kink_margin = Some(margin);
    Ok(report)
}

/// Multi-scale gradient matching on the aligned residual `a * pred + b - gt`,
/// differentiated through the fitted `(a, b)`.
pub fn aligned_multiscale_gradient_loss(
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    num_scales: usize,
) -> Result<LossReport> {
    check_pair(pred, gt, mask)?;
    let fit = fit_scale_shift(pred, gt, mask)?;
    let (p, t) = (pred.data(), gt.data());
    let residual = ScalarGrid::from_raw(
        pred.width(),
        pred.height(),
        p.iter().zip(t).map(|(&x, &y)| fit.apply(x) - y).collect(),
    );
    let (value, g_r, margin) = gradient_match(residual, mask, num_scales)?;

    // R_i = a p_i + b - t_i with a, b functions of p:
    //   da/dp_k = ((t_k - mt) - 2 a (p_k - mp)) / Sxx,  db/dp_k = -mp da/dp_k - a / n
    let m = moments(p, t, mask);
    let n = m.n as f64;
    let (mut sum_g, mut sum_gp) = (0.0, 0.0);
    for i in 0..p.len() {
        if mask.is_valid(i) {
            sum_g += g_r[i];
            sum_gp += g_r[i] * p[i];
        }
    }
    let grad = (0..p.len())
        .map(|k| {
            if !mask.is_valid(k) {
                return 0.0;
            }
            let da = if fit.clamped { 0.0 } else { ((t[k] - m.mean_y) - 2.0 * fit.a * (p[k] - m.mean_x)) / m.sxx };
            let db = -m.mean_x * da - fit.a / n;
            fit.a * g_r[k] + da * sum_gp + db * sum_g
        })
        .collect();
    let mut report = LossReport::smooth(value, ScalarGrid::from_raw(pred.width(), pred.height(), grad));
    report.kink_margin = Some(margin.into_iter().map(|v| v / fit.a).collect());
    insert_fit(&mut report.diagnostics, &fit);
    Ok(report)
}

/// Configuration of the SSI-stage objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsiStageConfig {
    pub ssi_weight: f64,
    pub pair_weight: f64,
    pub pair_kind: PairLossKind,
    pub ssig_weight: f64,
    pub pairs: PairSampleConfig,
    pub num_scales: usize,
    /// Gradient matching on the aligned residual rather than `pred - gt`.
    pub ssig_aligned: bool,
}

impl SsiStageConfig {
    pub fn new(weights: &LossWeights, pairs: PairSampleConfig) -> Self {
        Self {
            ssi_weight: weights.lambda_ssi,
            pair_weight: weights.lambda_so,
            pair_kind: PairLossKind::Ordinal,
            ssig_weight: weights.lambda_ssig,
            pairs,
            num_scales: DEFAULT_SCALES,
            ssig_aligned: true,
        }
    }
}

/// Weighted SSI + pair + gradient-matching objective with any pair term.
pub fn ssi_stage_loss(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask, cfg: &SsiStageConfig) -> Result<LossReport> {
    check_pair(pred, gt, mask)?;
    let mut parts = Vec::with_capacity(3);
    if cfg.ssi_weight != 0.0 {
        parts.push(("ssi", cfg.ssi_weight, ssi_loss(pred, gt, mask)?));
    }
    if cfg.pair_weight != 0.0 {
        let (name, report) = match cfg.pair_kind {
            PairLossKind::Ordinal => ("so", sparse_ordinal_loss(pred, gt, mask, &cfg.pairs)?),
            PairLossKind::Ranking => ("ranking", ranking_loss(pred, gt, mask, &cfg.pairs)?),
        };
        parts.push((name, cfg.pair_weight, report));
    }
    if cfg.ssig_weight != 0.0 {
        let report = if cfg.ssig_aligned {
            aligned_multiscale_gradient_loss(pred, gt, mask, cfg.num_scales)?
        } else {
            multiscale_gradient_loss(pred, gt, mask, cfg.num_scales)?
        };
        parts.push(("ssig", cfg.ssig_weight, report));
    }
    Ok(LossReport::combine(pred.width(), pred.height(), parts))
}

/// `lambda_ssi L_ssi + lambda_so L_so + lambda_ssig L_ssig`.
pub fn ssi_net_loss(
    pred: &ScalarGrid,
    gt: &ScalarGrid,
    mask: &ValidMask,
    weights: &LossWeights,
    pairs: &PairSampleConfig,
) -> Result<LossReport> {
    weights.validate()?;
    ssi_stage_loss(pred, gt, mask, &SsiStageConfig::new(weights, *pairs))
}

/// Mean absolute error; subgradient 0 at ties.
pub fn l1_depth_loss(pred: &ScalarGrid, gt_scaled: &ScalarGrid, mask: &ValidMask) -> Result<LossReport> {
    check_pair(pred, gt_scaled, mask)?;
    let n = masked_count(mask)? as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let mut margin = vec![f64::INFINITY; pred.len()];
    for (i, (&p, &t)) in pred.data().iter().zip(gt_scaled.data()).enumerate() {
        if !mask.is_valid(i) {
            continue;
        }
        let d = p - t;
        value += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
        margin[i] = d.abs();
    }
    let mut report = LossReport::smooth(value / n, ScalarGrid::from_raw(pred.width(), pred.height(), grad));
    report.kink_margin = Some(margin);
    Ok(report)
}

fn check_normals(depth: &ScalarGrid, normals: &NormalGrid) -> Result<()> {
    if depth.width() != normals.width() || depth.height() != normals.height() {
        return invalid_arg("ground-truth normals do not match the depth size");
    }
    Ok(())
}

/// Mean of `1 - n . n_gt` with `n` computed from the predicted depth.
pub fn normals_cosine_loss(
    pred_depth: &ScalarGrid,
    gt_normals: &NormalGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
) -> Result<LossReport> {
    check_normals(pred_depth, gt_normals)?;
    let pass = normal_pass(pred_depth, intrinsics, mask, NormalStencil::Central)?;
    let valid = pass.field.valid.and(mask)?;
    let n = match valid.count() {
        0 => return Err(Error::InsufficientData("no pixel has a valid normal".into())),
        n => n as f64,
    };
    let mut value = 0.0;
    let mut gn = vec![[0.0; 3]; pred_depth.len()];
    for i in valid.valid_indices() {
        let (est, gt) = (pass.field.normals.get(i), gt_normals.get(i));
        value += 1.0 - dot3(&est, &gt);
        gn[i] = gt.map(|v| -v / n);
    }
    let grad = pass.depth_grad(&gn);
    Ok(LossReport::smooth(value / n, ScalarGrid::from_raw(pred_depth.width(), pred_depth.height(), grad)))
}

/// Sum of squared differences between the forward-difference gradients of two
/// normal fields (all three components, both axes), divided by the number of
/// valid pixels. Returns the value and `d value / d pred`.
pub fn normal_field_gradient_loss(
    width: usize,
    height: usize,
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    valid: &ValidMask,
) -> (f64, Vec<[f64; 3]>) {
    let n = valid.count();
    let mut grad = vec![[0.0; 3]; width * height];
    if n == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    let mut site = |p: usize, q: usize, grad: &mut [[f64; 3]]| {
        for k in 0..3 {
            let e = (gt[q][k] - gt[p][k]) - (pred[q][k] - pred[p][k]);
            total += e * e;
            grad[q][k] -= 2.0 * e * inv_n;
            grad[p][k] += 2.0 * e * inv_n;
        }
    };
    for r in 0..height {
        for c in 0..width {
            let p = r * width + c;
            if !valid.is_valid(p) {
                continue;
            }
            if c + 1 < width && valid.is_valid(p + 1) {
                site(p, p + 1, &mut grad);
            }
            if r + 1 < height && valid.is_valid(p + width) {
                site(p, p + width, &mut grad);
            }
        }
    }
    (total * inv_n, grad)
}

/// One masked 2x box-average of a normal field, renormalized per block.
struct NormalLevel {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 3]>,
    valid: ValidMask,
    /// Length of each block's unnormalized sum.
    lens: Vec<f64>,
}

fn normal_level_down(width: usize, height: usize, fine: &[[f64; 3]], valid: &ValidMask) -> Result<NormalLevel> {
    let grid = NormalGrid::from_raw(width, height, fine.to_vec());
    let (coarse, mask) = grid.downsample_masked(valid)?;
    let (w, h) = (width / 2, height / 2);
    let mut lens = vec![0.0; w * h];
    for (k, len) in lens.iter_mut().enumerate() {
        let (r, c) = (k / w, k % w);
        let mut acc = [0.0; 3];
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx = (2 * r + dr) * width + 2 * c + dc;
            if valid.is_valid(idx) {
                for d in 0..3 {
                    acc[d] += fine[idx][d];
                }
            }
        }
        *len = crate::grid::norm3(&acc);
    }
    Ok(NormalLevel { width: w, height: h, vectors: coarse.vectors().to_vec(), valid: mask, lens })
}

/// Gradient of a coarse level with respect to the fine normals it averages.
fn normal_level_adjoint(level: &NormalLevel, g: &[[f64; 3]], fine_width: usize, fine_valid: &ValidMask) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; fine_valid.width() * fine_valid.height()];
    for k in 0..level.width * level.height {
        if !level.valid.is_valid(k) {
            continue;
        }
        let v = level.vectors[k];
        let gk = g[k];
        let vg = dot3(&v, &gk);
        let gs = [0, 1, 2].map(|d| (gk[d] - v[d] * vg) / level.lens[k]);
        let (r, c) = (k / level.width, k % level.width);
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx = (2 * r + dr) * fine_width + 2 * c + dc;
            if fine_valid.is_valid(idx) {
                out[idx] = gs;
            }
        }
    }
    out
}

/// Multi-scale gradient loss on surface normals. Level 0 uses normals from
/// the predicted depth; coarser levels of both fields are masked box averages
/// of the level above, renormalized, so equal fields match at every scale.
pub fn normals_gradient_loss(
    pred_depth: &ScalarGrid,
    gt_normals: &NormalGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
    num_scales: usize,
) -> Result<LossReport> {
    check_normals(pred_depth, gt_normals)?;
    mask.check_gates(pred_depth)?;
    check_pyramid(pred_depth.width(), pred_depth.height(), num_scales)?;
    let pass = normal_pass(pred_depth, intrinsics, mask, NormalStencil::Central)?;
    let valid0 = pass.field.valid.and(mask)?;
    let (w0, h0) = (pred_depth.width(), pred_depth.height());

    let mut pred_levels = vec![NormalLevel {
        width: w0,
        height: h0,
        vectors: pass.field.normals.vectors().to_vec(),
        valid: valid0.clone(),
        lens: Vec::new(),
    }];
    let mut gt_levels = vec![(gt_normals.vectors().to_vec(), valid0)];
    for _ in 1..num_scales {
        let top = pred_levels.last().expect("non-empty");
        let next = normal_level_down(top.width, top.height, &top.vectors, &top.valid)?;
        let (gv, gm) = gt_levels.last().expect("non-empty");
        let gt_next = NormalGrid::from_raw(top.width, top.height, gv.clone()).downsample_masked(gm)?;
        gt_levels.push((gt_next.0.vectors().to_vec(), gt_next.1));
        pred_levels.push(next);
    }

    let inv_m = 1.0 / num_scales as f64;
    let mut value = 0.0;
    let mut carry: Option<Vec<[f64; 3]>> = None;
    for m in (0..num_scales).rev() {
        let level = &pred_levels[m];
        let valid = level.valid.and(&gt_levels[m].1)?;
        let (v, g) = normal_field_gradient_loss(level.width, level.height, &level.vectors, &gt_levels[m].0, &valid);
        value += v * inv_m;
        let mut g: Vec<[f64; 3]> = g.into_iter().map(|x| x.map(|c| c * inv_m)).collect();
        if let Some(up) = carry.take() {
            for (a, b) in g.iter_mut().zip(up) {
                for d in 0..3 {
                    a[d] += b[d];
                }
            }
        }
        if m > 0 {
            let parent = &pred_levels[m - 1];
            carry = Some(normal_level_adjoint(level, &g, parent.width, &parent.valid));
        } else {
            carry = Some(g);
        }
    }
    let grad = pass.depth_grad(&carry.expect("level 0"));
    Ok(LossReport::smooth(value, ScalarGrid::from_raw(w0, h0, grad)))
}

/// Scale-invariant stage objective on a predicted inverse depth `pred_inv`
/// whose scale has been fixed against the low-resolution SSI input:
/// `lambda_d L1 + lambda_dg L_grad + lambda_n L_normal + lambda_ng L_normal_grad`.
/// The L1 and gradient terms act on inverse depth; the normal terms on the
/// depth `1 / pred_inv`.
pub fn si_net_loss(
    pred_inv: &ScalarGrid,
    gt_inv: &ScalarGrid,
    gt_normals: &NormalGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
    weights: &LossWeights,
    num_scales: usize,
) -> Result<LossReport> {
    weights.validate()?;
    check_pair(pred_inv, gt_inv, mask)?;
    let (w, h) = (pred_inv.width(), pred_inv.height());
    let mut parts = Vec::with_capacity(4);
    if weights.lambda_d != 0.0 {
        parts.push(("d", weights.lambda_d, l1_depth_loss(pred_inv, gt_inv, mask)?));
    }
    if weights.lambda_dg != 0.0 {
        parts.push(("dg", weights.lambda_dg, multiscale_gradient_loss(pred_inv, gt_inv, mask, num_scales)?));
    }
    if weights.lambda_n != 0.0 || weights.lambda_ng != 0.0 {
        for (i, &q) in pred_inv.data().iter().enumerate() {
            if mask.is_valid(i) && q <= 0.0 {
                return crate::error::invalid_input(format!("non-positive inverse depth {q} at pixel {i}"));
            }
        }
        let depth = ScalarGrid::from_raw(
            w,
            h,
            pred_inv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &q)| if mask.is_valid(i) { 1.0 / q } else { 1.0 })
                .collect(),
        );
        // d(1/q)/dq = -1/q^2
        let chain = |mut r: LossReport| -> LossReport {
            let g = r
                .grad
                .data()
                .iter()
                .zip(pred_inv.data())
                .enumerate()
                .map(|(i, (&g, &q))| if mask.is_valid(i) { -g / (q * q) } else { 0.0 })
                .collect();
            r.grad = ScalarGrid::from_raw(w, h, g);
            r
        };
        if weights.lambda_n != 0.0 {
            parts.push(("n", weights.lambda_n, chain(normals_cosine_loss(&depth, gt_normals, intrinsics, mask)?)));
        }
        if weights.lambda_ng != 0.0 {
            let r = normals_gradient_loss(&depth, gt_normals, intrinsics, mask, num_scales)?;
            parts.push(("ng", weights.lambda_ng, chain(r)));
        }
    }
    Ok(LossReport::combine(w, h, parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Pixels probed; all pixels when the grid is smaller.
    pub samples: usize,
    pub seed: u64,
    /// Gradients below this magnitude are compared absolutely. Raised
    /// automatically to the round-off level of the difference quotient.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, samples: 64, seed: 0, abs_floor: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_near_kink: usize,
    pub worst_pixel: Option<usize>,
}

/// Compares the analytic gradient of `loss_fn` at `pred` to central
/// differences on a seeded subset of pixels, skipping pixels whose reported
/// kink margin is below `10 * epsilon`.
pub fn gradient_check<F>(loss_fn: F, pred: &ScalarGrid, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ScalarGrid) -> Result<LossReport>,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return invalid_arg(format!("epsilon {} outside [1e-7, 1e-3]", cfg.epsilon));
    }
    let base = loss_fn(pred)?;
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.shuffle(&mut rng_from_seed(cfg.seed));
    order.truncate(cfg.samples.max(64).min(pred.len()));
    order.sort_unstable();

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_near_kink: 0, worst_pixel: None };
    // Cancellation noise of the difference quotient sets a floor of its own.
    let floor = cfg.abs_floor.max(1e4 * f64::EPSILON * (1.0 + base.value.abs()) / cfg.epsilon);
    let mut probe = pred.data().to_vec();
    for idx in order {
        if let Some(m) = &base.kink_margin {
            if m[idx] < 10.0 * cfg.epsilon {
                report.skipped_near_kink += 1;
                continue;
            }
        }
        let x = probe[idx];
        probe[idx] = x + cfg.epsilon;
        let plus = loss_fn(&ScalarGrid::new(pred.width(), pred.height(), probe.clone())?)?.value;
        probe[idx] = x - cfg.epsilon;
        let minus = loss_fn(&ScalarGrid::new(pred.width(), pred.height(), probe.clone())?)?.value;
        probe[idx] = x;
        let fd = (plus - minus) / (2.0 * cfg.epsilon);
        let an = base.grad.data()[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_pixel.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_pixel = Some(idx);
        }
    }
    Ok(report)
}
