//! Zero-shot evaluation metrics: depth errors, ordinal agreement, a grid-cell
//! D3R variant, a truncated-chamfer edge metric, and normal angles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{fit_scale_only, fit_scale_shift, AffineFit};
use crate::error::{invalid_arg, invalid_input, Error, Result};
use crate::geometry::normals_from_depth;
use crate::grid::{cross3, dot3, norm3, CameraIntrinsics, NormalGrid, ScalarGrid, ValidMask};
use crate::sampling::{sample_pairs, PairSampleConfig};

pub const D3R_VARIANT: &str = "grid-cell-median-ordinal/v1";
pub const DBE_VARIANT: &str = "log-depth-top-quantile-edges/truncated-chamfer/v1";
pub const ORD_VARIANT: &str = "sampled-pairs-ratio-threshold/v1";

/// Identifiers of the metric definitions used, for reports.
pub fn metric_variants() -> BTreeMap<String, String> {
    [("d3r", D3R_VARIANT), ("dbe", DBE_VARIANT), ("ord", ORD_VARIANT)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn valid_pairs<'a>(
    pred: &'a ScalarGrid,
    gt: &'a ScalarGrid,
    mask: &'a ValidMask,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.check_same_shape(gt, "metric")?;
    mask.check_gates(pred)?;
    if mask.count() == 0 {
        return Err(Error::InsufficientData("metric has no valid pixels".into()));
    }
    Ok(mask.valid_indices().into_iter().map(|i| (pred.data()[i], gt.data()[i])))
}

pub fn rmse(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in valid_pairs(pred, gt, mask)? {
        sum += (p - t) * (p - t);
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

pub fn abs_rel(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in valid_pairs(pred, gt, mask)? {
        if t <= 0.0 {
            return invalid_input(format!("abs_rel needs positive ground truth, got {t}"));
        }
        sum += (p - t).abs() / t;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Fraction of pixels with `max(p / t, t / p) < 1.25`.
pub fn delta1(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (p, t) in valid_pairs(pred, gt, mask)? {
        if p <= 0.0 || t <= 0.0 {
            return invalid_input(format!("delta1 needs positive values, got pred {p}, gt {t}"));
        }
        if (p / t).max(t / p) < 1.25 {
            hits += 1;
        }
        n += 1;
    }
    Ok(hits as f64 / n as f64)
}

pub const DEFAULT_ORD_TAU: f64 = 1.03;
pub const DEFAULT_ORD_PAIRS: usize = 5000;

fn ratio_relation(a: f64, b: f64, tau: f64) -> i8 {
    let r = a / b;
    if r >= tau {
        1
    } else if r <= 1.0 / tau {
        -1
    } else {
        0
    }
}

/// Fraction of sampled pairs whose ratio relation (`+1`, `-1` or equal under
/// `tau`) differs between prediction and ground truth. `cfg.delta` is unused.
pub fn ordinal_error(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask, cfg: &PairSampleConfig, tau: f64) -> Result<f64> {
    if !(tau > 1.0 && tau.is_finite()) {
        return invalid_arg(format!("tau must exceed 1, got {tau}"));
    }
    for (p, t) in valid_pairs(pred, gt, mask)? {
        if p <= 0.0 || t <= 0.0 {
            return invalid_input(format!("ordinal error needs positive values, got pred {p}, gt {t}"));
        }
    }
    let sample = sample_pairs(mask, cfg.pair_count, cfg.seed)?;
    let (p, t) = (pred.data(), gt.data());
    let wrong = sample
        .pairs
        .iter()
        .filter(|q| ratio_relation(p[q.i], p[q.j], tau) != ratio_relation(t[q.i], t[q.j], tau))
        .count();
    Ok(wrong as f64 / sample.pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3rConfig {
    pub cells_x: usize,
    pub cells_y: usize,
    /// Adjacent cells are compared when their ground-truth medians differ by
    /// more than this fraction of the ground-truth range.
    pub rel_threshold: f64,
}

impl Default for D3rConfig {
    fn default() -> Self {
        Self { cells_x: 24, cells_y: 24, rel_threshold: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3rResult {
    pub value: f64,
    pub flagged_pairs: usize,
    /// No adjacent pair crossed the threshold; `value` is 0 by convention.
    pub no_flagged_pairs: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordinal disagreement between 4-adjacent cells of a regular grid, comparing
/// per-cell medians. Equal predicted medians count as disagreement.
pub fn d3r(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask, cfg: &D3rConfig) -> Result<D3rResult> {
    if cfg.cells_x == 0 || cfg.cells_y == 0 || !(cfg.rel_threshold >= 0.0) {
        return invalid_arg("d3r needs at least one cell per axis and a non-negative threshold");
    }
    let (lo, hi) = valid_pairs(pred, gt, mask)?.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, t)| {
        (lo.min(t), hi.max(t))
    });
    let (w, h) = (pred.width(), pred.height());
    let (cx, cy) = (cfg.cells_x.min(w), cfg.cells_y.min(h));
    let mut reps: Vec<Option<(f64, f64)>> = Vec::with_capacity(cx * cy);
    for j in 0..cy {
        for i in 0..cx {
            let (r0, r1) = (j * h / cy, (j + 1) * h / cy);
            let (c0, c1) = (i * w / cx, (i + 1) * w / cx);
            let (mut ps, mut ts) = (Vec::new(), Vec::new());
            for r in r0..r1 {
                for c in c0..c1 {
                    let k = r * w + c;
                    if mask.is_valid(k) {
                        ps.push(pred.data()[k]);
                        ts.push(gt.data()[k]);
                    }
                }
            }
            reps.push(if ps.is_empty() { None } else { Some((median(&mut ps), median(&mut ts))) });
        }
    }
    if reps.iter().flatten().count() < 2 {
        return Err(Error::InsufficientData("d3r needs at least two cells with valid pixels".into()));
    }
    let threshold = cfg.rel_threshold * (hi - lo);
    let (mut flagged, mut wrong) = (0usize, 0usize);
    let mut visit = |a: Option<(f64, f64)>, b: Option<(f64, f64)>| {
        if let (Some((pa, ta)), Some((pb, tb))) = (a, b) {
            if (ta - tb).abs() > threshold {
                flagged += 1;
                let gt_sign = (ta - tb).signum();
                let pred_diff = pa - pb;
                if pred_diff == 0.0 || pred_diff.signum() != gt_sign {
                    wrong += 1;
                }
            }
        }
    };
    for j in 0..cy {
        for i in 0..cx {
            let k = j * cx + i;
            if i + 1 < cx {
                visit(reps[k], reps[k + 1]);
            }
            if j + 1 < cy {
                visit(reps[k], reps[k + cx]);
            }
        }
    }
    Ok(if flagged == 0 {
        D3rResult { value: 0.0, flagged_pairs: 0, no_flagged_pairs: true }
    } else {
        D3rResult { value: wrong as f64 / flagged as f64, flagged_pairs: flagged, no_flagged_pairs: false }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbeConfig {
    /// Fraction of pixels with the largest log-depth gradient taken as edges.
    pub top_fraction: f64,
    /// Gradient magnitudes at or below this are never edges.
    pub min_magnitude: f64,
    /// Distances are clipped at this many pixels.
    pub truncation: f64,
}

impl Default for DbeConfig {
    fn default() -> Self {
        Self { top_fraction: 0.05, min_magnitude: 1e-3, truncation: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbeResult {
    /// Mean truncated distance from predicted edges to ground-truth edges.
    pub acc: f64,
    /// Mean truncated distance from ground-truth edges to predicted edges.
    pub comp: f64,
    pub pred_edges: usize,
    pub gt_edges: usize,
    /// `acc` is the truncation value because there were no predicted edges.
    pub acc_vacuous: bool,
    /// `comp` is the truncation value because there were no ground-truth edges.
    pub comp_vacuous: bool,
}

/// Edge map from the forward-difference gradient magnitude of `ln(depth)`.
///
/// Pixels whose magnitude reaches the top `top_fraction` are edges. The cut is
/// placed midway between the last included and the next smaller distinct
/// magnitude, so rounding-level perturbations do not change the set.
pub fn depth_edges(depth: &ScalarGrid, mask: &ValidMask, cfg: &DbeConfig) -> Result<ValidMask> {
    if !(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0) {
        return invalid_arg(format!("top_fraction must be in (0, 1], got {}", cfg.top_fraction));
    }
    mask.check_gates(depth)?;
    let (w, h) = (depth.width(), depth.height());
    let d = depth.data();
    for i in mask.valid_indices() {
        if d[i] <= 0.0 {
            return invalid_input(format!("edge extraction needs positive depth, got {} at pixel {i}", d[i]));
        }
    }
    let mut mag = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            if !mask.is_valid(k) {
                continue;
            }
            let l = d[k].ln();
            let gx = if c + 1 < w && mask.is_valid(k + 1) { d[k + 1].ln() - l } else { 0.0 };
            let gy = if r + 1 < h && mask.is_valid(k + w) { d[k + w].ln() - l } else { 0.0 };
            mag[k] = gx.hypot(gy);
        }
    }
    top_fraction_edges(w, h, &mag, mask, cfg.top_fraction, cfg.min_magnitude)
}

/// Marks valid pixels whose `magnitude` is among the largest `fraction` and
/// above `floor`. The cut sits midway between the last included value and the
/// next smaller distinct one.
pub(crate) fn top_fraction_edges(
    w: usize,
    h: usize,
    magnitude: &[f64],
    mask: &ValidMask,
    fraction: f64,
    floor: f64,
) -> Result<ValidMask> {
    let mut sorted: Vec<f64> = mask.valid_indices().into_iter().map(|k| magnitude[k]).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut flags = vec![false; w * h];
    if !sorted.is_empty() {
        let take = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        let last = sorted[take - 1];
        let cut = match sorted[take..].iter().copied().find(|&v| v < last) {
            Some(b) => 0.5 * (last + b),
            None => last,
        };
        for k in mask.valid_indices() {
            flags[k] = magnitude[k] >= cut && magnitude[k] > floor;
        }
    }
    ValidMask::new(w, h, flags)
}

const EDT_INF: f64 = 1e20;

/// Squared distance transform of a sampled function (lower envelope of
/// parabolas), in place.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact Euclidean distance (in pixels) from every pixel to the nearest
/// feature pixel; `f64::INFINITY` everywhere when there are no features.
pub fn distance_transform(features: &ValidMask) -> Vec<f64> {
    let (w, h) = (features.width(), features.height());
    if features.count() == 0 {
        return vec![f64::INFINITY; w * h];
    }
    let mut grid: Vec<f64> = features.flags().iter().map(|&b| if b { 0.0 } else { EDT_INF }).collect();
    let n = w.max(h);
    let (mut f, mut v, mut z, mut out) = (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&mut f[..h], &mut v[..h], &mut z[..h + 1], &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&mut f[..w], &mut v[..w], &mut z[..w + 1], &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

fn mean_truncated(from: &ValidMask, to_dist: &[f64], truncation: f64) -> (f64, bool) {
    let idx = from.valid_indices();
    if idx.is_empty() {
        return (truncation, true);
    }
    let sum: f64 = idx.iter().map(|&k| to_dist[k].min(truncation)).sum();
    (sum / idx.len() as f64, false)
}

/// Truncated chamfer distances between the depth-edge maps of two depths.
pub fn dbe(pred_depth: &ScalarGrid, gt_depth: &ScalarGrid, mask: &ValidMask, cfg: &DbeConfig) -> Result<DbeResult> {
    pred_depth.check_same_shape(gt_depth, "dbe")?;
    if !(cfg.truncation > 0.0) {
        return invalid_arg("truncation must be positive");
    }
    let pe = depth_edges(pred_depth, mask, cfg)?;
    let ge = depth_edges(gt_depth, mask, cfg)?;
    dbe_from_edges(&pe, &ge, cfg.truncation)
}

/// [`dbe`] on precomputed edge maps.
pub fn dbe_from_edges(pred_edges: &ValidMask, gt_edges: &ValidMask, truncation: f64) -> Result<DbeResult> {
    if pred_edges.width() != gt_edges.width() || pred_edges.height() != gt_edges.height() {
        return invalid_arg("edge maps differ in size");
    }
    let to_gt = distance_transform(gt_edges);
    let to_pred = distance_transform(pred_edges);
    let (acc, acc_vacuous) = mean_truncated(pred_edges, &to_gt, truncation);
    let (comp, comp_vacuous) = mean_truncated(gt_edges, &to_pred, truncation);
    Ok(DbeResult {
        acc,
        comp,
        pred_edges: pred_edges.count(),
        gt_edges: gt_edges.count(),
        acc_vacuous,
        comp_vacuous,
    })
}

pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 11.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalAngleResult {
    pub mean_angle_deg: f64,
    pub pct_within: f64,
    pub pixels: usize,
}

/// Mean angular error and the fraction of pixels strictly below `t_deg`.
/// Angles use `atan2(|n x m|, n . m)`, which stays accurate near 0 and 180.
pub fn normal_angle_metrics(
    pred: &NormalGrid,
    gt: &NormalGrid,
    mask: &ValidMask,
    t_deg: f64,
) -> Result<NormalAngleResult> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return invalid_arg("normal grids differ in size");
    }
    if mask.width() != pred.width() || mask.height() != pred.height() {
        return invalid_arg("mask does not match the normal grids");
    }
    let idx = mask.valid_indices();
    if idx.is_empty() {
        return Err(Error::InsufficientData("no valid normals".into()));
    }
    let (mut sum, mut within) = (0.0, 0usize);
    for &k in &idx {
        let (a, b) = (pred.get(k), gt.get(k));
        for v in [a, b] {
            if (norm3(&v) - 1.0).abs() > 1e-3 {
                return invalid_input(format!("non-unit normal {v:?} at pixel {k}"));
            }
        }
        let ang = norm3(&cross3(&a, &b)).atan2(dot3(&a, &b)).to_degrees();
        sum += ang;
        if ang < t_deg {
            within += 1;
        }
    }
    Ok(NormalAngleResult { mean_angle_deg: sum / idx.len() as f64, pct_within: within as f64 / idx.len() as f64, pixels: idx.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Scale and shift removed by least squares.
    Ssi,
    /// Scale removed by least squares.
    Si,
}

/// The space in which the prediction is expressed and aligned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredSpace {
    #[default]
    Depth,
    /// Aligned against `1 / gt`, then inverted for the depth metrics.
    Disparity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub pred_space: PredSpace,
    pub ord: PairSampleConfig,
    pub ord_tau: f64,
    pub d3r: D3rConfig,
    pub dbe: DbeConfig,
    pub angle_threshold_deg: f64,
}

impl EvalConfig {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            pred_space: PredSpace::Depth,
            ord: PairSampleConfig { pair_count: DEFAULT_ORD_PAIRS, ..PairSampleConfig::default() },
            ord_tau: DEFAULT_ORD_TAU,
            d3r: D3rConfig::default(),
            dbe: DbeConfig::default(),
            angle_threshold_deg: DEFAULT_ANGLE_THRESHOLD_DEG,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub mode: EvalMode,
    pub space: PredSpace,
    pub scale: f64,
    pub shift: f64,
    pub clamped_scale: bool,
    /// Aligned depths that were non-positive and raised to a small floor.
    pub clamped_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alignment: Alignment,
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub ord: f64,
    pub d3r: D3rResult,
    pub dbe: DbeResult,
    pub normals: Option<NormalAngleResult>,
    pub intrinsics: CameraIntrinsics,
    pub default_intrinsics: bool,
}

fn align_prediction(pred: &ScalarGrid, gt: &ScalarGrid, mask: &ValidMask, cfg: &EvalConfig) -> Result<(ScalarGrid, Alignment)> {
    let target = match cfg.pred_space {
        PredSpace::Depth => gt.clone(),
        PredSpace::Disparity => gt.map(|t| if t > 0.0 { 1.0 / t } else { 0.0 })?,
    };
    let fit = match cfg.mode {
        EvalMode::Ssi => fit_scale_shift(pred, &target, mask)?,
        EvalMode::Si => {
            let c = fit_scale_only(&target, pred, mask)?;
            AffineFit { a: c, b: 0.0, residual_sse: f64::NAN, clamped: false }
        }
    };
    let gt_min = mask.valid_indices().into_iter().map(|k| gt.data()[k]).fold(f64::INFINITY, f64::min);
    let floor = 1e-3 * gt_min;
    let mut clamped = 0usize;
    let data = pred
        .data()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if !mask.is_valid(k) {
                return 1.0;
            }
            let aligned = fit.apply(p);
            let depth = match cfg.pred_space {
                PredSpace::Depth => aligned,
                PredSpace::Disparity if aligned > 0.0 => 1.0 / aligned,
                PredSpace::Disparity => 0.0,
            };
            if depth < floor || !depth.is_finite() {
                clamped += 1;
                floor
            } else {
                depth
            }
        })
        .collect();
    let alignment = Alignment {
        mode: cfg.mode,
        space: cfg.pred_space,
        scale: fit.a,
        shift: fit.b,
        clamped_scale: fit.clamped,
        clamped_pixels: clamped,
    };
    Ok((ScalarGrid::new(pred.width(), pred.height(), data)?, alignment))
}

/// Aligns the prediction per `cfg.mode` and computes every metric in depth
/// space. Ground-truth normals default to those of the ground-truth depth;
/// intrinsics default to [`CameraIntrinsics::default_for`].
pub fn evaluate_all(
    pred: &ScalarGrid,
    gt_depth: &ScalarGrid,
    gt_normals: Option<&NormalGrid>,
    intrinsics: Option<&CameraIntrinsics>,
    mask: &ValidMask,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    pred.check_same_shape(gt_depth, "evaluate")?;
    mask.check_gates(pred)?;
    for k in mask.valid_indices() {
        let t = gt_depth.data()[k];
        if t <= 0.0 || !t.is_finite() {
            return invalid_input(format!("ground-truth depth must be positive, got {t} at pixel {k}"));
        }
    }
    let (aligned, alignment) = align_prediction(pred, gt_depth, mask, cfg)?;
    let k = match intrinsics {
        Some(k) => {
            k.check_image(pred.width(), pred.height())?;
            *k
        }
        None => CameraIntrinsics::default_for(pred.width(), pred.height()),
    };
    let pred_n = normals_from_depth(&aligned, &k, mask)?;
    let (gt_n, gt_valid) = match gt_normals {
        Some(n) => {
            if n.width() != pred.width() || n.height() != pred.height() {
                return invalid_arg("ground-truth normals do not match the depth size");
            }
            (n.clone(), mask.clone())
        }
        None => {
            let f = normals_from_depth(gt_depth, &k, mask)?;
            (f.normals, f.valid)
        }
    };
    let nmask = pred_n.valid.and(&gt_valid)?.and(mask)?;
    let normals = if nmask.count() > 0 {
        Some(normal_angle_metrics(&pred_n.normals, &gt_n, &nmask, cfg.angle_threshold_deg)?)
    } else {
        None
    };
    Ok(EvalReport {
        rmse: rmse(&aligned, gt_depth, mask)?,
        abs_rel: abs_rel(&aligned, gt_depth, mask)?,
        delta1: delta1(&aligned, gt_depth, mask)?,
        ord: ordinal_error(&aligned, gt_depth, mask, &cfg.ord, cfg.ord_tau)?,
        d3r: d3r(&aligned, gt_depth, mask, &cfg.d3r)?,
        dbe: dbe(&aligned, gt_depth, mask, &cfg.dbe)?,
        normals,
        alignment,
        intrinsics: k,
        default_intrinsics: intrinsics.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> ScalarGrid {
        ScalarGrid::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn all(g: &ScalarGrid) -> ValidMask {
        ValidMask::for_grid(g)
    }

    fn scene(w: usize, h: usize) -> ScalarGrid {
        ScalarGrid::from_fn(w, h, |r, c| {
            let base = 3.0 + 0.02 * r as f64 + 0.01 * c as f64;
            if (c as f64 - 0.6 * w as f64).powi(2) + (r as f64 - 0.5 * h as f64).powi(2) < (0.2 * w as f64).powi(2) {
                base - 1.5 + 0.003 * ((r * 7 + c * 3) % 5) as f64
            } else {
                base
            }
        })
        .unwrap()
    }

    #[test]
    fn depth_error_examples() {
        let g = row(&[3.0, 4.0]);
        assert_eq!(rmse(&g, &g, &all(&g)).unwrap(), 0.0);
        assert_eq!(rmse(&g.map(|v| v + 3.0).unwrap(), &g, &all(&g)).unwrap(), 3.0);
        assert!((rmse(&row(&[0.0, 0.0]), &g, &all(&g)).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(abs_rel(&g, &g, &all(&g)).unwrap(), 0.0);
        assert!((abs_rel(&g.map(|v| 1.1 * v).unwrap(), &g, &all(&g)).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(abs_rel(&row(&[1.0, 3.0]), &row(&[2.0, 2.0]), &all(&g)).unwrap(), 0.5);
        assert_eq!(delta1(&g, &g, &all(&g)).unwrap(), 1.0);
        assert_eq!(delta1(&g.map(|v| 1.3 * v).unwrap(), &g, &all(&g)).unwrap(), 0.0);
        assert_eq!(delta1(&row(&[1.2, 2.6]), &row(&[1.0, 2.0]), &all(&g)).unwrap(), 0.5);
        assert!(matches!(rmse(&g, &g, &ValidMask::new(2, 1, vec![false; 2]).unwrap()), Err(Error::InsufficientData(_))));
        assert!(matches!(abs_rel(&g, &row(&[0.0, 1.0]), &all(&g)), Err(Error::InvalidInput(_))));
        assert!(matches!(delta1(&row(&[-1.0, 1.0]), &g, &all(&g)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ordinal_error_examples() {
        let gt = ScalarGrid::from_fn(6, 6, |r, c| 1.0 + 0.1 * (r * 6 + c) as f64).unwrap();
        let mask = all(&gt);
        let cfg = PairSampleConfig { pair_count: 400, seed: 1, delta: 0.01 };
        assert_eq!(ordinal_error(&gt, &gt, &mask, &cfg, 1.03).unwrap(), 0.0);
        // Inverting around a large constant keeps every ratio away from the tie band.
        let inv = gt.map(|v| 100.0 - 20.0 * v).unwrap();
        let e = ordinal_error(&inv, &gt, &mask, &cfg, 1.03).unwrap();
        let sample = sample_pairs(&mask, 400, 1).unwrap();
        let oracle = sample
            .pairs
            .iter()
            .filter(|q| ratio_relation(inv.data()[q.i], inv.data()[q.j], 1.03) != ratio_relation(gt.data()[q.i], gt.data()[q.j], 1.03))
            .count() as f64
            / 400.0;
        assert_eq!(e, oracle);
        assert!(e > 0.9);
    }

    #[test]
    fn ordinal_error_four_pixel_enumeration() {
        // gt relations: 1.00 ~ 1.02 equal; the rest ordered. pred = gt^2 turns
        // the equal pair (ratio 1.0404) into an ordered one.
        let gt = row(&[1.0, 1.02, 2.0, 4.0]);
        let pred = gt.map(|v| v * v).unwrap();
        let cfg = PairSampleConfig { pair_count: 6, seed: 3, delta: 0.01 };
        let e = ordinal_error(&pred, &gt, &all(&gt), &cfg, 1.03).unwrap();
        let mut wrong = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let (p, t) = (pred.data(), gt.data());
                if ratio_relation(p[i], p[j], 1.03) != ratio_relation(t[i], t[j], 1.03) {
                    wrong += 1;
                }
            }
        }
        assert_eq!(wrong, 1);
        assert_eq!(e, 1.0 / 6.0);
    }

    #[test]
    fn d3r_examples() {
        let gt = scene(48, 48);
        let mask = all(&gt);
        let cfg = D3rConfig::default();
        let same = d3r(&gt, &gt, &mask, &cfg).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.flagged_pairs > 0);
        let flipped = gt.map(|v| 10.0 - v).unwrap();
        assert_eq!(d3r(&flipped, &gt, &mask, &cfg).unwrap().value, 1.0);

        let two = d3r(&row(&[2.0, 1.0]), &row(&[1.0, 2.0]), &ValidMask::all_valid(2, 1), &cfg).unwrap();
        assert_eq!((two.value, two.flagged_pairs), (1.0, 1));

        let flat = ScalarGrid::filled(8, 8, 2.0);
        let r = d3r(&flat, &flat, &all(&flat), &cfg).unwrap();
        assert!(r.no_flagged_pairs && r.value == 0.0);
        assert!(d3r(&row(&[1.0]), &row(&[1.0]), &ValidMask::all_valid(1, 1), &cfg).is_err());
    }

    fn brute_distance(features: &ValidMask) -> Vec<f64> {
        let (w, h) = (features.width(), features.height());
        let pts: Vec<(usize, usize)> = features.valid_indices().into_iter().map(|k| (k / w, k % w)).collect();
        (0..w * h)
            .map(|k| {
                let (r, c) = (k / w, k % w);
                pts.iter()
                    .map(|&(pr, pc)| ((r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(
            w in 1usize..14, h in 1usize..14, bits in proptest::collection::vec(0u8..10, 196)
        ) {
            let features = ValidMask::from_fn(w, h, |r, c| bits[r * 14 + c] == 0);
            let fast = distance_transform(&features);
            let slow = brute_distance(&features);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a == b) || (a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }

        #[test]
        fn ssi_metrics_affine_invariant(a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let gt = scene(32, 32);
            let pred = gt.map(|v| v + 0.05 * (v * 13.0).sin()).unwrap();
            let mask = all(&gt);
            let cfg = EvalConfig::new(EvalMode::Ssi);
            let base = evaluate_all(&pred, &gt, None, None, &mask, &cfg).unwrap();
            let moved = evaluate_all(&pred.map(|v| a * v + b).unwrap(), &gt, None, None, &mask, &cfg).unwrap();
            prop_assert!((base.rmse - moved.rmse).abs() < 1e-9);
            prop_assert!((base.abs_rel - moved.abs_rel).abs() < 1e-9);
            prop_assert_eq!(base.delta1, moved.delta1);
        }
    }

    #[test]
    fn edge_extraction_floor_and_quantile() {
        let flat = ScalarGrid::filled(10, 10, 2.0);
        assert_eq!(depth_edges(&flat, &all(&flat), &DbeConfig::default()).unwrap().count(), 0);
        let step = ScalarGrid::from_fn(32, 16, |_, c| if c < 12 { 1.0 } else { 2.0 }).unwrap();
        let e = depth_edges(&step, &all(&step), &DbeConfig::default()).unwrap();
        assert_eq!(e.count(), 16);
        assert!((0..16).all(|r| e.is_valid(r * 32 + 11)));
    }

    #[test]
    fn dbe_examples() {
        let cfg = DbeConfig::default();
        let gt = ScalarGrid::from_fn(40, 20, |_, c| if c < 15 { 1.0 } else { 3.0 }).unwrap();
        let mask = all(&gt);
        let same = dbe(&gt, &gt, &mask, &cfg).unwrap();
        assert_eq!((same.acc, same.comp), (0.0, 0.0));

        let shifted = ScalarGrid::from_fn(40, 20, |_, c| if c < 18 { 1.0 } else { 3.0 }).unwrap();
        let r = dbe(&shifted, &gt, &mask, &cfg).unwrap();
        // Oracle: brute-force distances between the two edge columns.
        let pe = depth_edges(&shifted, &mask, &cfg).unwrap();
        let ge = depth_edges(&gt, &mask, &cfg).unwrap();
        let to_gt = brute_distance(&ge);
        let oracle: f64 = pe.valid_indices().iter().map(|&k| to_gt[k].min(10.0)).sum::<f64>() / pe.count() as f64;
        assert_eq!(oracle, 3.0);
        assert_eq!((r.acc, r.comp), (3.0, 3.0));

        let flat = ScalarGrid::filled(40, 20, 2.0);
        let r = dbe(&flat, &gt, &mask, &cfg).unwrap();
        assert!(r.acc_vacuous && !r.comp_vacuous);
        assert_eq!((r.acc, r.comp), (10.0, 10.0));
    }

    #[test]
    fn normal_angle_examples() {
        let facing = NormalGrid::facing_camera(4, 1);
        let mask = ValidMask::all_valid(4, 1);
        let r = normal_angle_metrics(&facing, &facing, &mask, 11.25).unwrap();
        assert_eq!((r.mean_angle_deg, r.pct_within), (0.0, 1.0));

        let side = NormalGrid::new(4, 1, vec![[1.0, 0.0, 0.0]; 4]).unwrap();
        let r = normal_angle_metrics(&side, &facing, &mask, 11.25).unwrap();
        assert!((r.mean_angle_deg - 90.0).abs() < 1e-12 && r.pct_within == 0.0);

        let tilt = |deg: f64| {
            let t = deg.to_radians();
            [t.sin(), 0.0, -t.cos()]
        };
        let mixed = NormalGrid::new(4, 1, vec![tilt(5.0), tilt(5.0), tilt(20.0), tilt(20.0)]).unwrap();
        let r = normal_angle_metrics(&mixed, &facing, &mask, 11.25).unwrap();
        assert!((r.mean_angle_deg - 12.5).abs() < 1e-12);
        assert_eq!(r.pct_within, 0.5);

        let bad = NormalGrid::from_raw(4, 1, vec![[0.0, 0.0, -1.1]; 4]);
        assert!(matches!(normal_angle_metrics(&bad, &facing, &mask, 11.25), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn evaluate_examples() {
        let gt = scene(32, 32);
        let mask = all(&gt);
        let si = EvalConfig::new(EvalMode::Si);
        let same = evaluate_all(&gt, &gt, None, None, &mask, &si).unwrap();
        assert!(same.rmse < 1e-12 && same.abs_rel < 1e-12);
        assert_eq!(same.delta1, 1.0);
        assert_eq!(same.d3r.value, 0.0);
        assert_eq!(same.ord, 0.0);
        assert!(same.normals.unwrap().mean_angle_deg < 1e-6);

        let doubled = evaluate_all(&gt.map(|v| 2.0 * v).unwrap(), &gt, None, None, &mask, &si).unwrap();
        assert!((doubled.rmse - same.rmse).abs() < 1e-12);
        assert!((doubled.alignment.scale - 0.5).abs() < 1e-12);

        let affine = gt.map(|v| 2.0 * v + 1.0).unwrap();
        let ssi = EvalConfig::new(EvalMode::Ssi);
        let r = evaluate_all(&affine, &gt, None, None, &mask, &ssi).unwrap();
        assert!(r.rmse < 1e-9 && r.delta1 == 1.0);

        // Scale-only oracle: residual of the best c * (2 gt + 1).
        let (mut stt, mut stp) = (0.0, 0.0);
        for (&p, &t) in affine.data().iter().zip(gt.data()) {
            stt += p * p;
            stp += p * t;
        }
        let c = stp / stt;
        let oracle = (affine.data().iter().zip(gt.data()).map(|(&p, &t)| (c * p - t).powi(2)).sum::<f64>() / gt.len() as f64).sqrt();
        let r = evaluate_all(&affine, &gt, None, None, &mask, &si).unwrap();
        assert!(oracle > 1e-3);
        assert!((r.rmse - oracle).abs() < 1e-12);
    }

    #[test]
    fn disparity_space_alignment() {
        let gt = scene(32, 32);
        let mask = all(&gt);
        let disp = gt.map(|v| 0.3 / v + 0.2).unwrap();
        let cfg = EvalConfig { pred_space: PredSpace::Disparity, ..EvalConfig::new(EvalMode::Ssi) };
        let r = evaluate_all(&disp, &gt, None, None, &mask, &cfg).unwrap();
        assert!(r.rmse < 1e-9, "{}", r.rmse);
        assert_eq!(r.alignment.clamped_pixels, 0);
    }
}
