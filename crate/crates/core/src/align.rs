//! Closed-form least-squares alignment: scale-and-shift, scale-only, and the
//! mean-scale alignment of a high-resolution SSI map onto a low-resolution one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarGrid, ValidMask};

/// Scale used in place of a non-positive least-squares slope.
pub const MIN_SCALE: f64 = 1e-6;

/// Fitted `x -> a * x + b` onto a target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    pub residual_sse: f64,
    /// The unconstrained slope was `<= 0` and `a` was clamped to [`MIN_SCALE`].
    pub clamped: bool,
}

impl AffineFit {
    pub const IDENTITY: AffineFit = AffineFit { a: 1.0, b: 0.0, residual_sse: 0.0, clamped: false };

    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

/// Mean-centered second moments over the valid pixels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Moments {
    pub n: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub sxx: f64,
    pub sxy: f64,
}

pub(crate) fn moments(x: &[f64], y: &[f64], mask: &ValidMask) -> Moments {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..x.len() {
        if mask.is_valid(i) {
            n += 1;
            sx += x[i];
            sy += y[i];
        }
    }
    let (mean_x, mean_y) = if n > 0 { (sx / n as f64, sy / n as f64) } else { (0.0, 0.0) };
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..x.len() {
        if mask.is_valid(i) {
            let dx = x[i] - mean_x;
            sxx += dx * dx;
            sxy += dx * (y[i] - mean_y);
        }
    }
    Moments { n, mean_x, mean_y, sxx, sxy }
}

/// `true` when the centered sum of squares is indistinguishable from rounding noise.
pub(crate) fn is_degenerate(m: &Moments, x: &[f64], mask: &ValidMask) -> bool {
    let (lo, hi) = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask.is_valid(i))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &v)| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    // The spread test is exact for constant data; the sum test catches spreads
    // that are nonzero only through rounding of the mean.
    hi - lo <= 8.0 * f64::EPSILON * scale || m.sxx <= m.n as f64 * (4.0 * f64::EPSILON * scale).powi(2)
}

fn check_inputs(pred: &ScalarGrid, target: &ScalarGrid, mask: &ValidMask) -> Result<()> {
    pred.check_same_shape(target, "alignment")?;
    mask.check_gates(pred)
}

/// Least-squares `(a, b)` minimizing `sum (a * pred + b - target)^2` over valid
/// pixels, subject to `a > 0`.
pub fn fit_scale_shift(pred: &ScalarGrid, target: &ScalarGrid, mask: &ValidMask) -> Result<AffineFit> {
    check_inputs(pred, target, mask)?;
    let (x, y) = (pred.data(), target.data());
    let m = moments(x, y, mask);
    if m.n < 2 {
        return Err(Error::InsufficientData(format!(
            "scale/shift fit needs at least 2 valid pixels, got {}",
            m.n
        )));
    }
    if is_degenerate(&m, x, mask) {
        return Err(Error::DegenerateFit("prediction is constant over the valid pixels".into()));
    }
    let unconstrained = m.sxy / m.sxx;
    let (a, clamped) = if unconstrained > 0.0 { (unconstrained, false) } else { (MIN_SCALE, true) };
    let b = m.mean_y - a * m.mean_x;
    let residual_sse = (0..x.len())
        .filter(|&i| mask.is_valid(i))
        .map(|i| {
            let r = a * x[i] + b - y[i];
            r * r
        })
        .sum();
    Ok(AffineFit { a, b, residual_sse, clamped })
}

pub fn apply_affine(grid: &ScalarGrid, fit: &AffineFit) -> ScalarGrid {
    ScalarGrid::from_raw(grid.width(), grid.height(), grid.data().iter().map(|&v| fit.apply(v)).collect())
}

/// Scale `c` minimizing `sum (c * target - reference)^2`, i.e.
/// `sum(target * reference) / sum(target^2)`. The sign is not constrained.
pub fn fit_scale_only(reference: &ScalarGrid, target: &ScalarGrid, mask: &ValidMask) -> Result<f64> {
    check_inputs(reference, target, mask)?;
    let (mut stt, mut str_) = (0.0, 0.0);
    let mut n = 0usize;
    for i in 0..target.len() {
        if mask.is_valid(i) {
            let t = target.data()[i];
            stt += t * t;
            str_ += t * reference.data()[i];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("scale fit has no valid pixels".into()));
    }
    if stt <= 0.0 {
        return Err(Error::DegenerateFit("scale fit target is zero over the valid pixels".into()));
    }
    Ok(str_ / stt)
}

/// Expresses `high` in the scale/shift frame of `low`.
pub fn align_mean_scale(high: &ScalarGrid, low: &ScalarGrid, mask: &ValidMask) -> Result<ScalarGrid> {
    let fit = fit_scale_shift(high, low, mask)?;
    Ok(apply_affine(high, &fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> ScalarGrid {
        ScalarGrid::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn sse(p: &[f64], t: &[f64], a: f64, b: f64) -> f64 {
        p.iter().zip(t).map(|(x, y)| (a * x + b - y).powi(2)).sum()
    }

    /// Brute-force minimum of the SSE over a regular grid of (a, b).
    fn grid_search(p: &[f64], t: &[f64], a_range: (f64, f64), b_range: (f64, f64), steps: usize) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            let a = a_range.0 + (a_range.1 - a_range.0) * i as f64 / steps as f64;
            for j in 0..=steps {
                let b = b_range.0 + (b_range.1 - b_range.0) * j as f64 / steps as f64;
                let e = sse(p, t, a, b);
                if e < best.0 {
                    best = (e, a, b);
                }
            }
        }
        best
    }

    #[test]
    fn exact_affine_relation() {
        let (p, t) = (row(&[1.0, 2.0, 3.0]), row(&[3.0, 5.0, 7.0]));
        let fit = fit_scale_shift(&p, &t, &ValidMask::for_grid(&p)).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-15 && (fit.b - 1.0).abs() < 1e-15);
        assert_eq!(fit.residual_sse, 0.0);
        assert!(!fit.clamped);
    }

    #[test]
    fn inexact_fit_matches_grid_search() {
        let (pv, tv) = ([0.0, 1.0, 2.0], [0.0, 1.5, 1.5]);
        // Oracle: 0.005-spaced grid over a in [0, 2], b in [-1, 1] puts its minimum at (0.75, 0.25).
        let (_, ga, gb) = grid_search(&pv, &tv, (0.0, 2.0), (-1.0, 1.0), 400);
        assert!((ga - 0.75).abs() < 1e-12 && (gb - 0.25).abs() < 1e-12);
        let fit = fit_scale_shift(&row(&pv), &row(&tv), &ValidMask::all_valid(3, 1)).unwrap();
        assert!((fit.a - 0.75).abs() < 1e-15);
        assert!((fit.b - 0.25).abs() < 1e-15);
    }

    #[test]
    fn negative_slope_is_clamped() {
        let (p, t) = (row(&[1.0, 2.0]), row(&[2.0, 1.0]));
        let m = moments(p.data(), t.data(), &ValidMask::for_grid(&p));
        assert!(m.sxy / m.sxx < 0.0);
        let fit = fit_scale_shift(&p, &t, &ValidMask::for_grid(&p)).unwrap();
        assert!(fit.clamped);
        assert_eq!(fit.a, MIN_SCALE);
        assert!((fit.b - (1.5 - 1.5 * MIN_SCALE)).abs() < 1e-15);
        assert!((fit.residual_sse - sse(p.data(), t.data(), fit.a, fit.b)).abs() < 1e-15);
    }

    #[test]
    fn fit_errors() {
        let p = row(&[2.0, 2.0, 2.0]);
        let t = row(&[1.0, 2.0, 3.0]);
        assert!(matches!(fit_scale_shift(&p, &t, &ValidMask::for_grid(&p)), Err(Error::DegenerateFit(_))));
        let p = row(&[0.1, 0.1, 0.1]);
        assert!(matches!(fit_scale_shift(&p, &t, &ValidMask::for_grid(&p)), Err(Error::DegenerateFit(_))));
        let one = ValidMask::new(3, 1, vec![false, true, false]).unwrap();
        assert!(matches!(fit_scale_shift(&t, &t, &one), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn mask_excludes_pixels() {
        let p = row(&[1.0, 2.0, 3.0, 100.0]);
        let t = row(&[3.0, 5.0, 7.0, -50.0]);
        let mask = ValidMask::new(4, 1, vec![true, true, true, false]).unwrap();
        let fit = fit_scale_shift(&p, &t, &mask).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-14 && fit.residual_sse < 1e-24);
    }

    #[test]
    fn apply_affine_examples() {
        let fit = |a, b| AffineFit { a, b, residual_sse: 0.0, clamped: false };
        assert_eq!(apply_affine(&row(&[0.0, 1.0]), &fit(2.0, 1.0)).data(), &[1.0, 3.0]);
        assert_eq!(apply_affine(&row(&[-1.0, 1.0]), &fit(0.5, 0.5)).data(), &[0.0, 1.0]);
        let g = row(&[0.3, -7.0, 2.5]);
        assert_eq!(apply_affine(&g, &AffineFit::IDENTITY), g);
    }

    #[test]
    fn scale_only_examples() {
        let all = ValidMask::all_valid(2, 1);
        assert_eq!(fit_scale_only(&row(&[2.0, 4.0]), &row(&[1.0, 2.0]), &all).unwrap(), 2.0);

        // 1-D grid search over s in [0, 4] with step 1e-4 as oracle.
        let search = |t: &[f64], r: &[f64]| {
            (0..=40_000)
                .map(|k| k as f64 * 1e-4)
                .min_by(|&a, &b| sse(t, r, a, 0.0).total_cmp(&sse(t, r, b, 0.0)))
                .unwrap()
        };
        let c = fit_scale_only(&row(&[0.0, 2.0]), &row(&[1.0, 1.0]), &all).unwrap();
        assert_eq!(c, 1.0);
        assert!((search(&[1.0, 1.0], &[0.0, 2.0]) - c).abs() < 1e-4);

        let c = fit_scale_only(&row(&[3.0, 5.0, 7.0]), &row(&[1.0, 2.0, 3.0]), &ValidMask::all_valid(3, 1)).unwrap();
        assert!((c - 34.0 / 14.0).abs() < 1e-15);
        assert!((search(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]) - c).abs() < 1e-4);

        assert!(matches!(
            fit_scale_only(&row(&[1.0, 1.0]), &row(&[0.0, 0.0]), &all),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn align_mean_scale_removes_affine() {
        let low = ScalarGrid::from_fn(8, 8, |r, c| ((r * 8 + c) as f64 * 0.21).sin()).unwrap();
        let high = low.map(|v| 2.0 * v + 3.0).unwrap();
        let mask = ValidMask::for_grid(&low);
        let out = align_mean_scale(&high, &low, &mask).unwrap();
        for (a, b) in out.data().iter().zip(low.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(align_mean_scale(&low, &low, &mask).unwrap().data().len(), 64);
    }

    #[test]
    fn align_mean_scale_with_detail_matches_fit_oracle() {
        let low = ScalarGrid::from_fn(8, 8, |r, c| (r + c) as f64 / 14.0).unwrap();
        let detail: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        let high = ScalarGrid::new(8, 8, low.data().iter().zip(&detail).map(|(l, d)| l + d).collect()).unwrap();
        let mask = ValidMask::for_grid(&low);
        let fit = fit_scale_shift(&high, &low, &mask).unwrap();
        let out = align_mean_scale(&high, &low, &mask).unwrap();
        let resid: f64 = out.data().iter().zip(low.data()).map(|(o, l)| (o - l).powi(2)).sum();
        assert!((resid - fit.residual_sse).abs() < 1e-12);
        // Refitting the output against low is the identity map.
        let again = fit_scale_shift(&out, &low, &mask).unwrap();
        assert!((again.a - 1.0).abs() < 1e-9 && again.b.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn recovers_exact_affine(vals in proptest::collection::vec(-5.0f64..5.0, 16), a in 0.01f64..50.0, b in -20.0f64..20.0) {
            let g = ScalarGrid::new(4, 4, vals).unwrap();
            let mask = ValidMask::for_grid(&g);
            prop_assume!(!is_degenerate(&moments(g.data(), g.data(), &mask), g.data(), &mask));
            let t = g.map(|v| a * v + b).unwrap();
            let fit = fit_scale_shift(&g, &t, &mask).unwrap();
            prop_assert!(((fit.a - a) / a).abs() < 1e-9);
            prop_assert!((fit.b - b).abs() <= 1e-9 * b.abs().max(1.0));
            let energy: f64 = t.data().iter().map(|v| v * v).sum();
            prop_assert!(fit.residual_sse < 1e-12 * energy);
        }

        #[test]
        fn closed_form_beats_brute_force_grid(vals in proptest::collection::vec(-2.0f64..2.0, 6), tv in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let p = row(&vals);
            let t = row(&tv);
            let mask = ValidMask::for_grid(&p);
            let m = moments(p.data(), t.data(), &mask);
            prop_assume!(m.sxx > 1e-3 && m.sxy / m.sxx > 1e-3);
            let fit = fit_scale_shift(&p, &t, &mask).unwrap();
            let (best, _, _) = grid_search(&vals, &tv, (fit.a / 2.0, 2.0 * fit.a), (fit.b - 1.0, fit.b + 1.0), 100);
            prop_assert!(fit.residual_sse <= best + 1e-12);
        }

        #[test]
        fn scale_only_recovers_scale(vals in proptest::collection::vec(0.1f64..5.0, 9), c in -10.0f64..10.0) {
            let g = ScalarGrid::new(3, 3, vals).unwrap();
            let scaled = g.map(|v| c * v).unwrap();
            let got = fit_scale_only(&scaled, &g, &ValidMask::for_grid(&g)).unwrap();
            prop_assert!((got - c).abs() < 1e-12);
        }

        #[test]
        fn align_is_idempotent(vals in proptest::collection::vec(-3.0f64..3.0, 16), lv in proptest::collection::vec(-3.0f64..3.0, 16)) {
            let high = ScalarGrid::new(4, 4, vals).unwrap();
            let low = ScalarGrid::new(4, 4, lv).unwrap();
            let mask = ValidMask::for_grid(&high);
            let m = moments(high.data(), low.data(), &mask);
            prop_assume!(m.sxx > 1e-3 && m.sxy / m.sxx > 1e-3);
            let once = align_mean_scale(&high, &low, &mask).unwrap();
            let twice = align_mean_scale(&once, &low, &mask).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn joint_affine_commutes_with_alignment(vals in proptest::collection::vec(-3.0f64..3.0, 16), lv in proptest::collection::vec(-3.0f64..3.0, 16), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let high = ScalarGrid::new(4, 4, vals).unwrap();
            let low = ScalarGrid::new(4, 4, lv).unwrap();
            let mask = ValidMask::for_grid(&high);
            let m = moments(high.data(), low.data(), &mask);
            prop_assume!(m.sxx > 1e-3 && m.sxy / m.sxx > 1e-3);
            let lhs = align_mean_scale(&high.map(|v| a * v + b).unwrap(), &low.map(|v| a * v + b).unwrap(), &mask).unwrap();
            let rhs = align_mean_scale(&high, &low, &mask).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - (a * r + b)).abs() < 1e-9 * (1.0 + l.abs()));
            }
        }
    }
}
