//! Two-stage inference: low- and high-resolution SSI estimates are aligned,
//! stacked with RGB, and fed to the scale-invariant network.

use serde::{Deserialize, Serialize};

use crate::align::{align_mean_scale, fit_scale_only};
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{normals_from_depth, point_cloud_from_depth};
use crate::grid::{resize_grid, CameraIntrinsics, MultiGrid, NormalGrid, PointCloud, ScalarGrid, ValidMask};
use crate::metrics::{distance_transform, top_fraction_edges};
use crate::toy_model::ToyNet;

pub const RESOLUTION_PROXY: &str = "edge-distance-proxy/v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionChoice {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    /// Largest distance from any pixel to the nearest edge, pixels.
    pub d_max: f64,
    /// No edges were found; the native resolution is returned.
    pub edgeless: bool,
}

fn round_to_32(native: usize, scaled: f64, max_factor: f64) -> usize {
    let lo = native.div_ceil(32) * 32;
    let hi = ((native as f64 * max_factor) / 32.0).floor() as usize * 32;
    if lo > hi {
        return native;
    }
    (((scaled / 32.0).round() as usize) * 32).clamp(lo, hi)
}

/// Content-adaptive working resolution from local edge density.
///
/// Edges are the top 10% of forward-difference luminance gradients. With
/// `d_max` the largest pixel-to-edge distance, the image is scaled by
/// `clamp(receptive_field / (2 d_max), 1, max_factor)` and each side rounded
/// to a multiple of 32 inside `[native, max_factor * native]` (native when no
/// such multiple exists).
pub fn select_high_resolution(rgb: &MultiGrid, receptive_field: usize, max_factor: f64) -> Result<ResolutionChoice> {
    if receptive_field < 32 {
        return invalid_arg(format!("receptive field must be at least 32, got {receptive_field}"));
    }
    if !(max_factor >= 1.0 && max_factor.is_finite()) {
        return invalid_arg(format!("max_factor must be at least 1, got {max_factor}"));
    }
    let (w, h) = (rgb.width(), rgb.height());
    if w == 0 || h == 0 {
        return invalid_arg("empty image");
    }
    let lum = rgb.luminance();
    let d = lum.data();
    let mut mag = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            let gx = if c + 1 < w { d[k + 1] - d[k] } else { 0.0 };
            let gy = if r + 1 < h { d[k + w] - d[k] } else { 0.0 };
            mag[k] = gx.hypot(gy);
        }
    }
    let edges = top_fraction_edges(w, h, &mag, &ValidMask::all_valid(w, h), 0.1, 1e-3)?;
    if edges.count() == 0 {
        return Ok(ResolutionChoice { width: w, height: h, scale: 1.0, d_max: f64::INFINITY, edgeless: true });
    }
    let d_max = distance_transform(&edges).into_iter().fold(0.0, f64::max);
    let scale = if d_max == 0.0 { max_factor } else { (receptive_field as f64 / (2.0 * d_max)).clamp(1.0, max_factor) };
    Ok(ResolutionChoice {
        width: round_to_32(w, w as f64 * scale, max_factor),
        height: round_to_32(h, h as f64 * scale, max_factor),
        scale,
        d_max,
        edgeless: false,
    })
}

/// Stacks `[R, G, B, O^L, O^H]`.
pub fn assemble_si_input(rgb: &MultiGrid, o_low: &ScalarGrid, o_high: &ScalarGrid) -> Result<MultiGrid> {
    if rgb.channels() != 3 {
        return invalid_arg(format!("expected a 3-channel image, got {}", rgb.channels()));
    }
    for (name, g) in [("low", o_low), ("high", o_high)] {
        if g.width() != rgb.width() || g.height() != rgb.height() {
            return invalid_arg(format!(
                "SSI {name} input is {}x{}, image is {}x{}",
                g.width(),
                g.height(),
                rgb.width(),
                rgb.height()
            ));
        }
    }
    let mut planes = rgb.channel_grids();
    planes.push(o_low.clone());
    planes.push(o_high.clone());
    MultiGrid::from_channels(&planes)
}

/// Ground-truth inverse depth rescaled into the frame of `o_low`.
pub fn fix_gt_scale(gt_inverse_depth: &ScalarGrid, o_low: &ScalarGrid, mask: &ValidMask) -> Result<ScalarGrid> {
    let c = fit_scale_only(o_low, gt_inverse_depth, mask)?;
    gt_inverse_depth.map(|v| c * v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    Bilinear,
    /// Box filter over each output pixel's footprint.
    Area,
}

/// Separable area-weighted resampling.
pub fn resize_area(grid: &ScalarGrid, new_width: usize, new_height: usize) -> Result<ScalarGrid> {
    if new_width == 0 || new_height == 0 {
        return invalid_arg("target size must be positive");
    }
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let (a, b) = (o as f64 * ratio, (o + 1) as f64 * ratio);
                let mut taps = Vec::new();
                let mut i = a.floor() as usize;
                while (i as f64) < b && i < src {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / ratio));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (w, h) = (grid.width(), grid.height());
    let (wx, wy) = (weights(w, new_width), weights(h, new_height));
    let d = grid.data();
    let mut tmp = vec![0.0; new_width * h];
    for r in 0..h {
        for (c, taps) in wx.iter().enumerate() {
            tmp[r * new_width + c] = taps.iter().map(|&(i, wt)| wt * d[r * w + i]).sum();
        }
    }
    let mut out = vec![0.0; new_width * new_height];
    for (r, taps) in wy.iter().enumerate() {
        for c in 0..new_width {
            out[r * new_width + c] = taps.iter().map(|&(i, wt)| wt * tmp[i * new_width + c]).sum();
        }
    }
    ScalarGrid::new(new_width, new_height, out)
}

pub fn resample(grid: &ScalarGrid, width: usize, height: usize, mode: Resample) -> Result<ScalarGrid> {
    if grid.width() == width && grid.height() == height {
        return Ok(grid.clone());
    }
    match mode {
        Resample::Bilinear => resize_grid(grid, width, height),
        Resample::Area => resize_area(grid, width, height),
    }
}

pub enum SsiSource<'a> {
    /// Precomputed low- and high-resolution SSI estimates of any size.
    Files { low: ScalarGrid, high: ScalarGrid },
    /// An RGB-input SSI network run at both resolutions.
    Net(&'a ToyNet),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    /// Resolution of the low-resolution SSI pass.
    pub low_resolution: (usize, usize),
    pub receptive_field: usize,
    pub max_factor: f64,
    /// How SSI estimates are brought back to the native size.
    pub resample: Resample,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self { low_resolution: (64, 64), receptive_field: 64, max_factor: 2.0, resample: Resample::Bilinear }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageOutput {
    pub inverse_depth: ScalarGrid,
    pub depth: ScalarGrid,
    pub normals: NormalGrid,
    pub normals_valid: ValidMask,
    pub point_cloud: PointCloud,
    pub o_low: ScalarGrid,
    pub o_high: ScalarGrid,
    /// `O^H` was constant and only shifted onto `O^L`.
    pub o_high_flat: bool,
    /// High-resolution target when the SSI network was run.
    pub resolution: Option<ResolutionChoice>,
    pub intrinsics: CameraIntrinsics,
}

pub fn run_two_stage(
    rgb: &MultiGrid,
    source: SsiSource<'_>,
    si_net: &ToyNet,
    intrinsics: Option<&CameraIntrinsics>,
    cfg: &TwoStageConfig,
) -> Result<TwoStageOutput> {
    let (w, h) = (rgb.width(), rgb.height());
    if rgb.channels() != 3 {
        return invalid_arg(format!("expected a 3-channel image, got {}", rgb.channels()));
    }
    if si_net.config().in_channels() != 5 {
        return invalid_arg(format!("SI network expects {} channels; the pipeline feeds 5", si_net.config().in_channels()));
    }
    let (low, high, resolution) = match source {
        SsiSource::Files { low, high } => (low, high, None),
        SsiSource::Net(net) => {
            if net.config().in_channels() != 3 {
                return invalid_arg(format!("SSI network expects {} channels; RGB has 3", net.config().in_channels()));
            }
            let (lw, lh) = cfg.low_resolution;
            let low = net.forward(&rgb.resize(lw, lh)?)?;
            let choice = select_high_resolution(rgb, cfg.receptive_field, cfg.max_factor)?;
            let high = net.forward(&rgb.resize(choice.width, choice.height)?)?;
            (low, high, Some(choice))
        }
    };
    let o_low = resample(&low, w, h, cfg.resample)?;
    let o_high_native = resample(&high, w, h, cfg.resample)?;
    let all = ValidMask::all_valid(w, h);
    // A flat high-resolution estimate has no scale to fit; shift it onto the low mean instead.
    let (o_high, o_high_flat) = match align_mean_scale(&o_high_native, &o_low, &all) {
        Ok(g) => (g, false),
        Err(Error::DegenerateFit(_)) => {
            let mean = |g: &ScalarGrid| g.data().iter().sum::<f64>() / g.len() as f64;
            let shift = mean(&o_low) - mean(&o_high_native);
            (o_high_native.map(|v| v + shift)?, true)
        }
        Err(e) => return Err(e),
    };
    let input = assemble_si_input(rgb, &o_low, &o_high)?;
    let inverse_depth = si_net.forward(&input)?;
    if let Some(v) = inverse_depth.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::NonFinite(format!("SI network produced inverse depth {v}")));
    }
    let depth = inverse_depth.map(|q| 1.0 / q)?;
    let k = match intrinsics {
        Some(k) => {
            k.check_image(w, h)?;
            *k
        }
        None => CameraIntrinsics::default_for(w, h),
    };
    let field = normals_from_depth(&depth, &k, &all)?;
    let point_cloud = point_cloud_from_depth(&depth, &k, &all, Some(rgb))?;
    Ok(TwoStageOutput {
        inverse_depth,
        depth,
        normals: field.normals,
        normals_valid: field.valid,
        point_cloud,
        o_low,
        o_high,
        o_high_flat,
        resolution,
        intrinsics: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> MultiGrid {
        let g = ScalarGrid::from_fn(w, h, f).unwrap();
        MultiGrid::from_channels(&[g.clone(), g.clone(), g]).unwrap()
    }

    #[test]
    fn centered_edge_resolution() {
        let img = gray(256, 256, |_, c| if c < 128 { 0.2 } else { 0.8 });
        let r = select_high_resolution(&img, 384, 2.0).unwrap();
        // Oracle: edge column 127; farthest pixel is column 255.
        let edges = ValidMask::from_fn(256, 256, |_, c| c == 127);
        let d = distance_transform(&edges).into_iter().fold(0.0, f64::max);
        assert_eq!(d, 128.0);
        assert_eq!(r.d_max, 128.0);
        assert_eq!(r.scale, 1.5);
        assert_eq!((r.width, r.height), (384, 384));
        assert!(!r.edgeless);
    }

    #[test]
    fn dense_and_flat_resolution() {
        let checker = gray(64, 64, |r, c| ((r + c) % 2) as f64);
        let r = select_high_resolution(&checker, 64, 3.0).unwrap();
        assert_eq!(r.scale, 3.0);
        assert_eq!((r.width, r.height), (192, 192));
        let flat = gray(50, 40, |_, _| 0.5);
        let r = select_high_resolution(&flat, 64, 3.0).unwrap();
        assert!(r.edgeless);
        assert_eq!((r.width, r.height), (50, 40));
        assert!(select_high_resolution(&flat, 16, 3.0).is_err());
    }

    #[test]
    fn assembly_channels() {
        let rgb = gray(6, 5, |r, c| (r + c) as f64 / 10.0);
        let lo = ScalarGrid::from_fn(6, 5, |r, c| (r * c) as f64 * 0.01).unwrap();
        let x = assemble_si_input(&rgb, &lo, &lo).unwrap();
        assert_eq!(x.channels(), 5);
        assert_eq!(x.plane(3), x.plane(4));
        assert_eq!(x.channel(3), lo);
        assert!(assemble_si_input(&rgb, &ScalarGrid::zeros(5, 5), &lo).is_err());
    }

    #[test]
    fn gt_scale_examples() {
        let gt = ScalarGrid::from_fn(7, 7, |r, c| 0.1 + 0.02 * (r * 7 + c) as f64).unwrap();
        let mask = ValidMask::for_grid(&gt);
        let tripled = gt.map(|v| 3.0 * v).unwrap();
        let out = fix_gt_scale(&gt, &tripled, &mask).unwrap();
        assert!(out.data().iter().zip(tripled.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(fix_gt_scale(&gt, &gt, &mask).unwrap(), gt);

        let noise = ScalarGrid::from_fn(7, 7, |r, c| ((r * 7 + c) as f64 * 1.7).sin()).unwrap();
        let out = fix_gt_scale(&gt, &noise, &mask).unwrap();
        let cost = |s: f64| gt.data().iter().zip(noise.data()).map(|(g, o)| (s * g - o).powi(2)).sum::<f64>();
        let (best, _) = (0..=4000).map(|i| -2.0 + i as f64 * 0.001).map(|s| (s, cost(s))).fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let c = out.data()[0] / gt.data()[0];
        assert!((c - best).abs() <= 0.0005 + 1e-12);
        assert!(cost(c) <= cost(best));
    }

    #[test]
    fn area_resize_preserves_mean() {
        let g = ScalarGrid::from_fn(12, 9, |r, c| (r * 12 + c) as f64).unwrap();
        let small = resize_area(&g, 4, 3).unwrap();
        let mean = |x: &ScalarGrid| x.data().iter().sum::<f64>() / x.len() as f64;
        assert!((mean(&small) - mean(&g)).abs() < 1e-9);
        assert!((small.get(0, 0) - (0.0 + 1.0 + 2.0 + 12.0 + 13.0 + 14.0 + 24.0 + 25.0 + 26.0) / 9.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scene_two_stage() {
        let rgb = gray(32, 32, |_, _| 0.5);
        let disp = ScalarGrid::filled(32, 32, 0.4);
        let si = ToyNet::zeros(crate::toy_model::ToyConfig::with_input(5)).unwrap();
        let out = run_two_stage(&rgb, SsiSource::Files { low: disp.clone(), high: disp }, &si, None, &TwoStageConfig::default()).unwrap();
        assert!(out.depth.data().iter().all(|&d| d == 2.0));
        assert!(out.normals.vectors().iter().all(|n| n[2] < -0.999_999));
        assert_eq!(out.point_cloud.len(), 32 * 32);
        assert!(out.o_high_flat);
    }
}
