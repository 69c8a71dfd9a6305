//! Depth to normals, point clouds, and disparity.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::grid::{cross3, dot3, norm3, CameraIntrinsics, MultiGrid, NormalGrid, PointCloud, ScalarGrid, ValidMask};
use crate::io::rgb_to_bytes;

/// Finite-difference stencil for the surface tangents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalStencil {
    #[default]
    Central,
    Sobel,
}

/// Normals plus the validity channel (degenerate tangents or masked input).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub normals: NormalGrid,
    pub valid: ValidMask,
}

/// Linear combination of back-projected points: `sum w_k * z_k * ray_k`.
type Tangent = Vec<(usize, f64)>;

#[derive(Clone, Debug)]
struct PixelTerms {
    tu: Tangent,
    tv: Tangent,
    t_u: [f64; 3],
    t_v: [f64; 3],
    unit: [f64; 3],
    len: f64,
    sign: f64,
}

/// Forward pass state kept for the depth gradient of the normals.
#[derive(Clone, Debug)]
pub(crate) struct NormalPass {
    pub field: NormalField,
    rays: Vec<[f64; 3]>,
    terms: Vec<Option<PixelTerms>>,
}

fn check_depth(depth: &ScalarGrid, mask: &ValidMask) -> Result<()> {
    mask.check_gates(depth)?;
    for (i, &z) in depth.data().iter().enumerate() {
        if mask.is_valid(i) && z <= 0.0 {
            return invalid_input(format!("non-positive depth {z} at valid pixel {i}"));
        }
    }
    Ok(())
}

fn axis_tangent(mask: &ValidMask, w: usize, h: usize, r: usize, c: usize, horizontal: bool) -> Option<Tangent> {
    let at = |rr: isize, cc: isize| -> Option<usize> {
        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
            return None;
        }
        let idx = rr as usize * w + cc as usize;
        mask.is_valid(idx).then_some(idx)
    };
    let (r, c) = (r as isize, c as isize);
    let step = |k: isize| if horizontal { at(r, c + k) } else { at(r + k, c) };
    match (step(1), step(-1)) {
        (Some(p), Some(m)) => Some(vec![(p, 1.0), (m, -1.0)]),
        (Some(p), None) => Some(vec![(p, 1.0), (step(0)?, -1.0)]),
        (None, Some(m)) => Some(vec![(step(0)?, 1.0), (m, -1.0)]),
        (None, None) => None,
    }
}

fn sobel_tangent(mask: &ValidMask, w: usize, h: usize, r: usize, c: usize, horizontal: bool) -> Option<Tangent> {
    if r == 0 || c == 0 || r + 1 >= h || c + 1 >= w {
        return None;
    }
    let mut out = Vec::with_capacity(6);
    for (k, wt) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
        let (rp, cp, rm, cm) = if horizontal {
            (r as isize + k, c as isize + 1, r as isize + k, c as isize - 1)
        } else {
            (r as isize + 1, c as isize + k, r as isize - 1, c as isize + k)
        };
        let ip = rp as usize * w + cp as usize;
        let im = rm as usize * w + cm as usize;
        if !mask.is_valid(ip) || !mask.is_valid(im) {
            return None;
        }
        out.push((ip, wt));
        out.push((im, -wt));
    }
    Some(out)
}

fn eval_tangent(t: &Tangent, depth: &[f64], rays: &[[f64; 3]]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for &(idx, wt) in t {
        let s = wt * depth[idx];
        for k in 0..3 {
            acc[k] += s * rays[idx][k];
        }
    }
    acc
}

pub(crate) fn normal_pass(
    depth: &ScalarGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
    stencil: NormalStencil,
) -> Result<NormalPass> {
    check_depth(depth, mask)?;
    let (w, h) = (depth.width(), depth.height());
    if w < 2 || h < 2 {
        return crate::error::invalid_arg("normals need a grid of at least 2x2");
    }
    let rays: Vec<[f64; 3]> = (0..w * h)
        .map(|i| intrinsics.ray((i % w) as f64, (i / w) as f64))
        .collect();
    let z = depth.data();
    let mut vectors = Vec::with_capacity(w * h);
    let mut flags = Vec::with_capacity(w * h);
    let mut terms = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let pixel = mask.is_valid(idx).then(|| {
                let pick = |horizontal| match stencil {
                    NormalStencil::Sobel => sobel_tangent(mask, w, h, r, c, horizontal)
                        .or_else(|| axis_tangent(mask, w, h, r, c, horizontal)),
                    NormalStencil::Central => axis_tangent(mask, w, h, r, c, horizontal),
                };
                Some((pick(true)?, pick(false)?))
            });
            let computed = pixel.flatten().and_then(|(tu, tv)| {
                let t_u = eval_tangent(&tu, z, &rays);
                let t_v = eval_tangent(&tv, z, &rays);
                let m = cross3(&t_u, &t_v);
                let len = norm3(&m);
                if !(len > 1e-12 * norm3(&t_u) * norm3(&t_v)) || !len.is_finite() {
                    return None;
                }
                // Face the camera: n . ray < 0. The ray test stays well conditioned
                // for grazing surfaces, where m[2] is round-off.
                let facing = dot3(&m, &rays[idx]);
                let sign = if facing > 0.0 || (facing == 0.0 && m[2] >= 0.0) { -1.0 } else { 1.0 };
                let unit = [m[0] / len, m[1] / len, m[2] / len];
                Some(PixelTerms { tu, tv, t_u, t_v, unit, len, sign })
            });
            match computed {
                Some(t) => {
                    vectors.push(t.unit.map(|v| v * t.sign));
                    flags.push(true);
                    terms.push(Some(t));
                }
                None => {
                    vectors.push([0.0, 0.0, -1.0]);
                    flags.push(false);
                    terms.push(None);
                }
            }
        }
    }
    Ok(NormalPass {
        field: NormalField { normals: NormalGrid::from_raw(w, h, vectors), valid: ValidMask::new(w, h, flags)? },
        rays,
        terms,
    })
}

impl NormalPass {
    /// Pulls `dL/dn` back to `dL/ddepth`.
    pub(crate) fn depth_grad(&self, grad_normals: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; self.rays.len()];
        for (t, g) in self.terms.iter().zip(grad_normals) {
            let Some(t) = t else { continue };
            if g == &[0.0; 3] {
                continue;
            }
            // n = sign * m / |m|  =>  dL/dm = sign * (g - u (u . g)) / |m|
            let ug = dot3(&t.unit, g);
            let gm = [0, 1, 2].map(|k| t.sign * (g[k] - t.unit[k] * ug) / t.len);
            // m = T_u x T_v
            let g_tu = cross3(&t.t_v, &gm);
            let g_tv = cross3(&gm, &t.t_u);
            for &(idx, wt) in &t.tu {
                out[idx] += wt * dot3(&g_tu, &self.rays[idx]);
            }
            for &(idx, wt) in &t.tv {
                out[idx] += wt * dot3(&g_tv, &self.rays[idx]);
            }
        }
        out
    }
}

/// Unit normals of the back-projected surface using the central stencil.
pub fn normals_from_depth(depth: &ScalarGrid, intrinsics: &CameraIntrinsics, mask: &ValidMask) -> Result<NormalField> {
    normals_from_depth_with(depth, intrinsics, mask, NormalStencil::Central)
}

pub fn normals_from_depth_with(
    depth: &ScalarGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
    stencil: NormalStencil,
) -> Result<NormalField> {
    Ok(normal_pass(depth, intrinsics, mask, stencil)?.field)
}

/// Pinhole back-projection of the valid pixels.
pub fn point_cloud_from_depth(
    depth: &ScalarGrid,
    intrinsics: &CameraIntrinsics,
    mask: &ValidMask,
    color: Option<&MultiGrid>,
) -> Result<PointCloud> {
    check_depth(depth, mask)?;
    if let Some(rgb) = color {
        if rgb.width() != depth.width() || rgb.height() != depth.height() || rgb.channels() != 3 {
            return crate::error::invalid_arg("color image must be 3-channel and match the depth size");
        }
    }
    let w = depth.width();
    let mut points = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    for (idx, &z) in depth.data().iter().enumerate() {
        if !mask.is_valid(idx) {
            continue;
        }
        let (u, v) = ((idx % w) as f64, (idx / w) as f64);
        points.push([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z]);
        if let (Some(cols), Some(rgb)) = (colors.as_mut(), color) {
            cols.push(rgb_to_bytes(rgb, idx));
        }
    }
    Ok(PointCloud { points, colors })
}

/// Perspective projection of a camera-space point to `(u, v, depth)`.
pub fn project_point(intrinsics: &CameraIntrinsics, p: [f64; 3]) -> (f64, f64, f64) {
    (intrinsics.fx * p[0] / p[2] + intrinsics.cx, intrinsics.fy * p[1] / p[2] + intrinsics.cy, p[2])
}

/// Pixelwise `1 / depth` at valid pixels; masked pixels are set to 0.
pub fn disparity_from_depth(depth: &ScalarGrid, mask: &ValidMask) -> Result<ScalarGrid> {
    check_depth(depth, mask)?;
    Ok(ScalarGrid::from_raw(
        depth.width(),
        depth.height(),
        depth
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| if mask.is_valid(i) { 1.0 / z } else { 0.0 })
            .collect(),
    ))
}

/// Inverse of [`disparity_from_depth`].
pub fn depth_from_disparity(disparity: &ScalarGrid, mask: &ValidMask) -> Result<ScalarGrid> {
    disparity_from_depth(disparity, mask)
}
