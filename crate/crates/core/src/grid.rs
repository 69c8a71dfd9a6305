//! Grid, mask, normal-field and camera types shared by every other module.
//!
//! All grids are row-major: pixel `(r, c)` lives at flat index `r * width + c`.
//! Invalid pixels are carried by an explicit [`ValidMask`], never by sentinel
//! values.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Error, Result};

/// 2-D field of finite `f64` samples (depth, disparity, or one image channel).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid_arg(format!("grid dimensions must be non-zero, got {width}x{height}"));
        }
        if data.len() != width * height {
            return invalid_arg(format!(
                "grid data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid sample {idx} is {}", data[idx])));
        }
        Ok(Self { width, height, data })
    }

    /// Builds a grid without the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self::from_raw(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Builds a grid from a per-pixel function of `(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ScalarGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &ScalarGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            invalid_arg(format!(
                "{what}: shape mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            ))
        }
    }

    /// Applies `f` to every sample; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &ScalarGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Self::new(
            self.width,
            self.height,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Per-pixel validity flags gating every loss and metric.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    width: usize,
    height: usize,
    flags: Vec<bool>,
}

impl ValidMask {
    pub fn new(width: usize, height: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != width * height {
            return invalid_arg(format!(
                "mask length {} does not match {width}x{height}",
                flags.len()
            ));
        }
        Ok(Self { width, height, flags })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        Self { width, height, flags: vec![true; width * height] }
    }

    pub fn for_grid(grid: &ScalarGrid) -> Self {
        Self::all_valid(grid.width(), grid.height())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut flags = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                flags.push(f(r, c));
            }
        }
        Self { width, height, flags }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter_map(|(i, &f)| f.then_some(i)).collect()
    }

    pub fn and(&self, other: &ValidMask) -> Result<ValidMask> {
        if self.width != other.width || self.height != other.height {
            return invalid_arg("mask intersection: shape mismatch");
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            flags: self.flags.iter().zip(&other.flags).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn check_gates(&self, grid: &ScalarGrid) -> Result<()> {
        if self.width == grid.width() && self.height == grid.height() {
            Ok(())
        } else {
            invalid_arg(format!(
                "mask {}x{} does not match grid {}x{}",
                self.width,
                self.height,
                grid.width(),
                grid.height()
            ))
        }
    }
}

/// Channel-major stack of equally sized scalar planes (RGB images, network input).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrid {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl MultiGrid {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return invalid_arg("multi-channel grid dimensions must be non-zero");
        }
        if data.len() != channels * width * height {
            return invalid_arg(format!(
                "multi-channel data length {} does not match {channels}x{width}x{height}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("multi-channel grid sample".into()));
        }
        Ok(Self { channels, width, height, data })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self { channels, width, height, data: vec![0.0; channels * width * height] }
    }

    pub fn from_channels(planes: &[ScalarGrid]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::InvalidArgument("no channels".into()))?;
        let mut data = Vec::with_capacity(planes.len() * first.len());
        for (k, p) in planes.iter().enumerate() {
            if !p.same_shape(first) {
                return invalid_arg(format!("channel {k} shape differs from channel 0"));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Self { channels: planes.len(), width: first.width(), height: first.height(), data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel(&self, c: usize) -> ScalarGrid {
        ScalarGrid::from_raw(self.width, self.height, self.plane(c).to_vec())
    }

    pub fn channel_grids(&self) -> Vec<ScalarGrid> {
        (0..self.channels).map(|c| self.channel(c)).collect()
    }

    /// First three channels, or the channel mean when fewer than three exist.
    pub fn luminance(&self) -> ScalarGrid {
        let n = self.width * self.height;
        let data = if self.channels >= 3 {
            (0..n)
                .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
                .collect()
        } else {
            (0..n)
                .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64)
                .collect()
        };
        ScalarGrid::from_raw(self.width, self.height, data)
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        let planes = self
            .channel_grids()
            .iter()
            .map(|p| resize_grid(p, width, height))
            .collect::<Result<Vec<_>>>()?;
        Self::from_channels(&planes)
    }
}

/// Tolerance on unit length for stored normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Per-pixel unit surface normals, camera-facing (`z <= 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalGrid {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 3]>,
}

impl NormalGrid {
    /// Validates unit length and camera-facing orientation.
    pub fn new(width: usize, height: usize, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != width * height {
            return invalid_arg("normal grid length mismatch");
        }
        for (i, v) in vectors.iter().enumerate() {
            let len = norm3(v);
            if !len.is_finite() || (len - 1.0).abs() > UNIT_TOLERANCE {
                return invalid_input(format!("normal {i} has length {len}"));
            }
            if v[2] > 0.0 {
                return invalid_input(format!("normal {i} faces away from the camera"));
            }
        }
        Ok(Self { width, height, vectors })
    }

    /// Ingests arbitrary normals: renormalizes and flips vectors with `z > 0`.
    pub fn from_unoriented(width: usize, height: usize, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != width * height {
            return invalid_arg("normal grid length mismatch");
        }
        let mut out = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.into_iter().enumerate() {
            let len = norm3(&v);
            if !len.is_finite() || len <= 0.0 {
                return invalid_input(format!("normal {i} has length {len}"));
            }
            let s = if v[2] > 0.0 { -1.0 / len } else { 1.0 / len };
            out.push([v[0] * s, v[1] * s, v[2] * s]);
        }
        Ok(Self { width, height, vectors: out })
    }

    pub(crate) fn from_raw(width: usize, height: usize, vectors: Vec<[f64; 3]>) -> Self {
        Self { width, height, vectors }
    }

    pub fn facing_camera(width: usize, height: usize) -> Self {
        Self::from_raw(width, height, vec![[0.0, 0.0, -1.0]; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn get(&self, idx: usize) -> [f64; 3] {
        self.vectors[idx]
    }

    /// 2x2 box average of the vectors over valid pixels, renormalized.
    pub fn downsample_masked(&self, mask: &ValidMask) -> Result<(NormalGrid, ValidMask)> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return invalid_arg("normal grid too small to downsample");
        }
        let mut vectors = Vec::with_capacity(w * h);
        let mut flags = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                let mut any = false;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * r + dr) * self.width + 2 * c + dc;
                    if mask.is_valid(idx) {
                        let v = self.vectors[idx];
                        acc = [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]];
                        any = true;
                    }
                }
                let len = norm3(&acc);
                if any && len > 1e-12 {
                    vectors.push([acc[0] / len, acc[1] / len, acc[2] / len]);
                    flags.push(true);
                } else {
                    vectors.push([0.0, 0.0, -1.0]);
                    flags.push(false);
                }
            }
        }
        Ok((Self::from_raw(w, h, vectors), ValidMask::new(w, h, flags)?))
    }
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return invalid_arg(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return invalid_arg("principal point must be finite");
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `fx = fy = (width + height) / 2`, principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = 0.5 * (width + height) as f64;
        Self { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        if self.cx < 0.0 || self.cx >= width as f64 || self.cy < 0.0 || self.cy >= height as f64 {
            return invalid_arg(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            ));
        }
        Ok(())
    }

    /// Intrinsics of the 2x box-downsampled image (coarse pixel `u` covers `2u, 2u+1`).
    pub fn downsampled(&self) -> Self {
        Self {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx - 0.5) / 2.0,
            cy: (self.cy - 0.5) / 2.0,
        }
    }

    /// Intrinsics after resampling the image to a new size (corner-aligned).
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sx = if from.0 > 1 { (to.0 as f64 - 1.0) / (from.0 as f64 - 1.0) } else { 1.0 };
        let sy = if from.1 > 1 { (to.1 as f64 - 1.0) / (from.1 as f64 - 1.0) } else { 1.0 };
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy }
    }

    /// Viewing ray through pixel `(u, v)` with unit z-component.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Back-projected 3-D points with optional per-point color.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bilinear, corner-aligned resampling.
pub fn resize_grid(grid: &ScalarGrid, new_width: usize, new_height: usize) -> Result<ScalarGrid> {
    if new_width == 0 || new_height == 0 {
        return invalid_arg(format!("resize target {new_width}x{new_height} has a zero dimension"));
    }
    if new_width == grid.width() && new_height == grid.height() {
        return Ok(grid.clone());
    }
    let src_coord = |dst: usize, n_dst: usize, n_src: usize| -> f64 {
        if n_dst == 1 {
            (n_src as f64 - 1.0) / 2.0
        } else {
            dst as f64 * (n_src as f64 - 1.0) / (n_dst as f64 - 1.0)
        }
    };
    let (w, h) = (grid.width(), grid.height());
    let mut data = Vec::with_capacity(new_width * new_height);
    for r in 0..new_height {
        let y = src_coord(r, new_height, h);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f64;
        for c in 0..new_width {
            let x = src_coord(c, new_width, w);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = x - x0 as f64;
            let top = grid.get(y0, x0) * (1.0 - tx) + grid.get(y0, x1) * tx;
            let bottom = grid.get(y1, x0) * (1.0 - tx) + grid.get(y1, x1) * tx;
            data.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(ScalarGrid::from_raw(new_width, new_height, data))
}

/// 2x2 box average. Odd trailing rows/columns are dropped.
pub fn downsample_by_2(grid: &ScalarGrid) -> Result<ScalarGrid> {
    let (g, _) = downsample_masked(grid, &ValidMask::for_grid(grid))?;
    Ok(g)
}

/// 2x2 box average over valid pixels only. Blocks without valid support
/// come out invalid (with value 0).
pub fn downsample_masked(grid: &ScalarGrid, mask: &ValidMask) -> Result<(ScalarGrid, ValidMask)> {
    mask.check_gates(grid)?;
    let (w, h) = (grid.width() / 2, grid.height() / 2);
    if w == 0 || h == 0 {
        return invalid_arg(format!(
            "grid {}x{} too small to downsample",
            grid.width(),
            grid.height()
        ));
    }
    let mut data = Vec::with_capacity(w * h);
    let mut flags = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let idx = (2 * r + dr) * grid.width() + 2 * c + dc;
                if mask.is_valid(idx) {
                    sum += grid.data()[idx];
                    n += 1;
                }
            }
            data.push(if n > 0 { sum / n as f64 } else { 0.0 });
            flags.push(n > 0);
        }
    }
    Ok((ScalarGrid::from_raw(w, h, data), ValidMask::new(w, h, flags)?))
}

/// Adjoint of [`downsample_masked`]: spreads coarse gradients back onto the
/// valid fine pixels that contributed to each block.
pub fn downsample_masked_adjoint(coarse_grad: &[f64], fine_mask: &ValidMask) -> Vec<f64> {
    let (fw, fh) = (fine_mask.width(), fine_mask.height());
    let (w, h) = (fw / 2, fh / 2);
    debug_assert_eq!(coarse_grad.len(), w * h);
    let mut out = vec![0.0; fw * fh];
    for r in 0..h {
        for c in 0..w {
            let block = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dr, dc)| (2 * r + dr) * fw + 2 * c + dc);
            let n = block.iter().filter(|&&i| fine_mask.is_valid(i)).count();
            if n == 0 {
                continue;
            }
            let g = coarse_grad[r * w + c] / n as f64;
            for i in block {
                if fine_mask.is_valid(i) {
                    out[i] += g;
                }
            }
        }
    }
    out
}
