//! Procedural scenes with exact depth, analytic normals and Lambertian RGB.
//!
//! A background plane fills the frame; spheres, yawed boxes and finite
//! slanted plane patches are ray-cast in front of it (z-buffered). Rays are
//! the pinhole rays `((u - cx) / fx, (v - cy) / fy, 1)`, so the ray
//! parameter is the depth.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::grid::{cross3, dot3, norm3, CameraIntrinsics, MultiGrid, NormalGrid, ScalarGrid, ValidMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    SlantedPlane,
    Sphere,
    Box,
}

pub const ALL_KINDS: [PrimitiveKind; 3] = [PrimitiveKind::SlantedPlane, PrimitiveKind::Sphere, PrimitiveKind::Box];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Background plane plus `primitive_count - 1` foreground objects.
    pub primitive_count: usize,
    pub kinds: Vec<PrimitiveKind>,
    pub depth_range: (f64, f64),
    /// Standard deviation of Gaussian noise added to the RGB image.
    pub noise_sigma: f64,
    /// Largest tilt of the background plane, degrees. 0 gives a fronto-parallel plane at `far`.
    pub background_tilt_deg: f64,
    /// Defaults to [`CameraIntrinsics::default_for`].
    pub intrinsics: Option<CameraIntrinsics>,
}

impl SceneSpec {
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        Self {
            seed,
            width,
            height,
            primitive_count: 5,
            kinds: ALL_KINDS.to_vec(),
            depth_range: (1.0, 10.0),
            noise_sigma: 0.0,
            background_tilt_deg: 35.0,
            intrinsics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        if !(near > 0.0 && far > near && far.is_finite()) {
            return invalid_arg(format!("depth range must satisfy 0 < near < far, got {near}..{far}"));
        }
        if self.width == 0 || self.height == 0 {
            return invalid_arg("scene size must be positive");
        }
        if self.primitive_count == 0 {
            return invalid_arg("primitive_count must be at least 1");
        }
        if self.primitive_count > 1 && self.kinds.is_empty() {
            return invalid_arg("foreground primitives requested but no kinds enabled");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid_arg("noise_sigma must be finite and non-negative");
        }
        if !(0.0..80.0).contains(&self.background_tilt_deg) {
            return invalid_arg("background tilt must be in [0, 80) degrees");
        }
        if let Some(k) = &self.intrinsics {
            k.check_image(self.width, self.height)?;
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        self.intrinsics.unwrap_or_else(|| CameraIntrinsics::default_for(self.width, self.height))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub depth: ScalarGrid,
    pub normals: NormalGrid,
    /// Three channels in [0, 1].
    pub rgb: MultiGrid,
    pub mask: ValidMask,
    /// Index of the visible primitive per pixel; 0 is the background.
    pub labels: Vec<u32>,
    pub intrinsics: CameraIntrinsics,
}

impl Scene {
    /// Pixels with a 4-neighbor showing a different primitive.
    pub fn silhouette(&self) -> ValidMask {
        let (w, h) = (self.depth.width(), self.depth.height());
        let l = &self.labels;
        ValidMask::from_fn(w, h, |r, c| {
            let k = r * w + c;
            (c + 1 < w && l[k + 1] != l[k])
                || (c > 0 && l[k - 1] != l[k])
                || (r + 1 < h && l[k + w] != l[k])
                || (r > 0 && l[k - w] != l[k])
        })
    }

    pub fn disparity(&self) -> ScalarGrid {
        self.depth.map(|d| 1.0 / d).expect("depth is finite and positive")
    }
}

#[derive(Clone, Debug)]
enum Shape {
    /// Inverse depth `alpha + beta (u - cx) + gamma (v - cy)`.
    Background { alpha: f64, beta: f64, gamma: f64, normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Box centered at `center`, rotated by `yaw` about the camera y axis.
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    /// Rectangle through `center` spanned by unit axes `e1`, `e2`.
    Patch { center: [f64; 3], e1: [f64; 3], e2: [f64; 3], half: [f64; 2] },
}

struct Primitive {
    shape: Shape,
    albedo: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm3(&a))
}

impl Shape {
    /// Nearest positive hit `(depth, outward normal)` along `ray` (z = 1).
    fn intersect(&self, ray: [f64; 3], u: f64, v: f64, k: &CameraIntrinsics) -> Option<(f64, [f64; 3])> {
        match self {
            Shape::Background { alpha, beta, gamma, normal } => {
                let inv = alpha + beta * (u - k.cx) + gamma * (v - k.cy);
                Some((1.0 / inv, *normal))
            }
            Shape::Sphere { center, radius } => {
                let a = dot3(&ray, &ray);
                let b = dot3(&ray, center);
                let c = dot3(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let p = scale(ray, t);
                Some((t, scale(sub(p, *center), 1.0 / radius)))
            }
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                // World -> box frame: rotate by -yaw about y.
                let to_box = |p: [f64; 3]| [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
                let o = to_box(scale(*center, -1.0));
                let d = to_box(ray);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0usize;
                let mut sign = 0.0;
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[i];
                    let (mut ta, mut tb) = ((-half[i] - o[i]) * inv, (half[i] - o[i]) * inv);
                    let mut face = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        face = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = i;
                        sign = face;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut nb = [0.0; 3];
                nb[axis] = sign;
                // Box -> world: rotate by +yaw.
                let n = [c * nb[0] + s * nb[2], nb[1], -s * nb[0] + c * nb[2]];
                Some((t0, n))
            }
            Shape::Patch { center, e1, e2, half } => {
                let n = cross3(e1, e2);
                let denom = dot3(&n, &ray);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot3(&n, center) / denom;
                if t <= 0.0 {
                    return None;
                }
                let rel = sub(scale(ray, t), *center);
                if dot3(&rel, e1).abs() > half[0] || dot3(&rel, e2).abs() > half[1] {
                    return None;
                }
                Some((t, n))
            }
        }
    }

    /// Smallest depth the shape can show, for the near bound.
    fn min_depth(&self) -> f64 {
        match self {
            Shape::Background { .. } => f64::INFINITY,
            Shape::Sphere { center, radius } => center[2] - radius,
            Shape::Box { center, half, .. } => center[2] - norm3(half),
            Shape::Patch { center, half, .. } => center[2] - (half[0] * half[0] + half[1] * half[1]).sqrt(),
        }
    }
}

fn background(rng: &mut SplitMix64, spec: &SceneSpec, k: &CameraIntrinsics) -> Shape {
    let (near, far) = spec.depth_range;
    let alpha = 1.0 / far;
    if spec.background_tilt_deg == 0.0 {
        return Shape::Background { alpha, beta: 0.0, gamma: 0.0, normal: [0.0, 0.0, -1.0] };
    }
    // Plane normal with a bounded random tilt, expressed as inverse-depth slopes.
    let tilt = rng.random_range(0.3..1.0) * spec.background_tilt_deg.to_radians();
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let n = [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos()];
    let mut beta = alpha * n[0] / (n[2] * k.fx);
    let mut gamma = alpha * n[1] / (n[2] * k.fy);
    // Inverse depth at the centre is 1/far; keep every pixel within [1/far, 1/near']
    // by shifting alpha so the smallest corner value is 1/far.
    let corners = [(0.0, 0.0), (spec.width as f64 - 1.0, 0.0), (0.0, spec.height as f64 - 1.0), (spec.width as f64 - 1.0, spec.height as f64 - 1.0)];
    let eval = |b: f64, g: f64| corners.map(|(u, v)| b * (u - k.cx) + g * (v - k.cy));
    let mut offs = eval(beta, gamma);
    let span = offs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - offs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_span = 0.5 * (1.0 / (0.5 * (near + far)) - 1.0 / far);
    if span > max_span {
        let s = max_span / span;
        beta *= s;
        gamma *= s;
        offs = eval(beta, gamma);
    }
    let lo = offs.iter().cloned().fold(f64::INFINITY, f64::min);
    let alpha = 1.0 / far - lo;
    let normal = scale(unit([beta * k.fx, gamma * k.fy, alpha]), -1.0);
    Shape::Background { alpha, beta, gamma, normal }
}

fn foreground(rng: &mut SplitMix64, kind: PrimitiveKind, spec: &SceneSpec, k: &CameraIntrinsics) -> Shape {
    let (near, far) = spec.depth_range;
    let u = rng.random_range(0.1..0.9) * (spec.width as f64 - 1.0);
    let v = rng.random_range(0.1..0.9) * (spec.height as f64 - 1.0);
    let z_hi = near + 0.6 * (far - near);
    let z = rng.random_range(near..z_hi);
    // Size in pixels -> camera units at depth z.
    let px = rng.random_range(0.08..0.22) * spec.width.min(spec.height) as f64;
    let size = px * z / k.fx;
    let z = z.max(near + 2.0 * size);
    let ray = k.ray(u, v);
    let center = scale(ray, z);
    let mut shape = match kind {
        PrimitiveKind::Sphere => Shape::Sphere { center, radius: size },
        PrimitiveKind::Box => Shape::Box {
            center,
            half: [size * rng.random_range(0.6..1.2), size * rng.random_range(0.6..1.2), size * rng.random_range(0.6..1.2)],
            yaw: rng.random_range(-0.7..0.7),
        },
        PrimitiveKind::SlantedPlane => {
            let a = rng.random_range(-0.9..0.9f64);
            let b = rng.random_range(-0.9..0.9f64);
            let e1 = [a.cos(), 0.0, a.sin()];
            let e2 = unit(sub([0.0, b.cos(), b.sin()], scale(e1, dot3(&e1, &[0.0, b.cos(), b.sin()]))));
            Shape::Patch { center, e1, e2, half: [size * rng.random_range(0.8..1.6), size * rng.random_range(0.8..1.6)] }
        }
    };
    // Wide boxes and patches can reach past the near plane; push them back along the ray.
    let deficit = near - shape.min_depth();
    if deficit > 0.0 {
        if let Shape::Sphere { center, .. } | Shape::Box { center, .. } | Shape::Patch { center, .. } = &mut shape {
            *center = [0, 1, 2].map(|i| center[i] + deficit * ray[i]);
        }
    }
    shape
}

/// Ray-casts the scene described by `spec`. Deterministic per seed.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let k = spec.camera();
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let random_albedo = |rng: &mut SplitMix64| [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
    let mut prims = vec![Primitive { shape: background(&mut rng, spec, &k), albedo: random_albedo(&mut rng) }];
    for _ in 1..spec.primitive_count {
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let shape = foreground(&mut rng, kind, spec, &k);
        debug_assert!(shape.min_depth() >= spec.depth_range.0 - 1e-9);
        prims.push(Primitive { shape, albedo: random_albedo(&mut rng) });
    }

    let (w, h) = (spec.width, spec.height);
    let light = unit([-0.4, -0.5, -1.0]);
    let mut depth = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    let mut rgb = vec![0.0; 3 * w * h];
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (c as f64, r as f64);
            let ray = k.ray(u, v);
            let mut best: Option<(f64, [f64; 3], usize)> = None;
            for (idx, p) in prims.iter().enumerate() {
                if let Some((t, n)) = p.shape.intersect(ray, u, v, &k) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, n, idx));
                    }
                }
            }
            let (t, n, idx) = best.expect("background covers every pixel");
            let t = t.clamp(spec.depth_range.0, spec.depth_range.1);
            let n = if n[2] > 0.0 { scale(n, -1.0) } else { n };
            let shade = 0.25 + 0.75 * dot3(&n, &light).max(0.0);
            let k_px = r * w + c;
            for ch in 0..3 {
                rgb[ch * w * h + k_px] = prims[idx].albedo[ch] * shade;
            }
            depth.push(t);
            normals.push(n);
            labels.push(idx as u32);
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for x in rgb.iter_mut() {
            *x = (*x + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        depth: ScalarGrid::new(w, h, depth)?,
        normals: NormalGrid::from_unoriented(w, h, normals)?,
        rgb: MultiGrid::new(3, w, h, rgb)?,
        mask: ValidMask::all_valid(w, h),
        labels,
        intrinsics: k,
    })
}

/// `count` varied scenes derived from one seed.
pub fn scene_batch(count: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x5ce0_e5ee_d000_0001);
    (0..count)
        .map(|_| {
            let mut spec = SceneSpec::new(rng.random(), width, height);
            spec.primitive_count = rng.random_range(3..=6);
            render_scene(&spec)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Corruption {
    /// Separable Gaussian blur, edges clamped.
    Blur { sigma: f64 },
    /// Additive Gaussian noise.
    Noise { sigma: f64, seed: u64 },
    /// `a * d + b`.
    Affine { a: f64, b: f64 },
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub fn gaussian_blur(grid: &ScalarGrid, sigma: f64) -> Result<ScalarGrid> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return invalid_arg(format!("blur sigma must be finite and non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let d = grid.data();
    let mut tmp = vec![0.0; d.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[(r * w + c) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * d[(r * w + (c + i as isize - radius).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; d.len()];
    for r in 0..h {
        for c in 0..w {
            out[(r * w + c) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[((r + i as isize - radius).clamp(0, h - 1) * w + c) as usize])
                .sum();
        }
    }
    ScalarGrid::new(grid.width(), grid.height(), out)
}

pub fn corrupt(depth: &ScalarGrid, kind: &Corruption) -> Result<ScalarGrid> {
    match *kind {
        Corruption::Blur { sigma } => gaussian_blur(depth, sigma),
        Corruption::Noise { sigma, seed } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return invalid_arg(format!("noise sigma must be finite and non-negative, got {sigma}"));
            }
            if sigma == 0.0 {
                return Ok(depth.clone());
            }
            let mut rng = SplitMix64::seed_from_u64(seed);
            let noise = Normal::new(0.0, sigma).expect("sigma validated");
            ScalarGrid::new(depth.width(), depth.height(), depth.data().iter().map(|v| v + noise.sample(&mut rng)).collect())
        }
        Corruption::Affine { a, b } => depth.map(|v| a * v + b),
    }
}
