use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde_json::json;
use sidepth::align::{apply_affine, fit_scale_only, fit_scale_shift, AffineFit, MIN_SCALE};
use sidepth::geometry::{normals_from_depth_with, point_cloud_from_depth, NormalStencil};
use sidepth::io::{
    read_mask_png, read_pfm_grid, read_pfm_normals, read_rgb_png, write_mask_png, write_pfm_grid, write_pfm_normals,
    write_ply, write_rgb_png,
};
use sidepth::losses::{self, LossReport, LossWeights};
use sidepth::sampling::PairSampleConfig;
use sidepth::synth::{render_scene, SceneSpec};
use sidepth::{CameraIntrinsics, ScalarGrid, ValidMask};

use crate::report::{write_json, Report};
use crate::{usage, IntrinsicsArg, LossName, SeedArg, StencilArg};

/// Mask from a PNG if given, else every finite pixel of `grid`.
pub fn load_mask(path: Option<&Path>, grid: &ScalarGrid, positive: bool) -> anyhow::Result<ValidMask> {
    match path {
        Some(p) => {
            let m = read_mask_png(p).with_context(|| format!("reading mask {}", p.display()))?;
            if m.width() != grid.width() || m.height() != grid.height() {
                anyhow::bail!("mask {} is {}x{}, expected {}x{}", p.display(), m.width(), m.height(), grid.width(), grid.height());
            }
            Ok(m)
        }
        None => Ok(ValidMask::from_fn(grid.width(), grid.height(), |r, c| {
            let v = grid.get(r, c);
            v.is_finite() && (!positive || v > 0.0)
        })),
    }
}

pub fn load_grid(path: &Path, what: &str) -> anyhow::Result<ScalarGrid> {
    read_pfm_grid(path).with_context(|| format!("reading {what} {}", path.display()))
}

pub fn camera(arg: &IntrinsicsArg, w: usize, h: usize) -> anyhow::Result<CameraIntrinsics> {
    let k = arg.intrinsics.unwrap_or_else(|| CameraIntrinsics::default_for(w, h));
    k.check_image(w, h)?;
    Ok(k)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Background plus foreground objects.
    #[arg(long, default_value_t = 5)]
    primitives: usize,
    /// Gaussian noise on the RGB image.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    /// Output directory; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SceneSpec {
        primitive_count: a.primitives,
        noise_sigma: a.noise_sigma,
        intrinsics: a.intrinsics.intrinsics,
        ..SceneSpec::new(a.seed.seed, a.width, a.height)
    };
    let scene = render_scene(&spec)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let d = &a.out_dir;
    write_pfm_grid(d.join("depth.pfm"), &scene.depth)?;
    write_pfm_normals(d.join("normals.pfm"), &scene.normals)?;
    write_rgb_png(d.join("rgb.png"), &scene.rgb)?;
    write_mask_png(d.join("mask.png"), &scene.mask)?;
    let echo = json!({ "spec": spec, "intrinsics": scene.intrinsics });
    write_json(&d.join("spec.json"), &echo)?;
    let (near, far) = scene.depth.min_max();
    Report::new("synth", serde_json::to_value(&spec)?)
        .seed("scene", spec.seed)
        .field("files", ["depth.pfm", "normals.pfm", "rgb.png", "mask.png", "spec.json"])
        .field("out_dir", path_str(d))
        .field("depth_min", near)
        .field("depth_max", far)
        .field("intrinsics", scene.intrinsics)
        .print()
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long, value_enum)]
    name: LossName,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Validity mask PNG (non-zero = valid).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Ground-truth normals PFM (3 channels), needed by the normal losses.
    #[arg(long)]
    gt_normals: Option<PathBuf>,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    /// Write d loss / d pred as a PFM.
    #[arg(long)]
    grad_out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    /// Sampled pixel pairs for the pair losses.
    #[arg(long, default_value_t = 2500)]
    pairs: usize,
    /// Ground-truth gap below which a pair counts as equal.
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Pyramid levels of the multi-scale gradient losses.
    #[arg(long, default_value_t = losses::DEFAULT_SCALES)]
    scales: usize,
}

pub fn loss(a: LossArgs) -> anyhow::Result<()> {
    let pred = load_grid(&a.pred, "prediction")?;
    let gt = load_grid(&a.gt, "ground truth")?;
    let mask = load_mask(a.mask.as_deref(), &gt, false)?;
    let pairs = PairSampleConfig { pair_count: a.pairs, seed: a.seed.seed, delta: a.delta };
    pairs.validate()?;
    let weights = LossWeights::default();
    let normals = || -> anyhow::Result<_> {
        match &a.gt_normals {
            Some(p) => Ok(read_pfm_normals(p).with_context(|| format!("reading normals {}", p.display()))?),
            None => usage(format!("--gt-normals is required for loss {:?}", a.name)),
        }
    };
    let k = camera(&a.intrinsics, pred.width(), pred.height())?;
    let report: LossReport = match a.name {
        LossName::Ssi => losses::ssi_loss(&pred, &gt, &mask)?,
        LossName::So => losses::sparse_ordinal_loss(&pred, &gt, &mask, &pairs)?,
        LossName::Ranking => losses::ranking_loss(&pred, &gt, &mask, &pairs)?,
        LossName::Ssig => losses::aligned_multiscale_gradient_loss(&pred, &gt, &mask, a.scales)?,
        LossName::SsiNet => losses::ssi_net_loss(&pred, &gt, &mask, &weights, &pairs)?,
        LossName::L1 => losses::l1_depth_loss(&pred, &gt, &mask)?,
        LossName::Normals => losses::normals_cosine_loss(&pred, &normals()?, &k, &mask)?,
        LossName::Ng => losses::normals_gradient_loss(&pred, &normals()?, &k, &mask, a.scales)?,
        LossName::SiNet => losses::si_net_loss(&pred, &gt, &normals()?, &k, &mask, &weights, a.scales)?,
    };
    if let Some(p) = &a.grad_out {
        write_pfm_grid(p, &report.grad)?;
    }
    let config = json!({
        "name": format!("{:?}", a.name).to_lowercase(),
        "pred": path_str(&a.pred),
        "gt": path_str(&a.gt),
        "pairs": a.pairs,
        "delta": a.delta,
        "scales": a.scales,
        "weights": weights,
        "intrinsics": k,
    });
    Report::new("loss", config)
        .seed("pairs", a.seed.seed)
        .field("value", report.value)
        .field("components", &report.components)
        .field("diagnostics", &report.diagnostics)
        .print()
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Grid to be mapped.
    #[arg(long)]
    pred: PathBuf,
    /// Grid it is fitted to.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Fit a single scale `c` with `c * pred ~ target`.
    #[arg(long)]
    scale_only: bool,
    /// With --scale-only, raise a non-positive `c` to the minimum scale.
    #[arg(long, requires = "scale_only")]
    clamp_positive: bool,
    /// Write the aligned prediction as a PFM.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn align(a: AlignArgs) -> anyhow::Result<()> {
    let pred = load_grid(&a.pred, "prediction")?;
    let target = load_grid(&a.target, "target")?;
    let mask = load_mask(a.mask.as_deref(), &target, false)?;
    let fit = if a.scale_only {
        let c = fit_scale_only(&target, &pred, &mask)?;
        let (c, clamped) = if a.clamp_positive && c <= 0.0 { (MIN_SCALE, true) } else { (c, false) };
        let residual_sse = (0..pred.len())
            .filter(|&i| mask.is_valid(i))
            .map(|i| (c * pred.data()[i] - target.data()[i]).powi(2))
            .sum();
        AffineFit { a: c, b: 0.0, residual_sse, clamped }
    } else {
        fit_scale_shift(&pred, &target, &mask)?
    };
    if let Some(p) = &a.out {
        write_pfm_grid(p, &apply_affine(&pred, &fit))?;
    }
    let config = json!({
        "pred": path_str(&a.pred),
        "target": path_str(&a.target),
        "scale_only": a.scale_only,
        "clamp_positive": a.clamp_positive,
    });
    Report::new("align", config)
        .field("a", fit.a)
        .field("b", fit.b)
        .field("residual_sse", fit.residual_sse)
        .field("clamped", fit.clamped)
        .print()
}

#[derive(Args, Debug)]
pub struct NormalsArgs {
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    #[arg(long, value_enum, default_value_t = StencilArg::Central)]
    stencil: StencilArg,
    /// Output 3-channel PFM; invalid pixels hold (0, 0, -1).
    #[arg(long)]
    out: PathBuf,
    /// Optional PNG of the pixels with a defined normal.
    #[arg(long)]
    out_valid: Option<PathBuf>,
}

pub fn normals(a: NormalsArgs) -> anyhow::Result<()> {
    let depth = load_grid(&a.depth, "depth")?;
    let mask = load_mask(a.mask.as_deref(), &depth, true)?;
    let k = camera(&a.intrinsics, depth.width(), depth.height())?;
    let stencil = match a.stencil {
        StencilArg::Central => NormalStencil::Central,
        StencilArg::Sobel => NormalStencil::Sobel,
    };
    let field = normals_from_depth_with(&depth, &k, &mask, stencil)?;
    write_pfm_normals(&a.out, &field.normals)?;
    if let Some(p) = &a.out_valid {
        write_mask_png(p, &field.valid)?;
    }
    let config = json!({ "depth": path_str(&a.depth), "stencil": stencil, "intrinsics": k });
    Report::new("normals", config)
        .field("valid_pixels", field.valid.count())
        .field("pixels", depth.len())
        .print()
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    depth: PathBuf,
    /// Optional RGB PNG used to color the points.
    #[arg(long)]
    rgb: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    /// Output ASCII PLY.
    #[arg(long)]
    out: PathBuf,
}

pub fn project(a: ProjectArgs) -> anyhow::Result<()> {
    let depth = load_grid(&a.depth, "depth")?;
    let mask = load_mask(a.mask.as_deref(), &depth, true)?;
    let k = camera(&a.intrinsics, depth.width(), depth.height())?;
    let rgb = match &a.rgb {
        Some(p) => Some(read_rgb_png(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let cloud = point_cloud_from_depth(&depth, &k, &mask, rgb.as_ref())?;
    write_ply(&a.out, &cloud)?;
    let config = json!({ "depth": path_str(&a.depth), "rgb": a.rgb.as_deref().map(path_str), "intrinsics": k });
    Report::new("project", config).field("points", cloud.len()).field("colored", cloud.colors.is_some()).print()
}
