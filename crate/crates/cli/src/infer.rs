use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde_json::json;
use sidepth::io::{read_rgb_png, write_pfm_grid, write_pfm_normals, write_ply};
use sidepth::pipeline::{run_two_stage, Resample, SsiSource, TwoStageConfig, RESOLUTION_PROXY};
use sidepth::toy_model::{read_checkpoint, ToyNet};

use crate::cmd::load_grid;
use crate::report::Report;
use crate::{usage, IntrinsicsArg, ResampleArg};

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    rgb: PathBuf,
    /// Precomputed low-resolution SSI estimate (PFM).
    #[arg(long, requires = "ssi_high", conflicts_with = "ssi_ckpt")]
    ssi_low: Option<PathBuf>,
    /// Precomputed high-resolution SSI estimate (PFM).
    #[arg(long, requires = "ssi_low")]
    ssi_high: Option<PathBuf>,
    /// SSI network checkpoint (3-channel input), run at both resolutions.
    #[arg(long)]
    ssi_ckpt: Option<PathBuf>,
    /// SI network checkpoint (5-channel input).
    #[arg(long)]
    si_ckpt: PathBuf,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    #[arg(long, value_enum, default_value_t = ResampleArg::Bilinear)]
    resample: ResampleArg,
    /// Square resolution of the low-resolution SSI pass.
    #[arg(long, default_value_t = 64)]
    low_res: usize,
    /// Receptive field used by the resolution selection.
    #[arg(long, default_value_t = 64)]
    receptive_field: usize,
    #[arg(long, default_value_t = 2.0)]
    max_factor: f64,
    #[arg(long)]
    out_depth: Option<PathBuf>,
    #[arg(long)]
    out_ply: Option<PathBuf>,
    #[arg(long)]
    out_normals: Option<PathBuf>,
}

fn load_net(path: &Path, channels: usize, role: &str) -> anyhow::Result<ToyNet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (net, _) = read_checkpoint(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let got = net.config().in_channels();
    if got != channels {
        bail!("{role} checkpoint {} takes {got} input channels; {channels} are required", path.display());
    }
    Ok(net)
}

pub fn infer(a: InferArgs) -> anyhow::Result<()> {
    let rgb = read_rgb_png(&a.rgb).with_context(|| format!("reading {}", a.rgb.display()))?;
    let si = load_net(&a.si_ckpt, 5, "SI")?;
    let ssi_net;
    let source = match (&a.ssi_low, &a.ssi_high, &a.ssi_ckpt) {
        (Some(l), Some(h), None) => SsiSource::Files { low: load_grid(l, "SSI low")?, high: load_grid(h, "SSI high")? },
        (None, None, Some(p)) => {
            ssi_net = load_net(p, 3, "SSI")?;
            SsiSource::Net(&ssi_net)
        }
        _ => return usage("infer needs either --ssi-low and --ssi-high, or --ssi-ckpt"),
    };
    let cfg = TwoStageConfig {
        low_resolution: (a.low_res, a.low_res),
        receptive_field: a.receptive_field,
        max_factor: a.max_factor,
        resample: match a.resample {
            ResampleArg::Bilinear => Resample::Bilinear,
            ResampleArg::Area => Resample::Area,
        },
    };
    let out = run_two_stage(&rgb, source, &si, a.intrinsics.intrinsics.as_ref(), &cfg)?;
    if let Some(p) = &a.out_depth {
        write_pfm_grid(p, &out.depth)?;
    }
    if let Some(p) = &a.out_normals {
        write_pfm_normals(p, &out.normals)?;
    }
    if let Some(p) = &a.out_ply {
        write_ply(p, &out.point_cloud)?;
    }
    let (near, far) = out.depth.min_max();
    let config = json!({
        "rgb": a.rgb.display().to_string(),
        "si_ckpt": a.si_ckpt.display().to_string(),
        "ssi_ckpt": a.ssi_ckpt.as_ref().map(|p| p.display().to_string()),
        "pipeline": cfg,
        "resolution_proxy": RESOLUTION_PROXY,
    });
    Report::new("infer", config)
        .field("width", out.depth.width())
        .field("height", out.depth.height())
        .field("depth_min", near)
        .field("depth_max", far)
        .field("o_high_flat", out.o_high_flat)
        .field("resolution", out.resolution)
        .field("intrinsics", out.intrinsics)
        .field("normals_valid", out.normals_valid.count())
        .field("points", out.point_cloud.len())
        .print()
}
