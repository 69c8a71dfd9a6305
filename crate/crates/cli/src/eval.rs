use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde_json::{json, Value};
use sidepth::io::read_pfm_normals;
use sidepth::metrics::{evaluate_all, EvalConfig, EvalMode, EvalReport, PredSpace};
use sidepth::CameraIntrinsics;

use crate::cmd::{load_grid, load_mask};
use crate::manifest::{read_manifest, ManifestEntry};
use crate::report::Report;
use crate::{usage, IntrinsicsArg, ModeArg, SeedArg, SpaceArg};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, conflicts_with = "manifest")]
    pred: Option<PathBuf>,
    /// Ground-truth depth PFM.
    #[arg(long, conflicts_with = "manifest")]
    gt: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    gt_normals: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    mask: Option<PathBuf>,
    /// JSON array of {pred, gt, mask?, gt_normals?, intrinsics?}.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// ssi: scale and shift fit; si: scale only.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Space the prediction lives in.
    #[arg(long, value_enum, default_value_t = SpaceArg::Depth)]
    space: SpaceArg,
    #[command(flatten)]
    intrinsics: IntrinsicsArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Pairs sampled for the ordinal error.
    #[arg(long, default_value_t = sidepth::metrics::DEFAULT_ORD_PAIRS)]
    ord_pairs: usize,
}

fn eval_one(e: &ManifestEntry, cfg: &EvalConfig) -> anyhow::Result<EvalReport> {
    let pred = load_grid(&e.pred, "prediction")?;
    let gt = load_grid(&e.gt, "ground truth")?;
    let mask = load_mask(e.mask.as_deref(), &gt, true)?;
    let normals = match &e.gt_normals {
        Some(p) => Some(read_pfm_normals(p).with_context(|| format!("reading normals {}", p.display()))?),
        None => None,
    };
    Ok(evaluate_all(&pred, &gt, normals.as_ref(), e.intrinsics.as_ref(), &mask, cfg)?)
}

fn mean(reports: &[EvalReport], f: impl Fn(&EvalReport) -> Option<f64>) -> Value {
    let vals: Vec<f64> = reports.iter().filter_map(f).collect();
    if vals.is_empty() {
        Value::Null
    } else {
        json!(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn aggregate(reports: &[EvalReport]) -> BTreeMap<&'static str, Value> {
    let mut m = BTreeMap::new();
    m.insert("images", json!(reports.len()));
    m.insert("rmse", mean(reports, |r| Some(r.rmse)));
    m.insert("abs_rel", mean(reports, |r| Some(r.abs_rel)));
    m.insert("delta1", mean(reports, |r| Some(r.delta1)));
    m.insert("ord", mean(reports, |r| Some(r.ord)));
    m.insert("d3r", mean(reports, |r| Some(r.d3r.value)));
    m.insert("dbe_acc", mean(reports, |r| Some(r.dbe.acc)));
    m.insert("dbe_comp", mean(reports, |r| Some(r.dbe.comp)));
    m.insert("mean_angle_deg", mean(reports, |r| r.normals.map(|n| n.mean_angle_deg)));
    m.insert("pct_within", mean(reports, |r| r.normals.map(|n| n.pct_within)));
    m
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let entries = match (&a.manifest, &a.pred, &a.gt) {
        (Some(m), _, _) => read_manifest(m)?,
        (None, Some(pred), Some(gt)) => vec![ManifestEntry {
            pred: pred.clone(),
            gt: gt.clone(),
            mask: a.mask.clone(),
            gt_normals: a.gt_normals.clone(),
            intrinsics: a.intrinsics.intrinsics,
        }],
        _ => return usage("evaluate needs either --manifest or both --pred and --gt"),
    };
    let mode = match a.mode {
        ModeArg::Ssi => EvalMode::Ssi,
        ModeArg::Si => EvalMode::Si,
    };
    let mut cfg = EvalConfig::new(mode);
    cfg.pred_space = match a.space {
        SpaceArg::Depth => PredSpace::Depth,
        SpaceArg::Disparity => PredSpace::Disparity,
    };
    cfg.ord.pair_count = a.ord_pairs;
    cfg.ord.seed = a.seed.seed;
    let default_k: Option<CameraIntrinsics> = a.intrinsics.intrinsics;
    let reports: Vec<EvalReport> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let e = ManifestEntry { intrinsics: e.intrinsics.or(default_k), ..e.clone() };
            eval_one(&e, &cfg).with_context(|| format!("entry {i} ({})", e.pred.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let per_image: Vec<Value> = entries
        .iter()
        .zip(&reports)
        .map(|(e, r)| {
            let mut v = serde_json::to_value(r).expect("serializable");
            let obj = v.as_object_mut().expect("object");
            obj.insert("pred".into(), json!(e.pred.display().to_string()));
            obj.insert("gt".into(), json!(e.gt.display().to_string()));
            v
        })
        .collect();
    Report::new("evaluate", serde_json::to_value(cfg)?)
        .seed("ord_pairs", a.seed.seed)
        .field("per_image", per_image)
        .field("aggregate", aggregate(&reports))
        .print()
}
