use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use serde_json::json;
use sidepth::toy_model::{write_checkpoint, ToyNet};
use sidepth::training::{run_ablation, train, AblationEntry, Benchmark, Recipe, TrainConfig};

use crate::report::{write_json, Report};
use crate::{RecipeArg, SeedArg};

impl From<RecipeArg> for Recipe {
    fn from(r: RecipeArg) -> Self {
        match r {
            RecipeArg::Ssi => Recipe::Ssi,
            RecipeArg::Ranking => Recipe::Ranking,
            RecipeArg::SsiRanking => Recipe::SsiRanking,
            RecipeArg::SsiSo => Recipe::SsiSo,
            RecipeArg::Si => Recipe::Si,
        }
    }
}

#[derive(Args, Debug, Clone, Copy, Serialize)]
pub struct BenchArgs {
    /// Training scenes.
    #[arg(long, default_value_t = 32)]
    pub scenes: usize,
    /// Held-out scenes.
    #[arg(long, default_value_t = 8)]
    pub heldout: usize,
    /// Square scene size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    recipe: RecipeArg,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// SI recipe only: feed RGB alone instead of the 5-channel input.
    #[arg(long)]
    rgb_only: bool,
    /// Receives `model.ckpt` and `log.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn save_checkpoint(path: &Path, net: &ToyNet, meta: &serde_json::Value) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, net, meta)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn train_toy(a: TrainArgs) -> anyhow::Result<()> {
    let recipe: Recipe = a.recipe.into();
    if a.rgb_only && recipe != Recipe::Si {
        return crate::usage("--rgb-only applies to the si recipe only");
    }
    let seed = a.seed.seed;
    let mut cfg = TrainConfig { rgb_only: a.rgb_only, ..TrainConfig::new(recipe, a.bench.epochs, seed) };
    cfg.adam.lr = a.lr;
    let bench = Benchmark::new(a.bench.scenes, a.bench.heldout, a.bench.size, seed)?;
    let (train_set, heldout) = bench.samples(&cfg)?;
    let mut net = ToyNet::new(cfg.net_config(), seed)?;
    let log = train(&mut net, &train_set, &heldout, &cfg)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let meta = json!({
        "tool_version": crate::report::TOOL_VERSION,
        "recipe": recipe,
        "rgb_only": a.rgb_only,
        "epochs_completed": log.epochs.len(),
        "seed": seed,
        "benchmark": a.bench,
    });
    save_checkpoint(&a.out_dir.join("model.ckpt"), &net, &meta)?;
    write_json(&a.out_dir.join("log.json"), &log)?;

    let config = json!({ "train": cfg, "benchmark": a.bench, "net": cfg.net_config() });
    let report = Report::new("train-toy", config)
        .seed("init", seed)
        .seed("benchmark", seed)
        .seed("pairs", seed)
        .field("final", log.epochs.last().map(|e| e.heldout))
        .field("epochs_completed", log.epochs.len())
        .field("aborted", &log.aborted)
        .field("files", ["model.ckpt", "log.json"]);
    report.print()?;
    if let Some(reason) = log.aborted {
        anyhow::bail!("training diverged: {reason}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Also train the SI network with and without the SSI input channels.
    #[arg(long)]
    with_si: bool,
    /// Receives `ablation.json` and `ablation.csv`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct Row<'a> {
    recipe: &'a str,
    rgb_only: bool,
    ord: f64,
    d3r: f64,
    abs_rel: f64,
    delta1: f64,
    rmse: f64,
    mean_angle_deg: f64,
    final_train_loss: f64,
}

fn find(entries: &[AblationEntry], recipe: Recipe, rgb_only: bool) -> Option<&AblationEntry> {
    entries.iter().find(|e| e.recipe == recipe && e.rgb_only == rgb_only)
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let seed = a.seed.seed;
    let bench = Benchmark::new(a.bench.scenes, a.bench.heldout, a.bench.size, seed)?;
    let mut runs: Vec<(Recipe, bool)> = Recipe::SSI_STAGE.iter().map(|&r| (r, false)).collect();
    if a.with_si {
        runs.extend([(Recipe::Si, false), (Recipe::Si, true)]);
    }
    let entries = run_ablation(&bench, &runs, a.bench.epochs, seed)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let csv_path = a.out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for e in &entries {
        let m = e.final_heldout;
        w.serialize(Row {
            recipe: e.recipe.name(),
            rgb_only: e.rgb_only,
            ord: m.ord,
            d3r: m.d3r,
            abs_rel: m.abs_rel,
            delta1: m.delta1,
            rmse: m.rmse,
            mean_angle_deg: m.mean_angle_deg,
            final_train_loss: e.log.epochs.last().map_or(f64::NAN, |l| l.train_loss),
        })?;
    }
    w.flush()?;
    write_json(&a.out_dir.join("ablation.json"), &entries)?;

    let metric = |r, rgb, f: fn(&sidepth::training::HeldoutMetrics) -> f64| find(&entries, r, rgb).map(|e| f(&e.final_heldout));
    let mut directions = serde_json::Map::new();
    if let (Some(rank), Some(ssi)) = (metric(Recipe::SsiRanking, false, |m| m.ord), metric(Recipe::Ssi, false, |m| m.ord)) {
        directions.insert("ssi_ranking_ord_ge_ssi".into(), json!(rank >= ssi));
    }
    if let (Some(so), Some(ssi)) = (metric(Recipe::SsiSo, false, |m| m.d3r), metric(Recipe::Ssi, false, |m| m.d3r)) {
        directions.insert("ssi_so_d3r_le_ssi".into(), json!(so <= ssi));
    }
    if let (Some(five), Some(rgb)) = (metric(Recipe::Si, false, |m| m.abs_rel), metric(Recipe::Si, true, |m| m.abs_rel)) {
        directions.insert("si_abs_rel_lt_rgb_only".into(), json!(five < rgb));
    }
    let summary: Vec<_> = entries
        .iter()
        .map(|e| json!({ "recipe": e.recipe, "rgb_only": e.rgb_only, "heldout": e.final_heldout }))
        .collect();
    Report::new("ablate", json!({ "benchmark": a.bench, "with_si": a.with_si }))
        .seed("init", seed)
        .seed("benchmark", seed)
        .field("results", summary)
        .field("directions", directions)
        .field("files", ["ablation.csv", "ablation.json"])
        .print()
}
