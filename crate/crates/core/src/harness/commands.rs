use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::experiment::{objective_name, seed_path, Experiment};
use super::report::{build_report, result_path, summary_table, Report, RunSummary};
use crate::data::{save_stream, write_binary, Stream};
use crate::error::{Error, Result};
use crate::meta::{InnerMode, IterRecord, MetaConfig, Objective, SupportMode};
use crate::model::{checkpoint, ConvNet, ParamBundle};
use crate::tta::{adapt_stream, write_result, AdaptConfig, AdaptMode};

/// `(label, period, accuracy)` for every evaluation of one seed.
type Scored = Vec<(String, usize, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub summary: RunSummary,
}

fn mode_name(m: AdaptMode) -> &'static str {
    match m {
        AdaptMode::OursSample => "ours_sample",
        AdaptMode::NoAdapt => "no_adapt",
        AdaptMode::TttSample => "ttt_sample",
        AdaptMode::EntropyBatch => "entropy_batch",
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_log(path: &Path, log: &[IterRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Default checkpoint stem for `seed` under the configured output directory.
pub fn default_checkpoint(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_path(&cfg.out_dir, seed, &format!("model-{}", objective_name(cfg.objective)))
}

fn train_one(exp: &Experiment, objective: Objective, meta: &MetaConfig, stem: &Path) -> Result<TrainOutput> {
    let (params, log) = exp.train(objective, meta)?;
    let sha256 = checkpoint::save(stem, exp.net.spec(), &params)?;
    let log_path = stem.with_extension("log.jsonl");
    write_log(&log_path, &log)?;
    Ok(TrainOutput {
        seed: exp.seed,
        checkpoint: stem.with_extension("toml"),
        sha256,
        log: log_path,
    })
}

/// Trains one checkpoint per seed with the configured objective.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainOutput>> {
    cfg.validate()?;
    cfg.write_resolved(&cfg.out_dir)?;
    cfg.seeds
        .par_iter()
        .map(|&s| {
            let exp = Experiment::new(cfg, s)?;
            train_one(&exp, cfg.objective, &exp.meta_config(), &default_checkpoint(cfg, s))
        })
        .collect()
}

fn load_for(exp: &Experiment, path: &Path) -> Result<(ConvNet, ParamBundle<f32>)> {
    let (spec, params) = checkpoint::load::<f32>(path)?;
    let data = &exp.test_data;
    if (spec.in_channels, spec.image_size, spec.num_classes) != (data.channels(), data.size(), data.num_classes()) {
        return Err(Error::Checkpoint(format!(
            "{} expects {}×{}×{} inputs with {} classes; the data has {}×{}×{} with {}",
            path.display(),
            spec.in_channels,
            spec.image_size,
            spec.image_size,
            spec.num_classes,
            data.channels(),
            data.size(),
            data.size(),
            data.num_classes()
        )));
    }
    Ok((ConvNet::new(spec)?, params))
}

/// Test streams for every configured period, saved under `out/streams`.
fn streams(exp: &Experiment) -> Result<Vec<(usize, Stream)>> {
    let dir = exp.cfg.out_dir.join("streams");
    exp.cfg
        .stream
        .periods
        .iter()
        .map(|&p| {
            let s = exp.test_stream(p)?;
            save_stream(&dir.join(format!("seed-{}-tp{p}", exp.seed)), &s)?;
            Ok((p, s))
        })
        .collect()
}

/// Evaluates each `(label, params, adapt)` on every stream of one seed and
/// writes the result files. Returns `(label, period, accuracy)`.
fn evaluate_all(
    exp: &Experiment,
    net: &ConvNet,
    runs: &[(String, &ParamBundle<f32>, AdaptConfig)],
    results: &Path,
) -> Result<Scored> {
    let mut out = Vec::new();
    for (period, stream) in streams(exp)? {
        for (label, params, adapt) in runs {
            let (r, _) = adapt_stream(net, params, &stream, adapt)?;
            write_result(&result_path(results, label, period, exp.seed), &r)?;
            out.push((label.clone(), period, r.accuracy()));
        }
    }
    Ok(out)
}

fn summarize(labels: &[String], periods: &[usize], per_seed: &[(u64, Scored)]) -> Result<Vec<RunSummary>> {
    let mut rows = Vec::new();
    for &p in periods {
        for l in labels {
            let runs: Vec<(u64, f64)> = per_seed
                .iter()
                .flat_map(|(s, v)| v.iter().filter(|r| &r.0 == l && r.1 == p).map(move |r| (*s, r.2)))
                .collect();
            rows.push(RunSummary::new(l, p, &runs)?);
        }
    }
    Ok(rows)
}

fn checkpoint_for(cfg: &RunConfig, given: Option<&Path>, seed: u64) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg, seed))
}

/// Adapts on the test streams of every seed and period with the configured
/// mode; writes result files and `summary-{label}.json`.
pub fn cmd_adapt(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    cfg.write_resolved(&cfg.out_dir)?;
    let label = format!("{}_{}", objective_name(cfg.objective), mode_name(cfg.adapt.mode));
    let results = cfg.out_dir.join("results");
    let per_seed: Vec<(u64, Scored)> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let exp = Experiment::new(cfg, s)?;
            let (net, params) = load_for(&exp, &checkpoint_for(cfg, checkpoint, s))?;
            let runs = [(label.clone(), &params, cfg.adapt.clone())];
            Ok((s, evaluate_all(&exp, &net, &runs, &results)?))
        })
        .collect::<Result<_>>()?;
    let rows = summarize(std::slice::from_ref(&label), &cfg.stream.periods, &per_seed)?;
    write_text(&cfg.out_dir.join(format!("summary-{label}.json")), &to_json(&rows)?)?;
    Ok(rows)
}

/// Adapts with every β of `cfg.sweep.betas`, sorted ascending. Per-sample
/// modes keep their mode; others sweep `ours_sample`.
pub fn cmd_sweep_beta(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("sweep");
    cfg.write_resolved(&dir)?;
    let mut betas = cfg.sweep.betas.clone();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mode = match cfg.adapt.mode {
        AdaptMode::TttSample => AdaptMode::TttSample,
        _ => AdaptMode::OursSample,
    };
    let label = |b: f64| format!("beta_{b}");
    let per_seed: Vec<(u64, Scored)> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let exp = Experiment::new(cfg, s)?;
            let (net, params) = load_for(&exp, &checkpoint_for(cfg, checkpoint, s))?;
            let runs: Vec<_> = betas
                .iter()
                .map(|&beta| (label(beta), &params, AdaptConfig { beta, mode, ..cfg.adapt.clone() }))
                .collect();
            Ok((s, evaluate_all(&exp, &net, &runs, &dir.join("results"))?))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = betas.iter().map(|&b| label(b)).collect();
    let summaries = summarize(&labels, &cfg.stream.periods, &per_seed)?;
    let rows: Vec<SweepRow> = summaries
        .into_iter()
        .map(|summary| SweepRow {
            beta: betas[labels.iter().position(|l| *l == summary.label).expect("known label")],
            summary,
        })
        .collect();
    let named: Vec<(String, &RunSummary)> = rows.iter().map(|r| (r.beta.to_string(), &r.summary)).collect();
    write_text(&dir.join("sweep.txt"), &summary_table("beta", &named))?;
    write_text(&dir.join("sweep.json"), &to_json(&rows)?)?;
    Ok(rows)
}

/// The ablation variants: name, meta settings, adaptation mode.
pub fn ablation_variants(base: &MetaConfig) -> Vec<(&'static str, MetaConfig)> {
    vec![
        ("full", base.clone()),
        (
            "wo_seq",
            MetaConfig {
                inner: InnerMode::Batch,
                ..base.clone()
            },
        ),
        (
            "support_reuse",
            MetaConfig {
                support: SupportMode::Reuse,
                ..base.clone()
            },
        ),
        ("no_extra", MetaConfig { d_extra: 0, ..base.clone() }),
    ]
}

pub const ABLATION_ROWS: [&str; 5] = ["full", "wo_adapt", "wo_seq", "support_reuse", "no_extra"];

/// Trains the ablation variants per seed and evaluates them; the `wo_adapt`
/// row is the full checkpoint without adaptation.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("ablate");
    cfg.write_resolved(&dir)?;
    let adapt = AdaptConfig {
        mode: AdaptMode::OursSample,
        ..cfg.adapt.clone()
    };
    let per_seed: Vec<(u64, Scored)> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let exp = Experiment::new(cfg, s)?;
            let mut trained = Vec::new();
            for (name, meta) in ablation_variants(&exp.meta_config()) {
                let out = train_one(&exp, Objective::Meta, &meta, &seed_path(&dir, s, name))?;
                trained.push((name, checkpoint::load::<f32>(&out.checkpoint)?.1));
            }
            let mut runs = Vec::new();
            for (name, params) in &trained {
                runs.push((name.to_string(), params, adapt.clone()));
                if *name == "full" {
                    let none = AdaptConfig {
                        mode: AdaptMode::NoAdapt,
                        ..adapt.clone()
                    };
                    runs.push(("wo_adapt".to_string(), params, none));
                }
            }
            Ok((s, evaluate_all(&exp, &exp.net, &runs, &dir.join("results"))?))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = ABLATION_ROWS.iter().map(|s| s.to_string()).collect();
    let rows = summarize(&labels, &cfg.stream.periods, &per_seed)?;
    let named: Vec<(String, &RunSummary)> = rows.iter().map(|r| (r.label.clone(), r)).collect();
    write_text(&dir.join("ablation.txt"), &summary_table("variant", &named))?;
    write_text(&dir.join("ablation.json"), &to_json(&rows)?)?;
    Ok(rows)
}

/// Aggregates the result files under `dir` into `report.txt` and `report.json`.
pub fn cmd_report(dir: &Path) -> Result<Report> {
    let report = build_report(dir)?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    write_text(&dir.join("report.json"), &report.to_json()?)?;
    Ok(report)
}

/// Writes the configured training and test sets for `seed` in the binary
/// format; returns the two manifest paths.
pub fn cmd_gen_data(cfg: &RunConfig, seed: u64) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let (train, test) = super::experiment::load_data(cfg, cfg.sub_seeds(seed).data)?;
    let dir = cfg.out_dir.join("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok((write_binary(&dir.join("train"), &train)?, write_binary(&dir.join("test"), &test)?))
}
