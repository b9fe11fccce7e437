//! Running manifests and summarising their artifacts.
//!
//! Each `(cell, seed)` gets its own directory under `output_dir`:
//!
//! ```text
//! fedproto_d0.5_s1/
//!   rounds.csv      t,accuracy,loss,grad_dissimilarity,amm,mmd,attention_entropy
//!   summary.json
//!   plotdata/       one `t,value` file per metric, moving-averaged
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agg::{StrategyConfig, StrategyKind};
use crate::config::{Cell, ExperimentManifest};
use crate::data::{build_dataset, load_idx, DatasetCache, FederatedDataset, PartitionSpec};
use crate::engine::{run_simulation, train_centralized, SimulationLog};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, ffd, mean_std, moving_average, MmdReference, RoundRecord};
use crate::nn::{ModelSpec, ParamSet};

pub const ROUNDS_HEADER: &str = "t,accuracy,loss,grad_dissimilarity,amm,mmd,attention_entropy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub kind: StrategyKind,
    pub delta: f64,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub final_amm: f64,
    pub final_mmd: Option<f64>,
    pub ffd_vs_fedavg: Option<f64>,
    pub wall_time_s: f64,
    /// Mean gradient dissimilarity over the trailing 10% of records.
    pub tail_grad_dissimilarity: f64,
    pub centralized_accuracy: Option<f64>,
    pub rounds_run: usize,
}

/// What a manifest run produced.
#[derive(Debug, Default)]
pub struct ExperimentOutcome {
    pub summaries: Vec<RunSummary>,
    /// `(cell directory name, error message)` for every failed cell.
    pub failures: Vec<(String, String)>,
}

#[derive(Serialize)]
struct DatasetKey<'a> {
    partition: &'a PartitionSpec,
    sources: Option<[String; 2]>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Builds the manifest's dataset, reusing the on-disk cache when the
/// partition spec and source file contents match.
pub fn prepare_dataset(manifest: &ExperimentManifest) -> Result<FederatedDataset> {
    let cache = DatasetCache::new(manifest.cache_dir());
    match manifest.dataset.sources() {
        None => {
            let spec = manifest.dataset.partition_spec(None)?;
            let key = DatasetKey {
                partition: &spec,
                sources: None,
            };
            cache.get_or_build(&key, || build_dataset(&spec, None))
        }
        Some((images, labels)) => {
            let digests = [file_digest(images)?, file_digest(labels)?];
            let pool = load_idx(images, labels)?;
            let spec = manifest.dataset.partition_spec(Some(pool.len()))?;
            let key = DatasetKey {
                partition: &spec,
                sources: Some(digests),
            };
            cache.get_or_build(&key, || build_dataset(&spec, Some(&pool)))
        }
    }
}

pub fn model_spec(manifest: &ExperimentManifest, dataset: &FederatedDataset) -> ModelSpec {
    ModelSpec::mlp(dataset.input_dim, &manifest.model.hidden_dims, dataset.num_classes)
}

pub fn cell_dir_name(strategy: &StrategyConfig, delta: f64, seed: u64) -> String {
    format!("{}_d{}_s{}", strategy.label(), delta, seed)
}

/// Formats with 6 significant digits, without trailing zeros.
pub fn fmt6(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("valid float");
    format!("{rounded}")
}

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t,
            fmt6(r.accuracy),
            fmt6(r.loss),
            fmt6(r.grad_dissimilarity),
            fmt6(r.amm),
            r.mmd.map(fmt6).unwrap_or_default(),
            fmt6(r.attention_entropy)
        );
    }
    out
}

/// Smoothed `(t, value)` series for each metric.
pub fn plot_series(records: &[RoundRecord], window_frac: f64) -> BTreeMap<&'static str, Vec<(usize, f64)>> {
    let mut out = BTreeMap::new();
    let cols: [(&str, fn(&RoundRecord) -> Option<f64>); 6] = [
        ("accuracy", |r| Some(r.accuracy)),
        ("loss", |r| Some(r.loss)),
        ("grad_dissimilarity", |r| Some(r.grad_dissimilarity)),
        ("amm", |r| Some(r.amm)),
        ("mmd", |r| r.mmd),
        ("attention_entropy", |r| Some(r.attention_entropy)),
    ];
    for (name, get) in cols {
        let points: Vec<(usize, f64)> = records.iter().filter_map(|r| get(r).map(|v| (r.t, v))).collect();
        if points.is_empty() {
            continue;
        }
        let values: Vec<f64> = points.iter().map(|p| p.1).collect();
        let smooth = moving_average(&values, window_frac);
        out.insert(name, points.iter().map(|p| p.0).zip(smooth).collect());
    }
    out
}

fn tail_mean(records: &[RoundRecord], frac: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let n = ((records.len() as f64 * frac).ceil() as usize).clamp(1, records.len());
    let tail = &records[records.len() - n..];
    tail.iter().map(|r| r.grad_dissimilarity).sum::<f64>() / n as f64
}

pub fn summarize(
    strategy: &StrategyConfig,
    delta: f64,
    seed: u64,
    log: &SimulationLog,
    wall_time_s: f64,
    centralized_accuracy: Option<f64>,
) -> Result<RunSummary> {
    let last = log
        .records
        .last()
        .ok_or_else(|| Error::Usage("simulation produced no records".into()))?;
    Ok(RunSummary {
        strategy: strategy.label(),
        kind: strategy.kind,
        delta,
        seed,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        final_amm: last.amm,
        final_mmd: last.mmd,
        ffd_vs_fedavg: None,
        wall_time_s,
        tail_grad_dissimilarity: tail_mean(&log.records, 0.1),
        centralized_accuracy,
        rounds_run: log.records.last().map_or(0, |r| r.t + 1),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_summary(path: &Path, s: &RunSummary) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(s)?)
}

/// Writes the cell's artifacts into a scratch directory and moves it into
/// place only when complete.
pub fn write_artifacts(dir: &Path, log: &SimulationLog, summary: &RunSummary, window_frac: f64) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("bad cell directory {}", dir.display())))?;
    let tmp = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let plot = tmp.join("plotdata");
    fs::create_dir_all(&plot).map_err(|e| Error::io(&plot, e))?;
    write_file(&tmp.join("rounds.csv"), rounds_csv(&log.records))?;
    write_summary(&tmp.join("summary.json"), summary)?;
    for (metric, points) in plot_series(&log.records, window_frac) {
        let mut text = String::from("t,value\n");
        for (t, v) in points {
            let _ = writeln!(text, "{t},{}", fmt6(v));
        }
        write_file(&plot.join(format!("{metric}.csv")), text)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

struct Reference {
    params: ParamSet,
    accuracy: f64,
    mmd: MmdReference,
}

fn centralized_reference(
    manifest: &ExperimentManifest,
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    seed: u64,
) -> Result<Option<Reference>> {
    let c = &manifest.centralized;
    if !c.enabled {
        return Ok(None);
    }
    let params = train_centralized(dataset, spec, c.epochs, c.lr, c.batch_size, seed)?;
    let acc = accuracy(&params, spec, dataset)?;
    info!("centralized reference (seed {seed}): accuracy {acc:.4}");
    let mmd = MmdReference::new(&params, spec, dataset, seed)?;
    Ok(Some(Reference {
        params,
        accuracy: acc,
        mmd,
    }))
}

/// Cells selected by an optional filter (see [`Cell::matches`]).
pub fn selected_cells(manifest: &ExperimentManifest, filter: Option<&str>) -> Vec<Cell> {
    manifest
        .cells()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.matches(f)))
        .collect()
}

/// Runs every selected `(cell, seed)` pair and writes its artifacts. A cell
/// failure is recorded and the remaining cells still run.
pub fn run_experiment(manifest: &ExperimentManifest, filter: Option<&str>) -> Result<ExperimentOutcome> {
    manifest.validate()?;
    let cells = selected_cells(manifest, filter);
    if cells.is_empty() {
        return Err(Error::Usage(format!(
            "no cells match filter {:?}",
            filter.unwrap_or_default()
        )));
    }
    fs::create_dir_all(&manifest.output_dir).map_err(|e| Error::io(&manifest.output_dir, e))?;
    let dataset = prepare_dataset(manifest)?;
    let spec = model_spec(manifest, &dataset);
    info!(
        "dataset: {} clients, {} samples; model {:?}",
        dataset.num_clients(),
        dataset.total_samples(),
        spec.layer_dims()
    );

    let mut outcome = ExperimentOutcome::default();
    for &seed in &manifest.seeds {
        let reference = centralized_reference(manifest, &dataset, &spec, seed)?;
        let results: Vec<(String, Result<RunSummary>)> = cells
            .par_iter()
            .map(|cell| {
                let name = cell_dir_name(&cell.strategy, cell.delta, seed);
                let result = run_cell(manifest, &dataset, &spec, cell, seed, reference.as_ref(), &name);
                (name, result)
            })
            .collect();
        for (name, r) in results {
            match r {
                Ok(s) => outcome.summaries.push(s),
                Err(e) => {
                    error!("cell {name} failed: {e}");
                    outcome.failures.push((name, e.to_string()));
                }
            }
        }
        if let Some(r) = &reference {
            let path = manifest.output_dir.join(format!("centralized_s{seed}.json"));
            write_file(&path, serde_json::to_string_pretty(&r.params)?)?;
        }
    }
    attach_ffd(&manifest.output_dir, &mut outcome.summaries)?;
    Ok(outcome)
}

fn run_cell(
    manifest: &ExperimentManifest,
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    cell: &Cell,
    seed: u64,
    reference: Option<&Reference>,
    name: &str,
) -> Result<RunSummary> {
    let config = manifest.sim.to_sim_config(cell.strategy, cell.delta, seed);
    let start = Instant::now();
    info!("running {name}");
    let log = run_simulation(&config, spec, dataset, reference.map(|r| &r.mmd))?;
    let summary = summarize(
        &cell.strategy,
        cell.delta,
        seed,
        &log,
        start.elapsed().as_secs_f64(),
        reference.map(|r| r.accuracy),
    )?;
    write_artifacts(
        &manifest.output_dir.join(name),
        &log,
        &summary,
        config.moving_avg_window_frac,
    )?;
    Ok(summary)
}

fn is_fedavg_baseline(s: &RunSummary) -> bool {
    s.strategy == StrategyConfig::fedavg().label()
}

/// Fills `ffd_vs_fedavg` from the FedAvg run with the same `(delta, seed)`,
/// looking on disk when it was not part of this invocation, and rewrites the
/// affected summary files.
pub fn attach_ffd(output_dir: &Path, summaries: &mut [RunSummary]) -> Result<()> {
    let mut baselines: Vec<RunSummary> = summaries.iter().filter(|s| is_fedavg_baseline(s)).cloned().collect();
    for s in summaries.iter() {
        let have = baselines.iter().any(|b| b.delta == s.delta && b.seed == s.seed);
        if !have {
            let path = output_dir
                .join(cell_dir_name(&StrategyConfig::fedavg(), s.delta, s.seed))
                .join("summary.json");
            if let Ok(bytes) = fs::read(&path) {
                baselines.push(serde_json::from_slice(&bytes)?);
            }
        }
    }
    for s in summaries.iter_mut() {
        if is_fedavg_baseline(s) {
            continue;
        }
        let base = baselines.iter().find(|b| b.delta == s.delta && b.seed == s.seed);
        let value = match (s.final_mmd, base.and_then(|b| b.final_mmd)) {
            (Some(a), Some(b)) => match ffd(a, b) {
                Ok(v) => Some(v),
                Err(e) => {
                    warn!("{}: {e}", s.strategy);
                    None
                }
            },
            _ => None,
        };
        if value != s.ffd_vs_fedavg {
            s.ffd_vs_fedavg = value;
            let path = output_dir
                .join(format!("{}_d{}_s{}", s.strategy, s.delta, s.seed))
                .join("summary.json");
            if path.exists() {
                write_summary(&path, s)?;
            }
        }
    }
    Ok(())
}

/// Every `summary.json` one level below `dir`, in directory-name order.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("summary.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect()
}

fn strategy_order(s: &RunSummary) -> (u8, String) {
    let rank = match s.kind {
        StrategyKind::Fedavg => 0,
        StrategyKind::Fedprox => 1,
        StrategyKind::Fairness => 2,
        StrategyKind::Fedproto => 3,
    };
    (rank, s.strategy.clone())
}

/// Per strategy: accuracy (in percent) per delta, each averaged over seeds,
/// then mean and sample std across deltas. Loss likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub per_delta_accuracy: BTreeMap<String, f64>,
    pub per_delta_loss: BTreeMap<String, f64>,
    pub accuracy: (f64, f64),
    pub loss: (f64, f64),
}

pub fn report_rows(summaries: &[RunSummary]) -> Vec<ReportRow> {
    let mut sorted: Vec<&RunSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| strategy_order(s));
    let mut groups: Vec<(String, Vec<&RunSummary>)> = Vec::new();
    for s in sorted {
        match groups.last_mut() {
            Some((name, g)) if *name == s.strategy => g.push(s),
            _ => groups.push((s.strategy.clone(), vec![s])),
        }
    }
    groups
        .into_iter()
        .map(|(strategy, runs)| {
            let mut by_delta: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for r in &runs {
                let e = by_delta.entry(format!("{}", r.delta)).or_default();
                e.0.push(r.final_accuracy * 100.0);
                e.1.push(r.final_loss);
            }
            let per_delta: BTreeMap<String, (f64, f64)> = by_delta
                .into_iter()
                .map(|(d, (a, l))| {
                    (
                        d,
                        (mean_std(&a).expect("non-empty").0, mean_std(&l).expect("non-empty").0),
                    )
                })
                .collect();
            let accs: Vec<f64> = per_delta.values().map(|v| v.0).collect();
            let losses: Vec<f64> = per_delta.values().map(|v| v.1).collect();
            ReportRow {
                strategy,
                per_delta_accuracy: per_delta.iter().map(|(d, v)| (d.clone(), v.0)).collect(),
                per_delta_loss: per_delta.iter().map(|(d, v)| (d.clone(), v.1)).collect(),
                accuracy: mean_std(&accs).expect("non-empty"),
                loss: mean_std(&losses).expect("non-empty"),
            }
        })
        .collect()
}

/// Plain-text tables; `"no runs"` when there is nothing to show.
pub fn report_text(summaries: &[RunSummary]) -> String {
    if summaries.is_empty() {
        return "no runs\n".to_string();
    }
    let rows = report_rows(summaries);
    let deltas: Vec<String> = {
        let mut d: Vec<f64> = summaries.iter().map(|s| s.delta).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d.into_iter().map(|v| format!("{v}")).collect()
    };
    let width = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>14}  {:>14}", "strategy", "accuracy (%)", "loss");
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}",
            r.strategy,
            format!("{:.1} ± {:.1}", r.accuracy.0, r.accuracy.1),
            format!("{:.2} ± {:.2}", r.loss.0, r.loss.1)
        );
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "δ");
    for d in &deltas {
        let _ = write!(
            out,
            "  {:>7}",
            format!("{}%", (d.parse::<f64>().unwrap_or(0.0) * 100.0).round())
        );
    }
    let _ = writeln!(out, "  {:>12}", "avg ± std");
    for r in &rows {
        let _ = write!(out, "{:<width$}", r.strategy);
        for d in &deltas {
            match r.per_delta_accuracy.get(d) {
                Some(v) => {
                    let _ = write!(out, "  {v:>7.1}");
                }
                None => {
                    let _ = write!(out, "  {:>7}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {:>12}", format!("{:.1} ± {:.1}", r.accuracy.0, r.accuracy.1));
    }
    let ffd_rows: Vec<&RunSummary> = summaries.iter().filter(|s| s.ffd_vs_fedavg.is_some()).collect();
    if !ffd_rows.is_empty() {
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>5}  {:>10}  {:>10}",
            "strategy", "δ", "seed", "AMM", "FFD (%)"
        );
        for s in ffd_rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>5}  {:>10.4}  {:>10.1}",
                s.strategy,
                s.delta,
                s.seed,
                s.final_amm,
                s.ffd_vs_fedavg.unwrap_or_default()
            );
        }
    }
    out
}

pub fn report_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from("strategy,delta,accuracy_pct,loss\n");
    for r in report_rows(summaries) {
        for (d, a) in &r.per_delta_accuracy {
            let _ = writeln!(out, "{},{},{},{}", r.strategy, d, fmt6(*a), fmt6(r.per_delta_loss[d]));
        }
        let _ = writeln!(
            out,
            "{},mean,{},{}\n{},std,{},{}",
            r.strategy,
            fmt6(r.accuracy.0),
            fmt6(r.loss.0),
            r.strategy,
            fmt6(r.accuracy.1),
            fmt6(r.loss.1)
        );
    }
    out
}
