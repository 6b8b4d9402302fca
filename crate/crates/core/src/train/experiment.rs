use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{train_round, TrainConfig};
use crate::data::{split_folds, AnnotationDataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::model::Family;
use crate::personalize::ProfileKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub family: Family,
    pub personalization: ProfileKind,
}

/// Cells × seeds × folds, all sharing `base` apart from family, personalization and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub base: TrainConfig,
    pub cells: Vec<CellSpec>,
    pub folds: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            base: TrainConfig::default(),
            cells: vec![
                CellSpec { family: Family::Maf, personalization: ProfileKind::TxtBaseline },
                CellSpec { family: Family::Maf, personalization: ProfileKind::OneHot },
            ],
            folds: 10,
            seeds: vec![0],
        }
    }
}

/// One trained fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub flow: String,
    pub personalization: String,
    pub fold: usize,
    pub seed: u64,
    pub test_nll: Option<f64>,
    pub valid_nll: Option<f64>,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub flow: String,
    pub personalization: String,
    pub mean_test_nll: Option<f64>,
    pub std_test_nll: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentResult {
    /// Test NLLs of one cell ordered by (seed, fold); failed folds are skipped.
    pub fn cell_values(&self, cell: CellSpec) -> Vec<(u64, usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.flow == cell.family.name() && r.personalization == cell.personalization.name())
            .filter_map(|r| r.test_nll.map(|v| (r.seed, r.fold, v)))
            .collect()
    }
}

/// Run `f` inside a dedicated pool of `jobs` threads (at least one).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(s))
}

/// Train one model per (cell, seed, fold). Failures are recorded, not propagated.
pub fn run_experiment(dataset: &AnnotationDataset, config: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    if config.cells.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one cell and one seed".into()));
    }
    let mut folds: BTreeMap<u64, FoldAssignment> = BTreeMap::new();
    for &seed in &config.seeds {
        folds.insert(seed, split_folds(dataset, config.folds, seed)?);
    }
    let mut tasks = Vec::new();
    for &seed in &config.seeds {
        for &cell in &config.cells {
            for fold in 0..config.folds {
                tasks.push((seed, cell, fold));
            }
        }
    }
    let rows: Vec<ResultRow> = with_jobs(jobs, || {
        tasks
            .par_iter()
            .map(|&(seed, cell, fold)| {
                let mut cfg = config.base.clone();
                cfg.seed = seed;
                cfg.model.family = cell.family;
                cfg.profile.kind = cell.personalization;
                cfg.round = fold;
                let outcome = folds[&seed]
                    .round(dataset, fold, cfg.split_mode)
                    .and_then(|split| train_round(dataset, &split, &cfg));
                let mut row = ResultRow {
                    dataset: config.dataset.clone(),
                    flow: cell.family.name().into(),
                    personalization: cell.personalization.name().into(),
                    fold,
                    seed,
                    test_nll: None,
                    valid_nll: None,
                    status: "ok".into(),
                    error: None,
                };
                match outcome {
                    Ok((_, report)) if report.test_nll.is_some() => {
                        row.test_nll = report.test_nll;
                        row.valid_nll = Some(report.fit.best_valid_loss);
                    }
                    Ok(_) => {
                        row.status = "failed".into();
                        row.error = Some("no test records".into());
                    }
                    Err(e) => {
                        row.status = "failed".into();
                        row.error = Some(e.to_string());
                    }
                }
                row
            })
            .collect()
    })?;
    let cells = config
        .cells
        .iter()
        .map(|cell| {
            let mine: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.flow == cell.family.name() && r.personalization == cell.personalization.name())
                .collect();
            let vals: Vec<f64> = mine.iter().filter_map(|r| r.test_nll).collect();
            let (mean, std) = mean_std(&vals);
            CellSummary {
                flow: cell.family.name().into(),
                personalization: cell.personalization.name().into(),
                mean_test_nll: mean,
                std_test_nll: std,
                completed: vals.len(),
                failed: mine.len() - vals.len(),
            }
        })
        .collect();
    Ok(ExperimentResult { rows, cells })
}

/// Parse `key=value`; the value is read as JSON, falling back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Set a dotted path inside a JSON object. Every segment must already exist.
pub fn apply_override(target: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not inside an object")))?;
        let slot = obj.get_mut(*p).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Base configuration plus a list of values per dotted key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub axes: BTreeMap<String, Vec<Value>>,
}

/// Cartesian product of the axes, in lexicographic key order with the last key varying fastest.
pub fn grid_points(spec: &GridSpec) -> Result<Vec<(BTreeMap<String, Value>, TrainConfig)>> {
    let base = serde_json::to_value(&spec.base).map_err(|e| Error::Config(e.to_string()))?;
    let mut points: Vec<BTreeMap<String, Value>> = vec![BTreeMap::new()];
    for (k, vals) in &spec.axes {
        if vals.is_empty() {
            return Err(Error::Config(format!("grid axis `{k}` has no values")));
        }
        let mut next = Vec::with_capacity(points.len() * vals.len());
        for p in &points {
            for v in vals {
                let mut q = p.clone();
                q.insert(k.clone(), v.clone());
                next.push(q);
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|p| {
            let mut cfg = base.clone();
            for (k, v) in &p {
                apply_override(&mut cfg, k, v.clone())?;
            }
            let tc: TrainConfig =
                serde_json::from_value(cfg).map_err(|e| Error::Config(format!("grid point {p:?}: {e}")))?;
            Ok((p, tc))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub point: BTreeMap<String, Value>,
    pub flow: String,
    pub personalization: String,
    pub valid_nll: Option<f64>,
    pub test_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBest {
    pub flow: String,
    pub personalization: String,
    pub index: usize,
    pub point: BTreeMap<String, Value>,
    pub config: TrainConfig,
    pub valid_nll: f64,
    pub test_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub trace: Vec<GridRow>,
    pub best: Vec<GridBest>,
}

/// Evaluate every grid point on one round of `folds`; select by validation NLL.
pub fn grid_search(
    dataset: &AnnotationDataset,
    folds: &FoldAssignment,
    spec: &GridSpec,
    jobs: usize,
) -> Result<GridResult> {
    let points = grid_points(spec)?;
    let results: Vec<(GridRow, TrainConfig)> = with_jobs(jobs, || {
        points
            .par_iter()
            .enumerate()
            .map(|(index, (point, cfg))| {
                let outcome = folds
                    .round(dataset, cfg.round, cfg.split_mode)
                    .and_then(|split| train_round(dataset, &split, cfg));
                let mut row = GridRow {
                    index,
                    point: point.clone(),
                    flow: cfg.model.family.name().into(),
                    personalization: cfg.profile.kind.name().into(),
                    valid_nll: None,
                    test_nll: None,
                    error: None,
                };
                match outcome {
                    Ok((_, rep)) => {
                        row.valid_nll = Some(rep.fit.best_valid_loss);
                        row.test_nll = rep.test_nll;
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                (row, cfg.clone())
            })
            .collect()
    })?;
    let mut best: BTreeMap<(String, String), GridBest> = BTreeMap::new();
    for (row, cfg) in &results {
        let Some(v) = row.valid_nll else { continue };
        let key = (row.flow.clone(), row.personalization.clone());
        if best.get(&key).is_none_or(|b| v < b.valid_nll) {
            best.insert(
                key,
                GridBest {
                    flow: row.flow.clone(),
                    personalization: row.personalization.clone(),
                    index: row.index,
                    point: row.point.clone(),
                    config: cfg.clone(),
                    valid_nll: v,
                    test_nll: row.test_nll,
                },
            );
        }
    }
    Ok(GridResult { trace: results.into_iter().map(|(r, _)| r).collect(), best: best.into_values().collect() })
}
