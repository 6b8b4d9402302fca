use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use emoflow::baselines::HeadConfig;
use emoflow::compute::{derive_seed, StoredParam};
use emoflow::data::{
    split_folds, synth_generate, write_annotations, write_embeddings, write_schema, AnnotationDataset, SplitMode,
    SynthConfig,
};
use emoflow::eval::{compare_to_baseline, Comparison};
use emoflow::infer::{
    curve_grid, density_curve, evaluate_head, hybrid_table, predict_records, prediction_metric, train_head,
    write_curve_csv, DiscretizeTask, HeadTrainConfig, VoteRule, DEFAULT_CANDIDATES,
};
use emoflow::model::{Checkpoint, PersonalizedModel};
use emoflow::personalize::AnnotatorRegistry;
use emoflow::train::{
    grid_search, run_experiment, train_model, with_jobs, CellSummary, ExperimentConfig, GridSpec, TrainConfig,
};
use emoflow::{Error, Result};

use crate::{load_data_dir, resolve_config, Command, GlobalArgs, ModelArgs, Outputs};

const STRICT: &str = "text_and_user_disjoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizeConfig {
    pub seed: u64,
    pub candidates: usize,
    pub rule: VoteRule,
    /// `None` picks binary for all-binary schemas, regression otherwise.
    pub task: Option<DiscretizeTask>,
    /// 0 predicts every record; otherwise the test records of `round`.
    pub folds: usize,
    pub round: usize,
    pub split_mode: SplitMode,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            candidates: DEFAULT_CANDIDATES,
            rule: VoteRule::default(),
            task: None,
            folds: 0,
            round: 0,
            split_mode: SplitMode::TextDisjoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    /// Seed of the regression candidates behind the features.
    pub seed: u64,
    pub head: HeadTrainConfig,
    pub folds: usize,
    pub round: usize,
    pub split_mode: SplitMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { seed: 0, head: HeadTrainConfig::default(), folds: 10, round: 0, split_mode: SplitMode::TextDisjoint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    /// Defaults to the first text in the dataset.
    pub text_id: Option<String>,
    /// Defaults to the unknown annotator.
    pub annotator_id: Option<String>,
    pub dim: usize,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    /// Values of the other dimensions; empty means 0.5 each.
    pub others: Vec<f64>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { text_id: None, annotator_id: None, dim: 0, start: 0.0, stop: 1.0, step: 0.01, others: Vec::new() }
    }
}

#[derive(Serialize)]
struct ExperimentSummary<'a> {
    cells: &'a [CellSummary],
    comparisons: Vec<Comparison>,
    /// Lowest mean test NLL per flow.
    best: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct SavedHead {
    config: HeadConfig,
    registry: Option<AnnotatorRegistry>,
    params: BTreeMap<String, StoredParam>,
}

fn flag_overrides<'a>(
    command: &str,
    g: &GlobalArgs,
    seed: &[&'a str],
    dequantize: Option<&'a str>,
    split: Option<&'a str>,
) -> Result<Vec<(&'a str, Value)>> {
    let mut out = Vec::new();
    if let Some(s) = g.seed {
        if seed.is_empty() {
            return Err(Error::Config(format!("--seed does not apply to `{command}`")));
        }
        for k in seed {
            let v = if *k == "seeds" { json!([s]) } else { json!(s) };
            out.push((*k, v));
        }
    }
    if g.dequantize {
        let k = dequantize.ok_or_else(|| Error::Config(format!("--dequantize does not apply to `{command}`")))?;
        out.push((k, json!(true)));
    }
    if g.strict_user_split {
        let k = split.ok_or_else(|| Error::Config(format!("--strict-user-split does not apply to `{command}`")))?;
        out.push((k, json!(STRICT)));
    }
    Ok(out)
}

fn load_model(args: &ModelArgs) -> Result<(AnnotationDataset, PersonalizedModel)> {
    let text = std::fs::read_to_string(&args.checkpoint)
        .map_err(|e| Error::Io(format!("{}: {e}", args.checkpoint.display())))?;
    let ck = Checkpoint::from_json(&text)?;
    let ds = load_data_dir(&args.data.data)?;
    if ck.schema != ds.schema {
        return Err(Error::Config("checkpoint label schema differs from the dataset schema".into()));
    }
    if ck.text_dim != ds.embedding_dim {
        return Err(Error::Shape(format!("checkpoint expects {}-d embeddings, dataset has {}", ck.text_dim, ds.embedding_dim)));
    }
    Ok((ds, PersonalizedModel::from_checkpoint(&ck)?))
}

pub(crate) fn dispatch(command: &Command, g: &GlobalArgs, out: &mut Outputs) -> Result<(Value, Option<u64>)> {
    let file = g.config.as_deref();
    let name = command.name();
    match command {
        Command::Synth => {
            let flags = flag_overrides(name, g, &["seed"], None, None)?;
            let (cfg, snap): (SynthConfig, _) = resolve_config(file, flags, &g.set)?;
            let (ds, _) = synth_generate(&cfg)?;
            out.write(crate::ANNOTATIONS_FILE, |w| write_annotations(w, &ds.records))?;
            out.write(crate::EMBEDDINGS_FILE, |w| write_embeddings(w, ds.embedding_dim, &ds.embeddings))?;
            out.write(crate::SCHEMA_FILE, |w| write_schema(w, &ds.schema))?;
            Ok((snap, Some(cfg.seed)))
        }
        Command::Train(d) => {
            let flags = flag_overrides(name, g, &["seed"], Some("dequantize"), Some("split_mode"))?;
            let (cfg, snap): (TrainConfig, _) = resolve_config(file, flags, &g.set)?;
            let ds = load_data_dir(&d.data)?;
            let folds = split_folds(&ds, cfg.folds, cfg.seed)?;
            let (model, report) = with_jobs(g.jobs, || train_model(&ds, &folds, &cfg))??;
            let ck = model.to_checkpoint(&ds.schema).to_json()?;
            out.write("checkpoint.json", |w| Ok(writeln!(w, "{ck}")?))?;
            out.json("report.json", &report)?;
            Ok((snap, Some(cfg.seed)))
        }
        Command::Experiment(d) => {
            let flags = flag_overrides(name, g, &["seeds"], Some("base.dequantize"), Some("base.split_mode"))?;
            let (cfg, snap): (ExperimentConfig, _) = resolve_config(file, flags, &g.set)?;
            let ds = load_data_dir(&d.data)?;
            let result = run_experiment(&ds, &cfg, g.jobs)?;
            let mut best: BTreeMap<String, (String, f64)> = BTreeMap::new();
            for c in &result.cells {
                if let Some(v) = c.mean_test_nll {
                    let e = best.entry(c.flow.clone()).or_insert((c.personalization.clone(), v));
                    if v < e.1 {
                        *e = (c.personalization.clone(), v);
                    }
                }
            }
            let summary = ExperimentSummary {
                cells: &result.cells,
                comparisons: compare_to_baseline(&result),
                best: best.into_iter().map(|(k, (p, _))| (k, p)).collect(),
            };
            out.jsonl("results.jsonl", &result.rows)?;
            out.json("summary.json", &summary)?;
            Ok((snap, cfg.seeds.first().copied()))
        }
        Command::Grid(d) => {
            let flags = flag_overrides(name, g, &["base.seed"], Some("base.dequantize"), Some("base.split_mode"))?;
            let (spec, snap): (GridSpec, _) = resolve_config(file, flags, &g.set)?;
            let ds = load_data_dir(&d.data)?;
            let folds = split_folds(&ds, spec.base.folds, spec.base.seed)?;
            let result = grid_search(&ds, &folds, &spec, g.jobs)?;
            out.jsonl("trace.jsonl", &result.trace)?;
            out.json("best.json", &result.best)?;
            Ok((snap, Some(spec.base.seed)))
        }
        Command::Discretize(m) => {
            let flags = flag_overrides(name, g, &["seed"], None, Some("split_mode"))?;
            let (cfg, snap): (DiscretizeConfig, _) = resolve_config(file, flags, &g.set)?;
            let (ds, model) = load_model(m)?;
            let rows: Vec<usize> = if cfg.folds == 0 {
                (0..ds.len()).collect()
            } else {
                split_folds(&ds, cfg.folds, cfg.seed)?.round(&ds, cfg.round, cfg.split_mode)?.test
            };
            let task = cfg.task.unwrap_or_else(|| DiscretizeTask::for_schema(&ds.schema));
            if task == DiscretizeTask::Binary && !ds.schema.all_binary() {
                return Err(Error::Config("binary discretization needs an all-binary schema".into()));
            }
            let preds =
                with_jobs(g.jobs, || predict_records(&model, &ds, &rows, task, cfg.candidates, cfg.rule, cfg.seed))??;
            let (metric, value) = prediction_metric(&ds.schema, &preds, task)?;
            out.jsonl("predictions.jsonl", &preds)?;
            out.json("metrics.json", &json!({ "task": task, "metric": metric, "value": value, "n": preds.len() }))?;
            Ok((snap, Some(cfg.seed)))
        }
        Command::Hybrid(m) => {
            let flags = flag_overrides(name, g, &["seed", "head.seed"], None, Some("split_mode"))?;
            let (cfg, snap): (HybridConfig, _) = resolve_config(file, flags, &g.set)?;
            let (ds, model) = load_model(m)?;
            let split = split_folds(&ds, cfg.folds, cfg.seed)?.round(&ds, cfg.round, cfg.split_mode)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let (table, det, hyb) = with_jobs(g.jobs, || -> Result<_> {
                let table = hybrid_table(&model, &ds, &all, derive_seed(cfg.seed, "hybrid-features"))?;
                let det = train_head(&ds, &split, None, &cfg.head)?;
                let hyb = train_head(&ds, &split, Some(&table), &cfg.head)?;
                Ok((table, det, hyb))
            })??;
            let det_eval = evaluate_head(&det, &ds, &split.test, None)?;
            let hyb_eval = evaluate_head(&hyb, &ds, &split.test, Some(&table))?;
            out.write("features.jsonl", |w| table.write_jsonl(w))?;
            let saved = SavedHead {
                config: hyb.head.config().clone(),
                registry: hyb.registry.clone(),
                params: hyb.head.params().snapshot(),
            };
            out.json("hybrid_head.json", &saved)?;
            out.json(
                "metrics.json",
                &json!({
                    "metric": hyb_eval.metric,
                    "deterministic": det_eval.value,
                    "hybrid": hyb_eval.value,
                    "n_test": split.test.len(),
                }),
            )?;
            Ok((snap, Some(cfg.seed)))
        }
        Command::Curves(m) => {
            let flags = flag_overrides(name, g, &[], None, None)?;
            let (cfg, snap): (CurveConfig, _) = resolve_config(file, flags, &g.set)?;
            let (ds, model) = load_model(m)?;
            let text_id = match &cfg.text_id {
                Some(t) => t.clone(),
                None => ds.texts().into_iter().next().ok_or(Error::EmptyInput)?,
            };
            let annotator = cfg.annotator_id.clone().unwrap_or_default();
            let ctx = model.context(ds.embedding(&text_id)?, &annotator)?;
            let others = if cfg.others.is_empty() { vec![0.5; ds.dim()] } else { cfg.others.clone() };
            let grid = curve_grid(cfg.start, cfg.stop, cfg.step)?;
            let points = density_curve(model.density(), &ctx, cfg.dim, &grid, &others)?;
            let header = vec![
                ("text_id".to_string(), text_id),
                ("annotator_id".to_string(), annotator),
                ("dim".to_string(), ds.schema.dims.get(cfg.dim).map_or(cfg.dim.to_string(), |d| d.name.clone())),
            ];
            out.write("curve.csv", |w| write_curve_csv(w, &header, &points))?;
            Ok((snap, None))
        }
    }
}
