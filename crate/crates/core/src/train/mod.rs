//! Mini-batch NLL training with early stopping, and the experiment runners.

mod experiment;

pub use experiment::{
    apply_override, grid_points, grid_search, parse_override, run_experiment, with_jobs, CellSpec, CellSummary, ExperimentConfig,
    ExperimentResult, GridBest, GridResult, GridRow, GridSpec, ResultRow,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::DeterministicHead;
use crate::compute::{
    apply_batch_norm_updates, derive_seed, rng_from_seed, AdamConfig, AdamState, BatchNormUpdate, ForwardCtx, Matrix,
    ParamStore, Tape, Var,
};
use crate::data::{normalize_labels, AnnotationDataset, FoldAssignment, RoundSplit, SplitMode};
use crate::density::{nll_graph, DensityModel};
use crate::error::{Error, Result};
use crate::model::{Density, ModelSpec, PersonalizedModel};
use crate::personalize::{compute_deviation_stats, AnnotatorRegistry, ProfileConfig, ProfileKind, ProfileModule};

const EVAL_CHUNK: usize = 4096;

/// Optimizer and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 256, max_epochs: 200, patience: 10, grad_clip: 10.0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch trace of one fit. `wall_clock_secs` is not serialized so that
/// identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub seed: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A model trainable by [`fit`].
pub trait Trainable {
    type Data;

    fn data_len(data: &Self::Data) -> usize;

    fn stores(&self) -> Vec<&ParamStore>;

    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;

    /// Mean loss over `rows` of `data`, with parameters read from `stores`.
    fn loss_graph(
        &self,
        tape: &mut Tape,
        stores: &[&ParamStore],
        data: &Self::Data,
        rows: &[usize],
        fctx: &mut ForwardCtx,
    ) -> Result<Var>;

    fn apply_updates(&mut self, updates: &[BatchNormUpdate]) {
        if let Some(s) = self.stores_mut().into_iter().next() {
            apply_batch_norm_updates(s, updates);
        }
    }
}

/// Eval-mode mean loss over all of `data`.
pub fn eval_loss<M: Trainable>(model: &M, data: &M::Data) -> Result<f64> {
    let n = M::data_len(data);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let stores = model.stores();
    let rows: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let l = model.loss_graph(&mut tape, &stores, data, chunk, &mut ForwardCtx::eval())?;
        total += tape.scalar(l) * chunk.len() as f64;
    }
    let mean = total / n as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::Numerical(format!("mean loss is {mean}")))
    }
}

fn snapshot<M: Trainable>(model: &M) -> Vec<ParamStore> {
    model.stores().into_iter().cloned().collect()
}

fn restore<M: Trainable>(model: &mut M, saved: &[ParamStore]) -> Result<()> {
    for (s, v) in model.stores_mut().into_iter().zip(saved) {
        s.copy_values_from(v)?;
    }
    Ok(())
}

/// Adam on shuffled mini-batches; after each epoch the validation loss is
/// evaluated in eval mode. Stops after `patience` epochs without strict
/// improvement and restores the best epoch's parameters.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &M::Data,
    valid: &M::Data,
    config: &FitConfig,
    seed: u64,
) -> Result<FitReport> {
    config.validate()?;
    let n = M::data_len(train);
    if n == 0 || M::data_len(valid) == 0 {
        return Err(Error::EmptyBatch);
    }
    let start = Instant::now();
    let initial_train_loss = eval_loss(model, train)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng_from_seed(derive_seed(seed, "shuffle"));
    let mut report = FitReport {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        initial_train_loss,
        final_train_loss: initial_train_loss,
        epochs_run: 0,
        seed,
        wall_clock_secs: 0.0,
    };
    let mut best = snapshot(model);
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let mut fctx = ForwardCtx::train(derive_seed(seed, &format!("e{epoch}b{b}")));
            let mut tape = Tape::new();
            let (loss, mut grads) = {
                let stores = model.stores();
                let l = model
                    .loss_graph(&mut tape, &stores, train, rows, &mut fctx)
                    .map_err(|e| divergence(e, epoch))?;
                let g = tape.backward(l).map_err(|e| divergence(e, epoch))?;
                (tape.scalar(l), g)
            };
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch });
            }
            if config.grad_clip > 0.0 {
                grads.clip_global_norm(config.grad_clip);
            }
            adam.step(&mut model.stores_mut(), &grads)?;
            let updates = fctx.take_updates();
            if !updates.is_empty() {
                model.apply_updates(&updates);
            }
            epoch_total += loss * rows.len() as f64;
        }
        report.train_loss.push(epoch_total / n as f64);
        let v = eval_loss(model, valid).map_err(|e| divergence(e, epoch))?;
        report.valid_loss.push(v);
        report.epochs_run = epoch;
        if v < report.best_valid_loss {
            report.best_valid_loss = v;
            report.best_epoch = epoch;
            best = snapshot(model);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    restore(model, &best)?;
    report.final_train_loss = eval_loss(model, train)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(_) => Error::Divergence { epoch },
        other => other,
    }
}

/// Aligned rows of normalized labels, text embeddings and registry indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub y: Matrix,
    pub text: Matrix,
    pub annotators: Vec<usize>,
}

impl Examples {
    pub fn from_rows(
        dataset: &AnnotationDataset,
        rows: &[usize],
        registry: &AnnotatorRegistry,
        dequantize: Option<u64>,
    ) -> Self {
        Self {
            y: normalize_labels(dataset, rows, dequantize),
            text: dataset.embedding_matrix(rows),
            annotators: rows.iter().map(|&i| registry.index(&dataset.records[i].annotator_id)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }
}

impl Trainable for PersonalizedModel {
    type Data = Examples;

    fn data_len(data: &Examples) -> usize {
        data.len()
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.density().params(), self.profile().params()]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let (d, p) = self.param_stores_mut();
        vec![d, p]
    }

    fn loss_graph(
        &self,
        tape: &mut Tape,
        stores: &[&ParamStore],
        data: &Examples,
        rows: &[usize],
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let y = tape.constant(data.y.select_rows(rows));
        let t = tape.constant(data.text.select_rows(rows));
        let idx: Vec<usize> = rows.iter().map(|&i| data.annotators[i]).collect();
        let lp = self.log_prob_graph(tape, stores[0], stores[1], y, t, &idx, fctx)?;
        let m = tape.mean(lp);
        let nll = tape.neg(m);
        if !tape.scalar(nll).is_finite() {
            return Err(Error::Numerical("non-finite batch NLL".into()));
        }
        Ok(nll)
    }
}

/// Labels with one context row each, for fitting a bare density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityData {
    pub y: Matrix,
    pub ctx: Matrix,
}

impl DensityData {
    /// Labels without context.
    pub fn unconditional(y: Matrix) -> Self {
        let n = y.rows();
        Self { y, ctx: Matrix::zeros(n, 0) }
    }
}

impl Trainable for Density {
    type Data = DensityData;

    fn data_len(data: &DensityData) -> usize {
        data.y.rows()
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.params()]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.params_mut()]
    }

    fn loss_graph(
        &self,
        tape: &mut Tape,
        stores: &[&ParamStore],
        data: &DensityData,
        rows: &[usize],
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let y = tape.constant(data.y.select_rows(rows));
        let c = tape.constant(data.ctx.select_rows(rows));
        let nll = nll_graph(self, tape, stores[0], y, c, fctx)?;
        if !tape.scalar(nll).is_finite() {
            return Err(Error::Numerical("non-finite batch NLL".into()));
        }
        Ok(nll)
    }
}

/// Inputs and targets for a deterministic head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadData {
    pub features: Matrix,
    pub extra: Option<Matrix>,
    pub targets: Matrix,
}

impl Trainable for DeterministicHead {
    type Data = HeadData;

    fn data_len(data: &HeadData) -> usize {
        data.features.rows()
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![self.params()]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.params_mut()]
    }

    fn loss_graph(
        &self,
        tape: &mut Tape,
        stores: &[&ParamStore],
        data: &HeadData,
        rows: &[usize],
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let x = tape.constant(data.features.select_rows(rows));
        let e = data.extra.as_ref().map(|e| tape.constant(e.select_rows(rows)));
        let t = tape.constant(data.targets.select_rows(rows));
        self.loss_graph(tape, stores[0], x, e, t, fctx)
    }
}

/// Mean negative log-likelihood of a batch; `ctx` has one row or one per label row.
pub fn nll_loss(model: &dyn DensityModel, ys: &Matrix, ctx: &Matrix) -> Result<f64> {
    if ys.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let lp = model.log_prob_batch(ys, ctx)?;
    let v = -lp.iter().sum::<f64>() / lp.len() as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("NLL is {v}")))
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub fit: FitConfig,
    pub model: ModelSpec,
    pub profile: ProfileConfig,
    /// Add uniform dequantization noise to training labels.
    pub dequantize: bool,
    pub folds: usize,
    /// Cross-validation round used by single-run training.
    pub round: usize,
    pub split_mode: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fit: FitConfig::default(),
            model: ModelSpec::default(),
            profile: ProfileConfig::default(),
            dequantize: false,
            folds: 10,
            round: 0,
            split_mode: SplitMode::TextDisjoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub fit: FitReport,
    pub test_nll: Option<f64>,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub dropped_test_fraction: f64,
}

/// Build an untrained model whose registry and statistics come from `split.train`.
pub fn prepare_model(dataset: &AnnotationDataset, split: &RoundSplit, config: &TrainConfig) -> Result<PersonalizedModel> {
    let registry = AnnotatorRegistry::from_rows(dataset, &split.train)?;
    let stats = if config.profile.kind == ProfileKind::HubiFormula {
        let s = compute_deviation_stats(dataset, &split.train)?;
        s.verify(dataset, &split.train)?;
        Some(s)
    } else {
        None
    };
    let profile = ProfileModule::new(
        config.profile.clone(),
        registry,
        stats,
        dataset.dim(),
        derive_seed(config.seed, "profile"),
    )?;
    PersonalizedModel::new(&config.model, profile, dataset.dim(), dataset.embedding_dim, derive_seed(config.seed, "density"))
}

/// Train on one cross-validation round and evaluate the restored model on its test records.
pub fn train_round(
    dataset: &AnnotationDataset,
    split: &RoundSplit,
    config: &TrainConfig,
) -> Result<(PersonalizedModel, TrainReport)> {
    let mut model = prepare_model(dataset, split, config)?;
    let registry = model.profile().registry().clone();
    let dq = config.dequantize.then(|| derive_seed(config.seed, "dequantize"));
    let train = Examples::from_rows(dataset, &split.train, &registry, dq);
    let valid = Examples::from_rows(dataset, &split.valid, &registry, None);
    let fit_report = fit(&mut model, &train, &valid, &config.fit, derive_seed(config.seed, "fit"))?;
    let test_nll = if split.test.is_empty() {
        None
    } else {
        let test = Examples::from_rows(dataset, &split.test, &registry, None);
        Some(eval_loss(&model, &test)?)
    };
    let report = TrainReport {
        config: config.clone(),
        fit: fit_report,
        test_nll,
        num_train: split.train.len(),
        num_valid: split.valid.len(),
        num_test: split.test.len(),
        dropped_test_fraction: split.dropped_fraction(),
    };
    Ok((model, report))
}

/// Train on round `config.round` of `folds`.
pub fn train_model(
    dataset: &AnnotationDataset,
    folds: &FoldAssignment,
    config: &TrainConfig,
) -> Result<(PersonalizedModel, TrainReport)> {
    let split = folds.round(dataset, config.round, config.split_mode)?;
    train_round(dataset, &split, config)
}

#[cfg(test)]
mod tests;
