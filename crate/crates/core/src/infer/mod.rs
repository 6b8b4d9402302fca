//! Point predictions, hybrid features and density curves from a frozen density.

mod hybrid;

pub use hybrid::{
    evaluate_head, hybrid_table, train_head, train_hybrid, HeadEvaluation, HeadInputs, HeadTrainConfig, HybridRow,
    HybridTable, TrainedHead,
};

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{derive_seed, rng_from_seed, Matrix};
use crate::data::{AnnotationDataset, LabelSchema};
use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::eval::{macro_f1, r_squared};
use crate::model::PersonalizedModel;

pub const PROBES: usize = 11;
pub const DEFAULT_CANDIDATES: usize = 100;

/// Probe value `i` of the 11-point grid `0.0, 0.1, …, 1.0`.
pub fn probe_value(i: usize) -> f64 {
    i as f64 / 10.0
}

/// Class decisions and normalized probe masses for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryDecision {
    pub classes: Vec<u8>,
    /// One 11-point distribution per dimension.
    pub masses: Vec<Vec<f64>>,
}

/// Probe rows for every dimension: 11 values × {others at 0, others at 1}.
pub fn binary_probe_matrix(dim: usize) -> Matrix {
    let mut rows = Vec::with_capacity(dim * PROBES * 2);
    for d in 0..dim {
        for i in 0..PROBES {
            for other in [0.0, 1.0] {
                let mut y = vec![other; dim];
                y[d] = probe_value(i);
                rows.push(y);
            }
        }
    }
    Matrix::from_rows(&rows)
}

fn check_ctx(model: &dyn DensityModel, ctx: &[f64]) -> Result<()> {
    if ctx.len() != model.context_dim() {
        return Err(Error::Shape(format!("expected context of length {}, got {}", model.context_dim(), ctx.len())));
    }
    Ok(())
}

/// Evaluate the binary probe grid and decide each dimension's class.
///
/// Class 1 iff `mass(v > 0.5) + ½·mass(0.5)` exceeds the opposite side; exact ties give class 0.
pub fn discretize_binary(model: &dyn DensityModel, ctx: &[f64]) -> Result<BinaryDecision> {
    check_ctx(model, ctx)?;
    let dim = model.dim();
    let probes = binary_probe_matrix(dim);
    let lp = model.log_prob_batch(&probes, &Matrix::row_vector(ctx.to_vec()))?;
    let mut classes = Vec::with_capacity(dim);
    let mut masses = Vec::with_capacity(dim);
    for d in 0..dim {
        let block = &lp[d * PROBES * 2..(d + 1) * PROBES * 2];
        for (j, v) in block.iter().enumerate() {
            if v.is_nan() || *v == f64::INFINITY {
                return Err(Error::NonFiniteDensity { dim: d, v: probe_value(j / 2) });
            }
        }
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::NonFiniteDensity { dim: d, v: probe_value(0) });
        }
        let sums: Vec<f64> = (0..PROBES).map(|i| (block[2 * i] - max).exp() + (block[2 * i + 1] - max).exp()).collect();
        // mirrored summation order keeps symmetric densities exactly tied
        let mut high = 0.5 * sums[5];
        let mut low = 0.5 * sums[5];
        for k in 1..=5 {
            high += sums[5 + k];
            low += sums[5 - k];
        }
        classes.push(u8::from(high > low));
        let total: f64 = sums.iter().sum();
        masses.push(sums.iter().map(|s| s / total).collect());
    }
    Ok(BinaryDecision { classes, masses })
}

/// How candidate votes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// Each candidate votes for its rounded position with weight equal to its density.
    #[default]
    DensityWeighted,
    /// The rounded position of the single highest-density candidate.
    ArgmaxDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDecision {
    /// Chosen scale position per dimension.
    pub positions: Vec<usize>,
    /// Raw label values of those positions.
    pub values: Vec<f64>,
    /// Normalized vote weights per dimension, one entry per scale position.
    pub votes: Vec<Vec<f64>>,
}

/// Draw `n` uniform candidates in `[0,1]^D` and vote per dimension for the nearest scale position.
/// Ties go to the lower position.
pub fn discretize_regression(
    model: &dyn DensityModel,
    ctx: &[f64],
    n: usize,
    seed: u64,
    schema: &LabelSchema,
    rule: VoteRule,
) -> Result<RegressionDecision> {
    check_ctx(model, ctx)?;
    let dim = model.dim();
    if schema.dim() != dim {
        return Err(Error::Shape(format!("schema has {} dimensions, model {dim}", schema.dim())));
    }
    if n == 0 {
        return Err(Error::Config("need at least one candidate".into()));
    }
    let mut rng = rng_from_seed(seed);
    let cands: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    let lp = model.log_prob_batch(&Matrix::from_rows(&cands), &Matrix::row_vector(ctx.to_vec()))?;
    for (c, v) in cands.iter().zip(&lp) {
        if v.is_nan() || *v == f64::INFINITY {
            return Err(Error::NonFiniteDensity { dim: 0, v: c[0] });
        }
    }
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFiniteDensity { dim: 0, v: cands[0][0] });
    }
    let w: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let best = lp.iter().enumerate().fold(0, |b, (i, v)| if *v > lp[b] { i } else { b });
    let mut positions = Vec::with_capacity(dim);
    let mut votes = Vec::with_capacity(dim);
    for (d, spec) in schema.dims.iter().enumerate() {
        let mut tally = vec![0.0; spec.positions()];
        for (c, wi) in cands.iter().zip(&w) {
            tally[spec.nearest_position(c[d])] += wi;
        }
        let pos = match rule {
            VoteRule::DensityWeighted => {
                tally.iter().enumerate().fold(0, |b, (i, v)| if *v > tally[b] { i } else { b })
            }
            VoteRule::ArgmaxDensity => spec.nearest_position(cands[best][d]),
        };
        let total: f64 = tally.iter().sum();
        positions.push(pos);
        votes.push(tally.iter().map(|t| t / total).collect());
    }
    let values = positions.iter().zip(&schema.dims).map(|(&p, s)| s.position_value(p)).collect();
    Ok(RegressionDecision { positions, values, votes })
}

/// Probe-mass features for one context: binary masses when every dimension is binary,
/// regression vote vectors otherwise. Concatenated without further transformation.
pub fn hybrid_features(
    model: &dyn DensityModel,
    ctx: &[f64],
    schema: &LabelSchema,
    seed: u64,
) -> Result<Vec<f64>> {
    let parts = if schema.all_binary() {
        discretize_binary(model, ctx)?.masses
    } else {
        discretize_regression(model, ctx, DEFAULT_CANDIDATES, seed, schema, VoteRule::DensityWeighted)?.votes
    };
    Ok(parts.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeTask {
    Binary,
    Regression,
}

impl DiscretizeTask {
    pub fn for_schema(schema: &LabelSchema) -> Self {
        if schema.all_binary() {
            Self::Binary
        } else {
            Self::Regression
        }
    }
}

/// Point prediction for one annotation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPrediction {
    pub text_id: String,
    pub annotator_id: String,
    /// Predicted raw label values.
    pub prediction: Vec<f64>,
    pub labels: Vec<f64>,
    /// Probe masses (binary) or vote weights (regression) per dimension.
    pub masses: Vec<Vec<f64>>,
}

/// Discretize the density of every record in `rows` under its own (text, annotator) context.
/// Regression candidates for record `i` are drawn with `derive_seed(seed, "r{i}")`.
pub fn predict_records(
    model: &PersonalizedModel,
    dataset: &AnnotationDataset,
    rows: &[usize],
    task: DiscretizeTask,
    candidates: usize,
    rule: VoteRule,
    seed: u64,
) -> Result<Vec<RecordPrediction>> {
    let density = model.density();
    rows.par_iter()
        .map(|&i| {
            let r = &dataset.records[i];
            let ctx = model.context(dataset.embedding(&r.text_id)?, &r.annotator_id)?;
            let (prediction, masses) = match task {
                DiscretizeTask::Binary => {
                    let d = discretize_binary(density, &ctx)?;
                    let values = d
                        .classes
                        .iter()
                        .zip(&dataset.schema.dims)
                        .map(|(&c, s)| if c == 1 { s.max } else { s.min })
                        .collect();
                    (values, d.masses)
                }
                DiscretizeTask::Regression => {
                    let d = discretize_regression(
                        density,
                        &ctx,
                        candidates,
                        derive_seed(seed, &format!("r{i}")),
                        &dataset.schema,
                        rule,
                    )?;
                    (d.values, d.votes)
                }
            };
            Ok(RecordPrediction {
                text_id: r.text_id.clone(),
                annotator_id: r.annotator_id.clone(),
                prediction,
                labels: r.labels.clone(),
                masses,
            })
        })
        .collect()
}

/// Macro-F1 for binary predictions, R² on raw values for regression.
pub fn prediction_metric(
    schema: &LabelSchema,
    predictions: &[RecordPrediction],
    task: DiscretizeTask,
) -> Result<(String, f64)> {
    match task {
        DiscretizeTask::Binary => {
            let bits = |v: &[f64]| -> Vec<u8> { schema.normalize(v).iter().map(|&x| u8::from(x >= 0.5)).collect() };
            let t: Vec<Vec<u8>> = predictions.iter().map(|p| bits(&p.labels)).collect();
            let p: Vec<Vec<u8>> = predictions.iter().map(|p| bits(&p.prediction)).collect();
            Ok(("macro_f1".into(), macro_f1(&t, &p)?))
        }
        DiscretizeTask::Regression => {
            let t: Vec<Vec<f64>> = predictions.iter().map(|p| p.labels.clone()).collect();
            let p: Vec<Vec<f64>> = predictions.iter().map(|p| p.prediction.clone()).collect();
            Ok(("r_squared".into(), r_squared(&t, &p)?))
        }
    }
}

/// Points `start, start + step, …` not exceeding `stop`.
pub fn curve_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("curve step must be positive, got {step}")));
    }
    if !(start.is_finite() && stop.is_finite()) || stop < start {
        return Err(Error::Config(format!("invalid curve range [{start}, {stop}]")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Density along dimension `dim` with the other coordinates taken from `others`.
/// Non-finite densities are reported as `None`.
pub fn density_curve(
    model: &dyn DensityModel,
    ctx: &[f64],
    dim: usize,
    grid: &[f64],
    others: &[f64],
) -> Result<Vec<(f64, Option<f64>)>> {
    check_ctx(model, ctx)?;
    if dim >= model.dim() {
        return Err(Error::Config(format!("dimension {dim} out of range for a {}-D model", model.dim())));
    }
    if others.len() != model.dim() {
        return Err(Error::Shape(format!("expected {} fixed coordinates, got {}", model.dim(), others.len())));
    }
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|&v| {
            let mut y = others.to_vec();
            y[dim] = v;
            y
        })
        .collect();
    let lp = model.log_prob_batch(&Matrix::from_rows(&rows), &Matrix::row_vector(ctx.to_vec()))?;
    Ok(grid
        .iter()
        .zip(lp)
        .map(|(&v, l)| {
            let p = l.exp();
            (v, p.is_finite().then_some(p))
        })
        .collect())
}

/// CSV with `#`-prefixed header lines, then `v,density`; missing densities are written as `null`.
pub fn write_curve_csv<W: Write>(mut w: W, header: &[(String, String)], points: &[(f64, Option<f64>)]) -> Result<()> {
    for (k, v) in header {
        writeln!(w, "# {k}: {v}")?;
    }
    writeln!(w, "v,density")?;
    for (v, p) in points {
        match p {
            Some(p) => writeln!(w, "{v},{p}")?,
            None => writeln!(w, "{v},null")?,
        }
    }
    Ok(())
}
