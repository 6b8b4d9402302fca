//! Metrics and the paired significance test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationDataset, LabelSchema};
use crate::error::{Error, Result};
use crate::model::PersonalizedModel;
use crate::personalize::AnnotatorRegistry;
use crate::train::{eval_loss, Examples, ExperimentResult};

/// A metric averaged over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub per_fold: Vec<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn from_folds(metric: impl Into<String>, per_fold: Vec<f64>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::EmptyInput);
        }
        let value = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
        Ok(Self { metric: metric.into(), value, n: per_fold.len(), per_fold })
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        // class absent from both truth and prediction
        return 1.0;
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean of the class-0 and class-1 F1 scores for one binary column.
pub fn binary_macro_f1(y_true: &[u8], y_pred: &[u8]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    let mut c = [[0usize; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t > 1 || p > 1 {
            return Err(Error::Shape("binary labels must be 0 or 1".into()));
        }
        c[t as usize][p as usize] += 1;
    }
    let f_one = f1(c[1][1], c[0][1], c[1][0]);
    let f_zero = f1(c[0][0], c[1][0], c[0][1]);
    Ok(0.5 * (f_one + f_zero))
}

/// Macro-F1 per dimension, averaged over dimensions. Rows are samples.
pub fn macro_f1(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<f64> {
    let cols = columns(y_true, y_pred)?;
    let mut total = 0.0;
    for d in 0..cols {
        let t: Vec<u8> = y_true.iter().map(|r| r[d]).collect();
        let p: Vec<u8> = y_pred.iter().map(|r| r[d]).collect();
        total += binary_macro_f1(&t, &p)?;
    }
    Ok(total / cols as f64)
}

fn columns<T>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<usize> {
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} rows vs {} rows", a.len(), b.len())));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(d)
}

/// `1 − SS_res/SS_tot` per dimension, averaged over dimensions.
pub fn r_squared(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<f64> {
    let cols = columns(y_true, y_pred)?;
    if y_true.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = y_true.len() as f64;
    let mut total = 0.0;
    for d in 0..cols {
        let mean = y_true.iter().map(|r| r[d]).sum::<f64>() / n;
        let ss_tot: f64 = y_true.iter().map(|r| (r[d] - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            return Err(Error::DegenerateVariance(format!("dimension {d} has constant targets")));
        }
        let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t[d] - p[d]).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / cols as f64)
}

/// Shannon entropy in bits of the positions chosen for one text, averaged over dimensions.
/// `labels` are raw label vectors.
pub fn annotation_entropy(labels: &[Vec<f64>], schema: &LabelSchema) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (d, spec) in schema.dims.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for l in labels {
            let y = (l[d] - spec.min) / spec.range();
            *counts.entry(spec.nearest_position(y)).or_default() += 1;
        }
        total -= counts.values().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>();
    }
    total / schema.dim() as f64
}

/// Annotation entropy of every text in `dataset`.
pub fn text_entropies(dataset: &AnnotationDataset) -> BTreeMap<String, f64> {
    let mut by_text: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &dataset.records {
        by_text.entry(&r.text_id).or_default().push(r.labels.clone());
    }
    by_text.into_iter().map(|(t, l)| (t.to_string(), annotation_entropy(&l, &dataset.schema))).collect()
}

/// Mean test NLL of a trained model over `rows`, never dequantized.
pub fn nll_metric(model: &PersonalizedModel, dataset: &AnnotationDataset, rows: &[usize]) -> Result<f64> {
    let registry: &AnnotatorRegistry = model.profile().registry();
    let ex = Examples::from_rows(dataset, rows, registry, None);
    eval_loss(model, &ex)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub mean_difference: f64,
}

pub const ALPHA: f64 = 0.05;

/// Two-sided paired t-test on `a − b` with Bonferroni correction for `comparisons` tests.
pub fn paired_ttest_bonferroni(a: &[f64], b: &[f64], comparisons: usize) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput);
    }
    if comparisons == 0 {
        return Err(Error::Config("number of comparisons must be >= 1".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 || !var.is_finite() {
        return Err(Error::DegenerateVariance("paired differences have zero variance".into()));
    }
    let t = mean / (var / n).sqrt();
    let df = d.len() - 1;
    let p_raw = student_t_two_sided(t, df as f64);
    let p_adjusted = bonferroni(p_raw, comparisons);
    Ok(TTestResult { t, df, p_raw, p_adjusted, significant: p_adjusted < ALPHA, mean_difference: mean })
}

pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons as f64).min(1.0)
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, 0.5 * df, 0.5).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - regularized_incomplete_beta(1.0 - x, b, a);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        h *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    ln_front.exp() * h / a
}

/// One personalization cell against the TXT-Baseline cell of the same flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub flow: String,
    pub personalization: String,
    /// Pairs matched on (seed, fold) where both runs finished.
    pub n: usize,
    /// Mean of `treatment − baseline` test NLL; negative favours personalization.
    pub mean_difference: Option<f64>,
    pub test: Option<TTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Paired t-tests of every personalized cell against its flow's TXT-Baseline cell,
/// Bonferroni-corrected for the number of such comparisons.
pub fn compare_to_baseline(result: &ExperimentResult) -> Vec<Comparison> {
    let base = crate::personalize::ProfileKind::TxtBaseline.name();
    let baselines: BTreeMap<&str, BTreeMap<(u64, usize), f64>> = result
        .rows
        .iter()
        .filter(|r| r.personalization == base)
        .fold(BTreeMap::new(), |mut acc, r| {
            if let Some(v) = r.test_nll {
                acc.entry(r.flow.as_str()).or_insert_with(BTreeMap::new).insert((r.seed, r.fold), v);
            }
            acc
        });
    let cells: Vec<(&str, &str)> = result
        .cells
        .iter()
        .filter(|c| c.personalization != base && baselines.contains_key(c.flow.as_str()))
        .map(|c| (c.flow.as_str(), c.personalization.as_str()))
        .collect();
    let m = cells.len();
    cells
        .into_iter()
        .map(|(flow, pers)| {
            let b = &baselines[flow];
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for r in result.rows.iter().filter(|r| r.flow == flow && r.personalization == pers) {
                if let (Some(v), Some(bv)) = (r.test_nll, b.get(&(r.seed, r.fold))) {
                    xs.push(v);
                    ys.push(*bv);
                }
            }
            let n = xs.len();
            let mean_difference =
                (n > 0).then(|| xs.iter().zip(&ys).map(|(x, y)| x - y).sum::<f64>() / n as f64);
            let (test, error) = match paired_ttest_bonferroni(&xs, &ys, m) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Comparison { flow: flow.into(), personalization: pers.into(), n, mean_difference, test, error }
        })
        .collect()
}
