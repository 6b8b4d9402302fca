use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hybrid_features;
use crate::baselines::{DeterministicHead, HeadConfig, HeadTask};
use crate::compute::{derive_seed, Activation, Matrix};
use crate::data::{AnnotationDataset, RoundSplit};
use crate::error::{Error, Result};
use crate::eval::{macro_f1, r_squared};
use crate::model::PersonalizedModel;
use crate::personalize::{onehot_profile, AnnotatorRegistry, ProfileKind};
use crate::train::{fit, FitConfig, FitReport, HeadData};

/// One line of the hybrid feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRow {
    pub text_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    pub features: Vec<f64>,
}

/// Features keyed by text, or by (text, annotator) for personalized models.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HybridTable {
    width: usize,
    rows: BTreeMap<(String, Option<String>), Vec<f64>>,
}

impl HybridTable {
    pub fn from_rows(rows: Vec<HybridRow>) -> Result<Self> {
        let width = rows.first().map(|r| r.features.len()).ok_or(Error::EmptyInput)?;
        let mut map = BTreeMap::new();
        for r in rows {
            if r.features.len() != width {
                return Err(Error::Shape(format!(
                    "features for `{}` have length {}, expected {width}",
                    r.text_id,
                    r.features.len()
                )));
            }
            map.insert((r.text_id, r.annotator_id), r.features);
        }
        Ok(Self { width, rows: map })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Pair-level features if present, else text-level.
    pub fn get(&self, text_id: &str, annotator_id: &str) -> Option<&[f64]> {
        self.rows
            .get(&(text_id.to_string(), Some(annotator_id.to_string())))
            .or_else(|| self.rows.get(&(text_id.to_string(), None)))
            .map(Vec::as_slice)
    }

    pub fn rows(&self) -> Vec<HybridRow> {
        self.rows
            .iter()
            .map(|((t, a), f)| HybridRow { text_id: t.clone(), annotator_id: a.clone(), features: f.clone() })
            .collect()
    }

    /// Same keys, every feature set to zero.
    pub fn zeroed(&self) -> Self {
        Self { width: self.width, rows: self.rows.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect() }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in self.rows() {
            let line = serde_json::to_string(&r).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?,
            );
        }
        Self::from_rows(rows)
    }
}

/// Probe features for the records in `rows`: one row per text for TXT-Baseline models,
/// one per (text, annotator) pair otherwise.
pub fn hybrid_table(model: &PersonalizedModel, dataset: &AnnotationDataset, rows: &[usize], seed: u64) -> Result<HybridTable> {
    let per_pair = model.profile().kind() != ProfileKind::TxtBaseline;
    let keys: BTreeSet<(String, Option<String>)> = rows
        .iter()
        .map(|&i| {
            let r = &dataset.records[i];
            (r.text_id.clone(), per_pair.then(|| r.annotator_id.clone()))
        })
        .collect();
    let keys: Vec<_> = keys.into_iter().collect();
    let density = model.density();
    let out: Result<Vec<HybridRow>> = keys
        .par_iter()
        .map(|(t, a)| {
            let ann = a.as_deref().unwrap_or("");
            let ctx = model.context(dataset.embedding(t)?, ann)?;
            let features = hybrid_features(density, &ctx, &dataset.schema, derive_seed(seed, &format!("{t}/{ann}")))?;
            Ok(HybridRow { text_id: t.clone(), annotator_id: a.clone(), features })
        })
        .collect();
    HybridTable::from_rows(out?)
}

/// Deterministic head training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    /// Append the annotator's one-hot profile to the text embedding.
    pub personalized: bool,
    #[serde(flatten)]
    pub fit: FitConfig,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: vec![32],
            activation: Activation::Relu,
            dropout: 0.0,
            personalized: false,
            fit: FitConfig { lr: 1e-2, ..FitConfig::default() },
        }
    }
}

/// A trained head plus what is needed to rebuild its inputs.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: DeterministicHead,
    pub registry: Option<AnnotatorRegistry>,
    pub report: FitReport,
}

/// Input assembly for heads: `[e_t ‖ one-hot?]` plus optional hybrid features.
pub struct HeadInputs;

impl HeadInputs {
    pub fn build(
        dataset: &AnnotationDataset,
        rows: &[usize],
        registry: Option<&AnnotatorRegistry>,
        table: Option<&HybridTable>,
        extra_dim: usize,
    ) -> Result<HeadData> {
        let features: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| {
                let r = &dataset.records[i];
                let mut x = dataset.embedding(&r.text_id)?.to_vec();
                if let Some(reg) = registry {
                    x.extend(onehot_profile(&r.annotator_id, reg));
                }
                Ok(x)
            })
            .collect::<Result<_>>()?;
        let extra = match table {
            None => None,
            Some(t) => {
                if t.width() != extra_dim {
                    return Err(Error::Shape(format!("hybrid features have length {}, head expects {extra_dim}", t.width())));
                }
                let m: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&i| {
                        let r = &dataset.records[i];
                        t.get(&r.text_id, &r.annotator_id)
                            .map(<[f64]>::to_vec)
                            .ok_or_else(|| Error::Join { text_id: r.text_id.clone() })
                    })
                    .collect::<Result<_>>()?;
                Some(Matrix::from_rows(&m))
            }
        };
        let width = dataset.embedding_dim + registry.map_or(0, |r| r.size());
        let features = if features.is_empty() { Matrix::zeros(0, width) } else { Matrix::from_rows(&features) };
        Ok(HeadData { features, extra, targets: dataset.label_matrix(rows) })
    }
}

fn task_of(dataset: &AnnotationDataset) -> HeadTask {
    if dataset.schema.all_binary() {
        HeadTask::Classification
    } else {
        HeadTask::Regression
    }
}

/// Train a deterministic head on `split.train`, early-stopped on `split.valid`.
/// With `table = None` this is the plain baseline.
pub fn train_head(
    dataset: &AnnotationDataset,
    split: &RoundSplit,
    table: Option<&HybridTable>,
    config: &HeadTrainConfig,
) -> Result<TrainedHead> {
    let registry = if config.personalized { Some(AnnotatorRegistry::from_rows(dataset, &split.train)?) } else { None };
    let extra_dim = table.map_or(0, HybridTable::width);
    let input_dim = dataset.embedding_dim + registry.as_ref().map_or(0, |r| r.size());
    let mut hc = HeadConfig::new(input_dim, dataset.dim(), task_of(dataset));
    hc.hidden = config.hidden.clone();
    hc.activation = config.activation;
    hc.dropout = config.dropout;
    hc.extra_dim = extra_dim;
    let mut head = DeterministicHead::new(hc, derive_seed(config.seed, "head"))?;
    let train = HeadInputs::build(dataset, &split.train, registry.as_ref(), table, extra_dim)?;
    let valid = HeadInputs::build(dataset, &split.valid, registry.as_ref(), table, extra_dim)?;
    let report = fit(&mut head, &train, &valid, &config.fit, derive_seed(config.seed, "head-fit"))?;
    Ok(TrainedHead { head, registry, report })
}

/// Train a head whose input is extended with hybrid features.
pub fn train_hybrid(
    dataset: &AnnotationDataset,
    split: &RoundSplit,
    table: &HybridTable,
    config: &HeadTrainConfig,
) -> Result<TrainedHead> {
    train_head(dataset, split, Some(table), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEvaluation {
    /// `macro_f1` for binary schemas, `r_squared` otherwise.
    pub metric: String,
    pub value: f64,
    pub predictions: Vec<Vec<f64>>,
}

pub fn evaluate_head(
    trained: &TrainedHead,
    dataset: &AnnotationDataset,
    rows: &[usize],
    table: Option<&HybridTable>,
) -> Result<HeadEvaluation> {
    let data = HeadInputs::build(dataset, rows, trained.registry.as_ref(), table, trained.head.config().extra_dim)?;
    if data.features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let pred = trained.head.predict_batch(&data.features, data.extra.as_ref())?;
    let p: Vec<Vec<f64>> = (0..pred.rows()).map(|i| pred.row(i).to_vec()).collect();
    let t: Vec<Vec<f64>> = (0..data.targets.rows()).map(|i| data.targets.row(i).to_vec()).collect();
    let (metric, value) = match trained.head.config().task {
        HeadTask::Classification => {
            let to_u8 = |m: &[Vec<f64>]| -> Vec<Vec<u8>> {
                m.iter().map(|r| r.iter().map(|&v| u8::from(v >= 0.5)).collect()).collect()
            };
            ("macro_f1", macro_f1(&to_u8(&t), &to_u8(&p))?)
        }
        HeadTask::Regression => ("r_squared", r_squared(&t, &p)?),
    };
    Ok(HeadEvaluation { metric: metric.into(), value, predictions: p })
}
