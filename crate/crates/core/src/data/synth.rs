use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::{AnnotationDataset, Record};
use super::schema::{DimSpec, LabelSchema, TaskKind};
use crate::compute::{derive_seed, rng_from_seed};
use crate::error::{Error, Result};

/// Generator settings for subjective annotations with annotator groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_texts: usize,
    pub num_annotators: usize,
    pub dim: usize,
    pub embedding_dim: usize,
    pub groups: usize,
    /// One offset per group; empty means all zero.
    pub group_offsets: Vec<f64>,
    pub annotator_bias_std: f64,
    pub noise_std: f64,
    pub annotations_per_text: usize,
    /// Base labels lie in `0.5 ± base_spread`.
    pub base_spread: f64,
    /// Label granularity on the `[0, 1]` scale.
    pub step: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_texts: 200,
            num_annotators: 40,
            dim: 2,
            embedding_dim: 8,
            groups: 2,
            group_offsets: vec![-0.25, 0.25],
            annotator_bias_std: 0.05,
            noise_std: 0.05,
            annotations_per_text: 10,
            base_spread: 0.25,
            step: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_texts", self.num_texts),
            ("num_annotators", self.num_annotators),
            ("dim", self.dim),
            ("embedding_dim", self.embedding_dim),
            ("groups", self.groups),
            ("annotations_per_text", self.annotations_per_text),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.annotations_per_text > self.num_annotators {
            return Err(Error::Config("annotations_per_text exceeds num_annotators".into()));
        }
        if !self.group_offsets.is_empty() && self.group_offsets.len() != self.groups {
            return Err(Error::Config(format!(
                "group_offsets has {} entries for {} groups",
                self.group_offsets.len(),
                self.groups
            )));
        }
        for (name, v) in [("annotator_bias_std", self.annotator_bias_std), ("noise_std", self.noise_std), ("base_spread", self.base_spread)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        let n = 1.0 / self.step;
        if !(self.step > 0.0 && self.step <= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config("step must divide 1".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<LabelSchema> {
        let task = if self.step == 1.0 { TaskKind::Binary } else { TaskKind::Ordinal };
        LabelSchema::new(
            (0..self.dim)
                .map(|d| DimSpec { name: format!("dim{d}"), min: 0.0, max: 1.0, step: self.step, task })
                .collect(),
        )
    }
}

/// Latent quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub base: BTreeMap<String, Vec<f64>>,
    pub annotator_group: BTreeMap<String, usize>,
    pub annotator_bias: BTreeMap<String, Vec<f64>>,
}

pub fn text_id(i: usize) -> String {
    format!("t{i:05}")
}

pub fn annotator_id(i: usize) -> String {
    format!("a{i:04}")
}

/// Generate a dataset. Annotator `i` belongs to group `i mod groups`.
pub fn synth_generate(config: &SynthConfig) -> Result<(AnnotationDataset, SynthTruth)> {
    config.validate()?;
    let schema = config.schema()?;
    let (e_dim, dim) = (config.embedding_dim, config.dim);

    let mut rng = rng_from_seed(derive_seed(config.seed, "projection"));
    let scale = 1.0 / (e_dim as f64).sqrt();
    let proj: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..e_dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).map(|v| v * scale).collect())
        .collect();

    let mut rng = rng_from_seed(derive_seed(config.seed, "texts"));
    let mut embeddings = BTreeMap::new();
    let mut base = BTreeMap::new();
    for t in 0..config.num_texts {
        let e: Vec<f64> = (0..e_dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
        let b: Vec<f64> = proj
            .iter()
            .map(|w| 0.5 + config.base_spread * w.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        embeddings.insert(text_id(t), e);
        base.insert(text_id(t), b);
    }

    let mut rng = rng_from_seed(derive_seed(config.seed, "annotators"));
    let bias_dist = Normal::new(0.0, config.annotator_bias_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut annotator_group = BTreeMap::new();
    let mut annotator_bias = BTreeMap::new();
    for a in 0..config.num_annotators {
        annotator_group.insert(annotator_id(a), a % config.groups);
        annotator_bias.insert(annotator_id(a), (0..dim).map(|_| bias_dist.sample(&mut rng)).collect::<Vec<f64>>());
    }

    let mut rng = rng_from_seed(derive_seed(config.seed, "annotations"));
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(config.num_texts * config.annotations_per_text);
    for t in 0..config.num_texts {
        let tid = text_id(t);
        let mut chosen = sample(&mut rng, config.num_annotators, config.annotations_per_text).into_vec();
        chosen.sort_unstable();
        for a in chosen {
            let aid = annotator_id(a);
            let g = a % config.groups;
            let offset = config.group_offsets.get(g).copied().unwrap_or(0.0);
            let labels = (0..dim)
                .map(|d| {
                    let y = base[&tid][d] + offset + annotator_bias[&aid][d] + noise.sample(&mut rng);
                    let spec = &schema.dims[d];
                    spec.position_value(spec.nearest_position(y.clamp(0.0, 1.0)))
                })
                .collect();
            records.push(Record { text_id: tid.clone(), annotator_id: aid, labels });
        }
    }
    let dataset = AnnotationDataset::new(schema, records, embeddings, e_dim)?;
    Ok((dataset, SynthTruth { base, annotator_group, annotator_bias }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bookkeeping() {
        let cfg = SynthConfig { num_texts: 100, num_annotators: 60, annotations_per_text: 50, ..SynthConfig::default() };
        let (ds, truth) = synth_generate(&cfg).unwrap();
        assert_eq!(ds.len(), 5000);
        assert_eq!(ds.texts().len(), 100);
        assert_eq!(truth.annotator_group.len(), 60);
    }

    #[test]
    fn noiseless_limit_reproduces_base() {
        let cfg = SynthConfig {
            group_offsets: vec![],
            annotator_bias_std: 0.0,
            noise_std: 0.0,
            step: 0.01,
            ..SynthConfig::default()
        };
        let (ds, truth) = synth_generate(&cfg).unwrap();
        for r in &ds.records {
            for (d, v) in r.labels.iter().enumerate() {
                let spec = &ds.schema.dims[d];
                let expect = spec.position_value(spec.nearest_position(truth.base[&r.text_id][d]));
                assert_eq!(*v, expect);
                assert!((v - truth.base[&r.text_id][d]).abs() <= 0.005 + 1e-12);
            }
        }
    }

    #[test]
    fn group_means_differ_by_offset_gap() {
        let cfg = SynthConfig { annotator_bias_std: 0.0, noise_std: 0.02, step: 0.01, ..SynthConfig::default() };
        let (ds, truth) = synth_generate(&cfg).unwrap();
        let mut per_text: BTreeMap<&str, [(f64, usize); 2]> = BTreeMap::new();
        for r in &ds.records {
            let g = truth.annotator_group[&r.annotator_id];
            let e = per_text.entry(&r.text_id).or_insert([(0.0, 0); 2]);
            e[g].0 += r.labels[0];
            e[g].1 += 1;
        }
        let gaps: Vec<f64> = per_text
            .values()
            .filter(|s| s[0].1 > 0 && s[1].1 > 0)
            .map(|s| s[1].0 / s[1].1 as f64 - s[0].0 / s[0].1 as f64)
            .collect();
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean_gap - 0.5).abs() < 0.02, "{mean_gap}");
    }

    #[test]
    fn seeded_and_reproducible() {
        let cfg = SynthConfig { seed: 42, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg).unwrap().0, synth_generate(&cfg).unwrap().0);
        let other = SynthConfig { seed: 43, ..SynthConfig::default() };
        assert_ne!(synth_generate(&cfg).unwrap().0, synth_generate(&other).unwrap().0);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SynthConfig { num_texts: 0, ..SynthConfig::default() };
        match synth_generate(&cfg) {
            Err(Error::Config(m)) => assert!(m.contains("num_texts")),
            other => panic!("{other:?}"),
        }
        let cfg = SynthConfig { group_offsets: vec![0.1], ..SynthConfig::default() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }
}
