//! Dataset files, label scales, cross-validation folds and the synthetic generator.

mod folds;
mod io;
mod schema;
mod synth;

pub use folds::{split_folds, FoldAssignment, RoundSplit, SplitMode};
pub use io::{
    load_dataset, read_annotations, read_embeddings, read_schema, write_annotations, write_embeddings, write_schema,
    AnnotationDataset, Record, EMBEDDING_FORMAT_VERSION,
};
pub use schema::{DimSpec, LabelSchema, TaskKind};
pub use synth::{annotator_id, synth_generate, text_id, SynthConfig, SynthTruth};

use rand::Rng as _;

use crate::compute::{rng_from_seed, Matrix};

/// Normalized labels of `rows`, optionally dequantized with centred uniform
/// noise of width `step / (2 (max − min))` drawn from `seed`.
pub fn normalize_labels(dataset: &AnnotationDataset, rows: &[usize], dequantize: Option<u64>) -> Matrix {
    let mut y = dataset.label_matrix(rows);
    if let Some(seed) = dequantize {
        let widths = dataset.schema.dequantization_width();
        let mut rng = rng_from_seed(seed);
        let d = widths.len();
        for (i, v) in y.as_mut_slice().iter_mut().enumerate() {
            let w = widths[i % d];
            *v += w * (rng.random::<f64>() - 0.5);
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;

    fn synth(num_texts: usize) -> AnnotationDataset {
        let cfg = SynthConfig { num_texts, num_annotators: 30, annotations_per_text: 5, ..SynthConfig::default() };
        synth_generate(&cfg).unwrap().0
    }

    #[test]
    fn folds_partition_texts() {
        let ds = synth(100);
        let f = split_folds(&ds, 10, 3).unwrap();
        assert_eq!(f.text_fold.len(), 100);
        for k in 0..10 {
            assert_eq!(f.texts_in(k).len(), 10);
        }
        assert_eq!(f, split_folds(&ds, 10, 3).unwrap());
        assert_ne!(f, split_folds(&ds, 10, 4).unwrap());
    }

    #[test]
    fn rounds_are_text_disjoint() {
        let ds = synth(30);
        let f = split_folds(&ds, 10, 1).unwrap();
        for r in 0..10 {
            let s = f.round(&ds, r, SplitMode::TextDisjoint).unwrap();
            assert_eq!(s.train.len() + s.valid.len() + s.test.len(), ds.len());
            let texts = |ix: &[usize]| ix.iter().map(|&i| ds.records[i].text_id.clone()).collect::<BTreeSet<_>>();
            let (a, b, c) = (texts(&s.train), texts(&s.valid), texts(&s.test));
            assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            assert_eq!(c.len(), 3);
            assert_eq!(b.len(), 3);
        }
    }

    #[test]
    fn two_folds_carve_validation_from_training() {
        let ds = synth(40);
        let f = split_folds(&ds, 2, 1).unwrap();
        let s = f.round(&ds, 0, SplitMode::TextDisjoint).unwrap();
        assert!(!s.valid.is_empty() && !s.train.is_empty());
        assert!(s.valid.iter().all(|&i| f.fold_of(&ds.records[i].text_id) == Some(1)));
    }

    #[test]
    fn too_many_folds() {
        let ds = synth(5);
        assert!(matches!(split_folds(&ds, 6, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn strict_mode_drop_fraction_matches_recount() {
        let cfg = SynthConfig { num_texts: 60, num_annotators: 200, annotations_per_text: 3, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap().0;
        let f = split_folds(&ds, 10, 7).unwrap();
        for r in 0..10 {
            let loose = f.round(&ds, r, SplitMode::TextDisjoint).unwrap();
            let strict = f.round(&ds, r, SplitMode::TextAndUserDisjoint).unwrap();
            let train_annotators: BTreeSet<&str> =
                loose.train.iter().map(|&i| ds.records[i].annotator_id.as_str()).collect();
            let dropped =
                loose.test.iter().filter(|&&i| train_annotators.contains(ds.records[i].annotator_id.as_str())).count();
            assert_eq!(strict.dropped_test, dropped);
            assert_eq!(strict.test.len(), loose.test.len() - dropped);
            let expect = dropped as f64 / loose.test.len() as f64;
            assert!((strict.dropped_fraction() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_labels_in_unit_interval() {
        let ds = synth(50);
        let rows: Vec<usize> = (0..ds.len()).collect();
        let plain = normalize_labels(&ds, &rows, None);
        assert!(plain.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let noisy = normalize_labels(&ds, &rows, Some(3));
        let w = ds.schema.dequantization_width()[0];
        for (a, b) in plain.as_slice().iter().zip(noisy.as_slice()) {
            assert!((a - b).abs() <= w / 2.0);
        }
        assert_ne!(plain, noisy);
    }

    #[test]
    fn save_load_identity_on_disk() {
        let ds = synth(20);
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        write_annotations(std::fs::File::create(p("a.jsonl")).unwrap(), &ds.records).unwrap();
        write_embeddings(std::fs::File::create(p("e.jsonl")).unwrap(), ds.embedding_dim, &ds.embeddings).unwrap();
        write_schema(std::fs::File::create(p("s.json")).unwrap(), &ds.schema).unwrap();
        let back = load_dataset(&p("a.jsonl"), &p("e.jsonl"), &p("s.json")).unwrap();
        assert_eq!(back, ds);
        let _: BTreeMap<String, Vec<f64>> = back.embeddings;
    }
}
