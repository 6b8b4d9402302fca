//! Annotator representations appended to the text embedding.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compute::{derive_seed, rng_from_seed, ForwardCtx, Matrix, ParamId, ParamStore, StoredParam, Tape, Var};
use crate::data::AnnotationDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    TxtBaseline,
    #[serde(rename = "onehot")]
    OneHot,
    HubiFormula,
    HubiMedium,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] =
        [ProfileKind::TxtBaseline, ProfileKind::OneHot, ProfileKind::HubiFormula, ProfileKind::HubiMedium];

    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::TxtBaseline => "txt_baseline",
            ProfileKind::OneHot => "onehot",
            ProfileKind::HubiFormula => "hubi_formula",
            ProfileKind::HubiMedium => "hubi_medium",
        }
    }
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "txt_baseline" | "baseline" | "none" => Ok(ProfileKind::TxtBaseline),
            "onehot" | "one_hot" => Ok(ProfileKind::OneHot),
            "hubi_formula" => Ok(ProfileKind::HubiFormula),
            "hubi_medium" => Ok(ProfileKind::HubiMedium),
            other => Err(Error::Config(format!("unknown personalization `{other}`"))),
        }
    }
}

/// Dense indices for annotators; index 0 is reserved for unknown annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnnotatorRegistry {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for AnnotatorRegistry {
    fn from(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, a)| (a.clone(), i + 1)).collect();
        Self { ids, index }
    }
}

impl From<AnnotatorRegistry> for Vec<String> {
    fn from(r: AnnotatorRegistry) -> Self {
        r.ids
    }
}

impl AnnotatorRegistry {
    pub fn build<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Config("annotator registry needs at least one annotator".into()));
        }
        Ok(Self::from(ids))
    }

    /// Registry of the annotators appearing in `rows` of `dataset`.
    pub fn from_rows(dataset: &AnnotationDataset, rows: &[usize]) -> Result<Self> {
        Self::build(rows.iter().map(|&i| dataset.records[i].annotator_id.clone()))
    }

    /// Index of `id`, or 0 when unknown.
    pub fn index(&self, id: &str) -> usize {
        self.index.get(id).copied().unwrap_or(0)
    }

    pub fn id_at(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.ids.get(i)).map(String::as_str)
    }

    pub fn num_annotators(&self) -> usize {
        self.ids.len()
    }

    /// Length of a one-hot vector, including the unknown slot.
    pub fn size(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

pub fn onehot_profile(annotator_id: &str, registry: &AnnotatorRegistry) -> Vec<f64> {
    let mut v = vec![0.0; registry.size()];
    v[registry.index(annotator_id)] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorDeviation {
    pub deviations: Vec<f64>,
    pub count: usize,
}

/// Per-annotator mean signed deviation from the per-text mean label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub dim: usize,
    pub annotators: BTreeMap<String, AnnotatorDeviation>,
    /// Fingerprint of the training records the statistics were computed from.
    pub fingerprint: String,
}

/// SHA-256 over the sorted `(text, annotator, labels)` triples of `rows`.
pub fn split_fingerprint(dataset: &AnnotationDataset, rows: &[usize]) -> String {
    let mut keys: Vec<String> = rows
        .iter()
        .map(|&i| {
            let r = &dataset.records[i];
            format!("{}\t{}\t{:?}", r.text_id, r.annotator_id, r.labels)
        })
        .collect();
    keys.sort();
    let mut h = Sha256::new();
    for k in keys {
        h.update(k.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Deviation statistics on normalized labels of the training records `rows`.
/// Each text mean includes the annotator's own label.
pub fn compute_deviation_stats(dataset: &AnnotationDataset, rows: &[usize]) -> Result<DeviationStats> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = dataset.dim();
    let mut text_sum: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for &i in rows {
        let y = dataset.normalized(i);
        let e = text_sum.entry(&dataset.records[i].text_id).or_insert((vec![0.0; d], 0));
        e.0.iter_mut().zip(&y).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    let mut acc: BTreeMap<String, AnnotatorDeviation> = BTreeMap::new();
    for &i in rows {
        let r = &dataset.records[i];
        let y = dataset.normalized(i);
        let (sum, n) = &text_sum[r.text_id.as_str()];
        let e = acc
            .entry(r.annotator_id.clone())
            .or_insert(AnnotatorDeviation { deviations: vec![0.0; d], count: 0 });
        for k in 0..d {
            e.deviations[k] += y[k] - sum[k] / *n as f64;
        }
        e.count += 1;
    }
    for a in acc.values_mut() {
        let n = a.count as f64;
        a.deviations.iter_mut().for_each(|v| *v /= n);
    }
    Ok(DeviationStats { dim: d, annotators: acc, fingerprint: split_fingerprint(dataset, rows) })
}

impl DeviationStats {
    /// The annotator's deviation vector; zeros when unseen in training.
    pub fn profile(&self, annotator_id: &str) -> Vec<f64> {
        self.annotators.get(annotator_id).map(|a| a.deviations.clone()).unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// Fail unless the statistics came from exactly these training records.
    pub fn verify(&self, dataset: &AnnotationDataset, rows: &[usize]) -> Result<()> {
        if split_fingerprint(dataset, rows) == self.fingerprint {
            Ok(())
        } else {
            Err(Error::Fingerprint)
        }
    }

    /// JSONL rows `{"annotator_id", "deviations", "count"}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, a) in &self.annotators {
            let row = DeviationRow { annotator_id: id.clone(), deviations: a.deviations.clone(), count: a.count };
            writeln!(w, "{}", serde_json::to_string(&row).map_err(|e| Error::Io(e.to_string()))?)?;
        }
        Ok(())
    }

    /// Read rows written by [`DeviationStats::write_jsonl`]; the fingerprint is supplied separately.
    pub fn read_jsonl<R: Read>(reader: R, fingerprint: String) -> Result<Self> {
        let mut annotators = BTreeMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: DeviationRow =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if *dim.get_or_insert(row.deviations.len()) != row.deviations.len() {
                return Err(Error::Parse { line: i + 1, message: "inconsistent deviation length".into() });
            }
            annotators.insert(row.annotator_id, AnnotatorDeviation { deviations: row.deviations, count: row.count });
        }
        let dim = dim.ok_or(Error::Parse { line: 1, message: "no deviation rows".into() })?;
        Ok(Self { dim, annotators, fingerprint })
    }
}

#[derive(Serialize, Deserialize)]
struct DeviationRow {
    annotator_id: String,
    deviations: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub kind: ProfileKind,
    pub embedding_dim: usize,
    /// Std of the initial embedding table entries.
    pub embedding_init_std: f64,
    /// Project one-hot vectors through a trainable linear map for large registries.
    pub onehot_projection: bool,
    pub onehot_projection_threshold: usize,
    pub onehot_projection_dim: usize,
    /// Optional tanh projection after the embedding lookup.
    pub medium_hidden: Option<usize>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            kind: ProfileKind::TxtBaseline,
            embedding_dim: 50,
            embedding_init_std: 0.1,
            onehot_projection: true,
            onehot_projection_threshold: 1000,
            onehot_projection_dim: 50,
            medium_hidden: None,
        }
    }
}

impl ProfileConfig {
    pub fn new(kind: ProfileKind) -> Self {
        Self { kind, ..Self::default() }
    }
}

/// The person representation `e_p` for one personalization regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileModule {
    config: ProfileConfig,
    registry: AnnotatorRegistry,
    stats: Option<DeviationStats>,
    deviation_table: Option<Matrix>,
    params: ParamStore,
    table: Option<ParamId>,
    projection: Option<(ParamId, ParamId)>,
    out_dim: usize,
}

fn uniform_init(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> Result<ParamId> {
    use rand::Rng as _;
    let bound = 1.0 / (rows as f64).sqrt();
    let mut rng = rng_from_seed(derive_seed(seed, name));
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    store.add(name, Matrix::from_vec(rows, cols, data), true)
}

impl ProfileModule {
    /// `label_dim` is the label dimension `D` (the width of HuBi-Formula profiles).
    pub fn new(
        config: ProfileConfig,
        registry: AnnotatorRegistry,
        stats: Option<DeviationStats>,
        label_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut table = None;
        let mut projection = None;
        let mut deviation_table = None;
        let n = registry.size();
        let out_dim = match config.kind {
            ProfileKind::TxtBaseline => 0,
            ProfileKind::OneHot => {
                if config.onehot_projection && registry.num_annotators() > config.onehot_projection_threshold {
                    let w = uniform_init(&mut params, "profile.onehot.weight", n, config.onehot_projection_dim, seed)?;
                    let b = params.add("profile.onehot.bias", Matrix::zeros(1, config.onehot_projection_dim), true)?;
                    projection = Some((w, b));
                    config.onehot_projection_dim
                } else {
                    n
                }
            }
            ProfileKind::HubiFormula => {
                let s = stats
                    .as_ref()
                    .ok_or_else(|| Error::Config("hubi_formula needs deviation statistics".into()))?;
                if s.dim != label_dim {
                    return Err(Error::Shape(format!("deviation stats have dim {}, labels {label_dim}", s.dim)));
                }
                let mut m = Matrix::zeros(n, label_dim);
                for (i, id) in registry.ids().iter().enumerate() {
                    m.row_mut(i + 1).copy_from_slice(&s.profile(id));
                }
                deviation_table = Some(m);
                label_dim
            }
            ProfileKind::HubiMedium => {
                if config.embedding_dim == 0 {
                    return Err(Error::Config("embedding_dim must be >= 1".into()));
                }
                let name = "profile.embedding";
                let normal = Normal::new(0.0, config.embedding_init_std).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = rng_from_seed(derive_seed(seed, name));
                let data = (0..n * config.embedding_dim).map(|_| normal.sample(&mut rng)).collect();
                table = Some(params.add(name, Matrix::from_vec(n, config.embedding_dim, data), true)?);
                match config.medium_hidden {
                    Some(h) if h > 0 => {
                        let w = uniform_init(&mut params, "profile.proj.weight", config.embedding_dim, h, seed)?;
                        let b = params.add("profile.proj.bias", Matrix::zeros(1, h), true)?;
                        projection = Some((w, b));
                        h
                    }
                    _ => config.embedding_dim,
                }
            }
        };
        Ok(Self { config, registry, stats, deviation_table, params, table, projection, out_dim })
    }

    /// Rebuild with stored parameter values.
    pub fn from_snapshot(
        config: ProfileConfig,
        registry: AnnotatorRegistry,
        stats: Option<DeviationStats>,
        label_dim: usize,
        snapshot: &BTreeMap<String, StoredParam>,
    ) -> Result<Self> {
        let mut m = Self::new(config, registry, stats, label_dim, 0)?;
        m.params.restore(snapshot)?;
        Ok(m)
    }

    pub fn kind(&self) -> ProfileKind {
        self.config.kind
    }

    pub fn config(&self) -> &ProfileConfig {
        &self.config
    }

    pub fn registry(&self) -> &AnnotatorRegistry {
        &self.registry
    }

    pub fn stats(&self) -> Option<&DeviationStats> {
        self.stats.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Width of `e_p` (0 for the text-only baseline).
    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    pub fn indices(&self, annotator_ids: &[&str]) -> Vec<usize> {
        annotator_ids.iter().map(|a| self.registry.index(a)).collect()
    }

    /// `e_p` rows for registry indices `idx`, or `None` for the baseline.
    pub fn profile_graph(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Option<Var> {
        match self.config.kind {
            ProfileKind::TxtBaseline => None,
            ProfileKind::OneHot => match self.projection {
                Some((w, b)) => {
                    let wv = tape.param(store, w);
                    let rows = tape.gather_rows(wv, idx);
                    let bv = tape.param(store, b);
                    Some(tape.add_row(rows, bv))
                }
                None => {
                    let n = self.registry.size();
                    let mut m = Matrix::zeros(idx.len(), n);
                    for (r, &i) in idx.iter().enumerate() {
                        m[(r, i)] = 1.0;
                    }
                    Some(tape.constant(m))
                }
            },
            ProfileKind::HubiFormula => {
                let table = self.deviation_table.as_ref().expect("formula table built");
                Some(tape.constant(table.select_rows(idx)))
            }
            ProfileKind::HubiMedium => {
                let t = tape.param(store, self.table.expect("embedding table built"));
                let rows = tape.gather_rows(t, idx);
                Some(match self.projection {
                    Some((w, b)) => {
                        let wv = tape.param(store, w);
                        let bv = tape.param(store, b);
                        let lin = tape.matmul(rows, wv);
                        let pre = tape.add_row(lin, bv);
                        tape.tanh(pre)
                    }
                    None => rows,
                })
            }
        }
    }

    /// `e_p` for one annotator, or `None` for the baseline.
    pub fn profile_vector(&self, annotator_id: &str) -> Option<Vec<f64>> {
        let mut tape = Tape::new();
        let idx = [self.registry.index(annotator_id)];
        self.profile_graph(&mut tape, &self.params, &idx).map(|v| tape.value(v).as_slice().to_vec())
    }

    /// Current embedding-table row of an annotator (row 0 when unknown).
    pub fn hubi_medium_profile(&self, annotator_id: &str) -> Option<Vec<f64>> {
        let t = self.params.value(self.table?);
        Some(t.row(self.registry.index(annotator_id)).to_vec())
    }

    pub fn hubi_formula_profile(&self, annotator_id: &str) -> Option<Vec<f64>> {
        self.stats.as_ref().map(|s| s.profile(annotator_id))
    }

    /// `ForwardCtx` is accepted for symmetry with the density networks.
    pub fn context_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: Var,
        idx: &[usize],
        _fctx: &mut ForwardCtx,
    ) -> Var {
        match self.profile_graph(tape, store, idx) {
            Some(p) => tape.concat_cols(&[text, p]),
            None => text,
        }
    }
}

/// `[e_t ‖ e_p]`, or `e_t` alone.
pub fn build_context(e_t: &[f64], e_p: Option<&[f64]>) -> Vec<f64> {
    let mut v = e_t.to_vec();
    if let Some(p) = e_p {
        v.extend_from_slice(p);
    }
    v
}
