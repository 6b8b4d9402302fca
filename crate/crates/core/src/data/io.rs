use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::LabelSchema;
use crate::compute::Matrix;
use crate::error::{Error, Result};

pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// One annotation with labels on the raw schema scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text_id: String,
    pub annotator_id: String,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDataset {
    pub schema: LabelSchema,
    pub records: Vec<Record>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub embedding_dim: usize,
}

impl AnnotationDataset {
    /// Validate label lengths, ranges and the text join.
    pub fn new(
        schema: LabelSchema,
        records: Vec<Record>,
        embeddings: BTreeMap<String, Vec<f64>>,
        embedding_dim: usize,
    ) -> Result<Self> {
        schema.validate()?;
        if records.is_empty() {
            return Err(Error::Parse { line: 0, message: "dataset has no records".into() });
        }
        for (i, r) in records.iter().enumerate() {
            check_labels(&schema, &r.labels, i + 1)?;
            if !embeddings.contains_key(&r.text_id) {
                return Err(Error::Join { text_id: r.text_id.clone() });
            }
        }
        if let Some((t, e)) = embeddings.iter().find(|(_, e)| e.len() != embedding_dim) {
            return Err(Error::Parse { line: 0, message: format!("embedding of `{t}` has length {}", e.len()) });
        }
        Ok(Self { schema, records, embeddings, embedding_dim })
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct text ids, sorted.
    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.text_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Distinct annotator ids, sorted.
    pub fn annotators(&self) -> Vec<String> {
        self.records.iter().map(|r| r.annotator_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn embedding(&self, text_id: &str) -> Result<&[f64]> {
        self.embeddings.get(text_id).map(Vec::as_slice).ok_or_else(|| Error::Join { text_id: text_id.into() })
    }

    pub fn normalized(&self, record: usize) -> Vec<f64> {
        self.schema.normalize(&self.records[record].labels)
    }

    /// Normalized labels of the given records, one row each.
    pub fn label_matrix(&self, rows: &[usize]) -> Matrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend(self.normalized(i));
        }
        Matrix::from_vec(rows.len(), d, data)
    }

    /// Text embeddings of the given records, one row each.
    pub fn embedding_matrix(&self, rows: &[usize]) -> Matrix {
        let e = self.embedding_dim;
        let mut data = Vec::with_capacity(rows.len() * e);
        for &i in rows {
            data.extend_from_slice(&self.embeddings[&self.records[i].text_id]);
        }
        Matrix::from_vec(rows.len(), e, data)
    }
}

fn check_labels(schema: &LabelSchema, labels: &[f64], line: usize) -> Result<()> {
    if labels.len() != schema.dim() {
        return Err(Error::Schema {
            line,
            dim: "labels".into(),
            message: format!("expected {} labels, got {}", schema.dim(), labels.len()),
        });
    }
    for (v, d) in labels.iter().zip(&schema.dims) {
        let tol = 1e-9 * d.range();
        if !v.is_finite() || *v < d.min - tol || *v > d.max + tol {
            return Err(Error::Schema {
                line,
                dim: d.name.clone(),
                message: format!("{v} outside [{}, {}]", d.min, d.max),
            });
        }
    }
    Ok(())
}

fn lines<R: Read>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    BufReader::new(reader).lines().enumerate().map(|(i, l)| (i + 1, l))
}

pub fn read_schema<R: Read>(reader: R) -> Result<LabelSchema> {
    let schema: LabelSchema =
        serde_json::from_reader(reader).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_schema<W: Write>(mut w: W, schema: &LabelSchema) -> Result<()> {
    let s = serde_json::to_string_pretty(schema).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w, "{s}")?;
    Ok(())
}

#[derive(Deserialize, Serialize)]
struct EmbeddingHeader {
    format_version: u32,
    dim: usize,
}

#[derive(Deserialize, Serialize)]
struct EmbeddingLine {
    text_id: String,
    embedding: Vec<f64>,
}

/// Header line `{"format_version":1,"dim":E}` then one `{"text_id","embedding"}` per line.
pub fn read_embeddings<R: Read>(reader: R) -> Result<(usize, BTreeMap<String, Vec<f64>>)> {
    let mut dim = None;
    let mut out = BTreeMap::new();
    for (line, text) in lines(reader) {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let perr = |e: serde_json::Error| Error::Parse { line, message: e.to_string() };
        match dim {
            None => {
                let h: EmbeddingHeader = serde_json::from_str(&text).map_err(perr)?;
                if h.format_version != EMBEDDING_FORMAT_VERSION {
                    return Err(Error::Parse { line, message: format!("unsupported format_version {}", h.format_version) });
                }
                if h.dim == 0 {
                    return Err(Error::Parse { line, message: "embedding dim must be >= 1".into() });
                }
                dim = Some(h.dim);
            }
            Some(d) => {
                let e: EmbeddingLine = serde_json::from_str(&text).map_err(perr)?;
                if e.embedding.len() != d {
                    return Err(Error::Parse { line, message: format!("embedding has length {}, header says {d}", e.embedding.len()) });
                }
                if e.embedding.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse { line, message: "non-finite embedding value".into() });
                }
                if out.insert(e.text_id.clone(), e.embedding).is_some() {
                    return Err(Error::Parse { line, message: format!("duplicate text `{}`", e.text_id) });
                }
            }
        }
    }
    let dim = dim.ok_or(Error::Parse { line: 1, message: "missing embedding header".into() })?;
    Ok((dim, out))
}

pub fn write_embeddings<W: Write>(mut w: W, dim: usize, embeddings: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let header = EmbeddingHeader { format_version: EMBEDDING_FORMAT_VERSION, dim };
    writeln!(w, "{}", to_json(&header)?)?;
    for (t, e) in embeddings {
        writeln!(w, "{}", to_json(&EmbeddingLine { text_id: t.clone(), embedding: e.clone() })?)?;
    }
    Ok(())
}

/// One `{"text_id","annotator_id","labels"}` object per line, validated against `schema`.
pub fn read_annotations<R: Read>(reader: R, schema: &LabelSchema) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut last = 0;
    for (line, text) in lines(reader) {
        last = line;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&text).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        check_labels(schema, &r.labels, line)?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: last.max(1), message: "no annotation records".into() });
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", to_json(r)?)?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Io(e.to_string()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Read schema, embeddings and annotations from disk and join them.
pub fn load_dataset(annotations: &Path, embeddings: &Path, schema: &Path) -> Result<AnnotationDataset> {
    let schema = read_schema(open(schema)?)?;
    let (dim, emb) = read_embeddings(open(embeddings)?)?;
    let records = read_annotations(open(annotations)?, &schema)?;
    if let Some(r) = records.iter().find(|r| !emb.contains_key(&r.text_id)) {
        return Err(Error::Join { text_id: r.text_id.clone() });
    }
    AnnotationDataset::new(schema, records, emb, dim)
}
