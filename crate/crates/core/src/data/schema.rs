use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub task: TaskKind,
}

impl DimSpec {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Number of scale positions, `(max − min)/step + 1`.
    pub fn positions(&self) -> usize {
        (self.range() / self.step).round() as usize + 1
    }

    /// Raw value of scale position `i`.
    pub fn position_value(&self, i: usize) -> f64 {
        snap_decimal(self.min + i as f64 * self.step)
    }

    /// Position nearest to a normalized value in `[0, 1]`; halves round down.
    pub fn nearest_position(&self, normalized: f64) -> usize {
        let steps = (self.positions() - 1) as f64;
        let x = (normalized.clamp(0.0, 1.0) * steps - 0.5).ceil();
        (x.max(0.0) as usize).min(self.positions() - 1)
    }

    /// Normalized coordinate of scale position `i`.
    pub fn position_normalized(&self, i: usize) -> f64 {
        i as f64 * self.step / self.range()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub dims: Vec<DimSpec>,
}

impl LabelSchema {
    pub fn new(dims: Vec<DimSpec>) -> Result<Self> {
        let s = Self { dims };
        s.validate()?;
        Ok(s)
    }

    /// Every dimension on the same `[min, max]` scale with step `step`.
    pub fn uniform(dim: usize, min: f64, max: f64, step: f64, task: TaskKind) -> Result<Self> {
        Self::new((0..dim).map(|d| DimSpec { name: format!("dim{d}"), min, max, step, task }).collect())
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("schema has no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.min.is_finite() && d.max.is_finite() && d.min < d.max) {
                return Err(Error::Config(format!("dimension `{}`: min must be below max", d.name)));
            }
            if !(d.step.is_finite() && d.step > 0.0) {
                return Err(Error::Config(format!("dimension `{}`: step must be positive", d.name)));
            }
            let n = d.range() / d.step;
            if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
                return Err(Error::Config(format!("dimension `{}`: range is not a multiple of step", d.name)));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.dims).map(|(v, d)| (v - d.min) / d.range()).collect()
    }

    /// Inverse of [`LabelSchema::normalize`]. Values within rounding noise of a
    /// scale position are returned as that position's decimal value.
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.dims)
            .map(|(v, d)| {
                let off = v * d.range();
                let pos = (off / d.step).round();
                if (off - pos * d.step).abs() <= 1e-9 * d.range() {
                    snap_decimal(d.min + pos * d.step)
                } else {
                    d.min + off
                }
            })
            .collect()
    }

    /// Width of the dequantization noise per normalized dimension, `step / (2 (max − min))`.
    pub fn dequantization_width(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.step / (2.0 * d.range())).collect()
    }

    pub fn all_binary(&self) -> bool {
        self.dims.iter().all(|d| d.task == TaskKind::Binary)
    }
}

pub(crate) fn snap_decimal(v: f64) -> f64 {
    let s = format!("{v:.10}");
    s.parse().unwrap_or(v)
}
