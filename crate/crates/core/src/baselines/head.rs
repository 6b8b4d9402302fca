use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::compute::{
    derive_seed, rng_from_seed, Activation, ForwardCtx, Matrix, Mlp, MlpConfig, ParamId, ParamStore, StoredParam,
    Tape, Var,
};
use crate::error::{Error, Result};

pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadTask {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub task: HeadTask,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    /// Width of the additional hybrid feature input; 0 for a plain head.
    #[serde(default)]
    pub extra_dim: usize,
}

impl HeadConfig {
    pub fn new(input_dim: usize, output_dim: usize, task: HeadTask) -> Self {
        Self { input_dim, hidden: vec![32], output_dim, task, activation: Activation::Tanh, dropout: 0.0, extra_dim: 0 }
    }
}

/// Feed-forward predictor of the label vector from `[e_t ‖ e_p]`, optionally
/// extended by hybrid features entering through a separate first-layer weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicHead {
    config: HeadConfig,
    net: Mlp,
    extra: Option<ParamId>,
    params: ParamStore,
}

impl DeterministicHead {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.output_dim == 0 {
            return Err(Error::Config("head input_dim and output_dim must be >= 1".into()));
        }
        let mut params = ParamStore::new();
        let mcfg = MlpConfig {
            input_dim: config.input_dim,
            hidden: config.hidden.clone(),
            output_dim: config.output_dim,
            activation: config.activation,
            dropout: config.dropout,
            batch_norm: false,
        };
        let net = Mlp::new(&mut params, "head.net", mcfg, seed, false)?;
        let extra = if config.extra_dim > 0 {
            let name = "head.hybrid.weight";
            let (rows, cols) = (config.extra_dim, net.first_width());
            let bound = 1.0 / (rows as f64).sqrt();
            let mut rng = rng_from_seed(derive_seed(seed, name));
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Some(params.add(name, Matrix::from_vec(rows, cols, data), true)?)
        } else {
            None
        };
        Ok(Self { config, net, extra, params })
    }

    pub fn from_snapshot(config: HeadConfig, snapshot: &BTreeMap<String, StoredParam>) -> Result<Self> {
        let mut h = Self::new(config, 0)?;
        h.params.restore(snapshot)?;
        Ok(h)
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_bias_name(&self) -> &str {
        &self.params.param(self.net.output_bias()).name
    }

    pub fn output_weight_name(&self) -> &str {
        &self.params.param(self.net.output_weight()).name
    }

    fn check(&self, features: &Matrix, extra: Option<&Matrix>) -> Result<()> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.config.input_dim,
                features.cols()
            )));
        }
        match (extra, self.config.extra_dim) {
            (None, 0) => Ok(()),
            (Some(e), n) if n > 0 && e.cols() == n && e.rows() == features.rows() => Ok(()),
            (Some(e), n) => Err(Error::Shape(format!("head expects {n} hybrid features, got {}", e.cols()))),
            (None, n) => Err(Error::Shape(format!("head expects {n} hybrid features, got none"))),
        }
    }

    /// Raw outputs (logits or regression values), `B × output_dim`.
    pub fn output_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        extra: Option<Var>,
        fctx: &mut ForwardCtx,
    ) -> Var {
        let branch = match (self.extra, extra) {
            (Some(id), Some(e)) => {
                let w = tape.param(store, id);
                Some(tape.matmul(e, w))
            }
            _ => None,
        };
        self.net.forward_with(tape, store, x, branch, fctx)
    }

    /// Mean binary cross-entropy over all entries, or mean squared error.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        extra: Option<Var>,
        targets: Var,
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if tape.value(x).rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let out = self.output_graph(tape, store, x, extra, fctx);
        let per = match self.config.task {
            HeadTask::Classification => {
                let l = tape.clamp(out, -LOGIT_CLAMP, LOGIT_CLAMP);
                let sp = tape.softplus(l);
                let yl = tape.mul(targets, l);
                tape.sub(sp, yl)
            }
            HeadTask::Regression => {
                let d = tape.sub(out, targets);
                tape.square(d)
            }
        };
        let loss = tape.mean(per);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numerical("non-finite head loss".into()));
        }
        Ok(loss)
    }

    /// Eval-mode loss on a batch.
    pub fn deterministic_loss(&self, features: &Matrix, extra: Option<&Matrix>, targets: &Matrix) -> Result<f64> {
        if features.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check(features, extra)?;
        if targets.shape() != (features.rows(), self.config.output_dim) {
            return Err(Error::Shape(format!("targets have shape {:?}", targets.shape())));
        }
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let e = extra.map(|e| tape.constant(e.clone()));
        let t = tape.constant(targets.clone());
        let l = self.loss_graph(&mut tape, &self.params, x, e, t, &mut ForwardCtx::eval())?;
        Ok(tape.scalar(l))
    }

    /// Raw outputs in eval mode.
    pub fn raw_outputs(&self, features: &Matrix, extra: Option<&Matrix>) -> Result<Matrix> {
        self.check(features, extra)?;
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let e = extra.map(|e| tape.constant(e.clone()));
        let out = self.output_graph(&mut tape, &self.params, x, e, &mut ForwardCtx::eval());
        Ok(tape.value(out).clone())
    }

    /// Classification: 1 where `sigmoid(logit) >= 0.5`, else 0. Regression: raw outputs.
    pub fn predict_batch(&self, features: &Matrix, extra: Option<&Matrix>) -> Result<Matrix> {
        let out = self.raw_outputs(features, extra)?;
        Ok(match self.config.task {
            HeadTask::Classification => out.map(|l| if sigmoid(l) >= 0.5 { 1.0 } else { 0.0 }),
            HeadTask::Regression => out,
        })
    }

    pub fn predict(&self, features: &[f64], extra: Option<&[f64]>) -> Result<Vec<f64>> {
        let e = extra.map(|e| Matrix::row_vector(e.to_vec()));
        Ok(self.predict_batch(&Matrix::row_vector(features.to_vec()), e.as_ref())?.into_vec())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::finite_diff_check;

    fn fixed_bias(task: HeadTask, bias: f64) -> DeterministicHead {
        let mut h = DeterministicHead::new(HeadConfig { hidden: vec![], ..HeadConfig::new(3, 2, task) }, 1).unwrap();
        let w = h.output_weight_name().to_string();
        let b = h.output_bias_name().to_string();
        h.params_mut().set_by_name(&w, Matrix::zeros(3, 2)).unwrap();
        h.params_mut().set_by_name(&b, Matrix::filled(1, 2, bias)).unwrap();
        h
    }

    #[test]
    fn tie_resolves_to_class_one() {
        let h = fixed_bias(HeadTask::Classification, 0.0);
        assert_eq!(h.predict(&[0.3, -1.0, 2.0], None).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fixed_bias(HeadTask::Classification, 5.0).predict(&[0.0; 3], None).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fixed_bias(HeadTask::Classification, -5.0).predict(&[0.0; 3], None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let h = fixed_bias(HeadTask::Classification, 0.0);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 0.5], vec![4.0, 4.0, 4.0]]);
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        let l = h.deterministic_loss(&x, None, &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let x = Matrix::zeros(2, 3);
        let pos = fixed_bias(HeadTask::Classification, 1e6);
        assert!(pos.deterministic_loss(&x, None, &Matrix::filled(2, 2, 1.0)).unwrap() < 1e-6);
        let neg = fixed_bias(HeadTask::Classification, -1e6);
        assert!(neg.deterministic_loss(&x, None, &Matrix::zeros(2, 2)).unwrap() < 1e-6);
    }

    #[test]
    fn exact_regression_has_zero_mse() {
        let h = fixed_bias(HeadTask::Regression, 0.7);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 2.0]]);
        assert_eq!(h.deterministic_loss(&x, None, &Matrix::filled(2, 2, 0.7)).unwrap(), 0.0);
        assert_eq!(h.predict(&[0.0; 3], None).unwrap(), vec![0.7, 0.7]);
    }

    #[test]
    fn empty_batch_and_shape_errors() {
        let h = DeterministicHead::new(HeadConfig::new(3, 2, HeadTask::Classification), 2).unwrap();
        assert!(matches!(h.deterministic_loss(&Matrix::zeros(0, 3), None, &Matrix::zeros(0, 2)), Err(Error::EmptyBatch)));
        assert!(matches!(h.predict(&[0.0; 4], None), Err(Error::Shape(_))));
        let hy = DeterministicHead::new(HeadConfig { extra_dim: 22, ..HeadConfig::new(3, 2, HeadTask::Classification) }, 2)
            .unwrap();
        assert!(matches!(hy.predict(&[0.0; 3], Some(&[0.0; 21])), Err(Error::Shape(_))));
        assert!(matches!(hy.predict(&[0.0; 3], None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_hybrid_features_match_plain_head() {
        let cfg = HeadConfig::new(4, 2, HeadTask::Regression);
        let plain = DeterministicHead::new(cfg.clone(), 9).unwrap();
        let hybrid = DeterministicHead::new(HeadConfig { extra_dim: 22, ..cfg }, 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, -0.3, 0.9], vec![1.0, -2.0, 0.5, 0.0]]);
        let a = plain.raw_outputs(&x, None).unwrap();
        let b = hybrid.raw_outputs(&x, Some(&Matrix::zeros(2, 22))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for task in [HeadTask::Classification, HeadTask::Regression] {
            let h = DeterministicHead::new(
                HeadConfig { hidden: vec![5, 4], extra_dim: 3, ..HeadConfig::new(3, 2, task) },
                4,
            )
            .unwrap();
            let mut rng = rng_from_seed(11);
            let x = Matrix::from_vec(8, 3, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
            let e = Matrix::from_vec(8, 3, (0..24).map(|_| rng.random_range(0.0..1.0)).collect());
            let y = Matrix::from_vec(8, 2, (0..16).map(|_| f64::from(rng.random_range(0..2u8))).collect());
            let err = finite_diff_check(
                |t, s| {
                    let (xv, ev, yv) = (t.constant(x.clone()), t.constant(e.clone()), t.constant(y.clone()));
                    h.loss_graph(t, s, xv, Some(ev), yv, &mut ForwardCtx::eval())
                },
                h.params(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{task:?}: {err}");
        }
    }
}
