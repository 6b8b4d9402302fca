use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_from_seed, Matrix, ParamId, ParamStore, Rng, Tape, Var};
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update recorded by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Matrix,
    pub batch_var: Matrix,
}

/// Per-forward-pass state: mode, dropout randomness, and batch-norm updates.
pub struct ForwardCtx {
    mode: Mode,
    rng: Rng,
    updates: Vec<BatchNormUpdate>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, rng: rng_from_seed(0), updates: Vec::new() }
    }

    pub fn train(seed: u64) -> Self {
        Self { mode: Mode::Train, rng: rng_from_seed(seed), updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn record(&mut self, u: BatchNormUpdate) {
        self.updates.push(u);
    }

    pub fn take_updates(&mut self) -> Vec<BatchNormUpdate> {
        std::mem::take(&mut self.updates)
    }
}

/// Fold recorded batch statistics into the running estimates.
pub fn apply_batch_norm_updates(store: &mut ParamStore, updates: &[BatchNormUpdate]) {
    let m = BATCH_NORM_MOMENTUM;
    for u in updates {
        let mean = store.value(u.mean).zip_map(&u.batch_mean, |r, b| m * r + (1.0 - m) * b);
        let var = store.value(u.var).zip_map(&u.batch_var, |r, b| m * r + (1.0 - m) * b);
        *store.value_mut(u.mean) = mean;
        *store.value_mut(u.var) = var;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub batch_norm: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("mlp dimensions must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    mask: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Affine batch normalization over the batch axis with frozen running statistics
/// in eval mode.
pub(crate) fn batch_norm_graph(
    tape: &mut Tape,
    x: Var,
    mean_id: ParamId,
    var_id: ParamId,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
) -> (Var, Var) {
    let rows = tape.value(x).rows();
    if ctx.is_train() && rows > 1 {
        let mean = tape.mean_rows(x);
        let neg = tape.neg(mean);
        let centered = tape.add_row(x, neg);
        let sq = tape.square(centered);
        let var = tape.mean_rows(sq);
        ctx.record(BatchNormUpdate {
            mean: mean_id,
            var: var_id,
            batch_mean: tape.value(mean).clone(),
            batch_var: tape.value(var).clone(),
        });
        let shifted = tape.add_scalar(var, BATCH_NORM_EPS);
        let inv_std = tape.powf(shifted, -0.5);
        (tape.mul_row(centered, inv_std), inv_std)
    } else {
        let neg_mean = tape.constant(store.value(mean_id).map(|m| -m));
        let inv_std = tape.constant(store.value(var_id).map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
        let centered = tape.add_row(x, neg_mean);
        (tape.mul_row(centered, inv_std), inv_std)
    }
}

/// Fully connected network. Parameters live in a caller-owned [`ParamStore`]
/// under `"{prefix}.fc{i}.weight"` / `"{prefix}.fc{i}.bias"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Dense>,
    norms: Vec<Option<Norm>>,
}

impl Mlp {
    /// Register parameters in `store`. Weights are uniform in `±1/sqrt(fan_in)`, biases zero.
    /// With `zero_last` the output layer starts at exactly zero.
    pub fn new(store: &mut ParamStore, prefix: &str, config: MlpConfig, seed: u64, zero_last: bool) -> Result<Self> {
        Self::with_masks(store, prefix, config, seed, zero_last, None)
    }

    /// As [`Mlp::new`] with fixed 0/1 connectivity masks per layer (`fan_in × fan_out`).
    pub fn with_masks(
        store: &mut ParamStore,
        prefix: &str,
        config: MlpConfig,
        seed: u64,
        zero_last: bool,
        masks: Option<Vec<Matrix>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.output_dim);
        let n_layers = dims.len() - 1;
        if let Some(m) = &masks {
            if m.len() != n_layers || m.iter().zip(dims.windows(2)).any(|(m, w)| m.shape() != (w[0], w[1])) {
                return Err(Error::Shape("mlp mask shapes do not match layer sizes".into()));
            }
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut norms = Vec::with_capacity(n_layers);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wname = format!("{prefix}.fc{i}.weight");
            let last = i + 1 == n_layers;
            let weight = if last && zero_last {
                Matrix::zeros(fan_in, fan_out)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = rng_from_seed(derive_seed(seed, &wname));
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Matrix::from_vec(fan_in, fan_out, data)
            };
            let weight = store.add(wname, weight, true)?;
            let bias = store.add(format!("{prefix}.fc{i}.bias"), Matrix::zeros(1, fan_out), true)?;
            layers.push(Dense { weight, bias, mask: masks.as_ref().map(|m| m[i].clone()) });
            if !last && config.batch_norm {
                norms.push(Some(Norm {
                    gamma: store.add(format!("{prefix}.bn{i}.gamma"), Matrix::filled(1, fan_out, 1.0), true)?,
                    beta: store.add(format!("{prefix}.bn{i}.beta"), Matrix::zeros(1, fan_out), true)?,
                    mean: store.add(format!("{prefix}.bn{i}.running_mean"), Matrix::zeros(1, fan_out), false)?,
                    var: store.add(format!("{prefix}.bn{i}.running_var"), Matrix::filled(1, fan_out, 1.0), false)?,
                }));
            } else {
                norms.push(None);
            }
        }
        Ok(Self { config, layers, norms })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Width of the first layer's pre-activation.
    pub fn first_width(&self) -> usize {
        self.config.hidden.first().copied().unwrap_or(self.config.output_dim)
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("mlp has layers").bias
    }

    pub fn output_weight(&self) -> ParamId {
        self.layers.last().expect("mlp has layers").weight
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var, ctx: &mut ForwardCtx) -> Var {
        self.forward_with(tape, store, input, None, ctx)
    }

    /// Forward pass; `extra` (B × first_width) is added to the first pre-activation.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        extra: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Var {
        assert_eq!(tape.value(input).cols(), self.config.input_dim, "mlp input width");
        let mut h = input;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut w = tape.param(store, layer.weight);
            if let Some(mask) = &layer.mask {
                let m = tape.constant(mask.clone());
                w = tape.mul(w, m);
            }
            let b = tape.param(store, layer.bias);
            let lin = tape.matmul(h, w);
            let mut pre = tape.add_row(lin, b);
            if i == 0 {
                if let Some(e) = extra {
                    pre = tape.add(pre, e);
                }
            }
            if i + 1 == n {
                return pre;
            }
            if let Some(norm) = &self.norms[i] {
                let (normed, _) = batch_norm_graph(tape, pre, norm.mean, norm.var, store, ctx);
                let g = tape.param(store, norm.gamma);
                let be = tape.param(store, norm.beta);
                let scaled = tape.mul_row(normed, g);
                pre = tape.add_row(scaled, be);
            }
            h = match self.config.activation {
                Activation::Tanh => tape.tanh(pre),
                Activation::Relu => tape.relu(pre),
            };
            let p = self.config.dropout;
            if ctx.is_train() && p > 0.0 {
                let (r, c) = tape.value(h).shape();
                let keep = 1.0 / (1.0 - p);
                let rng = ctx.rng();
                let mask = (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                let m = tape.constant(Matrix::from_vec(r, c, mask));
                h = tape.mul(h, m);
            }
        }
        unreachable!("loop returns at the output layer")
    }
}

/// Evaluate `net` on a single input vector.
pub fn mlp_forward(net: &Mlp, params: &ParamStore, input: &[f64], ctx: &mut ForwardCtx) -> Result<Vec<f64>> {
    if input.len() != net.input_dim() {
        return Err(Error::Shape(format!("mlp expects {} inputs, got {}", net.input_dim(), input.len())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(input.to_vec()));
    let y = net.forward(&mut tape, params, x, ctx);
    Ok(tape.value(y).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(input: usize, hidden: Vec<usize>, output: usize) -> MlpConfig {
        MlpConfig { input_dim: input, hidden, output_dim: output, activation: Activation::Tanh, dropout: 0.0, batch_norm: false }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut s = ParamStore::new();
        let net = Mlp::new(&mut s, "m", cfg(3, vec![4], 2), 1, false).unwrap();
        for p in s.iter_mut() {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        s.set_by_name("m.fc1.bias", Matrix::from_rows(&[vec![0.7, -1.2]])).unwrap();
        let out = mlp_forward(&net, &s, &[1.0, 2.0, 3.0], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out, vec![0.7, -1.2]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut s = ParamStore::new();
        let net = Mlp::new(&mut s, "m", cfg(3, vec![], 3), 1, false).unwrap();
        s.set_by_name("m.fc0.weight", Matrix::identity(3)).unwrap();
        let x = [0.25, -4.0, 9.5];
        assert_eq!(mlp_forward(&net, &s, &x, &mut ForwardCtx::eval()).unwrap(), x.to_vec());
    }

    #[test]
    fn two_layer_tanh_matches_scalar_evaluation() {
        let mut s = ParamStore::new();
        let net = Mlp::new(&mut s, "m", cfg(2, vec![3], 2), 1, false).unwrap();
        s.set_by_name("m.fc0.bias", Matrix::from_rows(&[vec![0.1, -0.2, 0.3]])).unwrap();
        s.set_by_name("m.fc1.bias", Matrix::from_rows(&[vec![-0.05, 0.4]])).unwrap();
        let w0 = s.get("m.fc0.weight").unwrap().clone();
        let b0 = s.get("m.fc0.bias").unwrap().clone();
        let w1 = s.get("m.fc1.weight").unwrap().clone();
        let b1 = s.get("m.fc1.bias").unwrap().clone();
        let x = [0.5, -0.5];
        // Straight-line scalar evaluation of the same weights.
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut a = b0[(0, j)];
            for i in 0..2 {
                a += x[i] * w0[(i, j)];
            }
            h[j] = a.tanh();
        }
        let mut expect = [0.0; 2];
        for k in 0..2 {
            let mut a = b1[(0, k)];
            for j in 0..3 {
                a += h[j] * w1[(j, k)];
            }
            expect[k] = a;
        }
        let out = mlp_forward(&net, &s, &x, &mut ForwardCtx::eval()).unwrap();
        for k in 0..2 {
            assert!((out[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_error_on_wrong_input() {
        let mut s = ParamStore::new();
        let net = Mlp::new(&mut s, "m", cfg(2, vec![3], 1), 1, false).unwrap();
        assert!(matches!(mlp_forward(&net, &s, &[1.0], &mut ForwardCtx::eval()), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut s = ParamStore::new();
        let mut c = cfg(2, vec![8, 8], 1);
        c.dropout = 0.4;
        c.batch_norm = true;
        let net = Mlp::new(&mut s, "m", c, 3, false).unwrap();
        let a = mlp_forward(&net, &s, &[0.3, 0.1], &mut ForwardCtx::eval()).unwrap();
        let b = mlp_forward(&net, &s, &[0.3, 0.1], &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a, b);
        let t1 = mlp_forward(&net, &s, &[0.3, 0.1], &mut ForwardCtx::train(1)).unwrap();
        let t2 = mlp_forward(&net, &s, &[0.3, 0.1], &mut ForwardCtx::train(2)).unwrap();
        assert!(t1 != a || t2 != a, "dropout should act in train mode");
    }

    #[test]
    fn invalid_config() {
        let mut s = ParamStore::new();
        let mut c = cfg(2, vec![3], 1);
        c.dropout = 1.0;
        assert!(matches!(Mlp::new(&mut s, "m", c, 1, false), Err(Error::Config(_))));
        assert!(matches!(Mlp::new(&mut s, "n", cfg(0, vec![], 1), 1, false), Err(Error::Config(_))));
    }
}
