//! Conditional normalizing flows.
//!
//! A flow maps a label vector `y` to a latent `z = f_K ∘ … ∘ f_1(y; ctx)` with a
//! standard-normal base, so `log p(y | ctx) = log N(z; 0, I) + Σ_k log|det ∂f_k|`.
//! The context is appended to every conditioner's input.
//!
//! Layer kinds:
//! - `nice`: additive coupling, plus a trailing learnable diagonal scale
//! - `realnvp`: affine coupling with a soft-clamped log-scale
//! - `maf`: masked autoregressive transform, inverted one dimension at a time
//!
//! Coupling layers alternate which half (even or odd indices) passes through.
//! Autoregressive layers alternate between natural and reversed dimension
//! order, which is a reversal permutation between layers folded into the masks.

mod made;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compute::{
    batch_norm_graph, rng_from_seed, Activation, ForwardCtx, Matrix, Mlp, MlpConfig, ParamId, ParamStore, Tape,
    Var, BATCH_NORM_EPS, HALF_LN_2PI,
};
use crate::density::{check_batch, standard_normal_graph, DensityModel};
use crate::error::{Error, Result};

/// Bound on each layer's per-dimension log-scale.
pub const LOG_SCALE_BOUND: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Nice,
    Realnvp,
    Maf,
}

impl FlowKind {
    pub fn is_coupling(self) -> bool {
        matches!(self, FlowKind::Nice | FlowKind::Realnvp)
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Nice => "nice",
            FlowKind::Realnvp => "realnvp",
            FlowKind::Maf => "maf",
        }
    }
}

impl std::str::FromStr for FlowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nice" => Ok(FlowKind::Nice),
            "realnvp" | "real_nvp" => Ok(FlowKind::Realnvp),
            "maf" => Ok(FlowKind::Maf),
            other => Err(Error::Config(format!("unknown flow kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub dim: usize,
    #[serde(default)]
    pub context_dim: usize,
    pub num_layers: usize,
    /// Hidden layers per conditioner network.
    pub blocks_per_layer: usize,
    pub hidden_features: usize,
    /// Conditioner dropout; not applied to `maf`.
    #[serde(default)]
    pub dropout: f64,
    /// Batch norm inside conditioner networks.
    #[serde(default)]
    pub batch_norm_within: bool,
    /// Invertible batch norm after each flow layer.
    #[serde(default)]
    pub batch_norm_between: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl FlowConfig {
    pub fn new(kind: FlowKind, dim: usize, context_dim: usize) -> Self {
        Self {
            kind,
            dim,
            context_dim,
            num_layers: 4,
            blocks_per_layer: 1,
            hidden_features: 32,
            dropout: 0.0,
            batch_norm_within: false,
            batch_norm_between: false,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("flow dim must be >= 1".into()));
        }
        if self.kind.is_coupling() && self.dim < 2 {
            return Err(Error::Config(format!("{} coupling flow needs dim >= 2, got {}", self.kind.name(), self.dim)));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.hidden_features == 0 {
            return Err(Error::Config("hidden_features must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Standard normal on `R^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseDistribution {
    pub dim: usize,
}

impl BaseDistribution {
    pub fn log_prob(&self, z: &[f64]) -> f64 {
        -(self.dim as f64) * HALF_LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Transform {
    Coupling {
        cond: Mlp,
        pass: Vec<usize>,
        transformed: Vec<usize>,
        /// Column order restoring `[pass ‖ transformed]` to the original layout.
        restore: Vec<usize>,
        affine: bool,
    },
    Autoregressive {
        made: Mlp,
        /// Dimensions in the order they are generated.
        order: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct InvertibleNorm {
    log_gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct FlowLayer {
    transform: Transform,
    norm: Option<InvertibleNorm>,
}

/// A conditional flow with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    layers: Vec<FlowLayer>,
    final_scale: Option<ParamId>,
    params: ParamStore,
}

fn soft_clamp(x: f64) -> f64 {
    LOG_SCALE_BOUND * (x / LOG_SCALE_BOUND).tanh()
}

fn eval_mlp(net: &Mlp, store: &ParamStore, input: Matrix) -> Matrix {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = net.forward(&mut tape, store, x, &mut ForwardCtx::eval());
    tape.value(y).clone()
}

fn rows_of(ctx: &Matrix, rows: usize) -> Matrix {
    if ctx.rows() == rows {
        ctx.clone()
    } else {
        ctx.broadcast_row(rows)
    }
}

/// Build a flow whose conditioners output exactly zero, so it starts as the identity.
pub fn build_flow(config: FlowConfig, seed: u64) -> Result<FlowModel> {
    config.validate()?;
    let d = config.dim;
    let c = config.context_dim;
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(config.num_layers);
    let hidden = vec![config.hidden_features; config.blocks_per_layer];
    for k in 0..config.num_layers {
        let prefix = format!("flow.l{k}");
        let transform = if config.kind.is_coupling() {
            let parity = k % 2;
            let pass: Vec<usize> = (0..d).filter(|i| i % 2 == parity).collect();
            let transformed: Vec<usize> = (0..d).filter(|i| i % 2 != parity).collect();
            let joined: Vec<usize> = pass.iter().chain(&transformed).copied().collect();
            let mut restore = vec![0; d];
            for (pos, &col) in joined.iter().enumerate() {
                restore[col] = pos;
            }
            let affine = config.kind == FlowKind::Realnvp;
            let per = if affine { 2 } else { 1 };
            let mcfg = MlpConfig {
                input_dim: pass.len() + c,
                hidden: hidden.clone(),
                output_dim: per * transformed.len(),
                activation: config.activation,
                dropout: config.dropout,
                batch_norm: config.batch_norm_within,
            };
            let cond = Mlp::new(&mut store, &format!("{prefix}.cond"), mcfg, seed, true)?;
            Transform::Coupling { cond, pass, transformed, restore, affine }
        } else {
            let mcfg = MlpConfig {
                input_dim: d + c,
                hidden: hidden.clone(),
                output_dim: 2 * d,
                activation: config.activation,
                dropout: 0.0,
                batch_norm: config.batch_norm_within,
            };
            let order: Vec<usize> = if k % 2 == 0 { (0..d).collect() } else { (0..d).rev().collect() };
            let mut degrees = vec![0; d];
            for (rank, &dim) in order.iter().enumerate() {
                degrees[dim] = rank + 1;
            }
            let masks = made::made_masks(&degrees, c, &hidden, 2);
            let made = Mlp::with_masks(&mut store, &format!("{prefix}.made"), mcfg, seed, true, Some(masks))?;
            Transform::Autoregressive { made, order }
        };
        let norm = if config.batch_norm_between {
            Some(InvertibleNorm {
                log_gamma: store.add(format!("{prefix}.bn.log_gamma"), Matrix::zeros(1, d), true)?,
                beta: store.add(format!("{prefix}.bn.beta"), Matrix::zeros(1, d), true)?,
                mean: store.add(format!("{prefix}.bn.running_mean"), Matrix::zeros(1, d), false)?,
                // 1 - eps makes the frozen normalization exactly the identity before training
                var: store.add(format!("{prefix}.bn.running_var"), Matrix::filled(1, d, 1.0 - BATCH_NORM_EPS), false)?,
            })
        } else {
            None
        };
        layers.push(FlowLayer { transform, norm });
    }
    let final_scale = if config.kind == FlowKind::Nice {
        Some(store.add("flow.scale.log_scale", Matrix::zeros(1, d), true)?)
    } else {
        None
    };
    Ok(FlowModel { config, layers, final_scale, params: store })
}

impl FlowModel {
    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn base(&self) -> BaseDistribution {
        BaseDistribution { dim: self.config.dim }
    }

    /// `y → (z, log_det)` on the tape; `log_det` is `B × 1`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        ctx: Var,
        fctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let rows = tape.value(y).rows();
        let mut x = y;
        let mut log_det = tape.constant(Matrix::zeros(rows, 1));
        for (k, layer) in self.layers.iter().enumerate() {
            let (z, ld) = match &layer.transform {
                Transform::Coupling { cond, pass, transformed, restore, affine } => {
                    let xp = tape.select_cols(x, pass);
                    let xt = tape.select_cols(x, transformed);
                    let inp = tape.concat_cols(&[xp, ctx]);
                    let out = cond.forward(tape, store, inp, fctx);
                    let m = transformed.len();
                    let (zt, ld) = if *affine {
                        let raw = tape.slice_cols(out, 0, m);
                        let t = tape.slice_cols(out, m, 2 * m);
                        let s = tape.soft_clamp(raw, LOG_SCALE_BOUND);
                        let e = tape.exp(s);
                        let scaled = tape.mul(xt, e);
                        (tape.add(scaled, t), Some(tape.sum_cols(s)))
                    } else {
                        (tape.add(xt, out), None)
                    };
                    let joined = tape.concat_cols(&[xp, zt]);
                    (tape.select_cols(joined, restore), ld)
                }
                Transform::Autoregressive { made, .. } => {
                    let d = self.config.dim;
                    let inp = tape.concat_cols(&[x, ctx]);
                    let out = made.forward(tape, store, inp, fctx);
                    let raw = tape.slice_cols(out, 0, d);
                    let t = tape.slice_cols(out, d, 2 * d);
                    let s = tape.soft_clamp(raw, LOG_SCALE_BOUND);
                    let e = tape.exp(s);
                    let scaled = tape.mul(x, e);
                    (tape.add(scaled, t), Some(tape.sum_cols(s)))
                }
            };
            x = z;
            if let Some(ld) = ld {
                log_det = tape.add(log_det, ld);
            }
            if let Some(norm) = &layer.norm {
                let (normed, inv_std) = batch_norm_graph(tape, x, norm.mean, norm.var, store, fctx);
                let lg = tape.param(store, norm.log_gamma);
                let beta = tape.param(store, norm.beta);
                let g = tape.exp(lg);
                let scaled = tape.mul_row(normed, g);
                x = tape.add_row(scaled, beta);
                let log_inv = tape.log(inv_std);
                let per_dim = tape.add(lg, log_inv);
                let total = tape.sum_cols(per_dim);
                let ld = tape.broadcast_rows(total, rows);
                log_det = tape.add(log_det, ld);
            }
            if !tape.value(x).all_finite() || !tape.value(log_det).all_finite() {
                return Err(Error::Numerical(format!("non-finite output at flow layer {k}")));
            }
        }
        if let Some(id) = self.final_scale {
            let ls = tape.param(store, id);
            let e = tape.exp(ls);
            x = tape.mul_row(x, e);
            let total = tape.sum_cols(ls);
            let ld = tape.broadcast_rows(total, rows);
            log_det = tape.add(log_det, ld);
            if !tape.value(x).all_finite() {
                return Err(Error::Numerical("non-finite output at final scaling layer".into()));
            }
        }
        Ok((x, log_det))
    }

    /// Eval-mode `y → (z, log_det)` for a batch.
    pub fn forward_batch(&self, ys: &Matrix, ctx: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_batch(self.config.dim, self.config.context_dim, ys, ctx)?;
        let mut tape = Tape::new();
        let y = tape.constant(ys.clone());
        let c = tape.constant(rows_of(ctx, ys.rows()));
        let (z, ld) = self.forward_graph(&mut tape, &self.params, y, c, &mut ForwardCtx::eval())?;
        Ok((tape.value(z).clone(), tape.value(ld).as_slice().to_vec()))
    }

    pub fn forward(&self, y: &[f64], ctx: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(&Matrix::row_vector(y.to_vec()), &Matrix::row_vector(ctx.to_vec()))?;
        Ok((z.into_vec(), ld[0]))
    }

    /// Eval-mode `z → y` for a batch.
    pub fn inverse_batch(&self, zs: &Matrix, ctx: &Matrix) -> Result<Matrix> {
        check_batch(self.config.dim, self.config.context_dim, zs, ctx)?;
        let d = self.config.dim;
        let rows = zs.rows();
        let ctx = rows_of(ctx, rows);
        let store = &self.params;
        let mut x = zs.clone();
        if let Some(id) = self.final_scale {
            let ls = store.value(id);
            for r in 0..rows {
                for (v, s) in x.row_mut(r).iter_mut().zip(ls.as_slice()) {
                    *v *= (-s).exp();
                }
            }
        }
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if let Some(norm) = &layer.norm {
                let (lg, beta) = (store.value(norm.log_gamma), store.value(norm.beta));
                let (mean, var) = (store.value(norm.mean), store.value(norm.var));
                for r in 0..rows {
                    for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - beta[(0, j)]) * (-lg[(0, j)]).exp() * (var[(0, j)] + BATCH_NORM_EPS).sqrt()
                            + mean[(0, j)];
                    }
                }
            }
            x = match &layer.transform {
                Transform::Coupling { cond, pass, transformed, restore, affine } => {
                    let xp = x.select_cols(pass);
                    let zt = x.select_cols(transformed);
                    let out = eval_mlp(cond, store, Matrix::hconcat(&[&xp, &ctx]));
                    let m = transformed.len();
                    let mut yt = zt.clone();
                    for r in 0..rows {
                        for j in 0..m {
                            yt[(r, j)] = if *affine {
                                (zt[(r, j)] - out[(r, m + j)]) * (-soft_clamp(out[(r, j)])).exp()
                            } else {
                                zt[(r, j)] - out[(r, j)]
                            };
                        }
                    }
                    Matrix::hconcat(&[&xp, &yt]).select_cols(restore)
                }
                Transform::Autoregressive { made, order } => {
                    let mut y = Matrix::zeros(rows, d);
                    for &dim in order {
                        let out = eval_mlp(made, store, Matrix::hconcat(&[&y, &ctx]));
                        for r in 0..rows {
                            y[(r, dim)] = (x[(r, dim)] - out[(r, d + dim)]) * (-soft_clamp(out[(r, dim)])).exp();
                        }
                    }
                    y
                }
            };
            if !x.all_finite() {
                return Err(Error::Numerical(format!("non-finite value inverting flow layer {k}")));
            }
        }
        Ok(x)
    }

    pub fn inverse(&self, z: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&Matrix::row_vector(z.to_vec()), &Matrix::row_vector(ctx.to_vec()))?.into_vec())
    }

    /// Rebuild from a configuration and stored parameter values.
    pub fn from_snapshot(
        config: FlowConfig,
        snapshot: &std::collections::BTreeMap<String, crate::compute::StoredParam>,
    ) -> Result<Self> {
        let mut m = build_flow(config, 0)?;
        m.params.restore(snapshot)?;
        Ok(m)
    }
}

impl DensityModel for FlowModel {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn log_prob_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        ctx: Var,
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (z, log_det) = self.forward_graph(tape, store, y, ctx, fctx)?;
        let base = standard_normal_graph(tape, z);
        Ok(tape.add(base, log_det))
    }

    fn sample(&self, ctx: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if ctx.len() != self.config.context_dim {
            return Err(Error::Shape(format!("expected context of length {}, got {}", self.config.context_dim, ctx.len())));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = rng_from_seed(seed);
        let d = self.config.dim;
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = self.inverse_batch(&Matrix::from_vec(n, d, z), &Matrix::row_vector(ctx.to_vec()))?;
        Ok((0..n).map(|r| y.row(r).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests;
