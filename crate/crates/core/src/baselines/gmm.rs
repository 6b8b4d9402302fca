use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compute::{
    rng_from_seed, Activation, ForwardCtx, Matrix, Mlp, MlpConfig, ParamStore, StoredParam, Tape, Var, HALF_LN_2PI,
};
use crate::density::DensityModel;
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub dim: usize,
    #[serde(default)]
    pub context_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl GmmConfig {
    pub fn new(components: usize, dim: usize, context_dim: usize) -> Self {
        Self { components, dim, context_dim, hidden: vec![32], activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.dim == 0 {
            return Err(Error::Config("gmm needs >= 1 component and dim >= 1".into()));
        }
        Ok(())
    }
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self::new(5, 1, 0)
    }
}

/// Diagonal Gaussian mixture whose weights, means and log-stds come from a
/// network of the context. Output layout: `[logits M | means M·D | log-stds M·D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    config: GmmConfig,
    net: Mlp,
    params: ParamStore,
}

/// Parameters of the mixture for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn new(config: GmmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (m, d) = (config.components, config.dim);
        let mut params = ParamStore::new();
        let mcfg = MlpConfig {
            // without context the network reads a constant 1
            input_dim: config.context_dim.max(1),
            hidden: config.hidden.clone(),
            output_dim: m + 2 * m * d,
            activation: config.activation,
            dropout: 0.0,
            batch_norm: false,
        };
        let net = Mlp::new(&mut params, "gmm.net", mcfg, seed, false)?;
        // spread initial means across the unit interval labels live in
        let bias_id = net.output_bias();
        let mut bias = params.value(bias_id).clone();
        for c in 0..m {
            for j in 0..d {
                bias[(0, m + c * d + j)] = (c as f64 + 0.5) / m as f64;
            }
        }
        params.set(bias_id, bias)?;
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &GmmConfig {
        &self.config
    }

    pub fn from_snapshot(config: GmmConfig, snapshot: &BTreeMap<String, StoredParam>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.restore(snapshot)?;
        Ok(m)
    }

    /// Name of the output-layer bias; with zero output weights the mixture is fixed by it.
    pub fn output_bias_name(&self) -> &str {
        &self.params.param(self.net.output_bias()).name
    }

    pub fn output_weight_name(&self) -> &str {
        &self.params.param(self.net.output_weight()).name
    }

    fn net_input(&self, tape: &mut Tape, ctx: Var) -> Var {
        if self.config.context_dim == 0 {
            let rows = tape.value(ctx).rows();
            tape.constant(Matrix::filled(rows, 1, 1.0))
        } else {
            ctx
        }
    }

    fn group_matrix(&self) -> Matrix {
        let (m, d) = (self.config.components, self.config.dim);
        let mut g = Matrix::zeros(m * d, m);
        for c in 0..m {
            for j in 0..d {
                g[(c * d + j, c)] = 1.0;
            }
        }
        g
    }

    /// Mixture weights, means and stds for one context.
    pub fn mixture(&self, ctx: &[f64]) -> Result<MixtureParams> {
        if ctx.len() != self.config.context_dim {
            return Err(Error::Shape(format!("expected context of length {}, got {}", self.config.context_dim, ctx.len())));
        }
        let (m, d) = (self.config.components, self.config.dim);
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::row_vector(ctx.to_vec()));
        let inp = self.net_input(&mut tape, c);
        let out = self.net.forward(&mut tape, &self.params, inp, &mut ForwardCtx::eval());
        let o = tape.value(out).row(0).to_vec();
        let mx = o[..m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = o[..m].iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let weights = e.iter().map(|v| v / s).collect();
        let means = (0..m).map(|c| o[m + c * d..m + (c + 1) * d].to_vec()).collect();
        let stds = (0..m)
            .map(|c| {
                o[m + m * d + c * d..m + m * d + (c + 1) * d]
                    .iter()
                    .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp())
                    .collect()
            })
            .collect();
        Ok(MixtureParams { weights, means, stds })
    }
}

impl DensityModel for GmmModel {
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
        let (m, d) = (self.config.components, self.config.dim);
        let inp = self.net_input(tape, ctx);
        let out = self.net.forward(tape, store, inp, fctx);
        let logits = tape.slice_cols(out, 0, m);
        let means = tape.slice_cols(out, m, m + m * d);
        let raw_ls = tape.slice_cols(out, m + m * d, m + 2 * m * d);
        let log_std = tape.clamp(raw_ls, LOG_STD_MIN, LOG_STD_MAX);

        let norm = tape.logsumexp_cols(logits);
        let neg_norm = tape.neg(norm);
        let log_w = tape.add_col(logits, neg_norm);

        let reps = vec![y; m];
        let y_rep = tape.concat_cols(&reps);
        let diff = tape.sub(y_rep, means);
        let neg_ls = tape.neg(log_std);
        let inv_std = tape.exp(neg_ls);
        let zs = tape.mul(diff, inv_std);
        let sq = tape.square(zs);
        let g = tape.constant(self.group_matrix());
        let quad = tape.matmul(sq, g);
        let ls_sum = tape.matmul(log_std, g);

        let half_quad = tape.scale(quad, -0.5);
        let a = tape.sub(half_quad, ls_sum);
        let b = tape.add(a, log_w);
        let comp = tape.add_scalar(b, -(d as f64) * HALF_LN_2PI);
        let lp = tape.logsumexp_cols(comp);
        if !tape.value(lp).all_finite() {
            return Err(Error::Numerical("non-finite gmm log density".into()));
        }
        Ok(lp)
    }

    fn sample(&self, ctx: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mix = self.mixture(ctx)?;
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = mix.weights.len() - 1;
            for (c, w) in mix.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            let s = (0..self.config.dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mix.means[comp][j] + mix.stds[comp][j] * z
                })
                .collect();
            out.push(s);
        }
        Ok(out)
    }
}
