use crate::compute::{ForwardCtx, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 4096;

/// A conditional density `p(y | ctx)` over `R^dim`.
///
/// Implementors record `log p` for a batch onto a tape so the same code path
/// serves training, gradient checking and evaluation. `store` must have the
/// layout of [`DensityModel::params`]; passing a perturbed copy is how the
/// finite-difference checks probe the model.
pub trait DensityModel: Send + Sync {
    fn dim(&self) -> usize;
    fn context_dim(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// `y` is `B × dim`, `ctx` is `B × context_dim`; returns `B × 1`.
    fn log_prob_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        ctx: Var,
        fctx: &mut ForwardCtx,
    ) -> Result<Var>;

    /// Draw `n` samples for one context.
    fn sample(&self, ctx: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;

    /// Eval-mode log densities. `ctx` has either one row (shared) or one row per `ys` row.
    fn log_prob_batch(&self, ys: &Matrix, ctx: &Matrix) -> Result<Vec<f64>> {
        check_batch(self.dim(), self.context_dim(), ys, ctx)?;
        let mut out = Vec::with_capacity(ys.rows());
        let idx: Vec<usize> = (0..ys.rows()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let y = tape.constant(ys.select_rows(chunk));
            let c = if ctx.rows() == 1 {
                ctx.broadcast_row(chunk.len())
            } else {
                ctx.select_rows(chunk)
            };
            let c = tape.constant(c);
            let lp = self.log_prob_graph(&mut tape, self.params(), y, c, &mut ForwardCtx::eval())?;
            out.extend_from_slice(tape.value(lp).as_slice());
        }
        Ok(out)
    }

    fn log_prob(&self, y: &[f64], ctx: &[f64]) -> Result<f64> {
        let lp = self.log_prob_batch(&Matrix::row_vector(y.to_vec()), &Matrix::row_vector(ctx.to_vec()))?;
        Ok(lp[0])
    }
}

pub(crate) fn check_batch(dim: usize, context_dim: usize, ys: &Matrix, ctx: &Matrix) -> Result<()> {
    if ys.cols() != dim {
        return Err(Error::Shape(format!("expected labels of length {dim}, got {}", ys.cols())));
    }
    if ctx.cols() != context_dim {
        return Err(Error::Shape(format!("expected context of length {context_dim}, got {}", ctx.cols())));
    }
    if ctx.rows() != 1 && ctx.rows() != ys.rows() {
        return Err(Error::Shape(format!("{} contexts for {} labels", ctx.rows(), ys.rows())));
    }
    Ok(())
}

/// `log N(z; 0, I)` per row, `B×D → B×1`.
pub(crate) fn standard_normal_graph(tape: &mut Tape, z: Var) -> Var {
    let d = tape.value(z).cols() as f64;
    let sq = tape.square(z);
    let s = tape.sum_cols(sq);
    let h = tape.scale(s, -0.5);
    tape.add_scalar(h, -d * crate::compute::HALF_LN_2PI)
}

/// Mean negative log-likelihood over a batch, as a tape scalar.
pub fn nll_graph(
    model: &dyn DensityModel,
    tape: &mut Tape,
    store: &ParamStore,
    y: Var,
    ctx: Var,
    fctx: &mut ForwardCtx,
) -> Result<Var> {
    if tape.value(y).rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let lp = model.log_prob_graph(tape, store, y, ctx, fctx)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}
