use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-5;

/// Compare reverse-mode gradients of the scalar built by `loss_graph` against
/// central differences over every trainable scalar in `params`.
///
/// Returns `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-5)`. The floor keeps
/// vanishing gradients, where central differences only see rounding noise, from dominating.
pub fn finite_diff_check<F>(loss_graph: F, params: &ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    finite_diff_check_multi(|t, s| loss_graph(t, &s[0]), std::slice::from_ref(params), epsilon)
}

/// As [`finite_diff_check`] for a loss reading several stores. Parameter
/// names must be unique across the stores.
pub fn finite_diff_check_multi<F>(loss_graph: F, stores: &[ParamStore], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut tape = Tape::new();
    let loss = loss_graph(&mut tape, stores)?;
    let grads = tape.backward(loss)?;

    let eval = |stores: &[ParamStore]| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_graph(&mut t, stores)?;
        let v = t.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("loss evaluated to {v} at perturbed parameters")))
        }
    };

    let mut work = stores.to_vec();
    let mut worst: f64 = 0.0;
    for s in 0..work.len() {
        let names: Vec<String> = work[s].iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
        for name in names {
            let id = work[s].id(&name).expect("name from same store");
            let analytic = grads.get(&name).expect("trainable params have gradients").clone();
            for i in 0..analytic.len() {
                let orig = work[s].value(id).as_slice()[i];
                work[s].value_mut(id).as_mut_slice()[i] = orig + epsilon;
                let up = eval(&work)?;
                work[s].value_mut(id).as_mut_slice()[i] = orig - epsilon;
                let down = eval(&work)?;
                work[s].value_mut(id).as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * epsilon);
                let a = analytic.as_slice()[i];
                let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Matrix;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_rows(&[vec![0.3, -1.7], vec![2.2, 0.9]]), true).unwrap();
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let s = store();
        let id = s.id("w").unwrap();
        for eps in [1e-6, 1e-5, 1e-4] {
            let err = finite_diff_check(
                |t, p| {
                    let w = t.param(p, id);
                    let sq = t.square(w);
                    let k = t.scale(sq, 3.0);
                    Ok(t.sum(k))
                },
                &s,
                eps,
            )
            .unwrap();
            assert!(err < 1e-8, "eps {eps}: {err}");
        }
    }

    #[test]
    fn catches_hard_threshold() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::filled(1, 1, 1.0), true).unwrap();
        // clamp at exactly its upper edge: analytic slope 1, two-sided numeric slope 0.5
        let err = finite_diff_check(
            |t, p| {
                let w = t.param(p, id);
                let c = t.clamp(w, -1.0, 1.0);
                Ok(t.sum(c))
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let s = store();
        let id = s.id("w").unwrap();
        let r = finite_diff_check(
            |t, p| {
                let w = t.param(p, id);
                Ok(t.sum(w))
            },
            &s,
            0.0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
