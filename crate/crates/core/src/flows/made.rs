//! Connectivity masks for autoregressive conditioners.
//!
//! Inputs are `[y_1 … y_D ‖ ctx]`. Label input `j` has degree `order[j]` (a
//! permutation of `1..=D`), context inputs degree 0, hidden unit `i` degree `i mod D`. A hidden unit
//! reads units of degree ≤ its own; output `d` reads units of degree `< d`.
//! Output `j` therefore depends only on labels earlier in `order` and the context.

use crate::compute::Matrix;

pub(crate) fn hidden_degrees(width: usize, dim: usize) -> Vec<usize> {
    (0..width).map(|i| i % dim).collect()
}

/// Masks for a net with `order.len()` labels, `context` extra inputs, hidden widths `hidden`,
/// and `outputs_per_dim` outputs per label (grouped: all first outputs, then all second).
pub(crate) fn made_masks(order: &[usize], context: usize, hidden: &[usize], outputs_per_dim: usize) -> Vec<Matrix> {
    let dim = order.len();
    let input_deg: Vec<usize> = order.iter().copied().chain(std::iter::repeat_n(0, context)).collect();
    let mut prev = input_deg;
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    for &w in hidden {
        let deg = hidden_degrees(w, dim);
        let mut m = Matrix::zeros(prev.len(), w);
        for (i, &pi) in prev.iter().enumerate() {
            for (j, &hj) in deg.iter().enumerate() {
                if pi <= hj {
                    m[(i, j)] = 1.0;
                }
            }
        }
        masks.push(m);
        prev = deg;
    }
    let out_deg: Vec<usize> = (0..outputs_per_dim).flat_map(|_| order.iter().copied()).collect();
    let mut m = Matrix::zeros(prev.len(), out_deg.len());
    for (i, &pi) in prev.iter().enumerate() {
        for (j, &oj) in out_deg.iter().enumerate() {
            if pi < oj {
                m[(i, j)] = 1.0;
            }
        }
    }
    masks.push(m);
    masks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn natural(dim: usize) -> Vec<usize> {
        (1..=dim).collect()
    }

    fn reachable(masks: &[Matrix]) -> Matrix {
        let mut r = masks[0].map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        for m in &masks[1..] {
            r = r.matmul(m).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        }
        r
    }

    #[test]
    fn autoregressive_property() {
        for dim in 1..=5 {
            for hidden in [vec![], vec![7], vec![6, 9]] {
                let masks = made_masks(&natural(dim), 3, &hidden, 2);
                let r = reachable(&masks);
                for out in 0..2 * dim {
                    let d = out % dim;
                    for j in 0..dim {
                        if j >= d {
                            assert_eq!(r[(j, out)], 0.0, "dim {dim} hidden {hidden:?}: y{j} reaches output {d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reversed_order() {
        let order = vec![3, 2, 1];
        let r = reachable(&made_masks(&order, 0, &[9], 1));
        // y2 comes first, then y1, then y0
        assert_eq!(r.column(2), vec![0.0, 0.0, 0.0]);
        assert_eq!(r.column(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(r.column(0), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn context_reaches_every_output() {
        let masks = made_masks(&natural(3), 2, &[6], 2);
        let r = reachable(&masks);
        for out in 0..6 {
            assert_eq!(r[(3, out)], 1.0);
            assert_eq!(r[(4, out)], 1.0);
        }
    }

    #[test]
    fn preceding_labels_reach_later_outputs() {
        let masks = made_masks(&natural(4), 0, &[8], 1);
        let r = reachable(&masks);
        for d in 0..4 {
            for j in 0..d {
                assert_eq!(r[(j, d)], 1.0, "y{j} should reach output {d}");
            }
        }
    }

    #[test]
    fn single_dimension_sees_only_context() {
        let masks = made_masks(&natural(1), 16, &[8], 2);
        let r = reachable(&masks);
        assert_eq!(r[(0, 0)], 0.0);
        assert_eq!(r[(0, 1)], 0.0);
        assert!((1..17).all(|i| r[(i, 0)] == 1.0));
    }
}
