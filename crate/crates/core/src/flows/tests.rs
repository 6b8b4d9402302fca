use proptest::prelude::*;

use super::*;

fn realnvp_ln2() -> FlowModel {
    let mut cfg = FlowConfig::new(FlowKind::Realnvp, 2, 0);
    cfg.num_layers = 1;
    let mut m = build_flow(cfg, 7).unwrap();
    // conditioner output is its bias while the last layer is zero: (raw log-scale, shift)
    let raw = LOG_SCALE_BOUND * (2f64.ln() / LOG_SCALE_BOUND).atanh();
    m.params_mut().set_by_name("flow.l0.cond.fc1.bias", Matrix::from_rows(&[vec![raw, 0.0]])).unwrap();
    m
}

fn identity(kind: FlowKind, dim: usize, ctx: usize) -> FlowModel {
    build_flow(FlowConfig::new(kind, dim, ctx), 3).unwrap()
}

/// Random non-identity flow: jittered weights, and when batch norm is on, non-trivial running stats.
fn random_flow(cfg: FlowConfig, seed: u64) -> FlowModel {
    let mut m = build_flow(cfg, seed).unwrap();
    m.params_mut().jitter(seed + 1, 0.3);
    let mut rng = rng_from_seed(seed + 2);
    let names: Vec<String> = m.params().iter().filter(|p| p.name.contains("running")).map(|p| p.name.clone()).collect();
    for n in names {
        let (r, c) = m.params().get(&n).unwrap().shape();
        let vals = (0..r * c)
            .map(|_| {
                let u: f64 = rand::Rng::random(&mut rng);
                if n.ends_with("var") {
                    0.5 + u
                } else {
                    u - 0.5
                }
            })
            .collect();
        let v = Matrix::from_vec(r, c, vals);
        m.params_mut().set_by_name(&n, v).unwrap();
    }
    m
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

/// log|det J| of y ↦ z by central differences.
fn fd_log_det(m: &FlowModel, y: &[f64], ctx: &[f64]) -> f64 {
    let d = y.len();
    let h = 1e-6;
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut up = y.to_vec();
        let mut dn = y.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (zu, _) = m.forward(&up, ctx).unwrap();
        let (zd, _) = m.forward(&dn, ctx).unwrap();
        for i in 0..d {
            jac[i][j] = (zu[i] - zd[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac)
}

#[test]
fn zero_conditioner_is_identity_coupling() {
    let m = identity(FlowKind::Realnvp, 3, 2);
    let (z, ld) = m.forward(&[0.2, -1.0, 3.0], &[0.5, 0.5]).unwrap();
    assert_eq!(z, vec![0.2, -1.0, 3.0]);
    assert_eq!(ld, 0.0);
}

#[test]
fn analytic_affine_coupling() {
    let m = realnvp_ln2();
    let (z, ld) = m.forward(&[0.7, 1.5], &[]).unwrap();
    assert!((z[0] - 0.7).abs() < 1e-15);
    assert!((z[1] - 3.0).abs() < 1e-12);
    assert!((ld - 2f64.ln()).abs() < 1e-12);
    let y = m.inverse(&[1.0, 4.0], &[]).unwrap();
    assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 2.0).abs() < 1e-12);
}

#[test]
fn maf_log_det_matches_jacobian() {
    let mut cfg = FlowConfig::new(FlowKind::Maf, 3, 2);
    cfg.num_layers = 4;
    let m = random_flow(cfg, 11);
    let y = [0.3, -0.4, 0.9];
    let ctx = [0.1, -0.2];
    let (_, ld) = m.forward(&y, &ctx).unwrap();
    assert!((ld - fd_log_det(&m, &y, &ctx)).abs() < 1e-4);
}

#[test]
fn log_det_matches_jacobian_with_batch_norm() {
    for kind in [FlowKind::Nice, FlowKind::Realnvp, FlowKind::Maf] {
        let mut cfg = FlowConfig::new(kind, 4, 3);
        cfg.num_layers = 3;
        cfg.batch_norm_between = true;
        cfg.batch_norm_within = true;
        let m = random_flow(cfg, 5);
        let y = [0.5, 0.1, -0.3, 0.8];
        let ctx = [1.0, 0.0, -1.0];
        let (_, ld) = m.forward(&y, &ctx).unwrap();
        assert!((ld - fd_log_det(&m, &y, &ctx)).abs() < 1e-4, "{kind:?}");
    }
}

#[test]
fn identity_inverse() {
    for kind in [FlowKind::Nice, FlowKind::Realnvp, FlowKind::Maf] {
        let m = identity(kind, 2, 1);
        assert_eq!(m.inverse(&[0.4, -2.5], &[9.0]).unwrap(), vec![0.4, -2.5]);
    }
}

#[test]
fn nice_round_trip_many_points() {
    let mut cfg = FlowConfig::new(FlowKind::Nice, 3, 2);
    cfg.num_layers = 4;
    let m = random_flow(cfg, 21);
    let mut rng = rng_from_seed(4);
    let zs: Vec<f64> = (0..3000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let zs = Matrix::from_vec(1000, 3, zs);
    let ctx = Matrix::row_vector(vec![0.3, -0.7]);
    let y = m.inverse_batch(&zs, &ctx).unwrap();
    let (z, _) = m.forward_batch(&y, &ctx).unwrap();
    let err = z.zip_map(&zs, |a, b| (a - b).abs()).max_abs();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn identity_log_prob_values() {
    let m1 = identity(FlowKind::Maf, 1, 4);
    assert!((m1.log_prob(&[0.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    let m2 = identity(FlowKind::Realnvp, 2, 0);
    assert!((m2.log_prob(&[0.0, 0.0], &[]).unwrap() + 1.837_877_066_409_345_5).abs() < 1e-12);
}

#[test]
fn identity_sampling_moments() {
    let m = identity(FlowKind::Realnvp, 2, 0);
    let s = m.sample(&[], 100_000, 9).unwrap();
    for d in 0..2 {
        let mean = s.iter().map(|v| v[d]).sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}

#[test]
fn scaled_coupling_sampling() {
    let m = realnvp_ln2();
    let s = m.sample(&[], 100_000, 10).unwrap();
    let mean = s.iter().map(|v| v[1]).sum::<f64>() / s.len() as f64;
    let sd = (s.iter().map(|v| (v[1] - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
    // z2 = 2 y2 and samples come through the inverse, so y2 = z2 / 2 has std 0.5
    assert!((sd - 0.5).abs() < 0.05, "{sd}");
}

#[test]
fn sampling_is_reproducible() {
    let mut cfg = FlowConfig::new(FlowKind::Maf, 2, 1);
    cfg.num_layers = 2;
    let m = random_flow(cfg, 2);
    assert_eq!(m.sample(&[0.5], 50, 3).unwrap(), m.sample(&[0.5], 50, 3).unwrap());
    assert_ne!(m.sample(&[0.5], 50, 3).unwrap(), m.sample(&[0.5], 50, 4).unwrap());
    assert!(m.sample(&[0.5], 0, 3).unwrap().is_empty());
}

#[test]
fn init_matches_base_density_for_every_config() {
    let mut rng = rng_from_seed(1);
    for kind in [FlowKind::Nice, FlowKind::Realnvp, FlowKind::Maf] {
        for &bn_between in &[false, true] {
            for &bn_within in &[false, true] {
                let mut cfg = FlowConfig::new(kind, 3, 2);
                cfg.batch_norm_between = bn_between;
                cfg.batch_norm_within = bn_within;
                cfg.dropout = 0.2;
                let m = build_flow(cfg, 4).unwrap();
                let y: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                let lp = m.log_prob(&y, &[0.3, 0.2]).unwrap();
                assert!((lp - m.base().log_prob(&y)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn coupling_needs_two_dims() {
    for kind in [FlowKind::Nice, FlowKind::Realnvp] {
        assert!(matches!(build_flow(FlowConfig::new(kind, 1, 3), 0), Err(Error::Config(_))));
    }
    let mut bad = FlowConfig::new(FlowKind::Maf, 2, 0);
    bad.num_layers = 0;
    assert!(matches!(build_flow(bad, 0), Err(Error::Config(_))));
}

#[test]
fn one_dimensional_maf_conditions_on_context_only() {
    let m = random_flow(FlowConfig::new(FlowKind::Maf, 1, 16), 8);
    let ctx: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let (_, ld_a) = m.forward(&[0.1], &ctx).unwrap();
    let (_, ld_b) = m.forward(&[0.9], &ctx).unwrap();
    assert_eq!(ld_a, ld_b);
    let other: Vec<f64> = ctx.iter().map(|v| -v).collect();
    let (_, ld_c) = m.forward(&[0.1], &other).unwrap();
    assert_ne!(ld_a, ld_c);
}

#[test]
fn nice_couplings_preserve_volume() {
    let mut cfg = FlowConfig::new(FlowKind::Nice, 4, 2);
    cfg.num_layers = 3;
    let mut m = random_flow(cfg, 12);
    m.params_mut().set_by_name("flow.scale.log_scale", Matrix::zeros(1, 4)).unwrap();
    let (_, ld) = m.forward(&[0.1, 0.2, 0.3, 0.4], &[1.0, -1.0]).unwrap();
    assert_eq!(ld, 0.0);
    let scale = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.05]]);
    m.params_mut().set_by_name("flow.scale.log_scale", scale).unwrap();
    let (_, ld) = m.forward(&[0.1, 0.2, 0.3, 0.4], &[1.0, -1.0]).unwrap();
    assert!((ld - 0.25).abs() < 1e-12);
}

#[test]
fn wrong_context_length_is_shape_error() {
    let m = identity(FlowKind::Maf, 2, 3);
    assert!(matches!(m.log_prob(&[0.0, 0.0], &[1.0]), Err(Error::Shape(_))));
    assert!(matches!(m.inverse(&[0.0], &[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
}

#[test]
fn batch_log_prob_matches_pointwise() {
    let mut cfg = FlowConfig::new(FlowKind::Realnvp, 2, 1);
    cfg.num_layers = 3;
    let m = random_flow(cfg, 30);
    let ys = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.5, 0.9], vec![1.2, -0.3]]);
    let ctx = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]);
    let batch = m.log_prob_batch(&ys, &ctx).unwrap();
    for r in 0..3 {
        assert_eq!(batch[r], m.log_prob(ys.row(r), ctx.row(r)).unwrap());
    }
}

fn kind_strategy() -> impl Strategy<Value = FlowKind> {
    prop_oneof![Just(FlowKind::Nice), Just(FlowKind::Realnvp), Just(FlowKind::Maf)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_random_configs(
        kind in kind_strategy(),
        dim in 2usize..6,
        ctx_dim in 0usize..4,
        layers in 1usize..5,
        blocks in 0usize..3,
        bn in any::<bool>(),
        seed in 0u64..10_000,
        y in proptest::collection::vec(-2.0f64..2.0, 6),
        c in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let mut cfg = FlowConfig::new(kind, dim, ctx_dim);
        cfg.num_layers = layers;
        cfg.blocks_per_layer = blocks;
        cfg.hidden_features = 8;
        cfg.batch_norm_between = bn;
        cfg.batch_norm_within = bn;
        let m = random_flow(cfg, seed);
        let y = &y[..dim];
        let c = &c[..ctx_dim];
        let (z, _) = m.forward(y, c).unwrap();
        let back = m.inverse(&z, c).unwrap();
        let err = back.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "round trip error {}", err);
    }
}
