use emoflow::baselines::{DeterministicHead, GmmConfig, GmmModel, HeadConfig, HeadTask};
use emoflow::compute::{finite_diff_check, finite_diff_check_multi, rng_from_seed, ForwardCtx, Matrix, Tape};
use emoflow::data::{synth_generate, SynthConfig};
use emoflow::density::nll_graph;
use emoflow::flows::{build_flow, FlowConfig, FlowKind};
use emoflow::model::{ModelSpec, PersonalizedModel};
use emoflow::personalize::{AnnotatorRegistry, ProfileConfig, ProfileKind, ProfileModule};
use emoflow::DensityModel;
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
}

fn check_density<M: DensityModel>(model: &M, y: &Matrix, ctx: &Matrix, train_mode: bool) -> f64 {
    finite_diff_check(
        |tape, store| {
            let yv = tape.constant(y.clone());
            let cv = tape.constant(ctx.clone());
            let mut fctx = if train_mode { ForwardCtx::train(5) } else { ForwardCtx::eval() };
            nll_graph(model, tape, store, yv, cv, &mut fctx)
        },
        model.params(),
        EPS,
    )
    .unwrap()
}

#[test]
fn flow_nll_gradients() {
    for kind in [FlowKind::Nice, FlowKind::Realnvp, FlowKind::Maf] {
        for (dim, ctx_dim) in [(2, 0), (3, 2)] {
            for bn in [false, true] {
                let mut cfg = FlowConfig::new(kind, dim, ctx_dim);
                cfg.num_layers = 2;
                cfg.hidden_features = 6;
                cfg.batch_norm_between = bn;
                cfg.batch_norm_within = bn && kind != FlowKind::Maf;
                let mut flow = build_flow(cfg, 11).unwrap();
                flow.params_mut().jitter(12, 0.3);
                let y = uniform(8, dim, -1.0, 1.0, 13);
                let c = uniform(8, ctx_dim, -1.0, 1.0, 14);
                let err = check_density(&flow, &y, &c, bn);
                assert!(err < TOL, "{kind:?} dim={dim} bn={bn}: {err}");
            }
        }
    }
}

#[test]
fn one_dimensional_maf_gradient() {
    let mut flow = build_flow(FlowConfig::new(FlowKind::Maf, 1, 3), 1).unwrap();
    flow.params_mut().jitter(2, 0.3);
    let err = check_density(&flow, &uniform(8, 1, -1.0, 1.0, 3), &uniform(8, 3, -1.0, 1.0, 4), false);
    assert!(err < TOL, "{err}");
}

#[test]
fn gmm_nll_gradient() {
    for (m, d, c) in [(1, 1, 0), (3, 2, 0), (4, 2, 3)] {
        let mut g = GmmModel::new(GmmConfig::new(m, d, c), 21).unwrap();
        g.params_mut().jitter(22, 0.2);
        let err = check_density(&g, &uniform(8, d, 0.0, 1.0, 23), &uniform(8, c, -1.0, 1.0, 24), false);
        assert!(err < TOL, "M={m} D={d} C={c}: {err}");
    }
}

#[test]
fn head_loss_gradient() {
    for task in [HeadTask::Classification, HeadTask::Regression] {
        let mut cfg = HeadConfig::new(4, 2, task);
        cfg.extra_dim = 3;
        let head = DeterministicHead::new(cfg, 31).unwrap();
        let x = uniform(8, 4, -1.0, 1.0, 32);
        let e = uniform(8, 3, 0.0, 1.0, 33);
        let t = uniform(8, 2, 0.0, 1.0, 34).map(|v| if task == HeadTask::Classification { v.round() } else { v });
        let err = finite_diff_check(
            |tape, store| {
                let (xv, ev, tv) = (tape.constant(x.clone()), tape.constant(e.clone()), tape.constant(t.clone()));
                head.loss_graph(tape, store, xv, Some(ev), tv, &mut ForwardCtx::eval())
            },
            head.params(),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{task:?}: {err}");
    }
}

fn medium_model(family_kind: FlowKind) -> (PersonalizedModel, Matrix, Matrix, Vec<usize>) {
    let cfg = SynthConfig { num_texts: 10, num_annotators: 12, annotations_per_text: 3, embedding_dim: 4, ..SynthConfig::default() };
    let ds = synth_generate(&cfg).unwrap().0;
    let rows: Vec<usize> = (0..ds.len()).collect();
    let reg = AnnotatorRegistry::from_rows(&ds, &rows).unwrap();
    let mut pc = ProfileConfig::new(ProfileKind::HubiMedium);
    pc.embedding_dim = 5;
    let profile = ProfileModule::new(pc, reg, None, ds.dim(), 41).unwrap();
    let mut spec = ModelSpec::default();
    spec.family = match family_kind {
        FlowKind::Nice => emoflow::model::Family::Nice,
        FlowKind::Realnvp => emoflow::model::Family::Realnvp,
        FlowKind::Maf => emoflow::model::Family::Maf,
    };
    spec.num_layers = 2;
    spec.hidden_features = 6;
    let mut m = PersonalizedModel::new(&spec, profile, ds.dim(), ds.embedding_dim, 42).unwrap();
    m.density_mut().params_mut().jitter(43, 0.3);
    let batch: Vec<usize> = (0..8).collect();
    let y = ds.label_matrix(&batch);
    let text = ds.embedding_matrix(&batch);
    let idx = batch.iter().map(|&i| m.profile().registry().index(&ds.records[i].annotator_id)).collect();
    (m, y, text, idx)
}

#[test]
fn hubi_medium_end_to_end_gradient() {
    for kind in [FlowKind::Realnvp, FlowKind::Maf] {
        let (m, y, text, idx) = medium_model(kind);
        let stores = vec![m.density().params().clone(), m.profile().params().clone()];
        let err = finite_diff_check_multi(
            |tape, s| {
                let (yv, tv) = (tape.constant(y.clone()), tape.constant(text.clone()));
                let lp = m.log_prob_graph(tape, &s[0], &s[1], yv, tv, &idx, &mut ForwardCtx::eval())?;
                let mean = tape.mean(lp);
                Ok(tape.neg(mean))
            },
            &stores,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{kind:?}: {err}");
    }
}

#[test]
fn hubi_medium_gradient_touches_only_batch_rows() {
    let (m, y, text, idx) = medium_model(FlowKind::Maf);
    let mut tape = Tape::new();
    let (yv, tv) = (tape.constant(y), tape.constant(text));
    let lp = m
        .log_prob_graph(&mut tape, m.density().params(), m.profile().params(), yv, tv, &idx, &mut ForwardCtx::eval())
        .unwrap();
    let loss = tape.mean(lp);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get("profile.embedding").unwrap();
    for r in 0..g.rows() {
        let touched = g.row(r).iter().any(|v| *v != 0.0);
        assert_eq!(touched, idx.contains(&r), "row {r}");
    }
}
