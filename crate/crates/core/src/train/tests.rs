use super::*;
use crate::baselines::{GmmConfig, GmmModel};
use crate::data::{split_folds, synth_generate, SynthConfig};
use crate::model::Family;

/// Fits a single location to scalar data under squared error.
struct Location {
    store: ParamStore,
}

impl Location {
    fn new(init: f64, trainable: bool) -> Self {
        let mut store = ParamStore::new();
        store.add("mu", Matrix::filled(1, 1, init), trainable).unwrap();
        Self { store }
    }

    fn mu(&self) -> f64 {
        self.store.get("mu").unwrap().as_slice()[0]
    }
}

impl Trainable for Location {
    type Data = Matrix;

    fn data_len(data: &Matrix) -> usize {
        data.rows()
    }

    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }

    fn loss_graph(
        &self,
        tape: &mut Tape,
        stores: &[&ParamStore],
        data: &Matrix,
        rows: &[usize],
        _fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let x = tape.constant(data.select_rows(rows));
        let mu = tape.param(stores[0], stores[0].id("mu").unwrap());
        let mu = tape.broadcast_rows(mu, rows.len());
        let d = tape.sub(x, mu);
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    }
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_vec(v.len(), 1, v.to_vec())
}

fn standard_gmm() -> GmmModel {
    let mut m = GmmModel::new(GmmConfig::new(1, 1, 0), 0).unwrap();
    let store = m.params_mut();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape();
        store.set_by_name(&n, Matrix::zeros(shape.0, shape.1)).unwrap();
    }
    m
}

#[test]
fn nll_of_standard_normal_at_zero() {
    let m = standard_gmm();
    let v = nll_loss(&m, &column(&[0.0]), &Matrix::zeros(1, 0)).unwrap();
    assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
}

#[test]
fn nll_is_mean_of_pointwise() {
    let m = standard_gmm();
    let ys = [0.0, 0.5, -1.2, 2.0, 0.3];
    let batch = nll_loss(&m, &column(&ys), &Matrix::zeros(1, 0)).unwrap();
    let pointwise: f64 =
        ys.iter().map(|&y| nll_loss(&m, &column(&[y]), &Matrix::zeros(1, 0)).unwrap()).sum::<f64>() / ys.len() as f64;
    assert!((batch - pointwise).abs() < 1e-12);
    let doubled: Vec<f64> = ys.iter().chain(ys.iter()).copied().collect();
    let twice = nll_loss(&m, &column(&doubled), &Matrix::zeros(1, 0)).unwrap();
    assert!((batch - twice).abs() < 1e-12);
    assert!(matches!(nll_loss(&m, &Matrix::zeros(0, 1), &Matrix::zeros(1, 0)), Err(Error::EmptyBatch)));
}

#[test]
fn frozen_parameters_stop_after_patience() {
    let mut m = Location::new(0.3, false);
    let data = column(&[1.0, 2.0, 3.0]);
    let cfg = FitConfig { patience: 1, max_epochs: 50, batch_size: 2, ..FitConfig::default() };
    let rep = fit(&mut m, &data, &data, &cfg, 0).unwrap();
    assert_eq!(rep.epochs_run, 2);
    assert_eq!(rep.best_epoch, 1);
    assert_eq!(m.mu(), 0.3);
}

#[test]
fn fit_restores_best_epoch() {
    let mut m = Location::new(-3.0, true);
    let train = column(&[1.0, 2.0, 3.0, 2.5, 1.5]);
    let valid = column(&[2.0, 2.1]);
    let cfg = FitConfig { lr: 0.05, batch_size: 2, max_epochs: 300, patience: 5, grad_clip: 0.0 };
    let rep = fit(&mut m, &train, &valid, &cfg, 7).unwrap();
    assert!(rep.final_train_loss < rep.initial_train_loss);
    let restored = eval_loss(&m, &valid).unwrap();
    assert!((restored - rep.best_valid_loss).abs() < 1e-9);
    assert_eq!(rep.valid_loss[rep.best_epoch - 1], rep.best_valid_loss);
    assert!(rep.valid_loss.iter().all(|&v| v >= rep.best_valid_loss));
    assert!((m.mu() - 2.0).abs() < 0.2, "{}", m.mu());
}

#[test]
fn fit_is_deterministic_in_seed() {
    let train = column(&[1.0, 2.0, 3.0, 2.5, 1.5, 0.2, 4.0]);
    let cfg = FitConfig { lr: 0.05, batch_size: 3, max_epochs: 20, patience: 20, grad_clip: 1.0 };
    let run = |seed| {
        let mut m = Location::new(0.0, true);
        let r = fit(&mut m, &train, &train, &cfg, seed).unwrap();
        (m.mu(), r.train_loss)
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).1, run(4).1);
}

#[test]
fn invalid_fit_config() {
    let mut m = Location::new(0.0, true);
    let d = column(&[1.0]);
    for cfg in [
        FitConfig { lr: 0.0, ..FitConfig::default() },
        FitConfig { batch_size: 0, ..FitConfig::default() },
        FitConfig { patience: 0, ..FitConfig::default() },
    ] {
        assert!(matches!(fit(&mut m, &d, &d, &cfg, 0), Err(Error::Config(_))));
    }
    assert!(matches!(fit(&mut m, &Matrix::zeros(0, 1), &d, &FitConfig::default(), 0), Err(Error::EmptyBatch)));
}

fn small_data() -> AnnotationDataset {
    let cfg = SynthConfig { num_texts: 40, num_annotators: 10, annotations_per_text: 4, ..SynthConfig::default() };
    synth_generate(&cfg).unwrap().0
}

fn quick_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.fit.max_epochs = 3;
    c.fit.batch_size = 64;
    c.model.num_layers = 2;
    c.model.hidden_features = 8;
    c.folds = 2;
    c
}

#[test]
fn train_round_reports_counts_and_is_reproducible() {
    let ds = small_data();
    let folds = split_folds(&ds, 2, 0).unwrap();
    let cfg = quick_config();
    let (m1, r1) = train_model(&ds, &folds, &cfg).unwrap();
    let (m2, r2) = train_model(&ds, &folds, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(m1.checksum(), m2.checksum());
    assert_eq!(r1.num_train + r1.num_valid + r1.num_test, ds.len());
    assert!(r1.test_nll.unwrap().is_finite());
}

#[test]
fn experiment_bookkeeping() {
    let ds = small_data();
    let cfg = ExperimentConfig {
        dataset: "toy".into(),
        base: quick_config(),
        cells: vec![
            CellSpec { family: Family::Maf, personalization: ProfileKind::TxtBaseline },
            CellSpec { family: Family::Gmm, personalization: ProfileKind::OneHot },
        ],
        folds: 2,
        seeds: vec![0, 1],
    };
    let a = run_experiment(&ds, &cfg, 1).unwrap();
    let b = run_experiment(&ds, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 8);
    assert_eq!(a.cells.len(), 2);
    for c in &a.cells {
        assert_eq!(c.completed + c.failed, 4);
    }
    assert!(a.rows.iter().all(|r| r.dataset == "toy"));
}

#[test]
fn overrides() {
    let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
    let (k, val) = parse_override("model.num_layers=7").unwrap();
    apply_override(&mut v, &k, val).unwrap();
    let (k, val) = parse_override("profile.kind=onehot").unwrap();
    assert_eq!(val, serde_json::json!("onehot"));
    apply_override(&mut v, &k, val).unwrap();
    let (k, val) = parse_override("lr=0.01").unwrap();
    apply_override(&mut v, &k, val).unwrap();
    let c: TrainConfig = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(c.model.num_layers, 7);
    assert_eq!(c.profile.kind, ProfileKind::OneHot);
    assert_eq!(c.fit.lr, 0.01);
    assert!(matches!(apply_override(&mut v, "model.nope", serde_json::json!(1)), Err(Error::Config(_))));
    assert!(matches!(parse_override("novalue"), Err(Error::Config(_))));
}

#[test]
fn grid_points_enumerate_product() {
    let mut spec = GridSpec { base: quick_config(), ..GridSpec::default() };
    assert_eq!(grid_points(&spec).unwrap().len(), 1);
    spec.axes.insert("lr".into(), vec![serde_json::json!(0.1), serde_json::json!(0.01)]);
    spec.axes.insert("model.hidden_features".into(), vec![serde_json::json!(4), serde_json::json!(8)]);
    let pts = grid_points(&spec).unwrap();
    assert_eq!(pts.len(), 4);
    let combos: Vec<(f64, usize)> = pts.iter().map(|(_, c)| (c.fit.lr, c.model.hidden_features)).collect();
    assert_eq!(combos, vec![(0.1, 4), (0.1, 8), (0.01, 4), (0.01, 8)]);
    spec.axes.insert("bogus".into(), vec![serde_json::json!(1)]);
    assert!(matches!(grid_points(&spec), Err(Error::Config(_))));
}

#[test]
fn grid_selects_lowest_validation_nll() {
    let ds = small_data();
    let folds = split_folds(&ds, 2, 0).unwrap();
    let mut spec = GridSpec { base: quick_config(), ..GridSpec::default() };
    // A vanishing learning rate leaves the model at its initialization; the other point trains.
    spec.base.fit.max_epochs = 15;
    spec.axes.insert("lr".into(), vec![serde_json::json!(1e-12), serde_json::json!(1e-2)]);
    let res = grid_search(&ds, &folds, &spec, 2).unwrap();
    assert_eq!(res.trace.len(), 2);
    assert_eq!(res.best.len(), 1);
    let best = &res.best[0];
    let min = res.trace.iter().filter_map(|r| r.valid_nll).fold(f64::INFINITY, f64::min);
    assert_eq!(best.valid_nll, min);
    assert_eq!(best.config.fit.lr, 1e-2);
}
