use std::fs;
use std::path::Path;

use episdf::params::ParamSet;
use episdf::scenegen::{generate_bundle, SceneBundle, SceneSpec};
use episdf::trainer::{init_params, train, train_step, TrainConfig, TrainState};

fn bundle() -> SceneBundle {
    generate_bundle(&SceneSpec {
        width: 32,
        height: 32,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn small_config(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("rays_per_batch", "50"),
        ("n_coarse", "8"),
        ("n_fine", "8"),
        ("volume_resolution", "10"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.iterations = iterations;
    cfg
}

fn run(bundle: &SceneBundle, cfg: &TrainConfig, dir: &Path) {
    train(bundle, cfg, TrainState::new(cfg).unwrap(), Some(dir), |_| {}).unwrap();
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn identical_runs_are_bit_identical() {
    let b = bundle();
    let cfg = small_config(3);
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = (tmp.path().join("x"), tmp.path().join("y"));
    run(&b, &cfg, &x);
    run(&b, &cfg, &y);
    for f in ["checkpoint.epis", "optimizer.epis", "metrics.csv", "config.txt"] {
        assert_eq!(read(&x, f), read(&y, f), "{f}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let b = bundle();
    let tmp = tempfile::tempdir().unwrap();
    let (whole, split) = (tmp.path().join("whole"), tmp.path().join("split"));
    run(&b, &small_config(4), &whole);
    run(&b, &small_config(2), &split);
    let cfg = small_config(4);
    let state = TrainState::load(&cfg, &split).unwrap();
    assert_eq!(state.iteration, 2);
    train(&b, &cfg, state, Some(&split), |_| {}).unwrap();
    for f in ["checkpoint.epis", "optimizer.epis", "metrics.csv"] {
        assert_eq!(read(&whole, f), read(&split, f), "{f}");
    }
}

#[test]
fn first_step_reaches_every_parameter_group() {
    let b = bundle();
    let cfg = small_config(1);
    let params = init_params(&cfg).unwrap();
    let step = train_step(&b, &cfg, &params, 0).unwrap();
    let names = params.named();
    assert_eq!(names.len(), step.grads.len());
    for ((name, _), g) in names.iter().zip(&step.grads) {
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        assert!(g.iter().any(|&v| v != 0.0), "{name} got no gradient");
    }
}

#[test]
fn zero_iterations_saves_the_initial_model() {
    let b = bundle();
    let cfg = small_config(0);
    let tmp = tempfile::tempdir().unwrap();
    run(&b, &cfg, tmp.path());
    let state = TrainState::load(&cfg, tmp.path()).unwrap();
    assert_eq!(state.iteration, 0);
    let init = init_params(&cfg).unwrap();
    for ((n, a), (_, b)) in init.named().iter().zip(state.params.named().iter()) {
        assert_eq!(a.values(), b.values(), "{n}");
    }
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, "iter,L_color,L_eik,L_sparse,L_global,L_local,total\n");
}

#[test]
fn metrics_rows_are_complete() {
    let b = bundle();
    let cfg = small_config(3);
    let tmp = tempfile::tempdir().unwrap();
    run(&b, &cfg, tmp.path());
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0].parse::<usize>().unwrap(), i);
        let v: Vec<f64> = cols[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
        let w = &cfg.weights;
        let total = v[0] + w.lambda1 * v[1] + w.lambda2 * v[2] + w.lambda3 * v[3] + w.lambda4 * v[4];
        assert!((total - v[5]).abs() <= 1e-12 * total.abs().max(1.0));
    }
    let echoed = TrainConfig::parse(
        &fs::read_to_string(tmp.path().join("config.txt")).unwrap(),
        "config.txt",
    );
    assert_eq!(echoed.unwrap(), cfg);
}

#[test]
fn single_view_bundle_is_rejected() {
    let mut b = bundle();
    b.views.truncate(1);
    let cfg = small_config(1);
    assert!(train(&b, &cfg, TrainState::new(&cfg).unwrap(), None, |_| {}).is_err());
}
