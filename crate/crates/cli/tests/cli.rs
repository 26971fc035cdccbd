use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn episdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_episdf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_scene(dir: &Path) {
    let out = episdf(&["gen-scene", "--out", path(dir), "--res", "32x32"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in {report}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        (
            "gen-scene",
            &[
                "--out",
                "--shape",
                "--views",
                "--res",
                "--seed",
                "--mono-alpha",
                "--mono-beta",
                "--mono-sigma",
            ],
        ),
        (
            "train",
            &[
                "--scene",
                "--config",
                "--out",
                "--iterations",
                "--learning-rate",
                "--seed",
                "--set",
                "--resume",
            ],
        ),
        ("render", &["--scene", "--checkpoint", "--config", "--out"]),
        ("extract-mesh", &["--scene", "--checkpoint", "--out", "--grid"]),
        (
            "eval-depth",
            &["--scene", "--checkpoint", "--depths", "--out", "--thresholds"],
        ),
        (
            "eval-chamfer",
            &["--mesh", "--reference", "--shape", "--samples", "--out"],
        ),
        ("grad-check", &["--module", "--seed"]),
    ];
    for (cmd, flags) in cases {
        let out = episdf(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        let text = stdout(&out);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_flag_is_usage_error_without_side_effects() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("bundle");
    let out = episdf(&["gen-scene", "--out", path(&dir), "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.exists());
}

#[test]
fn gen_scene_defaults_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&episdf(&["gen-scene", "--out", path(&a)])), 0);
    assert_eq!(code(&episdf(&["gen-scene", "--out", path(&b)])), 0);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 14);
    assert!(names.contains(&"cameras.txt".to_string()) && names.contains(&"bbox.txt".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn gen_scene_rejects_single_view() {
    let tmp = TempDir::new().unwrap();
    let out = episdf(&["gen-scene", "--out", path(&tmp.path().join("x")), "--views", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_scene_is_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = episdf(&[
        "train",
        "--scene",
        path(&tmp.path().join("nope")),
        "--out",
        path(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn zero_iterations_writes_initial_checkpoint_and_empty_mesh() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    small_scene(&scene);
    let run = tmp.path().join("run");
    let out = episdf(&[
        "train",
        "--scene",
        path(&scene),
        "--out",
        path(&run),
        "--iterations",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("iterations = 0"));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(run.join("config.txt").exists());

    let ckpt = run.join("checkpoint.epis");
    let mesh_dir = tmp.path().join("mesh");
    let out = episdf(&[
        "extract-mesh",
        "--scene",
        path(&scene),
        "--checkpoint",
        path(&ckpt),
        "--out",
        path(&mesh_dir),
        "--grid",
        "8",
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(fs::read_to_string(mesh_dir.join("mesh.obj"))
        .unwrap()
        .lines()
        .all(|l| !l.starts_with('f')));
}

#[test]
fn short_training_run_and_evaluation() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    small_scene(&scene);
    let cfg = tmp.path().join("train.cfg");
    fs::write(
        &cfg,
        "rays_per_batch = 50\nn_coarse = 8\nn_fine = 8\nvolume_resolution = 12\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = episdf(&[
        "train",
        "--scene",
        path(&scene),
        "--config",
        path(&cfg),
        "--out",
        path(&run),
        "--iterations",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("final iteration 1"));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("iterations = 2") && echoed.contains("rays_per_batch = 50"));

    let ckpt = run.join("checkpoint.epis");
    let renders = tmp.path().join("renders");
    let out = episdf(&[
        "render",
        "--scene",
        path(&scene),
        "--checkpoint",
        path(&ckpt),
        "--config",
        path(&cfg),
        "--out",
        path(&renders),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        for f in [
            format!("color_{i}.ppm"),
            format!("depth_{i}.pfm"),
            format!("acc_{i}.pfm"),
        ] {
            assert!(renders.join(&f).exists(), "{f}");
        }
    }
    let eval = tmp.path().join("eval");
    let out = episdf(&[
        "eval-depth",
        "--scene",
        path(&scene),
        "--depths",
        path(&renders),
        "--out",
        path(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(eval.join("depth_report.txt")).unwrap();
    assert!(report_value(&report, "abs_err") >= 0.0);

    // A different channel count cannot load this checkpoint.
    let other = tmp.path().join("other.cfg");
    fs::write(&other, "channels = 8\n").unwrap();
    let out = episdf(&[
        "eval-depth",
        "--scene",
        path(&scene),
        "--checkpoint",
        path(&ckpt),
        "--config",
        path(&other),
        "--out",
        path(&eval),
    ]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains('`'));
}

#[test]
fn eval_depth_of_ground_truth_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    small_scene(&scene);
    let before: Vec<_> = fs::read_dir(&scene).unwrap().map(|e| e.unwrap().path()).collect();
    let out_dir = tmp.path().join("eval");
    let out = episdf(&[
        "eval-depth",
        "--scene",
        path(&scene),
        "--depths",
        path(&scene),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("depth_report.txt")).unwrap();
    assert_eq!(report_value(&report, "abs_err"), 0.0);
    assert_eq!(report_value(&report, "rel_err"), 0.0);
    assert_eq!(report_value(&report, "pct_below_0.02"), 100.0);
    let after: Vec<_> = fs::read_dir(&scene).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(before.len(), after.len());
}

#[test]
fn eval_chamfer_self_and_analytic() {
    let tmp = TempDir::new().unwrap();
    let mesh = tmp.path().join("cube.obj");
    fs::write(
        &mesh,
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
         f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\nf 2 3 7\nf 2 7 6\nf 3 4 8\nf 3 8 7\nf 4 1 5\nf 4 5 8\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("eval");
    let out = episdf(&[
        "eval-chamfer",
        "--mesh",
        path(&mesh),
        "--reference",
        path(&mesh),
        "--samples",
        "4000",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("chamfer_report.txt")).unwrap();
    // Sampling noise bound: mean spacing of 4000 points over area 6.
    assert!(report_value(&report, "chamfer") < 0.05, "{report}");

    let out = episdf(&[
        "eval-chamfer",
        "--mesh",
        path(&mesh),
        "--shape",
        "sphere",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("chamfer_report.txt")).unwrap();
    assert!(report_value(&report, "chamfer") > 0.1);

    let out = episdf(&["eval-chamfer", "--mesh", path(&mesh), "--out", path(&out_dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn grad_check_modules_pass_and_are_deterministic() {
    for module in ["diffcore", "losses"] {
        let a = episdf(&["grad-check", "--module", module, "--seed", "3"]);
        let b = episdf(&["grad-check", "--module", module, "--seed", "3"]);
        assert_eq!(code(&a), 0, "{}", stdout(&a));
        assert_eq!(stdout(&a), stdout(&b));
        assert!(stdout(&a).contains("all ") && !stdout(&a).contains("FAIL"));
    }
}
