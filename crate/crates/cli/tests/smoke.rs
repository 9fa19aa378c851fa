use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autm_cli::config::RunFile;
use autm_cli::EXIT_CODES;
use tempfile::TempDir;

fn autm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn out_dir(tmp: &TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Trains a small 2-D model for a few epochs and returns its directory.
fn small_model(tmp: &TempDir) -> PathBuf {
    let dir = out_dir(tmp, "model");
    let o = autm(&["train", "--n", "400", "--epochs", "2", "--hidden", "8", "--seed", "3", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn help_lists_exit_codes() {
    let o = autm(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains(EXIT_CODES));
    for sub in ["train", "density-grid", "sample", "invert-bench", "universality", "gradcheck", "roundtrip"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
        let o = autm(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains("Exit codes:"));
    }
}

#[test]
fn train_with_zero_epochs_keeps_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "t");
    let o = autm(&["train", "--dataset", "toy:two_gaussians", "--epochs", "0", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(dir.join("init.json")), read(dir.join("model.json")));
    assert_eq!(read(dir.join("history.csv")), "epoch,train_nll,val_nll\n");
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["epochs"], 0);
    assert_eq!(manifest["config"]["dataset"], "toy:two_gaussians");
    assert!(manifest["autm_version"].is_string());
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let dir = out_dir(&tmp, name);
        let o = autm(&["train", "--n", "300", "--epochs", "3", "--hidden", "8", "--seed", "5", "--out", s(&dir)]);
        assert_eq!(code(&o), 0);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["history.csv", "model.json", "manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let history = read(a.join("history.csv"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn gradcheck_seed_7_passes() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "g");
    let o = autm(&["gradcheck", "--seed", "7", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
    let csv = read(dir.join("gradcheck.csv"));
    assert_eq!(csv.lines().next(), Some("suite,cases,entries,max_rel_error"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn gradcheck_with_impossible_threshold_exits_6() {
    let tmp = TempDir::new().unwrap();
    let o = autm(&["gradcheck", "--threshold", "1e-30", "--out", s(&out_dir(&tmp, "g"))]);
    assert_eq!(code(&o), 6);
}

#[test]
fn universality_affine_slope_near_one() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "u");
    let args = [
        "universality", "--target", "affine", "--alpha", "2", "--beta", "1", "--s", "0.5,0.333,0.25,0.2", "--out",
        s(&dir),
    ];
    let o = autm(&args);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let slope: f64 = text
        .split("fitted slope b = ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .expect("slope printed");
    assert!((0.9..=1.1).contains(&slope), "slope {slope}");
    let csv = read(dir.join("universality.csv"));
    assert_eq!(csv.lines().next(), Some("s,1/s,sup_error,log_error"));
    assert_eq!(csv.lines().count(), 5);

    let again = out_dir(&tmp, "u2");
    let mut args2 = args;
    args2[args2.len() - 1] = s(&again);
    assert_eq!(code(&autm(&args2)), 0);
    assert_eq!(csv, read(again.join("universality.csv")));
}

#[test]
fn invert_bench_writes_report() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "b");
    let o = autm(&["invert-bench", "--n-inputs", "100", "--out", s(&dir)]);
    assert_eq!(code(&o), 0);
    let csv = read(dir.join("bench.csv"));
    assert_eq!(csv.lines().next(), Some("tolerance,method,mean_steps,failures"));
    assert_eq!(csv.lines().count(), 9);
    assert!(stdout(&o).contains("0.5"), "coefficients are printed");

    let o = autm(&["invert-bench", "--params", "1,2", "--out", s(&dir)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn density_grid_and_sample_from_a_trained_model() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(&tmp).join("model.json");

    let grid = out_dir(&tmp, "grid");
    let o = autm(&["density-grid", "--model", s(&model), "--points", "11", "--lo", "-3", "--hi", "3", "--out", s(&grid)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(grid.join("density_grid.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,y,log_density"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 121);
    assert_eq!(&rows[0][..2], &[-3.0, -3.0]);
    assert!(rows.iter().filter(|r| r[2].is_finite()).count() > 100);

    let smp = out_dir(&tmp, "smp");
    let o = autm(&["sample", "--model", s(&model), "--n", "50", "--seed", "2", "--out", s(&smp)]);
    assert_eq!(code(&o), 0);
    let csv = read(smp.join("samples.csv"));
    assert_eq!(csv.lines().next(), Some("x0,x1"));
    assert!(csv.lines().count() > 45);
    let smp2 = out_dir(&tmp, "smp2");
    autm(&["sample", "--model", s(&model), "--n", "50", "--seed", "2", "--out", s(&smp2)]);
    assert_eq!(csv, read(smp2.join("samples.csv")));
}

#[test]
fn roundtrip_on_fresh_and_trained_models() {
    let tmp = TempDir::new().unwrap();
    let o = autm(&["roundtrip", "--n", "50", "--out", s(&out_dir(&tmp, "r1"))]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let model = small_model(&tmp).join("model.json");
    let dir = out_dir(&tmp, "r2");
    let o = autm(&["roundtrip", "--model", s(&model), "--n", "50", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(read(dir.join("roundtrip.csv")).lines().next(), Some("index,max_abs_error"));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    let out = out_dir(&tmp, "from-file");
    fs::write(
        &cfg,
        format!(
            "seed = 11\nout = {:?}\n[data]\nn = 300\n[model]\nlayers = 2\nhidden = [6]\n[train]\nepochs = 5\n",
            s(&out)
        ),
    )
    .unwrap();
    let o = autm(&["train", "--config", s(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert_eq!(manifest["config"]["model"]["layers"], 2);
    assert_eq!(manifest["config"]["n"], 300);
}

#[test]
fn csv_dataset_infers_dimension() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d.csv");
    let mut text = String::from("a,b,c\n");
    for i in 0..60 {
        let t = i as f64 / 10.0;
        text.push_str(&format!("{},{},{}\n", t.sin(), t.cos() + 0.1 * t, (i % 7) as f64));
    }
    fs::write(&data, text).unwrap();
    let dir = out_dir(&tmp, "csv");
    let dataset = format!("csv:{}", s(&data));
    let o = autm(&["train", "--dataset", &dataset, "--epochs", "1", "--hidden", "6", "--out", s(&dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["model"]["dim"], 3);
}

#[test]
fn error_classes_map_to_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "e");
    assert_eq!(code(&autm(&["train", "--bogus"])), 2);
    assert_eq!(code(&autm(&["frobnicate"])), 2);
    let o = autm(&["train", "--layers", "0", "--lr", "-1", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert_eq!(code(&autm(&["train", "--dim", "3", "--epochs", "0", "--out", s(&out)])), 3);
    assert_eq!(code(&autm(&["universality", "--alpha", "-2", "--out", s(&out)])), 3);
    assert_eq!(
        code(&autm(&["sample", "--model", s(&tmp.path().join("missing.json")), "--out", s(&out)])),
        4
    );
    let missing = format!("csv:{}", s(&tmp.path().join("missing.csv")));
    assert_eq!(code(&autm(&["train", "--dataset", &missing, "--out", s(&out)])), 4);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    assert_eq!(code(&autm(&["train", "--config", s(&bad), "--out", s(&out)])), 3);
}

#[test]
fn presets_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let expected = [
        ("power", 6, 10, 240, 450, 256),
        ("gas", 8, 10, 320, 1000, 256),
        ("hepmass", 21, 10, 840, 500, 256),
        ("miniboone", 43, 5, 430, 1000, 256),
        ("bsds300", 63, 10, 2520, 1000, 128),
    ];
    for (name, dim, layers, width, epochs, batch) in expected {
        let f = RunFile::load(&dir.join(format!("{name}.toml"))).unwrap();
        let (spec, explicit) = f.model_spec().unwrap();
        assert!(explicit);
        assert!(spec.problems().is_empty(), "{name}: {:?}", spec.problems());
        assert_eq!((spec.dim, spec.layers, spec.hidden[0]), (dim, layers, width), "{name}");
        let t = f.train.unwrap();
        assert!(t.problems().is_empty());
        assert_eq!((t.epochs, t.batch_size, t.learning_rate, t.lr_decay), (epochs, batch, 0.01, 0.5), "{name}");
    }
}
