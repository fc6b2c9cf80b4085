use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covtune::obs::{generate_h, read_h_csv, BinomialSelectionSpec};
use covtune_cli::config::{RunConfig, KEYS};
use covtune_cli::output::{read_rows, write_rows, DynamicRow, ScalarRow, StaticRow};
use serde_json::Value;
use tempfile::TempDir;

fn covtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covtune")).args(args).output().expect("binary runs")
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn run_ok(args: &[&str]) {
    let out = covtune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn check_summary(dir: &Path, command: &str) -> Value {
    let s = summary(dir);
    assert_eq!(s["command"], command);
    let hash = s["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(s["seed"].is_u64());
    assert!(s["runtime_seconds"].as_f64().unwrap() >= 0.0);
    assert!(s["results"].is_object());
    let echoed = RunConfig::parse(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    let from_json: RunConfig = serde_json::from_value(s["config"].clone()).unwrap();
    assert_eq!(echoed, from_json);
    s
}

fn tmp_out(tmp: &TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

#[test]
fn help_lists_every_key() {
    let out = covtune(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, unit, _) in KEYS {
        assert!(text.contains(key), "missing {key}");
        assert!(text.contains(&format!("[{unit}]")));
    }
}

#[test]
fn shipped_scalar_configs() {
    let tmp = TempDir::new().unwrap();
    for cfg in ["scalar_perfect_prior.toml", "scalar_misspecified.toml"] {
        let dir = tmp_out(&tmp, cfg);
        run_ok(&["scalar", "--config", &shipped(cfg), "--out", dir.to_str().unwrap()]);
        check_summary(&dir, "scalar");
        let rows: Vec<ScalarRow> = read_rows(std::fs::File::open(dir.join("scalar.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 33);
        let naive10 = rows.iter().find(|r| r.method == "naive" && r.iter == 10).unwrap();
        if cfg == "scalar_perfect_prior.toml" {
            assert!((naive10.assumed_var - 3.0 / 31.0).abs() <= 1e-12 * 3.0 / 31.0);
            assert!(rows
                .iter()
                .filter(|r| r.method == "cute")
                .all(|r| (r.assumed_var - r.exact_var).abs() <= 1e-12 * r.exact_var));
        } else {
            assert!(naive10.assumed_var < 0.1);
            assert!(rows.iter().all(|r| r.exact_var > 0.3));
        }
    }
}

#[test]
fn gen_h_is_deterministic_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp_out(&tmp, "a"), tmp_out(&tmp, "b"), tmp_out(&tmp, "c"));
    run_ok(&["gen-h", "--config", &shipped("gen_h.toml"), "--out", a.to_str().unwrap()]);
    run_ok(&["gen-h", "--config", &shipped("gen_h.toml"), "--out", b.to_str().unwrap()]);
    run_ok(&["gen-h", "--config", &shipped("gen_h.toml"), "--seed", "7", "--out", c.to_str().unwrap()]);
    let read = |d: &Path| std::fs::read(d.join("operator.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let h = read_h_csv(read(&a).as_slice()).unwrap();
    assert_eq!(h, generate_h(&BinomialSelectionSpec::default()).unwrap());

    let s = check_summary(&a, "gen-h");
    let total: u64 = s["results"]["row_sum_histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 100);
}

#[test]
fn operator_file_matches_generated_operator() {
    let tmp = TempDir::new().unwrap();
    let h_dir = tmp_out(&tmp, "h");
    run_ok(&["gen-h", "--out", h_dir.to_str().unwrap()]);
    let cfg = tmp.path().join("file.toml");
    let body = format!(
        "[operator]\nkind = \"file\"\npath = \"{}\"\n[static]\ntrials = 4\n",
        h_dir.join("operator.csv").display()
    );
    std::fs::write(&cfg, body).unwrap();
    let (x, y) = (tmp_out(&tmp, "x"), tmp_out(&tmp, "y"));
    run_ok(&["static", "--config", cfg.to_str().unwrap(), "--out", x.to_str().unwrap()]);
    run_ok(&["static", "--trials", "4", "--out", y.to_str().unwrap()]);
    for t in ["static_cute.csv", "static_pub.csv"] {
        assert_eq!(std::fs::read(x.join(t)).unwrap(), std::fs::read(y.join(t)).unwrap());
    }
}

#[test]
fn shipped_static_configs() {
    let tmp = TempDir::new().unwrap();
    for cfg in ["static_state_independent.toml", "static_state_dependent.toml"] {
        let dir = tmp_out(&tmp, cfg);
        run_ok(&["static", "--config", &shipped(cfg), "--out", dir.to_str().unwrap()]);
        let s = check_summary(&dir, "static");
        assert_eq!(s["results"]["trials"], 200);
        for m in s["results"]["methods"].as_array().unwrap() {
            if m["method"] == "3dvar" {
                continue;
            }
            let (initial, last) = (m["initial_mismatch"].as_f64().unwrap(), m["final_mismatch"].as_f64().unwrap());
            assert!(last < initial, "{}: {last} >= {initial}", m["method"]);
        }
        for t in s["results"]["tables"].as_array().unwrap() {
            let path = dir.join(t.as_str().unwrap());
            let bytes = std::fs::read(&path).unwrap();
            let rows: Vec<StaticRow> = read_rows(bytes.as_slice()).unwrap();
            let mut again = Vec::new();
            write_rows(&rows, &mut again).unwrap();
            assert_eq!(again, bytes, "{} does not round-trip", path.display());
        }
    }
    let three_dvar: Vec<StaticRow> = read_rows(
        std::fs::File::open(tmp_out(&tmp, "static_state_independent.toml").join("static_3dvar.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(three_dvar.len(), 1);
}

fn small_chain(tmp: &TempDir, placement: &str) -> PathBuf {
    let cfg = tmp.path().join(format!("{placement}.toml"));
    std::fs::write(
        &cfg,
        format!(
            "[dynamic]\nplacement = \"{placement}\"\ncycles = 3\nfirst_analysis_steps = 400\ninterval_steps = 200\ntrials = 3\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn never_placement_duplicates_three_dvar() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_chain(&tmp, "never");
    let dir = tmp_out(&tmp, "never");
    run_ok(&["dynamic", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    check_summary(&dir, "dynamic");
    let rows: Vec<DynamicRow> = read_rows(std::fs::File::open(dir.join("dynamic.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.mean_err_3dvar, r.mean_err_cute);
        assert_eq!(r.mean_err_3dvar, r.mean_err_pub);
    }
}

#[test]
fn dynamic_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_chain(&tmp, "first-step-only");
    let (a, b, c) = (tmp_out(&tmp, "a"), tmp_out(&tmp, "b"), tmp_out(&tmp, "c"));
    run_ok(&["dynamic", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["dynamic", "--config", cfg.to_str().unwrap(), "--threads", "1", "--out", b.to_str().unwrap()]);
    run_ok(&["dynamic", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", c.to_str().unwrap()]);
    let read = |d: &Path| std::fs::read(d.join("dynamic.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn shipped_dynamic_configs_run() {
    let tmp = TempDir::new().unwrap();
    for cfg in ["dynamic_first_step.toml", "dynamic_every_step.toml"] {
        let dir = tmp_out(&tmp, cfg);
        run_ok(&["dynamic", "--config", &shipped(cfg), "--trials", "2", "--out", dir.to_str().unwrap()]);
        let s = check_summary(&dir, "dynamic");
        assert_eq!(s["config"]["dynamic"]["trials"], 2);
        assert_eq!(s["results"]["cycles"].as_array().unwrap().len(), 10);
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let write = |name: &str, body: &str| {
        let p = tmp.path().join(name);
        std::fs::write(&p, body).unwrap();
        p.display().to_string()
    };
    let out = tmp_out(&tmp, "o");
    let out = out.to_str().unwrap();

    let unknown = write("unknown.toml", "[static]\ntrails = 3\n");
    assert_eq!(covtune(&["static", "--config", &unknown, "--out", out]).status.code(), Some(2));

    let bad_alpha = write("alpha.toml", "[scalar]\nalpha = 2.0\n");
    assert_eq!(covtune(&["scalar", "--config", &bad_alpha, "--out", out]).status.code(), Some(2));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(covtune(&["scalar", "--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(2));

    let unstable = write("unstable.toml", "[grid]\ndt = 2.0\n[static]\ntrials = 2\n");
    let res = covtune(&["static", "--config", &unstable, "--out", out]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
