//! The four subcommands. Each writes its tables into the output directory
//! and returns the command-specific part of the JSON summary.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use covtune::assimilation::{run_iterative, AssimilationProblem, Method, ObservationOperator, TuningConfig};
use covtune::obs::{row_count_histogram, write_h_csv};
use covtune::spd::CovarianceMatrix;
use covtune::tracker::track;
use covtune::twin::{run_dynamic_chain, shallow_water_truth, StaticExperiment, Stats};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{write_rows, DynamicRow, ScalarRow, StaticRow};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Scalar,
    GenH,
    Static,
    Dynamic,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Scalar => "scalar",
            Command::GenH => "gen-h",
            Command::Static => "static",
            Command::Dynamic => "dynamic",
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    match cmd {
        Command::Scalar => scalar(cfg, out),
        Command::GenH => gen_h(cfg, out),
        Command::Static => static_twin(cfg, out),
        Command::Dynamic => dynamic(cfg, out),
    }
}

/// Assumed and exact variances of the scalar naive, CUTE and PUB loops,
/// iterations `0 ..= n`.
pub fn scalar_rows(cfg: &RunConfig) -> Result<Vec<ScalarRow>, CliError> {
    let s = &cfg.scalar;
    for (name, v) in [("b_assumed", s.b_assumed), ("b_exact", s.b_exact), ("r", s.r)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Config(format!("scalar.{name} must be positive, got {v}")));
        }
    }
    if !s.h.is_finite() {
        return Err(CliError::Config(format!("scalar.h must be finite, got {}", s.h)));
    }
    let h = ObservationOperator::new(DMatrix::from_element(1, 1, s.h))?;
    let r = CovarianceMatrix::scaled_identity(1, s.r);
    let problem = AssimilationProblem::new(
        DVector::zeros(1),
        DVector::zeros(1),
        CovarianceMatrix::scaled_identity(1, s.b_assumed),
        r.clone(),
        h.clone(),
    )?;
    let mut rows = Vec::new();
    for method in [Method::Naive, Method::Cute, Method::Pub] {
        let run = run_iterative(&problem, &TuningConfig::new(method, s.alpha, s.iterations)?)?;
        let exact = track(&run, &CovarianceMatrix::scaled_identity(1, s.b_exact), &r, &h)?;
        let assumed = std::iter::once(&run.initial).chain(&run.states);
        for (iter, (a, (e, _))) in assumed.zip(exact.history()).enumerate() {
            rows.push(ScalarRow {
                iter,
                method: method.name().to_string(),
                assumed_var: a.background_cov.matrix()[(0, 0)],
                exact_var: e.matrix()[(0, 0)],
            });
        }
    }
    Ok(rows)
}

fn scalar(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let rows = scalar_rows(cfg)?;
    write_rows(&rows, create(out, "scalar.csv")?)?;
    let last = |m: &str| rows.iter().filter(|r| r.method == m).last().cloned();
    let finals: Vec<Value> = ["naive", "cute", "pub"]
        .iter()
        .filter_map(|m| last(m))
        .map(|r| json!({"method": r.method, "iter": r.iter, "assumed_var": r.assumed_var, "exact_var": r.exact_var}))
        .collect();
    Ok(json!({ "tables": ["scalar.csv"], "final": finals }))
}

fn gen_h(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let h = cfg.operator()?;
    write_h_csv(&h, create(out, "operator.csv")?)?;
    let hist = row_count_histogram(&h);
    println!("row sums (entries per observation -> observations):");
    for (k, n) in &hist {
        println!("  {k:>3} -> {n}");
    }
    let hist_json: serde_json::Map<String, Value> = hist.iter().map(|(k, n)| (k.to_string(), json!(n))).collect();
    Ok(json!({
        "tables": ["operator.csv"],
        "obs_dim": h.obs_dim(),
        "state_dim": h.state_dim(),
        "row_sum_histogram": hist_json,
    }))
}

fn stats(s: &Stats) -> Value {
    json!({"mean": s.mean, "std": s.std})
}

fn static_twin(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let config = cfg.static_config()?;
    let truth = shallow_water_truth(&cfg.truth()?, &config.window)?;
    let experiment = StaticExperiment::prepare(config, truth, cfg.operator()?)?;
    let summary = experiment.run_monte_carlo()?;

    let mut tables = Vec::new();
    let mut methods = Vec::new();
    for m in &summary.methods {
        let rows: Vec<StaticRow> = m
            .iterations
            .iter()
            .map(|it| StaticRow {
                iter: it.iteration,
                mean_err: it.error.mean,
                std_err: it.error.std,
                mean_innov: it.innovation,
                mean_trace_ba: it.trace_assumed,
            })
            .collect();
        let name = format!("static_{}.csv", m.method.name());
        write_rows(&rows, create(out, &name)?)?;
        tables.push(name);
        let last = m.last();
        methods.push(json!({
            "method": m.method.name(),
            "iterations": m.iterations.len(),
            "initial_mismatch": summary.initial_mismatch,
            "final_mismatch": last.mismatch,
            "initial_airm": summary.initial_airm,
            "final_airm": last.airm,
            "final_error": stats(&last.error),
            "final_trace_assumed": last.trace_assumed,
            "final_trace_exact": last.trace_exact,
        }));
    }
    Ok(json!({
        "tables": tables,
        "trials": summary.trials,
        "initial_mismatch": summary.initial_mismatch,
        "initial_airm": summary.initial_airm,
        "background_error": stats(&summary.background_error),
        "background_innovation": summary.background_innovation,
        "three_dvar_error": stats(&summary.baseline_error),
        "exact_b_error": stats(&summary.optimal_error),
        "methods": methods,
    }))
}

fn dynamic(cfg: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let config = cfg.dynamic_config()?;
    let placement = config.placement;
    let cycles = run_dynamic_chain(config, cfg.operator()?)?;
    let rows: Vec<DynamicRow> = cycles
        .iter()
        .map(|c| DynamicRow {
            cycle: c.cycle,
            time: c.time,
            mean_err_3dvar: c.three_dvar.mean,
            mean_err_cute: c.cute.mean,
            mean_err_pub: c.publ.mean,
        })
        .collect();
    write_rows(&rows, create(out, "dynamic.csv")?)?;
    let per_cycle: Vec<Value> = cycles
        .iter()
        .map(|c| {
            json!({
                "cycle": c.cycle,
                "time": c.time,
                "three_dvar": stats(&c.three_dvar),
                "cute": stats(&c.cute),
                "pub": stats(&c.publ),
            })
        })
        .collect();
    Ok(json!({
        "tables": ["dynamic.csv"],
        "placement": placement.to_string(),
        "cycles": per_cycle,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_default_reproduces_closed_forms() {
        let rows = scalar_rows(&RunConfig::default()).unwrap();
        assert_eq!(rows.len(), 33);
        let naive10 = rows.iter().find(|r| r.method == "naive" && r.iter == 10).unwrap();
        assert!((naive10.assumed_var - 3.0 / 31.0).abs() <= 1e-12 * 3.0 / 31.0);
        for r in rows.iter().filter(|r| r.method == "cute") {
            assert!((r.assumed_var - r.exact_var).abs() <= 1e-12 * r.exact_var);
        }
    }

    #[test]
    fn scalar_misspecified_shape() {
        let mut cfg = RunConfig::default();
        cfg.scalar.b_assumed = 2.0;
        let rows = scalar_rows(&cfg).unwrap();
        assert!(rows.iter().all(|r| r.exact_var > 0.3));
        let naive10 = rows.iter().find(|r| r.method == "naive" && r.iter == 10).unwrap();
        assert!(naive10.assumed_var < 0.1);
    }

    #[test]
    fn scalar_rejects_non_positive_variances() {
        let mut cfg = RunConfig::default();
        cfg.scalar.r = 0.0;
        assert!(matches!(scalar_rows(&cfg), Err(CliError::Config(_))));
    }
}
