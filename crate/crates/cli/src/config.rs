//! TOML run configuration. Every key has a default; unknown keys are
//! rejected. The resolved configuration is written next to the outputs.

use std::path::PathBuf;

use covtune::assimilation::{Method, ObservationOperator};
use covtune::obs::{generate_h, read_h_csv, regular_h, BinomialSelectionSpec};
use covtune::shallow_water::{Cylinder, SwConfig, Window};
use covtune::spd::{CorrelationKernel, KernelKind};
use covtune::twin::{
    AssumedPrior, CorrelationModel, DynamicChainConfig, NoiseConfig, NoiseModel, Placement, StaticConfig,
    TruthConfig, SCENARIO_DT,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory.
    pub out: PathBuf,
    /// Monte-Carlo seed; trial `t` uses stream `t` of this seed.
    pub seed: u64,
    pub scalar: ScalarSection,
    pub grid: GridSection,
    pub cylinder: CylinderSection,
    pub window: WindowSection,
    pub operator: OperatorSection,
    #[serde(rename = "static")]
    pub static_twin: StaticSection,
    pub dynamic: DynamicSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("covtune-out"),
            seed: 1,
            scalar: ScalarSection::default(),
            grid: GridSection::default(),
            cylinder: CylinderSection::default(),
            window: WindowSection::default(),
            operator: OperatorSection::default(),
            static_twin: StaticSection::default(),
            dynamic: DynamicSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarSection {
    pub b_assumed: f64,
    pub b_exact: f64,
    pub r: f64,
    pub h: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for ScalarSection {
    fn default() -> Self {
        Self {
            b_assumed: 3.0,
            b_exact: 3.0,
            r: 1.0,
            h: 1.0,
            alpha: 1.0,
            iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub g: f64,
    pub damping: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let sw = SwConfig::default();
        Self {
            nx: sw.nx,
            ny: sw.ny,
            dx: sw.dx,
            dy: sw.dy,
            dt: SCENARIO_DT,
            g: sw.g,
            damping: sw.b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylinderSection {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub base_height: f64,
    pub bump: f64,
}

impl Default for CylinderSection {
    fn default() -> Self {
        let c = Cylinder::default();
        Self {
            center_x: c.center[0],
            center_y: c.center[1],
            radius: c.radius,
            base_height: c.base_height,
            bump: c.bump,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        let w = Window::default();
        Self {
            row0: w.row0,
            col0: w.col0,
            rows: w.rows,
            cols: w.cols,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    /// "binomial", "regular" or "file".
    pub kind: String,
    pub obs_dim: usize,
    pub p: f64,
    pub seed: u64,
    /// Operator CSV read when `kind = "file"`.
    pub path: String,
}

impl Default for OperatorSection {
    fn default() -> Self {
        let spec = BinomialSelectionSpec::default();
        Self {
            kind: "binomial".into(),
            obs_dim: spec.obs_dim,
            p: spec.p,
            seed: spec.seed,
            path: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticSection {
    pub truth_steps: usize,
    /// "state-independent" or "state-dependent".
    pub noise: String,
    pub sigma_b: f64,
    pub sigma_o: f64,
    pub mu_b: f64,
    pub mu_o: f64,
    pub background_kernel: String,
    pub background_length: f64,
    pub observation_kernel: String,
    pub observation_length: f64,
    pub assumed_kernel: String,
    pub assumed_length: f64,
    pub assumed_std_ratio: f64,
    pub methods: Vec<String>,
    pub alpha: f64,
    pub iterations: usize,
    pub trials: usize,
}

impl Default for StaticSection {
    fn default() -> Self {
        Self {
            truth_steps: TruthConfig::default().steps,
            noise: "state-independent".into(),
            sigma_b: 0.1,
            sigma_o: 0.01,
            mu_b: 0.1,
            mu_o: 0.01,
            background_kernel: "balgovind".into(),
            background_length: 2.0,
            observation_kernel: "identity".into(),
            observation_length: 1.0,
            assumed_kernel: "exponential".into(),
            assumed_length: 3.0,
            assumed_std_ratio: 1.0,
            methods: vec!["cute".into(), "pub".into()],
            alpha: 0.0,
            iterations: 10,
            trials: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicSection {
    pub first_analysis_steps: usize,
    pub interval_steps: usize,
    pub cycles: usize,
    /// "first-step-only", "every-step" or "never".
    pub placement: String,
    pub inner_iterations: usize,
    pub alpha: f64,
    pub sigma_b: f64,
    pub noise_ratio: f64,
    pub background_kernel: String,
    pub background_length: f64,
    pub assumed_kernel: String,
    pub assumed_length: f64,
    pub assumed_std_ratio: f64,
    pub trials: usize,
}

impl Default for DynamicSection {
    fn default() -> Self {
        let d = DynamicChainConfig::default();
        Self {
            first_analysis_steps: d.first_analysis_steps,
            interval_steps: d.interval_steps,
            cycles: d.cycles,
            placement: d.placement.to_string(),
            inner_iterations: d.inner_iterations,
            alpha: d.alpha,
            sigma_b: d.sigma_b,
            noise_ratio: d.noise_ratio,
            background_kernel: "balgovind".into(),
            background_length: 2.0,
            assumed_kernel: "exponential".into(),
            assumed_length: 3.0,
            assumed_std_ratio: d.assumed.std_ratio,
            trials: d.trials,
        }
    }
}

/// `(key, unit, meaning)` for every configuration key, in document order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "path", "output directory"),
    ("seed", "-", "Monte-Carlo seed (trial t uses stream t)"),
    ("scalar.b_assumed", "variance", "assumed background variance B_A"),
    ("scalar.b_exact", "variance", "exact background variance B_E"),
    ("scalar.r", "variance", "observation variance R"),
    ("scalar.h", "-", "scalar observation operator H"),
    ("scalar.alpha", "-", "trace blending coefficient in [0, 1]"),
    ("scalar.iterations", "iterations", "number of iterations"),
    ("grid.nx", "cells", "grid columns"),
    ("grid.ny", "cells", "grid rows"),
    ("grid.dx", "length", "cell width"),
    ("grid.dy", "length", "cell height"),
    ("grid.dt", "time", "solver time step"),
    ("grid.g", "length/time^2", "gravity"),
    ("grid.damping", "1/time", "linear velocity damping"),
    ("cylinder.center_x", "length", "column of the released water cylinder"),
    ("cylinder.center_y", "length", "row of the released water cylinder"),
    ("cylinder.radius", "length", "cylinder radius"),
    ("cylinder.base_height", "length", "still-water depth"),
    ("cylinder.bump", "length", "extra height inside the cylinder"),
    ("window.row0", "cells", "first row of the observed window"),
    ("window.col0", "cells", "first column of the observed window"),
    ("window.rows", "cells", "window rows"),
    ("window.cols", "cells", "window columns"),
    ("operator.kind", "-", "binomial | regular | file"),
    ("operator.obs_dim", "observations", "number of observations"),
    ("operator.p", "-", "per-entry selection probability (binomial)"),
    ("operator.seed", "-", "operator seed (binomial)"),
    ("operator.path", "path", "operator CSV (file)"),
    ("static.truth_steps", "steps", "solver steps from release to truth"),
    ("static.noise", "-", "state-independent | state-dependent"),
    ("static.sigma_b", "velocity", "background error std (state-independent)"),
    ("static.sigma_o", "velocity", "observation error std (state-independent)"),
    ("static.mu_b", "-", "background std relative to the truth (state-dependent)"),
    ("static.mu_o", "-", "observation std relative to H x_t (state-dependent)"),
    ("static.background_kernel", "-", "exact background correlation: identity | exponential | balgovind | gaussian"),
    ("static.background_length", "cells", "exact background correlation length"),
    ("static.observation_kernel", "-", "exact observation correlation (kernels use the observation index)"),
    ("static.observation_length", "observations", "exact observation correlation length"),
    ("static.assumed_kernel", "-", "assumed background correlation: exponential | balgovind | gaussian"),
    ("static.assumed_length", "cells", "assumed background correlation length"),
    ("static.assumed_std_ratio", "-", "assumed background std over the mean observation std"),
    ("static.methods", "-", "any of 3dvar, naive, cute, pub"),
    ("static.alpha", "-", "trace blending coefficient in [0, 1]"),
    ("static.iterations", "iterations", "iterations per analysis"),
    ("static.trials", "trials", "Monte-Carlo trials"),
    ("dynamic.first_analysis_steps", "steps", "solver steps from release to the first analysis"),
    ("dynamic.interval_steps", "steps", "solver steps between analyses"),
    ("dynamic.cycles", "cycles", "number of analyses"),
    ("dynamic.placement", "-", "first-step-only | every-step | never"),
    ("dynamic.inner_iterations", "iterations", "iterations of CUTE / PUB per analysis"),
    ("dynamic.alpha", "-", "trace blending coefficient in [0, 1]"),
    ("dynamic.sigma_b", "velocity", "background error std"),
    ("dynamic.noise_ratio", "-", "sigma_b / sigma_o"),
    ("dynamic.background_kernel", "-", "exact background correlation"),
    ("dynamic.background_length", "cells", "exact background correlation length"),
    ("dynamic.assumed_kernel", "-", "assumed background correlation"),
    ("dynamic.assumed_length", "cells", "assumed background correlation length"),
    ("dynamic.assumed_std_ratio", "-", "assumed background std over the observation std"),
    ("dynamic.trials", "trials", "Monte-Carlo trials"),
];

fn lookup<'a>(v: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(v, |v, k| v.get(k))
}

/// Reference table of every key with its default and unit.
pub fn key_reference() -> String {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut out = String::from("Configuration keys (TOML; all optional):\n");
    for (key, unit, meaning) in KEYS {
        let default = lookup(&defaults, key).map_or_else(|| "-".to_string(), |v| v.to_string());
        out.push_str(&format!("  {key:<30} default {default:<20} [{unit}] {meaning}\n"));
    }
    out
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn kernel(name: &str, length: f64) -> Result<CorrelationKernel, CliError> {
    let kind: KernelKind = name.parse()?;
    Ok(CorrelationKernel::new(kind, length)?)
}

fn correlation(name: &str, length: f64) -> Result<CorrelationModel, CliError> {
    if name.eq_ignore_ascii_case("identity") {
        return Ok(CorrelationModel::Identity);
    }
    Ok(CorrelationModel::Kernel(kernel(name, length)?))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sw(&self) -> Result<SwConfig, CliError> {
        let g = &self.grid;
        let sw = SwConfig {
            nx: g.nx,
            ny: g.ny,
            dx: g.dx,
            dy: g.dy,
            dt: g.dt,
            g: g.g,
            b: g.damping,
        };
        sw.validate()?;
        Ok(sw)
    }

    pub fn cylinder(&self) -> Cylinder {
        let c = &self.cylinder;
        Cylinder {
            center: [c.center_x, c.center_y],
            radius: c.radius,
            base_height: c.base_height,
            bump: c.bump,
        }
    }

    pub fn window(&self) -> Result<Window, CliError> {
        let w = &self.window;
        let window = Window {
            row0: w.row0,
            col0: w.col0,
            rows: w.rows,
            cols: w.cols,
        };
        window.validate(self.grid.nx, self.grid.ny)?;
        Ok(window)
    }

    pub fn binomial_spec(&self) -> Result<BinomialSelectionSpec, CliError> {
        let spec = BinomialSelectionSpec {
            state_dim: self.window()?.state_dim(),
            obs_dim: self.operator.obs_dim,
            p: self.operator.p,
            seed: self.operator.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The observation operator over the window state.
    pub fn operator(&self) -> Result<ObservationOperator, CliError> {
        let n = self.window()?.state_dim();
        let h = match self.operator.kind.as_str() {
            "binomial" => generate_h(&self.binomial_spec()?)?,
            "regular" => regular_h(n, self.operator.obs_dim)?,
            "file" => {
                let file = std::fs::File::open(&self.operator.path)
                    .map_err(|e| config_err(format!("operator file '{}': {e}", self.operator.path)))?;
                read_h_csv(file).map_err(|e| config_err(format!("operator file '{}': {e}", self.operator.path)))?
            }
            other => return Err(config_err(format!("unknown operator kind '{other}'"))),
        };
        if h.state_dim() != n {
            return Err(config_err(format!("operator has {} columns, window state has {n}", h.state_dim())));
        }
        Ok(h)
    }

    pub fn truth(&self) -> Result<TruthConfig, CliError> {
        Ok(TruthConfig {
            sw: self.sw()?,
            cylinder: self.cylinder(),
            steps: self.static_twin.truth_steps,
        })
    }

    pub fn static_config(&self) -> Result<StaticConfig, CliError> {
        let s = &self.static_twin;
        let model = match s.noise.as_str() {
            "state-independent" => NoiseModel::StateIndependent {
                sigma_b: s.sigma_b,
                sigma_o: s.sigma_o,
            },
            "state-dependent" => NoiseModel::StateDependent { mu_b: s.mu_b, mu_o: s.mu_o },
            other => return Err(config_err(format!("unknown noise model '{other}'"))),
        };
        model.validate()?;
        let methods = s.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>, _>>()?;
        if methods.is_empty() {
            return Err(config_err("static.methods is empty"));
        }
        Ok(StaticConfig {
            noise: NoiseConfig {
                model,
                background: correlation(&s.background_kernel, s.background_length)?,
                observation: correlation(&s.observation_kernel, s.observation_length)?,
            },
            assumed: AssumedPrior {
                kernel: kernel(&s.assumed_kernel, s.assumed_length)?,
                std_ratio: s.assumed_std_ratio,
            },
            window: self.window()?,
            methods,
            alpha: s.alpha,
            iterations: s.iterations,
            trials: s.trials,
            seed: self.seed,
        })
    }

    pub fn dynamic_config(&self) -> Result<DynamicChainConfig, CliError> {
        let d = &self.dynamic;
        let placement: Placement = d.placement.parse()?;
        Ok(DynamicChainConfig {
            sw: self.sw()?,
            cylinder: self.cylinder(),
            window: self.window()?,
            first_analysis_steps: d.first_analysis_steps,
            interval_steps: d.interval_steps,
            cycles: d.cycles,
            placement,
            inner_iterations: d.inner_iterations,
            alpha: d.alpha,
            sigma_b: d.sigma_b,
            noise_ratio: d.noise_ratio,
            background: correlation(&d.background_kernel, d.background_length)?,
            assumed: AssumedPrior {
                kernel: kernel(&d.assumed_kernel, d.assumed_length)?,
                std_ratio: d.assumed_std_ratio,
            },
            trials: d.trials,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        match v.as_table() {
            Some(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, v, out);
                }
            }
            None => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn key_table_covers_every_key() {
        let mut keys = Vec::new();
        flatten("", &toml::Value::try_from(RunConfig::default()).unwrap(), &mut keys);
        let mut documented: Vec<String> = KEYS.iter().map(|(k, _, _)| k.to_string()).collect();
        keys.sort();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse("seed = 9\n[static]\nmethods = [\"3dvar\"]\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 3"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[static]\ntrails = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn defaults_match_the_library() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.static_config().unwrap(), StaticConfig::default());
        assert_eq!(cfg.dynamic_config().unwrap(), DynamicChainConfig::default());
        assert_eq!(cfg.truth().unwrap(), TruthConfig::default());
        assert_eq!(cfg.binomial_spec().unwrap(), BinomialSelectionSpec::default());
    }

    #[test]
    fn bad_names_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.static_twin.assumed_kernel = "identity".into();
        assert!(matches!(cfg.static_config(), Err(CliError::Config(_))));
        cfg = RunConfig::default();
        cfg.dynamic.placement = "sometimes".into();
        assert!(matches!(cfg.dynamic_config(), Err(CliError::Config(_))));
        cfg = RunConfig::default();
        cfg.operator.kind = "dense".into();
        assert!(matches!(cfg.operator(), Err(CliError::Config(_))));
    }
}
