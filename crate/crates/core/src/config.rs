//! Run configuration: file format, flag layering, validation and the
//! manifest written beside every run's outputs.

use crate::coefficients::{resolve_scenario, ScenarioFile};
use crate::coefficients::PeriodicCoefficientSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ERGOLQ_OUT_ROOT";
pub const MANIFEST_SCHEMA: &str = "ergolq.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveRiccati,
    ErgodicCost,
    Verify,
    Scan,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveRiccati => "solve-riccati",
            Command::ErgodicCost => "ergodic-cost",
            Command::Verify => "verify",
            Command::Scan => "scan",
        }
    }
}

/// Which closed-loop law a simulation or cost evaluation uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackChoice {
    /// `(Θ⁰, v⁰)` from the Riccati and adjoint solves.
    Optimal,
    /// The scenario's stabilizer (searched when it ships none) with `v = 0`.
    Stabilizer,
    Zero,
    /// Constant gain (rows of `Θ`) and offset.
    Constant { gain: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub feedback: FeedbackChoice,
    /// Initial state; zero when absent. Ignored for the fundamental solution.
    pub x0: Option<Vec<f64>>,
    /// Simulate the fundamental solution `Φ` instead of the controlled state.
    pub fundamental: bool,
    /// Paths written to the trajectory CSV.
    pub export_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            feedback: FeedbackChoice::Stabilizer,
            x0: None,
            fundamental: false,
            export_paths: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicConfig {
    pub feedback: FeedbackChoice,
    pub k_burn: Option<usize>,
    pub x0: Option<Vec<f64>>,
    /// Shorter horizon reported next to the long one, in periods.
    pub short_horizon: Option<usize>,
    pub antithetic: bool,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        ErgodicConfig {
            feedback: FeedbackChoice::Optimal,
            k_burn: None,
            x0: None,
            short_horizon: Some(10),
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub epsilons: Vec<f64>,
    /// Direction of the gain perturbation (rows); all ones when absent.
    pub d_theta: Option<Vec<Vec<f64>>>,
    /// Direction of the offset perturbation; zero when absent.
    pub d_v: Option<Vec<f64>>,
    pub k_burn: Option<usize>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            epsilons: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            d_theta: None,
            d_v: None,
            k_burn: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Subset of criteria (`A1` … `A10`); all when empty.
    pub criteria: Vec<String>,
}

/// Everything a run depends on. Sizes left unset take per-command defaults,
/// which are filled in before the manifest is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Catalog name or scenario file path.
    pub scenario: Option<String>,
    /// Inline scenario; takes precedence over `scenario` and is how
    /// manifests pin the exact data.
    pub scenario_definition: Option<ScenarioFile>,
    /// Defaults to 0, or to the suite seed for `verify`.
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub steps_per_period: usize,
    pub n_periods: Option<usize>,
    pub tol: f64,
    /// Regression degree; see [`crate::ergodic::default_basis`].
    pub degree: Option<usize>,
    pub out: Option<PathBuf>,
    pub simulate: SimulateConfig,
    pub ergodic: ErgodicConfig,
    pub scan: ScanConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: None,
            scenario_definition: None,
            seed: None,
            n_paths: None,
            steps_per_period: 64,
            n_periods: None,
            tol: 1e-6,
            degree: None,
            out: None,
            simulate: SimulateConfig::default(),
            ergodic: ErgodicConfig::default(),
            scan: ScanConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Values given on the command line; each one overrides the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub steps_per_period: Option<usize>,
    pub n_periods: Option<usize>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
}

/// A manifest: the resolved configuration plus versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: Command,
    pub versions: Versions,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub ergolq: String,
    pub summary_schema: String,
    pub manifest_schema: String,
}

impl RunConfig {
    /// Reads a TOML config, a JSON config, or a manifest (whose `config`
    /// is used).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
            let inner = match value.get("schema").and_then(|s| s.as_str()) {
                Some(MANIFEST_SCHEMA) => value.get("config").cloned().unwrap_or_default(),
                _ => value,
            };
            serde_json::from_value(inner).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.scenario {
            self.scenario = Some(s.clone());
            self.scenario_definition = None;
        }
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = o.n_paths {
            self.n_paths = Some(v);
        }
        if let Some(v) = o.steps_per_period {
            self.steps_per_period = v;
        }
        if let Some(v) = o.n_periods {
            self.n_periods = Some(v);
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.tol {
            self.tol = v;
        }
    }

    /// Loads the scenario and checks sizes; every config error surfaces here,
    /// before anything touches the output directory.
    pub fn resolve(&self, command: Command) -> Result<PeriodicCoefficientSet> {
        let set = match (&self.scenario_definition, &self.scenario) {
            (Some(def), _) => def.build()?,
            (None, Some(name)) => resolve_scenario(name)?,
            (None, None) if command == Command::Verify => resolve_scenario(&crate::verify::VerifyOptions::default().scenario)?,
            (None, None) => return Err(Error::InvalidArgument("no scenario given (use --scenario or a config file)".into())),
        };
        if self.steps_per_period == 0 {
            return Err(Error::InvalidArgument("steps_per_period must be positive".into()));
        }
        if self.n_paths == Some(0) || self.n_periods == Some(0) {
            return Err(Error::InvalidArgument("paths and periods must be positive".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tol)));
        }
        if let Some(d) = self.degree {
            crate::bsde::RegressionBasis::new(d, 1e-8)?;
        }
        for c in &self.verify.criteria {
            if crate::verify::Criterion::parse(c).is_none() {
                return Err(Error::InvalidArgument(format!("unknown criterion `{c}`")));
            }
        }
        Ok(set)
    }

    /// Fills per-command defaults and pins the scenario data inline.
    pub fn resolved(&self, command: Command, set: &PeriodicCoefficientSet) -> RunConfig {
        let mut c = self.clone();
        let (paths, periods) = match command {
            Command::Simulate => (2000, 10),
            Command::SolveRiccati => (if set.is_deterministic() { 1000 } else { 8000 }, 1),
            Command::ErgodicCost => (20_000, 50),
            Command::Scan => (20_000, 1),
            Command::Verify => (crate::verify::VerifyOptions::default().ergodic_paths, 1),
        };
        c.seed.get_or_insert(if command == Command::Verify { crate::verify::VerifyOptions::default().seed } else { 0 });
        c.n_paths.get_or_insert(paths);
        c.n_periods.get_or_insert(periods);
        if c.scenario_definition.is_none() {
            c.scenario_definition = ScenarioFile::from_set(set).ok();
        }
        c.scenario.get_or_insert_with(|| set.name.clone());
        c
    }

    /// `--out`, else `$ERGOLQ_OUT_ROOT/<command>-<scenario>-seed<seed>`, else
    /// the same under `./ergolq-out`.
    pub fn output_dir(&self, command: Command, scenario: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("ergolq-out"));
        let tag: String = scenario
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
            .collect();
        root.join(format!("{}-{}-seed{}", command.name(), tag, self.seed()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn manifest(&self, command: Command, summary_schema: &str) -> Manifest {
        let mut config = self.clone();
        config.out = None;
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            command,
            versions: Versions {
                ergolq: crate::VERSION.into(),
                summary_schema: summary_schema.into(),
                manifest_schema: MANIFEST_SCHEMA.into(),
            },
            seed: self.seed(),
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_config_and_overrides() {
        let text = r#"
scenario = "scalar-constant"
seed = 3
n_paths = 100

[ergodic]
feedback = "zero"
k_burn = 4

[scan]
epsilons = [0.0, 0.1]
"#;
        let mut c = RunConfig::parse(text, false).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.ergodic.feedback, FeedbackChoice::Zero);
        assert_eq!(c.steps_per_period, 64);
        c.apply(&Overrides {
            seed: Some(9),
            steps_per_period: Some(32),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.steps_per_period, c.n_paths), (Some(9), 32, Some(100)));
        assert!(c.resolve(Command::Simulate).is_ok());
    }

    #[test]
    fn constant_feedback_in_toml() {
        let text = "scenario = \"scalar-constant\"\n[ergodic.feedback.constant]\ngain = [[-0.5]]\noffset = [0.1]\n";
        let c = RunConfig::parse(text, false).unwrap();
        assert_eq!(
            c.ergodic.feedback,
            FeedbackChoice::Constant {
                gain: vec![vec![-0.5]],
                offset: vec![0.1]
            }
        );
    }

    #[test]
    fn config_errors() {
        assert!(RunConfig::parse("bogus_key = 1", false).is_err());
        let c = RunConfig {
            scenario: Some("nope".into()),
            ..RunConfig::default()
        };
        assert!(matches!(c.resolve(Command::Simulate), Err(Error::UnknownScenario(_))));
        let c = RunConfig {
            scenario: Some("scalar-constant".into()),
            tol: -1.0,
            ..RunConfig::default()
        };
        assert!(c.resolve(Command::Simulate).is_err());
        assert!(RunConfig::default().resolve(Command::Scan).is_err());
        assert!(RunConfig::default().resolve(Command::Verify).is_ok());
    }

    #[test]
    fn manifest_round_trip_pins_scenario() {
        let c = RunConfig {
            scenario: Some("scalar-random-periodic".into()),
            ..RunConfig::default()
        };
        let set = c.resolve(Command::Simulate).unwrap();
        let r = c.resolved(Command::Simulate, &set);
        assert!(r.scenario_definition.is_some());
        let m = r.manifest(Command::Simulate, "x/1");
        let text = serde_json::to_string(&m).unwrap();
        let back = RunConfig::parse(&text, true).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved(Command::Simulate, &set), r);
    }

    #[test]
    fn output_dir_naming() {
        let c = RunConfig {
            seed: Some(5),
            ..RunConfig::default()
        };
        let d = c.output_dir(Command::Scan, "a/b");
        assert!(d.ends_with("scan-a_b-seed5"));
        let c = RunConfig {
            out: Some("x".into()),
            ..RunConfig::default()
        };
        assert_eq!(c.output_dir(Command::Scan, "s"), PathBuf::from("x"));
    }
}
