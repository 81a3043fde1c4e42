//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "id": "demo",
//!   "grid": { "n_x": 30, "n_t": 250, "length": 1.0, "horizon": 0.03 },
//!   "problem": { "problem": "nonlinear" },
//!   "seed": 7,
//!   "cases": [{
//!     "source": { "problem": "nonlinear", "label": "source", ... },
//!     "methods": ["rls"],
//!     "targets": [{ "condition": { ... }, "runs": [{ "method": "rls" }] }]
//!   }]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, SeKernel};
use crate::transfer::{
    ConditionSpec, LinearProblem, MapKind, NonlinearMethod, ProblemSetup, ResidualLatents, SourceOptions,
};

pub const TABLE1: &str = include_str!("../../configs/table1.cfg");
pub const TABLE2: &str = include_str!("../../configs/table2.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_t: usize,
    pub length: f64,
    pub horizon: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.n_x, self.n_t, self.length, self.horizon)
    }
}

/// One realization of `k = exp(y)` for the linear problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivitySpec {
    pub variance: f64,
    pub length: f64,
    pub terms: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Linear { conductivity: ConductivitySpec, x_star: f64 },
    Nonlinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    Rls,
    KlDnn,
    PiKlDnn,
    Combined,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Rls => "rls",
            Method::KlDnn => "kl_dnn",
            Method::PiKlDnn => "pi_kl_dnn",
            Method::Combined => "combined",
        }
    }

    /// Source map the method starts from.
    pub fn map_kind(self) -> MapKind {
        match self {
            Method::Ols => MapKind::Ols,
            Method::Rls => MapKind::Rls,
            _ => MapKind::Mlp,
        }
    }

    pub fn nonlinear(self) -> NonlinearMethod {
        match self {
            Method::Ols => NonlinearMethod::Ols,
            Method::Rls => NonlinearMethod::Rls,
            Method::KlDnn => NonlinearMethod::KlDnn,
            Method::PiKlDnn => NonlinearMethod::PiKlDnn,
            Method::Combined => NonlinearMethod::Combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Regularization of the inverse control transforms (linear problem).
    #[serde(default)]
    pub gamma: f64,
    /// Labeled target samples.
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_r: Option<usize>,
    #[serde(default)]
    pub lambda_r: Option<f64>,
    #[serde(default)]
    pub residual_latents: Option<ResidualLatents>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub condition: ConditionSpec,
    pub runs: Vec<RunConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub source: ConditionSpec,
    /// Source maps evaluated on source test samples.
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub targets: Vec<TargetConfig>,
}

fn default_n_train() -> usize {
    1000
}

fn default_n_test() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub grid: GridSpec,
    pub problem: ProblemConfig,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub bases: SourceOptions,
    /// Also write the source training datasets (large).
    #[serde(default)]
    pub save_datasets: bool,
    pub cases: Vec<CaseConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A bundled configuration by name (`table1`, `table2`).
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "table1" => Self::parse(TABLE1),
            "table2" => Self::parse(TABLE2),
            other => Err(Error::Config(format!("no bundled configuration `{other}`"))),
        }
    }

    pub fn setup(&self) -> Result<ProblemSetup> {
        let grid = self.grid.build().map_err(cfg_err)?;
        Ok(match self.problem {
            ProblemConfig::Linear { conductivity: c, x_star } => ProblemSetup::Linear(
                LinearProblem::with_log_normal_k(grid, &SeKernel::space(c.variance, c.length), c.terms, c.seed, x_star)
                    .map_err(cfg_err)?,
            ),
            ProblemConfig::Nonlinear => ProblemSetup::Nonlinear { grid },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build().map_err(cfg_err)?;
        let linear = matches!(self.problem, ProblemConfig::Linear { .. });
        if let ProblemConfig::Linear { x_star, .. } = self.problem {
            if !(x_star > 0.0 && x_star < grid.length()) {
                return Err(Error::Config(format!("x_star = {x_star} is outside the domain")));
            }
        }
        if self.n_train < 2 {
            return Err(Error::Config("n_train must be at least 2".into()));
        }
        let b = &self.bases;
        if b.n_eta == 0 || b.n_eta > (self.n_train - 1).min(grid.len()) {
            return Err(Error::Config(format!(
                "n_eta = {} exceeds what {} training samples support",
                b.n_eta, self.n_train
            )));
        }
        if !linear && (b.n_xi_k == 0 || b.n_xi_k > (self.n_train - 1).min(grid.space_nodes())) {
            return Err(Error::Config(format!("n_xi_k = {} is out of range", b.n_xi_k)));
        }
        if linear && (b.n_xi_f > grid.len() || b.n_xi_q > grid.time_nodes()) {
            return Err(Error::Config("control basis sizes exceed the node counts".into()));
        }
        if self.cases.is_empty() {
            return Err(Error::Config("configuration lists no cases".into()));
        }
        for case in &self.cases {
            check_condition(&case.source, linear)?;
            for t in &case.targets {
                check_condition(&t.condition, linear)?;
                for run in &t.runs {
                    if linear && !matches!(run.method, Method::Ols | Method::Rls) {
                        return Err(Error::Config(format!(
                            "method {} is not available for the linear problem",
                            run.method.name()
                        )));
                    }
                    if !(run.gamma >= 0.0) {
                        return Err(Error::Config(format!("gamma must be >= 0, got {}", run.gamma)));
                    }
                    if linear && run.n_train > 0 {
                        return Err(Error::Config("linear transfer does not use labeled target samples".into()));
                    }
                    if matches!(run.method, Method::Ols | Method::KlDnn | Method::Combined) && !linear && run.n_train == 0
                    {
                        return Err(Error::Config(format!(
                            "method {} needs n_train > 0 target samples",
                            run.method.name()
                        )));
                    }
                    if run.lambda_r.is_some_and(|l| !(l >= 0.0)) || run.n_r == Some(0) {
                        return Err(Error::Config("lambda_r must be >= 0 and n_r > 0".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_condition(c: &ConditionSpec, linear: bool) -> Result<()> {
    if matches!(c, ConditionSpec::Linear(_)) != linear {
        return Err(Error::Config(format!(
            "condition `{}` does not match the configured problem",
            c.label()
        )));
    }
    c.validate().map_err(cfg_err)
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
