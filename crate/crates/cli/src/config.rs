//! Experiment configuration: a single strict JSON document. Unknown keys
//! are hard errors everywhere — a typo must never silently fall back to a
//! default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use pathfbsde_core::fbsde_problem::{
    oracle_coupled_ou, oracle_path_integral, oracle_riccati, RiccatiParams,
};
use pathfbsde_core::{FDConfig, GridPath, OracleProblem, SolverConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    UValue,
    ZRepresentation,
    FlowProperty,
    PpdeResidual,
    Regularity,
    Assumptions,
    ItoResidual,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::UValue,
        CheckKind::ZRepresentation,
        CheckKind::FlowProperty,
        CheckKind::PpdeResidual,
        CheckKind::Regularity,
        CheckKind::Assumptions,
        CheckKind::ItoResidual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::UValue => "u_value",
            CheckKind::ZRepresentation => "z_representation",
            CheckKind::FlowProperty => "flow_property",
            CheckKind::PpdeResidual => "ppde_residual",
            CheckKind::Regularity => "regularity",
            CheckKind::Assumptions => "assumptions",
            CheckKind::ItoResidual => "ito_residual",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Oracle ID: `coupled_ou`, `riccati` or `path_integral`.
    pub id: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Oracle-specific parameter overrides; the accepted keys depend on
    /// the ID and unknown keys are rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
    /// Evaluation time t. Must lie on the solver grid.
    #[serde(default)]
    pub t: f64,
    /// Evaluation state x ∈ R^n. Defaults to the oracle's canonical
    /// starting point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    /// Optional plain-text path file holding the driving-noise history
    /// γ_t; defaults to the constant zero path on [0, t].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_file: Option<PathBuf>,
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted path of the overridden field, e.g. `solver.n_steps`.
    pub field: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Finite-difference steps; derived from the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<FDConfig>,
    #[serde(default = "all_checks")]
    pub checks: Vec<CheckKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepSpec>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn all_checks() -> Vec<CheckKind> {
    CheckKind::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Coupled OU overrides (`c`, `sigma0`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CoupledOuParams {
    c: f64,
    sigma0: f64,
}

impl Default for CoupledOuParams {
    fn default() -> Self {
        CoupledOuParams { c: 1.0, sigma0: 1.0 }
    }
}

/// No parameters; an empty object is the only accepted override.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NoParams {}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.solver
            .validate()
            .map_err(|e| CliError::config(format!("solver section: {e}")))?;
        if !(self.problem.horizon > 0.0) {
            return Err(CliError::config("problem.horizon must be positive"));
        }
        if self.problem.t < 0.0 || self.problem.t >= self.problem.horizon {
            return Err(CliError::config(
                "problem.t must lie in [0, horizon) — the horizontal derivative is undefined at t = T",
            ));
        }
        if self.checks.is_empty() {
            return Err(CliError::config("checks must not be empty"));
        }
        // Materialize the oracle once to surface bad IDs/params early.
        self.build_problem()?;
        if let Some(sweep) = &self.sweep {
            for spec in sweep {
                if spec.values.is_empty() {
                    return Err(CliError::config(format!(
                        "sweep over `{}` has no values",
                        spec.field
                    )));
                }
            }
            // Field-path existence: apply the first value of each axis to
            // a serialized copy and insist the strict schema re-parses.
            let mut doc = serde_json::to_value(self)
                .map_err(|e| CliError::config(format!("config serialization: {e}")))?;
            if let Some(obj) = doc.as_object_mut() {
                obj.remove("sweep");
            }
            for spec in sweep {
                apply_override(&doc, &spec.field, &spec.values[0])?;
            }
        }
        Ok(())
    }

    /// Instantiate the oracle named by `problem.id` with its overrides.
    pub fn build_problem(&self) -> Result<OracleProblem, CliError> {
        let horizon = self.problem.horizon;
        let params = self.problem.params.clone().unwrap_or(serde_json::json!({}));
        let wrap = |e: pathfbsde_core::Error| CliError::config(format!("problem: {e}"));
        match self.problem.id.as_str() {
            "coupled_ou" => {
                let p: CoupledOuParams = parse_params(&self.problem.id, params)?;
                oracle_coupled_ou(p.c, p.sigma0, horizon).map_err(wrap)
            }
            "riccati" => {
                let p: RiccatiParams = parse_params(&self.problem.id, params)?;
                oracle_riccati(p, horizon).map_err(wrap)
            }
            "path_integral" => {
                let _: NoParams = parse_params(&self.problem.id, params)?;
                oracle_path_integral(horizon).map_err(wrap)
            }
            other => Err(CliError::config(format!(
                "unknown problem id `{other}` (try `list-problems`)"
            ))),
        }
    }

    /// The evaluation datum (γ_t, x): loads `path_file` or builds the
    /// constant zero history, and fills the per-oracle default state.
    pub fn build_datum(&self, problem: &OracleProblem) -> Result<(GridPath, Vec<f64>), CliError> {
        let dt = self.problem.horizon / self.solver.n_steps as f64;
        let gamma = match &self.problem.path_file {
            Some(f) => {
                let text = std::fs::read_to_string(f).map_err(|e| {
                    CliError::config(format!("cannot read path file {}: {e}", f.display()))
                })?;
                let g = GridPath::from_text(&text)
                    .map_err(|e| CliError::config(format!("path file: {e}")))?;
                if (g.dt() - dt).abs() > 1e-9 * dt {
                    return Err(CliError::config(format!(
                        "path file grid step {} does not match horizon/n_steps = {}",
                        g.dt(),
                        dt
                    )));
                }
                if (g.t() - self.problem.t).abs() > 1e-9 {
                    return Err(CliError::config(format!(
                        "path file ends at t = {}, config says t = {}",
                        g.t(),
                        self.problem.t
                    )));
                }
                g
            }
            None => {
                let built = if self.problem.t == 0.0 {
                    GridPath::at_origin(dt, vec![0.0; problem.coeffs.d])
                } else {
                    GridPath::constant(dt, self.problem.t, &vec![0.0; problem.coeffs.d])
                };
                built.map_err(|e| CliError::config(format!("problem.t: {e}")))?
            }
        };
        let x = match &self.problem.x {
            Some(x) => {
                if x.len() != problem.coeffs.n {
                    return Err(CliError::config(format!(
                        "problem.x has {} components, the oracle state is {}-dimensional",
                        x.len(),
                        problem.coeffs.n
                    )));
                }
                x.clone()
            }
            None => default_state(&self.problem.id, problem.coeffs.n),
        };
        Ok((gamma, x))
    }

    /// FD steps: the configured section, or grid-derived defaults.
    pub fn fd_for(&self, gamma: &GridPath) -> FDConfig {
        self.fd.unwrap_or_else(|| FDConfig::default_for(gamma))
    }

    /// Expand the sweep into concrete configs (cartesian product of the
    /// axes, inner axis fastest), labelled by their override assignments.
    pub fn expand_sweep(&self) -> Result<Vec<(Vec<(String, serde_json::Value)>, ExperimentConfig)>, CliError> {
        let Some(sweep) = &self.sweep else {
            return Err(CliError::config("sweep subcommand needs a `sweep` section"));
        };
        let mut base = serde_json::to_value(self)
            .map_err(|e| CliError::config(format!("config serialization: {e}")))?;
        if let Some(obj) = base.as_object_mut() {
            obj.remove("sweep");
        }
        let mut combos: Vec<Vec<(String, serde_json::Value)>> = vec![Vec::new()];
        for spec in sweep {
            let mut next = Vec::with_capacity(combos.len() * spec.values.len());
            for prefix in &combos {
                for v in &spec.values {
                    let mut c = prefix.clone();
                    c.push((spec.field.clone(), v.clone()));
                    next.push(c);
                }
            }
            combos = next;
        }
        let mut out = Vec::with_capacity(combos.len());
        for assignment in combos {
            let mut doc = base.clone();
            for (field, value) in &assignment {
                doc = apply_override(&doc, field, value)?;
            }
            let cfg: ExperimentConfig = serde_json::from_value(doc)
                .map_err(|e| CliError::config(format!("sweep point: {e}")))?;
            cfg.validate()?;
            out.push((assignment, cfg));
        }
        Ok(out)
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(
    id: &str,
    params: serde_json::Value,
) -> Result<T, CliError> {
    serde_json::from_value(params)
        .map_err(|e| CliError::config(format!("problem.params for `{id}`: {e}")))
}

fn default_state(id: &str, n: usize) -> Vec<f64> {
    match id {
        "coupled_ou" | "riccati" => vec![1.0; n],
        _ => vec![0.0; n],
    }
}

/// Set `field` (dotted path) in a config document. The path must resolve
/// to an existing leaf — overriding a key the schema does not know is the
/// same hard error as a typo in the file itself.
fn apply_override(
    doc: &serde_json::Value,
    field: &str,
    value: &serde_json::Value,
) -> Result<serde_json::Value, CliError> {
    let mut doc = doc.clone();
    let pointer = format!("/{}", field.replace('.', "/"));
    let entry = doc.pointer_mut(&pointer).ok_or_else(|| {
        CliError::config(format!("sweep field `{field}` names no existing config field"))
    })?;
    *entry = value.clone();
    Ok(doc)
}
