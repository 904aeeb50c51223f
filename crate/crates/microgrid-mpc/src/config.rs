//! Run configuration: TOML files binding a grid, a controller variant and
//! solver settings to the solve/simulate/compare workflows.

use crate::formulation::{AssembleOptions, Variant};
use crate::grid_model::GridSpec;
use crate::simulator::ControllerConfig;
use crate::solver::BnbOptions;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Solver and formulation knobs exposed in the config file. Everything has
/// a default so minimal files stay small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub max_nodes: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub polish: bool,
    /// Stage from which commitment binaries are relaxed to [0, 1].
    pub relax_stage_threshold: usize,
    /// Error paths sampled per tree construction.
    pub n_samples: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let bnb = BnbOptions::default();
        SolverSettings {
            abs_gap: bnb.abs_gap,
            rel_gap: bnb.rel_gap,
            max_nodes: bnb.max_nodes,
            eps_abs: bnb.qp.eps_abs,
            eps_rel: bnb.qp.eps_rel,
            max_iter: bnb.qp.max_iter,
            polish: bnb.qp.polish,
            relax_stage_threshold: 4,
            n_samples: 100,
        }
    }
}

impl SolverSettings {
    pub fn bnb_options(&self) -> BnbOptions {
        let mut opts = BnbOptions::default();
        opts.abs_gap = self.abs_gap;
        opts.rel_gap = self.rel_gap;
        opts.max_nodes = self.max_nodes;
        opts.qp.eps_abs = self.eps_abs;
        opts.qp.eps_rel = self.eps_rel;
        opts.qp.max_iter = self.max_iter;
        opts.qp.polish = self.polish;
        opts
    }
}

/// A complete run description. `grid` may be omitted to use the built-in
/// case-study microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Violation level for chance/risk variants; ignored by `hard`.
    pub alpha: Option<f64>,
    /// Prediction horizon N; must match the branching list length.
    pub horizon: usize,
    pub branching: Vec<usize>,
    /// Closed-loop simulation length K.
    pub steps: usize,
    pub seed: u64,
    /// Output directory for solution/trace/report files.
    pub out_dir: String,
    /// Initial stored energy per storage unit; defaults to mid-range.
    pub x0: Option<Vec<f64>>,
    /// Commitment state before the first step.
    pub initial_delta: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Inline grid description; omit for the built-in case study.
    pub grid: Option<GridSpec>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(GridSpec::case_study)
    }

    /// Effective alpha: `hard` runs ignore it, the others require it.
    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            Variant::Hard => 0.0,
            _ => self.alpha.unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.horizon == 0 {
            return fail("horizon must be >= 1".into());
        }
        if self.steps == 0 {
            return fail("steps must be >= 1".into());
        }
        if self.branching.len() != self.horizon {
            return fail(format!(
                "branching list has {} entries but horizon is {}",
                self.branching.len(),
                self.horizon
            ));
        }
        if self.branching.iter().any(|&b| b == 0) {
            return fail("branching factors must be >= 1".into());
        }
        match (self.variant, self.alpha) {
            (Variant::Hard, _) => {}
            (_, None) => {
                return fail(format!(
                    "variant {:?} requires alpha",
                    self.variant
                ));
            }
            (_, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return fail(format!("alpha {a} outside [0, 1]"));
            }
            _ => {}
        }
        let spec = self.grid_spec();
        let issues = spec.validate_grid();
        if !issues.is_empty() {
            return fail(format!("grid: {}", issues.join("; ")));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != spec.n_s {
                return fail(format!(
                    "x0 has {} entries but the grid has {} storage units",
                    x0.len(),
                    spec.n_s
                ));
            }
            for (i, &v) in x0.iter().enumerate() {
                if v < spec.x_min[i] || v > spec.x_max[i] {
                    return fail(format!(
                        "x0[{i}] = {v} outside [{}, {}]",
                        spec.x_min[i], spec.x_max[i]
                    ));
                }
            }
        }
        if let Some(d) = &self.initial_delta {
            if d.len() != spec.n_t {
                return fail(format!(
                    "initial_delta has {} entries but the grid has {} conventional units",
                    d.len(),
                    spec.n_t
                ));
            }
        }
        if self.solver.n_samples == 0 {
            return fail("solver.n_samples must be >= 1".into());
        }
        Ok(())
    }

    /// Controller description for the closed loop.
    pub fn controller(&self, spec: &GridSpec) -> ControllerConfig {
        let mut ctrl = ControllerConfig::new(
            spec,
            self.variant,
            self.effective_alpha(),
            self.branching.clone(),
        );
        ctrl.n_samples = self.solver.n_samples;
        ctrl.bnb = self.solver.bnb_options();
        let mut assemble = AssembleOptions::new(spec);
        assemble.relax_stage_threshold = self.solver.relax_stage_threshold;
        ctrl.assemble = assemble;
        if let Some(x0) = &self.x0 {
            ctrl.x0 = x0.clone();
        }
        if let Some(d) = &self.initial_delta {
            ctrl.initial_delta = d.clone();
        }
        ctrl
    }
}
