//! JSON run configuration shared by `solve` and the experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::measure::{DensitySpec, GridMeasure, GridSpec};
use crate::regularity::Params;
use crate::scaling::Windows;
use crate::solvers::SinkhornConfig;

/// Regular cell-centred grid on `[lo, hi]^dim` with `n` cells per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one_dim")]
    pub dim: usize,
    pub n: usize,
    #[serde(default = "minus_one")]
    pub lo: f64,
    #[serde(default = "plus_one")]
    pub hi: f64,
}

fn one_dim() -> usize {
    1
}
fn minus_one() -> f64 {
    -1.0
}
fn plus_one() -> f64 {
    1.0
}

/// Either an analytic density sampled on a grid, or a measure file
/// (`.csv` with its `.json` sidecar). Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub grid: Option<GridConfig>,
    pub density: Option<DensitySpec>,
    /// Hölder exponent used for the data term.
    pub alpha: Option<f64>,
    pub file: Option<PathBuf>,
}

impl MarginalSpec {
    pub fn resolve(&self, base: &Path) -> Result<GridMeasure> {
        match (&self.file, &self.grid, &self.density) {
            (Some(f), None, None) => {
                let path = if f.is_absolute() { f.clone() } else { base.join(f) };
                let mut m = GridMeasure::load(&path)?;
                if let Some(a) = self.alpha {
                    m.alpha = a;
                }
                Ok(m)
            }
            (None, Some(g), Some(d)) => {
                let spec = GridSpec::cell_centered(g.dim, g.n, g.lo, g.hi)?;
                d.sample(spec, self.alpha.unwrap_or(0.5))
            }
            _ => input("a marginal needs either `file` alone or both `grid` and `density`"),
        }
    }
}

/// Which coupling an experiment analyses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    #[default]
    Sinkhorn,
    Exact,
    /// Identity coupling; source and target must coincide.
    Diagonal,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub eps1: Option<f64>,
    pub delta: Option<f64>,
    pub c0: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: MarginalSpec,
    /// Defaults to the source marginal.
    pub target: Option<MarginalSpec>,
    #[serde(default)]
    pub plan: PlanKind,
    pub epsilon: Option<f64>,
    pub eps_ladder: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub stabilize_every: Option<usize>,
    pub ladder: Option<bool>,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    pub theta: Option<f64>,
    #[serde(rename = "Lambda")]
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub long_factor: Option<f64>,
    pub r_avg_factor: Option<f64>,
    pub fit_factor: Option<f64>,
    pub max_levels: Option<usize>,
    pub windows: Option<Windows>,
    /// Soft lemma: radii `rho` in the same units as `R0`.
    pub rho_ladder: Option<Vec<f64>>,
    /// Soft lemma: defect bound in lemma units; measured when absent.
    pub delta_r: Option<f64>,
    /// Soft lemma: unit of length in which the `#_{R-1}` region is read
    /// (defaults to epsilon).
    pub length_unit: Option<f64>,
    /// Quadruples sampled for the Gibbs identity check in `solve`.
    pub gibbs_samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn marginals(&self, base: &Path) -> Result<(GridMeasure, GridMeasure)> {
        let lam = self.source.resolve(base)?;
        let mu = self.target.as_ref().unwrap_or(&self.source).resolve(base)?;
        Ok((lam, mu))
    }

    pub fn params(&self) -> Params {
        let d = Params::default();
        Params {
            eps1: self.thresholds.eps1.unwrap_or(d.eps1),
            delta: self.thresholds.delta.unwrap_or(d.delta),
            c0: self.thresholds.c0.unwrap_or(d.c0),
            lambda: self.lambda.unwrap_or(d.lambda),
            theta: self.theta.unwrap_or(d.theta),
            beta: self.beta.unwrap_or(d.beta),
            long_factor: self.long_factor.unwrap_or(d.long_factor),
            r_avg_factor: self.r_avg_factor.unwrap_or(d.r_avg_factor),
            fit_factor: self.fit_factor.unwrap_or(d.fit_factor),
            max_levels: self.max_levels.unwrap_or(d.max_levels),
            windows: self.windows.unwrap_or(d.windows),
        }
    }

    /// Solver settings at `epsilon`, with config overrides applied.
    pub fn solver(&self, epsilon: f64) -> SinkhornConfig {
        let mut s = SinkhornConfig::new(epsilon);
        if let Some(t) = self.tol {
            s.tol = t;
        }
        if let Some(m) = self.max_iter {
            s.max_iter = m;
        }
        if let Some(k) = self.stabilize_every {
            s.stabilize_every = k;
        }
        if let Some(l) = self.ladder {
            s.ladder = l;
        }
        s
    }

    pub fn require_epsilon(&self) -> Result<f64> {
        match self.epsilon {
            Some(e) if e > 0.0 && e.is_finite() => Ok(e),
            Some(e) => input(format!("epsilon must be positive, got {e}")),
            None => input("`epsilon` is required"),
        }
    }

    /// `eps_ladder`, or `[epsilon]` when only a single value is given.
    pub fn require_ladder(&self) -> Result<Vec<f64>> {
        let ladder = match (&self.eps_ladder, self.epsilon) {
            (Some(l), _) => l.clone(),
            (None, Some(e)) => vec![e],
            (None, None) => return input("`eps_ladder` (or `epsilon`) is required"),
        };
        if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return input(format!("eps_ladder must be non-empty and positive, got {ladder:?}"));
        }
        Ok(ladder)
    }

    pub fn require_r0(&self) -> Result<f64> {
        match self.r0 {
            Some(r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(r) => input(format!("R0 must be positive, got {r}")),
            None => input("`R0` is required"),
        }
    }
}
