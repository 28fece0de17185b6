//! Orchestration of `solve` and the named experiments: builds marginals and
//! plans from a [`RunConfig`], runs the computation and writes artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PlanKind, RunConfig};
use crate::coupling::{write_plan, Coupling, PlanHeader};
use crate::error::{input, Result};
use crate::measure::GridMeasure;
use crate::regularity::{
    campanato_iterate, decay_constant, dilate, expansion_experiment, long_traj_experiment, one_step, quasimin_defect,
    soft_lemma_check, Params,
};
use crate::scaling::Scaling;
use crate::solvers::{entropic_cost, exact_ot, gibbs_identity_check, sinkhorn};

pub const EXPERIMENTS: [&str; 6] = ["expansion", "longtraj", "quasimin", "onestep", "campanato", "softlemma"];

/// Collects the files written into one output directory.
pub struct Artifacts {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.record(name);
        Ok(())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name)).map_err(csv_err)?;
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), data)?;
        self.record(name);
        Ok(())
    }

    fn plan(&mut self, pi: &Coupling, lam: &GridMeasure, mu: &GridMeasure, epsilon: Option<f64>) -> Result<()> {
        let header = PlanHeader {
            n_source: pi.n_source(),
            n_target: pi.n_target(),
            source_grid: Some(lam.spec.clone()),
            target_grid: Some(mu.spec.clone()),
            epsilon,
        };
        write_plan(&self.dir.join("plan.bin"), &header, &pi.mass)?;
        self.record("plan.bin");
        self.record("plan.json");
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::Error::Internal(format!("csv: {other:?}")),
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Result of a run that did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
}

impl Status {
    fn and(self, converged: bool) -> Self {
        if converged {
            self
        } else {
            Status::NotConverged
        }
    }
}

struct Plan {
    pi: Coupling,
    converged: bool,
}

fn build_plan(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, epsilon: f64) -> Result<Plan> {
    let (la, ma) = (lam.atoms(), mu.atoms());
    match cfg.plan {
        PlanKind::Sinkhorn => {
            let res = sinkhorn(&la, &ma, &cfg.solver(epsilon))?;
            Ok(Plan {
                pi: res.plan,
                converged: res.converged,
            })
        }
        PlanKind::Exact => Ok(Plan {
            pi: exact_ot(&la, &ma)?.plan,
            converged: true,
        }),
        PlanKind::Diagonal => {
            if lam != mu {
                return input("plan `diagonal` needs identical source and target");
            }
            Ok(Plan {
                pi: Coupling::diagonal(la)?,
                converged: true,
            })
        }
    }
}

#[derive(Serialize)]
struct SolveSummary {
    method: PlanKind,
    epsilon: Option<f64>,
    n_source: usize,
    n_target: usize,
    mass: f64,
    /// Entropic cost for Sinkhorn plans, transport cost otherwise.
    cost: f64,
    transport_cost: f64,
    entropy: Option<f64>,
    iterations: Option<usize>,
    marg_err: f64,
    converged: bool,
    gibbs_max_rel_error: Option<f64>,
    seed: u64,
}

/// `solve`: writes `plan.bin` (+ `plan.json`) and `summary.json`.
pub fn solve(cfg: &RunConfig, base: &Path, out: &mut Artifacts) -> Result<Status> {
    let (lam, mu) = cfg.marginals(base)?;
    let (la, ma) = (lam.atoms(), mu.atoms());
    let summary = match cfg.plan {
        PlanKind::Sinkhorn => {
            let eps = cfg.require_epsilon()?;
            let res = sinkhorn(&la, &ma, &cfg.solver(eps))?;
            let samples = cfg.gibbs_samples.unwrap_or(10_000);
            let gibbs = (samples > 0).then(|| gibbs_identity_check(&res.plan, eps, samples, cfg.seed));
            out.plan(&res.plan, &lam, &mu, Some(eps))?;
            SolveSummary {
                method: cfg.plan,
                epsilon: Some(eps),
                n_source: la.len(),
                n_target: ma.len(),
                mass: res.mass,
                cost: entropic_cost(&res),
                transport_cost: res.primal_cost,
                entropy: Some(res.entropy),
                iterations: Some(res.iterations),
                marg_err: res.marg_err,
                converged: res.converged,
                gibbs_max_rel_error: gibbs,
                seed: cfg.seed,
            }
        }
        _ => {
            let plan = build_plan(cfg, &lam, &mu, 1.0)?;
            let rep = plan.pi.check_marginals(1e-9);
            let cost = plan.pi.reduce(|x, y, m| m * crate::numeric::dist2(x, y));
            out.plan(&plan.pi, &lam, &mu, None)?;
            SolveSummary {
                method: cfg.plan,
                epsilon: None,
                n_source: la.len(),
                n_target: ma.len(),
                mass: plan.pi.total_mass(),
                cost,
                transport_cost: cost,
                entropy: None,
                iterations: None,
                marg_err: rep.max_row_err.max(rep.max_col_err),
                converged: true,
                gibbs_max_rel_error: None,
                seed: cfg.seed,
            }
        }
    };
    let converged = summary.converged;
    out.json("summary.json", &summary)?;
    Ok(Status::Ok.and(converged))
}

/// Runs the experiment `name`, writing `report.csv`, `trace.json` and,
/// where defined, `defects.csv`.
pub fn experiment(name: &str, cfg: &RunConfig, base: &Path, out: &mut Artifacts) -> Result<Status> {
    if !EXPERIMENTS.contains(&name) {
        return input(format!("unknown experiment `{name}`; valid names: {}", EXPERIMENTS.join(", ")));
    }
    let (lam, mu) = cfg.marginals(base)?;
    let p = cfg.params();
    match name {
        "expansion" => run_expansion(cfg, &lam, &mu, out),
        "longtraj" => run_longtraj(cfg, &lam, &mu, &p, out),
        "quasimin" => run_quasimin(cfg, &lam, &mu, &p, out),
        "onestep" => run_onestep(cfg, &lam, &mu, &p, out),
        "campanato" => run_campanato(cfg, &lam, &mu, &p, out),
        _ => run_softlemma(cfg, &lam, &mu, &p, out),
    }
}

#[derive(Serialize)]
struct ExpansionCsv {
    row: &'static str,
    epsilon: Option<f64>,
    ot_eps: Option<f64>,
    ot: Option<f64>,
    remainder: Option<f64>,
    under_resolved: Option<bool>,
    iterations: Option<usize>,
    converged: Option<bool>,
    slope: Option<f64>,
    intercept: Option<f64>,
}

fn run_expansion(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, out: &mut Artifacts) -> Result<Status> {
    let ladder = cfg.require_ladder()?;
    let table = expansion_experiment(&lam.atoms(), &mu.atoms(), &ladder, &cfg.solver(ladder[0]))?;
    let mut rows: Vec<ExpansionCsv> = table
        .rows
        .iter()
        .map(|r| ExpansionCsv {
            row: "epsilon",
            epsilon: Some(r.epsilon),
            ot_eps: Some(r.ot_eps),
            ot: Some(r.ot),
            remainder: Some(r.remainder),
            under_resolved: Some(r.under_resolved),
            iterations: Some(r.iterations),
            converged: Some(r.converged),
            slope: None,
            intercept: None,
        })
        .collect();
    rows.push(ExpansionCsv {
        row: "regression",
        epsilon: None,
        ot_eps: None,
        ot: None,
        remainder: None,
        under_resolved: None,
        iterations: None,
        converged: None,
        slope: table.slope,
        intercept: table.intercept,
    });
    out.csv("report.csv", &rows)?;
    out.json("trace.json", &table)?;
    Ok(Status::Ok.and(table.rows.iter().all(|r| r.converged)))
}

#[derive(Serialize)]
struct LongTrajCsv {
    row: &'static str,
    #[serde(rename = "R")]
    r: f64,
    epsilon: Option<f64>,
    energy_ratio: Option<f64>,
    mass_ratio: Option<f64>,
    long_energy: Option<f64>,
    long_mass: Option<f64>,
    e_5r: Option<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    mass_slope: Option<f64>,
    energy_slope: Option<f64>,
}

fn run_longtraj(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, p: &Params, out: &mut Artifacts) -> Result<Status> {
    let ladder = cfg.require_ladder()?;
    let r = cfg.require_r0()?;
    let table = long_traj_experiment(&lam.atoms(), &mu.atoms(), r, &ladder, &cfg.solver(ladder[0]), p)?;
    let mut rows: Vec<LongTrajCsv> = table
        .rows
        .iter()
        .map(|x| LongTrajCsv {
            row: "epsilon",
            r,
            epsilon: Some(x.epsilon),
            energy_ratio: Some(x.energy_ratio),
            mass_ratio: Some(x.mass_ratio),
            long_energy: Some(x.long_energy),
            long_mass: Some(x.long_mass),
            e_5r: Some(x.e_5r),
            iterations: Some(x.iterations),
            converged: Some(x.converged),
            mass_slope: None,
            energy_slope: None,
        })
        .collect();
    rows.push(LongTrajCsv {
        row: "regression",
        r,
        epsilon: None,
        energy_ratio: None,
        mass_ratio: None,
        long_energy: None,
        long_mass: None,
        e_5r: None,
        iterations: None,
        converged: None,
        mass_slope: table.mass_slope,
        energy_slope: table.energy_slope,
    });
    out.csv("report.csv", &rows)?;
    out.json("trace.json", &table)?;
    Ok(Status::Ok.and(table.rows.iter().all(|r| r.converged)))
}

#[derive(Serialize)]
struct QuasiminCsv {
    plan: &'static str,
    epsilon: Option<f64>,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "Lambda")]
    lambda: f64,
    lhs: f64,
    competitor_cost: f64,
    defect: f64,
    pr_mass: f64,
    eps2_mass: f64,
    energy_2r: f64,
    /// `defect / (eps^2 pi(#_{Lambda R}))`.
    normalized_defect: Option<f64>,
    /// `defect / sum_{#_{2R}} |x - y|^2 pi`.
    energy_relative_defect: Option<f64>,
    degenerate: bool,
}

#[derive(Serialize)]
struct QuasiminTrace {
    rows: Vec<crate::regularity::DefectReport>,
    epsilons: Vec<Option<f64>>,
    /// max/min of `normalized_defect` over the Sinkhorn rows.
    normalized_spread: Option<f64>,
}

fn run_quasimin(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, p: &Params, out: &mut Artifacts) -> Result<Status> {
    let r = cfg.require_r0()?;
    let mut converged = true;
    let mut entries = Vec::new();
    if cfg.plan == PlanKind::Sinkhorn {
        for eps in cfg.require_ladder()? {
            let plan = build_plan(cfg, lam, mu, eps)?;
            converged &= plan.converged;
            entries.push(("sinkhorn", Some(eps), quasimin_defect(&plan.pi, r, p.lambda, eps)?));
        }
    }
    // Restriction of the exact plan to its own marginals: the sanity row.
    let exact = exact_ot(&lam.atoms(), &mu.atoms())?.plan;
    entries.push(("exact", None, quasimin_defect(&exact, r, p.lambda, cfg.epsilon.unwrap_or(0.0))?));

    let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
    let rows: Vec<QuasiminCsv> = entries
        .iter()
        .map(|(plan, eps, d)| QuasiminCsv {
            plan,
            epsilon: *eps,
            r: d.r,
            lambda: d.lambda,
            lhs: d.lhs,
            competitor_cost: d.competitor_cost,
            defect: d.defect,
            pr_mass: d.pr_mass,
            eps2_mass: d.eps2_mass,
            energy_2r: d.energy_2r,
            normalized_defect: eps.and_then(|_| ratio(d.defect, d.eps2_mass)),
            energy_relative_defect: ratio(d.defect, d.energy_2r),
            degenerate: d.degenerate,
        })
        .collect();
    let norm: Vec<f64> = rows.iter().filter_map(|r| r.normalized_defect).map(f64::abs).collect();
    let spread = (!norm.is_empty()).then(|| {
        let max = norm.iter().cloned().fold(f64::MIN, f64::max);
        let min = norm.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    });
    out.csv("report.csv", &rows)?;
    out.csv("defects.csv", &rows)?;
    out.json(
        "trace.json",
        &QuasiminTrace {
            epsilons: entries.iter().map(|e| e.1).collect(),
            rows: entries.into_iter().map(|e| e.2).collect(),
            normalized_spread: spread,
        },
    )?;
    Ok(Status::Ok.and(converged))
}

fn r_avg(lam: &GridMeasure, mu: &GridMeasure, p: &Params) -> f64 {
    p.r_avg_factor * lam.atoms().spacing().max(mu.atoms().spacing())
}

#[derive(Serialize)]
struct OneStepCsv {
    #[serde(rename = "R")]
    r: f64,
    theta: f64,
    e_before: f64,
    e_after: f64,
    d_before: f64,
    d_after: f64,
    improved: bool,
    b_0: f64,
    b_1: Option<f64>,
    gamma: f64,
    det_a: f64,
    fit_residual: f64,
}

#[derive(Serialize)]
struct OneStepTrace<'a> {
    normalizing: &'a Scaling,
    outcome: &'a crate::regularity::OneStepOutcome,
}

fn run_onestep(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, p: &Params, out: &mut Artifacts) -> Result<Status> {
    let eps = cfg.require_epsilon()?;
    let r = cfg.require_r0()?;
    let plan = build_plan(cfg, lam, mu, eps)?;
    let sbar = Scaling::normalizing(&plan.pi.source, &plan.pi.target, r_avg(lam, mu, p), &p.windows)?;
    let pin = sbar.apply_to_coupling(&plan.pi, &p.windows)?;
    let o = one_step(&pin, r, eps, p)?;
    let row = OneStepCsv {
        r,
        theta: o.theta,
        e_before: o.e_before,
        e_after: o.e_after,
        d_before: o.d_before,
        d_after: o.d_after,
        improved: o.improved,
        b_0: o.scaling_hat.b[0],
        b_1: o.scaling_hat.b.get(1).copied(),
        gamma: o.scaling_hat.gamma,
        det_a: o.scaling_hat.det(),
        fit_residual: o.fit.residual,
    };
    out.csv("report.csv", &[row])?;
    out.json(
        "trace.json",
        &OneStepTrace {
            normalizing: &sbar,
            outcome: &o,
        },
    )?;
    Ok(Status::Ok.and(plan.converged))
}

/// Per-radius record shared with the plan exports.
#[derive(Serialize)]
struct RadiusCsv {
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "E")]
    e: f64,
    #[serde(rename = "D")]
    d: f64,
    long_energy: f64,
    long_mass: f64,
    defect_beta0: f64,
}

#[derive(Serialize)]
struct DecayCsv {
    row: &'static str,
    #[serde(rename = "R")]
    r: Option<f64>,
    defect_beta0: Option<f64>,
    /// `E + D` of the normalized plan at `R0`.
    e0_plus_d0: f64,
    eps2_over_r2: Option<f64>,
    /// `defect / (E0 + D0 + eps^2/R^2)`; the fitted constant is the maximum.
    ratio: Option<f64>,
}

fn run_campanato(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, p: &Params, out: &mut Artifacts) -> Result<Status> {
    let eps = cfg.require_epsilon()?;
    let r0 = cfg.require_r0()?;
    let plan = build_plan(cfg, lam, mu, eps)?;
    let trace = campanato_iterate(&plan.pi, r0, eps, p)?;
    let mut rows = Vec::with_capacity(trace.levels.len());
    for l in &trace.levels {
        let st = plan.pi.long_trajectory_stats(l.r, p.long_factor * l.r)?;
        rows.push(RadiusCsv {
            r: l.r,
            e: l.e,
            d: l.d,
            long_energy: st.energy,
            long_mass: st.mass,
            defect_beta0: plan.pi.affine_fit(l.r, 0.0)?.defect,
        });
    }
    let e0d0 = trace.levels.first().map_or(0.0, |l| l.e + l.d);
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.r, r.defect_beta0)).collect();
    let mut decay: Vec<DecayCsv> = rows
        .iter()
        .map(|r| {
            let e2 = eps * eps / (r.r * r.r);
            DecayCsv {
                row: "level",
                r: Some(r.r),
                defect_beta0: Some(r.defect_beta0),
                e0_plus_d0: e0d0,
                eps2_over_r2: Some(e2),
                ratio: Some(r.defect_beta0 / (e0d0 + e2)),
            }
        })
        .collect();
    decay.push(DecayCsv {
        row: "fitted_constant",
        r: None,
        defect_beta0: None,
        e0_plus_d0: e0d0,
        eps2_over_r2: None,
        ratio: decay_constant(&pairs, e0d0, eps),
    });
    out.csv("report.csv", &rows)?;
    out.csv("defects.csv", &decay)?;
    out.json("trace.json", &trace)?;
    Ok(Status::Ok.and(plan.converged))
}

#[derive(Serialize)]
struct SoftLemmaCsv {
    rho: f64,
    mass: f64,
    bound: f64,
    constant: Option<f64>,
    scales_ordered: bool,
}

#[derive(Serialize)]
struct SoftLemmaTrace {
    length_unit: f64,
    /// `R0` in lemma units.
    r: f64,
    delta_r: f64,
    delta_r_measured: bool,
    rows: Vec<crate::regularity::SoftLemmaRow>,
}

fn run_softlemma(cfg: &RunConfig, lam: &GridMeasure, mu: &GridMeasure, p: &Params, out: &mut Artifacts) -> Result<Status> {
    let eps = cfg.require_epsilon()?;
    let r0 = cfg.require_r0()?;
    let rho = cfg.rho_ladder.clone().ok_or_else(|| crate::Error::Input("`rho_ladder` is required".into()))?;
    let unit = cfg.length_unit.unwrap_or(eps);
    if !(unit > 0.0) {
        return input(format!("length_unit must be positive, got {unit}"));
    }
    let plan = build_plan(cfg, lam, mu, eps)?;
    let pi = dilate(&plan.pi, 1.0 / unit)?;
    let r = r0 / unit;
    let (delta_r, measured) = match cfg.delta_r {
        Some(d) => (d, false),
        None => (quasimin_defect(&pi, r, p.lambda, eps / unit)?.defect.max(0.0), true),
    };
    let rho: Vec<f64> = rho.iter().map(|x| x / unit).collect();
    let table = soft_lemma_check(&pi, r, &rho, delta_r)?;
    let rows: Vec<SoftLemmaCsv> = table
        .iter()
        .map(|x| SoftLemmaCsv {
            rho: x.rho * unit,
            mass: x.mass,
            bound: x.bound,
            constant: x.constant,
            scales_ordered: x.scales_ordered,
        })
        .collect();
    out.csv("report.csv", &rows)?;
    out.json(
        "trace.json",
        &SoftLemmaTrace {
            length_unit: unit,
            r,
            delta_r,
            delta_r_measured: measured,
            rows: table,
        },
    )?;
    Ok(Status::Ok.and(plan.converged))
}
