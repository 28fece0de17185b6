//! Harmonic fit, one-step improvement, the Campanato iteration and the defect
//! experiments built on entropic plans.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{Coupling, Region};
use crate::error::{domain, input, Error, Result};
use crate::measure::{data_term, Atoms};
use crate::numeric::{ksum, linear_regression, KahanSum, Point};
use crate::scaling::{Scaling, Windows};
use crate::solvers::{entropic_cost, exact_ot, sinkhorn, SinkhornConfig};

/// Tunable thresholds and geometry of the regularity experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Smallness threshold for `E + D + eps^2/R^2 + delta`.
    pub eps1: f64,
    pub delta: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub theta: f64,
    /// Iteration stops once `r_k <= c0 * epsilon`.
    pub c0: f64,
    /// Long trajectories: `|x - y| >= long_factor * R`.
    pub long_factor: f64,
    pub beta: f64,
    /// Ball-average radius for point densities, in units of the grid spacing.
    pub r_avg_factor: f64,
    /// Harmonic fit region `#_{fit_factor R}`.
    pub fit_factor: f64,
    pub windows: Windows,
    pub max_levels: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            eps1: 0.1,
            delta: 0.05,
            lambda: 11.0 / 4.0,
            theta: 0.5,
            c0: 5.0,
            long_factor: 7.0,
            beta: 0.0,
            r_avg_factor: 3.0,
            fit_factor: 1.0,
            windows: Windows::default(),
            max_levels: 20,
        }
    }
}

fn r_avg(m: &Atoms, p: &Params) -> f64 {
    p.r_avg_factor * m.spacing()
}

/// Least-squares fit of the displacement `y - x` by the gradient of a
/// harmonic polynomial of degree at most two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicFit {
    /// Linear coefficients first, then `(x1^2 - x2^2)/2` and `x1 x2` in d = 2.
    pub coeffs: Vec<f64>,
    pub grad0: Vec<f64>,
    /// Row-major `d x d`, trace-free by construction.
    pub hess0: Vec<f64>,
    pub residual: f64,
    /// Residual of the zero polynomial, `sum |y - x|^2 pi` over the region.
    pub zero_residual: f64,
    pub degenerate: bool,
}

/// Gradients at `x` of the basis functions.
fn basis_grads(dim: usize, quadratics: bool, x: &Point) -> Vec<Point> {
    let mut g = Vec::with_capacity(4);
    for a in 0..dim {
        let mut e = [0.0; 2];
        e[a] = 1.0;
        g.push(e);
    }
    if quadratics && dim == 2 {
        g.push([x[0], -x[1]]);
        g.push([x[1], x[0]]);
    }
    g
}

/// Harmonic fit over `#_{fit_radius}`. `quadratics = false` restricts the
/// basis to linear polynomials.
pub fn harmonic_fit_basis(pi: &Coupling, fit_radius: f64, quadratics: bool) -> Result<HarmonicFit> {
    if !(fit_radius > 0.0) {
        return domain(format!("fit radius must be positive, got {fit_radius}"));
    }
    let d = pi.dim();
    let k = basis_grads(d, quadratics, &[0.0; 2]).len();
    let region = Region::HashR(fit_radius);
    let nt = pi.n_target();
    let partial: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = pi
        .mass
        .par_chunks(nt)
        .zip(pi.source.points.par_iter())
        .map(|(row, x)| {
            let gr = basis_grads(d, quadratics, x);
            let mut gm = vec![KahanSum::new(); k * k];
            let mut rhs = vec![KahanSum::new(); k];
            let mut zero = KahanSum::new();
            let mut mass = KahanSum::new();
            for (w, y) in row.iter().zip(&pi.target.points) {
                if *w == 0.0 || !region.contains(x, y) {
                    continue;
                }
                let u = [y[0] - x[0], y[1] - x[1]];
                mass.add(*w);
                zero.add(w * (u[0] * u[0] + u[1] * u[1]));
                for p in 0..k {
                    rhs[p].add(w * (gr[p][0] * u[0] + gr[p][1] * u[1]));
                    for q in 0..k {
                        gm[p * k + q].add(w * (gr[p][0] * gr[q][0] + gr[p][1] * gr[q][1]));
                    }
                }
            }
            (
                gm.iter().map(|s| s.value()).collect(),
                rhs.iter().map(|s| s.value()).collect(),
                zero.value(),
                mass.value(),
            )
        })
        .collect();
    let total = ksum(partial.iter().map(|p| p.3));
    let zero_residual = ksum(partial.iter().map(|p| p.2));
    let hess_from = |c: &[f64]| -> Vec<f64> {
        if d == 2 && quadratics {
            vec![c[2], c[3], c[3], -c[2]]
        } else {
            vec![0.0; d * d]
        }
    };
    if !(total > 0.0) {
        return Ok(HarmonicFit {
            coeffs: vec![0.0; k],
            grad0: vec![0.0; d],
            hess0: vec![0.0; d * d],
            residual: 0.0,
            zero_residual: 0.0,
            degenerate: true,
        });
    }
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut r = DMatrix::<f64>::zeros(k, 1);
    for p in 0..k {
        r[(p, 0)] = ksum(partial.iter().map(|t| t.1[p])) / total;
        for q in 0..k {
            g[(p, q)] = ksum(partial.iter().map(|t| t.0[p * k + q])) / total;
        }
    }
    let ev = SymmetricEigen::new(g.clone()).eigenvalues;
    let degenerate = !(ev.min() > ev.max() * 1e-10);
    if degenerate {
        g += DMatrix::identity(k, k) * 1e-12;
    }
    let sol = g
        .cholesky()
        .ok_or_else(|| Error::Internal("harmonic fit normal equations not positive definite".into()))?
        .solve(&r);
    let coeffs: Vec<f64> = sol.iter().copied().collect();
    let residual = pi.reduce(|x, y, w| {
        if !region.contains(x, y) {
            return 0.0;
        }
        let gr = basis_grads(d, quadratics, x);
        let mut u = [y[0] - x[0], y[1] - x[1]];
        for (c, gv) in coeffs.iter().zip(&gr) {
            u[0] -= c * gv[0];
            u[1] -= c * gv[1];
        }
        w * (u[0] * u[0] + u[1] * u[1])
    });
    Ok(HarmonicFit {
        grad0: coeffs[..d].to_vec(),
        hess0: hess_from(&coeffs),
        coeffs,
        residual,
        zero_residual,
        degenerate,
    })
}

pub fn harmonic_fit(pi: &Coupling, fit_radius: f64) -> Result<HarmonicFit> {
    harmonic_fit_basis(pi, fit_radius, true)
}

/// `exp(-S/2)` for symmetric `S` (row-major `d x d`) via eigendecomposition.
pub fn exp_neg_half(s: &[f64], dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![(-s[0] / 2.0).exp()];
    }
    let m = Matrix2::new(s[0], s[1], s[2], s[3]);
    let eig = SymmetricEigen::new(m);
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| (-l / 2.0).exp()));
    let a = eig.eigenvectors * d * eig.eigenvectors.transpose();
    // Symmetrize away rounding.
    let off = 0.5 * (a[(0, 1)] + a[(1, 0)]);
    vec![a[(0, 0)], off, off, a[(1, 1)]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepOutcome {
    pub scaling_hat: Scaling,
    pub theta: f64,
    pub r: f64,
    pub e_before: f64,
    pub e_after: f64,
    pub d_before: f64,
    pub d_after: f64,
    pub fit: HarmonicFit,
    pub improved: bool,
}

/// Checks `E + D + eps^2/R^2 + delta < eps1` and returns the left side.
pub fn smallness(e: f64, d: f64, epsilon: f64, r: f64, p: &Params) -> Result<f64> {
    let s = e + d + epsilon * epsilon / (r * r) + p.delta;
    if !(s < p.eps1) {
        return Err(Error::Smallness(format!(
            "E + D + eps^2/R^2 + delta = {s:.4e} is not below {}",
            p.eps1
        )));
    }
    Ok(s)
}

/// One improvement step at scale `r`: fit, build `(exp(-S/2), b, gamma, 1)`,
/// apply it and evaluate energy and data term at `theta r`.
pub fn one_step(pi: &Coupling, r: f64, epsilon: f64, p: &Params) -> Result<OneStepOutcome> {
    let theta = p.theta;
    if !(theta > 0.0 && theta < 1.0) {
        return input(format!("theta must lie in (0,1), got {theta}"));
    }
    let (lam, mu) = (&pi.source, &pi.target);
    let e_before = pi.local_energy(r)?;
    let d_before = data_term(lam, mu, r, r_avg(lam, p).max(r_avg(mu, p)))?.d;
    smallness(e_before, d_before, epsilon, r, p)?;

    let fit = harmonic_fit(pi, p.fit_factor * r)?;
    let d = pi.dim();
    let a = exp_neg_half(&fit.hess0, d);
    let b = fit.grad0.clone();
    let mut bp = [0.0; 2];
    bp[..d].copy_from_slice(&b);
    let gamma = mu.density_at(&bp, r_avg(mu, p))?.powf(1.0 / d as f64);
    let s_hat = Scaling::elementary(a, b, gamma, 1.0, &p.windows)?;
    if (s_hat.det() - 1.0).abs() > 1e-8 {
        return Err(Error::Internal(format!("improvement matrix has det {}", s_hat.det())));
    }
    let pi_hat = s_hat.apply_to_coupling(pi, &p.windows)?;
    let r2 = theta * r;
    let e_after = pi_hat.local_energy(r2)?;
    let (lh, mh) = (&pi_hat.source, &pi_hat.target);
    let d_after = data_term(lh, mh, r2, r_avg(lh, p).max(r_avg(mh, p)))?.d;
    Ok(OneStepOutcome {
        scaling_hat: s_hat,
        theta,
        r,
        e_before,
        e_after,
        d_before,
        d_after,
        fit,
        improved: e_after <= e_before,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedEpsilonScale,
    AdmissibilityExit,
    SmallnessViolated,
    MaxLevels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub k: usize,
    pub r: f64,
    /// Composed scaling `t_k` applied to the original plan.
    pub scaling: Scaling,
    pub e: f64,
    pub d: f64,
    pub holder_lambda: f64,
    pub holder_mu: f64,
    pub origin_gap: f64,
    /// Affine-fit defect of the original plan at `r`.
    pub affine_defect: f64,
    /// Improvement step taken from this level, if any.
    pub step: Option<OneStepOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampanatoTrace {
    pub r0: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub levels: Vec<LevelRecord>,
    pub stop_reason: StopReason,
    /// `(slope, intercept)` of the scale-normalized harmonic fit residual
    /// against `E` over the levels that took a step.
    #[serde(default)]
    pub residual_vs_energy: Option<(f64, f64)>,
    pub notes: Vec<String>,
}

/// Note recorded in every trace about the composition law in use.
pub const COMPOSITION_NOTE: &str = "composition s2<>s1 uses A = A1 A2, b = b1 + A1^{-T} b2 / gamma1; \
the alternative (A2 A1, b1 + gamma2 A2 b2) fails the pushforward identity and is not used";

/// Geometric cascade of improvement steps from `r0` down to `c0 * epsilon`.
pub fn campanato_iterate(pi: &Coupling, r0: f64, epsilon: f64, p: &Params) -> Result<CampanatoTrace> {
    let theta = p.theta;
    if !(theta > 0.0 && theta < 1.0) {
        return input(format!("theta must lie in (0,1), got {theta}"));
    }
    if !(r0 > 0.0) || !(epsilon > 0.0) {
        return domain("R0 and epsilon must be positive");
    }
    let w = &p.windows;
    let mut t = Scaling::normalizing(&pi.source, &pi.target, r_avg(&pi.source, p).max(r_avg(&pi.target, p)), w)?;
    let mut levels = Vec::new();
    let mut r = r0;
    let mut stop = StopReason::MaxLevels;
    for k in 0..p.max_levels {
        if r <= p.c0 * epsilon {
            stop = StopReason::ReachedEpsilonScale;
            break;
        }
        let pik = t.apply_to_coupling(pi, w)?;
        let (lk, mk) = (&pik.source, &pik.target);
        let dt = data_term(lk, mk, r, r_avg(lk, p).max(r_avg(mk, p)))?;
        let mut rec = LevelRecord {
            k,
            r,
            scaling: t.clone(),
            e: pik.local_energy(r)?,
            d: dt.d,
            holder_lambda: dt.holder_lambda,
            holder_mu: dt.holder_mu,
            origin_gap: dt.origin_gap,
            affine_defect: pi.affine_fit(r, p.beta)?.defect,
            step: None,
        };
        let step = match one_step(&pik, r, epsilon, p) {
            Ok(s) => s,
            Err(Error::Smallness(_)) => {
                levels.push(rec);
                stop = StopReason::SmallnessViolated;
                break;
            }
            Err(Error::Admissibility(_)) => {
                levels.push(rec);
                stop = StopReason::AdmissibilityExit;
                break;
            }
            Err(e) => return Err(e),
        };
        let next = Scaling::compose(&step.scaling_hat, &t, w);
        rec.step = Some(step);
        levels.push(rec);
        match next {
            Ok(n) => t = n,
            Err(Error::Admissibility(_)) => {
                stop = StopReason::AdmissibilityExit;
                break;
            }
            Err(e) => return Err(e),
        }
        r *= theta;
    }
    log::info!("{COMPOSITION_NOTE}");
    let d = pi.dim() as i32;
    let (es, res): (Vec<f64>, Vec<f64>) = levels
        .iter()
        .filter_map(|l| l.step.as_ref())
        .map(|s| (s.e_before, s.fit.residual / (p.fit_factor * s.r).powi(d + 2)))
        .unzip();
    Ok(CampanatoTrace {
        r0,
        theta,
        epsilon,
        levels,
        stop_reason: stop,
        residual_vs_energy: linear_regression(&es, &res),
        notes: vec![COMPOSITION_NOTE.to_string()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub r: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    /// `sum_{#_R} |x - y|^2 pi`.
    pub lhs: f64,
    /// `pi(P_R) * OT(normalized marginals of pi on P_R)`.
    pub competitor_cost: f64,
    pub defect: f64,
    pub pr_mass: f64,
    /// `eps^2 pi(#_{Lambda R})`.
    pub eps2_mass: f64,
    /// `sum_{#_{2R}} |x - y|^2 pi`.
    pub energy_2r: f64,
    pub degenerate: bool,
}

/// Local quadratic cost against the optimal cost of the localized marginals.
pub fn quasimin_defect(pi: &Coupling, r: f64, lambda: f64, epsilon: f64) -> Result<DefectReport> {
    if !(r > 0.0) {
        return domain(format!("radius must be positive, got {r}"));
    }
    if !(lambda > 1.0) {
        return input(format!("Lambda must exceed 1, got {lambda}"));
    }
    let lhs = pi.second_moment_in(&Region::HashR(r));
    let eps2_mass = epsilon * epsilon * pi.mass_in(&Region::HashR(lambda * r));
    let energy_2r = pi.second_moment_in(&Region::HashR(2.0 * r));
    let local = pi.restrict(&Region::PR(r, lambda));
    let pr_mass = local.total_mass();
    if !(pr_mass > 0.0) {
        return Ok(DefectReport {
            r,
            lambda,
            lhs: 0.0,
            competitor_cost: 0.0,
            defect: 0.0,
            pr_mass: 0.0,
            eps2_mass: 0.0,
            energy_2r: 0.0,
            degenerate: true,
        });
    }
    let keep = |weights: Vec<f64>, atoms: &Atoms| -> Result<Atoms> {
        let idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        Atoms::from_points(
            atoms.dim,
            idx.iter().map(|&i| atoms.points[i]).collect(),
            idx.iter().map(|&i| weights[i] / pr_mass).collect(),
            atoms.cell_volume,
            atoms.alpha,
        )
    };
    let lbar = keep(local.row_sums(), &pi.source)?;
    let mut mbar = keep(local.col_sums(), &pi.target)?;
    // Both are probability measures up to summation order.
    let fix = lbar.mass() / mbar.mass();
    mbar.weights.iter_mut().for_each(|w| *w *= fix);
    let ot = exact_ot(&lbar, &mbar)?;
    let competitor_cost = pr_mass * ot.cost;
    Ok(DefectReport {
        r,
        lambda,
        lhs,
        competitor_cost,
        defect: lhs - competitor_cost,
        pr_mass,
        eps2_mass,
        energy_2r,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTrajRow {
    pub epsilon: f64,
    pub energy_ratio: f64,
    pub mass_ratio: f64,
    pub long_energy: f64,
    pub long_mass: f64,
    pub e_5r: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTrajTable {
    pub r: f64,
    pub rows: Vec<LongTrajRow>,
    /// Slope of `log(mass_ratio)` against `R^2/eps^2`.
    pub mass_slope: Option<f64>,
    pub energy_slope: Option<f64>,
}

fn hull_contains_ball(m: &Atoms, r: f64) -> bool {
    let mut probes = vec![[r, 0.0], [-r, 0.0]];
    if m.dim == 2 {
        probes.push([0.0, r]);
        probes.push([0.0, -r]);
    }
    probes.iter().all(|p| m.hull.contains(p))
}

/// Long-trajectory energy and mass on `#_{4R}` with `|x - y| >= long_factor R`,
/// relative to the energy and normalized mass on `#_{5R}`.
pub fn long_traj_experiment(
    lam: &Atoms,
    mu: &Atoms,
    r: f64,
    eps_ladder: &[f64],
    solver: &SinkhornConfig,
    p: &Params,
) -> Result<LongTrajTable> {
    let reach = p.long_factor * r;
    if !hull_contains_ball(lam, reach) || !hull_contains_ball(mu, reach) {
        return domain(format!("grid hull does not contain the ball of radius {reach}"));
    }
    let d = lam.dim as i32;
    let rows = eps_ladder
        .iter()
        .map(|&eps| {
            let mut cfg = solver.clone();
            cfg.epsilon = eps;
            let res = sinkhorn(lam, mu, &cfg)?;
            let st = res.plan.long_trajectory_stats(4.0 * r, reach)?;
            let e5 = res.plan.local_energy(5.0 * r)?;
            let m5 = res.plan.mass_in(&Region::HashR(5.0 * r)) / (5.0 * r).powi(d);
            Ok(LongTrajRow {
                epsilon: eps,
                energy_ratio: st.energy / e5,
                mass_ratio: st.mass / m5,
                long_energy: st.energy,
                long_mass: st.mass,
                e_5r: e5,
                iterations: res.iterations,
                converged: res.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|row| r * r / (row.epsilon * row.epsilon)).collect();
    let slope = |ys: Vec<f64>| linear_regression(&xs, &ys).map(|(s, _)| s);
    Ok(LongTrajTable {
        r,
        mass_slope: slope(rows.iter().map(|row| row.mass_ratio.ln()).collect()),
        energy_slope: slope(rows.iter().map(|row| row.energy_ratio.ln()).collect()),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub epsilon: f64,
    pub ot_eps: f64,
    pub ot: f64,
    /// `(OT_eps - OT - d/2 eps^2 log(eps^-2)) / eps^2`.
    pub remainder: f64,
    pub under_resolved: bool,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub rows: Vec<ExpansionRow>,
    /// Slope of `(OT_eps - OT)/eps^2` against `log(eps^-2)` over resolved rows.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Small-epsilon expansion of the entropic cost, per unit mass.
pub fn expansion_experiment(lam: &Atoms, mu: &Atoms, eps_ladder: &[f64], solver: &SinkhornConfig) -> Result<ExpansionTable> {
    let unit = |m: &Atoms| {
        let t = m.mass();
        m.with_weights(m.weights.iter().map(|w| w / t).collect())
    };
    let (l, m) = (unit(lam), unit(mu));
    let ot = exact_ot(&l, &m)?.cost;
    let d = lam.dim as f64;
    let h = lam.spacing().max(mu.spacing());
    let rows = eps_ladder
        .iter()
        .map(|&eps| {
            let mut cfg = solver.clone();
            cfg.epsilon = eps;
            let res = sinkhorn(&l, &m, &cfg)?;
            let ot_eps = entropic_cost(&res);
            let e2 = eps * eps;
            Ok(ExpansionRow {
                epsilon: eps,
                ot_eps,
                ot,
                remainder: (ot_eps - ot - 0.5 * d * e2 * (1.0 / e2).ln()) / e2,
                under_resolved: eps < 3.0 * h,
                iterations: res.iterations,
                converged: res.converged,
            })
        })
        .collect::<Result<Vec<ExpansionRow>>>()?;
    let ok: Vec<&ExpansionRow> = rows.iter().filter(|r| !r.under_resolved).collect();
    let xs: Vec<f64> = ok.iter().map(|r| (1.0 / (r.epsilon * r.epsilon)).ln()).collect();
    let ys: Vec<f64> = ok.iter().map(|r| (r.ot_eps - r.ot) / (r.epsilon * r.epsilon)).collect();
    let fit = linear_regression(&xs, &ys);
    Ok(ExpansionTable {
        rows,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLemmaRow {
    pub rho: f64,
    pub mass: f64,
    pub bound: f64,
    /// `mass * rho^(d+2) / (Delta_R R^d)`; absent when `Delta_R = 0`.
    pub constant: Option<f64>,
    /// Whether `E(pi, R) < rho^(d+2) < R^(d+2)` holds.
    pub scales_ordered: bool,
}

/// Mass of `#_{R-1}` pairs with `|x - y| >= rho` against `Delta_R R^d / rho^(d+2)`.
pub fn soft_lemma_check(pi: &Coupling, r: f64, rho_ladder: &[f64], delta_r: f64) -> Result<Vec<SoftLemmaRow>> {
    if !(r > 0.0) {
        return domain(format!("radius must be positive, got {r}"));
    }
    if !(delta_r >= 0.0) {
        return domain(format!("Delta_R must be nonnegative, got {delta_r}"));
    }
    let d = pi.dim() as i32;
    let e = pi.local_energy(r)?;
    let inner = r - 1.0;
    Ok(rho_ladder
        .iter()
        .map(|&rho| {
            let mass = if inner > 0.0 {
                pi.mass_in(&Region::LongTraj(inner, rho))
            } else {
                0.0
            };
            let rd2 = rho.powi(d + 2);
            let bound = delta_r * r.powi(d) / rd2;
            let scales_ordered = e < rd2 && rd2 < r.powi(d + 2);
            if !scales_ordered {
                log::warn!("soft lemma scale ordering fails at rho = {rho}");
            }
            SoftLemmaRow {
                rho,
                mass,
                bound,
                constant: (delta_r > 0.0).then(|| mass * rd2 / (delta_r * r.powi(d))),
                scales_ordered,
            }
        })
        .collect())
}

/// Smallest `C` with `defect(r) <= C (e0_d0 + eps^2/r^2)` over the `(r, defect)`
/// pairs; `None` when there are none.
pub fn decay_constant(rows: &[(f64, f64)], e0_d0: f64, epsilon: f64) -> Option<f64> {
    rows.iter()
        .map(|&(r, defect)| defect / (e0_d0 + epsilon * epsilon / (r * r)))
        .reduce(f64::max)
}

/// Coupling with both point sets multiplied by `factor` (cell volumes adjusted).
pub fn dilate(pi: &Coupling, factor: f64) -> Result<Coupling> {
    let s = Scaling {
        a: {
            let d = pi.dim();
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                a[i * d + i] = 1.0 / factor;
            }
            a
        },
        b: vec![0.0; pi.dim()],
        gamma: factor * factor,
        kappa: 1.0,
    };
    let unbounded = Windows {
        gamma: [0.0, f64::INFINITY],
        kappa: [0.0, f64::INFINITY],
    };
    s.apply_to_coupling(pi, &unbounded)
}
