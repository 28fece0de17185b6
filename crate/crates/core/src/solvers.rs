//! Entropic optimal transport (log-domain Sinkhorn, regularization `eps^2`)
//! and exact quadratic transport by a transportation-network simplex.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::Coupling;
use crate::error::{input, Error, Result};
use crate::measure::{Atoms, Hull};
use crate::numeric::{dist2, ksum, Point};

/// Relative tolerance on the total-mass mismatch accepted at solver entry.
pub const MASS_TOL: f64 = 1e-12;

/// Fails with an input error naming the relative gap when masses differ.
pub fn check_equal_mass(lam: &Atoms, mu: &Atoms) -> Result<f64> {
    let (a, b) = (lam.mass(), mu.mass());
    let gap = (a - b).abs() / a.max(b);
    if gap > MASS_TOL {
        return input(format!(
            "total masses differ: {a} vs {b} (relative gap {gap:.3e} exceeds {MASS_TOL:e})"
        ));
    }
    if lam.dim != mu.dim {
        return input("source and target dimensions differ");
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Potentials are recentred every this many sweeps.
    #[serde(default = "one")]
    pub stabilize_every: usize,
    /// Warm-start from coarser epsilon (halving) when the target is small
    /// compared to the support diameter.
    #[serde(default = "yes")]
    pub ladder: bool,
}

fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    100_000
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            tol: default_tol(),
            max_iter: default_max_iter(),
            stabilize_every: 1,
            ladder: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: Coupling,
    /// Potentials for the Gibbs form with respect to the (unnormalized)
    /// product of the marginals.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// Maximum of row and column total-variation errors, relative to the mass.
    pub marg_err: f64,
    pub converged: bool,
    pub primal_cost: f64,
    /// Relative entropy of the plan with respect to `lam (x) mu`.
    pub entropy: f64,
    pub mass: f64,
    /// Row error of the final stage, sampled every 10 sweeps.
    pub err_history: Vec<f64>,
}

struct Stage {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    stopped: bool,
    history: Vec<f64>,
}

/// `-eps2 * log sum_j exp((pot_j - |x - y_j|^2) / eps2 + logw_j)` for each `x`.
fn softmin(xs: &[Point], ys: &[Point], pot: &[f64], logw: &[f64], eps2: f64) -> Vec<f64> {
    let shifted: Vec<f64> = pot.iter().zip(logw).map(|(p, l)| p / eps2 + l).collect();
    xs.par_iter()
        .map(|x| {
            let mut max = f64::NEG_INFINITY;
            for (y, s) in ys.iter().zip(&shifted) {
                let v = s - dist2(x, y) / eps2;
                if v > max {
                    max = v;
                }
            }
            // Terms below e^-50 of the largest one cannot change the sum in
            // double precision; skipping their exp() is the main saving at small eps.
            let mut sum = 0.0;
            for (y, s) in ys.iter().zip(&shifted) {
                let v = s - dist2(x, y) / eps2 - max;
                if v > -50.0 {
                    sum += v.exp();
                }
            }
            -eps2 * (max + sum.ln())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sinkhorn_stage(
    xs: &[Point],
    ys: &[Point],
    a: &[f64],
    loga: &[f64],
    logb: &[f64],
    eps: f64,
    tol: f64,
    max_iter: usize,
    stabilize_every: usize,
    mut f: Vec<f64>,
    mut g: Vec<f64>,
) -> Stage {
    let eps2 = eps * eps;
    let mut history = Vec::new();
    let mut it = 0;
    let mut stopped = false;
    while it < max_iter {
        let f_new = softmin(xs, ys, &g, logb, eps2);
        // Row marginal of the current plan is a_i exp((f_i - f_new_i)/eps2).
        let err = ksum(
            a.iter()
                .zip(f.iter().zip(&f_new))
                .map(|(ai, (fo, fn_))| ai * (((fo - fn_) / eps2).exp() - 1.0).abs()),
        );
        if it % 10 == 0 {
            history.push(err);
        }
        // Half the tolerance leaves room for rounding in the materialized plan.
        if err <= 0.5 * tol {
            stopped = true;
            break;
        }
        f = f_new;
        g = softmin(ys, xs, &f, loga, eps2);
        it += 1;
        if stabilize_every > 0 && it % stabilize_every == 0 {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            f.iter_mut().for_each(|v| *v -= mean);
            g.iter_mut().for_each(|v| *v += mean);
        }
    }
    Stage {
        f,
        g,
        iterations: it,
        stopped,
        history,
    }
}

/// Log-domain Sinkhorn for `min <c, pi> + eps^2 KL(pi | lam (x) mu)` with
/// `c = |x - y|^2`. Both marginals are normalized to probability measures
/// internally; the returned plan, potentials and entropy refer to the
/// original masses.
pub fn sinkhorn(lam: &Atoms, mu: &Atoms, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    let eps = cfg.epsilon;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("epsilon must be positive, got {eps}")));
    }
    if !(cfg.tol > 0.0) {
        return input("tolerance must be positive");
    }
    let m = check_equal_mass(lam, mu)?;
    let a: Vec<f64> = lam.weights.iter().map(|w| w / m).collect();
    let mb = mu.mass();
    let b: Vec<f64> = mu.weights.iter().map(|w| w / mb).collect();
    let loga: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let logb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let (xs, ys) = (&lam.points, &mu.points);

    let mut all = xs.clone();
    all.extend_from_slice(ys);
    let bb = Hull::bounding(lam.dim, &all);
    let diam = (dist2(&bb.edges[0], &[0.0; 2]) + dist2(&bb.edges[1], &[0.0; 2])).sqrt();
    let mut ladder = vec![eps];
    if cfg.ladder {
        while ladder.last().copied().unwrap_or(eps) < 0.25 * diam {
            ladder.push(ladder.last().copied().unwrap_or(eps) * 2.0);
        }
    }
    ladder.reverse();

    let mut f = vec![0.0; xs.len()];
    let mut g = vec![0.0; ys.len()];
    let mut total_it = 0;
    let mut last = None;
    for (k, &e) in ladder.iter().enumerate() {
        let final_stage = k + 1 == ladder.len();
        let tol = if final_stage { cfg.tol } else { cfg.tol.max(1e-5) };
        let budget = cfg.max_iter.saturating_sub(total_it);
        let st = sinkhorn_stage(xs, ys, &a, &loga, &logb, e, tol, budget, cfg.stabilize_every, f, g);
        total_it += st.iterations;
        log::debug!("sinkhorn stage eps={e} iterations={} stopped={}", st.iterations, st.stopped);
        f = st.f.clone();
        g = st.g.clone();
        last = Some(st);
    }
    let st = last.expect("ladder is nonempty");

    let eps2 = eps * eps;
    let nt = ys.len();
    let mut mass = vec![0.0; xs.len() * nt];
    mass.par_chunks_mut(nt).enumerate().for_each(|(i, row)| {
        for (j, p) in row.iter_mut().enumerate() {
            *p = m * ((f[i] + g[j] - dist2(&xs[i], &ys[j])) / eps2 + loga[i] + logb[j]).exp();
        }
    });
    // Gibbs form with respect to the unnormalized product measure.
    // pi = m exp((f + g - c)/eps2) (lam/m)(mu/mb) = exp((f - eps2 ln mb + g - c)/eps2) lam mu.
    let f_out: Vec<f64> = f.iter().map(|v| v - eps2 * mb.ln()).collect();
    let g_out = g;
    let plan = Coupling::new(lam.clone(), mu.clone(), mass)?;
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let tv = |got: &[f64], want: &[f64]| ksum(got.iter().zip(want).map(|(x, y)| (x - y).abs())) / m;
    let marg_err = tv(&rows, &lam.weights).max(tv(&cols, &mu.weights));
    let primal_cost = plan.reduce(|x, y, p| dist2(x, y) * p);
    let dual = ksum(f_out.iter().zip(&rows).map(|(f, r)| f * r)) + ksum(g_out.iter().zip(&cols).map(|(g, c)| g * c));
    let entropy = (dual - primal_cost) / eps2;
    log::debug!(
        "sinkhorn normalized by mass {m}: cost scales by m, entropy shifts by -m log m = {}",
        -m * m.ln()
    );
    Ok(SinkhornResult {
        plan,
        f: f_out,
        g: g_out,
        epsilon: eps,
        iterations: total_it,
        marg_err,
        converged: st.stopped && marg_err <= cfg.tol,
        primal_cost,
        entropy,
        mass: m,
        err_history: st.history,
    })
}

/// `primal_cost + eps^2 * entropy`.
pub fn entropic_cost(res: &SinkhornResult) -> f64 {
    res.primal_cost + res.epsilon * res.epsilon * res.entropy
}

/// Relative entropy by direct summation of `pi log(pi / (lam mu))`.
pub fn entropy_direct(plan: &Coupling) -> f64 {
    let nt = plan.n_target();
    let rows: Vec<f64> = plan
        .mass
        .par_chunks(nt)
        .zip(plan.source.weights.par_iter())
        .map(|(row, l)| {
            ksum(row.iter().zip(&plan.target.weights).filter(|(p, _)| **p > 0.0).map(|(p, m)| p * (p.ln() - l.ln() - m.ln())))
        })
        .collect();
    ksum(rows)
}

/// Samples `n_samples` quadruples `(x, x', y, y')` and compares
/// `log pi(x,y) + log pi(x',y') - log pi(x,y') - log pi(x',y)` with
/// `-(|x-y|^2 + |x'-y'|^2 - |x'-y|^2 - |x-y'|^2) / eps^2`.
/// Returns the largest `|lhs - rhs| / max(1, |rhs|)`. Entries below the
/// smallest normal float are skipped and resampled.
pub fn gibbs_identity_check(plan: &Coupling, epsilon: f64, n_samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, nt) = (plan.n_source(), plan.n_target());
    let eps2 = epsilon * epsilon;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < n_samples && attempts < 100 * n_samples.max(1) {
        attempts += 1;
        let (i, k) = (rng.random_range(0..ns), rng.random_range(0..ns));
        let (j, l) = (rng.random_range(0..nt), rng.random_range(0..nt));
        let e = [plan.at(i, j), plan.at(k, l), plan.at(i, l), plan.at(k, j)];
        if e.iter().any(|v| *v < f64::MIN_POSITIVE) {
            continue;
        }
        let lhs = e[0].ln() + e[1].ln() - e[2].ln() - e[3].ln();
        let (x, xp) = (&plan.source.points[i], &plan.source.points[k]);
        let (y, yp) = (&plan.target.points[j], &plan.target.points[l]);
        let c = dist2(x, y) + dist2(xp, yp) - dist2(xp, y) - dist2(x, yp);
        let rhs = if eps2.is_infinite() { 0.0 } else { -c / eps2 };
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        done += 1;
    }
    worst
}

#[derive(Clone, Debug)]
pub struct ExactOTResult {
    pub plan: Coupling,
    pub cost: f64,
    pub method: String,
    pub pivots: usize,
    /// `|primal - dual| / max(primal, 1e-300)`.
    pub duality_gap: f64,
    /// Largest negative reduced cost over all cells, relative to the cost scale.
    pub max_dual_violation: f64,
}

/// Largest support accepted by [`exact_ot`].
pub const EXACT_OT_MAX_ATOMS: usize = 4096;

/// Exact quadratic transport between two atomized measures.
pub fn exact_ot(lam: &Atoms, mu: &Atoms) -> Result<ExactOTResult> {
    let m = check_equal_mass(lam, mu)?;
    let si: Vec<usize> = (0..lam.len()).filter(|&i| lam.weights[i] > 0.0).collect();
    let ti: Vec<usize> = (0..mu.len()).filter(|&j| mu.weights[j] > 0.0).collect();
    if si.len() > EXACT_OT_MAX_ATOMS || ti.len() > EXACT_OT_MAX_ATOMS {
        return input(format!(
            "exact transport supports at most {EXACT_OT_MAX_ATOMS} atoms per side, got {} and {}",
            si.len(),
            ti.len()
        ));
    }
    let supply: Vec<f64> = si.iter().map(|&i| lam.weights[i]).collect();
    let scale = m / mu.mass();
    let demand: Vec<f64> = ti.iter().map(|&j| mu.weights[j] * scale).collect();
    let xs: Vec<Point> = si.iter().map(|&i| lam.points[i]).collect();
    let ys: Vec<Point> = ti.iter().map(|&j| mu.points[j]).collect();
    let sol = NetworkSimplex::new(&xs, &ys, &supply, &demand).solve()?;

    let nt = mu.len();
    let mut mass = vec![0.0; lam.len() * nt];
    for &(i, j, fl) in &sol.basis {
        mass[si[i] * nt + ti[j]] += fl.max(0.0);
    }
    let plan = Coupling::new(lam.clone(), mu.clone(), mass)?;
    let cost = plan.reduce(|x, y, p| dist2(x, y) * p);
    let dual = ksum(sol.u.iter().zip(&supply).map(|(u, a)| u * a)) + ksum(sol.v.iter().zip(&demand).map(|(v, b)| v * b));
    let duality_gap = (cost - dual).abs() / cost.abs().max(1e-300);
    Ok(ExactOTResult {
        plan,
        cost,
        method: "network_simplex".into(),
        pivots: sol.pivots,
        duality_gap: if cost == 0.0 { (cost - dual).abs() } else { duality_gap },
        max_dual_violation: sol.max_violation,
    })
}

struct SimplexSolution {
    basis: Vec<(usize, usize, f64)>,
    u: Vec<f64>,
    v: Vec<f64>,
    pivots: usize,
    max_violation: f64,
}

/// Transportation simplex on the bipartite network. Nodes `0..m` are sources,
/// `m..m+n` targets. The spanning tree is kept strongly feasible (zero-flow
/// arcs point away from the root), which rules out cycling under degeneracy.
struct NetworkSimplex<'a> {
    xs: &'a [Point],
    ys: &'a [Point],
    m: usize,
    n: usize,
    basis: Vec<(usize, usize, f64)>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

const NONE: usize = usize::MAX;

impl<'a> NetworkSimplex<'a> {
    fn new(xs: &'a [Point], ys: &'a [Point], supply: &[f64], demand: &[f64]) -> Self {
        let (m, n) = (xs.len(), ys.len());
        // Northwest corner; ties advance the column so zero-flow arcs leave
        // their source parent.
        let mut basis = Vec::with_capacity(m + n - 1);
        let (mut a, mut b) = (supply[0], demand[0]);
        let (mut i, mut j) = (0, 0);
        loop {
            let q = a.min(b);
            basis.push((i, j, q));
            a -= q;
            b -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && a < b) {
                i += 1;
                a = supply[i];
            } else {
                j += 1;
                b = demand[j];
            }
        }
        Self {
            xs,
            ys,
            m,
            n,
            basis,
            parent: vec![NONE; m + n],
            parent_arc: vec![NONE; m + n],
            depth: vec![0; m + n],
            u: vec![0.0; m],
            v: vec![0.0; n],
        }
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        dist2(&self.xs[i], &self.ys[j])
    }

    /// Rebuilds parents, depths and potentials from the basis (root: source 0).
    fn rebuild(&mut self) {
        let nn = self.m + self.n;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nn];
        for (k, &(i, j, _)) in self.basis.iter().enumerate() {
            adj[i].push(k);
            adj[self.m + j].push(k);
        }
        self.parent.iter_mut().for_each(|p| *p = NONE);
        let mut seen = vec![false; nn];
        seen[0] = true;
        self.depth[0] = 0;
        self.u[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &k in &adj[node] {
                let (i, j, _) = self.basis[k];
                let other = if node < self.m { self.m + j } else { i };
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                self.parent[other] = node;
                self.parent_arc[other] = k;
                self.depth[other] = self.depth[node] + 1;
                let c = self.cost(i, j);
                if other >= self.m {
                    self.v[j] = c - self.u[i];
                } else {
                    self.u[i] = c - self.v[j];
                }
                queue.push_back(other);
            }
        }
    }

    fn solve(mut self) -> Result<SimplexSolution> {
        let (m, n) = (self.m, self.n);
        let cmax = self
            .xs
            .iter()
            .flat_map(|x| self.ys.iter().map(move |y| dist2(x, y)))
            .fold(0.0, f64::max)
            .max(1e-300);
        let tol = 1e-12 * cmax;
        let cells = m * n;
        let block = ((cells as f64).sqrt() as usize).max(64).min(cells);
        let mut next = 0usize;
        let mut pivots = 0usize;
        let max_pivots = 50 * cells + 1000;
        self.rebuild();
        loop {
            // Block pricing, ties to the first cell scanned.
            let mut entering = None;
            let mut scanned = 0;
            while scanned < cells {
                let mut best = (-tol, NONE);
                let end = (scanned + block).min(cells);
                for s in scanned..end {
                    let k = (next + s) % cells;
                    let (i, j) = (k / n, k % n);
                    let rc = self.cost(i, j) - self.u[i] - self.v[j];
                    if rc < best.0 {
                        best = (rc, k);
                    }
                }
                scanned = end;
                if best.1 != NONE {
                    entering = Some(best.1);
                    next = (best.1 + 1) % cells;
                    break;
                }
            }
            let Some(k) = entering else { break };
            let (ei, ej) = (k / n, k % n);
            self.pivot(ei, ej);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::Internal("network simplex exceeded its pivot budget".into()));
            }
        }
        let mut max_violation: f64 = 0.0;
        for i in 0..m {
            for j in 0..n {
                max_violation = max_violation.max(-(self.cost(i, j) - self.u[i] - self.v[j]));
            }
        }
        Ok(SimplexSolution {
            basis: self.basis,
            u: self.u,
            v: self.v,
            pivots,
            max_violation: max_violation / cmax,
        })
    }

    fn pivot(&mut self, ei: usize, ej: usize) {
        let m = self.m;
        // Paths from both endpoints to the apex.
        let (mut a, mut b) = (ei, m + ej);
        let mut up_src = Vec::new();
        let mut up_tgt = Vec::new();
        while a != b {
            if self.depth[a] >= self.depth[b] {
                up_src.push(a);
                a = self.parent[a];
            } else {
                up_tgt.push(b);
                b = self.parent[b];
            }
        }
        // Cycle oriented along the entering arc: apex -> ... -> source ei,
        // ei -> target ej, target ej -> ... -> apex. Each entry: (arc, forward).
        let mut cycle: Vec<(usize, bool)> = Vec::with_capacity(up_src.len() + up_tgt.len() + 1);
        for &node in up_src.iter().rev() {
            // Traversed parent -> node; forward iff that is source -> target.
            cycle.push((self.parent_arc[node], self.parent[node] < m));
        }
        cycle.push((NONE, true));
        for &node in &up_tgt {
            // Traversed node -> parent; forward iff node is a source.
            cycle.push((self.parent_arc[node], node < m));
        }
        let mut theta = f64::INFINITY;
        for &(arc, fwd) in &cycle {
            if !fwd {
                theta = theta.min(self.basis[arc].2);
            }
        }
        // Strongly feasible rule: last blocking arc along the orientation.
        let leaving = cycle
            .iter()
            .rev()
            .find(|(arc, fwd)| !fwd && self.basis[*arc].2 <= theta)
            .map(|(arc, _)| *arc)
            .expect("transportation cycle has a backward arc");
        for &(arc, fwd) in &cycle {
            if arc == NONE {
                continue;
            }
            if fwd {
                self.basis[arc].2 += theta;
            } else {
                self.basis[arc].2 -= theta;
            }
        }
        self.basis[leaving] = (ei, ej, theta);
        self.rebuild();
    }
}
