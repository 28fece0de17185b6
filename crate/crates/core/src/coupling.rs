//! Dense couplings between two atomized measures, region restrictions and the
//! local quantities built on them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Error, Result};
use crate::measure::{Atoms, GridMeasure, GridSpec};
use crate::numeric::{dist2, in_ball0, ksum, norm, KahanSum, Point};

/// A dense nonnegative mass matrix, row-major over (source atom, target atom).
/// Marginals are not enforced on construction; see [`Coupling::check_marginals`].
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub source: Atoms,
    pub target: Atoms,
    pub mass: Vec<f64>,
}

/// Pair regions used for localization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    /// `|x| <= R` or `|y| <= R`.
    HashR(f64),
    /// `(|x| <= R and |y| <= Lambda R)` or `(|x| <= Lambda R and |y| <= R)`.
    PR(f64, f64),
    /// Pairs in `HashR(R)` with `|x - y| >= threshold`.
    LongTraj(f64, f64),
    /// `|x| <= R_x` and `|y| <= R_y`.
    Ball2(f64, f64),
    Complement(Box<Region>),
}

impl Region {
    pub fn contains(&self, x: &Point, y: &Point) -> bool {
        match self {
            Region::HashR(r) => in_ball0(x, *r) || in_ball0(y, *r),
            Region::PR(r, l) => {
                (in_ball0(x, *r) && in_ball0(y, l * r)) || (in_ball0(x, l * r) && in_ball0(y, *r))
            }
            Region::LongTraj(r, t) => {
                (in_ball0(x, *r) || in_ball0(y, *r)) && dist2(x, y).sqrt() >= *t
            }
            Region::Ball2(rx, ry) => in_ball0(x, *rx) && in_ball0(y, *ry),
            Region::Complement(inner) => !inner.contains(x, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub max_row_err: f64,
    pub max_col_err: f64,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTrajStats {
    pub energy: f64,
    pub mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingStats {
    pub crossing_energy: f64,
    pub crossing_mass: f64,
}

/// Best affine map `y ~ A x + b` in weighted least squares over `#_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    /// Row-major `d x d`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub defect: f64,
    pub beta: f64,
    pub r: f64,
    /// Set when `#_r` carries no mass or the normal equations needed a ridge.
    pub degenerate: bool,
}

impl Coupling {
    pub fn new(source: Atoms, target: Atoms, mass: Vec<f64>) -> Result<Self> {
        if source.dim != target.dim {
            return input("source and target dimensions differ");
        }
        if mass.len() != source.len() * target.len() {
            return input(format!(
                "mass matrix has {} entries, expected {} x {}",
                mass.len(),
                source.len(),
                target.len()
            ));
        }
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return input("coupling entries must be finite and nonnegative");
        }
        Ok(Self {
            source,
            target,
            mass,
        })
    }

    pub fn from_grid(lam: &GridMeasure, mu: &GridMeasure, mass: Vec<f64>) -> Result<Self> {
        Self::new(lam.atoms(), mu.atoms(), mass)
    }

    /// Product coupling `lam (x) mu / |mu|`.
    pub fn product(source: Atoms, target: Atoms) -> Result<Self> {
        let tm = target.mass();
        let mut mass = Vec::with_capacity(source.len() * target.len());
        for a in &source.weights {
            for b in &target.weights {
                mass.push(a * b / tm);
            }
        }
        Self::new(source, target, mass)
    }

    /// The identity coupling of a measure with itself.
    pub fn diagonal(m: Atoms) -> Result<Self> {
        let n = m.len();
        let mut mass = vec![0.0; n * n];
        for (i, w) in m.weights.iter().enumerate() {
            mass[i * n + i] = *w;
        }
        Self::new(m.clone(), m, mass)
    }

    pub fn dim(&self) -> usize {
        self.source.dim
    }

    pub fn n_source(&self) -> usize {
        self.source.len()
    }

    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.n_target() + j]
    }

    /// Deterministic reduction of `f(x, y, m)` over all entries: rows in
    /// parallel with compensated sums, rows combined in index order.
    pub fn reduce(&self, f: impl Fn(&Point, &Point, f64) -> f64 + Sync) -> f64 {
        let nt = self.n_target();
        let rows: Vec<f64> = self
            .mass
            .par_chunks(nt)
            .zip(self.source.points.par_iter())
            .map(|(row, x)| {
                let mut acc = KahanSum::new();
                for (m, y) in row.iter().zip(&self.target.points) {
                    if *m != 0.0 {
                        acc.add(f(x, y, *m));
                    }
                }
                acc.value()
            })
            .collect();
        ksum(rows)
    }

    pub fn total_mass(&self) -> f64 {
        self.reduce(|_, _, m| m)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass
            .par_chunks(self.n_target())
            .map(|row| ksum(row.iter().copied()))
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let nt = self.n_target();
        let mut acc = vec![KahanSum::new(); nt];
        for row in self.mass.chunks(nt) {
            for (a, m) in acc.iter_mut().zip(row) {
                a.add(*m);
            }
        }
        acc.iter().map(|a| a.value()).collect()
    }

    /// Per-row and per-column relative errors `|sum - weight| / weight`.
    /// Rows whose prescribed weight is zero are measured relative to the total.
    pub fn check_marginals(&self, tol: f64) -> MarginalReport {
        let rel = |got: &[f64], want: &[f64]| {
            let total: f64 = want.iter().sum();
            got.iter()
                .zip(want)
                .map(|(g, w)| {
                    let denom = if *w > 0.0 { *w } else { total };
                    (g - w).abs() / denom
                })
                .fold(0.0, f64::max)
        };
        let max_row_err = rel(&self.row_sums(), &self.source.weights);
        let max_col_err = rel(&self.col_sums(), &self.target.weights);
        MarginalReport {
            max_row_err,
            max_col_err,
            pass: max_row_err <= tol && max_col_err <= tol,
        }
    }

    /// Entrywise restriction to `region`; atoms are kept.
    pub fn restrict(&self, region: &Region) -> Coupling {
        let nt = self.n_target();
        let mut mass = self.mass.clone();
        mass.par_chunks_mut(nt)
            .zip(self.source.points.par_iter())
            .for_each(|(row, x)| {
                for (m, y) in row.iter_mut().zip(&self.target.points) {
                    if !region.contains(x, y) {
                        *m = 0.0;
                    }
                }
            });
        Coupling {
            source: self.source.clone(),
            target: self.target.clone(),
            mass,
        }
    }

    pub fn mass_in(&self, region: &Region) -> f64 {
        self.reduce(|x, y, m| if region.contains(x, y) { m } else { 0.0 })
    }

    /// `sum_{region} |x - y|^2 pi(x, y)`.
    pub fn second_moment_in(&self, region: &Region) -> f64 {
        self.reduce(|x, y, m| if region.contains(x, y) { dist2(x, y) * m } else { 0.0 })
    }

    /// `E(pi, R) = R^-(d+2) sum_{#_R} |x - y|^2 pi`.
    pub fn local_energy(&self, r: f64) -> Result<f64> {
        check_radius(r)?;
        Ok(self.second_moment_in(&Region::HashR(r)) / r.powi(self.dim() as i32 + 2))
    }

    /// Energy and mass on `#_R` restricted to `|x - y| >= threshold`,
    /// normalized by `R^(d+2)` and `R^d` respectively.
    pub fn long_trajectory_stats(&self, r: f64, threshold: f64) -> Result<LongTrajStats> {
        check_radius(r)?;
        if !(threshold >= 0.0) {
            return domain(format!("threshold must be nonnegative, got {threshold}"));
        }
        let region = Region::LongTraj(r, threshold);
        let d = self.dim() as i32;
        Ok(LongTrajStats {
            energy: self.second_moment_in(&region) / r.powi(d + 2),
            mass: self.mass_in(&region) / r.powi(d),
        })
    }

    /// Pairs whose segment `[x, y]` meets the sphere `|z| = R`.
    pub fn crossing_stats(&self, r: f64) -> Result<CrossingStats> {
        check_radius(r)?;
        let crosses = |x: &Point, y: &Point| segment_crosses_sphere(x, y, r);
        Ok(CrossingStats {
            crossing_energy: self.reduce(|x, y, m| if crosses(x, y) { dist2(x, y) * m } else { 0.0 }),
            crossing_mass: self.reduce(|x, y, m| if crosses(x, y) { m } else { 0.0 }),
        })
    }

    /// Weighted least-squares affine fit of `y` against `x` over `#_r`.
    pub fn affine_fit(&self, r: f64, beta: f64) -> Result<AffineFit> {
        check_radius(r)?;
        let d = self.dim();
        let region = Region::HashR(r);
        let k = d + 1;
        // Moments of [x; 1] and cross moments with y, accumulated row by row.
        let nt = self.n_target();
        let partial: Vec<(Vec<f64>, Vec<f64>)> = self
            .mass
            .par_chunks(nt)
            .zip(self.source.points.par_iter())
            .map(|(row, x)| {
                let mut m = vec![KahanSum::new(); k * k];
                let mut c = vec![KahanSum::new(); k * d];
                let xv: Vec<f64> = (0..d).map(|a| x[a]).chain([1.0]).collect();
                for (w, y) in row.iter().zip(&self.target.points) {
                    if *w == 0.0 || !region.contains(x, y) {
                        continue;
                    }
                    for p in 0..k {
                        for q in 0..k {
                            m[p * k + q].add(w * xv[p] * xv[q]);
                        }
                        for a in 0..d {
                            c[p * d + a].add(w * xv[p] * y[a]);
                        }
                    }
                }
                (
                    m.iter().map(|s| s.value()).collect(),
                    c.iter().map(|s| s.value()).collect(),
                )
            })
            .collect();
        let mut mm = DMatrix::<f64>::zeros(k, k);
        let mut cc = DMatrix::<f64>::zeros(k, d);
        for p in 0..k {
            for q in 0..k {
                mm[(p, q)] = ksum(partial.iter().map(|(m, _)| m[p * k + q]));
            }
            for a in 0..d {
                cc[(p, a)] = ksum(partial.iter().map(|(_, c)| c[p * d + a]));
            }
        }
        let total = mm[(d, d)];
        if !(total > 0.0) {
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                a[i * d + i] = 1.0;
            }
            return Ok(AffineFit {
                a,
                b: vec![0.0; d],
                defect: 0.0,
                beta,
                r,
                degenerate: true,
            });
        }
        mm /= total;
        cc /= total;
        let eig = SymmetricEigen::new(mm.clone());
        let max_ev = eig.eigenvalues.max();
        let min_ev = eig.eigenvalues.min();
        let degenerate = !(min_ev > max_ev * 1e-12);
        if degenerate {
            mm += DMatrix::identity(k, k) * 1e-12;
        }
        let sol = mm
            .cholesky()
            .ok_or_else(|| Error::Internal("affine fit normal equations not positive definite".into()))?
            .solve(&cc);
        // sol rows: coefficients of x_0..x_{d-1}, then the constant.
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for out in 0..d {
            for inp in 0..d {
                a[out * d + inp] = sol[(inp, out)];
            }
            b[out] = sol[(d, out)];
        }
        let resid = self.reduce(|x, y, m| {
            if !region.contains(x, y) {
                return 0.0;
            }
            let mut s = 0.0;
            for out in 0..d {
                let mut pred = b[out];
                for inp in 0..d {
                    pred += a[out * d + inp] * x[inp];
                }
                s += (y[out] - pred).powi(2);
            }
            s * m
        });
        Ok(AffineFit {
            a,
            b,
            defect: resid / r.powf(d as f64 + 2.0 + 2.0 * beta),
            beta,
            r,
            degenerate,
        })
    }

    pub fn scaled(&self, factor: f64) -> Coupling {
        Coupling {
            source: self.source.clone(),
            target: self.target.clone(),
            mass: self.mass.iter().map(|m| m * factor).collect(),
        }
    }
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0) {
        return domain(format!("radius must be positive, got {r}"));
    }
    Ok(())
}

/// `min_t |(1-t)x + t y| <= R <= max(|x|, |y|)`.
pub fn segment_crosses_sphere(x: &Point, y: &Point, r: f64) -> bool {
    let far = norm(x).max(norm(y));
    if far < r {
        return false;
    }
    let v = [y[0] - x[0], y[1] - x[1]];
    let vv = v[0] * v[0] + v[1] * v[1];
    let t = if vv > 0.0 {
        (-(x[0] * v[0] + x[1] * v[1]) / vv).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let near = norm(&[x[0] + t * v[0], x[1] + t * v[1]]);
    near <= r
}

/// JSON header accompanying a binary plan dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanHeader {
    pub n_source: usize,
    pub n_target: usize,
    pub source_grid: Option<GridSpec>,
    pub target_grid: Option<GridSpec>,
    pub epsilon: Option<f64>,
}

/// Writes `mass` as row-major little-endian f64 to `bin_path` and the header
/// to the same path with extension `json`.
pub fn write_plan(bin_path: &Path, header: &PlanHeader, mass: &[f64]) -> Result<()> {
    if mass.len() != header.n_source * header.n_target {
        return input("plan size does not match header");
    }
    let mut buf = Vec::with_capacity(mass.len() * 8);
    for v in mass {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(bin_path)?.write_all(&buf)?;
    fs::write(bin_path.with_extension("json"), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

pub fn read_plan(bin_path: &Path) -> Result<(PlanHeader, Vec<f64>)> {
    let header: PlanHeader = serde_json::from_str(&fs::read_to_string(bin_path.with_extension("json"))?)?;
    let mut buf = Vec::new();
    fs::File::open(bin_path)?.read_to_end(&mut buf)?;
    if buf.len() != header.n_source * header.n_target * 8 {
        return input(format!(
            "plan file has {} bytes, header implies {}",
            buf.len(),
            header.n_source * header.n_target * 8
        ));
    }
    let mass = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, mass))
}
