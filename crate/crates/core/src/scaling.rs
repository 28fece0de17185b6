//! Affine rescalings `s = (A, b, gamma, kappa)` acting on measures and couplings
//! through `Q(x, y) = (A^-1 x, gamma A^T (y - b))` with mass factor `kappa`.
//!
//! Elementary scalings have symmetric positive-definite `A`. Products of
//! scalings keep the same action but their matrix is in general not symmetric,
//! which is why the target map uses the transpose.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::coupling::Coupling;
use crate::error::{input, Error, Result};
use crate::measure::{Atoms, GridMeasure, GridSpec, Hull};
use crate::numeric::Point;

/// Compact admissibility windows for `gamma` and `kappa`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Windows {
    pub gamma: [f64; 2],
    pub kappa: [f64; 2],
}

impl Default for Windows {
    fn default() -> Self {
        Self {
            gamma: [0.5, 2.0],
            kappa: [0.2, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// Row-major `d x d`.
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: f64,
    pub kappa: f64,
}

impl Scaling {
    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self {
            a,
            b: vec![0.0; dim],
            gamma: 1.0,
            kappa: 1.0,
        }
    }

    /// An elementary scaling: `A` must be symmetric positive-definite.
    pub fn elementary(a: Vec<f64>, b: Vec<f64>, gamma: f64, kappa: f64, windows: &Windows) -> Result<Self> {
        let s = Self { a, b, gamma, kappa };
        s.check_shape()?;
        s.check_spd()?;
        s.check_admissible(windows)?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check_shape(&self) -> Result<()> {
        let d = self.dim();
        if d != 1 && d != 2 {
            return input(format!("scaling dimension must be 1 or 2, got {d}"));
        }
        if self.a.len() != d * d {
            return input(format!("A must have {} entries, got {}", d * d, self.a.len()));
        }
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return input("scaling entries must be finite");
        }
        Ok(())
    }

    fn check_spd(&self) -> Result<()> {
        let m = self.mat();
        if (m - m.transpose()).abs().max() > 1e-12 {
            return input("A must be symmetric");
        }
        if SymmetricEigen::new(m).eigenvalues.min() <= 0.0 {
            return input("A must be positive-definite");
        }
        Ok(())
    }

    /// Windows on `gamma`, `kappa` and a conditioning bound on `A`.
    pub fn check_admissible(&self, w: &Windows) -> Result<()> {
        self.check_shape()?;
        if !(self.gamma >= w.gamma[0] && self.gamma <= w.gamma[1]) {
            return Err(Error::Admissibility(format!(
                "gamma = {} outside [{}, {}]",
                self.gamma, w.gamma[0], w.gamma[1]
            )));
        }
        if !(self.kappa >= w.kappa[0] && self.kappa <= w.kappa[1]) {
            return Err(Error::Admissibility(format!(
                "kappa = {} outside [{}, {}]",
                self.kappa, w.kappa[0], w.kappa[1]
            )));
        }
        let sv = self.mat().singular_values();
        if !(sv.min() > 0.0) || sv.max() / sv.min() > 1e12 {
            return Err(Error::Admissibility("A is singular".into()));
        }
        Ok(())
    }

    /// `A` padded to 2x2 with a unit in unused slots.
    pub fn mat(&self) -> Matrix2<f64> {
        if self.dim() == 1 {
            Matrix2::new(self.a[0], 0.0, 0.0, 1.0)
        } else {
            Matrix2::new(self.a[0], self.a[1], self.a[2], self.a[3])
        }
    }

    fn shift(&self) -> Vector2<f64> {
        Vector2::new(self.b[0], self.b.get(1).copied().unwrap_or(0.0))
    }

    pub fn det(&self) -> f64 {
        self.mat().determinant()
    }

    /// `x -> A^-1 x`.
    pub fn push_source(&self, x: &Point) -> Point {
        let v = self.mat().lu().solve(&Vector2::new(x[0], x[1])).expect("admissible A is invertible");
        [v[0], v[1]]
    }

    /// `y -> gamma A^T (y - b)`.
    pub fn push_target(&self, y: &Point) -> Point {
        let v = self.mat().transpose() * (Vector2::new(y[0], y[1]) - self.shift()) * self.gamma;
        [v[0], v[1]]
    }

    pub fn apply_to_source(&self, m: &Atoms) -> Atoms {
        let inv = self.mat().try_inverse().expect("admissible A is invertible");
        let lin = move |p: &Point| {
            let v = inv * Vector2::new(p[0], p[1]);
            [v[0], v[1]]
        };
        pushed(m, &lin, &[0.0; 2], self.kappa, 1.0 / self.det().abs())
    }

    pub fn apply_to_target(&self, m: &Atoms) -> Atoms {
        let t = self.mat().transpose() * self.gamma;
        let lin = move |p: &Point| {
            let v = t * Vector2::new(p[0], p[1]);
            [v[0], v[1]]
        };
        let off = -(t * self.shift());
        let jac = self.gamma.powi(self.dim() as i32) * self.det().abs();
        pushed(m, &lin, &[off[0], off[1]], self.kappa, jac)
    }

    /// Pushes both marginals as atoms (no resampling).
    pub fn apply_to_atoms(&self, lam: &Atoms, mu: &Atoms) -> Result<(Atoms, Atoms)> {
        if lam.dim != self.dim() || mu.dim != self.dim() {
            return input("scaling and measure dimensions differ");
        }
        Ok((self.apply_to_source(lam), self.apply_to_target(mu)))
    }

    /// Pushes both marginals and re-deposits them onto regular grids.
    pub fn apply_to_measures(&self, lam: &GridMeasure, mu: &GridMeasure, w: &Windows) -> Result<(GridMeasure, GridMeasure)> {
        self.check_admissible(w)?;
        let (l, m) = self.apply_to_atoms(&lam.atoms(), &mu.atoms())?;
        Ok((deposit(&l)?, deposit(&m)?))
    }

    /// `pi_s = kappa Q_# pi`, atoms moved and masses scaled by `kappa`.
    pub fn apply_to_coupling(&self, pi: &Coupling, w: &Windows) -> Result<Coupling> {
        self.check_admissible(w)?;
        if pi.dim() != self.dim() {
            return input("scaling and coupling dimensions differ");
        }
        let (source, target) = self.apply_to_atoms(&pi.source, &pi.target)?;
        let out = Coupling {
            source,
            target,
            mass: pi.mass.iter().map(|m| m * self.kappa).collect(),
        };
        let before = pi.check_marginals(0.0);
        let after = out.check_marginals(0.0);
        let tol = 1e-8;
        if after.max_row_err > before.max_row_err + tol || after.max_col_err > before.max_col_err + tol {
            return Err(Error::Internal(format!(
                "rescaled coupling violates its marginals (row {:e}, col {:e})",
                after.max_row_err, after.max_col_err
            )));
        }
        Ok(out)
    }

    /// `s2 <> s1`: the single scaling acting as `s1` followed by `s2`.
    pub fn compose(s2: &Scaling, s1: &Scaling, w: &Windows) -> Result<Scaling> {
        if s1.dim() != s2.dim() {
            return input("cannot compose scalings of different dimension");
        }
        let d = s1.dim();
        let a1 = s1.mat();
        let a = a1 * s2.mat();
        let a1_inv_t = a1
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::Admissibility("A is singular".into()))?;
        let b = s1.shift() + a1_inv_t * s2.shift() / s1.gamma;
        let out = Scaling {
            a: if d == 1 { vec![a[(0, 0)]] } else { vec![a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]] },
            b: b.iter().take(d).copied().collect(),
            gamma: s1.gamma * s2.gamma,
            kappa: s1.kappa * s2.kappa,
        };
        out.check_admissible(w)?;
        Ok(out)
    }

    /// `(Id, 0, (mu(0)/lam(0))^(1/d), 1/lam(0))`: after it both densities are
    /// one at the origin.
    pub fn normalizing(lam: &Atoms, mu: &Atoms, r_avg: f64, w: &Windows) -> Result<Scaling> {
        let origin = [0.0; 2];
        let l0 = lam.density_at(&origin, r_avg)?;
        let m0 = mu.density_at(&origin, r_avg)?;
        if !(l0 > 0.0 && m0 > 0.0) {
            return Err(Error::Domain("densities must be positive at the origin".into()));
        }
        let d = lam.dim;
        let mut s = Scaling::identity(d);
        s.gamma = (m0 / l0).powf(1.0 / d as f64);
        s.kappa = 1.0 / l0;
        s.check_admissible(w)?;
        Ok(s)
    }
}

fn pushed(m: &Atoms, lin: &dyn Fn(&Point) -> Point, off: &Point, kappa: f64, jac: f64) -> Atoms {
    let points = m
        .points
        .iter()
        .map(|p| {
            let v = lin(p);
            [v[0] + off[0], v[1] + off[1]]
        })
        .collect();
    Atoms {
        dim: m.dim,
        points,
        weights: m.weights.iter().map(|w| w * kappa).collect(),
        cell_volume: m.cell_volume * jac,
        hull: m.hull.map_affine(lin, off),
        alpha: m.alpha,
    }
}

/// Nearest-cell deposition onto a regular grid of spacing
/// `cell_volume^(1/d)` aligned with the smallest coordinates. Mass is
/// conserved exactly (up to summation order); positions are exact for `d = 1`
/// and for diagonal maps.
pub fn deposit(m: &Atoms) -> Result<GridMeasure> {
    let d = m.dim;
    let h = m.spacing();
    let hull = Hull::bounding(d, &m.points);
    let lo = hull.corner;
    let idx: Vec<[usize; 2]> = m
        .points
        .iter()
        .map(|p| {
            let mut i = [0usize; 2];
            for a in 0..d {
                i[a] = ((p[a] - lo[a]) / h).round() as usize;
            }
            i
        })
        .collect();
    let mut extent = vec![2usize; d];
    for i in &idx {
        for a in 0..d {
            extent[a] = extent[a].max(i[a] + 1);
        }
    }
    let origin_offset = (0..d).map(|a| -lo[a] / h).collect();
    let spec = GridSpec::new(d, origin_offset, h, extent)
        .map_err(|e| Error::Domain(format!("rescaled measure cannot be gridded: {e}")))?;
    let mut weights = vec![0.0; spec.len()];
    for (i, w) in idx.iter().zip(&m.weights) {
        weights[spec.flat(&i[..d])] += w;
    }
    GridMeasure::new(spec, weights, m.alpha)
}
