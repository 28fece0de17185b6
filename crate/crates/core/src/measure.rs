//! Discrete measures on regular grids and their atomized form.
//!
//! A [`GridMeasure`] stores one nonnegative weight per grid point; the density
//! at a point is `weight / h^dim`. Affine pushforwards move points off the
//! grid, so most downstream code works with [`Atoms`]: a point list carrying
//! weights, a uniform cell volume (affine maps have constant Jacobian) and the
//! convex hull of the support.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, input, Error, Result};
use crate::numeric::{in_ball, in_ball0, Point};

/// Regular grid in dimension 1 or 2. Grid point `i` (per axis) sits at the
/// physical coordinate `(i - origin_offset) * h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub origin_offset: Vec<f64>,
    pub h: f64,
    pub extent: Vec<usize>,
}

impl GridSpec {
    pub fn new(dim: usize, origin_offset: Vec<f64>, h: f64, extent: Vec<usize>) -> Result<Self> {
        let spec = Self {
            dim,
            origin_offset,
            h,
            extent,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cell-centred grid with `n` cells per axis covering `[lo, hi]^dim`.
    pub fn cell_centered(dim: usize, n: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return input(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        let h = (hi - lo) / n as f64;
        let first = lo + 0.5 * h;
        Self::new(dim, vec![-first / h; dim], h, vec![n; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return input(format!("grid dimension must be 1 or 2, got {}", self.dim));
        }
        if self.origin_offset.len() != self.dim || self.extent.len() != self.dim {
            return input("origin_offset and extent must have one entry per axis");
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return input(format!("grid spacing must be positive, got {}", self.h));
        }
        if self.extent.iter().any(|&e| e < 2) {
            return input("grid extent must be at least 2 points per axis");
        }
        for (o, &e) in self.origin_offset.iter().zip(&self.extent) {
            if !o.is_finite() || *o < -1e-9 || *o > (e - 1) as f64 + 1e-9 {
                return input("the physical origin must lie inside the grid hull");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Per-axis indices of the flat index `k` (axis 0 varies slowest).
    pub fn indices(&self, k: usize) -> [usize; 2] {
        if self.dim == 1 {
            [k, 0]
        } else {
            [k / self.extent[1], k % self.extent[1]]
        }
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] * self.extent[1] + idx[1]
        }
    }

    pub fn point(&self, k: usize) -> Point {
        let idx = self.indices(k);
        let mut p = [0.0; 2];
        for a in 0..self.dim {
            p[a] = (idx[a] as f64 - self.origin_offset[a]) * self.h;
        }
        p
    }

    pub fn points(&self) -> Vec<Point> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub fn hull(&self) -> Hull {
        let mut corner = [0.0; 2];
        let mut edges = [[0.0; 2]; 2];
        for a in 0..self.dim {
            corner[a] = -self.origin_offset[a] * self.h;
            edges[a][a] = (self.extent[a] - 1) as f64 * self.h;
        }
        Hull {
            dim: self.dim,
            corner,
            edges,
        }
    }
}

/// Convex hull of a (possibly affinely mapped) grid: a parallelotope given by
/// one corner and `dim` edge vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    pub dim: usize,
    pub corner: Point,
    pub edges: [Point; 2],
}

impl Hull {
    /// Axis-aligned bounding box of a point set.
    pub fn bounding(dim: usize, points: &[Point]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut corner = [0.0; 2];
        let mut edges = [[0.0; 2]; 2];
        for a in 0..dim {
            corner[a] = lo[a];
            edges[a][a] = hi[a] - lo[a];
        }
        Self { dim, corner, edges }
    }

    /// Membership with a relative tolerance of 1e-9 in hull coordinates.
    pub fn contains(&self, x: &Point) -> bool {
        let tol = 1e-9;
        let rel = [x[0] - self.corner[0], x[1] - self.corner[1]];
        let coords: [f64; 2] = if self.dim == 1 {
            let e = self.edges[0][0];
            if e == 0.0 {
                return rel[0].abs() <= tol;
            }
            [rel[0] / e, 0.0]
        } else {
            let (a, b) = (self.edges[0], self.edges[1]);
            let det = a[0] * b[1] - a[1] * b[0];
            if det == 0.0 {
                return false;
            }
            [
                (rel[0] * b[1] - rel[1] * b[0]) / det,
                (a[0] * rel[1] - a[1] * rel[0]) / det,
            ]
        };
        coords[..self.dim]
            .iter()
            .all(|&t| t >= -tol && t <= 1.0 + tol)
    }

    /// Image of the hull under `x -> lin * x + shift`.
    pub fn map_affine(&self, lin: &dyn Fn(&Point) -> Point, shift: &Point) -> Self {
        let c = lin(&self.corner);
        let mut corner = [0.0; 2];
        for a in 0..self.dim {
            corner[a] = c[a] + shift[a];
        }
        let mut edges = [[0.0; 2]; 2];
        for k in 0..self.dim {
            edges[k] = lin(&self.edges[k]);
        }
        Self {
            dim: self.dim,
            corner,
            edges,
        }
    }
}

/// A grid measure: nonnegative weights (density x cell volume) on a regular
/// grid, with the Hoelder exponent used for its data term.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    pub spec: GridSpec,
    pub weights: Vec<f64>,
    pub alpha: f64,
}

impl GridMeasure {
    pub fn new(spec: GridSpec, weights: Vec<f64>, alpha: f64) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.len() {
            return input(format!(
                "expected {} weights for the grid, got {}",
                spec.len(),
                weights.len()
            ));
        }
        check_weights(&weights)?;
        check_alpha(alpha)?;
        Ok(Self {
            spec,
            weights,
            alpha,
        })
    }

    /// Samples `density` at the grid points (midpoint rule).
    pub fn from_density(spec: GridSpec, alpha: f64, density: impl Fn(&Point) -> f64) -> Result<Self> {
        let vol = spec.cell_volume();
        let weights = spec.points().iter().map(|p| density(p) * vol).collect();
        Self::new(spec, weights, alpha)
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        crate::numeric::ksum(self.weights.iter().copied())
    }

    /// Pointwise density `weight / h^dim` at flat index `k`.
    pub fn density(&self, k: usize) -> f64 {
        self.weights[k] / self.spec.cell_volume()
    }

    pub fn atoms(&self) -> Atoms {
        Atoms {
            dim: self.spec.dim,
            points: self.spec.points(),
            weights: self.weights.clone(),
            cell_volume: self.spec.cell_volume(),
            hull: self.spec.hull(),
            alpha: self.alpha,
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.spec.clone(),
            self.weights.iter().map(|w| w * factor).collect(),
            self.alpha,
        )
    }

    pub fn density_at(&self, x: &Point, r_avg: f64) -> Result<f64> {
        self.atoms().density_at(x, r_avg)
    }

    pub fn holder_seminorm(&self, r: f64) -> Result<f64> {
        self.atoms().holder_seminorm(r)
    }

    /// Writes `<stem>.csv` (indices and weights) and `<stem>.json` (grid sidecar).
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.dim()).map(|a| format!("index_{a}")).collect();
        header.push("weight".into());
        w.write_record(&header).map_err(csv_err)?;
        for (k, wt) in self.weights.iter().enumerate() {
            let idx = self.spec.indices(k);
            let mut rec: Vec<String> = idx[..self.dim()].iter().map(|i| i.to_string()).collect();
            rec.push(format!("{wt:?}"));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        let side = Sidecar {
            dim: self.spec.dim,
            h: self.spec.h,
            origin_offset: self.spec.origin_offset.clone(),
            extent: self.spec.extent.clone(),
            alpha: self.alpha,
        };
        fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Reads a measure written by [`GridMeasure::save`]. Grid points missing
    /// from the CSV get weight zero.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(csv_path.with_extension("json"))?)?;
        let spec = GridSpec::new(side.dim, side.origin_offset, side.h, side.extent)?;
        let mut weights = vec![0.0; spec.len()];
        let mut r = csv::Reader::from_path(csv_path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        let mut expected: Vec<String> = (0..spec.dim).map(|a| format!("index_{a}")).collect();
        expected.push("weight".into());
        if headers.iter().collect::<Vec<_>>() != expected.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return input(format!("unexpected CSV header {:?}, expected {:?}", headers, expected));
        }
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let mut idx = [0usize; 2];
            for a in 0..spec.dim {
                idx[a] = rec[a]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Input(format!("bad index {:?}", &rec[a])))?;
                if idx[a] >= spec.extent[a] {
                    return input(format!("index {} out of range on axis {a}", idx[a]));
                }
            }
            let wt: f64 = rec[spec.dim]
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad weight {:?}", &rec[spec.dim])))?;
            weights[spec.flat(&idx[..spec.dim])] = wt;
        }
        Self::new(spec, weights, side.alpha)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    h: f64,
    origin_offset: Vec<f64>,
    extent: Vec<usize>,
    alpha: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return input("weights must be finite and nonnegative");
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return input("total mass must be positive");
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return input(format!("Hoelder exponent must lie in (0,1), got {alpha}"));
    }
    Ok(())
}

/// Atomized measure: points with weights, each representing a cell of volume
/// `cell_volume`. Grid measures and all their affine images have this form.
#[derive(Clone, Debug, PartialEq)]
pub struct Atoms {
    pub dim: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub cell_volume: f64,
    pub hull: Hull,
    pub alpha: f64,
}

impl Atoms {
    /// Builds atoms with the bounding box of the points as hull.
    pub fn from_points(dim: usize, points: Vec<Point>, weights: Vec<f64>, cell_volume: f64, alpha: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return input(format!("dimension must be 1 or 2, got {dim}"));
        }
        if points.len() != weights.len() || points.is_empty() {
            return input("points and weights must be nonempty and of equal length");
        }
        check_weights(&weights)?;
        check_alpha(alpha)?;
        if !(cell_volume > 0.0) {
            return input("cell volume must be positive");
        }
        let hull = Hull::bounding(dim, &points);
        Ok(Self {
            dim,
            points,
            weights,
            cell_volume,
            hull,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> f64 {
        crate::numeric::ksum(self.weights.iter().copied())
    }

    /// Characteristic spacing `cell_volume^(1/dim)`.
    pub fn spacing(&self) -> f64 {
        self.cell_volume.powf(1.0 / self.dim as f64)
    }

    pub fn density(&self, k: usize) -> f64 {
        self.weights[k] / self.cell_volume
    }

    /// Same atoms with weights replaced (hull and cell volume kept).
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        Self {
            weights,
            ..self.clone()
        }
    }

    /// Ball average of the density: mass of `B_r(x)` divided by the volume of
    /// the cells whose centres lie in the ball.
    pub fn density_at(&self, x: &Point, r_avg: f64) -> Result<f64> {
        if !self.hull.contains(x) {
            return domain(format!("point {:?} lies outside the grid hull", &x[..self.dim]));
        }
        let h = self.spacing();
        if !(r_avg >= h * (1.0 - 1e-12)) {
            return domain(format!("averaging radius {r_avg} is below the grid spacing {h}"));
        }
        let mut mass = crate::numeric::KahanSum::new();
        let mut count = 0usize;
        for (p, w) in self.points.iter().zip(&self.weights) {
            if in_ball(p, x, r_avg) {
                mass.add(*w);
                count += 1;
            }
        }
        if count == 0 {
            return domain("averaging ball contains no grid points");
        }
        Ok(mass.value() / (count as f64 * self.cell_volume))
    }

    /// Exact discrete Hoelder seminorm of the density over pairs in `B_r(0)`.
    pub fn holder_seminorm(&self, r: f64) -> Result<f64> {
        let inside: Vec<(Point, f64)> = self
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| in_ball0(p, r))
            .map(|(k, p)| (*p, self.density(k)))
            .collect();
        if inside.len() < 2 {
            return domain(format!("ball of radius {r} contains fewer than two grid points"));
        }
        let alpha = self.alpha;
        let mut best: f64 = 0.0;
        for (i, (p, dp)) in inside.iter().enumerate() {
            for (q, dq) in &inside[i + 1..] {
                let diff = (dp - dq).abs();
                if diff == 0.0 {
                    continue;
                }
                let dist = crate::numeric::dist2(p, q).sqrt();
                if dist == 0.0 {
                    continue;
                }
                best = best.max(diff / dist.powf(alpha));
            }
        }
        Ok(best)
    }
}

/// Components of the data term `D(R)` for a pair of measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTermReport {
    pub r: f64,
    pub holder_lambda: f64,
    pub holder_mu: f64,
    pub origin_gap: f64,
    pub d: f64,
}

/// `D(R) = R^(2 alpha) ([lam]^2 + [mu]^2) + |lam(0) - mu(0)|^2`, with the
/// origin densities taken as ball averages of radius `r_avg`.
pub fn data_term(lam: &Atoms, mu: &Atoms, r: f64, r_avg: f64) -> Result<DataTermReport> {
    if lam.dim != mu.dim {
        return input("measures must share the dimension");
    }
    if (lam.alpha - mu.alpha).abs() > 0.0 {
        return input("measures must share the Hoelder exponent");
    }
    let holder_lambda = lam.holder_seminorm(r)?;
    let holder_mu = mu.holder_seminorm(r)?;
    let origin = [0.0; 2];
    let origin_gap = (lam.density_at(&origin, r_avg)? - mu.density_at(&origin, r_avg)?).abs();
    let d = r.powf(2.0 * lam.alpha) * (holder_lambda * holder_lambda + holder_mu * holder_mu)
        + origin_gap * origin_gap;
    Ok(DataTermReport {
        r,
        holder_lambda,
        holder_mu,
        origin_gap,
        d,
    })
}

/// Analytic densities selectable by name in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Constant density.
    Uniform {
        #[serde(default = "one")]
        value: f64,
    },
    /// `base + gradient . x`.
    Affine {
        #[serde(default = "one")]
        base: f64,
        gradient: Vec<f64>,
    },
    /// `floor + amplitude * exp(-|x - center|^2 / (2 sigma^2))`.
    Gaussian {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        center: Vec<f64>,
        sigma: f64,
        #[serde(default)]
        floor: f64,
    },
    /// `base * (1 + amplitude * mean_k sin(pi * frequency * x_k + phase))
    ///  + cusp * |x - cusp_center|^cusp_exponent`.
    PerturbedUniform {
        #[serde(default = "one")]
        base: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        cusp: f64,
        #[serde(default)]
        cusp_center: Vec<f64>,
        #[serde(default = "half")]
        cusp_exponent: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl DensitySpec {
    pub fn eval(&self, x: &Point, dim: usize) -> f64 {
        let coord = |v: &Vec<f64>, a: usize| v.get(a).copied().unwrap_or(0.0);
        match self {
            DensitySpec::Uniform { value } => *value,
            DensitySpec::Affine { base, gradient } => {
                base + (0..dim).map(|a| coord(gradient, a) * x[a]).sum::<f64>()
            }
            DensitySpec::Gaussian {
                amplitude,
                center,
                sigma,
                floor,
            } => {
                let r2: f64 = (0..dim).map(|a| (x[a] - coord(center, a)).powi(2)).sum();
                floor + amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            DensitySpec::PerturbedUniform {
                base,
                amplitude,
                frequency,
                phase,
                cusp,
                cusp_center,
                cusp_exponent,
            } => {
                let wave: f64 = (0..dim)
                    .map(|a| (std::f64::consts::PI * frequency * x[a] + phase).sin())
                    .sum::<f64>()
                    / dim as f64;
                let r: f64 = (0..dim)
                    .map(|a| (x[a] - coord(cusp_center, a)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                base * (1.0 + amplitude * wave) + cusp * r.powf(*cusp_exponent)
            }
        }
    }

    pub fn sample(&self, spec: GridSpec, alpha: f64) -> Result<GridMeasure> {
        let dim = spec.dim;
        let m = GridMeasure::from_density(spec, alpha, |p| self.eval(p, dim));
        m.map_err(|e| Error::Input(format!("density {self:?} is not a valid measure: {e}")))
    }
}
