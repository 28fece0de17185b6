//! Property tests for the measure, coupling, scaling, solver and iteration
//! invariants.

use eotlab::coupling::{Coupling, Region};
use eotlab::measure::{data_term, Atoms, DensitySpec, GridMeasure, GridSpec};
use eotlab::numeric::Point;
use eotlab::regularity::{campanato_iterate, harmonic_fit_basis, Params};
use eotlab::scaling::{Scaling, Windows};
use eotlab::solvers::{exact_ot, sinkhorn, SinkhornConfig};
use proptest::prelude::*;

fn sq(x: &Point, y: &Point) -> f64 {
    (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)
}

fn grid(n: usize, h: f64, weights: Vec<f64>, alpha: f64) -> GridMeasure {
    // Cell-centred points at odd multiples of h/2, symmetric about 0.
    let spec = GridSpec::new(1, vec![(n as f64 - 1.0) / 2.0], h, vec![n]).unwrap();
    GridMeasure::new(spec, weights, alpha).unwrap()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..2.0, n)
}

fn cloud(dim: usize, points: Vec<Point>, weights: Vec<f64>) -> Atoms {
    Atoms::from_points(dim, points, weights, 1.0, 0.5).unwrap()
}

fn point2() -> impl Strategy<Value = Point> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| [a, b])
}

/// Random coupling on `k x k` atoms in d = 2 with consistent marginals.
fn coupling2(k: usize) -> impl Strategy<Value = Coupling> {
    (
        prop::collection::vec(point2(), k),
        prop::collection::vec(point2(), k),
        prop::collection::vec(0.0f64..1.0, k * k),
    )
        .prop_map(move |(xs, ys, mass)| {
            let rows: Vec<f64> = (0..k).map(|i| mass[i * k..(i + 1) * k].iter().sum::<f64>() + 1e-3).collect();
            let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| mass[i * k + j]).sum::<f64>() + 1e-3).collect();
            // Small diagonal top-up keeps every marginal weight positive.
            let mut m = mass;
            for i in 0..k {
                m[i * k + i] += 1e-3;
            }
            Coupling::new(cloud(2, xs, rows), cloud(2, ys, cols), m).unwrap()
        })
}

fn spd() -> impl Strategy<Value = Vec<f64>> {
    (0.0f64..std::f64::consts::PI, -0.5f64..0.5, -0.5f64..0.5).prop_map(|(th, a, b)| {
        let (c, s) = (th.cos(), th.sin());
        let (l1, l2) = (a.exp(), b.exp());
        vec![c * c * l1 + s * s * l2, c * s * (l1 - l2), c * s * (l1 - l2), s * s * l1 + c * c * l2]
    })
}

fn scaling2() -> impl Strategy<Value = Scaling> {
    (spd(), -0.3f64..0.3, -0.3f64..0.3, 0.8f64..1.25, 0.6f64..1.6)
        .prop_map(|(a, b0, b1, g, k)| Scaling::elementary(a, vec![b0, b1], g, k, &Windows::default()).unwrap())
}

fn close(a: &Scaling, b: &Scaling, tol: f64) -> bool {
    a.a.iter().zip(&b.a).all(|(x, y)| (x - y).abs() <= tol)
        && a.b.iter().zip(&b.b).all(|(x, y)| (x - y).abs() <= tol)
        && (a.gamma - b.gamma).abs() <= tol
        && (a.kappa - b.kappa).abs() <= tol
}

fn max_point_diff(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

fn entropic_objective(pi: &Coupling, eps: f64) -> f64 {
    let (n, m) = (pi.n_source(), pi.n_target());
    let mut v = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = pi.at(i, j);
            if p > 0.0 {
                let ab = pi.source.weights[i] * pi.target.weights[j];
                v += p * sq(&pi.source.points[i], &pi.target.points[j]) + eps * eps * p * (p / ab).ln();
            }
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn holder_seminorm_scale_covariance(w in weights(24), t in 0.3f64..3.0, k in 2usize..12, alpha in 0.1f64..0.95) {
        let h = 0.1;
        let m = grid(24, h, w.clone(), alpha);
        let mt = grid(24, h * t, w.iter().map(|x| x * t).collect(), alpha);
        // Radii at multiples of h never touch a grid point.
        let r = k as f64 * h;
        let a = m.holder_seminorm(r).unwrap();
        let b = mt.holder_seminorm(t * r).unwrap();
        prop_assert!((b - a * t.powf(-alpha)).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn data_term_is_symmetric(w1 in weights(20), w2 in weights(20), k in 2usize..10) {
        let (l, m) = (grid(20, 0.1, w1, 0.5).atoms(), grid(20, 0.1, w2, 0.5).atoms());
        let r = k as f64 * 0.1;
        let a = data_term(&l, &m, r, 0.3).unwrap();
        let b = data_term(&m, &l, r, 0.3).unwrap();
        prop_assert_eq!(a.d, b.d);
        prop_assert_eq!(a.holder_lambda, b.holder_mu);
    }

    #[test]
    fn density_scales_with_mass(w in weights(20), kappa in 0.01f64..100.0, x in -0.6f64..0.6) {
        let m = grid(20, 0.1, w, 0.5);
        let a = m.density_at(&[x, 0.0], 0.3).unwrap();
        let b = m.scaled(kappa).unwrap().density_at(&[x, 0.0], 0.3).unwrap();
        prop_assert!((b - kappa * a).abs() <= 1e-12 * kappa * a);
    }

    #[test]
    fn data_term_monotone_in_radius(w1 in weights(20), w2 in weights(20)) {
        let (l, m) = (grid(20, 0.1, w1, 0.5).atoms(), grid(20, 0.1, w2, 0.5).atoms());
        let ds: Vec<f64> = (2..=10).map(|k| data_term(&l, &m, k as f64 * 0.1, 0.3).unwrap().d).collect();
        prop_assert!(ds.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn second_moment_splits_over_region_and_complement(pi in coupling2(6), r in 0.05f64..1.5) {
        let inside = pi.second_moment_in(&Region::HashR(r));
        let outside = pi.second_moment_in(&Region::Complement(Box::new(Region::HashR(r))));
        let total = pi.reduce(|x, y, m| m * sq(x, y));
        prop_assert!((inside + outside - total).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn long_trajectories_shrink_with_threshold(pi in coupling2(6), r in 0.1f64..1.5, t1 in 0.0f64..2.0, dt in 0.0f64..1.0) {
        let a = pi.long_trajectory_stats(r, t1).unwrap();
        let b = pi.long_trajectory_stats(r, t1 + dt).unwrap();
        prop_assert!(b.mass <= a.mass && b.energy <= a.energy);
    }

    #[test]
    fn no_crossings_outside_the_support(pi in coupling2(5), extra in 0.01f64..3.0) {
        let s = pi.crossing_stats(2f64.sqrt() + extra).unwrap();
        prop_assert_eq!(s.crossing_mass, 0.0);
        prop_assert_eq!(s.crossing_energy, 0.0);
    }

    #[test]
    fn composition_matches_stepwise_pushforward(pi in coupling2(5), s1 in scaling2(), s2 in scaling2()) {
        let w = Windows::default();
        let c = Scaling::compose(&s2, &s1, &w).unwrap().apply_to_coupling(&pi, &w).unwrap();
        let s = s2.apply_to_coupling(&s1.apply_to_coupling(&pi, &w).unwrap(), &w).unwrap();
        prop_assert!(max_point_diff(&c.source.points, &s.source.points) <= 1e-10);
        prop_assert!(max_point_diff(&c.target.points, &s.target.points) <= 1e-10);
        prop_assert!(c.mass.iter().zip(&s.mass).all(|(a, b)| (a - b).abs() <= 1e-12));
        prop_assert!((c.source.cell_volume - s.source.cell_volume).abs() <= 1e-10);
        prop_assert!((c.target.cell_volume - s.target.cell_volume).abs() <= 1e-10);
    }

    #[test]
    fn composition_is_associative(s1 in scaling2(), s2 in scaling2(), s3 in scaling2()) {
        let w = Windows { gamma: [0.1, 10.0], kappa: [0.01, 100.0] };
        let left = Scaling::compose(&s3, &Scaling::compose(&s2, &s1, &w).unwrap(), &w).unwrap();
        let right = Scaling::compose(&Scaling::compose(&s3, &s2, &w).unwrap(), &s1, &w).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
    }

    #[test]
    fn rescaled_coupling_keeps_marginals(pi in coupling2(6), s in scaling2()) {
        let out = s.apply_to_coupling(&pi, &Windows::default()).unwrap();
        let tot = out.total_mass();
        for (r, w) in out.row_sums().iter().zip(&out.source.weights) {
            prop_assert!((r - w).abs() <= 1e-8 * tot);
        }
        for (c, w) in out.col_sums().iter().zip(&out.target.weights) {
            prop_assert!((c - w).abs() <= 1e-8 * tot);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sinkhorn_beats_perturbed_couplings(
        a in weights(12), b in weights(12), eps in 0.1f64..0.5,
        i in 0usize..12, k in 0usize..12, j in 0usize..12, l in 0usize..12, frac in -0.5f64..0.5,
    ) {
        prop_assume!(i != k && j != l);
        let la = grid(12, 0.15, a.clone(), 0.5).atoms();
        let s = a.iter().sum::<f64>() / b.iter().sum::<f64>();
        let ma = grid(12, 0.15, b.iter().map(|x| x * s).collect(), 0.5).atoms();
        let res = sinkhorn(&la, &ma, &SinkhornConfig::new(eps)).unwrap();
        let base = entropic_objective(&res.plan, eps);
        // A 2x2 cycle move keeps both marginals exactly.
        let pi = &res.plan;
        let n = pi.n_target();
        let room = if frac > 0.0 { pi.at(i, l).min(pi.at(k, j)) } else { pi.at(i, j).min(pi.at(k, l)) };
        let d = frac * room;
        let mut mass = pi.mass.clone();
        mass[i * n + j] += d;
        mass[k * n + l] += d;
        mass[i * n + l] -= d;
        mass[k * n + j] -= d;
        let other = Coupling { mass, ..pi.clone() };
        prop_assert!(base <= entropic_objective(&other, eps) + 1e-12);
        let prod = Coupling::product(la.clone(), ma.clone()).unwrap();
        prop_assert!(base <= entropic_objective(&prod, eps) + 1e-12);
    }

    #[test]
    fn exact_cost_below_sinkhorn_transport_cost(a in weights(16), b in weights(16), eps in 0.05f64..0.5) {
        let la = grid(16, 0.1, a.clone(), 0.5).atoms();
        let s = a.iter().sum::<f64>() / b.iter().sum::<f64>();
        let ma = grid(16, 0.1, b.iter().map(|x| x * s).collect(), 0.5).atoms();
        let exact = exact_ot(&la, &ma).unwrap().cost;
        let res = sinkhorn(&la, &ma, &SinkhornConfig::new(eps)).unwrap();
        prop_assert!(exact <= res.primal_cost * (1.0 + 1e-9) + 1e-14);
    }

    #[test]
    fn quadratic_terms_never_worsen_the_harmonic_fit(pi in coupling2(6), r in 0.3f64..1.5) {
        prop_assume!(pi.mass_in(&Region::HashR(r)) > 0.0);
        let lin = harmonic_fit_basis(&pi, r, false).unwrap();
        let full = harmonic_fit_basis(&pi, r, true).unwrap();
        prop_assert!(full.residual <= lin.residual * (1.0 + 1e-9) + 1e-14);
        prop_assert!(full.residual <= full.zero_residual * (1.0 + 1e-9) + 1e-14);
    }
}

/// The naive composition law `(A2 A1, b1 + gamma2 A2 b2, ...)` fails the
/// pushforward identity already for a dilation followed by a translation.
#[test]
fn naive_composition_law_fails_the_pushforward_identity() {
    let w = Windows::default();
    let s1 = Scaling::elementary(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2.0, 1.0, &w).unwrap();
    let s2 = Scaling::elementary(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0], 1.0, 1.0, &w).unwrap();
    let naive = Scaling {
        a: vec![1.0, 0.0, 0.0, 1.0],
        b: vec![s1.b[0] + s2.gamma * s2.b[0], s1.b[1] + s2.gamma * s2.b[1]],
        gamma: 2.0,
        kappa: 1.0,
    };
    assert_eq!(naive.b, vec![1.0, 0.0]);
    let y = [0.3, -0.2];
    let stepwise = s2.push_target(&s1.push_target(&y));
    let ours = Scaling::compose(&s2, &s1, &w).unwrap();
    assert_eq!(ours.b, vec![0.5, 0.0]);
    let good = ours.push_target(&y);
    let bad = naive.push_target(&y);
    assert!((good[0] - stepwise[0]).abs() < 1e-15 && (good[1] - stepwise[1]).abs() < 1e-15);
    assert!((bad[0] - stepwise[0]).abs() > 0.5);
}

/// Every recorded level scaling is the composition of the previous level's
/// scaling with its improvement step.
#[test]
fn campanato_trace_is_a_fold_of_compositions() {
    let spec = GridSpec::cell_centered(1, 128, -1.0, 1.0).unwrap();
    let lam = DensitySpec::Affine { base: 1.0, gradient: vec![0.1] }.sample(spec.clone(), 0.9).unwrap();
    let mu = DensitySpec::Affine { base: 1.0, gradient: vec![-0.1] }.sample(spec, 0.9).unwrap();
    let res = sinkhorn(&lam.atoms(), &mu.atoms(), &SinkhornConfig::new(0.03)).unwrap();
    let p = Params::default();
    let tr = campanato_iterate(&res.plan, 0.8, 0.03, &p).unwrap();
    assert!(tr.levels.len() >= 2, "trace too short: {:?}", tr.stop_reason);
    for pair in tr.levels.windows(2) {
        let step = pair[0].step.as_ref().expect("a later level implies a step");
        let folded = Scaling::compose(&step.scaling_hat, &pair[0].scaling, &p.windows).unwrap();
        assert!(close(&folded, &pair[1].scaling, 1e-14));
        assert!(pair[1].r < pair[0].r);
    }
}
