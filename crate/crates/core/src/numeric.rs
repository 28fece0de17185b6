//! Small numerical helpers shared across modules: compensated summation,
//! point arithmetic for d <= 2, and log-sum-exp.

/// A point in dimension 1 or 2. Unused trailing coordinates are zero, so
/// Euclidean norms and distances are correct for either dimension.
pub type Point = [f64; 2];

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a sequence, in iteration order.
pub fn ksum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = KahanSum::new();
    for v in it {
        acc.add(v);
    }
    acc.value()
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Ball membership with a relative slack of 1e-12, so points lying exactly on
/// the sphere are counted regardless of rounding in their coordinates.
#[inline]
pub fn in_ball(p: &Point, center: &Point, r: f64) -> bool {
    dist2(p, center).sqrt() <= r * (1.0 + 1e-12) + 1e-300
}

#[inline]
pub fn in_ball0(p: &Point, r: f64) -> bool {
    norm(p) <= r * (1.0 + 1e-12) + 1e-300
}

/// log(sum_i exp(v_i)) over the values yielded by `f(0..len)`.
/// Returns -inf when every term is -inf.
#[inline]
pub fn logsumexp_by(len: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        let v = f(i);
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut s = 0.0;
    for i in 0..len {
        s += (f(i) - max).exp();
    }
    max + s.ln()
}

/// Ordinary least-squares slope and intercept of `y` against `x`.
/// Returns `None` for fewer than two points or zero spread in `x`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1.0e16, 1.0, -1.0e16];
        v.extend(std::iter::repeat_n(1.0, 9));
        assert_eq!(ksum(v), 10.0);
    }

    #[test]
    fn logsumexp_handles_neg_infinity() {
        let v = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        assert_eq!(logsumexp_by(3, |i| v[i]), 0.0);
        assert_eq!(logsumexp_by(2, |_| f64::NEG_INFINITY), f64::NEG_INFINITY);
        let w = [1000.0, 1000.0];
        assert!((logsumexp_by(2, |i| w[i]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn regression_on_exact_line() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 5.0];
        let (s, c) = linear_regression(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14);
        assert!(linear_regression(&x[..1], &y[..1]).is_none());
    }
}
