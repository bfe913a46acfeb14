//! Dense brute-force oracles for tests. Deliberately independent of the
//! quadrature engine: plain trapezoid sums over explicit grids.

/// Composite trapezoid rule with `n` intervals.
pub(crate) fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut sum = 0.5 * (f(a) + f(b));
    for i in 1..n {
        sum += f(a + i as f64 * h);
    }
    sum * h
}

/// Unnormalized 1-D truncated mixture weight
/// `[0.5 N(x; mu, s2) + 0.5 N(x; -mu, s2)] * 1[lo <= x <= hi]`.
pub(crate) struct TruncFn {
    pub mu: f64,
    pub s2: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncFn {
    pub fn new(mu: f64, s2: f64, lo: f64, hi: f64) -> Self {
        Self { mu, s2, lo, hi }
    }

    pub fn weight(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        let nc = 1.0 / (2.0 * std::f64::consts::PI * self.s2).sqrt();
        let np = (-(x - self.mu).powi(2) / (2.0 * self.s2)).exp();
        let nm = (-(x + self.mu).powi(2) / (2.0 * self.s2)).exp();
        0.5 * nc * (np + nm)
    }
}
