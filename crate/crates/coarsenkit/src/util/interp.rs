//! Cubic Hermite machinery.
//!
//! Two flavours are used throughout the crate:
//!
//! * **Shape-preserving interpolation** ([`Pchip`]) with Fritsch–Carlson
//!   limited slopes, for observables reconstructed from tabulated data whose
//!   derivative is not known analytically.
//! * **Exact-slope Hermite cells** (free functions below), for quadrature of
//!   fields whose nodal derivatives *are* known analytically; limiting would
//!   only damage accuracy there.

/// Evaluate the cubic Hermite basis at parameter `t ∈ [0, 1]` for a cell of
/// width `h` with endpoint values `y0, y1` and endpoint slopes `m0, m1`
/// (slopes with respect to the physical coordinate).
#[inline]
pub fn hermite_value(t: f64, h: f64, y0: f64, y1: f64, m0: f64, m1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    y0 * h00 + h * m0 * h10 + y1 * h01 + h * m1 * h11
}

/// Integral of the Hermite cell over its full width `h`.
#[inline]
pub fn hermite_integral(h: f64, y0: f64, y1: f64, m0: f64, m1: f64) -> f64 {
    h * (0.5 * (y0 + y1) + h * (m0 - m1) / 12.0)
}

/// Integral of the Hermite cell between parameters `ta ≤ tb` (both in `[0,1]`).
#[inline]
pub fn hermite_integral_partial(
    ta: f64,
    tb: f64,
    h: f64,
    y0: f64,
    y1: f64,
    m0: f64,
    m1: f64,
) -> f64 {
    // Antiderivatives of the basis functions in t.
    let anti = |t: f64| {
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let i00 = 0.5 * t4 - t3 + t;
        let i10 = 0.25 * t4 - 2.0 * t3 / 3.0 + 0.5 * t2;
        let i01 = -0.5 * t4 + t3;
        let i11 = 0.25 * t4 - t3 / 3.0;
        y0 * i00 + h * m0 * i10 + y1 * i01 + h * m1 * i11
    };
    h * (anti(tb) - anti(ta))
}

/// Monotone (Fritsch–Carlson) cubic Hermite interpolant on strictly
/// increasing abscissae.
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ms: Vec<f64>,
}

impl Pchip {
    /// Build from strictly increasing `xs` (at least 2 points).
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2, "pchip needs at least two points");
        for w in xs.windows(2) {
            assert!(w[1] > w[0], "pchip abscissae must increase strictly");
        }
        let ms = pchip_slopes(&xs, &ys);
        Self { xs, ys, ms }
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Index of the cell containing `x` (clamped to the boundary cells).
    fn cell(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        }
    }

    /// Evaluate at `x` (linear extension outside the table is intentional —
    /// callers keep arguments inside the table range).
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.cell(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        hermite_value(t, h, self.ys[i], self.ys[i + 1], self.ms[i], self.ms[i + 1])
    }

    /// Derivative at `x`.
    pub fn eval_deriv(&self, x: f64) -> f64 {
        let i = self.cell(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        self.ys[i] * d00
            + self.ms[i] * d10
            + self.ys[i + 1] * d01
            + self.ms[i + 1] * d11
    }
}

/// Fritsch–Carlson limited slopes (the rule used by scipy's `PchipInterpolator`).
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n == 2 {
        let d = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        m[0] = d;
        m[1] = d;
        return m;
    }
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    for i in 1..n - 1 {
        if d[i - 1] == 0.0 || d[i] == 0.0 || (d[i - 1] > 0.0) != (d[i] > 0.0) {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    m[0] = edge_slope(h[0], h[1], d[0], d[1]);
    m[n - 1] = edge_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() || d0 == 0.0 {
        if d0 == 0.0 {
            return 0.0;
        }
        m = 0.0;
    } else if (d0 > 0.0) != (d1 > 0.0) && m.abs() > 3.0 * d0.abs() {
        m = 3.0 * d0;
    }
    m
}
