//! Quadrature: adaptive Simpson with relative-error control and fixed
//! Gauss–Legendre panels for cell-local integrals.

use once_cell::sync::Lazy;

/// Adaptive Simpson integration of `f` over `[a, b]`.
///
/// The tolerance is interpreted relative to the magnitude of the integral; a
/// coarse first pass sets the absolute scale. Handles integrable endpoint
/// layers by bisection (depth-limited), so integrands that are merely
/// continuous near an endpoint are fine; integrands must be finite at the
/// evaluation points used (panel midpoints and endpoints).
pub fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // Coarse scale estimate over a few panels to set the absolute tolerance.
    let n0 = 16usize;
    let h = (b - a) / n0 as f64;
    let mut scale = 0.0f64;
    for i in 0..n0 {
        let x0 = a + h * i as f64;
        let x1 = x0 + h;
        let xm = 0.5 * (x0 + x1);
        scale += (f(x0).abs() + 4.0 * f(xm).abs() + f(x1).abs()) * h.abs() / 6.0;
    }
    let abs_tol = (scale * rel_tol).max(1e-305);
    let mut total = 0.0;
    for i in 0..n0 {
        let x0 = a + h * i as f64;
        let x1 = x0 + h;
        let fa = f(x0);
        let fb = f(x1);
        let xm = 0.5 * (x0 + x1);
        let fm = f(xm);
        let s = (x1 - x0) / 6.0 * (fa + 4.0 * fm + fb);
        total += simpson_rec(f, x0, x1, fa, fm, fb, s, abs_tol / n0 as f64, 52);
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, computed by Newton
/// iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P'_n(x).
            let mut p0 = 1.0f64;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Cached 8-point rule (exact for polynomials up to degree 15).
pub static GL8: Lazy<(Vec<f64>, Vec<f64>)> = Lazy::new(|| gauss_legendre(8));
/// Cached 16-point rule.
pub static GL16: Lazy<(Vec<f64>, Vec<f64>)> = Lazy::new(|| gauss_legendre(16));

/// Fixed-panel Gauss–Legendre integral of `f` over `[a, b]`.
pub fn gl_fixed(rule: &(Vec<f64>, Vec<f64>), f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in rule.0.iter().zip(rule.1.iter()) {
        acc += w * f(c + hw * x);
    }
    acc * hw
}
