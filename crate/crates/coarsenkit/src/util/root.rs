//! Scalar root finding.

/// Bisection on a bracketing interval `[a, b]` with `f(a)` and `f(b)` of
/// opposite sign (one may be zero). Returns the midpoint after `iters`
/// halvings — 100 iterations resolve any double-precision bracket to the
/// last bit.
pub fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let mut fa = f(a);
    if fa == 0.0 {
        return a;
    }
    let fb = f(b);
    if fb == 0.0 {
        return b;
    }
    assert!(
        (fa > 0.0) != (fb > 0.0),
        "bisect: no sign change on [{a}, {b}] (f = {fa}, {fb})"
    );
    for _ in 0..iters {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Golden-section search for the maximum of a unimodal function on `[a, b]`.
/// Returns `(argmax, max)`.
pub fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let inv_phi = 0.618_033_988_749_894_8_f64;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bisect_finds_sqrt2() {
        let r = bisect(&|x| x * x - 2.0, 0.0, 2.0, 100);
        assert_relative_eq!(r, 2.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn bisect_accepts_descending_sign() {
        let r = bisect(&|x| 1.0 - x, 0.0, 3.0, 100);
        assert_relative_eq!(r, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_max(&|x| 1.0 - (x - 0.3) * (x - 0.3), 0.0, 1.0, 200);
        // Derivative-free argmax of a flat peak resolves to ~sqrt(eps);
        // the maximum value itself is machine-accurate.
        assert_relative_eq!(x, 0.3, epsilon = 1e-7);
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
    }
}
