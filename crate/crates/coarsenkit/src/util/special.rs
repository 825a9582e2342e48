//! Exponential-integral machinery.
//!
//! `E₁(y) = ∫_y^∞ e^{−t}/t dt` appears in the closed forms of the critical
//! initial profile (tail mass, comparison function `g`). Two regimes:
//! a power series around `y = 0` and a modified-Lentz continued fraction for
//! large `y`, which also yields the scaled form `R(y) = e^y E₁(y)` without
//! overflow.

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `E₁(y)` for `y > 0`.
///
/// Series for `y ≤ 1`, continued fraction for `y > 1`. Relative accuracy is
/// close to machine precision over the whole range; underflows to 0 for
/// `y ≳ 740`.
pub fn e1(y: f64) -> f64 {
    assert!(y > 0.0, "e1 requires a positive argument, got {y}");
    if y <= 1.0 {
        e1_series(y)
    } else {
        (-y).exp() * e1_cf_scaled(y)
    }
}

/// Scaled exponential integral `R(y) = e^y E₁(y)`, stable for large `y`.
pub fn e1_scaled(y: f64) -> f64 {
    assert!(y > 0.0, "e1_scaled requires a positive argument, got {y}");
    if y <= 1.0 {
        y.exp() * e1_series(y)
    } else {
        e1_cf_scaled(y)
    }
}

/// `E₁` power series: `−γ − ln y + Σ_{k≥1} (−1)^{k+1} y^k / (k·k!)`.
fn e1_series(y: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut term = 1.0f64;
    for k in 1..200 {
        let kf = k as f64;
        term *= -y / kf;
        let contrib = -term / kf;
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs().max(1e-30) {
            break;
        }
    }
    -EULER_GAMMA - y.ln() + sum
}

/// Continued fraction for `e^y E₁(y)` (modified Lentz),
/// `E₁(y) = e^{−y} / (y + 1 − 1²/(y + 3 − 2²/(y + 5 − ...)))`.
fn e1_cf_scaled(y: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = y + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut f = d;
    for j in 1..500 {
        let jf = j as f64;
        let a = -jf * jf;
        b += 2.0;
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}
