//! Stationary (self-similar) profiles of the coarsening transport system.
//!
//! For every rate `kappa ≥ kappa0 = φ'(1)/ψ'(1)` the transport equation has a
//! time-independent solution `w_κ`, the unit-mass decreasing profile solving
//!
//! ```text
//! [φ(x) − κ ψ(x)] dw/dx = w,   ∫₀¹ w dx = 1.
//! ```
//!
//! In the boundary variable `s = 1 − x` this reads `drift(κ, s)·dw/ds = w`
//! with `drift = κψ − φ > 0` on `(0, 1]`, so `ln w` is the antiderivative of
//! `1/drift`. The integrand has a non-integrable singularity at `s = 0` whose
//! closed form is split off before quadrature:
//!
//! * `κ > κ0`: `1/drift = p/s + bounded`, `p = 1/[(κ − κ0)|ψ'(1)|]`, giving a
//!   power-law edge `w ~ C sᵖ` ([`TailKind::PowerTail`]);
//! * `κ = κ0`: `1/drift = α/s² + b₁/s + bounded`, `α = 2/γ`, giving the
//!   borderline essential decay `w ~ C e^{−α/s} s^{b₁}` ([`TailKind::ExpTail`]).
//!
//! The profile is tabulated on a logarithmic grid in `s`, normalized to unit
//! mass with derivative-matched cubic cells, and evaluated between nodes by
//! continuing the quadrature from the nearest node, so point evaluations keep
//! quadrature-level accuracy everywhere.

use std::sync::Arc;

use crate::coeffs::{CoefficientPair, PairKind};
use crate::error::{CoarsenError, Result};
use crate::profiles::{Profile, ProfileTable};
use crate::util::fit::linear_fit;
use crate::util::quad::{gl_fixed, GL16};

/// Number of logarithmic grid nodes for the tabulated profile.
const GRID_N: usize = 1600;
/// Smallest tabulated `s`; below this the tail closed form takes over.
const GRID_BOTTOM: f64 = 1e-8;
/// Below this `s` the borderline-rate bounded remainder is evaluated from its
/// boundary series instead of the cancellation-prone direct difference.
const CRITICAL_SWITCH: f64 = 0.02;

/// Decay class of a stationary profile at the large-cluster edge `s = 1 − x → 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailKind {
    /// `w ~ C sᵖ` with `p = 1/[(κ − κ0)|ψ'(1)|]`.
    PowerTail { p: f64 },
    /// `w ~ C e^{−(2/γ)/s} s^{b₁}` at the borderline rate `κ = κ0`.
    ExpTail { gamma: f64 },
}

/// Closed-form singular content of `1/drift` at `s = 0`.
#[derive(Debug, Clone)]
enum Singular {
    /// `1/drift − p/s` is bounded.
    Power { p: f64 },
    /// `1/drift − α/s² − b₁/s` is bounded; below `switch` that remainder is
    /// summed from `series` (coefficients of `σ⁰, σ¹, …`).
    Critical {
        alpha: f64,
        b1: f64,
        series: Vec<f64>,
        switch: f64,
    },
}

/// Composite 16-point Gauss–Legendre integral of `f` over `[lo, hi] ⊂ (0, 1]`.
///
/// Panels are log-uniform in `σ` below 0.9 and uniform in the edge variable
/// `ξ = (1 − σ)^{1/3}` above it: coefficient pairs with cube-root structure at
/// `x = 0` (σ = 1) are analytic in `ξ` but not in `σ`, and fixed panels in the
/// right variable are machine-accurate while staying immune to the roundoff
/// noise that defeats adaptive bisection on cancellation-prone integrands.
fn integrate_in_s(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(0.0 < lo && lo <= hi && hi <= 1.0);
    const SPLIT: f64 = 0.9;
    let mut total = 0.0;
    let b = hi.min(SPLIT);
    if lo < b {
        let panels = (((b / lo).ln() / 0.01).ceil() as usize).clamp(1, 64);
        let la = lo.ln();
        let step = (b / lo).ln() / panels as f64;
        for i in 0..panels {
            let p0 = if i == 0 { lo } else { (la + step * i as f64).exp() };
            let p1 = if i + 1 == panels {
                b
            } else {
                (la + step * (i + 1) as f64).exp()
            };
            total += gl_fixed(&GL16, f, p0, p1);
        }
    }
    let a = lo.max(SPLIT);
    if a < hi {
        let xi_hi = (1.0 - a).cbrt();
        let xi_lo = (1.0 - hi).cbrt();
        let g = |xi: f64| 3.0 * xi * xi * f(1.0 - xi * xi * xi);
        let panels = (((xi_hi - xi_lo) / 0.05).ceil() as usize).clamp(1, 16);
        let step = (xi_hi - xi_lo) / panels as f64;
        for i in 0..panels {
            let q0 = xi_lo + step * i as f64;
            let q1 = if i + 1 == panels {
                xi_hi
            } else {
                xi_lo + step * (i + 1) as f64
            };
            total += gl_fixed(&GL16, &g, q0, q1);
        }
    }
    total
}

/// The integrand machinery shared by the table build and point evaluation.
#[derive(Debug, Clone)]
struct Kernel {
    pair: CoefficientPair,
    kappa: f64,
    sing: Singular,
}

impl Kernel {
    /// Bounded remainder of `1/drift` after removing the singular part.
    fn bracket(&self, sigma: f64) -> f64 {
        match &self.sing {
            Singular::Power { p } => {
                let dos = self.pair.drift_over_s(self.kappa, sigma);
                (1.0 - p * dos) / (sigma * dos)
            }
            Singular::Critical {
                alpha,
                b1,
                series,
                switch,
            } => {
                if sigma <= *switch {
                    let mut acc = 0.0;
                    for &c in series.iter().rev() {
                        acc = acc * sigma + c;
                    }
                    acc
                } else {
                    1.0 / self.pair.drift0(sigma) - alpha / (sigma * sigma) - b1 / sigma
                }
            }
        }
    }

    /// Antiderivative difference of the singular part over `[a, b]`.
    fn singular_delta(&self, a: f64, b: f64) -> f64 {
        match &self.sing {
            Singular::Power { p } => p * (b / a).ln(),
            Singular::Critical { alpha, b1, .. } => {
                alpha * (1.0 / a - 1.0 / b) + b1 * (b / a).ln()
            }
        }
    }

    /// `ln w(b) − ln w(a) = ∫_a^b dσ/drift(κ, σ)`.
    fn lnw_delta(&self, a: f64, b: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let remainder = integrate_in_s(&|sig| self.bracket(sig), lo, hi);
        sign * (remainder + self.singular_delta(lo, hi))
    }
}

/// A stationary profile `w_κ`, normalized to unit mass.
///
/// Exposes exact-on-demand point evaluation of `ln w`, the cumulative mass
/// `H(s) = ∫₀ˢ w`, the shape function `β_κ`, tail diagnostics, and a
/// [`Profile`] adapter so the profile can seed the time-dependent solver.
#[derive(Debug, Clone)]
pub struct SelfSimilarSolution {
    kernel: Kernel,
    tail: TailKind,
    /// Ascending grid in `s = 1 − x`; `grid_s[0] = 1e−8`, last node `1`.
    grid_s: Vec<f64>,
    /// Normalized `ln w` at the grid nodes.
    ln_w: Vec<f64>,
    /// Normalized cumulative mass `H(s_i) = ∫₀^{s_i} w dσ`; last entry `1`.
    h_cum: Vec<f64>,
    /// `ln` of the factor that rescales the raw anchor `w(1/2) = 1` to unit mass.
    ln_norm: f64,
}

/// Build the stationary profile at rate `kappa` for `pair`.
///
/// Errors: `Parameter` for `kappa < kappa0`; `Capability` for a closure-backed
/// pair at the borderline rate (its boundary series is too short to control
/// the `s = 0` singularity); `Degenerate` if normalization fails.
pub fn build_selfsimilar(pair: &CoefficientPair, kappa: f64) -> Result<SelfSimilarSolution> {
    let k0 = pair.kappa_zero();
    if !kappa.is_finite() || kappa < k0 * (1.0 - 1e-12) - 1e-300 {
        return Err(CoarsenError::Parameter(format!(
            "stationary profiles exist only for kappa >= kappa0 = {k0}, got {kappa}"
        )));
    }
    let critical = kappa <= k0 * (1.0 + 1e-12);

    let (sing, tail) = if critical {
        if matches!(pair.kind(), PairKind::Custom(_)) {
            return Err(CoarsenError::Capability(
                "borderline-rate profile for a closure-backed pair: the boundary series \
                 does not determine the s = 0 singularity accurately enough"
                    .into(),
            ));
        }
        // drift(κ0, s) = Σ_{k≥2} d_k s^k; invert r(σ) = drift/σ² as a series.
        let phi_s = pair.phi_boundary_series();
        let psi_s = pair.psi_boundary_series();
        let m = phi_s.len().min(psi_s.len());
        let r: Vec<f64> = (1..m).map(|j| k0 * psi_s[j] - phi_s[j]).collect();
        let mut q = vec![0.0; r.len()];
        q[0] = 1.0 / r[0];
        for n in 1..r.len() {
            let mut acc = 0.0;
            for j in 1..=n {
                acc += r[j] * q[n - j];
            }
            q[n] = -acc / r[0];
        }
        let alpha = q[0];
        let b1 = if q.len() > 1 { q[1] } else { 0.0 };
        let series = if q.len() > 2 { q[2..].to_vec() } else { vec![0.0] };
        (
            Singular::Critical {
                alpha,
                b1,
                series,
                switch: CRITICAL_SWITCH,
            },
            TailKind::ExpTail {
                gamma: pair.gamma(),
            },
        )
    } else {
        let p = 1.0 / ((kappa - k0) * pair.psi1().abs());
        (Singular::Power { p }, TailKind::PowerTail { p })
    };

    let kernel = Kernel {
        pair: pair.clone(),
        kappa,
        sing,
    };

    // Logarithmic grid with the anchor s = 1/2 and the endpoint s = 1 exact.
    let n = GRID_N;
    let lb = GRID_BOTTOM.ln();
    let mut grid_s: Vec<f64> = (0..n)
        .map(|i| (lb * (1.0 - i as f64 / (n - 1) as f64)).exp())
        .collect();
    grid_s[n - 1] = 1.0;
    let mut i_half = 0;
    let mut best = f64::INFINITY;
    for (i, &s) in grid_s.iter().enumerate() {
        let d = (s - 0.5).abs();
        if d < best {
            best = d;
            i_half = i;
        }
    }
    grid_s[i_half] = 0.5;

    // ln w relative to the anchor w(1/2) = 1, accumulated node to node.
    let mut ln_raw = vec![0.0; n];
    for i in (0..i_half).rev() {
        ln_raw[i] = ln_raw[i + 1] + kernel.lnw_delta(grid_s[i + 1], grid_s[i]);
    }
    for i in i_half + 1..n {
        ln_raw[i] = ln_raw[i - 1] + kernel.lnw_delta(grid_s[i - 1], grid_s[i]);
    }

    // Cumulative mass from the exact evaluator, segment by segment, plus the
    // analytic piece below the grid.
    let mut sol = SelfSimilarSolution {
        kernel,
        tail,
        grid_s,
        ln_w: ln_raw,
        h_cum: Vec::new(),
        ln_norm: 0.0,
    };
    let mut h_raw = vec![0.0; n];
    h_raw[0] = match tail {
        TailKind::PowerTail { p } => sol.ln_w[0].exp() * sol.grid_s[0] / (p + 1.0),
        // ∫₀ˢ e^{−α/σ} dσ ≤ s²/α · e^{−α/s}; zero to machine precision here.
        TailKind::ExpTail { .. } => 0.0,
    };
    for i in 1..n {
        let seg = integrate_in_s(
            &|sig| sol.ln_w_at_s(sig).expect("inside (0, 1]").exp(),
            sol.grid_s[i - 1],
            sol.grid_s[i],
        );
        h_raw[i] = h_raw[i - 1] + seg;
    }
    let mass_raw = h_raw[n - 1];
    if !(mass_raw.is_finite() && mass_raw > 0.0) {
        return Err(CoarsenError::Degenerate(format!(
            "stationary profile at kappa = {kappa} has non-normalizable mass {mass_raw}"
        )));
    }
    sol.ln_norm = -mass_raw.ln();
    let scale = 1.0 / mass_raw;
    for l in &mut sol.ln_w {
        *l += sol.ln_norm;
    }
    sol.h_cum = h_raw.iter().map(|&v| v * scale).collect();
    Ok(sol)
}

impl SelfSimilarSolution {
    pub fn pair(&self) -> &CoefficientPair {
        &self.kernel.pair
    }

    pub fn kappa(&self) -> f64 {
        self.kernel.kappa
    }

    pub fn tail(&self) -> TailKind {
        self.tail
    }

    /// `ln` of the normalization factor applied to the raw anchor `w(1/2) = 1`.
    pub fn ln_norm(&self) -> f64 {
        self.ln_norm
    }

    /// Grid node closest to `s` in log distance (index into the tables).
    fn anchor_index(&self, s: f64) -> usize {
        match self
            .grid_s
            .binary_search_by(|g| g.partial_cmp(&s).expect("grid is finite"))
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.grid_s.len() => self.grid_s.len() - 1,
            Err(i) => {
                // compare log distances: s/grid[i−1] vs grid[i]/s
                if s * s <= self.grid_s[i - 1] * self.grid_s[i] {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Normalized `ln w` at `s ∈ (0, 1]`, continued from the nearest node.
    pub fn ln_w_at_s(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(CoarsenError::Domain(format!(
                "stationary profile needs s in (0, 1], got {s}"
            )));
        }
        let i = self.anchor_index(s);
        if self.grid_s[i] == s {
            return Ok(self.ln_w[i]);
        }
        Ok(self.ln_w[i] + self.kernel.lnw_delta(self.grid_s[i], s))
    }

    /// Normalized `w` at `x ∈ [0, 1]` (zero at `x = 1`).
    pub fn w_at(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(CoarsenError::Domain(format!(
                "stationary profile needs x in [0, 1], got {x}"
            )));
        }
        let s = 1.0 - x;
        if s <= 0.0 {
            return Ok(0.0);
        }
        Ok(self.ln_w_at_s(s)?.exp())
    }

    /// Cumulative mass `H(s) = ∫₀ˢ w dσ` for `s ∈ [0, 1]`; `H(1) = 1`.
    pub fn h_at_s(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(CoarsenError::Domain(format!(
                "cumulative mass needs s in [0, 1], got {s}"
            )));
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        if s < self.grid_s[0] {
            let w = self.ln_w_at_s(s)?.exp();
            return Ok(match self.tail {
                TailKind::PowerTail { p } => w * s / (p + 1.0),
                TailKind::ExpTail { .. } => {
                    // ∫₀ˢ e^{−α/σ}·σ^{b₁} dσ ≈ (s²/α)·w(s) for s ≪ α.
                    match &self.kernel.sing {
                        Singular::Critical { alpha, .. } => w * s * s / alpha,
                        _ => unreachable!("exp tail implies critical singularity"),
                    }
                }
            });
        }
        let i = match self
            .grid_s
            .binary_search_by(|g| g.partial_cmp(&s).expect("grid is finite"))
        {
            Ok(i) => return Ok(self.h_cum[i]),
            Err(i) => i, // grid_s[i−1] < s < grid_s[i]
        };
        let partial = integrate_in_s(
            &|sig| self.ln_w_at_s(sig).expect("inside (0, 1]").exp(),
            self.grid_s[i - 1],
            s,
        );
        Ok(self.h_cum[i - 1] + partial)
    }

    /// Shape function `β_κ(x) = c·h/w² = H(s)/[w(s)·drift(κ, s)]`, `s = 1 − x`.
    pub fn beta_kappa_at(&self, x: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&x) {
            return Err(CoarsenError::Domain(format!(
                "shape function needs x in [0, 1), got {x}"
            )));
        }
        let s = 1.0 - x;
        let w = self.ln_w_at_s(s)?.exp();
        let h = self.h_at_s(s)?;
        let drift = self.kernel.pair.drift(self.kernel.kappa, s);
        if w == 0.0 || drift == 0.0 {
            return Ok(self.beta_limit());
        }
        Ok(h / (w * drift))
    }

    /// Limit of `β_κ` at the large-cluster edge `x → 1`.
    pub fn beta_limit(&self) -> f64 {
        match self.tail {
            TailKind::PowerTail { p } => p / (p + 1.0),
            TailKind::ExpTail { .. } => 1.0,
        }
    }

    /// Fit the tail decay on the grid and return `(measured, expected)`:
    /// the slope of `ln w` vs `ln σ` for a power tail (expected `p`), or the
    /// decay constant recovered from `ln w` vs `1/σ` for the borderline tail
    /// (expected `γ`).
    pub fn tail_exponent_check(&self) -> (f64, f64) {
        let n_pts = 24;
        let (lo, hi) = (1e-6f64, 1e-3f64);
        let sigmas: Vec<f64> = (0..n_pts)
            .map(|i| {
                (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n_pts - 1) as f64).exp()
            })
            .collect();
        let lnw: Vec<f64> = sigmas
            .iter()
            .map(|&s| self.ln_w_at_s(s).expect("tail window is inside (0, 1]"))
            .collect();
        match self.tail {
            TailKind::PowerTail { p } => {
                let xs: Vec<f64> = sigmas.iter().map(|&s| s.ln()).collect();
                let (slope, _, _) = linear_fit(&xs, &lnw);
                (slope, p)
            }
            TailKind::ExpTail { gamma } => {
                let xs: Vec<f64> = sigmas.iter().map(|&s| 1.0 / s).collect();
                let (slope, _, _) = linear_fit(&xs, &lnw);
                (-2.0 / slope, gamma)
            }
        }
    }

    /// Max relative residual of the stationarity relation
    /// `drift(κ, s)·d(ln w)/ds = 1` over `n_pts` log-spaced points
    /// `s ∈ [1e−4, 0.9]`, with the derivative from extrapolated central
    /// differences of the exact evaluator.
    pub fn stationarity_residual(&self, n_pts: usize) -> f64 {
        let (lo, hi) = (1e-4f64, 0.9f64);
        let mut worst = 0.0f64;
        for i in 0..n_pts {
            let s = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n_pts - 1) as f64).exp();
            let h = 1e-3 * s;
            let d = |step: f64| {
                let up = self.ln_w_at_s(s + step).expect("inside (0, 1]");
                let dn = self.ln_w_at_s(s - step).expect("inside (0, 1]");
                (up - dn) / (2.0 * step)
            };
            let d1 = d(h);
            let d2 = d(0.5 * h);
            let deriv = (4.0 * d2 - d1) / 3.0;
            let res = (self.kernel.pair.drift(self.kernel.kappa, s) * deriv - 1.0).abs();
            worst = worst.max(res);
        }
        worst
    }

    /// Adapt the profile into an initial datum for the time-dependent solver.
    pub fn to_profile(&self) -> Profile {
        Profile::from_table(Arc::new(self.clone()))
    }
}

impl ProfileTable for SelfSimilarSolution {
    fn ln_w0(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "profile needs x >= 0, got {x}"
            )));
        }
        if x >= 1.0 {
            return Ok(f64::NEG_INFINITY);
        }
        self.ln_w_at_s(1.0 - x)
    }

    fn ln_c0(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "profile needs x >= 0, got {x}"
            )));
        }
        if x >= 1.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let s = 1.0 - x;
        // c = −dw/dx = dw/ds = w/drift on a stationary profile.
        Ok(self.ln_w_at_s(s)? - self.kernel.pair.drift(self.kernel.kappa, s).ln())
    }

    fn h0(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "profile needs x >= 0, got {x}"
            )));
        }
        if x >= 1.0 {
            return Ok(0.0);
        }
        self.h_at_s(1.0 - x)
    }

    fn beta(&self, x: f64) -> Result<f64> {
        self.beta_kappa_at(x)
    }

    fn describe(&self) -> String {
        format!(
            "stationary profile at kappa = {} ({:?})",
            self.kernel.kappa, self.tail
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad_a() -> CoefficientPair {
        CoefficientPair::quadratic(-0.5, -1.0, 0.0).expect("admissible")
    }

    #[test]
    fn rejects_kappa_below_threshold() {
        let pair = CoefficientPair::lsw();
        let err = build_selfsimilar(&pair, 1.9).unwrap_err();
        assert!(matches!(err, CoarsenError::Parameter(_)));
    }

    #[test]
    fn quadratic_power_profile_matches_closed_form() {
        // At kappa = 3/2 the drift is s(1 + s/2), so w = C·s/(1 + s/2) with
        // C = 2.6445262166909076.
        let sol = build_selfsimilar(&quad_a(), 1.5).expect("build");
        let c = 2.644_526_216_690_907_6_f64;
        for &s in &[1e-7, 1e-4, 0.05, 0.3, 0.5, 0.77, 1.0] {
            let expect = c * s / (1.0 + 0.5 * s);
            let got = sol.ln_w_at_s(s).unwrap().exp();
            assert_relative_eq!(got, expect, max_relative = 1e-8);
        }
        assert_relative_eq!(sol.w_at(0.5).unwrap(), 1.057_810_486_676_363, max_relative = 1e-8);
        assert!(matches!(sol.tail(), TailKind::PowerTail { p } if (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn quadratic_power_beta_values() {
        let sol = build_selfsimilar(&quad_a(), 1.5).expect("build");
        assert_relative_eq!(
            sol.beta_kappa_at(0.0).unwrap(),
            0.378_139_567_567_342_47,
            max_relative = 1e-7
        );
        assert_relative_eq!(
            sol.beta_kappa_at(0.5).unwrap(),
            0.429_703_178_972_643_91,
            max_relative = 1e-7
        );
        assert_relative_eq!(
            sol.beta_kappa_at(0.9).unwrap(),
            0.483_934_332_227_198_77,
            max_relative = 1e-7
        );
        assert_relative_eq!(sol.beta_limit(), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn quadratic_borderline_profile_matches_closed_form() {
        // At kappa = kappa0 = 1/2 the drift is s²/2, so w = e^{−2/s}/I with
        // I = ∫₀¹ e^{−2/σ} dσ = 0.037534261820490453.
        let sol = build_selfsimilar(&quad_a(), 0.5).expect("build");
        let inv_i = 1.0 / 0.037_534_261_820_490_453_f64;
        for &s in &[0.05_f64, 0.2, 0.5, 0.9, 1.0] {
            let expect = inv_i * (-2.0 / s).exp();
            let got = sol.ln_w_at_s(s).unwrap().exp();
            assert_relative_eq!(got, expect, max_relative = 1e-8);
        }
        assert_relative_eq!(
            sol.w_at(0.5).unwrap(),
            0.487_971_202_852_734_12,
            max_relative = 1e-8
        );
        // Shape function values of the borderline profile.
        assert_relative_eq!(
            sol.beta_kappa_at(0.0).unwrap(),
            0.554_685_532_447_109_66,
            max_relative = 1e-7
        );
        assert_relative_eq!(
            sol.beta_kappa_at(0.5).unwrap(),
            0.698_469_601_583_106_67,
            max_relative = 1e-7
        );
        assert_relative_eq!(
            sol.beta_kappa_at(0.9).unwrap(),
            0.912_581_801_615_663_32,
            max_relative = 1e-7
        );
        assert_relative_eq!(sol.beta_limit(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn cube_root_pair_kappa3_profile() {
        let pair = CoefficientPair::lsw();
        let sol = build_selfsimilar(&pair, 3.0).expect("build");
        let table = [
            (0.0, 2.115_592_473_989_460_4),
            (0.25, 1.691_816_630_211_437_7),
            (0.5, 1.001_084_091_695_001_7),
            (0.75, 0.273_646_576_445_306_57),
            (0.9, 0.029_742_059_953_983_861),
        ];
        for &(x, expect) in &table {
            assert_relative_eq!(sol.w_at(x).unwrap(), expect, max_relative = 1e-8);
        }
        let betas = [
            (0.0, 0.157_560_275_635_105_12),
            (0.5, 0.541_576_330_745_685_02),
            (0.9, 0.709_853_600_429_699_48),
        ];
        for &(x, expect) in &betas {
            assert_relative_eq!(sol.beta_kappa_at(x).unwrap(), expect, max_relative = 1e-7);
        }
        // p = 1/[(3 − 2)·(1/3)] = 3 at the edge; limit β = 3/4.
        let (fitted, expected) = sol.tail_exponent_check();
        assert_relative_eq!(expected, 3.0, max_relative = 1e-12);
        assert!(
            (fitted - 3.0).abs() < 1e-3,
            "tail exponent fit {fitted} should be within 1e-3 of 3"
        );
        assert_relative_eq!(sol.beta_limit(), 0.75, max_relative = 1e-12);
    }

    #[test]
    fn cube_root_pair_kappa5_profile() {
        let pair = CoefficientPair::lsw();
        let sol = build_selfsimilar(&pair, 5.0).expect("build");
        let table = [
            (0.0, 1.580_845_218_098_674_3),
            (0.25, 1.405_626_855_989_352_6),
            (0.5, 1.101_596_051_313_809_4),
            (0.75, 0.647_529_344_067_077_26),
            (0.9, 0.285_768_780_514_675_20),
        ];
        for &(x, expect) in &table {
            assert_relative_eq!(sol.w_at(x).unwrap(), expect, max_relative = 1e-8);
        }
        let betas = [
            (0.0, 0.126_514_599_728_204_55),
            (0.5, 0.378_584_351_093_481_89),
            (0.9, 0.477_480_687_564_769_62),
        ];
        for &(x, expect) in &betas {
            assert_relative_eq!(sol.beta_kappa_at(x).unwrap(), expect, max_relative = 1e-7);
        }
        // Rate recovery from the edge shape limit: κ = [1/β∞ − φ'(1) − 1]/|ψ'(1)|.
        let beta_edge = sol.beta_kappa_at(1.0 - 1e-5).unwrap();
        let pair = sol.pair();
        let recovered = (1.0 / beta_edge - pair.phi1() - 1.0) / pair.psi1().abs();
        assert!(
            (recovered - 5.0).abs() < 1e-3,
            "recovered rate {recovered} should be within 1e-3 of 5"
        );
    }

    #[test]
    fn cube_root_pair_borderline_profile() {
        let pair = CoefficientPair::lsw();
        let sol = build_selfsimilar(&pair, 2.0).expect("build");
        let table = [
            (0.0, 2.987_783_309_447_294_1),
            (0.25, 1.981_652_584_660_983_6),
            (0.5, 0.566_824_131_880_583_72),
            (0.75, 0.004_728_287_302_536_852_5),
            (0.9, 3.419_218_343_438_735_7e-10),
        ];
        for &(x, expect) in &table {
            assert_relative_eq!(sol.w_at(x).unwrap(), expect, max_relative = 1e-8);
        }
        let betas = [
            (0.0, 0.167_348_146_841_510_51),
            (0.5, 0.678_679_481_711_734_44),
            (0.9, 0.934_304_978_930_798_21),
        ];
        for &(x, expect) in &betas {
            assert_relative_eq!(sol.beta_kappa_at(x).unwrap(), expect, max_relative = 1e-7);
        }
        let (fitted, expected) = sol.tail_exponent_check();
        assert_relative_eq!(expected, 2.0 / 3.0, max_relative = 1e-12);
        assert!(
            (fitted - 2.0 / 3.0).abs() < 1e-2,
            "decay-constant fit {fitted} should be within 1e-2 of 2/3"
        );
    }

    #[test]
    fn borderline_rate_needs_series_backed_pair() {
        use crate::coeffs::CustomPair;
        let custom = CustomPair {
            phi: Box::new(|x: f64| 0.5 * x * (1.0 - x)),
            psi: Box::new(|x: f64| 1.0 - x),
            phi_derivs: vec![Box::new(|x: f64| 0.5 - x)],
            psi_derivs: vec![Box::new(|_| -1.0)],
            phi_series: vec![0.5, -0.5],
            psi_series: vec![1.0],
            c2_on_closed_interval: true,
            phi_superlinear_at_0: false,
        };
        let pair = CoefficientPair::custom(custom).expect("admissible");
        let k0 = pair.kappa_zero();
        let err = build_selfsimilar(&pair, k0).unwrap_err();
        assert!(matches!(err, CoarsenError::Capability(_)));
        // Above the borderline the same pair is fine.
        assert!(build_selfsimilar(&pair, k0 + 1.0).is_ok());
    }

    #[test]
    fn stationarity_residual_is_small() {
        for sol in [
            build_selfsimilar(&CoefficientPair::lsw(), 3.0).expect("build"),
            build_selfsimilar(&CoefficientPair::lsw(), 2.0).expect("build"),
            build_selfsimilar(&quad_a(), 1.5).expect("build"),
        ] {
            let res = sol.stationarity_residual(50);
            assert!(res <= 1e-8, "stationarity residual {res} exceeds 1e-8");
        }
    }

    #[test]
    fn unit_mass_and_cumulative_consistency() {
        let sol = build_selfsimilar(&CoefficientPair::lsw(), 3.0).expect("build");
        assert_relative_eq!(sol.h_at_s(1.0).unwrap(), 1.0, max_relative = 1e-14);
        // H is increasing and hits the half-mass point between 0 and 1.
        let h_half = sol.h_at_s(0.5).unwrap();
        assert!(h_half > 0.0 && h_half < 1.0);
        // Interior partial-cell evaluation agrees with direct quadrature.
        let mid = 0.37;
        let direct = crate::util::quad::adaptive(
            &|s| sol.ln_w_at_s(s).unwrap().exp(),
            0.017,
            mid,
            1e-11,
        );
        let via_table = sol.h_at_s(mid).unwrap() - sol.h_at_s(0.017).unwrap();
        assert_relative_eq!(via_table, direct, max_relative = 1e-8);
    }

    #[test]
    fn profile_adapter_exposes_consistent_views() {
        let sol = build_selfsimilar(&quad_a(), 1.5).expect("build");
        let profile = sol.to_profile();
        let x = 0.3;
        assert_relative_eq!(
            profile.w0_at(x).unwrap(),
            sol.w_at(x).unwrap(),
            max_relative = 1e-13
        );
        assert_relative_eq!(
            profile.beta_at(x).unwrap(),
            sol.beta_kappa_at(x).unwrap(),
            max_relative = 1e-13
        );
        // c0 = w/drift: check against the closed form C/(1 + s/2)².
        let s = 1.0 - x;
        let c_closed = 2.644_526_216_690_907_6 / ((1.0 + 0.5 * s) * (1.0 + 0.5 * s));
        assert_relative_eq!(profile.c0_at(x).unwrap(), c_closed, max_relative = 1e-8);
    }
}
