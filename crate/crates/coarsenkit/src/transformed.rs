//! The straightening change of variables z = f(x)·u(t).
//!
//! The function f, defined by d ln f/dx = |ψ′(1)|/ψ(x) together with the
//! normalization (1−x)·f(x) → 1 as x → 1, rectifies the linear part of the
//! characteristic flow: in the variable z = f(x)·u(t) the transport field
//! becomes the autonomous, negative, concave field g(z, u). For quadratic
//! coefficient pairs f has the closed form 1/(1−x) − ψ″(1)/2ψ′(1) and the
//! rectified flow is an exact translation, z ↦ z + α0·v(t), which ties any
//! generic solver to the two-parameter closed-form dynamics.
//!
//! With s = 1−x the implementation writes f(x) = e^{r(s)}/s, where
//! r(s) = ∫₀ˢ [1/σ − |ψ′(1)|/ψ(1−σ)] dσ is bounded; splitting off the 1/s
//! factor imposes the boundary normalization exactly in the limit.

use crate::coeffs::{CoefficientPair, PairKind};
use crate::error::{CoarsenError, Result};
use crate::quadmodel;
use crate::util::quad::{gl_fixed, GL16};

/// Boundary of the cube-root-graded quadrature region: above this point the
/// integration variable is substituted with σ = 1 − ξ³ so pairs whose
/// coefficients carry a (1−σ)^{1/3} branch point at σ = 1 are integrated to
/// machine precision.
const BOUNDARY_SPLIT: f64 = 0.9;

/// Evaluators for the straightening map f, its inverse k, the rectified
/// field g(z, u), and the damping expression Γ.
#[derive(Debug, Clone)]
pub struct TransformTables {
    pair: CoefficientPair,
    /// Translation speed of the rectified flow: α0 = (κ0·ψ″(1) − φ″(1))/2.
    alpha0: f64,
    /// f(0) = e^{r(1)}, the lower edge of the range of f.
    f0: f64,
    /// Lower bound of r over [0, 1], used to bracket the inverse.
    r_floor: f64,
    /// Closed-form curvature ratio when the pair is quadratic.
    quadratic_q: Option<f64>,
}

impl TransformTables {
    /// Build the tables for an admissible pair.
    pub fn new(pair: &CoefficientPair) -> Result<Self> {
        let quadratic_q = match pair.kind() {
            PairKind::Quadratic { .. } => Some(pair.q_ratio()),
            _ => None,
        };
        let mut tables = Self {
            pair: pair.clone(),
            alpha0: pair.a2(),
            f0: f64::NAN,
            r_floor: 0.0,
            quadratic_q,
        };
        tables.f0 = match quadratic_q {
            Some(q) => 1.0 + q,
            None => tables.r_at(1.0).exp(),
        };
        if !(tables.f0 > 0.0 && tables.f0.is_finite()) {
            return Err(CoarsenError::Degenerate(format!(
                "straightening map has no finite positive edge value: f(0) = {}",
                tables.f0
            )));
        }
        let mut floor = 0.0f64;
        for i in 1..=64 {
            floor = floor.min(tables.r_at(i as f64 / 64.0));
        }
        tables.r_floor = floor - 0.1;
        Ok(tables)
    }

    pub fn pair(&self) -> &CoefficientPair {
        &self.pair
    }

    /// Translation speed α0 of the rectified quadratic flow; the z → ∞
    /// limit of −g(z, u)/u for any admissible pair.
    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    /// f(0), the smallest value of the straightening map.
    pub fn f_edge(&self) -> f64 {
        self.f0
    }

    /// r(s) = ∫₀ˢ [1/σ − |ψ′(1)|/ψ(1−σ)] dσ. The integrand is bounded
    /// (it tends to the curvature ratio q at σ = 0), analytic below the
    /// boundary region, and integrated there with the cube-root grading.
    fn r_at(&self, s: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&s));
        let psi1_abs = self.pair.psi1().abs();
        let f = |sig: f64| (1.0 - psi1_abs / self.pair.psi_over_s(sig)) / sig;
        let mut total = 0.0;
        let inner = s.min(BOUNDARY_SPLIT);
        if inner > 0.0 {
            let panels = ((inner / 0.05).ceil() as usize).max(1);
            let step = inner / panels as f64;
            for i in 0..panels {
                let a = step * i as f64;
                let b = if i + 1 == panels { inner } else { step * (i + 1) as f64 };
                total += gl_fixed(&GL16, &f, a, b);
            }
        }
        if s > BOUNDARY_SPLIT {
            let xi_hi = (1.0 - BOUNDARY_SPLIT).cbrt();
            let xi_lo = (1.0 - s).cbrt();
            let g = |xi: f64| 3.0 * xi * xi * f(1.0 - xi * xi * xi);
            let panels = 4;
            let step = (xi_hi - xi_lo) / panels as f64;
            for i in 0..panels {
                let a = xi_lo + step * i as f64;
                let b = if i + 1 == panels { xi_hi } else { xi_lo + step * (i + 1) as f64 };
                total += gl_fixed(&GL16, &g, a, b);
            }
        }
        total
    }

    /// The straightening map f(x) = e^{r(1−x)}/(1−x); strictly increasing,
    /// f(0) > 0, and (1−x)·f(x) → 1 as x → 1.
    pub fn f_at(&self, x: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&x) {
            return Err(CoarsenError::Domain(format!(
                "straightening map needs x in [0,1), got {x}"
            )));
        }
        let s = 1.0 - x;
        if let Some(q) = self.quadratic_q {
            return Ok(1.0 / s + q);
        }
        Ok(self.r_at(s).exp() / s)
    }

    /// df/dx = f(x)·|ψ′(1)|/ψ(x).
    pub fn f_prime_at(&self, x: f64) -> Result<f64> {
        let f = self.f_at(x)?;
        let s = 1.0 - x;
        Ok(f * self.pair.psi1().abs() / (self.pair.psi_over_s(s) * s))
    }

    /// The inverse k = f⁻¹, defined on [f(0), ∞).
    pub fn k_at(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "inverse map needs a finite argument, got {z}"
            )));
        }
        if z < self.f0 * (1.0 - 1e-12) {
            return Err(CoarsenError::Domain(format!(
                "inverse map argument {z} below the edge value f(0) = {}",
                self.f0
            )));
        }
        if z <= self.f0 {
            return Ok(0.0);
        }
        if let Some(q) = self.quadratic_q {
            return Ok(1.0 - 1.0 / (z - q));
        }
        // r(s) − ln s is strictly decreasing from +∞ to ln f(0); bisect its
        // level set in t = ln s. At s_min = e^{r_floor}/(2z) the objective
        // is at least ln 2 > 0.
        let target = z.ln();
        let objective = |t: f64| self.r_at(t.exp()) - t - target;
        let t_lo = self.r_floor - (2.0 * z).ln();
        let t = crate::util::root::bisect(&objective, t_lo, 0.0, 120);
        Ok(1.0 - t.exp())
    }

    /// The rectified transport field g(z, u) = −u·f′(x)·[κ0ψ(x) − φ(x)]
    /// evaluated at x = k(z/u); negative, homogeneous of degree one in
    /// (z, u), and tending to −α0·u as z → ∞.
    pub fn g_zu_at(&self, z: f64, u: f64) -> Result<f64> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "rectified field needs u > 0, got {u}"
            )));
        }
        let zeta = z / u;
        if zeta < self.f0 * (1.0 - 1e-9) {
            return Err(CoarsenError::Domain(format!(
                "rectified field needs z ≥ f(0)·u, got z/u = {zeta} < {}",
                self.f0
            )));
        }
        let x = self.k_at(zeta.max(self.f0))?;
        let s = 1.0 - x;
        // −u·f′·drift0 with f′ = f·|ψ′(1)|/ψ and f(x) = z/u collapses to
        // −z·|ψ′(1)|·drift0(s)/ψ(1−s).
        Ok(-z * self.pair.psi1().abs() * self.pair.drift0(s) / (self.pair.psi_over_s(s) * s))
    }

    /// Damping expression Γ(x) = φ′(x) + φ′(1) − φ(x)[ψ′(x) + ψ′(1)]/ψ(x),
    /// the z-derivative of the rectified field at matched points. Fails at
    /// x = 0 for pairs whose φ′ diverges there.
    pub fn gamma_at(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(CoarsenError::Domain(format!(
                "damping expression needs x in [0,1], got {x}"
            )));
        }
        let value = self.pair.y1_expression(x)?;
        if !value.is_finite() {
            return Err(CoarsenError::Domain(format!(
                "damping expression diverges at x = {x}"
            )));
        }
        Ok(value)
    }

    /// Residual of the rectification identity f(F(x, t)) = f(x)·u + α0·v
    /// for one probe, relative to the magnitude of the right-hand side.
    /// `mapped` is the backward label F(x, t) measured by any solver.
    pub fn p6_residual(&self, u: f64, v: f64, x: f64, mapped: f64) -> Result<f64> {
        let lhs = self.f_at(mapped)?;
        let rhs = self.f_at(x)? * u + self.alpha0 * v;
        Ok((lhs - rhs).abs() / rhs.abs().max(1.0))
    }

    /// Maximum rectification residual over probe positions, with the
    /// backward labels supplied by the closed-form quadratic map.
    pub fn p6_max_residual(&self, u: f64, v: f64, probes: &[f64]) -> Result<f64> {
        let mut worst = 0.0f64;
        for &x in probes {
            let mapped = quadmodel::map_backward(&self.pair, u, v, x)?;
            worst = worst.max(self.p6_residual(u, v, x, mapped)?);
        }
        Ok(worst)
    }
}
