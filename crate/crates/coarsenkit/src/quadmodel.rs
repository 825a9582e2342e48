//! Closed-form transport dynamics for quadratic coefficient pairs.
//!
//! For quadratic coefficients the backward characteristic map of the
//! conservation-closed transport equation is a Möbius function of the
//! boundary distance 1−x, parametrized by two scalars: u(t), the exponential
//! of the integrated linear dilation rate, and v(t) = ∫₀ᵗ u. Conservation of
//! mass turns (u, v) into a self-contained two-dimensional ODE driven by
//! three quadratures against the initial density. This module integrates
//! that system, its rescaled attractor form for power-law data, and the
//! window-tracking objects used on the borderline (critical) line.
//!
//! With s = 1−x and A(t) = a₂·v + q·(u−1) (a₂ the curvature gap, q the
//! endpoint curvature ratio of the pair), the backward map is
//!
//!   1 − F(x, t) = s / (u + A·s),
//!
//! the transported density is w(x, t) = eᵗ·w0(F(x, t)), and unit mass pins
//! the evolution of u through G(u, v) = ∫₀¹ w0(F) dx = e^{−t}.

use crate::coeffs::{CoefficientPair, PairKind};
use crate::error::{CoarsenError, Result};
use crate::profiles::{Profile, ProfileKind};
use crate::util::quad::adaptive;
use crate::util::root::bisect;
use crate::util::special::e1;

/// Default integration controls for [`integrate_uv`] / [`integrate_reduced`].
#[derive(Debug, Clone, Copy)]
pub struct UvOptions {
    /// Fixed Runge–Kutta step.
    pub dt: f64,
    /// Final time.
    pub t_end: f64,
    /// Spacing between recorded samples.
    pub cadence: f64,
    /// Relative tolerance of the density quadratures.
    pub quad_tol: f64,
}

impl Default for UvOptions {
    fn default() -> Self {
        Self {
            dt: 2e-3,
            t_end: 10.0,
            cadence: 0.1,
            quad_tol: 1e-11,
        }
    }
}

/// One recorded state of the (u, v) system.
#[derive(Debug, Clone, Copy)]
pub struct UvSample {
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// Instantaneous closure rate κ(t).
    pub kappa: f64,
    /// Running average (1/t)∫₀ᵗ κ.
    pub kappa_avg: f64,
    /// G(u, v) = ∫ w0(F) dx, the mass carried per unit eᵗ.
    pub g_mass: f64,
    /// eᵗ·G − 1, the defect of the conservation law.
    pub mass_defect: f64,
}

/// Output of [`integrate_uv`].
#[derive(Debug, Clone)]
pub struct UvTrajectory {
    pub samples: Vec<UvSample>,
    pub max_mass_defect: f64,
}

impl UvTrajectory {
    /// The sample recorded at the final time.
    pub fn final_sample(&self) -> &UvSample {
        self.samples.last().expect("a trajectory records at least t = 0")
    }

    /// Sample nearest to time `t`.
    pub fn sample_at(&self, t: f64) -> &UvSample {
        self.samples
            .iter()
            .min_by(|a, b| {
                (a.t - t)
                    .abs()
                    .partial_cmp(&(b.t - t).abs())
                    .expect("sample times are finite")
            })
            .expect("a trajectory records at least t = 0")
    }
}

fn require_quadratic(pair: &CoefficientPair, what: &str) -> Result<()> {
    match pair.kind() {
        PairKind::Quadratic { .. } => Ok(()),
        other => Err(CoarsenError::Capability(format!(
            "{what} is exact only for quadratic coefficient pairs, got {other:?}"
        ))),
    }
}

/// Möbius coefficient A(t) = a₂·v + q·(u − 1) of the backward map.
pub fn coefficient_a(pair: &CoefficientPair, u: f64, v: f64) -> f64 {
    pair.a2() * v + pair.q_ratio() * (u - 1.0)
}

fn check_state(pair: &CoefficientPair, u: f64, v: f64) -> Result<f64> {
    if !(u > 0.0) || !u.is_finite() || !v.is_finite() {
        return Err(CoarsenError::Degenerate(format!(
            "map state left its domain: u = {u}, v = {v}"
        )));
    }
    let a = coefficient_a(pair, u, v);
    // The denominator u + A·s is linear in s; positivity at both ends keeps
    // every backward position well defined.
    if u + a <= 0.0 {
        return Err(CoarsenError::Degenerate(format!(
            "backward-map denominator lost positivity: u + A = {}",
            u + a
        )));
    }
    Ok(a)
}

/// Backward label F(x, t) of the point x under the state (u, v):
/// 1 − F = (1−x)/(u + A(1−x)).
pub fn map_backward(pair: &CoefficientPair, u: f64, v: f64, x: f64) -> Result<f64> {
    require_quadratic(pair, "the two-parameter backward map")?;
    if !(0.0..=1.0).contains(&x) {
        return Err(CoarsenError::Domain(format!(
            "backward map needs x in [0,1], got {x}"
        )));
    }
    let a = check_state(pair, u, v)?;
    let s = 1.0 - x;
    let pos = 1.0 - s / (u + a * s);
    if pos < -1e-9 {
        return Err(CoarsenError::Degenerate(format!(
            "state (u, v) = ({u}, {v}) maps x = {x} to a negative label {pos}"
        )));
    }
    Ok(pos.max(0.0))
}

/// Spatial derivative ∂F/∂x = u/(u + A(1−x))² of the backward map.
pub fn map_backward_dx(pair: &CoefficientPair, u: f64, v: f64, x: f64) -> Result<f64> {
    require_quadratic(pair, "the two-parameter backward map")?;
    if !(0.0..=1.0).contains(&x) {
        return Err(CoarsenError::Domain(format!(
            "backward map needs x in [0,1], got {x}"
        )));
    }
    let a = check_state(pair, u, v)?;
    let den = u + a * (1.0 - x);
    Ok(u / (den * den))
}

/// Current position of the initial label z, or `None` once the label has
/// been carried out of the unit interval through x = 0.
pub fn map_forward(pair: &CoefficientPair, u: f64, v: f64, z: f64) -> Result<Option<f64>> {
    require_quadratic(pair, "the two-parameter forward map")?;
    if !(0.0..=1.0).contains(&z) {
        return Err(CoarsenError::Domain(format!(
            "forward map needs a label in [0,1], got {z}"
        )));
    }
    let a = check_state(pair, u, v)?;
    let sz = 1.0 - z;
    let den = 1.0 - a * sz;
    if den <= 0.0 {
        return Ok(None);
    }
    let s = u * sz / den;
    if s > 1.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - s))
}

/// Dilation factor D(z, t) = u/(1 − A(1−z))² of the forward flow, or `None`
/// once the label has exited.
pub fn map_jacobian(pair: &CoefficientPair, u: f64, v: f64, z: f64) -> Result<Option<f64>> {
    require_quadratic(pair, "the two-parameter forward map")?;
    if !(0.0..=1.0).contains(&z) {
        return Err(CoarsenError::Domain(format!(
            "forward map needs a label in [0,1], got {z}"
        )));
    }
    let a = check_state(pair, u, v)?;
    let sz = 1.0 - z;
    let den = 1.0 - a * sz;
    if den <= 0.0 {
        return Ok(None);
    }
    Ok(Some(u / (den * den)))
}

/// ∫₀^{s_upper} w0(1 − σ/(u + Aσ)) dσ — the mass (per unit eᵗ) carried by
/// the boundary layer of width `s_upper`.
pub fn partial_mass(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    s_upper: f64,
    tol: f64,
) -> Result<f64> {
    require_quadratic(pair, "the two-parameter mass functional")?;
    if !(0.0..=1.0).contains(&s_upper) {
        return Err(CoarsenError::Domain(format!(
            "mass integral needs an upper limit in [0,1], got {s_upper}"
        )));
    }
    let a = check_state(pair, u, v)?;
    if s_upper == 0.0 {
        return Ok(0.0);
    }
    // 1 − F is increasing in σ, so the deepest backward label is reached at
    // the upper limit; confirm it is still inside the interval.
    let deepest = 1.0 - s_upper / (u + a * s_upper);
    if deepest < -1e-9 {
        return Err(CoarsenError::Degenerate(format!(
            "state (u, v) = ({u}, {v}) maps the layer edge to a negative label {deepest}"
        )));
    }
    let f = |sig: f64| -> f64 {
        let den = u + a * sig;
        let pos = (1.0 - sig / den).max(0.0);
        profile
            .w0_at(pos)
            .expect("backward labels stay inside the unit interval")
    };
    Ok(adaptive(&f, 0.0, s_upper, tol))
}

/// G(u, v) = ∫₀¹ w0(F(x)) dx; conservation of mass demands eᵗ·G = 1.
pub fn mass_integral(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    tol: f64,
) -> Result<f64> {
    partial_mass(pair, profile, u, v, 1.0, tol)
}

/// Mean cluster size ⟨X_t⟩ = (∫ w dx)/w(0, t) implied by the state (u, v);
/// the eᵗ factors cancel.
pub fn mean_cluster_size(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    tol: f64,
) -> Result<f64> {
    let g = mass_integral(pair, profile, u, v, tol)?;
    let f0 = map_backward(pair, u, v, 0.0)?;
    let w00 = profile.w0_at(f0)?;
    if !(w00 > 0.0) {
        return Err(CoarsenError::Degenerate(format!(
            "density vanished at the boundary label F(0) = {f0}"
        )));
    }
    Ok(g / w00)
}

/// Shape function β(x, t) = c·h/w² of the transported solution.
pub fn shape_at(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    x: f64,
    tol: f64,
) -> Result<f64> {
    let f = map_backward(pair, u, v, x)?;
    let fx = map_backward_dx(pair, u, v, x)?;
    let w0 = profile.w0_at(f)?;
    if !(w0 > 0.0) {
        return Err(CoarsenError::Domain(format!(
            "shape undefined where the density vanishes (x = {x})"
        )));
    }
    let c0 = profile.c0_at(f)?;
    let h = partial_mass(pair, profile, u, v, 1.0 - x, tol)?;
    Ok(c0 * fx * h / (w0 * w0))
}

/// Ratio g(x, t) = h(x, t)/w(x, t) of tail mass to density.
pub fn g_ratio_at(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    x: f64,
    tol: f64,
) -> Result<f64> {
    let f = map_backward(pair, u, v, x)?;
    let w0 = profile.w0_at(f)?;
    if !(w0 > 0.0) {
        return Err(CoarsenError::Domain(format!(
            "tail ratio undefined where the density vanishes (x = {x})"
        )));
    }
    let h = partial_mass(pair, profile, u, v, 1.0 - x, tol)?;
    Ok(h / w0)
}

struct StageRate {
    du: f64,
    kappa: f64,
    g: f64,
}

/// G, ∂G/∂u, ∂G/∂v at the state (u, v).
fn closure_coefs(
    pair: &CoefficientPair,
    profile: &Profile,
    u: f64,
    v: f64,
    tol: f64,
) -> Result<(f64, f64, f64)> {
    let a = check_state(pair, u, v)?;
    let q = pair.q_ratio();
    let a2 = pair.a2();
    let label = |sig: f64| -> f64 {
        let den = u + a * sig;
        (1.0 - sig / den).max(0.0)
    };
    let g = adaptive(
        &|sig: f64| {
            profile
                .w0_at(label(sig))
                .expect("backward labels stay inside the unit interval")
        },
        0.0,
        1.0,
        tol,
    );
    let gu = -adaptive(
        &|sig: f64| {
            if sig <= 0.0 {
                return 0.0;
            }
            let den = u + a * sig;
            let c0 = profile
                .c0_at(label(sig))
                .expect("backward labels stay inside the unit interval");
            c0 * sig * (1.0 + q * sig) / (den * den)
        },
        0.0,
        1.0,
        tol,
    );
    let gv = -adaptive(
        &|sig: f64| {
            if sig <= 0.0 {
                return 0.0;
            }
            let den = u + a * sig;
            let c0 = profile
                .c0_at(label(sig))
                .expect("backward labels stay inside the unit interval");
            c0 * a2 * sig * sig / (den * den)
        },
        0.0,
        1.0,
        tol,
    );
    Ok((g, gu, gv))
}

/// Integrate the mass-conserving (u, v) system from (1, 0).
///
/// Mass conservation d/dt[eᵗ·G(u, v)] = 0 with v̇ = u yields
/// u̇ = −(G + G_v·u)/G_u, and the closure rate follows from the dilation
/// rate: κ = (φ′(1) − u̇/u)/ψ′(1). Samples are recorded every `cadence`
/// and at the final time. Fails with an invariant error if the conserved
/// mass drifts or the dilation–drift inequality u − 1 + |φ′(1)|·v ≥ 0
/// breaks.
pub fn integrate_uv(
    pair: &CoefficientPair,
    profile: &Profile,
    opts: &UvOptions,
) -> Result<UvTrajectory> {
    require_quadratic(pair, "the (u, v) closure")?;
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "time step must be positive, got {}",
            opts.dt
        )));
    }
    if !(opts.t_end >= 0.0 && opts.t_end.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "final time must be nonnegative, got {}",
            opts.t_end
        )));
    }
    if !(opts.cadence > 0.0) {
        return Err(CoarsenError::Parameter(format!(
            "sample cadence must be positive, got {}",
            opts.cadence
        )));
    }
    if !(opts.quad_tol > 0.0 && opts.quad_tol < 1e-2) {
        return Err(CoarsenError::Parameter(format!(
            "quadrature tolerance out of range: {}",
            opts.quad_tol
        )));
    }
    let phi1 = pair.phi1();
    let psi1 = pair.psi1();
    let rate = |u: f64, v: f64| -> Result<StageRate> {
        let (g, gu, gv) = closure_coefs(pair, profile, u, v, opts.quad_tol)?;
        if !(gu < -1e-300) {
            return Err(CoarsenError::Degenerate(format!(
                "mass no longer responds to dilation: G_u = {gu:.3e} at (u, v) = ({u}, {v})"
            )));
        }
        let du = -(g + gv * u) / gu;
        Ok(StageRate {
            du,
            kappa: (phi1 - du / u) / psi1,
            g,
        })
    };

    let mut samples: Vec<UvSample> = Vec::new();
    let mut max_defect = 0.0f64;
    let mut t = 0.0f64;
    let mut u = 1.0f64;
    let mut v = 0.0f64;
    let mut kappa_int = 0.0f64;
    let mut next_obs = 0.0f64;
    loop {
        let k1 = rate(u, v)?;
        let due_cadence = t >= next_obs - 1e-9;
        let at_end = t >= opts.t_end - 1e-12;
        if due_cadence || at_end {
            if !(u.is_finite() && v.is_finite()) {
                return Err(CoarsenError::Degenerate(format!(
                    "state left the finite range at t = {t}: u = {u}, v = {v}"
                )));
            }
            let scale = 1.0 + u.abs() + phi1.abs() * v.abs();
            let gap = u - 1.0 + phi1.abs() * v;
            if gap < -1e-9 * scale {
                return Err(CoarsenError::Invariant(format!(
                    "dilation-drift inequality failed at t = {t:.6}: u - 1 + |phi'(1)| v = {gap:.3e}"
                )));
            }
            let defect = t.exp() * k1.g - 1.0;
            if defect.abs() > 1e-3 {
                return Err(CoarsenError::Invariant(format!(
                    "conserved mass drifted at t = {t:.6}: e^t G - 1 = {defect:.3e}"
                )));
            }
            max_defect = max_defect.max(defect.abs());
            let kappa_avg = if t > 0.0 { kappa_int / t } else { k1.kappa };
            samples.push(UvSample {
                t,
                u,
                v,
                kappa: k1.kappa,
                kappa_avg,
                g_mass: k1.g,
                mass_defect: defect,
            });
            if due_cadence {
                next_obs += opts.cadence;
            }
        }
        if at_end {
            break;
        }
        let mut h = opts.dt.min(opts.t_end - t);
        if next_obs > t {
            h = h.min(next_obs - t);
        }
        let u1 = u;
        let u2 = u + 0.5 * h * k1.du;
        let k2 = rate(u2, v + 0.5 * h * u1)?;
        let u3 = u + 0.5 * h * k2.du;
        let k3 = rate(u3, v + 0.5 * h * u2)?;
        let u4 = u + h * k3.du;
        let k4 = rate(u4, v + h * u3)?;
        u += h / 6.0 * (k1.du + 2.0 * k2.du + 2.0 * k3.du + k4.du);
        v += h / 6.0 * (u1 + 2.0 * u2 + 2.0 * u3 + u4);
        kappa_int += h / 6.0 * (k1.kappa + 2.0 * k2.kappa + 2.0 * k3.kappa + k4.kappa);
        t += h;
    }
    Ok(UvTrajectory {
        samples,
        max_mass_defect: max_defect,
    })
}

/// ∫₀¹ [σ/(1 + bσ)]^p dσ, the tail kernel of power-law data.
pub fn g0_kernel(p: f64, b: f64, tol: f64) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "kernel exponent must be positive, got {p}"
        )));
    }
    if !(b > -1.0) || !b.is_finite() {
        return Err(CoarsenError::Domain(format!(
            "kernel parameter must exceed -1, got {b}"
        )));
    }
    Ok(adaptive(
        &|sig: f64| (sig / (1.0 + b * sig)).powf(p),
        0.0,
        1.0,
        tol,
    ))
}

/// d/db of [`g0_kernel`]: −p·∫₀¹ σ^{p+1}/(1 + bσ)^{p+1} dσ.
pub fn g0_kernel_deriv(p: f64, b: f64, tol: f64) -> Result<f64> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "kernel exponent must be positive, got {p}"
        )));
    }
    if !(b > -1.0) || !b.is_finite() {
        return Err(CoarsenError::Domain(format!(
            "kernel parameter must exceed -1, got {b}"
        )));
    }
    Ok(-p * adaptive(
        &|sig: f64| (sig / (1.0 + b * sig)).powf(p + 1.0),
        0.0,
        1.0,
        tol,
    ))
}

/// The pair-adapted kernel G0(ξ) = g0(q + a₂ξ) and its derivative
/// dG0/dξ = a₂·g0′(q + a₂ξ).
pub fn g0_eval(pair: &CoefficientPair, p: f64, xi: f64, tol: f64) -> Result<(f64, f64)> {
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(CoarsenError::Domain(format!(
            "kernel argument must be nonnegative, got {xi}"
        )));
    }
    let b = pair.q_ratio() + pair.a2() * xi;
    let g0 = g0_kernel(p, b, tol)?;
    let dg0 = pair.a2() * g0_kernel_deriv(p, b, tol)?;
    Ok((g0, dg0))
}

/// Monotonicity margin of the rescaled mass relation:
/// ξ·G0′(ξ) + (p+1)·G0(ξ) − (1 + q + a₂ξ)^{−p}, nonnegative for admissible
/// pairs (identically zero when q = 0, p = 1).
pub fn m3_margin(pair: &CoefficientPair, p: f64, xi: f64, tol: f64) -> Result<f64> {
    let (g0, dg0) = g0_eval(pair, p, xi, tol)?;
    let edge = (1.0 + pair.q_ratio() + pair.a2() * xi).powf(-p);
    Ok(xi * dg0 + (p + 1.0) * g0 - edge)
}

/// Strict-domination margin (1 + q + a₂ξ)^{−p} − G0(ξ), positive for
/// admissible pairs.
pub fn n3_margin(pair: &CoefficientPair, p: f64, xi: f64, tol: f64) -> Result<f64> {
    let (g0, _) = g0_eval(pair, p, xi, tol)?;
    let edge = (1.0 + pair.q_ratio() + pair.a2() * xi).powf(-p);
    Ok(edge - g0)
}

/// Rates of the rescaled attractor system in (ξ, η) = (v/u, 1/u).
#[derive(Debug, Clone, Copy)]
pub struct ReducedRates {
    pub d_xi: f64,
    pub d_eta: f64,
    pub d_ln_u: f64,
    pub kappa: f64,
}

/// Right-hand side of the rescaled system for power-law data of exponent p:
///
///   d(ln u)/dt = [g0 + a₂·g0′] / [p·g0 + (a₂ξ − qη)·g0′],
///   dξ/dt = 1 − ξ·d(ln u)/dt,   dη/dt = −η·d(ln u)/dt,
///
/// with both kernels evaluated at b = a₂ξ + q(1 − η). The point ξ = p,
/// η = 0 is the attracting fixed point.
pub fn reduced_rhs(
    pair: &CoefficientPair,
    p: f64,
    xi: f64,
    eta: f64,
    tol: f64,
) -> Result<ReducedRates> {
    require_quadratic(pair, "the rescaled attractor system")?;
    if !(xi >= 0.0 && xi.is_finite() && eta >= 0.0 && eta.is_finite()) {
        return Err(CoarsenError::Domain(format!(
            "rescaled state must be nonnegative, got (xi, eta) = ({xi}, {eta})"
        )));
    }
    let a2 = pair.a2();
    let q = pair.q_ratio();
    let b = a2 * xi + q * (1.0 - eta);
    let g0 = g0_kernel(p, b, tol)?;
    let g0p = g0_kernel_deriv(p, b, tol)?;
    let den = p * g0 + (a2 * xi - q * eta) * g0p;
    if !(den > 1e-300) {
        return Err(CoarsenError::Degenerate(format!(
            "attractor denominator lost positivity: {den:.3e} at (xi, eta) = ({xi}, {eta})"
        )));
    }
    let d_ln_u = (g0 + a2 * g0p) / den;
    Ok(ReducedRates {
        d_xi: 1.0 - xi * d_ln_u,
        d_eta: -eta * d_ln_u,
        d_ln_u,
        kappa: (pair.phi1() - d_ln_u) / pair.psi1(),
    })
}

/// Closure rate at the attractor fixed point ξ = p: (φ′(1) − 1/p)/ψ′(1).
pub fn kappa_fixed(pair: &CoefficientPair, p: f64) -> f64 {
    (pair.phi1() - 1.0 / p) / pair.psi1()
}

/// One recorded state of the rescaled attractor system.
#[derive(Debug, Clone, Copy)]
pub struct ReducedSample {
    pub t: f64,
    pub xi: f64,
    pub eta: f64,
    pub ln_u: f64,
    pub kappa: f64,
    pub kappa_avg: f64,
}

/// Integrate the rescaled attractor system from (ξ₀, η₀).
///
/// Requires a pure power-law density; its exponent sets p. The slaved
/// dilation logarithm ln u is integrated alongside (ln u(0) = 0).
pub fn integrate_reduced(
    pair: &CoefficientPair,
    profile: &Profile,
    xi0: f64,
    eta0: f64,
    opts: &UvOptions,
) -> Result<Vec<ReducedSample>> {
    let p = match profile.kind() {
        ProfileKind::PowerLaw { p } => *p,
        other => {
            return Err(CoarsenError::Capability(format!(
                "the rescaled attractor system needs a pure power-law density, got {other:?}"
            )))
        }
    };
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "time step must be positive, got {}",
            opts.dt
        )));
    }
    if !(opts.t_end >= 0.0 && opts.t_end.is_finite()) {
        return Err(CoarsenError::Parameter(format!(
            "final time must be nonnegative, got {}",
            opts.t_end
        )));
    }
    if !(opts.cadence > 0.0) {
        return Err(CoarsenError::Parameter(format!(
            "sample cadence must be positive, got {}",
            opts.cadence
        )));
    }
    let mut samples = Vec::new();
    let mut t = 0.0f64;
    let mut xi = xi0;
    let mut eta = eta0;
    let mut ln_u = 0.0f64;
    let mut kappa_int = 0.0f64;
    let mut next_obs = 0.0f64;
    loop {
        let k1 = reduced_rhs(pair, p, xi, eta, opts.quad_tol)?;
        let due_cadence = t >= next_obs - 1e-9;
        let at_end = t >= opts.t_end - 1e-12;
        if due_cadence || at_end {
            let kappa_avg = if t > 0.0 { kappa_int / t } else { k1.kappa };
            samples.push(ReducedSample {
                t,
                xi,
                eta,
                ln_u,
                kappa: k1.kappa,
                kappa_avg,
            });
            if due_cadence {
                next_obs += opts.cadence;
            }
        }
        if at_end {
            break;
        }
        let mut h = opts.dt.min(opts.t_end - t);
        if next_obs > t {
            h = h.min(next_obs - t);
        }
        let k2 = reduced_rhs(
            pair,
            p,
            xi + 0.5 * h * k1.d_xi,
            (eta + 0.5 * h * k1.d_eta).max(0.0),
            opts.quad_tol,
        )?;
        let k3 = reduced_rhs(
            pair,
            p,
            xi + 0.5 * h * k2.d_xi,
            (eta + 0.5 * h * k2.d_eta).max(0.0),
            opts.quad_tol,
        )?;
        let k4 = reduced_rhs(
            pair,
            p,
            xi + h * k3.d_xi,
            (eta + h * k3.d_eta).max(0.0),
            opts.quad_tol,
        )?;
        xi += h / 6.0 * (k1.d_xi + 2.0 * k2.d_xi + 2.0 * k3.d_xi + k4.d_xi);
        eta = (eta + h / 6.0 * (k1.d_eta + 2.0 * k2.d_eta + 2.0 * k3.d_eta + k4.d_eta)).max(0.0);
        ln_u += h / 6.0 * (k1.d_ln_u + 2.0 * k2.d_ln_u + 2.0 * k3.d_ln_u + k4.d_ln_u);
        kappa_int += h / 6.0 * (k1.kappa + 2.0 * k2.kappa + 2.0 * k3.kappa + k4.kappa);
        t += h;
    }
    Ok(samples)
}

/// Constants of the borderline (critical) evolution implied by the
/// curvature data of the pair: window exponent α = 1/a₂, shift β = q/a₂,
/// asymptotic window delay τ₀ = β − ln∫₀¹e^{−α/(1−x)}dx, and the limiting
/// mean cluster size e^{α+β−τ₀}.
#[derive(Debug, Clone, Copy)]
pub struct CriticalConstants {
    pub alpha: f64,
    pub beta_shift: f64,
    pub tau0: f64,
    pub limiting_mean: f64,
    /// ∫₀¹ e^{−α/(1−x)} dx = e^{−α} − α·E₁(α).
    pub edge_mass: f64,
}

/// Compute [`CriticalConstants`] for a pair with positive curvature gap.
pub fn critical_constants(pair: &CoefficientPair) -> Result<CriticalConstants> {
    let a2 = pair.a2();
    if !(a2 > 0.0) {
        return Err(CoarsenError::Capability(format!(
            "borderline constants need a positive curvature gap, got a2 = {a2}"
        )));
    }
    let alpha = 1.0 / a2;
    let beta_shift = pair.q_ratio() / a2;
    let edge_mass = (-alpha).exp() - alpha * e1(alpha);
    if !(edge_mass > 0.0) {
        return Err(CoarsenError::Degenerate(format!(
            "edge mass evaluated nonpositive at alpha = {alpha}"
        )));
    }
    let tau0 = beta_shift - edge_mass.ln();
    let limiting_mean = (alpha + edge_mass.ln()).exp();
    Ok(CriticalConstants {
        alpha,
        beta_shift,
        tau0,
        limiting_mean,
        edge_mass,
    })
}

/// The tracked boundary window of a borderline run.
#[derive(Debug, Clone, Copy)]
pub struct CriticalTrack {
    /// a₁(t) = a₂·v − q; the window activates once a₁ > 1.
    pub a1: f64,
    /// Window position y(t) = 1 − 1/a₁(t).
    pub y: f64,
    /// Window delay τ(t) = t + ln w0(y(t)).
    pub tau: f64,
    /// dy/dt = a₂·u/a₁².
    pub dy_dt: f64,
    /// dy/dt divided by g(y) = h0(y)/w0(y); tends to 1 on the borderline.
    pub dy_dt_over_g: f64,
}

/// Evaluate the tracked window at time t for the state (u, v), or `None`
/// while the window has not yet activated (a₁ ≤ 1).
pub fn critical_track_at(
    pair: &CoefficientPair,
    profile: &Profile,
    t: f64,
    u: f64,
    v: f64,
) -> Result<Option<CriticalTrack>> {
    let a1 = pair.a2() * v - pair.q_ratio();
    if a1 <= 1.0 + 1e-12 {
        return Ok(None);
    }
    let y = 1.0 - 1.0 / a1;
    let dy_dt = pair.a2() * u / (a1 * a1);
    let ln_w0 = profile.ln_w0(y)?;
    if !ln_w0.is_finite() {
        return Err(CoarsenError::Domain(format!(
            "tracking window left the support of the density at y = {y}"
        )));
    }
    let g = profile.g_at(y)?;
    if !(g > 0.0) {
        return Err(CoarsenError::Degenerate(format!(
            "density tail ratio vanished at the window position y = {y}"
        )));
    }
    Ok(Some(CriticalTrack {
        a1,
        y,
        tau: t + ln_w0,
        dy_dt,
        dy_dt_over_g: dy_dt / g,
    }))
}

/// The level z(σ) at which the density has decayed to e^{−σ}:
/// the root of ln w0(z) + σ = 0. Increasing in σ.
pub fn window_position(profile: &Profile, sigma: f64) -> Result<f64> {
    if !sigma.is_finite() {
        return Err(CoarsenError::Domain(format!(
            "window level must be finite, got {sigma}"
        )));
    }
    let f = |z: f64| profile.ln_w0(z).unwrap_or(f64::NEG_INFINITY) + sigma;
    if f(0.0) < 0.0 {
        return Err(CoarsenError::Domain(format!(
            "no window position: the density never reaches e^({})",
            -sigma
        )));
    }
    Ok(bisect(&f, 0.0, profile.support_end(), 120))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::CoefficientPair;
    use crate::profiles::Profile;

    fn quad_a() -> CoefficientPair {
        CoefficientPair::quadratic(-0.5, -1.0, 0.0).expect("admissible pair")
    }

    fn quad_b() -> CoefficientPair {
        CoefficientPair::quadratic(-0.5, -1.0, 1.0).expect("admissible pair")
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn g0_tables_match_frozen_values() {
        let tol = 1e-12;
        // (xi, G0, dG0/dxi) for the curvature data (q = 0, a2 = 1/2), p = 1.
        let table_a1 = [
            (0.0, 0.5, -1.0 / 6.0),
            (0.5, 0.42970317897264391, -0.11881271589057563),
            (1.0, 0.37813956756734247, -0.089612468468018278),
            (2.0, 0.30685281944005469, -0.056852819440054691),
            (5.0, 0.19955792504074112, -0.022680312873439305),
        ];
        for (xi, g, dg) in table_a1 {
            let (g0, dg0) = g0_eval(&quad_a(), 1.0, xi, tol).unwrap();
            assert!(rel(g0, g) < 1e-9, "G0({xi}) = {g0}, want {g}");
            assert!(rel(dg0, dg) < 1e-9, "G0'({xi}) = {dg0}, want {dg}");
        }
        let table_a3 = [
            (0.0, 0.25, -0.3),
            (1.0, 0.093230366363665221, -0.076625169158364586),
            (5.0, 0.010889844835882269, -0.004047152836635844),
        ];
        for (xi, g, dg) in table_a3 {
            let (g0, dg0) = g0_eval(&quad_a(), 3.0, xi, tol).unwrap();
            assert!(rel(g0, g) < 1e-9, "p3 G0({xi}) = {g0}, want {g}");
            assert!(rel(dg0, dg) < 1e-9, "p3 G0'({xi}) = {dg0}, want {dg}");
        }
        // q = 1/2, a2 = 3/4.
        let table_b1 = [
            (0.0, 0.37813956756734247, -0.13441870270202742),
            (1.0, 0.28100466162154959, -0.070538927279192843),
            (5.0, 0.14348910302540997, -0.017029767454346377),
        ];
        for (xi, g, dg) in table_b1 {
            let (g0, dg0) = g0_eval(&quad_b(), 1.0, xi, tol).unwrap();
            assert!(rel(g0, g) < 1e-9, "B G0({xi}) = {g0}, want {g}");
            assert!(rel(dg0, dg) < 1e-9, "B G0'({xi}) = {dg0}, want {dg}");
        }
        let table_b3 = [
            (0.0, 0.093230366363665221, -0.11493775373754688),
            (1.0, 0.033849937967696203, -0.028564954003129322),
            (5.0, 0.0037456341975368837, -0.0014244416473933634),
        ];
        for (xi, g, dg) in table_b3 {
            let (g0, dg0) = g0_eval(&quad_b(), 3.0, xi, tol).unwrap();
            assert!(rel(g0, g) < 1e-9, "B3 G0({xi}) = {g0}, want {g}");
            assert!(rel(dg0, dg) < 1e-9, "B3 G0'({xi}) = {dg0}, want {dg}");
        }
    }

    #[test]
    fn shape_margins_match_frozen_values() {
        let tol = 1e-12;
        let xis = [0.0, 0.5, 1.0, 2.0, 5.0];
        // Zero-curvature-ratio pairs saturate the monotonicity margin at p = 1.
        for xi in xis {
            let m = m3_margin(&quad_a(), 1.0, xi, tol).unwrap();
            assert!(m.abs() < 1e-10, "saturated margin at xi = {xi}: {m}");
            let n = n3_margin(&quad_a(), 1.0, xi, tol).unwrap();
            assert!(n > 0.0, "domination margin at xi = {xi}: {n}");
        }
        let m3_b1 = [
            0.08961246847,
            0.06302925085,
            0.04702595152,
            0.02934013058,
            0.0113531783,
        ];
        let n3_b1 = [
            0.2885270991,
            0.2115160722,
            0.1634397828,
            0.1079864055,
            0.04698708745,
        ];
        for (i, xi) in xis.into_iter().enumerate() {
            let m = m3_margin(&quad_b(), 1.0, xi, tol).unwrap();
            assert!((m - m3_b1[i]).abs() < 1e-9, "M margin at xi = {xi}: {m}");
            let n = n3_margin(&quad_b(), 1.0, xi, tol).unwrap();
            assert!((n - n3_b1[i]).abs() < 1e-9, "N margin at xi = {xi}: {n}");
        }
    }

    #[test]
    fn critical_constants_match_closed_forms() {
        let ca = critical_constants(&quad_a()).unwrap();
        assert!(rel(ca.alpha, 2.0) < 1e-14);
        assert!(ca.beta_shift.abs() < 1e-14);
        assert!(rel(ca.edge_mass, 0.037534261820490453) < 1e-12);
        assert!(rel(ca.tau0, 3.2825011145821433) < 1e-12);
        assert!(rel(ca.limiting_mean, 0.27734276622355483) < 1e-12);

        let cb = critical_constants(&quad_b()).unwrap();
        assert!(rel(cb.alpha, 4.0 / 3.0) < 1e-14);
        assert!(rel(cb.beta_shift, 2.0 / 3.0) < 1e-14);
        assert!(rel(cb.edge_mass, 0.09204473242539688) < 1e-12);
        assert!(rel(cb.tau0, 3.0521472647522018) < 1e-12);
        assert!(rel(cb.limiting_mean, 0.34918714627693179) < 1e-12);

        // The closed form of the edge mass against direct quadrature.
        for c in [ca, cb] {
            let direct = adaptive(
                &|x: f64| (-c.alpha / (1.0 - x)).exp(),
                0.0,
                1.0,
                1e-12,
            );
            assert!(rel(direct, c.edge_mass) < 1e-10);
        }
    }

    #[test]
    fn backward_and_forward_maps_are_inverse() {
        for pair in [quad_a(), quad_b()] {
            let (u, v) = (2.2, 1.5);
            for x in [0.0, 0.3, 0.9, 1.0] {
                let z = map_backward(&pair, u, v, x).unwrap();
                let back = map_forward(&pair, u, v, z).unwrap().expect("inside");
                assert!(
                    (back - x).abs() < 1e-13,
                    "round trip at x = {x}: {back}"
                );
            }
            // Spatial derivative against a central difference.
            let x = 0.4;
            let h = 1e-6;
            let fd = (map_backward(&pair, u, v, x + h).unwrap()
                - map_backward(&pair, u, v, x - h).unwrap())
                / (2.0 * h);
            let an = map_backward_dx(&pair, u, v, x).unwrap();
            assert!(rel(an, fd) < 1e-8, "dF/dx = {an} vs FD {fd}");
            // Forward Jacobian against a label difference.
            let z = map_backward(&pair, u, v, x).unwrap();
            let dz = 1e-6;
            let fwd = |z: f64| map_forward(&pair, u, v, z).unwrap().unwrap();
            let jac_fd = (fwd(z + dz) - fwd(z - dz)) / (2.0 * dz);
            let jac = map_jacobian(&pair, u, v, z).unwrap().unwrap();
            assert!(rel(jac, jac_fd) < 1e-8, "D = {jac} vs FD {jac_fd}");
        }
        // At the initial state the map is the identity.
        let pair = quad_a();
        for x in [0.0, 0.5, 1.0] {
            assert!((map_backward(&pair, 1.0, 0.0, x).unwrap() - x).abs() < 1e-15);
        }
        assert!((map_backward_dx(&pair, 1.0, 0.0, 0.3).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uv_trajectory_matches_reference_power_law() {
        let pair = quad_a();
        let profile = Profile::power_law(1.0).unwrap();
        let opts = UvOptions {
            t_end: 10.0,
            cadence: 1.0,
            ..UvOptions::default()
        };
        let traj = integrate_uv(&pair, &profile, &opts).unwrap();
        let s0 = &traj.samples[0];
        assert!((s0.kappa - 7.0 / 6.0).abs() < 1e-10, "kappa(0) = {}", s0.kappa);
        let s1 = traj.sample_at(1.0);
        assert!(rel(s1.u, 2.22861476140643) < 1e-7, "u(1) = {}", s1.u);
        assert!(rel(s1.v, 1.50506841488831) < 1e-7, "v(1) = {}", s1.v);
        assert!((s1.kappa - 1.3970677277447).abs() < 1e-7, "kappa(1) = {}", s1.kappa);
        let s2 = traj.sample_at(2.0);
        assert!((s2.kappa - 1.4711108411688).abs() < 1e-7, "kappa(2) = {}", s2.kappa);
        let s5 = traj.sample_at(5.0);
        assert!((s5.kappa - 1.4994250121931).abs() < 1e-7, "kappa(5) = {}", s5.kappa);
        let s10 = traj.final_sample();
        assert!((s10.kappa - 1.49999917986096).abs() < 1e-7, "kappa(10) = {}", s10.kappa);
        assert!(
            rel(s10.v / s10.u, 0.999997359381958) < 1e-6,
            "v/u at 10 = {}",
            s10.v / s10.u
        );
        assert!(
            traj.max_mass_defect < 1e-9,
            "mass defect {}",
            traj.max_mass_defect
        );
        // Dilation-drift inequality holds with margin along the run.
        for s in &traj.samples {
            assert!(s.u - 1.0 + 0.5 * s.v >= -1e-12);
        }
    }

    #[test]
    fn uv_critical_exp_matches_reference() {
        let pair = quad_a();
        let profile = Profile::critical_exp();
        let opts = UvOptions {
            t_end: 5.0,
            cadence: 1.0,
            ..UvOptions::default()
        };
        let traj = integrate_uv(&pair, &profile, &opts).unwrap();
        let s5 = traj.final_sample();
        assert!(rel(s5.u, 1.83952576471894) < 1e-7, "u(5) = {}", s5.u);
        assert!(rel(s5.v, 7.67037108860858) < 1e-7, "v(5) = {}", s5.v);
        assert!(
            (s5.kappa - 0.533022698939033).abs() < 1e-7,
            "kappa(5) = {}",
            s5.kappa
        );
        let track = critical_track_at(&pair, &profile, s5.t, s5.u, s5.v)
            .unwrap()
            .expect("window active by t = 5");
        assert!((track.tau - 3.07201503429406).abs() < 1e-6, "tau = {}", track.tau);
        assert!(
            rel(track.dy_dt_over_g, 1.33224236012) < 1e-6,
            "dy/g = {}",
            track.dy_dt_over_g
        );
        let mean = mean_cluster_size(&pair, &profile, s5.u, s5.v, 1e-11).unwrap();
        assert!(rel(mean, 0.291565887499339) < 1e-6, "mean = {mean}");
    }

    #[test]
    fn reduced_matches_full_system_without_curvature_ratio() {
        // For q = 0 the rescaled system in (xi, eta) = (v/u, 1/u) carries
        // exactly the same dynamics as (u, v).
        let pair = quad_a();
        let profile = Profile::power_law(1.0).unwrap();
        let opts = UvOptions {
            t_end: 2.0,
            cadence: 1.0,
            ..UvOptions::default()
        };
        let traj = integrate_uv(&pair, &profile, &opts).unwrap();
        let red = integrate_reduced(&pair, &profile, 0.0, 1.0, &opts).unwrap();
        for (s, r) in traj.samples.iter().zip(&red) {
            assert!((s.t - r.t).abs() < 1e-9);
            assert!((s.kappa - r.kappa).abs() < 1e-8, "t = {}: {} vs {}", s.t, s.kappa, r.kappa);
            assert!(
                (s.v / s.u - r.xi).abs() < 1e-8,
                "t = {}: xi {} vs {}",
                s.t,
                s.v / s.u,
                r.xi
            );
            assert!((1.0 / s.u - r.eta).abs() < 1e-8);
            assert!((s.u.ln() - r.ln_u).abs() < 1e-8);
        }
    }

    #[test]
    fn reduced_trajectory_matches_reference() {
        let pair = quad_b();
        let profile = Profile::power_law(1.0).unwrap();
        let opts = UvOptions {
            t_end: 5.0,
            cadence: 1.0,
            ..UvOptions::default()
        };
        let red = integrate_reduced(&pair, &profile, 0.0, 1.0, &opts).unwrap();
        let r1 = &red[1];
        assert!(rel(r1.xi, 0.727173497660734) < 1e-7, "xi(1) = {}", r1.xi);
        assert!(rel(r1.ln_u, 0.601013774673712) < 1e-7, "lnu(1) = {}", r1.ln_u);
        assert!((r1.kappa - 1.27836013796186).abs() < 1e-7, "kappa(1) = {}", r1.kappa);
        let r5 = red.last().unwrap();
        assert!(rel(r5.xi, 1.00436959470148) < 1e-7, "xi(5) = {}", r5.xi);
        assert!(rel(r5.ln_u, 4.42467129659145) < 1e-7, "lnu(5) = {}", r5.ln_u);
        assert!((r5.kappa - 1.49878790783849).abs() < 1e-7, "kappa(5) = {}", r5.kappa);
        // Fixed point of the rescaled flow: xi = p, eta = 0.
        let fixed = reduced_rhs(&pair, 1.0, 1.0, 0.0, 1e-12).unwrap();
        assert!(fixed.d_xi.abs() < 1e-9, "d_xi at fixed point: {}", fixed.d_xi);
        assert!((fixed.kappa - 1.5).abs() < 1e-9);
        assert!((kappa_fixed(&pair, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn window_position_inverts_density_level() {
        let profile = Profile::critical_exp();
        let z1 = window_position(&profile, 1.0).unwrap();
        assert!((profile.ln_w0(z1).unwrap() + 1.0).abs() < 1e-10);
        let z2 = window_position(&profile, 2.0).unwrap();
        assert!(z2 > z1, "window moves outward: {z1} vs {z2}");
        // Level below the reach of the density.
        assert!(window_position(&profile, -1.0).is_err());

        // The tracked window sits at the level set delayed by tau:
        // y(t) = z(t - tau(t)) by construction.
        let pair = quad_a();
        let (t, u, v) = (5.0, 1.83952576471894, 7.67037108860858);
        let track = critical_track_at(&pair, &profile, t, u, v)
            .unwrap()
            .expect("active window");
        let z = window_position(&profile, t - track.tau).unwrap();
        assert!(rel(z, track.y) < 1e-9, "window {z} vs track {}", track.y);
        // Window inactive early on.
        assert!(critical_track_at(&pair, &profile, 0.0, 1.0, 0.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn partial_mass_is_monotone_and_total() {
        let pair = quad_a();
        let profile = Profile::power_law(1.0).unwrap();
        let (u, v) = (2.2, 1.5);
        let total = mass_integral(&pair, &profile, u, v, 1e-11).unwrap();
        let mut prev = 0.0;
        for s in [0.1, 0.4, 0.7, 1.0] {
            let m = partial_mass(&pair, &profile, u, v, s, 1e-11).unwrap();
            assert!(m > prev, "partial mass grows: {m} at {s}");
            prev = m;
        }
        assert!(rel(prev, total) < 1e-12);
        // Shape function: at the initial state it reduces to the shape of
        // the density itself.
        for x in [0.0, 0.5, 0.9] {
            let b = shape_at(&pair, &profile, 1.0, 0.0, x, 1e-11).unwrap();
            let b0 = profile.beta_at(x).unwrap();
            assert!(rel(b, b0) < 1e-9, "shape at {x}: {b} vs {b0}");
            let g = g_ratio_at(&pair, &profile, 1.0, 0.0, x, 1e-11).unwrap();
            let g0 = profile.g_at(x).unwrap();
            assert!(rel(g, g0) < 1e-9, "tail ratio at {x}: {g} vs {g0}");
        }
    }

    #[test]
    fn guards_reject_unsupported_inputs() {
        let lsw = CoefficientPair::lsw();
        let profile = Profile::power_law(1.0).unwrap();
        assert!(matches!(
            integrate_uv(&lsw, &profile, &UvOptions::default()),
            Err(CoarsenError::Capability(_))
        ));
        assert!(matches!(
            map_backward(&lsw, 2.0, 1.0, 0.5),
            Err(CoarsenError::Capability(_))
        ));
        let bad_dt = UvOptions {
            dt: 0.0,
            ..UvOptions::default()
        };
        assert!(matches!(
            integrate_uv(&quad_a(), &profile, &bad_dt),
            Err(CoarsenError::Parameter(_))
        ));
        assert!(matches!(
            integrate_reduced(&quad_a(), &Profile::critical_exp(), 0.0, 0.0, &UvOptions::default()),
            Err(CoarsenError::Capability(_))
        ));
        assert!(matches!(
            g0_kernel(1.0, -1.5, 1e-10),
            Err(CoarsenError::Domain(_))
        ));
        assert!(matches!(
            map_backward(&quad_a(), 2.0, 1.0, 1.5),
            Err(CoarsenError::Domain(_))
        ));
    }
}
