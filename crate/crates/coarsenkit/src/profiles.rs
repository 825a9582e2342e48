//! Initial profiles w0 and their derived fields.
//!
//! A profile packages the density w0 on [0, 1] (normalized to unit mass)
//! together with the fields the dynamics and its diagnostics need:
//! the log-density, the slope density c0 = −w0′, the cumulative tail mass
//! h0(x) = ∫ₓ¹ w0, the shape function β = c0·h0/w0², and the damping scale
//! g = h0/w0. All four built-in families have closed forms; everything is
//! evaluated in log space so deep tails (w0 ~ e^{−1/(1−x)}) keep full
//! relative accuracy.

use std::fmt;
use std::sync::Arc;

use crate::coeffs::CoefficientPair;
use crate::error::{CoarsenError, Result};
use crate::util::fit::linear_fit;
use crate::util::quad::adaptive;
use crate::util::root::bisect;
use crate::util::special::{e1, e1_scaled};

/// Tabulated density interface, used to feed externally constructed
/// solutions (e.g. self-similar profiles) into the solver as initial data.
pub trait ProfileTable: Send + Sync {
    /// ln w0 at x ∈ [0, 1).
    fn ln_w0(&self, x: f64) -> Result<f64>;
    /// ln c0 = ln(−w0′) at x ∈ [0, 1).
    fn ln_c0(&self, x: f64) -> Result<f64>;
    /// h0(x) = ∫ₓ¹ w0.
    fn h0(&self, x: f64) -> Result<f64>;
    /// β(x) = c0·h0/w0².
    fn beta(&self, x: f64) -> Result<f64>;
    fn support_end(&self) -> f64 {
        1.0
    }
    fn describe(&self) -> String;
}

/// Which density family a [`Profile`] belongs to.
#[derive(Clone)]
pub enum ProfileKind {
    /// w0 ∝ (1−x)^p, shape constant β = p/(p+1).
    PowerLaw { p: f64 },
    /// w0 ∝ exp[−1/(1−x)], the canonical critical datum (β → 1).
    CriticalExp,
    /// w0 ∝ (x0−x)^{β0/(1−β0)} on [0, x0), zero beyond.
    TruncatedPower { beta0: f64, x0: f64, m: f64, c: f64 },
    /// β ≡ β0 on [0, x0], β = 1 − ε(1−x) beyond: critical with a β jump.
    PiecewiseBeta { beta0: f64, x0: f64, eps: f64 },
    /// Externally tabulated density.
    Table(Arc<dyn ProfileTable>),
}

impl fmt::Debug for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileKind::PowerLaw { p } => write!(f, "PowerLaw(p={p})"),
            ProfileKind::CriticalExp => write!(f, "CriticalExp"),
            ProfileKind::TruncatedPower { beta0, x0, .. } => {
                write!(f, "TruncatedPower(beta0={beta0}, x0={x0})")
            }
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                write!(f, "PiecewiseBeta(beta0={beta0}, x0={x0}, eps={eps})")
            }
            ProfileKind::Table(t) => write!(f, "Table({})", t.describe()),
        }
    }
}

/// Result of [`Profile::classify`].
#[derive(Debug, Clone, PartialEq)]
pub enum Criticality {
    Subcritical(f64),
    Critical,
    Unclassified,
}

/// Normalization constant of the exponential critical density:
/// K = 1/∫₀¹ exp[−1/(1−x)] dx = 1/(e⁻¹ − E1(1)).
pub fn critical_exp_norm() -> f64 {
    1.0 / ((-1.0f64).exp() - e1(1.0))
}

/// An initial density with unit mass and its analytic companion fields.
#[derive(Debug, Clone)]
pub struct Profile {
    kind: ProfileKind,
    /// Multiplier applied to the family's raw (unnormalized) density.
    norm_const: f64,
    /// First point (in x) at and beyond which w0 vanishes.
    support_end: f64,
    /// Analytic tail limit of β where known.
    beta0_limit: Option<f64>,
}

impl Profile {
    /// w0 = (p+1)(1−x)^p, p > 0.
    pub fn power_law(p: f64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(CoarsenError::Parameter(format!(
                "power-law exponent must be positive, got {p}"
            )));
        }
        Ok(Self {
            kind: ProfileKind::PowerLaw { p },
            norm_const: p + 1.0,
            support_end: 1.0,
            beta0_limit: Some(p / (p + 1.0)),
        })
    }

    /// w0 = K·exp[−1/(1−x)].
    pub fn critical_exp() -> Self {
        Self {
            kind: ProfileKind::CriticalExp,
            norm_const: critical_exp_norm(),
            support_end: 1.0,
            beta0_limit: Some(1.0),
        }
    }

    /// w0 = C(x0−x)^m on [0, x0), m = β0/(1−β0), C = (m+1)/x0^{m+1};
    /// compactly supported strictly inside the interval.
    pub fn truncated_power(beta0: f64, x0: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta0 < 1.0) {
            return Err(CoarsenError::Parameter(format!(
                "truncated-power beta0 must lie in (0,1), got {beta0}"
            )));
        }
        if !(x0 > 0.0 && x0 < 1.0) {
            return Err(CoarsenError::Parameter(format!(
                "truncated-power x0 must lie in (0,1), got {x0}"
            )));
        }
        let m = beta0 / (1.0 - beta0);
        let c = (m + 1.0) / x0.powf(m + 1.0);
        Ok(Self {
            kind: ProfileKind::TruncatedPower { beta0, x0, m, c },
            norm_const: 1.0,
            support_end: x0,
            beta0_limit: Some(beta0),
        })
    }

    /// Density reconstructed from the shape function β ≡ β0 on [0, x0],
    /// β = 1 − ε(1−x) on (x0, 1]: critical data with a β discontinuity
    /// matched through the damping scale g.
    pub fn piecewise_beta(beta0: f64, x0: f64, eps: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta0 < 1.0) {
            return Err(CoarsenError::Parameter(format!(
                "piecewise-beta beta0 must lie in (0,1), got {beta0}"
            )));
        }
        if !(x0 > 0.0 && x0 < 1.0) {
            return Err(CoarsenError::Parameter(format!(
                "piecewise-beta x0 must lie in (0,1), got {x0}"
            )));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(CoarsenError::Parameter(format!(
                "piecewise-beta eps must lie in (0,1], got {eps}"
            )));
        }
        let mut profile = Self {
            kind: ProfileKind::PiecewiseBeta { beta0, x0, eps },
            norm_const: 1.0,
            support_end: 1.0,
            beta0_limit: Some(1.0),
        };
        profile = profile.normalize()?;
        Ok(profile)
    }

    /// Wrap an externally tabulated density (assumed normalized by its
    /// builder; `normalize` will verify).
    pub fn from_table(table: Arc<dyn ProfileTable>) -> Self {
        let support_end = table.support_end();
        Self {
            kind: ProfileKind::Table(table),
            norm_const: 1.0,
            support_end,
            beta0_limit: None,
        }
    }

    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }

    pub fn support_end(&self) -> f64 {
        self.support_end
    }

    pub fn beta0_limit(&self) -> Option<f64> {
        self.beta0_limit
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&x) {
            return Err(CoarsenError::Domain(format!(
                "profile evaluation needs x in [0,1], got {x}"
            )));
        }
        Ok(())
    }

    fn check_in_support(&self, x: f64) -> Result<()> {
        self.check_x(x)?;
        if x >= self.support_end {
            return Err(CoarsenError::Domain(format!(
                "x = {x} is at or beyond the support end {}",
                self.support_end
            )));
        }
        Ok(())
    }

    /// ln w0(x); −∞ at and beyond the support end.
    pub fn ln_w0(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        if x >= self.support_end {
            return Ok(f64::NEG_INFINITY);
        }
        let s = 1.0 - x;
        let raw = match &self.kind {
            ProfileKind::PowerLaw { p } => p * s.ln(),
            ProfileKind::CriticalExp => -1.0 / s,
            ProfileKind::TruncatedPower { x0, m, c, .. } => c.ln() + m * (x0 - x).ln(),
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                piecewise_ln_raw(*beta0, *x0, *eps, x)
            }
            ProfileKind::Table(t) => return t.ln_w0(x),
        };
        Ok(raw + self.norm_const.ln())
    }

    /// w0(x).
    pub fn w0_at(&self, x: f64) -> Result<f64> {
        Ok(self.ln_w0(x)?.exp())
    }

    /// ln c0(x) with c0 = −w0′; +∞ possible at an integrable edge
    /// singularity, −∞ beyond the support.
    pub fn ln_c0(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        if x >= self.support_end {
            return Ok(f64::NEG_INFINITY);
        }
        let s = 1.0 - x;
        let raw = match &self.kind {
            ProfileKind::PowerLaw { p } => p.ln() + (p - 1.0) * s.ln(),
            ProfileKind::CriticalExp => -1.0 / s - 2.0 * s.ln(),
            ProfileKind::TruncatedPower { x0, m, c, .. } => {
                (m * c).ln() + (m - 1.0) * (x0 - x).ln()
            }
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                // c0 = w0·β/g.
                let lnw = piecewise_ln_raw(*beta0, *x0, *eps, x);
                let beta = piecewise_beta_val(*beta0, *x0, *eps, x);
                let g = piecewise_g_val(*beta0, *x0, *eps, x);
                lnw + beta.ln() - g.ln()
            }
            ProfileKind::Table(t) => return t.ln_c0(x),
        };
        Ok(raw + self.norm_const.ln())
    }

    /// c0(x) = −w0′(x).
    pub fn c0_at(&self, x: f64) -> Result<f64> {
        Ok(self.ln_c0(x)?.exp())
    }

    /// ln w0 at x = 1 − s, evaluated directly in the boundary distance s.
    /// For the closed-form families this keeps full relative accuracy even
    /// when s is far below the f64 resolution of 1 − s (labels minted deep
    /// in the boundary layer during long runs). Other families fall back to
    /// the x-form, which is adequate because their edge behaviour keeps
    /// characteristic labels away from the ultra-thin layer.
    pub fn ln_w0_s(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) || s > 1.0 {
            return Err(CoarsenError::Domain(format!(
                "boundary-layer evaluation needs s in (0, 1], got {s}"
            )));
        }
        match &self.kind {
            ProfileKind::PowerLaw { p } => Ok(self.norm_const.ln() + p * s.ln()),
            ProfileKind::CriticalExp => Ok(self.norm_const.ln() - 1.0 / s),
            _ => self.ln_w0(1.0 - s),
        }
    }

    /// ln c0 at x = 1 − s; same boundary-layer contract as [`Self::ln_w0_s`].
    pub fn ln_c0_s(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) || s > 1.0 {
            return Err(CoarsenError::Domain(format!(
                "boundary-layer evaluation needs s in (0, 1], got {s}"
            )));
        }
        match &self.kind {
            ProfileKind::PowerLaw { p } => {
                Ok(self.norm_const.ln() + p.ln() + (p - 1.0) * s.ln())
            }
            ProfileKind::CriticalExp => {
                Ok(self.norm_const.ln() - 1.0 / s - 2.0 * s.ln())
            }
            _ => self.ln_c0(1.0 - s),
        }
    }

    /// Tail mass h0(x) = ∫ₓ¹ w0 (closed form per family; log-stable).
    pub fn h0_at(&self, x: f64) -> Result<f64> {
        Ok(self.ln_h0(x)?.exp())
    }

    /// ln h0(x), finite for x within the support.
    pub fn ln_h0(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        if x >= self.support_end {
            return Ok(f64::NEG_INFINITY);
        }
        match &self.kind {
            ProfileKind::PowerLaw { p } => Ok((p + 1.0) * (1.0 - x).ln()),
            // h0 = w0·g: both factors log-stable.
            ProfileKind::CriticalExp => {
                Ok(self.ln_w0(x)? + critical_exp_g(1.0 - x).ln())
            }
            ProfileKind::TruncatedPower { x0, m, c, .. } => {
                Ok((c / (m + 1.0)).ln() + (m + 1.0) * (x0 - x).ln())
            }
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                Ok(self.ln_w0(x)? + piecewise_g_val(*beta0, *x0, *eps, x).ln())
            }
            ProfileKind::Table(t) => Ok(t.h0(x)?.ln()),
        }
    }

    /// Shape function β(x) = c0·h0/w0², defined strictly inside the support.
    pub fn beta_at(&self, x: f64) -> Result<f64> {
        self.check_in_support(x)?;
        match &self.kind {
            ProfileKind::PowerLaw { p } => Ok(p / (p + 1.0)),
            // β = g/s² for this family; series-stable near the endpoint.
            ProfileKind::CriticalExp => {
                let s = 1.0 - x;
                Ok(critical_exp_g(s) / (s * s))
            }
            ProfileKind::TruncatedPower { beta0, .. } => Ok(*beta0),
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                Ok(piecewise_beta_val(*beta0, *x0, *eps, x))
            }
            ProfileKind::Table(t) => t.beta(x),
        }
    }

    /// Damping scale g(x) = h0(x)/w0(x) = ∫ₓ^b [1−β] dx′ (b = support end).
    pub fn g_at(&self, x: f64) -> Result<f64> {
        self.check_in_support(x)?;
        match &self.kind {
            ProfileKind::PowerLaw { p } => Ok((1.0 - x) / (p + 1.0)),
            ProfileKind::CriticalExp => Ok(critical_exp_g(1.0 - x)),
            ProfileKind::TruncatedPower { beta0, x0, .. } => {
                Ok((1.0 - beta0) * (x0 - x))
            }
            ProfileKind::PiecewiseBeta { beta0, x0, eps } => {
                Ok(piecewise_g_val(*beta0, *x0, *eps, x))
            }
            ProfileKind::Table(t) => Ok(t.h0(x)? / t.ln_w0(x)?.exp()),
        }
    }

    /// Initial mean ⟨X₀⟩ = ∫ x c0 dx / w0(0) = 1/w0(0) (integration by
    /// parts; the boundary term vanishes because w0(support_end) = 0 or
    /// the support ends at 1 where w0 ≥ 0 is integrable).
    pub fn mean_x0(&self) -> Result<f64> {
        Ok(1.0 / self.w0_at(0.0)?)
    }

    /// Numerically recompute ∫₀¹ w0 and rescale to unit mass. Idempotent:
    /// a second call changes the constant by < 1e−10.
    pub fn normalize(mut self) -> Result<Self> {
        let mass = self.mass()?;
        if !(mass.is_finite() && mass > 0.0) {
            return Err(CoarsenError::Degenerate(format!(
                "profile mass {mass} is not positive and finite"
            )));
        }
        self.norm_const /= mass;
        Ok(self)
    }

    /// ∫₀¹ w0 by adaptive quadrature (closed forms exist, but this is kept
    /// independent so it can arbitrate).
    pub fn mass(&self) -> Result<f64> {
        let b = self.support_end;
        // Split near the right end so deep-tail profiles are integrated on
        // their own scale; the underflowing remainder is bounded by the
        // closed-form tail h0 and added via it.
        let cut = if b < 1.0 { b } else { 1.0 - 1e-3 };
        let body = adaptive(
            &|x: f64| self.ln_w0(x).map(|l| l.exp()).unwrap_or(0.0),
            0.0,
            cut,
            1e-12,
        );
        let tail = if b < 1.0 { 0.0 } else { self.h0_at(cut)? };
        Ok(body + tail)
    }

    /// Classify tail criticality from sampled β near the support end:
    /// fit β against the distance d to the end over d/b ∈ [1e−5, 1e−2]
    /// (log-spaced) and extrapolate to d = 0.
    pub fn classify(&self) -> Criticality {
        let b = self.support_end;
        let mut ds = Vec::new();
        let mut betas = Vec::new();
        for i in 0..24 {
            let frac = 10f64.powf(-5.0 + 3.0 * i as f64 / 23.0);
            let d = b * frac;
            match self.beta_at(b - d) {
                Ok(beta) => {
                    ds.push(d);
                    betas.push(beta);
                }
                Err(_) => return Criticality::Unclassified,
            }
        }
        let (slope, intercept, max_res) = linear_fit(&ds, &betas);
        let range = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - betas.iter().cloned().fold(f64::INFINITY, f64::min);
        let _ = slope;
        if (intercept - 1.0).abs() <= 1e-3 {
            return Criticality::Critical;
        }
        if range > 0.05 && max_res > 0.01 {
            return Criticality::Unclassified;
        }
        if intercept > 0.0 && intercept < 1.0 {
            Criticality::Subcritical(intercept)
        } else {
            Criticality::Unclassified
        }
    }

    /// Tail-matching residuals |w̃0(y+λ(y)z)/w̃0(y) − e^{−z}| in the
    /// stretched coordinate y(x) = ∫₀ˣ dx′/[κ0ψ−φ], with
    /// λ(y) = 2g(x)/(γ(1−x)²). Critical data make the residual vanish for
    /// large y; subcritical data do not (callers may probe either).
    pub fn criterion_residuals(
        &self,
        pair: &CoefficientPair,
        y_samples: &[f64],
        z_samples: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let map = StretchMap::new(pair);
        let gamma = pair.gamma();
        let mut rows = Vec::with_capacity(y_samples.len());
        for &y in y_samples {
            if !(y > 0.0) {
                return Err(CoarsenError::Parameter(format!(
                    "y samples must be positive, got {y}"
                )));
            }
            let s = map.s_of_y(y);
            let x = 1.0 - s;
            if x >= self.support_end {
                return Err(CoarsenError::Domain(format!(
                    "y = {y} maps to x = {x} outside the support"
                )));
            }
            let lam = 2.0 * self.g_at(x)? / (gamma * s * s);
            let lnw_y = self.ln_w0(x)?;
            let mut row = Vec::with_capacity(z_samples.len());
            for &z in z_samples {
                let s2 = map.s_of_y(y + lam * z);
                let x2 = 1.0 - s2;
                if x2 >= self.support_end {
                    return Err(CoarsenError::Domain(format!(
                        "shifted point y+λz = {} maps outside the support",
                        y + lam * z
                    )));
                }
                let ratio = (self.ln_w0(x2)? - lnw_y).exp();
                row.push((ratio - (-z).exp()).abs());
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// g(s) = s − e^{1/s}E1(1/s) for the exponential critical density,
/// asymptotic series s²Σ(−1)^k(k+1)!s^k below s = 0.03 (truncated at the
/// smallest term; the cancellation in the direct form grows like 1e−16/s).
pub fn critical_exp_g(s: f64) -> f64 {
    if s >= 0.03 {
        return s - e1_scaled(1.0 / s);
    }
    let mut acc = 0.0f64;
    let mut term = 1.0f64;
    let mut prev = f64::INFINITY;
    let mut k = 0usize;
    while term.abs() < prev && term.abs() > 1e-18 * acc.abs().max(1.0) {
        prev = term.abs();
        acc += term;
        k += 1;
        term *= -((k + 1) as f64) * s;
        if k > 300 {
            break;
        }
    }
    s * s * acc
}

/// ln of the raw (unnormalized) piecewise-β density, with raw w0(x0) = 1.
fn piecewise_ln_raw(beta0: f64, x0: f64, eps: f64, x: f64) -> f64 {
    let sigma0 = 1.0 - x0;
    if x > x0 {
        let sigma = 1.0 - x;
        -(2.0 / eps) * (1.0 / sigma - 1.0 / sigma0) - 2.0 * (sigma / sigma0).ln()
    } else {
        let m = beta0 / (1.0 - beta0);
        let g0 = eps * sigma0 * sigma0 / 2.0;
        let g = g0 + (1.0 - beta0) * (x0 - x);
        m * (g / g0).ln()
    }
}

fn piecewise_beta_val(beta0: f64, x0: f64, eps: f64, x: f64) -> f64 {
    if x > x0 {
        1.0 - eps * (1.0 - x)
    } else {
        beta0
    }
}

fn piecewise_g_val(beta0: f64, x0: f64, eps: f64, x: f64) -> f64 {
    let sigma0 = 1.0 - x0;
    if x > x0 {
        let sigma = 1.0 - x;
        eps * sigma * sigma / 2.0
    } else {
        eps * sigma0 * sigma0 / 2.0 + (1.0 - beta0) * (x0 - x)
    }
}

/// The stretched coordinate y(x) = ∫₀ˣ dx′/[κ0ψ(x′) − φ(x′)] and its
/// inverse, with the 1/s² divergence continued in closed form below
/// s = 1e−4: y = y(s₀) + (2/γ)(1/s − 1/s₀) + b₁ ln(s₀/s).
pub struct StretchMap<'a> {
    pair: &'a CoefficientPair,
    s_switch: f64,
    y_at_switch: f64,
}

impl<'a> StretchMap<'a> {
    pub fn new(pair: &'a CoefficientPair) -> Self {
        let s_switch = 1e-4;
        let mut map = Self {
            pair,
            s_switch,
            y_at_switch: 0.0,
        };
        map.y_at_switch = map.integral_down_to(s_switch);
        map
    }

    /// ∫_s^1 dσ/drift0(σ) (equals y(x) with x = 1−s).
    fn integral_down_to(&self, s: f64) -> f64 {
        adaptive(&|sig: f64| 1.0 / self.pair.drift0(sig), s, 1.0, 1e-11)
    }

    pub fn y_of_s(&self, s: f64) -> f64 {
        if s >= self.s_switch {
            self.integral_down_to(s)
        } else {
            let gamma = self.pair.gamma();
            let b1 = self.pair.inv_drift0_log_coeff();
            self.y_at_switch
                + (2.0 / gamma) * (1.0 / s - 1.0 / self.s_switch)
                + b1 * (self.s_switch / s).ln()
        }
    }

    /// Invert y(s) by bisection in ln s (y is strictly decreasing in s).
    pub fn s_of_y(&self, y: f64) -> f64 {
        let f = |ln_s: f64| self.y_of_s(ln_s.exp()) - y;
        let lo = (1e-13f64).ln();
        let hi = (1.0 - 1e-12f64).ln();
        if f(hi) >= 0.0 {
            // y below y(x=0⁺): clamp to the left edge.
            return 1.0 - 1e-12;
        }
        bisect(&f, lo, hi, 120).exp()
    }
}
