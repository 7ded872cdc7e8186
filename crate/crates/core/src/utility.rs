//! Application utility models and the log-utility calculus the dual solver
//! runs on.
//!
//! Two families are supported: a normalized sigmoidal curve for rate-adaptive
//! real-time traffic and a normalized logarithmic curve for delay-tolerant
//! traffic. Both satisfy `U(0) = 0`, are strictly increasing, and have
//! strictly concave natural logarithms, which is what makes the per-carrier
//! allocation problem convex and the price search well-posed.
//!
//! All sigmoidal arithmetic is done in terms of `exp(-a*b)` and log-space
//! identities so that parameter products `a*b` in the hundreds never
//! materialize `exp(a*b)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Total rates at or below this value are treated as zero demand by
/// [`UtilityFunction::inverse_marginal`]. Marginal log-utilities diverge as
/// the rate approaches zero, so the price search brackets away from the
/// singularity; a best response that would land at or below this floor is
/// truncated to exactly zero.
pub const ZERO_RATE_FLOOR: f64 = 1e-3;

/// Absolute bracket width at which rate bisection stops.
const BRACKET_TOL: f64 = 1e-10;

/// Errors from utility construction and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// A user application's satisfaction curve as a function of allocated rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum UtilityFunction {
    /// `U(r) = c * (1/(1 + e^{-a(r-b)}) - d)` with `c = (1+e^{ab})/e^{ab}`
    /// and `d = 1/(1+e^{ab})`, normalized so `U(0) = 0` and `U(∞) = 1`.
    /// The inflection point sits at `r = b`.
    Sigmoidal { a: f64, b: f64 },
    /// `U(r) = ln(1 + k r) / ln(1 + k r_max)`, normalized so `U(0) = 0` and
    /// `U(r_max) = 1`. Defined (and > 1) beyond `r_max`; the allocator relies
    /// on that smooth continuation.
    Logarithmic { k: f64, r_max: f64 },
}

impl UtilityFunction {
    /// Sigmoidal utility with steepness `a` and inflection rate `b`.
    pub fn sigmoidal(a: f64, b: f64) -> Result<Self, UtilityError> {
        let u = UtilityFunction::Sigmoidal { a, b };
        u.validate()?;
        Ok(u)
    }

    /// Logarithmic utility with slope `k` and 100%-utilization rate `r_max`.
    pub fn logarithmic(k: f64, r_max: f64) -> Result<Self, UtilityError> {
        let u = UtilityFunction::Logarithmic { k, r_max };
        u.validate()?;
        Ok(u)
    }

    /// Checks the parameter invariants (`a, b, k, r_max` all finite and > 0).
    pub fn validate(&self) -> Result<(), UtilityError> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(UtilityError::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )))
            }
        };
        match *self {
            UtilityFunction::Sigmoidal { a, b } => {
                check("a", a)?;
                check("b", b)
            }
            UtilityFunction::Logarithmic { k, r_max } => {
                check("k", k)?;
                check("r_max", r_max)
            }
        }
    }

    /// Evaluates `U(rate)` for `rate >= 0`.
    ///
    /// Sigmoidal values lie in `[0, 1]` (approaching 1 from below, up to
    /// floating-point saturation at extreme rates); logarithmic values reach
    /// exactly 1 at `r_max` and keep growing beyond it.
    pub fn utility(&self, rate: f64) -> f64 {
        assert!(rate >= 0.0, "utility() requires rate >= 0, got {rate}");
        match *self {
            UtilityFunction::Sigmoidal { .. } => {
                if rate == 0.0 {
                    0.0
                } else {
                    self.log_u_raw(rate).exp()
                }
            }
            UtilityFunction::Logarithmic { k, r_max } => (k * rate).ln_1p() / (k * r_max).ln_1p(),
        }
    }

    /// Evaluates `ln U(rate)` for `rate > 0`.
    pub fn log_utility(&self, rate: f64) -> Result<f64, UtilityError> {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(UtilityError::Domain(format!(
                "log_utility requires rate > 0, got {rate}"
            )));
        }
        Ok(self.log_u_raw(rate))
    }

    /// Evaluates `d ln U / dr` at `rate > 0`. Strictly positive and strictly
    /// decreasing; diverges like `1/rate` as the rate approaches zero.
    pub fn marginal_log_utility(&self, rate: f64) -> Result<f64, UtilityError> {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(UtilityError::Domain(format!(
                "marginal_log_utility requires rate > 0, got {rate}"
            )));
        }
        Ok(self.marginal_raw(rate))
    }

    /// Solves `marginal_log_utility(r) = price` for `r` on `(0, bracket_max]`.
    ///
    /// Returns 0 when the price meets or exceeds the marginal at the
    /// [`ZERO_RATE_FLOOR`] (no worthwhile demand), `bracket_max` when even the
    /// marginal there exceeds the price (demand capped by the caller's
    /// budget), and the bisection root otherwise. The bisection runs to a
    /// bracket width of 1e-10 (or f64 resolution): rate accuracy is what the
    /// price search upstream needs, and on sigmoid plateaus a marginal
    /// residual would be a much weaker stop rule.
    pub fn inverse_marginal(&self, price: f64, bracket_max: f64) -> Result<f64, UtilityError> {
        if !(price > 0.0 && price.is_finite()) {
            return Err(UtilityError::InvalidParameter(format!(
                "price must be finite and > 0, got {price}"
            )));
        }
        if !(bracket_max > 0.0 && bracket_max.is_finite()) {
            return Err(UtilityError::InvalidParameter(format!(
                "bracket_max must be finite and > 0, got {bracket_max}"
            )));
        }
        let mut lo = ZERO_RATE_FLOOR.min(bracket_max * 0.5);
        if self.marginal_raw(lo) <= price {
            return Ok(0.0);
        }
        if self.marginal_raw(bracket_max) > price {
            return Ok(bracket_max);
        }
        let mut hi = bracket_max;
        // marginal(lo) > price >= marginal(hi): bisect the decreasing marginal.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if self.marginal_raw(mid) > price {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= BRACKET_TOL {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `ln U(r)`, assuming `r > 0` and valid parameters.
    fn log_u_raw(&self, r: f64) -> f64 {
        match *self {
            // U(r) = e^{-ab} * expm1(a r) / (1 + e^{a(r-b)}), an exact
            // rewrite of the normalized sigmoid that stays in log space.
            // ln U < 0 always holds for the sigmoid; the clamp removes the
            // rounding slack of the large linear terms at extreme rates.
            UtilityFunction::Sigmoidal { a, b } => {
                (-a * b + ln_expm1(a * r) - softplus(a * (r - b))).min(0.0)
            }
            UtilityFunction::Logarithmic { k, r_max } => {
                (k * r).ln_1p().ln() - (k * r_max).ln_1p().ln()
            }
        }
    }

    /// `d ln U / dr`, assuming `r > 0` and valid parameters.
    fn marginal_raw(&self, r: f64) -> f64 {
        match *self {
            UtilityFunction::Sigmoidal { a, b } => {
                // ln of a*(1+e^{-ab})*e^{a(r-b)} / ((e^{ar}-1)/e^{ar} * e^{ar} ... )
                // simplified: ln a + a r + ln1p(e^{-ab}) - ln(e^{ar}-1) - ln(1+e^{a(r-b)}).
                let ln_m =
                    a.ln() + a * r + (-a * b).exp().ln_1p() - ln_expm1(a * r) - softplus(a * (r - b));
                ln_m.exp()
            }
            UtilityFunction::Logarithmic { k, .. } => {
                let kr1 = 1.0 + k * r;
                k / (kr1 * (k * r).ln_1p())
            }
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 33.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^x - 1)` for `x > 0` without overflow.
fn ln_expm1(x: f64) -> f64 {
    if x > 33.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}
