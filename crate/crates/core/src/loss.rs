//! Robust loss functions for M-estimation.
//!
//! Every loss is evaluated on a nonnegative argument `t` (a distance). Each
//! kind exposes the loss `rho`, its derivative `psi` (the influence function)
//! and the weight `phi(t) = psi(t) / t` used by iteratively reweighted
//! least squares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LeastSquares,
    LeastAbsolute,
    Huber,
    Hampel,
    Tukey,
    Cauchy,
    Welsch,
    GemanMcClure,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::LeastSquares,
        LossKind::LeastAbsolute,
        LossKind::Huber,
        LossKind::Hampel,
        LossKind::Tukey,
        LossKind::Cauchy,
        LossKind::Welsch,
        LossKind::GemanMcClure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::LeastSquares => "least_squares",
            LossKind::LeastAbsolute => "least_absolute",
            LossKind::Huber => "huber",
            LossKind::Hampel => "hampel",
            LossKind::Tukey => "tukey",
            LossKind::Cauchy => "cauchy",
            LossKind::Welsch => "welsch",
            LossKind::GemanMcClure => "geman_mcclure",
        }
    }

    /// Whether the kind carries tuning constants at all.
    pub fn is_tunable(self) -> bool {
        !matches!(self, LossKind::LeastSquares | LossKind::GemanMcClure)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::InvalidLoss(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constants {
    None,
    /// `c` for Huber, Tukey, Cauchy and Welsch; the weight-cap scale for least-absolute.
    Single(f64),
    Hampel(f64, f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningPolicy {
    Fixed,
    Quantile(f64),
    HampelQuantiles(f64, f64, f64),
}

/// A validated loss: kind, constants and the policy for choosing constants
/// from data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RobustLoss {
    kind: LossKind,
    constants: Constants,
    policy: TuningPolicy,
}

/// Relative floor below which the least-absolute weight is capped.
const LEAST_ABSOLUTE_FLOOR: f64 = 1e-8;

impl RobustLoss {
    /// Builds and validates a loss.
    pub fn new(kind: LossKind, constants: Constants, policy: TuningPolicy) -> Result<Self> {
        let loss = RobustLoss { kind, constants, policy };
        loss.validate()?;
        Ok(loss)
    }

    pub fn least_squares() -> Self {
        RobustLoss { kind: LossKind::LeastSquares, constants: Constants::None, policy: TuningPolicy::Fixed }
    }

    pub fn least_absolute(scale: f64) -> Result<Self> {
        Self::new(LossKind::LeastAbsolute, Constants::Single(scale), TuningPolicy::Fixed)
    }

    pub fn huber(c: f64) -> Result<Self> {
        Self::new(LossKind::Huber, Constants::Single(c), TuningPolicy::Fixed)
    }

    pub fn hampel(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        Self::new(LossKind::Hampel, Constants::Hampel(c1, c2, c3), TuningPolicy::Fixed)
    }

    pub fn tukey(c: f64) -> Result<Self> {
        Self::new(LossKind::Tukey, Constants::Single(c), TuningPolicy::Fixed)
    }

    pub fn cauchy(c: f64) -> Result<Self> {
        Self::new(LossKind::Cauchy, Constants::Single(c), TuningPolicy::Fixed)
    }

    pub fn welsch(c: f64) -> Result<Self> {
        Self::new(LossKind::Welsch, Constants::Single(c), TuningPolicy::Fixed)
    }

    pub fn geman_mcclure() -> Self {
        RobustLoss { kind: LossKind::GemanMcClure, constants: Constants::None, policy: TuningPolicy::Fixed }
    }

    /// The loss with data-driven constants: median of the distances for the
    /// single-constant kinds, the (0.50, 0.75, 0.85) quantiles for Hampel.
    /// Placeholder constants are valid until [`RobustLoss::tune_constants`]
    /// replaces them.
    pub fn with_default_tuning(kind: LossKind) -> Self {
        match kind {
            LossKind::LeastSquares => Self::least_squares(),
            LossKind::GemanMcClure => Self::geman_mcclure(),
            LossKind::Hampel => RobustLoss {
                kind,
                constants: Constants::Hampel(1.0, 2.0, 3.0),
                policy: TuningPolicy::HampelQuantiles(0.50, 0.75, 0.85),
            },
            _ => RobustLoss { kind, constants: Constants::Single(1.0), policy: TuningPolicy::Quantile(0.5) },
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn constants(&self) -> Constants {
        self.constants
    }

    pub fn policy(&self) -> TuningPolicy {
        self.policy
    }

    pub fn with_policy(mut self, policy: TuningPolicy) -> Result<Self> {
        self.policy = policy;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.constants) {
            (LossKind::LeastSquares | LossKind::GemanMcClure, Constants::None) => {}
            (
                LossKind::LeastAbsolute
                | LossKind::Huber
                | LossKind::Tukey
                | LossKind::Cauchy
                | LossKind::Welsch,
                Constants::Single(c),
            ) => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidLoss(format!("{} requires c > 0, got {c}", self.kind.name())));
                }
            }
            (LossKind::Hampel, Constants::Hampel(c1, c2, c3)) => {
                if !(c1 > 0.0 && c1 < c2 && c2 < c3 && c3.is_finite()) {
                    return Err(Error::InvalidLoss(format!(
                        "hampel requires 0 < c1 < c2 < c3, got ({c1}, {c2}, {c3})"
                    )));
                }
            }
            (kind, constants) => {
                return Err(Error::InvalidLoss(format!("{} does not take constants {constants:?}", kind.name())));
            }
        }
        match (self.kind, self.policy) {
            (_, TuningPolicy::Fixed) => Ok(()),
            (LossKind::Hampel, TuningPolicy::HampelQuantiles(q1, q2, q3)) => {
                if [q1, q2, q3].iter().all(|q| *q > 0.0 && *q <= 1.0) && q1 <= q2 && q2 <= q3 {
                    Ok(())
                } else {
                    Err(Error::InvalidLoss(format!("bad hampel quantiles ({q1}, {q2}, {q3})")))
                }
            }
            (LossKind::Hampel, p) => Err(Error::InvalidLoss(format!("hampel needs three quantiles, got {p:?}"))),
            (kind, TuningPolicy::Quantile(q)) if kind.is_tunable() => {
                if q > 0.0 && q <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidLoss(format!("quantile must lie in (0, 1], got {q}")))
                }
            }
            (kind, p) => Err(Error::InvalidLoss(format!("{} cannot use tuning policy {p:?}", kind.name()))),
        }
    }

    fn c(&self) -> f64 {
        match self.constants {
            Constants::Single(c) => c,
            _ => 1.0,
        }
    }

    /// The loss `rho(t)`.
    pub fn rho(&self, t: f64) -> Result<f64> {
        check_domain(t)?;
        Ok(self.rho_unchecked(t))
    }

    /// The influence function `psi(t) = rho'(t)`.
    pub fn psi(&self, t: f64) -> Result<f64> {
        check_domain(t)?;
        Ok(self.psi_unchecked(t))
    }

    /// The weight `phi(t) = psi(t) / t`, with its limit at `t = 0`.
    pub fn weight(&self, t: f64) -> Result<f64> {
        check_domain(t)?;
        Ok(self.weight_unchecked(t))
    }

    pub(crate) fn rho_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            LossKind::LeastSquares => 0.5 * t * t,
            LossKind::LeastAbsolute => t,
            LossKind::Huber => {
                let c = self.c();
                if t <= c {
                    0.5 * t * t
                } else {
                    c * t - 0.5 * c * c
                }
            }
            LossKind::Hampel => {
                let Constants::Hampel(c1, c2, c3) = self.constants else { unreachable!() };
                let plateau = 0.5 * c1 * (c2 + c3 - c1);
                if t <= c1 {
                    0.5 * t * t
                } else if t < c2 {
                    c1 * t - 0.5 * c1 * c1
                } else if t < c3 {
                    let d = t - c3;
                    -c1 / (2.0 * (c3 - c2)) * d * d + plateau
                } else {
                    plateau
                }
            }
            LossKind::Tukey => {
                let c = self.c();
                if t <= c {
                    // 1 - (1 - s)^3 expanded to avoid cancellation near zero
                    let s = (t / c).powi(2);
                    c * c / 6.0 * s * (3.0 - 3.0 * s + s * s)
                } else {
                    c * c / 6.0
                }
            }
            LossKind::Cauchy => {
                let c = self.c();
                0.5 * c * c * (t / c).powi(2).ln_1p()
            }
            LossKind::Welsch => {
                let c = self.c();
                -0.5 * c * c * (-(t / c).powi(2)).exp_m1()
            }
            LossKind::GemanMcClure => {
                let t2 = t * t;
                0.5 * t2 / (1.0 + t2)
            }
        }
    }

    pub(crate) fn psi_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            LossKind::LeastSquares => t,
            LossKind::LeastAbsolute => 1.0,
            LossKind::Huber => t.min(self.c()),
            LossKind::Hampel => {
                let Constants::Hampel(c1, c2, c3) = self.constants else { unreachable!() };
                if t <= c1 {
                    t
                } else if t < c2 {
                    c1
                } else if t < c3 {
                    c1 * (c3 - t) / (c3 - c2)
                } else {
                    0.0
                }
            }
            LossKind::Tukey => {
                let c = self.c();
                if t <= c {
                    let u = 1.0 - (t / c).powi(2);
                    t * u * u
                } else {
                    0.0
                }
            }
            LossKind::Cauchy => t / (1.0 + (t / self.c()).powi(2)),
            LossKind::Welsch => t * (-(t / self.c()).powi(2)).exp(),
            LossKind::GemanMcClure => {
                let d = 1.0 + t * t;
                t / (d * d)
            }
        }
    }

    pub(crate) fn weight_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            LossKind::LeastSquares => 1.0,
            LossKind::LeastAbsolute => 1.0 / t.max(LEAST_ABSOLUTE_FLOOR * self.c()),
            LossKind::Huber => {
                let c = self.c();
                if t <= c {
                    1.0
                } else {
                    c / t
                }
            }
            LossKind::Hampel => {
                let Constants::Hampel(c1, c2, c3) = self.constants else { unreachable!() };
                if t <= c1 {
                    1.0
                } else if t < c2 {
                    c1 / t
                } else if t < c3 {
                    c1 * (c3 - t) / ((c3 - c2) * t)
                } else {
                    0.0
                }
            }
            LossKind::Tukey => {
                let c = self.c();
                if t <= c {
                    let u = 1.0 - (t / c).powi(2);
                    u * u
                } else {
                    0.0
                }
            }
            LossKind::Cauchy => 1.0 / (1.0 + (t / self.c()).powi(2)),
            LossKind::Welsch => (-(t / self.c()).powi(2)).exp(),
            LossKind::GemanMcClure => {
                let d = 1.0 + t * t;
                1.0 / (d * d)
            }
        }
    }

    /// Returns a copy whose constants are the configured empirical quantiles
    /// of `distances`. Losses without constants, or with a fixed policy, come
    /// back unchanged.
    pub fn tune_constants(&self, distances: &[f64]) -> Result<RobustLoss> {
        if distances.is_empty() {
            return Err(Error::InvalidArgument("no distances to tune from".into()));
        }
        if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument("distances must be finite and nonnegative".into()));
        }
        if matches!(self.policy, TuningPolicy::Fixed) || !self.kind.is_tunable() {
            return Ok(*self);
        }
        let mut sorted = distances.to_vec();
        sorted.sort_by(f64::total_cmp);
        let smallest_positive = sorted.iter().copied().find(|d| *d > 0.0).ok_or(Error::DegenerateScale)?;
        let at = |q: f64| {
            let v = quantile_sorted(&sorted, q);
            if v > 0.0 {
                v
            } else {
                smallest_positive
            }
        };
        let constants = match self.policy {
            // Tukey weights vanish at c, so c must clear the closest sample
            TuningPolicy::Quantile(q) if self.kind == LossKind::Tukey && at(q) <= sorted[0] => {
                let next = sorted.iter().copied().find(|d| *d > sorted[0]);
                Constants::Single(next.unwrap_or(sorted[0] * (1.0 + 1e-6)))
            }
            TuningPolicy::Quantile(q) => Constants::Single(at(q)),
            TuningPolicy::HampelQuantiles(q1, q2, q3) => {
                let c1 = at(q1);
                let c2 = strictly_above(at(q2), c1);
                let c3 = strictly_above(at(q3), c2);
                Constants::Hampel(c1, c2, c3)
            }
            TuningPolicy::Fixed => unreachable!(),
        };
        RobustLoss::new(self.kind, constants, self.policy)
    }

    /// Supremum of `|psi|` over `t >= 0`, `None` when unbounded.
    pub fn psi_bound(&self) -> Option<f64> {
        match self.kind {
            LossKind::LeastSquares => None,
            LossKind::LeastAbsolute => Some(1.0),
            LossKind::Huber => Some(self.c()),
            LossKind::Hampel => match self.constants {
                Constants::Hampel(c1, _, _) => Some(c1),
                _ => None,
            },
            // maximised at t = c / sqrt(5)
            LossKind::Tukey => Some(self.c() * 16.0 / (25.0 * 5f64.sqrt())),
            LossKind::Cauchy => Some(0.5 * self.c()),
            LossKind::Welsch => Some(self.c() * (-0.5f64).exp() / 2f64.sqrt()),
            LossKind::GemanMcClure => Some(9.0 / (16.0 * 3f64.sqrt())),
        }
    }
}

fn check_domain(t: f64) -> Result<()> {
    if t >= 0.0 && !t.is_nan() {
        Ok(())
    } else {
        Err(Error::NegativeArgument(t))
    }
}

/// Inverse-CDF (lower) empirical quantile: the `ceil(q n)`-th smallest value.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn strictly_above(value: f64, floor: f64) -> f64 {
    if value > floor {
        return value;
    }
    let mut bumped = floor;
    let mut k = 1.0;
    while bumped <= floor {
        bumped = floor * (1.0 + k * f64::EPSILON);
        k *= 2.0;
    }
    bumped
}
