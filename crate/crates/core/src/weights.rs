//! Carleman weight families evaluated in log space.
//!
//! With `η(x) = x − x₀`, `x₀ < 0`:
//!
//! ```text
//! ξ = e^{3μη}/(t(T−t)),   l = λ(e^{3μη} − e^{5μ‖η‖∞})/(t(T−t)),   θ = e^l
//! ν = e^{3μη}/γ(t),        m = λ(e^{3μη} − e^{5μ‖η‖∞})/γ(t),        σ = e^m
//! ```
//!
//! where `γ(t) = t(T−t)` on `[0,T/2]` and `T²/4` afterwards. The exponents
//! `l`, `m` are hugely negative for realistic parameters, so everything is
//! kept as logarithms and exponentiated once, with underflow clamped to 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Exponents below this are reported as an underflowed zero.
pub const UNDERFLOW_EXPONENT: f64 = -745.0;

fn clamped_exp(x: f64) -> (f64, bool) {
    if x < UNDERFLOW_EXPONENT {
        (0.0, true)
    } else {
        (x.exp(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub mu: f64,
    pub x0: f64,
    pub horizon: f64,
    pub length: f64,
}

impl WeightParams {
    pub fn new(lambda: f64, mu: f64, x0: f64, horizon: f64, length: f64) -> Result<Self> {
        let p = Self {
            lambda,
            mu,
            x0,
            horizon,
            length,
        };
        p.validate()?;
        Ok(p)
    }

    /// `x₀ = −L/2`, `μ = 1.5` and the given `λ`.
    pub fn with_defaults(lambda: f64, grid: &Grid) -> Result<Self> {
        Self::new(
            lambda,
            1.5,
            -0.5 * grid.length(),
            grid.horizon(),
            grid.length(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 1.0 && self.mu > 1.0) {
            return Err(Error::Config(format!(
                "Carleman parameters need lambda > 1 and mu > 1, got ({}, {})",
                self.lambda, self.mu
            )));
        }
        if !(self.x0 < 0.0 && self.x0.is_finite()) {
            return Err(Error::Config(format!(
                "x0 must be negative, got {}",
                self.x0
            )));
        }
        if !(self.horizon > 0.0 && self.length > 0.0) {
            return Err(Error::Config(
                "weight horizon and length must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn eta(&self, x: f64) -> f64 {
        x - self.x0
    }

    pub fn eta_max(&self) -> f64 {
        self.length - self.x0
    }

    fn spatial(&self, x: f64) -> f64 {
        (3.0 * self.mu * self.eta(x)).exp()
    }

    /// `e^{3μη(x)} − e^{5μ‖η‖∞}`, negative on `[0,L]`.
    fn numerator(&self, x: f64) -> f64 {
        self.spatial(x) - (5.0 * self.mu * self.eta_max()).exp()
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if (0.0..=self.length).contains(&x) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "x = {x} outside [0, {}]",
                self.length
            )))
        }
    }
}

/// `γ(t)`: `t(T−t)` up to `T/2`, then frozen at `T²/4`.
pub fn eval_gamma(t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {horizon}]")));
    }
    Ok(if t <= 0.5 * horizon {
        t * (horizon - t)
    } else {
        0.25 * horizon * horizon
    })
}

/// `(ξ, l, θ)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanWeights {
    pub xi: f64,
    pub log_theta: f64,
    pub theta: f64,
    pub underflow: bool,
}

/// `(ν, m, σ)` and `γ(t)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModifiedWeights {
    pub nu: f64,
    pub log_sigma: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub underflow: bool,
}

pub fn eval_carleman_weights(t: f64, x: f64, p: &WeightParams) -> Result<CarlemanWeights> {
    if !(t > 0.0 && t < p.horizon) {
        return Err(Error::Domain(format!(
            "classical Carleman weights are singular at t = {t}; need 0 < t < {}",
            p.horizon
        )));
    }
    p.check_x(x)?;
    let d = t * (p.horizon - t);
    let log_theta = p.lambda * p.numerator(x) / d;
    let (theta, underflow) = clamped_exp(log_theta);
    Ok(CarlemanWeights {
        xi: p.spatial(x) / d,
        log_theta,
        theta,
        underflow,
    })
}

pub fn eval_modified_weights(t: f64, x: f64, p: &WeightParams) -> Result<ModifiedWeights> {
    if !(t > 0.0 && t <= p.horizon) {
        return Err(Error::Domain(format!(
            "modified weights blow up at t = 0; need 0 < t <= {}, got {t}",
            p.horizon
        )));
    }
    p.check_x(x)?;
    let gamma = eval_gamma(t, p.horizon)?;
    let log_sigma = p.lambda * p.numerator(x) / gamma;
    let (sigma, underflow) = clamped_exp(log_sigma);
    Ok(ModifiedWeights {
        nu: p.spatial(x) / gamma,
        log_sigma,
        sigma,
        gamma,
        underflow,
    })
}

/// Extrema over `x ∈ [0,L]` of the modified family. `η` is increasing, so
/// minima sit at `x = 0` and maxima at `x = L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremalWeights {
    pub nu_star: f64,
    pub nu_hat: f64,
    pub log_sigma_star: f64,
    pub log_sigma_hat: f64,
    pub sigma_star: f64,
    pub sigma_hat: f64,
    pub underflow: bool,
}

pub fn eval_extremal(t: f64, p: &WeightParams) -> Result<ExtremalWeights> {
    let lo = eval_modified_weights(t, 0.0, p)?;
    let hi = eval_modified_weights(t, p.length, p)?;
    Ok(ExtremalWeights {
        nu_star: lo.nu,
        nu_hat: hi.nu,
        log_sigma_star: lo.log_sigma,
        log_sigma_hat: hi.log_sigma,
        sigma_star: lo.sigma,
        sigma_hat: hi.sigma,
        underflow: lo.underflow || hi.underflow,
    })
}

/// Which pair of weights a [`WeightSpec`] is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightFamily {
    /// `ξ`, `θ`
    Classical,
    /// `ν`, `σ`
    Modified,
    /// `ν̂(t)`, `σ̂(t)` (space-independent)
    ModifiedMax,
}

/// Monomial `λ^a μ^b w^c e^{d·log}` where `(w, log)` is `(ξ, l)`, `(ν, m)`
/// or `(ν̂, m̂)`. `c` and `d` may be half-integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub family: WeightFamily,
    pub lambda_pow: i32,
    pub mu_pow: i32,
    pub base_pow: f64,
    pub exp_pow: f64,
}

impl WeightSpec {
    pub fn new(
        family: WeightFamily,
        lambda_pow: i32,
        mu_pow: i32,
        base_pow: f64,
        exp_pow: f64,
    ) -> Result<Self> {
        for (name, v) in [("base", base_pow), ("exponential", exp_pow)] {
            if !v.is_finite() || (2.0 * v).fract() != 0.0 {
                return Err(Error::WeightSpec(format!(
                    "{name} power {v} is not an integer or half-integer"
                )));
            }
        }
        Ok(Self {
            family,
            lambda_pow,
            mu_pow,
            base_pow,
            exp_pow,
        })
    }

    /// The weight `1`.
    pub fn constant() -> Self {
        Self {
            family: WeightFamily::Classical,
            lambda_pow: 0,
            mu_pow: 0,
            base_pow: 0.0,
            exp_pow: 0.0,
        }
    }

    /// `λ^a μ^b`, applied outside the log-space core.
    pub fn prefactor(&self, p: &WeightParams) -> f64 {
        p.lambda.powi(self.lambda_pow) * p.mu.powi(self.mu_pow)
    }

    /// Log of the `x,t`-dependent part `w^c e^{d·log}`.
    pub fn log_weight(&self, t: f64, x: f64, p: &WeightParams) -> Result<f64> {
        if self.base_pow == 0.0 && self.exp_pow == 0.0 {
            return Ok(0.0);
        }
        let (base, log) = match self.family {
            WeightFamily::Classical => {
                let w = eval_carleman_weights(t, x, p)?;
                (w.xi, w.log_theta)
            }
            WeightFamily::Modified => {
                let w = eval_modified_weights(t, x, p)?;
                (w.nu, w.log_sigma)
            }
            WeightFamily::ModifiedMax => {
                let w = eval_extremal(t, p)?;
                (w.nu_hat, w.log_sigma_hat)
            }
        };
        let mut out = self.exp_pow * log;
        if self.base_pow != 0.0 {
            out += self.base_pow * base.ln();
        }
        Ok(out)
    }

    /// Log weights on the half-step × node lattice, row-major in time.
    pub fn table(&self, grid: &Grid, p: &WeightParams) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(grid.steps() * grid.nodes());
        for n in 0..grid.steps() {
            let t = grid.t_half(n);
            for i in 0..grid.nodes() {
                out.push(self.log_weight(t, grid.x(i), p)?);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (b, e) = match self.family {
            WeightFamily::Classical => ("xi", "theta"),
            WeightFamily::Modified => ("nu", "sigma"),
            WeightFamily::ModifiedMax => ("nu_hat", "sigma_hat"),
        };
        let mut parts = Vec::new();
        if self.lambda_pow != 0 {
            parts.push(format!("lambda^{}", self.lambda_pow));
        }
        if self.mu_pow != 0 {
            parts.push(format!("mu^{}", self.mu_pow));
        }
        if self.base_pow != 0.0 {
            parts.push(format!("{b}^{}", self.base_pow));
        }
        if self.exp_pow != 0.0 {
            parts.push(format!("{e}^{}", self.exp_pow));
        }
        if parts.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", parts.join(" "))
        }
    }
}

/// Parses whitespace- or `*`-separated factors such as
/// `"lambda^7 mu^8 xi^7 theta^2"`, `"nu sigma^2"` or `"1"`.
impl FromStr for WeightSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut family: Option<WeightFamily> = None;
        let mut spec = WeightSpec::constant();
        let mut set_family = |fam: WeightFamily| -> Result<()> {
            match family {
                Some(f) if f != fam => {
                    Err(Error::WeightSpec(format!("'{s}' mixes weight families")))
                }
                _ => {
                    family = Some(fam);
                    Ok(())
                }
            }
        };
        let tokens: Vec<&str> = s
            .split(|c: char| c.is_whitespace() || c == '*')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::WeightSpec("empty expression".into()));
        }
        for tok in tokens {
            if tok == "1" {
                continue;
            }
            let (name, pow) = match tok.split_once('^') {
                Some((n, p)) => {
                    let v: f64 = p
                        .parse()
                        .map_err(|_| Error::WeightSpec(format!("bad exponent in '{tok}'")))?;
                    (n, v)
                }
                None => (tok, 1.0),
            };
            let int_pow = || -> Result<i32> {
                if pow.fract() == 0.0 && pow.abs() < 64.0 {
                    Ok(pow as i32)
                } else {
                    Err(Error::WeightSpec(format!("'{tok}' needs an integer power")))
                }
            };
            match name {
                "lambda" => spec.lambda_pow += int_pow()?,
                "mu" => spec.mu_pow += int_pow()?,
                "xi" => {
                    set_family(WeightFamily::Classical)?;
                    spec.base_pow += pow;
                }
                "theta" => {
                    set_family(WeightFamily::Classical)?;
                    spec.exp_pow += pow;
                }
                "nu" => {
                    set_family(WeightFamily::Modified)?;
                    spec.base_pow += pow;
                }
                "sigma" => {
                    set_family(WeightFamily::Modified)?;
                    spec.exp_pow += pow;
                }
                "nu_hat" => {
                    set_family(WeightFamily::ModifiedMax)?;
                    spec.base_pow += pow;
                }
                "sigma_hat" => {
                    set_family(WeightFamily::ModifiedMax)?;
                    spec.exp_pow += pow;
                }
                other => return Err(Error::WeightSpec(format!("unknown factor '{other}'"))),
            }
        }
        WeightSpec::new(
            family.unwrap_or(WeightFamily::Classical),
            spec.lambda_pow,
            spec.mu_pow,
            spec.base_pow,
            spec.exp_pow,
        )
    }
}

/// A nonnegative number stored as `mantissa · e^{log_scale}` so that
/// integrals against underflowing weights keep their relative size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogScaled {
    pub log_scale: f64,
    pub mantissa: f64,
}

impl LogScaled {
    pub const ZERO: LogScaled = LogScaled {
        log_scale: f64::NEG_INFINITY,
        mantissa: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.mantissa == 0.0
    }

    /// Natural log of the value (`-inf` for zero).
    pub fn ln(&self) -> f64 {
        if self.is_zero() {
            f64::NEG_INFINITY
        } else {
            self.log_scale + self.mantissa.ln()
        }
    }

    /// The value as a plain float; may under- or overflow.
    pub fn value(&self) -> f64 {
        if self.is_zero() {
            0.0
        } else {
            self.mantissa * self.log_scale.exp()
        }
    }

    pub fn scale(self, c: f64) -> Self {
        if c == 0.0 {
            Self::ZERO
        } else {
            Self {
                log_scale: self.log_scale,
                mantissa: self.mantissa * c,
            }
        }
    }

    pub fn plus(self, other: Self) -> Self {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        let s = self.log_scale.max(other.log_scale);
        Self {
            log_scale: s,
            mantissa: self.mantissa * (self.log_scale - s).exp()
                + other.mantissa * (other.log_scale - s).exp(),
        }
    }

    /// `ln(self/other)`.
    pub fn ln_ratio(&self, other: &Self) -> f64 {
        (self.log_scale - other.log_scale) + (self.mantissa / other.mantissa).ln()
    }
}

/// `dx·dt·Σ_{n,i} mask_i · e^{logw(n,i)} · value(n,i)` over the half-step
/// lattice, scaled by the largest log weight on the support of `value`.
///
/// The scale depends on the field only through where it is nonzero, so the
/// result is exactly homogeneous under scalar multiplication of the field.
pub fn log_weighted_sum(
    grid: &Grid,
    log_w: &[f64],
    mask: Option<&Mask>,
    value: impl Fn(usize, usize) -> f64,
) -> LogScaled {
    let (m, n_nodes) = (grid.steps(), grid.nodes());
    let mw = |i: usize| mask.map_or(1.0, |mk| mk.get(i));
    let mut scale = f64::NEG_INFINITY;
    for n in 0..m {
        for i in 0..n_nodes {
            if mw(i) > 0.0 && value(n, i) > 0.0 {
                scale = scale.max(log_w[n * n_nodes + i]);
            }
        }
    }
    if scale == f64::NEG_INFINITY {
        return LogScaled::ZERO;
    }
    let mut sum = 0.0;
    for n in 0..m {
        for i in 0..n_nodes {
            let w = mw(i);
            if w > 0.0 {
                let e = log_w[n * n_nodes + i] - scale;
                if e >= UNDERFLOW_EXPONENT {
                    sum += w * e.exp() * value(n, i);
                }
            }
        }
    }
    LogScaled {
        log_scale: scale,
        mantissa: sum * grid.dx() * grid.dt(),
    }
}

/// Space–time quadrature of `weight · |field|²` with the field averaged to
/// half steps. Includes the `λ^a μ^b` prefactor.
pub fn weighted_sample(
    traj: &crate::field::Trajectory,
    spec: &WeightSpec,
    p: &WeightParams,
    mask: Option<&Mask>,
) -> Result<LogScaled> {
    let grid = traj.grid();
    let table = spec.table(grid, p)?;
    let halves: Vec<Vec<f64>> = (0..grid.steps())
        .map(|n| traj.half_average(n).iter().map(|z| z.norm_sqr()).collect())
        .collect();
    Ok(log_weighted_sum(grid, &table, mask, |n, i| halves[n][i]).scale(spec.prefactor(p)))
}
