//! Forward–backward cascade system, its adjoint pair and the sentinel.
//!
//! ```text
//! i u_t + u_xx − u_xxxx − ζ|u|²u                  = f⁰ + 1_ω h,  u(0) = u₀
//! i v_t + v_xx − v_xxxx − ζ̄(ū² v̄ + 2|u|² v)      = f¹ + 1_O u,  v(T) = 0
//! ```
//!
//! Space–time integrals use the midpoint rule on half-step averages
//! `(w^n + w^{n+1})/2`. With this quadrature the duality identities between
//! the Crank–Nicolson sweeps hold exactly, not just to `O(dt²)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{
    l2_inner, raw_inner, ComplexField, CouplingSource, HalfStepField, SourceSampler, SourceSum,
    Trajectory, ZERO,
};
use crate::grid::{check_overlap, Grid, Mask};
use crate::solver::Propagator;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Data of the insensitizing problem. Sources are stored at half steps.
#[derive(Debug, Clone)]
pub struct CascadeProblem {
    pub u0: ComplexField,
    pub f0: HalfStepField,
    pub f1: HalfStepField,
    control: HalfStepField,
    pub omega: Mask,
    pub obs: Mask,
    pub zeta: Complex64,
}

impl CascadeProblem {
    /// Zero data, zero control, `ζ = 0`.
    pub fn new(grid: &Grid, omega: Mask, obs: Mask) -> Result<Self> {
        grid.check_len(omega.len())?;
        grid.check_len(obs.len())?;
        Ok(Self {
            u0: ComplexField::zeros(grid.nodes()),
            f0: HalfStepField::zeros(grid),
            f1: HalfStepField::zeros(grid),
            control: HalfStepField::zeros(grid),
            omega,
            obs,
            zeta: ZERO,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.f0.grid()
    }

    pub fn with_u0(mut self, u0: ComplexField) -> Result<Self> {
        self.grid().check_len(u0.len())?;
        self.u0 = u0;
        Ok(self)
    }

    pub fn with_f0(mut self, f0: &dyn SourceSampler) -> Self {
        self.f0 = HalfStepField::sample(self.grid(), f0);
        self
    }

    pub fn with_f1(mut self, f1: &dyn SourceSampler) -> Self {
        self.f1 = HalfStepField::sample(self.grid(), f1);
        self
    }

    pub fn with_zeta(mut self, zeta: Complex64) -> Self {
        self.zeta = zeta;
        self
    }

    /// Installs `1_ω h`; values of `h` outside `ω` are dropped.
    pub fn with_control(mut self, h: &HalfStepField) -> Self {
        self.control = h.masked(&self.omega);
        self
    }

    pub fn set_control(&mut self, h: &HalfStepField) {
        self.control = h.masked(&self.omega);
    }

    pub fn control(&self) -> &HalfStepField {
        &self.control
    }

    /// Checks `ω ∩ O ≠ ∅` and finiteness of the data.
    pub fn validate(&self) -> Result<()> {
        check_overlap(&self.omega, &self.obs)?;
        if !(self.u0.is_finite()
            && self.f0.is_finite()
            && self.f1.is_finite()
            && self.control.is_finite())
        {
            return Err(Error::Config(
                "cascade data contain non-finite values".into(),
            ));
        }
        if !self.zeta.is_finite() {
            return Err(Error::Config(
                "nonlinearity coefficient is not finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CascadeSolution {
    pub u: Trajectory,
    pub v: Trajectory,
    pub v0: ComplexField,
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub psi: Trajectory,
    pub phi: Trajectory,
}

/// Linear cascade (`ζ = 0`).
pub fn solve_cascade_linear(prop: &Propagator, p: &CascadeProblem) -> Result<CascadeSolution> {
    if p.zeta != ZERO {
        return Err(Error::Config(
            "linear cascade solve requires zeta = 0".into(),
        ));
    }
    solve_cascade_nonlinear(prop, p)
}

/// Full cascade; the `v` sweep freezes the `u`-dependent coefficients from
/// the computed state. Reduces to the linear cascade when `ζ = 0`.
pub fn solve_cascade_nonlinear(prop: &Propagator, p: &CascadeProblem) -> Result<CascadeSolution> {
    let grid = prop.grid();
    grid.check_len(p.u0.len())?;
    let forcing = SourceSum(vec![&p.f0, &p.control]);
    let u = prop.solve_forward_nonlinear(&p.u0, &forcing, p.zeta)?;
    let coupling = CouplingSource {
        mask: &p.obs,
        traj: &u,
    };
    let v_source = SourceSum(vec![&p.f1, &coupling]);
    let v =
        prop.solve_backward_linearized(&ComplexField::zeros(grid.nodes()), &v_source, &u, p.zeta)?;
    let v0 = v.first().clone();
    Ok(CascadeSolution { u, v, v0 })
}

/// `ψ` forward from `ψ₀` with source `g¹`; `φ` backward from `φ(T) = 0` with
/// source `1_O ψ + g⁰`.
pub fn solve_adjoint_pair(
    prop: &Propagator,
    psi0: &ComplexField,
    g0: &dyn SourceSampler,
    g1: &dyn SourceSampler,
    obs: &Mask,
) -> Result<AdjointSolution> {
    let psi = prop.solve_forward(psi0, g1)?;
    let coupling = CouplingSource {
        mask: obs,
        traj: &psi,
    };
    let phi = prop.solve_backward(
        &ComplexField::zeros(prop.grid().nodes()),
        &SourceSum(vec![&coupling, g0]),
    )?;
    Ok(AdjointSolution { psi, phi })
}

/// `J = ½ ∬_{O_T} |u|²`.
pub fn sentinel_value(u: &Trajectory, obs: &Mask) -> f64 {
    let grid = u.grid();
    let mut acc = 0.0;
    for n in 0..grid.steps() {
        let (a, b) = (u.at(n), u.at(n + 1));
        for i in 0..grid.nodes() {
            let w = obs.get(i);
            if w > 0.0 {
                acc += w * ((a[i] + b[i]) * 0.5).norm_sqr();
            }
        }
    }
    0.5 * acc * grid.dx() * grid.dt()
}

/// `∂J/∂τ` at `τ = 0` in direction `û₀` from the companion state:
/// `Re⟨i û₀, v(0)⟩`.
pub fn insensitivity_derivative_adjoint(
    grid: &Grid,
    u_hat0: &[Complex64],
    v0: &[Complex64],
) -> Result<f64> {
    let iu: Vec<Complex64> = u_hat0.iter().map(|z| I * z).collect();
    Ok(l2_inner(grid, &iu, v0)?.re)
}

/// Centered difference `[J(u₀+τû₀) − J(u₀−τû₀)]/(2τ)`, each `J` from a
/// forward (nonlinear when `ζ ≠ 0`) solve with the problem's control.
pub fn insensitivity_derivative_fd(
    prop: &Propagator,
    p: &CascadeProblem,
    u_hat0: &ComplexField,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {tau}"
        )));
    }
    prop.grid().check_len(u_hat0.len())?;
    if u_hat0.iter().all(|z| *z == ZERO) {
        return Ok(0.0);
    }
    let forcing = SourceSum(vec![&p.f0, &p.control]);
    let sentinel = |sign: f64| -> Result<f64> {
        let mut start = p.u0.clone();
        start.axpy(Complex64::new(sign * tau, 0.0), u_hat0);
        let u = prop.solve_forward_nonlinear(&start, &forcing, p.zeta)?;
        Ok(sentinel_value(&u, &p.obs))
    };
    Ok((sentinel(1.0)? - sentinel(-1.0)?) / (2.0 * tau))
}

/// Rescales to unit discrete `L²` norm; zero stays zero.
pub fn normalize_direction(grid: &Grid, u_hat0: &ComplexField) -> Result<ComplexField> {
    let n = crate::field::l2_norm(grid, u_hat0)?;
    Ok(if n > 0.0 {
        u_hat0.scaled(Complex64::new(1.0 / n, 0.0))
    } else {
        u_hat0.clone()
    })
}

/// Both sides of the transposition identity
///
/// `Re ∬ g¹ v̄ = Re ∬_{O_T} u ψ̄ + Re ∬ F¹ ψ̄`
///
/// for `u` driven by `F⁰` from rest, `v` the companion with source `F¹`,
/// and `ψ` driven by `g¹` from `ψ(0) = 0`.
pub fn transposition_sides(
    prop: &Propagator,
    f0: &HalfStepField,
    f1: &HalfStepField,
    g1: &HalfStepField,
    obs: &Mask,
) -> Result<(f64, f64)> {
    let grid = prop.grid();
    let mut problem = CascadeProblem::new(grid, Mask::empty(grid), obs.clone())?;
    problem.f0 = f0.clone();
    problem.f1 = f1.clone();
    let sol = solve_cascade_linear(prop, &problem)?;
    let psi = prop.solve_forward(&ComplexField::zeros(grid.nodes()), g1)?;
    let scale = grid.dx() * grid.dt();
    let (mut lhs, mut rhs_obs, mut rhs_src) = (ZERO, ZERO, ZERO);
    for n in 0..grid.steps() {
        let (v, u, ps) = (
            sol.v.half_average(n),
            sol.u.half_average(n),
            psi.half_average(n),
        );
        lhs += raw_inner(g1.slice(n), &v);
        rhs_obs += raw_inner(&obs.apply(&u), &ps);
        rhs_src += raw_inner(f1.slice(n), &ps);
    }
    Ok(((lhs * scale).re, ((rhs_obs + rhs_src) * scale).re))
}
