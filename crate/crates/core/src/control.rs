//! Insensitizing controls by penalized HUM.
//!
//! `S: h ↦ v(0)` is the control-to-final map of the linear cascade with all
//! other data zeroed. Its discrete adjoint is `S*p = −i·1_ω·φ̄`, where `ψ`
//! runs forward from `p`, `φ` runs backward from zero with source `1_O ψ̄`,
//! and bars denote half-step averages. The penalized Gramian
//! `Λ = S W S* + εI` is Hermitian positive definite and is inverted by
//! conjugate residuals, whose residual norms decrease monotonically.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    solve_cascade_linear, solve_cascade_nonlinear, CascadeProblem, CascadeSolution,
};
use crate::error::{Error, Result};
use crate::field::{
    l2_inner, l2_norm, ComplexField, CouplingSource, HalfStepField, Trajectory, ZERO,
};
use crate::grid::{check_overlap, Grid, Mask};
use crate::solver::Propagator;
use crate::weights::{eval_extremal, log_weighted_sum, WeightParams, UNDERFLOW_EXPONENT};

const NEG_I: Complex64 = Complex64::new(0.0, -1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Plain,
    CarlemanWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub epsilon: f64,
    pub mode: ControlMode,
    pub cg_tol: f64,
    pub cg_maxit: usize,
    pub weight_params: Option<WeightParams>,
}

impl ControlSpec {
    pub fn plain(epsilon: f64) -> Self {
        Self {
            epsilon,
            mode: ControlMode::Plain,
            cg_tol: 1e-10,
            cg_maxit: 500,
            weight_params: None,
        }
    }

    pub fn weighted(epsilon: f64, params: WeightParams) -> Self {
        Self {
            mode: ControlMode::CarlemanWeighted,
            weight_params: Some(params),
            ..Self::plain(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::Config(format!(
                "cg_tol must lie in (0,1), got {}",
                self.cg_tol
            )));
        }
        if self.cg_maxit == 0 {
            return Err(Error::Config("cg_maxit must be at least 1".into()));
        }
        match (self.mode, &self.weight_params) {
            (ControlMode::CarlemanWeighted, None) => Err(Error::Config(
                "carleman_weighted mode needs weight parameters".into(),
            )),
            (ControlMode::CarlemanWeighted, Some(p)) => p.validate(),
            (ControlMode::Plain, _) => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    pub h: HalfStepField,
    pub v0: ComplexField,
    pub v0_norm: f64,
    pub cg_iterations: usize,
    /// `‖r_k‖/‖b‖`, starting with `1` at `k = 0`.
    pub cg_residual_history: Vec<f64>,
    pub j_insensitivity_bound: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    /// Relative change of `h` per outer iteration (nonlinear runs only).
    pub outer_history: Vec<f64>,
}

/// Control weight per half step: `ν̂σ̂²` divided by its maximum over the
/// run, or all ones in plain mode.
pub fn control_weight(grid: &Grid, spec: &ControlSpec) -> Result<Vec<f64>> {
    let m = grid.steps();
    let Some(p) = spec
        .weight_params
        .as_ref()
        .filter(|_| spec.mode == ControlMode::CarlemanWeighted)
    else {
        return Ok(vec![1.0; m]);
    };
    let logs = (0..m)
        .map(|n| {
            let e = eval_extremal(grid.t_half(n), p)?;
            Ok(e.nu_hat.ln() + 2.0 * e.log_sigma_hat)
        })
        .collect::<Result<Vec<f64>>>()?;
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(logs
        .iter()
        .map(|l| {
            if l - top < UNDERFLOW_EXPONENT {
                0.0
            } else {
                (l - top).exp()
            }
        })
        .collect())
}

/// The linear maps `S`, `S*` and the Gramian for fixed masks.
#[derive(Debug, Clone)]
pub struct ControlMap<'a> {
    prop: &'a Propagator,
    omega: Mask,
    obs: Mask,
}

impl<'a> ControlMap<'a> {
    pub fn new(prop: &'a Propagator, omega: &Mask, obs: &Mask) -> Result<Self> {
        prop.grid().check_len(omega.len())?;
        prop.grid().check_len(obs.len())?;
        Ok(Self {
            prop,
            omega: omega.clone(),
            obs: obs.clone(),
        })
    }

    pub fn grid(&self) -> &Grid {
        self.prop.grid()
    }

    pub fn apply(&self, h: &HalfStepField) -> Result<ComplexField> {
        let n = self.grid().nodes();
        let forcing = h.masked(&self.omega);
        let u = self.prop.solve_forward(&ComplexField::zeros(n), &forcing)?;
        let v = self.prop.solve_backward(
            &ComplexField::zeros(n),
            &CouplingSource {
                mask: &self.obs,
                traj: &u,
            },
        )?;
        Ok(v.first().clone())
    }

    pub fn adjoint(&self, p0: &ComplexField) -> Result<HalfStepField> {
        let grid = self.grid();
        grid.check_len(p0.len())?;
        let psi = self.prop.solve_forward(p0, &crate::field::ZeroSource)?;
        let phi = self.prop.solve_backward(
            &ComplexField::zeros(grid.nodes()),
            &CouplingSource {
                mask: &self.obs,
                traj: &psi,
            },
        )?;
        let slices = (0..grid.steps())
            .map(|n| {
                let mut s = phi.half_average(n);
                for (z, w) in s.iter_mut().zip(self.omega.weights()) {
                    *z *= NEG_I * *w;
                }
                s
            })
            .collect();
        HalfStepField::from_slices(grid, slices)
    }

    /// `W S* p`, the control induced by adjoint data `p`.
    pub fn induced_control(&self, p0: &ComplexField, weight: &[f64]) -> Result<HalfStepField> {
        let mut h = self.adjoint(p0)?;
        for (n, w) in weight.iter().enumerate() {
            if *w != 1.0 {
                for z in h.slice_mut(n).iter_mut() {
                    *z *= *w;
                }
            }
        }
        Ok(h)
    }

    pub fn gramian(&self, p0: &ComplexField, weight: &[f64], epsilon: f64) -> Result<ComplexField> {
        let mut out = self.apply(&self.induced_control(p0, weight)?)?;
        out.axpy(Complex64::new(epsilon, 0.0), p0);
        Ok(out)
    }
}

pub fn control_to_final(
    prop: &Propagator,
    h: &HalfStepField,
    omega: &Mask,
    obs: &Mask,
) -> Result<ComplexField> {
    ControlMap::new(prop, omega, obs)?.apply(h)
}

pub fn adjoint_of_control_map(
    prop: &Propagator,
    p0: &ComplexField,
    omega: &Mask,
    obs: &Mask,
) -> Result<HalfStepField> {
    ControlMap::new(prop, omega, obs)?.adjoint(p0)
}

/// `(S W S* + εI) p₀`.
pub fn gramian_apply(
    prop: &Propagator,
    p0: &ComplexField,
    omega: &Mask,
    obs: &Mask,
    spec: &ControlSpec,
) -> Result<ComplexField> {
    spec.validate()?;
    let weight = control_weight(prop.grid(), spec)?;
    ControlMap::new(prop, omega, obs)?.gramian(p0, &weight, spec.epsilon)
}

#[derive(Debug, Clone)]
pub struct KrylovOutcome {
    pub x: ComplexField,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Conjugate residuals for a Hermitian positive definite operator under the
/// grid inner product. Stops at `‖r‖ ≤ tol·‖b‖`; on hitting `maxit` the last
/// (smallest-residual) iterate is returned unconverged.
pub fn conjugate_residual(
    grid: &Grid,
    b: &ComplexField,
    tol: f64,
    maxit: usize,
    mut apply: impl FnMut(&ComplexField) -> Result<ComplexField>,
) -> Result<KrylovOutcome> {
    let n = b.len();
    let b_norm = l2_norm(grid, b)?;
    let mut x = ComplexField::zeros(n);
    if b_norm == 0.0 {
        return Ok(KrylovOutcome {
            x,
            iterations: 0,
            history: vec![0.0],
            converged: true,
        });
    }
    let mut r = b.clone();
    let mut ar = apply(&r)?;
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rho = l2_inner(grid, &r, &ar)?.re;
    let mut history = vec![1.0];
    for k in 1..=maxit {
        let denom = l2_inner(grid, &ap, &ap)?.re;
        if !(denom > 0.0 && rho.is_finite()) {
            return Ok(KrylovOutcome {
                x,
                iterations: k - 1,
                history,
                converged: false,
            });
        }
        let alpha = Complex64::new(rho / denom, 0.0);
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rel = l2_norm(grid, &r)? / b_norm;
        history.push(rel);
        if !rel.is_finite() {
            return Err(Error::NonConvergence {
                stage: "conjugate residual",
                iterations: k,
                residual: rel,
            });
        }
        if rel <= tol {
            return Ok(KrylovOutcome {
                x,
                iterations: k,
                history,
                converged: true,
            });
        }
        ar = apply(&r)?;
        let rho_next = l2_inner(grid, &r, &ar)?.re;
        let beta = Complex64::new(rho_next / rho, 0.0);
        rho = rho_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    Ok(KrylovOutcome {
        x,
        iterations: maxit,
        history,
        converged: false,
    })
}

/// Largest `|∂J/∂τ|` over unit directions, which by Cauchy–Schwarz is
/// attained at `û₀ = −i v(0)/‖v(0)‖`.
fn extremal_derivative(grid: &Grid, v0: &ComplexField) -> Result<f64> {
    let nv = l2_norm(grid, v0)?;
    if nv == 0.0 {
        return Ok(0.0);
    }
    let dir = v0.scaled(Complex64::new(0.0, -1.0 / nv));
    Ok(crate::cascade::insensitivity_derivative_adjoint(grid, &dir, v0)?.abs())
}

fn hum_with_map(
    map: &ControlMap,
    weight: &[f64],
    p: &CascadeProblem,
    spec: &ControlSpec,
) -> Result<ControlResult> {
    let grid = map.grid();
    let free = solve_cascade_linear(
        map.prop,
        &p.clone().with_control(&HalfStepField::zeros(grid)),
    )?;
    let b = free.v0.scaled(Complex64::new(-1.0, 0.0));
    let krylov = conjugate_residual(grid, &b, spec.cg_tol, spec.cg_maxit, |q| {
        map.gramian(q, weight, spec.epsilon)
    })?;
    let h = map.induced_control(&krylov.x, weight)?;
    let check = solve_cascade_linear(map.prop, &p.clone().with_control(&h))?;
    finish(grid, h, check, krylov)
}

fn finish(
    grid: &Grid,
    h: HalfStepField,
    sol: CascadeSolution,
    krylov: KrylovOutcome,
) -> Result<ControlResult> {
    let v0_norm = l2_norm(grid, &sol.v0)?;
    Ok(ControlResult {
        h,
        j_insensitivity_bound: extremal_derivative(grid, &sol.v0)?,
        v0: sol.v0,
        v0_norm,
        cg_iterations: krylov.iterations,
        cg_residual_history: krylov.history,
        converged: krylov.converged,
        outer_iterations: 1,
        outer_history: Vec::new(),
    })
}

/// Penalized HUM control for the linear cascade.
pub fn hum_solve(
    prop: &Propagator,
    p: &CascadeProblem,
    spec: &ControlSpec,
) -> Result<ControlResult> {
    p.validate()?;
    spec.validate()?;
    if p.zeta != ZERO {
        return Err(Error::Config(
            "hum_solve needs the linear problem (zeta = 0)".into(),
        ));
    }
    let weight = control_weight(prop.grid(), spec)?;
    hum_with_map(&ControlMap::new(prop, &p.omega, &p.obs)?, &weight, p, spec)
}

/// Independent HUM solves for several specs, run concurrently.
pub fn control_sweep(
    prop: &Propagator,
    p: &CascadeProblem,
    specs: &[ControlSpec],
) -> Vec<Result<ControlResult>> {
    specs.par_iter().map(|s| hum_solve(prop, p, s)).collect()
}

/// Surrogate for the smallness hypothesis on the source: the half-step
/// quadrature of `‖e^{c/t} f‖_{L²(Q_T)}` must not exceed `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallnessCap {
    pub c: f64,
    pub delta: f64,
}

impl SmallnessCap {
    /// Natural log of the weighted norm (`−∞` for a zero source).
    pub fn log_norm(&self, f: &HalfStepField) -> f64 {
        let grid = f.grid();
        let n = grid.nodes();
        let log_w: Vec<f64> = (0..grid.steps())
            .flat_map(|k| std::iter::repeat_n(2.0 * self.c / grid.t_half(k), n))
            .collect();
        0.5 * log_weighted_sum(grid, &log_w, None, |k, i| f.slice(k)[i].norm_sqr()).ln()
    }

    pub fn check(&self, f: &HalfStepField) -> Result<()> {
        let ln = self.log_norm(f);
        if ln > self.delta.ln() {
            return Err(Error::Config(format!(
                "source too large for the nonlinear loop: ln‖e^(c/t) f‖ = {ln:.3} exceeds ln(delta) = {:.3}",
                self.delta.ln()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterSettings {
    pub tol: f64,
    pub maxit: usize,
    pub cap: Option<SmallnessCap>,
}

impl Default for OuterSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            maxit: 20,
            cap: None,
        }
    }
}

/// Nonlinear terms of the computed cascade, evaluated exactly as the
/// time stepper averages them, as half-step sources for `u` and `v`.
pub fn frozen_nonlinear_sources(
    u: &Trajectory,
    v: &Trajectory,
    zeta: Complex64,
) -> Result<(HalfStepField, HalfStepField)> {
    let grid = u.grid();
    let zc = zeta.conj();
    let cubic = |a: &ComplexField, i: usize| a[i] * a[i].norm_sqr();
    let coupling = |a: &ComplexField, b: &ComplexField, i: usize| {
        let ub = a[i].conj();
        zc * (ub * ub * b[i].conj() + 2.0 * a[i].norm_sqr() * b[i])
    };
    let (mut su, mut sv) = (
        Vec::with_capacity(grid.steps()),
        Vec::with_capacity(grid.steps()),
    );
    for n in 0..grid.steps() {
        let (u0, u1, v0, v1) = (u.at(n), u.at(n + 1), v.at(n), v.at(n + 1));
        su.push(ComplexField(
            (0..grid.nodes())
                .map(|i| zeta * 0.5 * (cubic(u0, i) + cubic(u1, i)))
                .collect(),
        ));
        sv.push(ComplexField(
            (0..grid.nodes())
                .map(|i| 0.5 * (coupling(u0, v0, i) + coupling(u1, v1, i)))
                .collect(),
        ));
    }
    Ok((
        HalfStepField::from_slices(grid, su)?,
        HalfStepField::from_slices(grid, sv)?,
    ))
}

/// Insensitizing control for the cubic cascade by successive linearization.
///
/// Each outer step freezes the nonlinear terms of the current cascade as
/// extra sources, solves the linear HUM problem with them, and re-solves
/// the nonlinear cascade with the new control. With `ζ = 0` this is
/// [`hum_solve`].
pub fn nonlinear_insensitize(
    prop: &Propagator,
    p: &CascadeProblem,
    spec: &ControlSpec,
    outer: &OuterSettings,
) -> Result<ControlResult> {
    if p.zeta == ZERO {
        return hum_solve(prop, p, spec);
    }
    p.validate()?;
    spec.validate()?;
    if outer.tol.is_nan() || outer.tol <= 0.0 || outer.maxit == 0 {
        return Err(Error::Config(
            "outer loop needs tol > 0 and maxit ≥ 1".into(),
        ));
    }
    if let Some(cap) = &outer.cap {
        let mut f = p.f0.clone();
        f.axpy(Complex64::new(1.0, 0.0), &p.f1);
        cap.check(&f)?;
    }
    let grid = prop.grid();
    let map = ControlMap::new(prop, &p.omega, &p.obs)?;
    let weight = control_weight(grid, spec)?;
    check_overlap(&p.omega, &p.obs)?;

    let mut h = HalfStepField::zeros(grid);
    let mut sol = solve_cascade_nonlinear(prop, &p.clone().with_control(&h))?;
    let mut prev_norm = l2_norm(grid, &sol.v0)?;
    let mut best_norm = prev_norm;
    let (mut growth, mut stall) = (0usize, 0usize);
    let mut outer_history = Vec::new();
    for k in 1..=outer.maxit {
        let (nu, nv) = frozen_nonlinear_sources(&sol.u, &sol.v, p.zeta)?;
        let mut linear = p.clone().with_zeta(ZERO);
        linear.f0.axpy(Complex64::new(1.0, 0.0), &nu);
        linear.f1.axpy(Complex64::new(1.0, 0.0), &nv);
        let inner = hum_with_map(&map, &weight, &linear, spec)?;
        let mut diff = inner.h.clone();
        diff.axpy(Complex64::new(-1.0, 0.0), &h);
        let size = inner.h.norm();
        let change = if size > 0.0 {
            diff.norm() / size
        } else {
            diff.norm()
        };
        outer_history.push(change);
        h = inner.h;
        sol = solve_cascade_nonlinear(prop, &p.clone().with_control(&h))?;
        let v0_norm = l2_norm(grid, &sol.v0)?;
        if !v0_norm.is_finite() {
            return Err(Error::Divergence(format!(
                "outer iteration {k} produced a non-finite state"
            )));
        }
        growth = if v0_norm > prev_norm * (1.0 + 1e-9) {
            growth + 1
        } else {
            0
        };
        if growth >= 3 {
            return Err(Error::Divergence(format!(
                "‖v(0)‖ grew for 3 consecutive outer iterations (now {v0_norm:.3e}); try a smaller source or a larger epsilon"
            )));
        }
        stall = if v0_norm >= best_norm * (1.0 - 1e-12) {
            stall + 1
        } else {
            0
        };
        best_norm = best_norm.min(v0_norm);
        prev_norm = v0_norm;
        let done = change < outer.tol || stall >= 2;
        if done || k == outer.maxit {
            let krylov = KrylovOutcome {
                x: ComplexField::zeros(0),
                iterations: inner.cg_iterations,
                history: inner.cg_residual_history,
                converged: inner.converged && done,
            };
            let mut result = finish(grid, h, sol, krylov)?;
            result.outer_iterations = k;
            result.outer_history = outer_history;
            return Ok(result);
        }
    }
    unreachable!("outer loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnSource;
    use crate::grid::indicator_mask;
    use crate::sampling::{stream_rng, ModeBasis};

    fn setup(n: usize, m: usize) -> (Grid, Propagator, Mask, Mask) {
        let g = Grid::new(1.0, n, 0.5, m).unwrap();
        let p = Propagator::new(&g).unwrap();
        let omega = indicator_mask(&g, 0.1, 0.45).unwrap();
        let obs = indicator_mask(&g, 0.3, 0.7).unwrap();
        (g, p, omega, obs)
    }

    fn pulse(g: &Grid, amp: f64) -> FnSource<impl Fn(f64, f64) -> Complex64 + Sync> {
        FnSource::new(g, move |_, x| {
            Complex64::new(amp * (-((x - 0.85) / 0.05).powi(2)).exp(), 0.0)
        })
    }

    #[test]
    fn zero_inputs() {
        let (g, p, omega, obs) = setup(24, 32);
        let map = ControlMap::new(&p, &omega, &obs).unwrap();
        assert!(map
            .apply(&HalfStepField::zeros(&g))
            .unwrap()
            .iter()
            .all(|z| *z == ZERO));
        assert_eq!(map.adjoint(&ComplexField::zeros(24)).unwrap().norm(), 0.0);
        assert!(map
            .gramian(&ComplexField::zeros(24), &vec![1.0; 32], 0.1)
            .unwrap()
            .iter()
            .all(|z| *z == ZERO));
    }

    #[test]
    fn control_map_is_linear_and_masked() {
        let (g, p, omega, obs) = setup(24, 32);
        let basis = ModeBasis::new(&g);
        let mut rng = stream_rng(5, 0);
        let h1 = basis.random_source(&mut rng, 1.0);
        let h2 = basis.random_source(&mut rng, 1.0);
        let map = ControlMap::new(&p, &omega, &obs).unwrap();
        let (a, b) = (Complex64::new(0.7, -1.2), Complex64::new(-0.4, 0.3));
        let mut comb = h1.scaled(a);
        comb.axpy(b, &h2);
        let lhs = map.apply(&comb).unwrap();
        let mut rhs = map.apply(&h1).unwrap().scaled(a);
        rhs.axpy(b, &map.apply(&h2).unwrap());
        let diff: Vec<Complex64> = lhs.iter().zip(rhs.iter()).map(|(x, y)| x - y).collect();
        assert!(l2_norm(&g, &diff).unwrap() <= 1e-11 * l2_norm(&g, &lhs).unwrap());
        assert_eq!(
            map.apply(&h1).unwrap(),
            map.apply(&h1.masked(&omega)).unwrap()
        );
        assert!(map
            .adjoint(&basis.random_unit(&mut rng))
            .unwrap()
            .supported_in(&omega));
    }

    #[test]
    fn adjoint_identity() {
        let (g, p, omega, obs) = setup(32, 48);
        let basis = ModeBasis::new(&g);
        let map = ControlMap::new(&p, &omega, &obs).unwrap();
        for k in 0..20 {
            let mut rng = stream_rng(17, k);
            let h = basis.random_source(&mut rng, 1.0).masked(&omega);
            let q = basis.random_unit(&mut rng);
            let lhs = l2_inner(&g, &map.apply(&h).unwrap(), &q).unwrap();
            let rhs = h.inner(&map.adjoint(&q).unwrap());
            assert!((lhs - rhs).norm() <= 1e-10 * h.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gramian_is_hermitian_and_coercive_in_both_modes() {
        let (g, p, omega, obs) = setup(32, 48);
        let basis = ModeBasis::new(&g);
        let params = WeightParams::with_defaults(8.0 * 0.75, &g).unwrap();
        for spec in [
            ControlSpec::plain(1e-3),
            ControlSpec::weighted(1e-3, params),
        ] {
            for k in 0..5 {
                let mut rng = stream_rng(33, k);
                let a = basis.random_unit(&mut rng);
                let b = basis.random_unit(&mut rng);
                let la = gramian_apply(&p, &a, &omega, &obs, &spec).unwrap();
                let lb = gramian_apply(&p, &b, &omega, &obs, &spec).unwrap();
                let (ab, ba) = (
                    l2_inner(&g, &la, &b).unwrap(),
                    l2_inner(&g, &a, &lb).unwrap(),
                );
                assert!((ab.re - ba.re).abs() <= 1e-10 * ab.norm().max(1.0));
                assert!(l2_inner(&g, &la, &a).unwrap().re >= spec.epsilon * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn weighted_control_vanishes_near_start() {
        let (g, _, _, _) = setup(16, 64);
        let spec = ControlSpec::weighted(1e-3, WeightParams::with_defaults(6.0, &g).unwrap());
        let w = control_weight(&g, &spec).unwrap();
        assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(w[0] < 1e-12);
        assert_eq!(w.iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(control_weight(&g, &ControlSpec::plain(1.0))
            .unwrap()
            .iter()
            .all(|x| *x == 1.0));
    }

    #[test]
    fn spec_validation() {
        assert!(ControlSpec::plain(0.0).validate().is_err());
        assert!(ControlSpec {
            cg_tol: 1.0,
            ..ControlSpec::plain(1.0)
        }
        .validate()
        .is_err());
        assert!(ControlSpec {
            cg_maxit: 0,
            ..ControlSpec::plain(1.0)
        }
        .validate()
        .is_err());
        assert!(ControlSpec {
            mode: ControlMode::CarlemanWeighted,
            ..ControlSpec::plain(1.0)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn conjugate_residual_on_diagonal_system() {
        let g = Grid::new(1.0, 9, 1.0, 10).unwrap();
        let d: Vec<f64> = (1..=9).map(|k| k as f64).collect();
        let b = ComplexField((0..9).map(|k| Complex64::new(1.0, k as f64)).collect());
        let out = conjugate_residual(&g, &b, 1e-12, 50, |x| {
            Ok(ComplexField(x.iter().zip(&d).map(|(z, s)| z * s).collect()))
        })
        .unwrap();
        assert!(out.converged && out.iterations <= 9);
        for (k, z) in out.x.iter().enumerate() {
            assert!((z - b[k] / d[k]).norm() < 1e-10);
        }
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn trivial_hum() {
        let (g, p, omega, obs) = setup(24, 32);
        let prob = CascadeProblem::new(&g, omega, obs).unwrap();
        let r = hum_solve(&p, &prob, &ControlSpec::plain(1e-4)).unwrap();
        assert_eq!(r.h.norm(), 0.0);
        assert_eq!(r.v0_norm, 0.0);
        assert_eq!(r.cg_iterations, 0);
        let nl = nonlinear_insensitize(
            &p,
            &prob.with_zeta(Complex64::new(1.0, 0.0)),
            &ControlSpec::plain(1e-4),
            &OuterSettings::default(),
        )
        .unwrap();
        assert_eq!(nl.h.norm(), 0.0);
    }

    #[test]
    fn hum_reduces_companion_and_respects_support() {
        let (g, p, omega, obs) = setup(32, 64);
        let src = pulse(&g, 1.0);
        let prob = CascadeProblem::new(&g, omega.clone(), obs)
            .unwrap()
            .with_f0(&src);
        let free = l2_norm(&g, &solve_cascade_linear(&p, &prob).unwrap().v0).unwrap();
        let specs: Vec<ControlSpec> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|&e| ControlSpec::plain(e))
            .collect();
        let results: Vec<ControlResult> = control_sweep(&p, &prob, &specs)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        let mut last = free;
        for r in &results {
            assert!(r.converged);
            assert!(r.v0_norm < last);
            assert!(r.h.supported_in(&omega));
            assert!((r.j_insensitivity_bound - r.v0_norm).abs() <= 1e-12 * r.v0_norm.max(1e-300));
            for w in r.cg_residual_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            last = r.v0_norm;
        }
        // superposition
        let r = &results[1];
        let full = solve_cascade_linear(&p, &prob.clone().with_control(&r.h))
            .unwrap()
            .v0;
        let mut sup = solve_cascade_linear(&p, &prob).unwrap().v0;
        sup.axpy(
            Complex64::new(1.0, 0.0),
            &control_to_final(&p, &r.h, &prob.omega, &prob.obs).unwrap(),
        );
        let d: Vec<Complex64> = full.iter().zip(sup.iter()).map(|(a, b)| a - b).collect();
        assert!(l2_norm(&g, &d).unwrap() <= 1e-10 * free);
        // large penalty
        let big = hum_solve(&p, &prob, &ControlSpec::plain(1e8)).unwrap();
        assert!(big.h.norm() < 1e-6);
        assert!((big.v0_norm - free).abs() < 1e-6 * free);
    }

    #[test]
    fn frozen_sources_reproduce_nonlinear_cascade() {
        let (g, p, omega, obs) = setup(24, 48);
        let basis = ModeBasis::new(&g);
        let u0 = basis
            .random_low_mode(&mut stream_rng(2, 0))
            .scaled(Complex64::new(0.3, 0.0));
        let zeta = Complex64::new(1.0, 0.5);
        let prob = CascadeProblem::new(&g, omega, obs)
            .unwrap()
            .with_u0(u0)
            .unwrap()
            .with_zeta(zeta);
        let nl = solve_cascade_nonlinear(&p, &prob).unwrap();
        let (su, sv) = frozen_nonlinear_sources(&nl.u, &nl.v, zeta).unwrap();
        let mut lin = prob.clone().with_zeta(ZERO);
        lin.f0.axpy(Complex64::new(1.0, 0.0), &su);
        lin.f1.axpy(Complex64::new(1.0, 0.0), &sv);
        let l = solve_cascade_linear(&p, &lin).unwrap();
        assert!(l.u.max_abs_diff(&nl.u) < 1e-9);
        assert!(l.v.max_abs_diff(&nl.v) < 1e-9);
    }

    #[test]
    fn nonlinear_zero_zeta_is_hum() {
        let (g, p, omega, obs) = setup(24, 32);
        let src = pulse(&g, 1.0);
        let prob = CascadeProblem::new(&g, omega, obs).unwrap().with_f0(&src);
        let a = hum_solve(&p, &prob, &ControlSpec::plain(1e-3)).unwrap();
        let b = nonlinear_insensitize(
            &p,
            &prob,
            &ControlSpec::plain(1e-3),
            &OuterSettings::default(),
        )
        .unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.v0, b.v0);
        assert_eq!(b.outer_iterations, 1);
    }

    #[test]
    fn smallness_cap() {
        let (g, p, omega, obs) = setup(24, 32);
        let src = pulse(&g, 1.0);
        let prob = CascadeProblem::new(&g, omega, obs)
            .unwrap()
            .with_f0(&src)
            .with_zeta(Complex64::new(1.0, 0.0));
        let cap = SmallnessCap {
            c: 0.1,
            delta: 1e-6,
        };
        let outer = OuterSettings {
            cap: Some(cap),
            ..OuterSettings::default()
        };
        assert!(matches!(
            nonlinear_insensitize(&p, &prob, &ControlSpec::plain(1e-3), &outer),
            Err(Error::Config(_))
        ));
        assert_eq!(cap.log_norm(&HalfStepField::zeros(&g)), f64::NEG_INFINITY);
    }
}
