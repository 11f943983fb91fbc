//! Manufactured-solution refinement study for the time stepper.
//!
//! The exact solution is `u*(x,t) = a·e^{it}·sin²(πx/L)`, which satisfies the
//! clamped conditions; the forcing is `i u*_t + u*_xx − u*_xxxx − ζ|u*|²u*`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{l2_norm, ComplexField, FnSource};
use crate::grid::Grid;
use crate::solver::Propagator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manufactured {
    pub length: f64,
    pub amplitude: f64,
    pub zeta: Complex64,
}

impl Manufactured {
    pub fn exact(&self, t: f64, x: f64) -> Complex64 {
        let s = (PI * x / self.length).sin();
        Complex64::from_polar(self.amplitude * s * s, t)
    }

    pub fn forcing(&self, t: f64, x: f64) -> Complex64 {
        let k = 2.0 * PI / self.length;
        let c = (k * x).cos();
        let w = 0.5 * self.amplitude * (1.0 - c);
        let wxx = 0.5 * self.amplitude * k * k * c;
        let wxxxx = -0.5 * self.amplitude * k.powi(4) * c;
        // i·(i w) + w_xx − w_xxxx − ζ w³, all times e^{it}
        Complex64::from_polar(1.0, t)
            * (Complex64::new(-w + wxx - wxxxx, 0.0) - self.zeta * w * w * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub nodes: usize,
    pub steps: usize,
    pub dx: f64,
    pub dt: f64,
    /// `max_n ‖u^n − u*(t_n)‖` in the discrete `L²` norm.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub levels: Vec<RefinementLevel>,
    /// `ln(e_k/e_{k+1}) / ln(dx_k/dx_{k+1})` for consecutive levels.
    pub orders: Vec<f64>,
}

/// Grids must share the domain and strictly refine in both `N` and `M`.
pub fn check_refinement(levels: &[(usize, usize)]) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::Config(
            "a refinement study needs at least two grids".into(),
        ));
    }
    for w in levels.windows(2) {
        let ((n0, m0), (n1, m1)) = (w[0], w[1]);
        if n1 <= n0 || m1 <= m0 {
            return Err(Error::Config(format!(
                "grids must refine in both space and time: ({n0},{m0}) is followed by ({n1},{m1})"
            )));
        }
    }
    Ok(())
}

pub fn discretization_error(grid: &Grid, sol: &Manufactured) -> Result<f64> {
    let prop = Propagator::new(grid)?;
    let u0 = ComplexField::from_fn(grid, |x| sol.exact(0.0, x));
    let source = FnSource::new(grid, |t, x| sol.forcing(t, x));
    let traj = prop.solve_forward_nonlinear(&u0, &source, sol.zeta)?;
    let mut worst: f64 = 0.0;
    for n in 0..=grid.steps() {
        let t = grid.t(n);
        let diff: Vec<Complex64> = traj
            .at(n)
            .iter()
            .enumerate()
            .map(|(i, z)| z - sol.exact(t, grid.x(i)))
            .collect();
        worst = worst.max(l2_norm(grid, &diff)?);
    }
    Ok(worst)
}

pub fn convergence_study(
    horizon: f64,
    levels: &[(usize, usize)],
    sol: &Manufactured,
) -> Result<ConvergenceStudy> {
    check_refinement(levels)?;
    let levels: Vec<RefinementLevel> = levels
        .par_iter()
        .map(|&(nodes, steps)| {
            let grid = Grid::new(sol.length, nodes, horizon, steps)?;
            Ok(RefinementLevel {
                nodes,
                steps,
                dx: grid.dx(),
                dt: grid.dt(),
                error: discretization_error(&grid, sol)?,
            })
        })
        .collect::<Result<_>>()?;
    let orders = levels
        .windows(2)
        .map(|w| (w[0].error / w[1].error).ln() / (w[0].dx / w[1].dx).ln())
        .collect();
    Ok(ConvergenceStudy { levels, orders })
}
