//! Space–time grid, clamped difference operators and indicator masks.
//!
//! Unknowns live on the `N` interior nodes `x_i = i·dx`, `i = 1..=N`, with
//! `dx = L/(N+1)`. Boundary values are eliminated: `u(0) = u(L) = 0` always,
//! and the fourth-derivative stencil additionally uses the reflected ghost
//! `u_{-1} = u_1` (resp. `u_{N+2} = u_N`) that encodes `u_x = 0`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible number of interior nodes and of time steps.
pub const MIN_POINTS: usize = 8;

/// Uniform discretization of `(0,L)×(0,T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    length: f64,
    nodes: usize,
    horizon: f64,
    steps: usize,
}

impl Grid {
    pub fn new(length: f64, nodes: usize, horizon: f64, steps: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Config(format!(
                "domain length must be positive, got {length}"
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        if nodes < MIN_POINTS {
            return Err(Error::Config(format!(
                "need at least {MIN_POINTS} interior nodes, got {nodes}"
            )));
        }
        if steps < MIN_POINTS {
            return Err(Error::Config(format!(
                "need at least {MIN_POINTS} time steps, got {steps}"
            )));
        }
        Ok(Self {
            length,
            nodes,
            horizon,
            steps,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of interior nodes `N`.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of time steps `M`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.nodes + 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Coordinate of the interior node with zero-based index `i` (node `i+1`).
    pub fn x(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.length / (self.nodes + 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.x(i)).collect()
    }

    /// Time level `t_n = n·dt`.
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.horizon / self.steps as f64
    }

    /// Half-step time `t_{n+1/2}`.
    pub fn t_half(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.horizon / self.steps as f64
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len == self.nodes {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                expected: self.nodes,
                got: len,
            })
        }
    }
}

/// Square real banded matrix stored row-wise with `2·bandwidth + 1` slots
/// per row. Slot `j - i + bandwidth` of row `i` holds entry `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedOperator {
    rows: usize,
    bandwidth: usize,
    entries: Vec<f64>,
}

impl BandedOperator {
    pub fn zeros(rows: usize, bandwidth: usize) -> Self {
        Self {
            rows,
            bandwidth,
            entries: vec![0.0; rows * (2 * bandwidth + 1)],
        }
    }

    /// Operator with a constant symmetric stencil `[c_0, c_1, ..., c_p]`
    /// (`c_0` on the diagonal) truncated at the boundary.
    fn toeplitz(rows: usize, stencil: &[f64]) -> Self {
        let p = stencil.len() - 1;
        let mut op = Self::zeros(rows, p);
        for i in 0..rows {
            for (k, &c) in stencil.iter().enumerate() {
                if i + k < rows {
                    op.set(i, i + k, c);
                    op.set(i + k, i, c);
                }
            }
        }
        op
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let w = 2 * self.bandwidth + 1;
        if i >= self.rows || j >= self.rows || i.abs_diff(j) > self.bandwidth {
            None
        } else {
            Some(i * w + j + self.bandwidth - i)
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.entries[s])
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("({i},{j}) outside band of width {}", self.bandwidth));
        self.entries[s] = value;
    }

    /// Column range touched by row `i`.
    pub fn row_span(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.bandwidth)..(i + self.bandwidth + 1).min(self.rows)
    }

    /// `alpha·self + beta·other`, with the wider of the two bandwidths.
    pub fn combine(&self, alpha: f64, other: &BandedOperator, beta: f64) -> BandedOperator {
        assert_eq!(self.rows, other.rows, "operators of different size");
        let mut out = Self::zeros(self.rows, self.bandwidth.max(other.bandwidth));
        for i in 0..self.rows {
            for j in out.row_span(i) {
                out.set(i, j, alpha * self.entry(i, j) + beta * other.entry(i, j));
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> BandedOperator {
        Self {
            entries: self.entries.iter().map(|e| c * e).collect(),
            ..*self
        }
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.rows];
        self.apply_into(v, &mut out);
        out
    }

    pub fn apply_into(&self, v: &[Complex64], out: &mut [Complex64]) {
        assert_eq!(v.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row_span(i).map(|j| v[j] * self.entry(i, j)).sum();
        }
    }

    pub fn apply_real(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        (0..self.rows)
            .map(|i| self.row_span(i).map(|j| v[j] * self.entry(i, j)).sum())
            .collect()
    }

    /// `max |A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in self.row_span(i) {
                worst = worst.max((self.entry(i, j) - self.entry(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.rows, |i, j| self.entry(i, j))
    }
}

/// Clamped `∂⁴_x`: the five-point stencil with `u_0 = 0` and the reflected
/// ghost `u_{-1} = u_1`, which puts `7` instead of `6` on the first and last
/// diagonal entries.
pub fn build_clamped_fourth_derivative(grid: &Grid) -> BandedOperator {
    let h4 = grid.dx().powi(4);
    let n = grid.nodes();
    let mut op = BandedOperator::toeplitz(n, &[6.0 / h4, -4.0 / h4, 1.0 / h4]);
    op.set(0, 0, 7.0 / h4);
    op.set(n - 1, n - 1, 7.0 / h4);
    op
}

/// Dirichlet `∂²_x`: the standard three-point stencil.
pub fn build_dirichlet_second_derivative(grid: &Grid) -> BandedOperator {
    let h2 = grid.dx().powi(2);
    BandedOperator::toeplitz(grid.nodes(), &[-2.0 / h2, 1.0 / h2])
}

/// Derivatives of a clamped field up to third order, all on interior nodes.
///
/// First derivative: centered differences with zero boundary values.
/// Second: the Dirichlet stencil. Third: centered differences of the second
/// derivative, whose boundary values `u_xx(0) = 2u_1/dx²`, `u_xx(L) = 2u_N/dx²`
/// come from the clamped ghost reflection.
pub fn clamped_derivatives(grid: &Grid, u: &[Complex64]) -> [Vec<Complex64>; 3] {
    let n = grid.nodes();
    let dx = grid.dx();
    let zero = Complex64::new(0.0, 0.0);
    let at = |v: &[Complex64], k: isize, left: Complex64, right: Complex64| -> Complex64 {
        if k < 0 {
            left
        } else if k as usize >= n {
            right
        } else {
            v[k as usize]
        }
    };
    let first: Vec<Complex64> = (0..n as isize)
        .map(|i| (at(u, i + 1, zero, zero) - at(u, i - 1, zero, zero)) / (2.0 * dx))
        .collect();
    let second: Vec<Complex64> = (0..n as isize)
        .map(|i| {
            (at(u, i + 1, zero, zero) - 2.0 * u[i as usize] + at(u, i - 1, zero, zero)) / (dx * dx)
        })
        .collect();
    let left = 2.0 * u[0] / (dx * dx);
    let right = 2.0 * u[n - 1] / (dx * dx);
    let third: Vec<Complex64> = (0..n as isize)
        .map(|i| (at(&second, i + 1, left, right) - at(&second, i - 1, left, right)) / (2.0 * dx))
        .collect();
    [first, second, third]
}

/// One-sided second-order traces `(u_xx(L), u_xxx(L))` using
/// `u(L) = u_x(L) = 0` and the three nodes nearest to `x = L`.
pub fn right_boundary_traces(grid: &Grid, u: &[Complex64]) -> (Complex64, Complex64) {
    let n = grid.nodes();
    let dx = grid.dx();
    let (u1, u2, u3) = (u[n - 1], u[n - 2], u[n - 3]);
    let uxx = (108.0 * u1 - 27.0 * u2 + 4.0 * u3) / (18.0 * dx * dx);
    let uxxx = (15.0 * u1 - 6.0 * u2 + u3) / (dx * dx * dx);
    (uxx, uxxx)
}

/// Per-node indicator of a subinterval of `(0,L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    lo: f64,
    hi: f64,
    weights: Vec<f64>,
}

impl Mask {
    /// Mask that is identically zero (no node selected).
    pub fn empty(grid: &Grid) -> Self {
        Self {
            lo: 0.0,
            hi: 0.0,
            weights: vec![0.0; grid.nodes()],
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    pub fn count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.weights
            .iter()
            .zip(&other.weights)
            .any(|(&a, &b)| a > 0.0 && b > 0.0)
    }

    /// `out_i = mask_i · v_i`.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        v.iter().zip(&self.weights).map(|(&z, &w)| z * w).collect()
    }

    pub fn apply_in_place(&self, v: &mut [Complex64]) {
        for (z, &w) in v.iter_mut().zip(&self.weights) {
            *z *= w;
        }
    }
}

/// Indicator of the open interval `(a,b)`: 1 at nodes strictly inside, 0
/// elsewhere.
pub fn indicator_mask(grid: &Grid, a: f64, b: f64) -> Result<Mask> {
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(Error::Config(format!(
            "mask interval ({a}, {b}) is empty or invalid"
        )));
    }
    if a < 0.0 || b > grid.length() {
        return Err(Error::Config(format!(
            "mask interval ({a}, {b}) is not contained in [0, {}]",
            grid.length()
        )));
    }
    let weights = (0..grid.nodes())
        .map(|i| {
            let x = grid.x(i);
            if x > a && x < b {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(Mask {
        lo: a,
        hi: b,
        weights,
    })
}

/// Control/observation pair used by the cascade; rejects `ω ∩ O = ∅`.
pub fn check_overlap(omega: &Mask, obs: &Mask) -> Result<()> {
    if omega.intersects(obs) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "control region {:?} and observation region {:?} share no grid node",
            omega.interval(),
            obs.interval()
        )))
    }
}
