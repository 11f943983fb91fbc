//! Crank–Nicolson propagation of `i u_t + H u = f` with `H` real symmetric.
//!
//! For the fourth-order Schrödinger operator `H = D2 − D4`. The forward
//! step solves `(I − iαH) u⁺ = (I + iαH) u⁻ − i·dt·f` with `α = dt/2`. The
//! backward step inverts this relation for `u⁻`; its homogeneous part is
//! the inverse Cayley transform, which equals the conjugate transpose of
//! the forward one, so backward sweeps are exact discrete adjoints of
//! forward sweeps. Both directions share one banded factorization: the
//! backward matrix is the complex conjugate of the forward one.

use num_complex::Complex64;

use crate::banded::BandedLu;
use crate::error::{Error, Result};
use crate::field::{raw_norm_sqr, ComplexField, SourceSampler, Trajectory, ZERO};
use crate::grid::{
    build_clamped_fourth_derivative, build_dirichlet_second_derivative, BandedOperator, Grid,
};

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Spatial operator `H` in `i u_t + H u = f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// `u_xx − u_xxxx`, the mixed-dispersion operator.
    MixedDispersion,
    /// `u_xxxx` alone, i.e. `P u = i u_t + u_xxxx`.
    FourthOrderOnly,
}

/// Stopping rule of the per-step fixed-point iteration for the cubic terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Factorized Crank–Nicolson stepper on a fixed grid. Immutable once built.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: Grid,
    h: BandedOperator,
    // (dt/2)·H, entry for entry as it sits in the factorization
    half_h: BandedOperator,
    lu: BandedLu,
    picard: PicardSettings,
}

impl Propagator {
    pub fn new(grid: &Grid) -> Result<Self> {
        Self::with_generator(grid, Generator::MixedDispersion)
    }

    pub fn with_generator(grid: &Grid, generator: Generator) -> Result<Self> {
        let d4 = build_clamped_fourth_derivative(grid);
        let h = match generator {
            Generator::MixedDispersion => {
                build_dirichlet_second_derivative(grid).combine(1.0, &d4, -1.0)
            }
            Generator::FourthOrderOnly => d4,
        };
        let alpha = 0.5 * grid.dt();
        let lu =
            BandedLu::factor_shifted(&h, Complex64::new(1.0, 0.0), Complex64::new(0.0, -alpha))?;
        Ok(Self {
            grid: *grid,
            half_h: h.scaled(alpha),
            h,
            lu,
            picard: PicardSettings::default(),
        })
    }

    pub fn with_picard(mut self, picard: PicardSettings) -> Self {
        self.picard = picard;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn operator(&self) -> &BandedOperator {
        &self.h
    }

    pub fn picard(&self) -> PicardSettings {
        self.picard
    }

    /// Forward: `(I − iαH)⁻¹[(I + iαH) u⁻ − i dt f]`.
    /// Backward: `(I + iαH)⁻¹[(I − iαH) u⁺ + i dt f]`.
    ///
    /// Evaluated as `(I ∓ iαH)⁻¹(2u ∓ i dt f) − u`, with one refinement
    /// step on a residual accumulated in compensated arithmetic.
    fn step_raw(
        &self,
        state: &[Complex64],
        source: &[Complex64],
        direction: Direction,
    ) -> Vec<Complex64> {
        let dt = self.grid.dt();
        let sign = match direction {
            Direction::Forward => -1.0,
            Direction::Backward => 1.0,
        };
        let mut w: Vec<Complex64> = state
            .iter()
            .zip(source)
            .map(|(u, f)| 2.0 * u + I * (sign * dt) * f)
            .collect();
        let solve = |b: &mut [Complex64]| match direction {
            Direction::Forward => self.lu.solve_in_place(b),
            Direction::Backward => self.lu.solve_conj_in_place(b),
        };
        let rhs = w.clone();
        solve(&mut w);
        let mut r = self.residual(&rhs, &w, sign);
        solve(&mut r);
        for ((x, d), u) in w.iter_mut().zip(&r).zip(state) {
            *x += d;
            *x -= u;
        }
        w
    }

    /// `b − (I + iσB)w` with `B = αH`, each component as a compensated dot
    /// product.
    fn residual(&self, b: &[Complex64], w: &[Complex64], sigma: f64) -> Vec<Complex64> {
        let op = &self.half_h;
        (0..w.len())
            .map(|i| {
                let (mut re, mut im) = (Dot2::new(), Dot2::new());
                re.add(b[i].re);
                re.add(-w[i].re);
                im.add(b[i].im);
                im.add(-w[i].im);
                for j in op.row_span(i) {
                    let c = sigma * op.entry(i, j);
                    re.add_product(c, w[j].im);
                    im.add_product(-c, w[j].re);
                }
                Complex64::new(re.value(), im.value())
            })
            .collect()
    }

    /// One Crank–Nicolson step with the source value at the half step.
    pub fn cn_step(
        &self,
        state: &ComplexField,
        source: &ComplexField,
        direction: Direction,
    ) -> Result<ComplexField> {
        self.grid.check_len(state.len())?;
        self.grid.check_len(source.len())?;
        let out = ComplexField(self.step_raw(state, source, direction));
        if !out.is_finite() {
            return Err(Error::SingularSystem {
                index: 0,
                magnitude: f64::NAN,
            });
        }
        Ok(out)
    }

    fn sample(&self, source: &dyn SourceSampler, n: usize, buf: &mut Vec<Complex64>) {
        buf.clear();
        buf.resize(self.grid.nodes(), ZERO);
        if !source.is_zero() {
            source.add_at(n, self.grid.t_half(n), buf);
        }
    }

    fn finish(&self, snaps: Vec<ComplexField>) -> Result<Trajectory> {
        let traj = Trajectory::from_snapshots(&self.grid, snaps);
        if traj.is_finite() {
            Ok(traj)
        } else {
            Err(Error::NonConvergence {
                stage: "time stepping",
                iterations: 0,
                residual: f64::NAN,
            })
        }
    }

    /// Solves forward from `u(0) = u0`.
    pub fn solve_forward(
        &self,
        u0: &ComplexField,
        source: &dyn SourceSampler,
    ) -> Result<Trajectory> {
        self.grid.check_len(u0.len())?;
        let m = self.grid.steps();
        let mut snaps = Vec::with_capacity(m + 1);
        snaps.push(u0.clone());
        let mut f = Vec::new();
        for n in 0..m {
            self.sample(source, n, &mut f);
            let next = self.step_raw(&snaps[n], &f, Direction::Forward);
            snaps.push(ComplexField(next));
        }
        self.finish(snaps)
    }

    /// Solves backward from `v(T) = v_t`.
    pub fn solve_backward(
        &self,
        v_t: &ComplexField,
        source: &dyn SourceSampler,
    ) -> Result<Trajectory> {
        self.grid.check_len(v_t.len())?;
        let m = self.grid.steps();
        let mut snaps = vec![ComplexField::default(); m + 1];
        snaps[m] = v_t.clone();
        let mut f = Vec::new();
        for n in (0..m).rev() {
            self.sample(source, n, &mut f);
            snaps[n] = ComplexField(self.step_raw(&snaps[n + 1], &f, Direction::Backward));
        }
        self.finish(snaps)
    }

    /// Forward solve of `i u_t + H u − ζ|u|²u = f`.
    ///
    /// The cubic term is averaged between the two time levels and the new
    /// level is found by fixed-point iteration on the factorized linear
    /// step. With `ζ = 0` this is exactly [`Propagator::solve_forward`].
    pub fn solve_forward_nonlinear(
        &self,
        u0: &ComplexField,
        source: &dyn SourceSampler,
        zeta: Complex64,
    ) -> Result<Trajectory> {
        if zeta == ZERO {
            return self.solve_forward(u0, source);
        }
        self.grid.check_len(u0.len())?;
        let m = self.grid.steps();
        let mut snaps = Vec::with_capacity(m + 1);
        snaps.push(u0.clone());
        let mut f = Vec::new();
        for n in 0..m {
            self.sample(source, n, &mut f);
            let prev = &snaps[n];
            let prev_cubic: Vec<Complex64> = prev.iter().map(|z| z * z.norm_sqr()).collect();
            let next = self.picard_iterate(prev, Direction::Forward, |iterate, rhs| {
                for i in 0..rhs.len() {
                    let cubic = iterate[i] * iterate[i].norm_sqr();
                    rhs[i] = f[i] + zeta * 0.5 * (prev_cubic[i] + cubic);
                }
            })?;
            snaps.push(ComplexField(next));
        }
        self.finish(snaps)
    }

    /// Backward solve of the adjoint-type equation
    /// `i v_t + H v − conj(ζ)·(conj(u)²·conj(v) + 2|u|² v) = g`
    /// with `u` a given trajectory. The zero-order terms are averaged
    /// between levels and resolved by fixed-point iteration, so each step
    /// reuses the linear factorization despite the `conj(v)` coupling.
    pub fn solve_backward_linearized(
        &self,
        v_t: &ComplexField,
        source: &dyn SourceSampler,
        u: &Trajectory,
        zeta: Complex64,
    ) -> Result<Trajectory> {
        if zeta == ZERO {
            return self.solve_backward(v_t, source);
        }
        self.grid.check_len(v_t.len())?;
        let m = self.grid.steps();
        let zc = zeta.conj();
        let coupling = |uu: &[Complex64], vv: &[Complex64], i: usize| -> Complex64 {
            let ub = uu[i].conj();
            zc * (ub * ub * vv[i].conj() + 2.0 * uu[i].norm_sqr() * vv[i])
        };
        let mut snaps = vec![ComplexField::default(); m + 1];
        snaps[m] = v_t.clone();
        let mut f = Vec::new();
        for n in (0..m).rev() {
            self.sample(source, n, &mut f);
            let upper = &snaps[n + 1];
            let (u_lo, u_hi) = (u.at(n), u.at(n + 1));
            let upper_terms: Vec<Complex64> =
                (0..f.len()).map(|i| coupling(u_hi, upper, i)).collect();
            let next = self.picard_iterate(upper, Direction::Backward, |iterate, rhs| {
                for i in 0..rhs.len() {
                    rhs[i] = f[i] + 0.5 * (upper_terms[i] + coupling(u_lo, iterate, i));
                }
            })?;
            snaps[n] = ComplexField(next);
        }
        self.finish(snaps)
    }

    /// Fixed-point loop for one step: `source_of(iterate, out)` fills the
    /// half-step source given the current guess for the new level.
    fn picard_iterate(
        &self,
        start: &[Complex64],
        direction: Direction,
        mut source_of: impl FnMut(&[Complex64], &mut [Complex64]),
    ) -> Result<Vec<Complex64>> {
        let mut iterate = start.to_vec();
        let mut src = vec![ZERO; start.len()];
        let mut residual = f64::INFINITY;
        for _ in 0..self.picard.max_iter {
            source_of(&iterate, &mut src);
            let next = self.step_raw(start, &src, direction);
            let diff: f64 = next
                .iter()
                .zip(&iterate)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            let size = raw_norm_sqr(&next).sqrt();
            iterate = next;
            residual = if size > 0.0 { diff / size } else { diff };
            if !residual.is_finite() {
                break;
            }
            if residual < self.picard.tol {
                return Ok(iterate);
            }
        }
        Err(Error::NonConvergence {
            stage: "per-step Picard iteration",
            iterations: self.picard.max_iter,
            residual,
        })
    }
}

/// Sum of terms and exact products carried with a running error term.
struct Dot2 {
    sum: f64,
    err: f64,
}

impl Dot2 {
    fn new() -> Self {
        Self { sum: 0.0, err: 0.0 }
    }

    fn add(&mut self, x: f64) {
        let s = self.sum + x;
        let z = s - self.sum;
        self.err += (self.sum - (s - z)) + (x - z);
        self.sum = s;
    }

    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.err += a.mul_add(b, -p);
        self.add(p);
    }

    fn value(&self) -> f64 {
        self.sum + self.err
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{l2_inner, FnSource, ZeroSource};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};

    fn random_field(rng: &mut impl Rng, n: usize) -> ComplexField {
        ComplexField(
            (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn zero_in_zero_out() {
        let g = Grid::new(1.0, 16, 1.0, 16).unwrap();
        let p = Propagator::new(&g).unwrap();
        let z = ComplexField::zeros(16);
        for d in [Direction::Forward, Direction::Backward] {
            assert!(p.cn_step(&z, &z, d).unwrap().iter().all(|v| *v == ZERO));
        }
        let t = p.solve_forward(&z, &ZeroSource).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        let t = p.solve_backward(&z, &ZeroSource).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        let t = p
            .solve_forward_nonlinear(&z, &ZeroSource, Complex64::new(3.0, 0.0))
            .unwrap();
        assert_eq!(t.max_abs(), 0.0);
    }

    #[test]
    fn smooth_data_keeps_norm_over_long_runs() {
        let g = Grid::new(1.0, 128, 1.0, 1024).unwrap();
        let p = Propagator::new(&g).unwrap();
        let u0 = ComplexField::from_fn(&g, |x| {
            Complex64::new((-(x - 0.5) * (x - 0.5) / 0.02).exp(), 0.0)
        });
        for traj in [
            p.solve_forward(&u0, &ZeroSource).unwrap(),
            p.solve_backward(&u0, &ZeroSource).unwrap(),
        ] {
            let n = traj.norms();
            let n0 = n[0].max(n[1024]);
            let drift = n.iter().map(|v| (v - n0).abs()).fold(0.0, f64::max) / n0;
            assert!(drift <= 1e-11, "drift {drift:e}");
        }
    }

    #[test]
    fn single_step_is_unitary() {
        let g = Grid::new(1.0, 32, 1.0, 64).unwrap();
        let p = Propagator::new(&g).unwrap();
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(3);
        let z = ComplexField::zeros(32);
        for _ in 0..10 {
            let u = random_field(&mut rng, 32);
            let n0 = l2_inner(&g, &u, &u).unwrap().re.sqrt();
            for d in [Direction::Forward, Direction::Backward] {
                let v = p.cn_step(&u, &z, d).unwrap();
                let n1 = l2_inner(&g, &v, &v).unwrap().re.sqrt();
                assert!((n1 - n0).abs() <= 1e-12 * n0);
            }
        }
    }

    #[test]
    fn eigenvector_multiplier_matches_cayley_factor() {
        let g = Grid::new(1.0, 24, 0.5, 32).unwrap();
        let p = Propagator::new(&g).unwrap();
        let eig = SymmetricEigen::new(p.operator().to_dense());
        let k = (0..24)
            .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
            .unwrap();
        let mu = eig.eigenvalues[k];
        let w: ComplexField = eig
            .eigenvectors
            .column(k)
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect::<Vec<_>>()
            .into();
        let a = 0.5 * g.dt() * mu;
        let factor = (Complex64::new(1.0, a)) / Complex64::new(1.0, -a);
        let next = p
            .cn_step(&w, &ComplexField::zeros(24), Direction::Forward)
            .unwrap();
        for (x, y) in next.iter().zip(w.iter()) {
            assert!((x - factor * y).norm() <= 1e-12);
        }
        assert!((factor.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn backward_inverts_forward() {
        let g = Grid::new(1.0, 20, 1.0, 20).unwrap();
        let p = Propagator::new(&g).unwrap();
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(11);
        let u = random_field(&mut rng, 20);
        let f = random_field(&mut rng, 20);
        let up = p.cn_step(&u, &f, Direction::Forward).unwrap();
        let back = p.cn_step(&up, &f, Direction::Backward).unwrap();
        for (a, b) in back.iter().zip(u.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn nonlinear_with_zero_coupling_is_bitwise_linear() {
        let g = Grid::new(1.0, 16, 1.0, 32).unwrap();
        let p = Propagator::new(&g).unwrap();
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(5);
        let u0 = random_field(&mut rng, 16);
        let src = FnSource::new(&g, |t, x| Complex64::new(t * x, x));
        let a = p.solve_forward(&u0, &src).unwrap();
        let b = p.solve_forward_nonlinear(&u0, &src, ZERO).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonlinear_deviation_scales_cubically() {
        let g = Grid::new(1.0, 24, 0.2, 40).unwrap();
        let p = Propagator::new(&g).unwrap();
        let pi = std::f64::consts::PI;
        let shape = ComplexField::from_fn(&g, |x| Complex64::new((pi * x).sin().powi(2), 0.0));
        let zeta = Complex64::new(1.0, 0.0);
        let dev: Vec<f64> = [1e-3, 2e-3, 4e-3]
            .iter()
            .map(|&amp| {
                let u0 = shape.scaled(Complex64::new(amp, 0.0));
                let lin = p.solve_forward(&u0, &ZeroSource).unwrap();
                let nl = p.solve_forward_nonlinear(&u0, &ZeroSource, zeta).unwrap();
                lin.max_abs_diff(&nl)
            })
            .collect();
        for w in dev.windows(2) {
            let order = (w[1] / w[0]).log2();
            assert!((order - 3.0).abs() < 0.1, "order {order}");
        }
    }
}
