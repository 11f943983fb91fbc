//! Complex grid functions, trajectories and half-step source fields.

use std::ops::{Deref, DerefMut};

use num_complex::Complex64;

use crate::error::Result;
use crate::grid::{Grid, Mask};

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Complex values on the interior nodes at one time level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexField(pub Vec<Complex64>);

impl ComplexField {
    pub fn zeros(n: usize) -> Self {
        Self(vec![ZERO; n])
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64) -> Complex64) -> Self {
        Self(grid.xs().into_iter().map(f).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.is_finite())
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self(self.0.iter().map(|z| z * c).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `self += alpha·other`
    pub fn axpy(&mut self, alpha: Complex64, other: &[Complex64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }
}

impl Deref for ComplexField {
    type Target = [Complex64];
    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

impl DerefMut for ComplexField {
    fn deref_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }
}

impl From<Vec<Complex64>> for ComplexField {
    fn from(v: Vec<Complex64>) -> Self {
        Self(v)
    }
}

/// Discrete `L²(Ω)` inner product `dx·Σ a_i conj(b_i)`.
pub fn l2_inner(grid: &Grid, a: &[Complex64], b: &[Complex64]) -> Result<Complex64> {
    grid.check_len(a.len())?;
    grid.check_len(b.len())?;
    Ok(raw_inner(a, b) * grid.dx())
}

pub fn l2_norm(grid: &Grid, a: &[Complex64]) -> Result<f64> {
    Ok(l2_inner(grid, a, a)?.re.max(0.0).sqrt())
}

/// Unweighted `Σ a_i conj(b_i)`.
pub(crate) fn raw_inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub(crate) fn raw_norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Snapshots at `t_n = n·dt`, `n = 0..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Grid,
    snapshots: Vec<ComplexField>,
}

impl Trajectory {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            snapshots: vec![ComplexField::zeros(grid.nodes()); grid.steps() + 1],
        }
    }

    pub(crate) fn from_snapshots(grid: &Grid, snapshots: Vec<ComplexField>) -> Self {
        debug_assert_eq!(snapshots.len(), grid.steps() + 1);
        Self {
            grid: *grid,
            snapshots,
        }
    }

    /// Applies `f` to every snapshot.
    pub fn map_snapshots(&self, f: impl Fn(&ComplexField) -> ComplexField) -> Self {
        Self {
            grid: self.grid,
            snapshots: self.snapshots.iter().map(f).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn snapshots(&self) -> &[ComplexField] {
        &self.snapshots
    }

    pub fn at(&self, n: usize) -> &ComplexField {
        &self.snapshots[n]
    }

    pub fn first(&self) -> &ComplexField {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &ComplexField {
        &self.snapshots[self.snapshots.len() - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.snapshots.iter().all(ComplexField::is_finite)
    }

    /// `(u^n + u^{n+1})/2`, the value attached to `t_{n+1/2}`.
    pub fn half_average(&self, n: usize) -> ComplexField {
        ComplexField(
            self.snapshots[n]
                .iter()
                .zip(self.snapshots[n + 1].iter())
                .map(|(a, b)| (a + b) * 0.5)
                .collect(),
        )
    }

    /// Discrete `L²` norm at every time level.
    pub fn norms(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        self.snapshots
            .iter()
            .map(|s| (raw_norm_sqr(s) * dx).sqrt())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.snapshots
            .iter()
            .map(ComplexField::max_abs)
            .fold(0.0, f64::max)
    }

    /// Largest pointwise difference from another trajectory.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.snapshots
            .iter()
            .zip(&other.snapshots)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }
}

/// Right-hand side of the evolution, sampled at half-step times.
pub trait SourceSampler: Sync {
    /// Adds the source at `t = t_{n+1/2}` into `out`.
    fn add_at(&self, n: usize, t: f64, out: &mut [Complex64]);

    /// True when the sampler is known to vanish identically.
    fn is_zero(&self) -> bool {
        false
    }
}

impl<S: SourceSampler + ?Sized> SourceSampler for &S {
    fn add_at(&self, n: usize, t: f64, out: &mut [Complex64]) {
        (**self).add_at(n, t, out)
    }
    fn is_zero(&self) -> bool {
        (**self).is_zero()
    }
}

/// The zero source.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroSource;

impl SourceSampler for ZeroSource {
    fn add_at(&self, _: usize, _: f64, _: &mut [Complex64]) {}
    fn is_zero(&self) -> bool {
        true
    }
}

/// Source given by a closure `(t, x) -> value`.
pub struct FnSource<F> {
    xs: Vec<f64>,
    f: F,
}

impl<F: Fn(f64, f64) -> Complex64 + Sync> FnSource<F> {
    pub fn new(grid: &Grid, f: F) -> Self {
        Self { xs: grid.xs(), f }
    }
}

impl<F: Fn(f64, f64) -> Complex64 + Sync> SourceSampler for FnSource<F> {
    fn add_at(&self, _: usize, t: f64, out: &mut [Complex64]) {
        for (o, &x) in out.iter_mut().zip(&self.xs) {
            *o += (self.f)(t, x);
        }
    }
}

/// Sum of several samplers.
pub struct SourceSum<'a>(pub Vec<&'a dyn SourceSampler>);

impl SourceSampler for SourceSum<'_> {
    fn add_at(&self, n: usize, t: f64, out: &mut [Complex64]) {
        for s in &self.0 {
            s.add_at(n, t, out);
        }
    }
    fn is_zero(&self) -> bool {
        self.0.iter().all(|s| s.is_zero())
    }
}

/// `mask · inner`, e.g. `1_ω h`.
pub struct MaskedSource<'a, S: ?Sized> {
    pub mask: &'a Mask,
    pub inner: &'a S,
}

impl<S: SourceSampler + ?Sized> SourceSampler for MaskedSource<'_, S> {
    fn add_at(&self, n: usize, t: f64, out: &mut [Complex64]) {
        let mut tmp = vec![ZERO; out.len()];
        self.inner.add_at(n, t, &mut tmp);
        for ((o, v), &w) in out.iter_mut().zip(tmp).zip(self.mask.weights()) {
            *o += v * w;
        }
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero() || self.mask.is_empty()
    }
}

/// `mask · (u^n + u^{n+1})/2` for a stored trajectory: the coupling term
/// `1_O u` sampled at half steps.
pub struct CouplingSource<'a> {
    pub mask: &'a Mask,
    pub traj: &'a Trajectory,
}

impl SourceSampler for CouplingSource<'_> {
    fn add_at(&self, n: usize, _: f64, out: &mut [Complex64]) {
        let a = self.traj.at(n);
        let b = self.traj.at(n + 1);
        for (i, o) in out.iter_mut().enumerate() {
            *o += (a[i] + b[i]) * (0.5 * self.mask.get(i));
        }
    }
    fn is_zero(&self) -> bool {
        self.mask.is_empty()
    }
}

/// A space–time field stored at the `M` half-step times (controls, sampled
/// sources).
#[derive(Debug, Clone, PartialEq)]
pub struct HalfStepField {
    grid: Grid,
    slices: Vec<ComplexField>,
}

impl HalfStepField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            slices: vec![ComplexField::zeros(grid.nodes()); grid.steps()],
        }
    }

    /// Samples any source at every half step.
    pub fn sample(grid: &Grid, source: &dyn SourceSampler) -> Self {
        let mut out = Self::zeros(grid);
        for (n, s) in out.slices.iter_mut().enumerate() {
            source.add_at(n, grid.t_half(n), s);
        }
        out
    }

    pub fn from_slices(grid: &Grid, slices: Vec<ComplexField>) -> Result<Self> {
        if slices.len() != grid.steps() {
            return Err(crate::error::Error::GridMismatch {
                expected: grid.steps(),
                got: slices.len(),
            });
        }
        for s in &slices {
            grid.check_len(s.len())?;
        }
        Ok(Self {
            grid: *grid,
            slices,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn slices(&self) -> &[ComplexField] {
        &self.slices
    }

    pub fn slice(&self, n: usize) -> &ComplexField {
        &self.slices[n]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut ComplexField {
        &mut self.slices[n]
    }

    pub fn masked(&self, mask: &Mask) -> Self {
        Self {
            grid: self.grid,
            slices: self
                .slices
                .iter()
                .map(|s| ComplexField(mask.apply(s)))
                .collect(),
        }
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            grid: self.grid,
            slices: self.slices.iter().map(|s| s.scaled(c)).collect(),
        }
    }

    /// `self += alpha·other`
    pub fn axpy(&mut self, alpha: Complex64, other: &HalfStepField) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            a.axpy(alpha, b);
        }
    }

    /// `dx·dt·Σ a conj(b)`: the `L²(Q_T)` inner product under midpoint
    /// quadrature in time.
    pub fn inner(&self, other: &HalfStepField) -> Complex64 {
        let s: Complex64 = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| raw_inner(a, b))
            .sum();
        s * (self.grid.dx() * self.grid.dt())
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).re.max(0.0).sqrt()
    }

    /// True when every value outside `mask` is exactly zero.
    pub fn supported_in(&self, mask: &Mask) -> bool {
        self.slices.iter().all(|s| {
            s.iter()
                .zip(mask.weights())
                .all(|(z, &w)| w > 0.0 || *z == ZERO)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(ComplexField::is_finite)
    }
}

impl SourceSampler for HalfStepField {
    fn add_at(&self, n: usize, _: f64, out: &mut [Complex64]) {
        for (o, v) in out.iter_mut().zip(self.slices[n].iter()) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_field_norm() {
        let g = Grid::new(1.0, 9, 1.0, 10).unwrap();
        let a = ComplexField(vec![Complex64::new(1.0, 0.0); 9]);
        let n2 = l2_inner(&g, &a, &a).unwrap();
        assert!((n2.re - 0.9).abs() < 1e-14 && n2.im == 0.0);
    }

    #[test]
    fn grid_mismatch_detected() {
        let g = Grid::new(1.0, 9, 1.0, 10).unwrap();
        let a = ComplexField::zeros(8);
        assert!(l2_inner(&g, &a, &a).is_err());
    }

    proptest! {
        #[test]
        fn inner_is_hermitian(v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 18)) {
            let g = Grid::new(1.0, 9, 1.0, 10).unwrap();
            let a: Vec<Complex64> = v[..9].iter().map(|&(r, i)| Complex64::new(r, i)).collect();
            let b: Vec<Complex64> = v[9..].iter().map(|&(r, i)| Complex64::new(r, i)).collect();
            let ab = l2_inner(&g, &a, &b).unwrap();
            let ba = l2_inner(&g, &b, &a).unwrap();
            prop_assert!((ab - ba.conj()).norm() < 1e-14);
            let aa = l2_inner(&g, &a, &a).unwrap();
            prop_assert!(aa.re >= 0.0 && aa.im == 0.0);
        }
    }
}
