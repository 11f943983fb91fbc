//! Numerical evaluation of both sides of the Carleman and observability
//! inequalities on sampled adjoint solutions.
//!
//! Every side is a weighted squared-norm integral held as a [`LogScaled`],
//! since the weights span hundreds of orders of magnitude. Nothing here
//! asserts an inequality: the empirical ratio `lhs/rhs` is reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{solve_adjoint_pair, AdjointSolution};
use crate::error::{Error, Result};
use crate::field::{HalfStepField, SourceSampler, Trajectory};
use crate::grid::{clamped_derivatives, right_boundary_traces, Grid, Mask};
use crate::sampling::{stream_rng, ModeBasis};
use crate::solver::Propagator;
use crate::weights::{log_weighted_sum, LogScaled, WeightFamily, WeightParams, WeightSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanReport {
    pub lhs: LogScaled,
    pub rhs_source: LogScaled,
    pub rhs_obs: LogScaled,
    /// `ln(lhs/(rhs_source + rhs_obs))`: `−∞` for a zero left side, `+∞`
    /// for a zero right side. The ratio itself routinely exceeds the `f64`
    /// range, so only its log is kept.
    pub log_ratio: f64,
    pub params: WeightParams,
    pub sample_id: u64,
}

impl CarlemanReport {
    fn assemble(
        lhs: LogScaled,
        rhs_source: LogScaled,
        rhs_obs: LogScaled,
        params: WeightParams,
    ) -> Self {
        let rhs = rhs_source.plus(rhs_obs);
        let log_ratio = match (lhs.is_zero(), rhs.is_zero()) {
            (true, _) => f64::NEG_INFINITY,
            (false, true) => f64::INFINITY,
            (false, false) => lhs.ln_ratio(&rhs),
        };
        Self {
            lhs,
            rhs_source,
            rhs_obs,
            log_ratio,
            params,
            sample_id: 0,
        }
    }

    pub fn terms_are_valid(&self) -> bool {
        [self.lhs, self.rhs_source, self.rhs_obs].iter().all(|s| {
            s.is_zero() || (s.mantissa > 0.0 && s.mantissa.is_finite() && s.log_scale.is_finite())
        })
    }
}

fn monomial(family: WeightFamily, lambda_pow: i32, mu_pow: i32, base_pow: f64) -> WeightSpec {
    WeightSpec {
        family,
        lambda_pow,
        mu_pow,
        base_pow,
        exp_pow: 2.0,
    }
}

/// Weight tables of one inequality for fixed parameters.
struct Tables {
    params: WeightParams,
    /// `(spec, log table)` for `|w|², |w_x|², …` in order.
    lhs: Vec<(WeightSpec, Vec<f64>)>,
    source: (WeightSpec, Vec<f64>),
    obs: (WeightSpec, Vec<f64>),
}

impl Tables {
    fn build(
        grid: &Grid,
        p: &WeightParams,
        lhs: Vec<WeightSpec>,
        source: WeightSpec,
        obs: WeightSpec,
    ) -> Result<Self> {
        p.validate()?;
        let tab = |s: WeightSpec| -> Result<(WeightSpec, Vec<f64>)> { Ok((s, s.table(grid, p)?)) };
        Ok(Self {
            params: *p,
            lhs: lhs.into_iter().map(tab).collect::<Result<_>>()?,
            source: tab(source)?,
            obs: tab(obs)?,
        })
    }

    fn classical(grid: &Grid, p: &WeightParams) -> Result<Self> {
        let c = WeightFamily::Classical;
        Self::build(
            grid,
            p,
            vec![
                monomial(c, 7, 8, 7.0),
                monomial(c, 5, 6, 5.0),
                monomial(c, 3, 4, 3.0),
                monomial(c, 1, 2, 1.0),
            ],
            monomial(c, 0, 0, 0.0),
            monomial(c, 1, 1, 1.0),
        )
    }

    fn modified(grid: &Grid, p: &WeightParams) -> Result<Self> {
        let m = WeightFamily::Modified;
        Self::build(
            grid,
            p,
            vec![
                monomial(m, 7, 8, 7.0),
                monomial(m, 5, 6, 5.0),
                monomial(m, 3, 4, 3.0),
            ],
            monomial(m, 0, 0, 0.0),
            monomial(m, 1, 0, 1.0),
        )
    }

    fn integrate(
        &self,
        grid: &Grid,
        which: &(WeightSpec, Vec<f64>),
        density: &[f64],
        mask: Option<&Mask>,
    ) -> LogScaled {
        let n = grid.nodes();
        log_weighted_sum(grid, &which.1, mask, |k, i| density[k * n + i])
            .scale(which.0.prefactor(&self.params))
    }
}

/// `|w|²` at half steps, row-major in time.
fn density(traj: &Trajectory) -> Vec<f64> {
    let grid = traj.grid();
    (0..grid.steps())
        .flat_map(|n| {
            traj.half_average(n)
                .iter()
                .map(|z| z.norm_sqr())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn source_density(sources: &[&HalfStepField]) -> Vec<f64> {
    let grid = sources[0].grid();
    let n = grid.nodes();
    let mut out = vec![0.0; grid.steps() * n];
    for s in sources {
        for k in 0..grid.steps() {
            for (i, z) in s.slice(k).iter().enumerate() {
                out[k * n + i] += z.norm_sqr();
            }
        }
    }
    out
}

/// `[w, w_x, w_xx, w_xxx]` snapshot by snapshot.
pub fn derivative_trajectories(traj: &Trajectory) -> [Trajectory; 4] {
    let grid = traj.grid();
    let mut parts: [Vec<_>; 3] = Default::default();
    for s in traj.snapshots() {
        for (k, d) in clamped_derivatives(grid, s).into_iter().enumerate() {
            parts[k].push(crate::field::ComplexField(d));
        }
    }
    let [a, b, c] = parts;
    [
        traj.clone(),
        Trajectory::from_snapshots(grid, a),
        Trajectory::from_snapshots(grid, b),
        Trajectory::from_snapshots(grid, c),
    ]
}

/// Densities of one adjoint sample, reusable across weight parameters.
#[derive(Debug, Clone)]
pub struct SampleDensities {
    grid: Grid,
    phi: [Vec<f64>; 4],
    psi: [Vec<f64>; 4],
    source: Vec<f64>,
}

impl SampleDensities {
    pub fn new(sol: &AdjointSolution, g0: &HalfStepField, g1: &HalfStepField) -> Self {
        let grid = *sol.psi.grid();
        Self {
            grid,
            phi: derivative_trajectories(&sol.phi).map(|t| density(&t)),
            psi: derivative_trajectories(&sol.psi).map(|t| density(&t)),
            source: source_density(&[g0, g1]),
        }
    }

    fn evaluate(&self, tables: &Tables, omega: &Mask) -> CarlemanReport {
        let g = &self.grid;
        let mut lhs = LogScaled::ZERO;
        for (k, term) in tables.lhs.iter().enumerate() {
            lhs = lhs.plus(tables.integrate(g, term, &self.phi[k], None));
            lhs = lhs.plus(tables.integrate(g, term, &self.psi[k], None));
        }
        let rhs_source = tables.integrate(g, &tables.source, &self.source, None);
        let rhs_obs = tables.integrate(g, &tables.obs, &self.phi[0], Some(omega));
        CarlemanReport::assemble(lhs, rhs_source, rhs_obs, tables.params)
    }
}

/// Both sides of the Carleman estimate for the adjoint pair: four weighted
/// derivative integrals each for `φ` and `ψ` against the weighted sources
/// and the weighted observation of `φ` on `ω`.
pub fn carleman_sides(
    sol: &AdjointSolution,
    g0: &dyn SourceSampler,
    g1: &dyn SourceSampler,
    p: &WeightParams,
    omega: &Mask,
) -> Result<CarlemanReport> {
    let grid = sol.psi.grid();
    let (g0, g1) = (
        HalfStepField::sample(grid, g0),
        HalfStepField::sample(grid, g1),
    );
    Ok(SampleDensities::new(sol, &g0, &g1).evaluate(&Tables::classical(grid, p)?, omega))
}

/// As [`carleman_sides`] with the `(ν, σ)` weights and derivatives up to
/// second order.
pub fn modified_carleman_sides(
    sol: &AdjointSolution,
    g0: &dyn SourceSampler,
    g1: &dyn SourceSampler,
    p: &WeightParams,
    omega: &Mask,
) -> Result<CarlemanReport> {
    let grid = sol.psi.grid();
    let (g0, g1) = (
        HalfStepField::sample(grid, g0),
        HalfStepField::sample(grid, g1),
    );
    Ok(SampleDensities::new(sol, &g0, &g1).evaluate(&Tables::modified(grid, p)?, omega))
}

/// `dt·Σ_n e^{logw_n}·value_n` in log-scaled form.
fn boundary_sum(grid: &Grid, logs: &[f64], values: &[f64]) -> LogScaled {
    let scale = logs
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if scale == f64::NEG_INFINITY {
        return LogScaled::ZERO;
    }
    let sum: f64 = logs
        .iter()
        .zip(values)
        .map(|(l, v)| (l - scale).exp() * v)
        .sum();
    LogScaled {
        log_scale: scale,
        mantissa: sum * grid.dt(),
    }
}

/// Single-equation estimate for `P u = i u_t + u_xxxx` (the trajectory must
/// come from a [`crate::solver::Generator::FourthOrderOnly`] propagator, so
/// that `P u` is the source). `rhs_source` holds `∬|θ P u|²`, `rhs_obs` the
/// two boundary terms at `x = L`.
pub fn boundary_carleman_sides(
    traj: &Trajectory,
    source: &dyn SourceSampler,
    p: &WeightParams,
) -> Result<CarlemanReport> {
    let grid = traj.grid();
    let tables = Tables::classical(grid, p)?;
    let derivs = derivative_trajectories(traj);
    let mut lhs = LogScaled::ZERO;
    for (k, term) in tables.lhs.iter().enumerate() {
        lhs = lhs.plus(tables.integrate(grid, term, &density(&derivs[k]), None));
    }
    let f = HalfStepField::sample(grid, source);
    let rhs_source = tables.integrate(grid, &tables.source, &source_density(&[&f]), None);

    let c = WeightFamily::Classical;
    let (s2, s3) = (monomial(c, 3, 3, 3.0), monomial(c, 1, 1, 1.0));
    let m = grid.steps();
    let (mut l2, mut l3, mut v2, mut v3) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for n in 0..m {
        let t = grid.t_half(n);
        l2[n] = s2.log_weight(t, grid.length(), p)?;
        l3[n] = s3.log_weight(t, grid.length(), p)?;
        let (uxx, uxxx) = right_boundary_traces(grid, &traj.half_average(n));
        v2[n] = uxx.norm_sqr();
        v3[n] = uxxx.norm_sqr();
    }
    let rhs_obs = boundary_sum(grid, &l2, &v2)
        .scale(s2.prefactor(p))
        .plus(boundary_sum(grid, &l3, &v3).scale(s3.prefactor(p)));
    Ok(CarlemanReport::assemble(lhs, rhs_source, rhs_obs, *p))
}

/// How random adjoint samples are drawn: unit low-mode `ψ(0)` and, when
/// `source_amplitude > 0`, low-mode sources `g⁰, g¹` of that `L²(Q_T)` norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    pub samples: usize,
    pub seed: u64,
    pub source_amplitude: f64,
}

impl SampleSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("at least one sample is required".into()));
        }
        if !(self.source_amplitude >= 0.0 && self.source_amplitude.is_finite()) {
            return Err(Error::Config(
                "source amplitude must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Sample `k` of a seeded batch, independent of how many others are drawn.
pub fn draw_sample(
    prop: &Propagator,
    basis: &ModeBasis,
    obs: &Mask,
    settings: &SampleSettings,
    k: u64,
) -> Result<(AdjointSolution, HalfStepField, HalfStepField)> {
    let grid = prop.grid();
    let mut rng = stream_rng(settings.seed, k);
    let psi0 = basis.random_unit(&mut rng);
    let (g0, g1) = if settings.source_amplitude > 0.0 {
        (
            basis.random_source(&mut rng, settings.source_amplitude),
            basis.random_source(&mut rng, settings.source_amplitude),
        )
    } else {
        (HalfStepField::zeros(grid), HalfStepField::zeros(grid))
    };
    let sol = solve_adjoint_pair(prop, &psi0, &g0, &g1, obs)?;
    Ok((sol, g0, g1))
}

fn sample_batch(
    prop: &Propagator,
    obs: &Mask,
    settings: &SampleSettings,
) -> Result<Vec<SampleDensities>> {
    settings.validate()?;
    let basis = ModeBasis::new(prop.grid());
    (0..settings.samples as u64)
        .into_par_iter()
        .map(|k| {
            let (sol, g0, g1) = draw_sample(prop, &basis, obs, settings, k)?;
            Ok(SampleDensities::new(&sol, &g0, &g1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
/// Order statistics of the log ratios of a batch.
pub struct Summary {
    pub max: f64,
    pub min: f64,
    pub median: f64,
}

impl Summary {
    fn of(ratios: &[f64]) -> Self {
        let mut v = ratios.to_vec();
        v.sort_by(f64::total_cmp);
        let median = if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        };
        Self {
            max: v[v.len() - 1],
            min: v[0],
            median,
        }
    }
}

/// `ρ₁`, `ρ₂`, `ρ₃` of the observability inequality
/// `∬ρ₁(|φ|²+|ψ|²) ≤ C∬_ω ρ₂|φ|² + ∬ρ₃(|g⁰|²+|g¹|²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityWeights {
    pub rho1: WeightSpec,
    pub rho2: WeightSpec,
    pub rho3: WeightSpec,
}

impl Default for ObservabilityWeights {
    fn default() -> Self {
        let m = WeightFamily::Modified;
        Self {
            rho1: monomial(m, 7, 8, 7.0),
            rho2: monomial(m, 1, 0, 1.0),
            rho3: monomial(m, 0, 0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityTable {
    pub rows: Vec<CarlemanReport>,
    pub summary: Summary,
}

/// Observability ratio on a seeded batch of adjoint samples. Rows carry
/// `lhs = ∬ρ₁(|φ|²+|ψ|²)`, `rhs_obs = ∬_ω ρ₂|φ|²`, `rhs_source = ∬ρ₃(|g⁰|²+|g¹|²)`.
pub fn observability_ratio(
    prop: &Propagator,
    settings: &SampleSettings,
    p: &WeightParams,
    omega: &Mask,
    obs: &Mask,
    rho: &ObservabilityWeights,
) -> Result<ObservabilityTable> {
    let grid = prop.grid();
    let tables = Tables::build(grid, p, vec![rho.rho1], rho.rho3, rho.rho2)?;
    let batch = sample_batch(prop, obs, settings)?;
    let rows: Vec<CarlemanReport> = batch
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let lhs = tables
                .integrate(grid, &tables.lhs[0], &s.phi[0], None)
                .plus(tables.integrate(grid, &tables.lhs[0], &s.psi[0], None));
            let rhs_source = tables.integrate(grid, &tables.source, &s.source, None);
            let rhs_obs = tables.integrate(grid, &tables.obs, &s.phi[0], Some(omega));
            CarlemanReport {
                sample_id: k as u64,
                ..CarlemanReport::assemble(lhs, rhs_source, rhs_obs, *p)
            }
        })
        .collect();
    let ratios: Vec<f64> = rows.iter().map(|r| r.log_ratio).collect();
    Ok(ObservabilityTable {
        summary: Summary::of(&ratios),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    Classical,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub mu: f64,
    pub samples: usize,
    pub summary: Summary,
}

/// Empirical constants of the chosen Carleman estimate over a `(λ, μ)`
/// grid. The samples are drawn once and shared by all cells. Rows come in
/// `λ`-major order.
#[allow(clippy::too_many_arguments)]
pub fn constant_scan(
    prop: &Propagator,
    lambdas: &[f64],
    mus: &[f64],
    x0: f64,
    settings: &SampleSettings,
    omega: &Mask,
    obs: &Mask,
    estimate: Estimate,
) -> Result<Vec<ScanRow>> {
    if lambdas.is_empty() || mus.is_empty() {
        return Err(Error::Config(
            "constant scan needs nonempty lambda and mu lists".into(),
        ));
    }
    let grid = prop.grid();
    let batch = sample_batch(prop, obs, settings)?;
    let cells: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| mus.iter().map(move |&m| (l, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(lambda, mu)| {
            let p = WeightParams::new(lambda, mu, x0, grid.horizon(), grid.length())?;
            let tables = match estimate {
                Estimate::Classical => Tables::classical(grid, &p)?,
                Estimate::Modified => Tables::modified(grid, &p)?,
            };
            let reports: Vec<CarlemanReport> =
                batch.iter().map(|s| s.evaluate(&tables, omega)).collect();
            let ratios: Vec<f64> = reports.iter().map(|r| r.log_ratio).collect();
            Ok(ScanRow {
                lambda,
                mu,
                samples: batch.len(),
                summary: Summary::of(&ratios),
            })
        })
        .collect()
}
