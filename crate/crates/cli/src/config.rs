use std::fs;
use std::path::{Path, PathBuf};

use insens_core::audit::{Estimate, ObservabilityWeights, SampleSettings};
use insens_core::control::{ControlMode, ControlSpec, OuterSettings, SmallnessCap};
use insens_core::field::FnSource;
use insens_core::weights::WeightParams;
use insens_core::{indicator_mask, Complex64, ComplexField, Grid, Mask};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub physics: PhysicsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insensitize: Option<InsensitizeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub length: f64,
    pub nodes: usize,
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub omega: [f64; 2],
    pub observation: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub lambda: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
}

fn default_mu() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub epsilon: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: ControlMode,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_maxit")]
    pub cg_maxit: usize,
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "default_outer_maxit")]
    pub outer_maxit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<SmallnessCap>,
}

fn default_mode() -> ControlMode {
    ControlMode::Plain
}
fn default_cg_tol() -> f64 {
    1e-10
}
fn default_cg_maxit() -> usize {
    500
}
fn default_outer_tol() -> f64 {
    1e-8
}
fn default_outer_maxit() -> usize {
    10
}

/// Gaussian bump `a·exp(−((x−c)/w)²)`, optionally also Gaussian in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pulse {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_width: Option<f64>,
}

impl Pulse {
    pub fn value(&self, t: f64, x: f64) -> Complex64 {
        let mut a = self.amplitude * (-((x - self.center) / self.width).powi(2)).exp();
        if let (Some(tc), Some(tw)) = (self.t_center, self.t_width) {
            a *= (-((t - tc) / tw).powi(2)).exp();
        }
        Complex64::from_polar(a, self.phase)
    }

    fn validate(&self, what: &str, grid: &GridConfig) -> CliResult<()> {
        let finite = [self.amplitude, self.center, self.width, self.phase]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.width <= 0.0 {
            return Err(CliError::Validation(format!(
                "{what}: pulse needs finite values and width > 0"
            )));
        }
        if !(0.0..=grid.length).contains(&self.center) {
            return Err(CliError::Validation(format!(
                "{what}: pulse center {} outside [0, {}]",
                self.center, grid.length
            )));
        }
        match (self.t_center, self.t_width) {
            (None, None) => Ok(()),
            (Some(_), Some(w)) if w > 0.0 => Ok(()),
            _ => Err(CliError::Validation(format!(
                "{what}: t_center and t_width (> 0) go together"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    /// `[re, im]` of the cubic coefficient.
    #[serde(default)]
    pub zeta: [f64; 2],
    #[serde(default)]
    pub u0: Vec<Pulse>,
    #[serde(default)]
    pub f0: Vec<Pulse>,
    #[serde(default)]
    pub f1: Vec<Pulse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsensitizeConfig {
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Penalty of the inline control run when no control file is given.
    #[serde(default = "default_check_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_file: Option<PathBuf>,
}

fn default_directions() -> usize {
    10
}
fn default_taus() -> Vec<f64> {
    vec![1e-2, 5e-3, 2.5e-3]
}
fn default_check_epsilon() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub source_amplitude: f64,
    #[serde(default = "default_estimate")]
    pub estimate: Estimate,
    #[serde(default)]
    pub observability: bool,
    /// Overrides for `ρ₁, ρ₂, ρ₃` as weight expressions, e.g. `"lambda^7 mu^8 nu^7 sigma^2"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<[String; 3]>,
}

fn default_samples() -> usize {
    20
}
fn default_estimate() -> Estimate {
    Estimate::Classical
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub levels: Vec<[usize; 2]>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    1.0
}

fn require<'a, T>(v: &'a Option<T>, block: &str, cmd: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Validation(format!("`{cmd}` needs a [{block}] block")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate_common()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the subcommand.
    pub fn validate_common(&self) -> CliResult<()> {
        self.grid()?;
        if let Some(m) = &self.masks {
            self.masks_checked(m)?;
        }
        if let Some(w) = &self.weights {
            self.weight_params_of(w)?;
        }
        if let Some(c) = &self.control {
            if c.epsilon.is_empty() {
                return Err(CliError::Validation(
                    "control.epsilon must list at least one value".into(),
                ));
            }
            for s in self.control_specs()? {
                s.validate()?;
            }
            if c.outer_maxit == 0 || c.outer_tol.is_nan() || c.outer_tol <= 0.0 {
                return Err(CliError::Validation(
                    "control.outer_tol must be > 0 and outer_maxit ≥ 1".into(),
                ));
            }
        }
        if !self.physics.zeta.iter().all(|z| z.is_finite()) {
            return Err(CliError::Validation("physics.zeta must be finite".into()));
        }
        for (name, list) in [
            ("physics.u0", &self.physics.u0),
            ("physics.f0", &self.physics.f0),
            ("physics.f1", &self.physics.f1),
        ] {
            for p in list {
                p.validate(name, &self.grid)?;
            }
        }
        if let Some(i) = &self.insensitize {
            if i.directions == 0
                || i.taus.is_empty()
                || i.taus.iter().any(|t| !(t.is_finite() && *t > 0.0))
            {
                return Err(CliError::Validation(
                    "insensitize needs directions ≥ 1 and positive finite taus".into(),
                ));
            }
            if !(i.epsilon > 0.0 && i.epsilon.is_finite()) {
                return Err(CliError::Validation(
                    "insensitize.epsilon must be positive".into(),
                ));
            }
        }
        if let Some(a) = &self.audit {
            if a.lambdas.is_empty() || a.mus.is_empty() {
                return Err(CliError::Validation(
                    "audit.lambdas and audit.mus must be nonempty".into(),
                ));
            }
            self.sample_settings(a).validate()?;
            self.rho(a)?;
        }
        if let Some(c) = &self.convergence {
            insens_core::manufactured::check_refinement(
                &c.levels.iter().map(|l| (l[0], l[1])).collect::<Vec<_>>(),
            )?;
        }
        Ok(())
    }

    pub fn grid(&self) -> CliResult<Grid> {
        let g = &self.grid;
        Ok(Grid::new(g.length, g.nodes, g.horizon, g.steps)?)
    }

    fn masks_checked(&self, m: &MaskConfig) -> CliResult<(Mask, Mask)> {
        let grid = self.grid()?;
        let build = |name: &str, [a, b]: [f64; 2]| -> CliResult<Mask> {
            indicator_mask(&grid, a, b)
                .map_err(|e| CliError::Validation(format!("masks.{name}: {e}")))
        };
        Ok((
            build("omega", m.omega)?,
            build("observation", m.observation)?,
        ))
    }

    pub fn masks(&self, cmd: &str) -> CliResult<(Mask, Mask)> {
        self.masks_checked(require(&self.masks, "masks", cmd)?)
    }

    /// Masks with `ω ∩ O ≠ ∅`, as every control run requires.
    pub fn control_masks(&self, cmd: &str) -> CliResult<(Mask, Mask)> {
        let (omega, obs) = self.masks(cmd)?;
        insens_core::grid::check_overlap(&omega, &obs)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok((omega, obs))
    }

    fn weight_params_of(&self, w: &WeightConfig) -> CliResult<WeightParams> {
        let x0 = w.x0.unwrap_or(-0.5 * self.grid.length);
        Ok(WeightParams::new(
            w.lambda,
            w.mu,
            x0,
            self.grid.horizon,
            self.grid.length,
        )?)
    }

    pub fn weight_params(&self) -> CliResult<Option<WeightParams>> {
        self.weights
            .as_ref()
            .map(|w| self.weight_params_of(w))
            .transpose()
    }

    pub fn x0(&self) -> f64 {
        self.weights
            .and_then(|w| w.x0)
            .unwrap_or(-0.5 * self.grid.length)
    }

    pub fn zeta(&self) -> Complex64 {
        Complex64::new(self.physics.zeta[0], self.physics.zeta[1])
    }

    pub fn control_specs(&self) -> CliResult<Vec<ControlSpec>> {
        let c = require(&self.control, "control", "control")?;
        let params = self.weight_params()?;
        if c.mode == ControlMode::CarlemanWeighted && params.is_none() {
            return Err(CliError::Validation(
                "control.mode = \"carleman_weighted\" needs a [weights] block".into(),
            ));
        }
        Ok(c.epsilon
            .iter()
            .map(|&epsilon| ControlSpec {
                epsilon,
                mode: c.mode,
                cg_tol: c.cg_tol,
                cg_maxit: c.cg_maxit,
                weight_params: params.filter(|_| c.mode == ControlMode::CarlemanWeighted),
            })
            .collect())
    }

    pub fn outer_settings(&self) -> CliResult<OuterSettings> {
        let c = require(&self.control, "control", "control")?;
        Ok(OuterSettings {
            tol: c.outer_tol,
            maxit: c.outer_maxit,
            cap: c.cap,
        })
    }

    pub fn initial_state(&self, grid: &Grid) -> ComplexField {
        ComplexField::from_fn(grid, |x| {
            self.physics.u0.iter().map(|p| p.value(0.0, x)).sum()
        })
    }

    pub fn source(
        &self,
        grid: &Grid,
        which: Which,
    ) -> FnSource<impl Fn(f64, f64) -> Complex64 + Sync + '_> {
        let pulses = match which {
            Which::F0 => &self.physics.f0,
            Which::F1 => &self.physics.f1,
        };
        FnSource::new(grid, move |t, x| pulses.iter().map(|p| p.value(t, x)).sum())
    }

    pub fn sample_settings(&self, a: &AuditConfig) -> SampleSettings {
        SampleSettings {
            samples: a.samples,
            seed: self.seed,
            source_amplitude: a.source_amplitude,
        }
    }

    pub fn rho(&self, a: &AuditConfig) -> CliResult<ObservabilityWeights> {
        match &a.rho {
            None => Ok(ObservabilityWeights::default()),
            Some([r1, r2, r3]) => Ok(ObservabilityWeights {
                rho1: r1.parse()?,
                rho2: r2.parse()?,
                rho3: r3.parse()?,
            }),
        }
    }

    pub fn require_insensitize(&self) -> CliResult<InsensitizeConfig> {
        Ok(self.insensitize.clone().unwrap_or(InsensitizeConfig {
            directions: default_directions(),
            taus: default_taus(),
            epsilon: default_check_epsilon(),
            control_file: None,
        }))
    }

    pub fn require_audit(&self) -> CliResult<&AuditConfig> {
        require(&self.audit, "audit", "carleman-scan")
    }

    pub fn require_convergence(&self) -> CliResult<&ConvergenceConfig> {
        require(&self.convergence, "convergence", "convergence")
    }

    /// The resolved configuration as TOML, one line per entry.
    pub fn provenance(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("unserializable configuration: {e}"))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Which {
    F0,
    F1,
}
