//! Experiment configuration: a single TOML file with flat key paths,
//! overridable from the command line. Parsing a serialized config
//! reproduces it exactly.

use crate::detflow::SolverConfig;
use crate::error::{Error, Result};
use crate::generator::CoefficientField;
use crate::measure::ParticleMeasure;
use crate::rng::StreamFactory;
use crate::testfn::{FamilyParams, TestFamily};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Named preset (`zero`, `ou`, `meanfield`, `porous`, `tanh`, `p1`,
    /// `p2[:rho=..,tau=..]`) or `custom` to use the component specs.
    pub preset: String,
    pub dim: usize,
    pub noise_dim: usize,
    /// Component specs, used when `preset = "custom"`.
    pub a: String,
    pub b: String,
    pub sigma: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: "ou".into(),
            dim: 1,
            noise_dim: 0,
            a: "const:0.5".into(),
            b: "restoring".into(),
            sigma: "zero".into(),
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<CoefficientField> {
        if self.preset == "custom" {
            CoefficientField::from_specs(
                "custom",
                self.dim,
                self.noise_dim,
                &self.a,
                &self.b,
                &self.sigma,
            )
        } else {
            CoefficientField::preset(&self.preset, self.dim, self.noise_dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub depth: u32,
    pub r0: f64,
    pub norm_step_divisor: u32,
    /// Chart truncation (number of dictionary members kept).
    pub truncate: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            depth: 3,
            r0: 2.0,
            norm_step_divisor: 200,
            truncate: 32,
        }
    }
}

impl FamilyConfig {
    pub fn build(&self, dim: usize) -> Result<TestFamily> {
        let params = FamilyParams {
            dim,
            depth: self.depth,
            r0: self.r0,
            norm_step_divisor: self.norm_step_divisor,
            truncate: Some(self.truncate),
        };
        TestFamily::enumerate(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConfig {
    /// `dirac`, `gaussian` or `uniform`.
    pub kind: String,
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
    pub mass: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            kind: "gaussian".into(),
            mean: 0.0,
            std: 1.0,
            lo: -1.0,
            hi: 1.0,
            mass: 1.0,
        }
    }
}

impl InitialConfig {
    /// Sample the initial cloud with `n` points; `member` selects the
    /// stream (ensemble members get shifted means, see `mean_shift`).
    pub fn sample(
        &self,
        dim: usize,
        n: usize,
        factory: &StreamFactory,
        member: u64,
        mean_shift: f64,
    ) -> Result<ParticleMeasure> {
        let mut rng = factory.stream("initial", &[member]);
        let mean = vec![self.mean + mean_shift; dim];
        match self.kind.as_str() {
            "dirac" => {
                let cloud = ParticleMeasure::new(
                    dim,
                    mean.iter().cycle().take(n * dim).copied().collect(),
                    vec![self.mass / n as f64; n],
                )?;
                Ok(cloud)
            }
            "gaussian" => ParticleMeasure::sample_gaussian(dim, n, &mean, self.std, self.mass, &mut rng),
            "uniform" => ParticleMeasure::sample_uniform(
                dim,
                n,
                self.lo + mean_shift,
                self.hi + mean_shift,
                self.mass,
                &mut rng,
            ),
            other => Err(Error::config("initial.kind", format!("unknown kind `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind.as_str() {
            "dirac" | "gaussian" | "uniform" => {}
            other => return Err(Error::config("initial.kind", format!("unknown kind `{other}`"))),
        }
        if !(self.mass > 0.0 && self.mass <= 1.0 + 1e-12) {
            return Err(Error::config("initial.mass", "must lie in (0, 1]"));
        }
        if self.kind == "uniform" && !(self.hi > self.lo) {
            return Err(Error::config("initial.hi", "must exceed initial.lo"));
        }
        if self.kind == "gaussian" && !(self.std >= 0.0) {
            return Err(Error::config("initial.std", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub save_stride: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            n_particles: 1000,
            dt: 1e-3,
            t_final: 1.0,
            seed: 7,
            save_stride: 1,
        }
    }
}

impl SolverSection {
    pub fn build(&self) -> SolverConfig {
        SolverConfig {
            n_particles: self.n_particles,
            dt: self.dt,
            t_final: self.t_final,
            seed: self.seed,
            save_stride: self.save_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Stochastic realizations.
    pub k_paths: usize,
    /// Mixture members for the lifted checks.
    pub members: usize,
    /// Mixture weights; empty means uniform.
    pub weights: Vec<f64>,
    /// Initial-mean shift between consecutive members.
    pub member_shift: f64,
    /// Append a frozen (non-solution) member as a negative control.
    pub frozen_control: bool,
    /// How many realizations are written to disk in full.
    pub save_realizations: usize,
    /// When nonempty, the lifted checks load member paths (files named
    /// `*path.json`, recursively, in sorted order) from this directory
    /// instead of simulating inline.
    pub paths_dir: String,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k_paths: 100,
            members: 2,
            weights: Vec::new(),
            member_shift: 0.8,
            frozen_control: false,
            save_realizations: 3,
            paths_dir: String::new(),
        }
    }
}

impl EnsembleConfig {
    pub fn member_weights(&self, total_members: usize) -> Vec<f64> {
        if self.weights.len() == total_members {
            self.weights.clone()
        } else {
            vec![1.0 / total_members as f64; total_members]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_paths == 0 {
            return Err(Error::config("ensemble.k_paths", "must be >= 1"));
        }
        if self.members == 0 {
            return Err(Error::config("ensemble.members", "must be >= 1"));
        }
        if !self.weights.is_empty() {
            let expected = self.members + usize::from(self.frozen_control);
            if self.weights.len() != expected {
                return Err(Error::config(
                    "ensemble.weights",
                    format!("need {expected} entries or none"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    /// Residual tolerance for pass/fail decisions.
    pub tol: f64,
    /// Leading dictionary members exercised by residual checks.
    pub n_check: usize,
    /// Coordinates probed by the cylinder batteries.
    pub battery_k: usize,
    /// Cutoff levels of the mass checks.
    pub cutoff_ls: Vec<u32>,
    /// Coordinates tested by the martingale battery.
    pub mgp_i_max: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            tol: 0.05,
            n_check: 5,
            battery_k: 3,
            cutoff_ls: vec![2, 4, 8],
            mgp_i_max: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Worker threads; 0 keeps the rayon default.
    pub threads: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { threads: 0 }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub family: FamilyConfig,
    pub initial: InitialConfig,
    pub solver: SolverSection,
    pub ensemble: EnsembleConfig,
    pub checks: CheckConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.dim == 0 {
            return Err(Error::config("model.dim", "must be >= 1"));
        }
        self.model.build()?;
        if self.family.depth == 0 {
            return Err(Error::config("family.depth", "must be >= 1"));
        }
        if self.family.truncate == 0 {
            return Err(Error::config("family.truncate", "must be >= 1"));
        }
        self.initial.validate()?;
        self.solver.build().validate()?;
        self.ensemble.validate()?;
        if !(self.checks.tol > 0.0) {
            return Err(Error::config("checks.tol", "must be positive"));
        }
        Ok(())
    }
}
