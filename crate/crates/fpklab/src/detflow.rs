//! Deterministic pipeline: interacting-particle simulation of the nonlinear
//! equation, weak-form residuals, mass conservation, and the coupled
//! nonlinear-linear system.
//!
//! The solver is plain explicit Euler-Maruyama with the empirical measure
//! plugged into the coefficients at every step:
//!
//! ```text
//! X^m ← X^m + b(t, μ̂, X^m) Δt + √(2 a(t, μ̂, X^m)) √Δt ξ^m
//! ```
//!
//! Weights never change, so particle mass is conserved exactly along every
//! simulated path. Each particle draws from its own counter-derived stream,
//! so runs are bit-identical for any thread count.

use crate::error::{Error, Result};
use crate::generator::{CoefficientField, Scratch};
use crate::lift::{apply_lifted, CylinderFunction};
use crate::measure::{MeasurePath, ParticleMeasure};
use crate::residual::ResidualCurve;
use crate::rng::StreamFactory;
use crate::testfn::{cutoff_sequence, TestFamily, TestFunction};
use crate::util::cumulative_trapezoid;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Particle-solver configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    /// Keep every `save_stride`-th node (must divide the step count).
    pub save_stride: usize,
}

impl SolverConfig {
    pub fn new(n_particles: usize, dt: f64, t_final: f64, seed: u64) -> Self {
        SolverConfig {
            n_particles,
            dt,
            t_final,
            seed,
            save_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.save_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::invalid("solver.n_particles", "must be >= 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("solver.dt", "must be positive"));
        }
        if !(self.t_final >= self.dt) {
            return Err(Error::invalid("solver.dt", "must satisfy 0 < dt <= t_final"));
        }
        if self.save_stride == 0 {
            return Err(Error::invalid("solver.save_stride", "must be >= 1"));
        }
        let steps = self.n_steps() as f64;
        if (steps * self.dt - self.t_final).abs() > 1e-9 * self.t_final.max(1.0) {
            return Err(Error::invalid(
                "solver.dt",
                "must divide t_final into a whole number of steps",
            ));
        }
        if self.n_steps() % self.save_stride != 0 {
            return Err(Error::invalid(
                "solver.save_stride",
                "must divide the number of steps (the save grid must stay uniform)",
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round().max(1.0) as usize
    }
}

/// Noise channels of one evolution step.
pub(crate) enum StepNoise<'a> {
    /// `√(2a)` idiosyncratic only (deterministic nonlinear equation).
    Deterministic,
    /// Conditional system: `τ = √(2a - σσᵀ)` idiosyncratic plus the shared
    /// increment `σ · dW` broadcast to every particle.
    Common(&'a [f64]),
}

/// Shared Euler step used by the deterministic and stochastic solvers.
/// Reads `current`, writes the new positions into `next`.
pub(crate) struct Stepper<'c> {
    pub field: &'c CoefficientField,
    pub rngs: Vec<rand_chacha::ChaCha12Rng>,
}

impl<'c> Stepper<'c> {
    pub fn new(field: &'c CoefficientField, factory: &StreamFactory, realization: u64, n: usize) -> Self {
        let rngs = (0..n)
            .map(|m| factory.stream("particle", &[realization, m as u64]))
            .collect();
        Stepper { field, rngs }
    }

    pub(crate) fn step(
        &mut self,
        k: usize,
        t: f64,
        dt: f64,
        current: &ParticleMeasure,
        next: &mut [f64],
        noise: StepNoise<'_>,
    ) -> Result<()> {
        let d = self.field.dim();
        let d1 = self.field.noise_dim();
        let prep = self.field.prepare(t, current);
        let sqrt_dt = dt.sqrt();

        // With spatially uniform diffusion the factorization is shared by
        // every particle; otherwise each particle factors its own matrix.
        let mut shared_tau: Option<Vec<f64>> = None;
        if self.field.uniform_diffusion() {
            let mut s = Scratch::new(d, d1);
            let mut tau = vec![0.0; d * d];
            let x0 = if current.n_points() > 0 {
                current.point(0).to_vec()
            } else {
                vec![0.0; d]
            };
            match noise {
                StepNoise::Deterministic => prep.sqrt_two_a_into(&x0, &mut s, &mut tau)?,
                StepNoise::Common(_) => prep.conditional_sqrt_into(&x0, &mut s, &mut tau)?,
            }
            shared_tau = Some(tau);
        }

        let common = match noise {
            StepNoise::Common(dw) => Some(dw),
            StepNoise::Deterministic => None,
        };
        let bad = AtomicUsize::new(usize::MAX);
        const CHUNK: usize = 1024;
        next.par_chunks_mut(CHUNK * d)
            .zip(self.rngs.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(chunk_idx, (xs, rngs))| {
                let base = chunk_idx * CHUNK;
                let mut s = Scratch::new(d, d1);
                let mut tau = vec![0.0; d * d];
                let mut xi = vec![0.0; d];
                for (local, rng) in rngs.iter_mut().enumerate() {
                    let m = base + local;
                    let x = current.point(m);
                    prep.drift_into(x, &mut s.b);
                    let tau_ref: &[f64] = if let Some(ref t) = shared_tau {
                        t
                    } else {
                        let r = match common {
                            None => prep.sqrt_two_a_into(x, &mut s, &mut tau),
                            Some(_) => prep.conditional_sqrt_into(x, &mut s, &mut tau),
                        };
                        if r.is_err() {
                            bad.fetch_min(m, Ordering::Relaxed);
                            return;
                        }
                        &tau
                    };
                    for z in xi.iter_mut() {
                        *z = StandardNormal.sample(rng);
                    }
                    if common.is_some() {
                        prep.noise_into(x, &mut s.sigma);
                    }
                    let out = &mut xs[local * d..(local + 1) * d];
                    for i in 0..d {
                        let mut v = x[i] + s.b[i] * dt;
                        for j in 0..d {
                            v += tau_ref[i * d + j] * sqrt_dt * xi[j];
                        }
                        if let Some(dw) = common {
                            for (alpha, dwa) in dw.iter().enumerate() {
                                v += s.sigma[i * d1 + alpha] * dwa;
                            }
                        }
                        if !v.is_finite() {
                            bad.fetch_min(m, Ordering::Relaxed);
                            return;
                        }
                        out[i] = v;
                    }
                }
            });
        let bad = bad.load(Ordering::Relaxed);
        if bad != usize::MAX {
            return Err(Error::Numeric {
                context: format!("euler step {k} (t = {t})"),
                detail: format!("particle {bad} produced a non-finite state or an inadmissible diffusion factor"),
            });
        }
        Ok(())
    }
}

/// Turn the initial measure into the solver cloud: reuse it when it already
/// has `n` equally weighted points, otherwise resample `n` points i.i.d.
pub(crate) fn solver_cloud(
    mu0: &ParticleMeasure,
    n: usize,
    factory: &StreamFactory,
) -> Result<ParticleMeasure> {
    mu0.validate()?;
    let equal = mu0.n_points() == n
        && mu0
            .weights()
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() <= f64::EPSILON * w[0].abs().max(1.0));
    if equal {
        return Ok(mu0.clone());
    }
    let mut rng = factory.stream("init", &[]);
    mu0.resample(n, &mut rng)
}

/// Simulate the nonlinear equation by the McKean-Vlasov particle system
/// (σ ignored; the deterministic case uses `a` and `b` only).
pub fn simulate_nlfpk(
    c: &CoefficientField,
    mu0: &ParticleMeasure,
    cfg: &SolverConfig,
) -> Result<MeasurePath> {
    simulate_member(c, mu0, cfg, 0)
}

/// Same solver, but drawing from the particle streams of ensemble member
/// `member`, so mixture members evolve independently under one master seed.
pub fn simulate_member(
    c: &CoefficientField,
    mu0: &ParticleMeasure,
    cfg: &SolverConfig,
    member: u64,
) -> Result<MeasurePath> {
    cfg.validate()?;
    if mu0.dim() != c.dim() {
        return Err(Error::DimensionMismatch(
            "initial measure and coefficients must share a dimension".into(),
        ));
    }
    let factory = StreamFactory::new(cfg.seed);
    let cloud = solver_cloud(mu0, cfg.n_particles, &factory)?;
    let n = cfg.n_particles;
    let d = c.dim();
    let mut current = cloud;
    let mut next = vec![0.0; n * d];
    let mut stepper = Stepper::new(c, &factory, member, n);
    let n_steps = cfg.n_steps();
    let mut times = Vec::with_capacity(n_steps / cfg.save_stride + 1);
    let mut saved = Vec::with_capacity(n_steps / cfg.save_stride + 1);
    times.push(0.0);
    saved.push(current.clone());
    for k in 0..n_steps {
        let t = k as f64 * cfg.dt;
        stepper.step(k, t, cfg.dt, &current, &mut next, StepNoise::Deterministic)?;
        std::mem::swap(&mut current.points, &mut next);
        if (k + 1) % cfg.save_stride == 0 {
            times.push((k + 1) as f64 * cfg.dt);
            saved.push(current.clone());
        }
    }
    MeasurePath::new(times, saved)
}

/// Defect of the time-integrated weak formulation along a path:
/// `R(t_k) = μ_k(φ) - μ_0(φ) - ∫_0^{t_k} ∫ Lφ dμ_s ds` (trapezoid in time).
pub fn weak_residual(
    path: &MeasurePath,
    c: &CoefficientField,
    phi: &TestFunction,
) -> Result<ResidualCurve> {
    weak_residual_labeled(path, c, phi, "phi")
}

pub fn weak_residual_labeled(
    path: &MeasurePath,
    c: &CoefficientField,
    phi: &TestFunction,
    label: &str,
) -> Result<ResidualCurve> {
    let mut curves =
        weak_residuals_batch(path, c, std::slice::from_ref(phi), &[label.to_string()])?;
    Ok(curves.remove(0))
}

/// Weak residuals of several test functions in one sweep: the coefficients
/// are evaluated once per particle and node, the jets once per pair.
pub fn weak_residuals_batch(
    path: &MeasurePath,
    c: &CoefficientField,
    phis: &[TestFunction],
    labels: &[String],
) -> Result<Vec<ResidualCurve>> {
    if path.is_empty() {
        return Err(Error::invalid("path", "must be nonempty"));
    }
    if path.dim() != c.dim() || phis.iter().any(|phi| phi.dim() != c.dim()) {
        return Err(Error::DimensionMismatch(
            "path, coefficients and test functions must share a dimension".into(),
        ));
    }
    if phis.len() != labels.len() {
        return Err(Error::DimensionMismatch(
            "one label per test function".into(),
        ));
    }
    let d = c.dim();
    let n_phi = phis.len();
    // Per node: (μ(φ_p), ∫ Lφ_p dμ) for every p.
    let nodes: Vec<(Vec<f64>, Vec<f64>)> = path
        .times()
        .par_iter()
        .zip(path.measures().par_iter())
        .map(|(t, mu)| -> Result<(Vec<f64>, Vec<f64>)> {
            let prep = c.prepare(*t, mu);
            let mut s = Scratch::new(d, c.noise_dim());
            let mut grad = vec![0.0; d];
            let mut hess = vec![0.0; d * d];
            let mut values = vec![0.0; n_phi];
            let mut gens = vec![0.0; n_phi];
            for m in 0..mu.n_points() {
                let w = mu.weights()[m];
                let x = mu.point(m);
                prep.diffusion_into(x, &mut s.a);
                prep.drift_into(x, &mut s.b);
                for (p, phi) in phis.iter().enumerate() {
                    let v = phi.jet_into(x, &mut grad, &mut hess);
                    values[p] += w * v;
                    let mut gen = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            gen += s.a[i * d + j] * hess[i * d + j];
                        }
                        gen += s.b[i] * grad[i];
                    }
                    gens[p] += w * gen;
                }
            }
            if gens.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    context: "weak_residual".into(),
                    detail: format!("non-finite generator integral at t = {t}"),
                });
            }
            Ok((values, gens))
        })
        .collect::<Result<Vec<_>>>()?;
    let dt = path.dt();
    Ok((0..n_phi)
        .map(|p| {
            let values: Vec<f64> = nodes.iter().map(|(v, _)| v[p]).collect();
            let gens: Vec<f64> = nodes.iter().map(|(_, g)| g[p]).collect();
            let integral = cumulative_trapezoid(&gens, dt);
            ResidualCurve {
                label: labels[p].clone(),
                times: path.times().to_vec(),
                values: values
                    .iter()
                    .zip(&integral)
                    .map(|(v, i)| (v - values[0]) - i)
                    .collect(),
            }
        })
        .collect())
}

/// Mass-conservation report: exact weight drift plus the weak residual of
/// the cutoff sequence, whose generator terms scale like `1/l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    /// `max_k |μ_k(R^d) - μ_0(R^d)|` — zero by construction for the solver.
    pub max_mass_drift: f64,
    /// `(l, max_t |residual with φ_l|)` in the order requested.
    pub cutoff_residuals: Vec<(u32, f64)>,
}

impl MassReport {
    /// Strictly decreasing cutoff residuals (the trend the theory predicts
    /// while mass sits inside the moving plateau).
    pub fn strictly_decreasing(&self) -> bool {
        self.cutoff_residuals
            .windows(2)
            .all(|w| w[1].1 < w[0].1 || (w[0].1 == 0.0 && w[1].1 == 0.0))
    }
}

pub fn mass_check(path: &MeasurePath, c: &CoefficientField, ls: &[u32]) -> Result<MassReport> {
    let m0 = path.measure(0).total_mass();
    let max_mass_drift = path
        .measures()
        .iter()
        .fold(0.0f64, |acc, mu| acc.max((mu.total_mass() - m0).abs()));
    let mut cutoff_residuals = Vec::with_capacity(ls.len());
    for &l in ls {
        let phi = cutoff_sequence(path.dim(), l)?;
        let r = weak_residual_labeled(path, c, &phi, &format!("cutoff_l{l}"))?;
        cutoff_residuals.push((l, r.max_abs()));
    }
    Ok(MassReport {
        max_mass_drift,
        cutoff_residuals,
    })
}

/// Simulate the coupled nonlinear-linear pair: the first cloud solves the
/// nonlinear equation; the second evolves with all coefficients frozen at
/// the FIRST cloud's empirical measure. With identical initial clouds the
/// two systems see the same noise streams and coincide bitwise.
pub fn simulate_coupled(
    c: &CoefficientField,
    mu0: &ParticleMeasure,
    nu0: &ParticleMeasure,
    cfg: &SolverConfig,
) -> Result<(MeasurePath, MeasurePath)> {
    cfg.validate()?;
    if mu0.dim() != c.dim() || nu0.dim() != c.dim() {
        return Err(Error::DimensionMismatch(
            "initial measures and coefficients must share a dimension".into(),
        ));
    }
    let factory = StreamFactory::new(cfg.seed);
    let mut mu = solver_cloud(mu0, cfg.n_particles, &factory)?;
    let mut nu = solver_cloud(nu0, cfg.n_particles, &factory)?;
    let n = cfg.n_particles;
    let d = c.dim();
    let mut mu_next = vec![0.0; n * d];
    let mut nu_next = vec![0.0; n * d];
    let mut mu_stepper = Stepper::new(c, &factory, 0, n);
    let mut nu_stepper = Stepper::new(c, &factory, 0, n);
    let n_steps = cfg.n_steps();
    let mut times = vec![0.0];
    let mut mu_saved = vec![mu.clone()];
    let mut nu_saved = vec![nu.clone()];
    for k in 0..n_steps {
        let t = k as f64 * cfg.dt;
        // Both updates read the μ-cloud's empirical measure.
        mu_stepper.step(k, t, cfg.dt, &mu, &mut mu_next, StepNoise::Deterministic)?;
        nu_stepper.step_frozen(k, t, cfg.dt, &mu, &nu, &mut nu_next)?;
        std::mem::swap(&mut mu.points, &mut mu_next);
        std::mem::swap(&mut nu.points, &mut nu_next);
        if (k + 1) % cfg.save_stride == 0 {
            times.push((k + 1) as f64 * cfg.dt);
            mu_saved.push(mu.clone());
            nu_saved.push(nu.clone());
        }
    }
    Ok((
        MeasurePath::new(times.clone(), mu_saved)?,
        MeasurePath::new(times, nu_saved)?,
    ))
}

impl<'c> Stepper<'c> {
    /// Euler step of a cloud whose coefficients are evaluated at a *frozen*
    /// measure (the linear second equation of the coupled system).
    fn step_frozen(
        &mut self,
        k: usize,
        t: f64,
        dt: f64,
        frozen: &ParticleMeasure,
        current: &ParticleMeasure,
        next: &mut [f64],
    ) -> Result<()> {
        let d = self.field.dim();
        let d1 = self.field.noise_dim();
        let prep = self.field.prepare(t, frozen);
        let sqrt_dt = dt.sqrt();
        let mut shared_tau: Option<Vec<f64>> = None;
        if self.field.uniform_diffusion() {
            let mut s = Scratch::new(d, d1);
            let mut tau = vec![0.0; d * d];
            let x0 = if frozen.n_points() > 0 {
                frozen.point(0).to_vec()
            } else {
                vec![0.0; d]
            };
            prep.sqrt_two_a_into(&x0, &mut s, &mut tau)?;
            shared_tau = Some(tau);
        }
        let bad = AtomicUsize::new(usize::MAX);
        const CHUNK: usize = 1024;
        next.par_chunks_mut(CHUNK * d)
            .zip(self.rngs.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(chunk_idx, (xs, rngs))| {
                let base = chunk_idx * CHUNK;
                let mut s = Scratch::new(d, d1);
                let mut tau = vec![0.0; d * d];
                let mut xi = vec![0.0; d];
                for (local, rng) in rngs.iter_mut().enumerate() {
                    let m = base + local;
                    let x = current.point(m);
                    prep.drift_into(x, &mut s.b);
                    let tau_ref: &[f64] = if let Some(ref tref) = shared_tau {
                        tref
                    } else {
                        if prep.sqrt_two_a_into(x, &mut s, &mut tau).is_err() {
                            bad.fetch_min(m, Ordering::Relaxed);
                            return;
                        }
                        &tau
                    };
                    for z in xi.iter_mut() {
                        *z = StandardNormal.sample(rng);
                    }
                    let out = &mut xs[local * d..(local + 1) * d];
                    for i in 0..d {
                        let mut v = x[i] + s.b[i] * dt;
                        for j in 0..d {
                            v += tau_ref[i * d + j] * sqrt_dt * xi[j];
                        }
                        if !v.is_finite() {
                            bad.fetch_min(m, Ordering::Relaxed);
                            return;
                        }
                        out[i] = v;
                    }
                }
            });
        let bad = bad.load(Ordering::Relaxed);
        if bad != usize::MAX {
            return Err(Error::Numeric {
                context: format!("coupled euler step {k} (t = {t})"),
                detail: format!("particle {bad} produced a non-finite state"),
            });
        }
        Ok(())
    }
}

/// Residual of the product-space continuity equation tested on
/// `Φ(x, μ) = φ(x) F(μ)` along the coupled pair `(μ_t, ν_t)`:
///
/// ```text
/// R(t) = ν_t(φ)F(μ_t) - ν_0(φ)F(μ_0)
///        - ∫_0^t [ F(μ_s) ∫ L_{s,μ_s}φ dν_s + ν_s(φ) · (lifted L F)(μ_s) ] ds
/// ```
pub fn coupled_product_residual(
    mu_path: &MeasurePath,
    nu_path: &MeasurePath,
    c: &CoefficientField,
    phi: &TestFunction,
    cyl: &CylinderFunction,
    fam: &TestFamily,
) -> Result<ResidualCurve> {
    if mu_path.times() != nu_path.times() {
        return Err(Error::DimensionMismatch(
            "coupled paths must share the time grid".into(),
        ));
    }
    let nodes: Vec<(f64, f64)> = mu_path
        .times()
        .par_iter()
        .enumerate()
        .map(|(k, t)| -> Result<(f64, f64)> {
            let mu = mu_path.measure(k);
            let nu = nu_path.measure(k);
            let f_mu = cyl.eval(mu, fam)?;
            let nu_phi = nu.integrate(phi)?;
            let prep = c.prepare(*t, mu);
            let mut s = Scratch::new(c.dim(), c.noise_dim());
            let mut gen_nu = 0.0;
            for m in 0..nu.n_points() {
                gen_nu += nu.weights()[m] * prep.apply_generator(phi, nu.point(m), &mut s)?;
            }
            let lifted = apply_lifted(cyl, c, *t, mu, fam)?;
            Ok((nu_phi * f_mu, f_mu * gen_nu + nu_phi * lifted))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = nodes.iter().map(|(v, _)| *v).collect();
    let rhs: Vec<f64> = nodes.iter().map(|(_, g)| *g).collect();
    let integral = cumulative_trapezoid(&rhs, mu_path.dt());
    let residuals: Vec<f64> = values
        .iter()
        .zip(&integral)
        .map(|(v, i)| (v - values[0]) - i)
        .collect();
    Ok(ResidualCurve {
        label: format!("product_{}", cyl.label()),
        times: mu_path.times().to_vec(),
        values: residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::CylinderFunction;
    use crate::testfn::{make_bump, FamilyParams};

    fn gaussian_cloud(seed: u64, n: usize, mean: f64, std: f64) -> ParticleMeasure {
        let mut rng = StreamFactory::new(seed).stream("cloud", &[0]);
        ParticleMeasure::sample_gaussian(1, n, &[mean], std, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn frozen_dynamics_yield_constant_path() {
        let c = CoefficientField::preset("zero", 1, 0).unwrap();
        let mu0 = gaussian_cloud(1, 50, 0.0, 1.0);
        let cfg = SolverConfig::new(50, 0.1, 0.5, 3);
        let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        assert_eq!(path.len(), 6);
        for k in 0..path.len() {
            assert_eq!(path.measure(k), &mu0);
        }
    }

    #[test]
    fn ou_variance_follows_the_moment_ode() {
        // Oracle: v'(t) = 2(a - v), v(0) = 0, a = 1/2 → v(t) = (1 - e^{-2t})/2.
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let mu0 = ParticleMeasure::dirac(&[0.0], 1.0).unwrap();
        let n = 4000;
        let cfg = SolverConfig::new(n, 1e-3, 1.0, 11).with_stride(250);
        let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        for (k, t) in path.times().iter().enumerate() {
            let mu = path.measure(k);
            let mean: f64 =
                (0..n).map(|m| mu.point(m)[0]).sum::<f64>() / n as f64;
            let var: f64 = (0..n)
                .map(|m| (mu.point(m)[0] - mean).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0);
            let oracle = 0.5 * (1.0 - (-2.0 * t).exp());
            let se = (2.0 / (n as f64 - 1.0)).sqrt() * oracle.max(1e-3);
            assert!(
                (var - oracle).abs() <= 4.0 * se + 2.0 * cfg.dt,
                "t={t}: var {var} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn mean_field_preserves_the_empirical_mean() {
        // Oracle: m'(t) = 0 — the attraction term averages out exactly.
        let c = CoefficientField::preset("meanfield", 1, 0).unwrap();
        let mu0 = gaussian_cloud(5, 2000, 1.0, 0.5);
        let cfg = SolverConfig::new(2000, 1e-3, 0.5, 17).with_stride(100);
        let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        let mean_at = |mu: &ParticleMeasure| -> f64 {
            (0..mu.n_points()).map(|m| mu.point(m)[0]).sum::<f64>() / mu.n_points() as f64
        };
        let m0 = mean_at(path.measure(0));
        for k in 1..path.len() {
            let mu = path.measure(k);
            let std: f64 = ((0..mu.n_points())
                .map(|m| (mu.point(m)[0] - mean_at(mu)).powi(2))
                .sum::<f64>()
                / (mu.n_points() as f64 - 1.0))
                .sqrt();
            let se = std / (mu.n_points() as f64).sqrt();
            assert!(
                (mean_at(mu) - m0).abs() <= 3.0 * se,
                "node {k}: drift {} vs 3 SE {}",
                (mean_at(mu) - m0).abs(),
                3.0 * se
            );
        }
    }

    #[test]
    fn seed_determinism_is_bitwise() {
        let c = CoefficientField::preset("meanfield", 1, 0).unwrap();
        let mu0 = gaussian_cloud(2, 300, 0.0, 1.0);
        let cfg = SolverConfig::new(300, 1e-2, 0.2, 9);
        let a = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        let b = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weak_residual_trivial_cases() {
        let zero = CoefficientField::preset("zero", 1, 0).unwrap();
        let mu0 = gaussian_cloud(3, 40, 0.0, 1.0);
        let phi = make_bump(&[0.0], 2.0, 1.0).unwrap();
        let cfg = SolverConfig::new(40, 0.05, 0.25, 1);
        let path = simulate_nlfpk(&zero, &mu0, &cfg).unwrap();
        let r = weak_residual(&path, &zero, &phi).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));

        let single = MeasurePath::new(vec![0.0], vec![mu0.clone()]).unwrap();
        let r1 = weak_residual(&single, &zero, &phi).unwrap();
        assert_eq!(r1.values, vec![0.0]);
    }

    #[test]
    fn weak_residual_shrinks_under_refinement() {
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let fam = TestFamily::enumerate(FamilyParams::new(1, 2)).unwrap();
        let mu0 = ParticleMeasure::dirac(&[0.0], 1.0).unwrap();
        let max_over_first = |n_particles: usize, dt: f64, seed: u64| -> f64 {
            let cfg = SolverConfig::new(n_particles, dt, 0.5, seed);
            let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
            (0..5)
                .map(|i| weak_residual(&path, &c, fam.raw(i)).unwrap().max_abs())
                .fold(0.0f64, f64::max)
        };
        let coarse = max_over_first(1500, 2e-3, 21);
        let fine = max_over_first(6000, 1e-3, 22);
        assert!(coarse < 0.05, "coarse residual {coarse}");
        assert!(fine < coarse, "fine {fine} vs coarse {coarse}");
    }

    #[test]
    fn mass_is_conserved_exactly_and_cutoff_residuals_decay() {
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let mut rng = StreamFactory::new(4).stream("cloud", &[1]);
        let mu0 = ParticleMeasure::sample_uniform(1, 2000, -6.0, 6.0, 1.0, &mut rng).unwrap();
        let cfg = SolverConfig::new(2000, 1e-3, 0.5, 13).with_stride(50);
        let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        let report = mass_check(&path, &c, &[2, 4, 8]).unwrap();
        assert_eq!(report.max_mass_drift, 0.0);
        assert!(
            report.strictly_decreasing(),
            "cutoff residuals {:?}",
            report.cutoff_residuals
        );
    }

    #[test]
    fn cutoff_residual_vanishes_when_particles_stay_on_the_plateau() {
        // A tight OU cloud never leaves |x| <= 8, where φ_8 ≡ 1: the
        // residual is the exact mass drift, i.e. zero.
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let mu0 = gaussian_cloud(6, 500, 0.0, 0.3);
        let cfg = SolverConfig::new(500, 1e-2, 0.3, 5);
        let path = simulate_nlfpk(&c, &mu0, &cfg).unwrap();
        let report = mass_check(&path, &c, &[8]).unwrap();
        assert_eq!(report.cutoff_residuals[0].1, 0.0);
    }

    #[test]
    fn coupled_identical_inputs_identical_paths() {
        let c = CoefficientField::preset("meanfield", 1, 0).unwrap();
        let mu0 = gaussian_cloud(7, 200, 0.5, 0.7);
        let cfg = SolverConfig::new(200, 1e-2, 0.3, 6);
        let (mu, nu) = simulate_coupled(&c, &mu0, &mu0, &cfg).unwrap();
        assert_eq!(mu, nu);

        let zero = CoefficientField::preset("zero", 1, 0).unwrap();
        let nu0 = gaussian_cloud(8, 200, -0.5, 0.7);
        let (cm, cn) = simulate_coupled(&zero, &mu0, &nu0, &cfg).unwrap();
        for k in 1..cm.len() {
            assert_eq!(cm.measure(k), cm.measure(0));
            assert_eq!(cn.measure(k), cn.measure(0));
        }
    }

    #[test]
    fn coupled_mean_relaxes_like_the_linear_ode() {
        // Oracle: m_ν'(t) = -(m_ν - m_μ) with m_μ constant, so the gap
        // shrinks by e^{-t}.
        let c = CoefficientField::preset("meanfield", 1, 0).unwrap();
        let mu0 = gaussian_cloud(9, 4000, 0.0, 0.5);
        let nu0 = gaussian_cloud(10, 4000, 2.0, 0.5);
        let cfg = SolverConfig::new(4000, 1e-3, 1.0, 77).with_stride(1000);
        let (mu, nu) = simulate_coupled(&c, &mu0, &nu0, &cfg).unwrap();
        let mean = |m: &ParticleMeasure| -> f64 {
            (0..m.n_points()).map(|i| m.point(i)[0]).sum::<f64>() / m.n_points() as f64
        };
        let gap0 = mean(nu.measure(0)) - mean(mu.measure(0));
        let gap1 = mean(nu.measure(nu.len() - 1)) - mean(mu.measure(mu.len() - 1));
        let oracle = gap0 * (-1.0f64).exp();
        // 1/√N noise on both means plus O(dt) scheme bias.
        assert!(
            (gap1 - oracle).abs() < 0.08,
            "gap {gap1} vs oracle {oracle}"
        );
    }

    #[test]
    fn product_residual_reduces_for_constant_outer_function() {
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let fam = TestFamily::enumerate(FamilyParams::new(1, 2)).unwrap();
        let mu0 = gaussian_cloud(11, 400, 0.0, 0.6);
        let nu0 = gaussian_cloud(12, 400, 1.0, 0.6);
        let cfg = SolverConfig::new(400, 1e-2, 0.3, 8);
        let (mu, nu) = simulate_coupled(&c, &mu0, &nu0, &cfg).unwrap();
        let phi = make_bump(&[0.0], 2.0, 1.0).unwrap();
        let konst = CylinderFunction::constant(2.5);
        let prod = coupled_product_residual(&mu, &nu, &c, &phi, &konst, &fam).unwrap();
        let weak = weak_residual(&nu, &c, &phi).unwrap();
        for (p, w) in prod.values.iter().zip(&weak.values) {
            assert!((p - 2.5 * w).abs() < 1e-12);
        }

        // φ ≡ 0 kills the residual entirely.
        let zero_phi = make_bump(&[0.0], 2.0, 0.0).unwrap();
        let f = CylinderFunction::coordinate(0);
        let prod0 = coupled_product_residual(&mu, &nu, &c, &zero_phi, &f, &fam).unwrap();
        assert!(prod0.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let cfg = SolverConfig::new(10, 0.0, 1.0, 1);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("solver.dt"), "{err}");
        let cfg = SolverConfig::new(0, 0.1, 1.0, 1);
        assert!(cfg.validate().unwrap_err().to_string().contains("solver.n_particles"));
        // dt that does not divide the horizon
        let cfg = SolverConfig::new(10, 0.3, 1.0, 1);
        assert!(cfg.validate().unwrap_err().to_string().contains("solver.dt"));
        // stride that does not divide the step count
        let cfg = SolverConfig::new(10, 0.1, 1.0, 1).with_stride(3);
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("solver.save_stride"));
    }
}
