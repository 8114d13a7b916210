//! Stochastic pipeline: the common-noise conditional particle system, the
//! stochastic weak formulation with its left-point Itô term, the coordinate
//! martingale statistics with their covariation identity, the lifted
//! second-order generator, and stochastic mass conservation.
//!
//! One realization carries one shared Wiener path `W` broadcast to all
//! particles; the idiosyncratic factor `τ = √(2a - σσᵀ)` supplies the rest
//! of the diffusion, so the empirical cloud approximates the conditional
//! law given `W`. The finite particle count leaves an `O(1/N)` excess in
//! quadratic functionals, which the Monte-Carlo budgets absorb.

use crate::detflow::{solver_cloud, SolverConfig, StepNoise, Stepper};
use crate::error::{Error, Result};
use crate::generator::{noise_coord, CoefficientField, Scratch};
use crate::lift::{apply_lifted, CylinderFunction};
use crate::measure::{MeasurePath, ParticleMeasure};
use crate::residual::ResidualCurve;
use crate::rng::StreamFactory;
use crate::testfn::{cutoff_sequence, TestFamily, TestFunction};
use crate::util::cumulative_trapezoid;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A sampled Wiener path on the save grid, `W_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub times: Vec<f64>,
    /// One `noise_dim`-vector per node.
    pub values: Vec<Vec<f64>>,
}

impl NoisePath {
    pub fn noise_dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Increment `W_{k+1} - W_k`.
    pub fn increment(&self, k: usize) -> Vec<f64> {
        self.values[k + 1]
            .iter()
            .zip(&self.values[k])
            .map(|(a, b)| a - b)
            .collect()
    }

    /// CSV rendering with columns `t, W_1, ..., W_d1`.
    pub fn to_csv(&self) -> String {
        let d1 = self.noise_dim();
        let mut out = String::from("t");
        for a in 1..=d1 {
            out.push_str(&format!(",W_{a}"));
        }
        out.push('\n');
        for (t, w) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t}"));
            for v in w {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One conditional-law realization: the measure path and its driving noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub path: MeasurePath,
    pub noise: NoisePath,
}

/// A Monte-Carlo sample of the law of the measure-valued process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticEnsemble {
    pub model: String,
    pub seed: u64,
    pub realizations: Vec<Realization>,
}

impl StochasticEnsemble {
    pub fn k_paths(&self) -> usize {
        self.realizations.len()
    }

    pub fn times(&self) -> &[f64] {
        self.realizations[0].path.times()
    }
}

/// Simulate `K` independent realizations of the common-noise particle
/// system. Realization `k` uses the particle streams `("particle", [k, m])`
/// and the shared-noise stream `("common", [k])`; all realizations start
/// from the same sampled initial cloud.
pub fn simulate_snlfpk(
    c: &CoefficientField,
    mu0: &ParticleMeasure,
    cfg: &SolverConfig,
    k_paths: usize,
) -> Result<StochasticEnsemble> {
    cfg.validate()?;
    if k_paths == 0 {
        return Err(Error::invalid("ensemble.k_paths", "must be >= 1"));
    }
    let d1 = c.noise_dim();
    if d1 == 0 {
        return Err(Error::invalid(
            "model.noise_dim",
            "stochastic simulation needs noise_dim >= 1",
        ));
    }
    if mu0.dim() != c.dim() {
        return Err(Error::DimensionMismatch(
            "initial measure and coefficients must share a dimension".into(),
        ));
    }
    let factory = StreamFactory::new(cfg.seed);
    let cloud = solver_cloud(mu0, cfg.n_particles, &factory)?;
    // Fail fast on an inadmissible model before spawning realizations.
    crate::generator::diffusion_sqrt(c, 0.0, &cloud, cloud.point(0))?;

    let realizations: Vec<Realization> = (0..k_paths)
        .into_par_iter()
        .map(|r| -> Result<Realization> {
            let n = cfg.n_particles;
            let d = c.dim();
            let mut current = cloud.clone();
            let mut next = vec![0.0; n * d];
            let mut stepper = Stepper::new(c, &factory, r as u64, n);
            let mut common = factory.stream("common", &[r as u64]);
            let n_steps = cfg.n_steps();
            let sqrt_dt = cfg.dt.sqrt();
            let mut w_acc = vec![0.0; d1];
            let mut dw = vec![0.0; d1];
            let mut times = vec![0.0];
            let mut saved = vec![current.clone()];
            let mut noise = vec![w_acc.clone()];
            for k in 0..n_steps {
                let t = k as f64 * cfg.dt;
                for dwa in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut common);
                    *dwa = sqrt_dt * z;
                }
                stepper.step(k, t, cfg.dt, &current, &mut next, StepNoise::Common(&dw))?;
                std::mem::swap(&mut current.points, &mut next);
                for (acc, inc) in w_acc.iter_mut().zip(&dw) {
                    *acc += inc;
                }
                if (k + 1) % cfg.save_stride == 0 {
                    times.push((k + 1) as f64 * cfg.dt);
                    saved.push(current.clone());
                    noise.push(w_acc.clone());
                }
            }
            Ok(Realization {
                path: MeasurePath::new(times.clone(), saved)?,
                noise: NoisePath {
                    times,
                    values: noise,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StochasticEnsemble {
        model: c.name().to_string(),
        seed: cfg.seed,
        realizations,
    })
}

/// Stochastic weak-form residual along one realization:
///
/// ```text
/// R(t) = μ_t(φ) - μ_0(φ) - ∫_0^t ∫ Lφ dμ_s ds - Σ_{s<t} [∫ σᵀ∇φ dμ_s]·ΔW_s
/// ```
///
/// with trapezoid time quadrature and strictly left-point Itô increments.
pub fn stochastic_weak_residual(
    path: &MeasurePath,
    noise: &NoisePath,
    c: &CoefficientField,
    phi: &TestFunction,
) -> Result<ResidualCurve> {
    stochastic_weak_residual_labeled(path, noise, c, phi, "phi")
}

pub fn stochastic_weak_residual_labeled(
    path: &MeasurePath,
    noise: &NoisePath,
    c: &CoefficientField,
    phi: &TestFunction,
    label: &str,
) -> Result<ResidualCurve> {
    if path.times() != noise.times.as_slice() {
        return Err(Error::DimensionMismatch(
            "measure path and noise path must share the time grid".into(),
        ));
    }
    let d1 = c.noise_dim();
    let nodes: Vec<(f64, f64, Vec<f64>)> = path
        .times()
        .par_iter()
        .zip(path.measures().par_iter())
        .map(|(t, mu)| -> Result<(f64, f64, Vec<f64>)> {
            let prep = c.prepare(*t, mu);
            let mut s = Scratch::new(c.dim(), d1);
            let mut gen = 0.0;
            let mut ito = vec![0.0; d1];
            let mut term = vec![0.0; d1];
            for m in 0..mu.n_points() {
                let w = mu.weights()[m];
                gen += w * prep.apply_generator(phi, mu.point(m), &mut s)?;
                prep.sigma_dot_grad(phi, mu.point(m), &mut s, &mut term);
                for (acc, v) in ito.iter_mut().zip(&term) {
                    *acc += w * v;
                }
            }
            Ok((mu.integrate(phi)?, gen, ito))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = nodes.iter().map(|(v, _, _)| *v).collect();
    let gens: Vec<f64> = nodes.iter().map(|(_, g, _)| *g).collect();
    let drift_int = cumulative_trapezoid(&gens, path.dt());
    let mut ito_sum = vec![0.0; path.len()];
    for k in 0..path.len() - 1 {
        let dw = noise.increment(k);
        let dot: f64 = nodes[k].2.iter().zip(&dw).map(|(a, b)| a * b).sum();
        ito_sum[k + 1] = ito_sum[k] + dot;
    }
    let residuals: Vec<f64> = (0..path.len())
        .map(|k| (values[k] - values[0]) - drift_int[k] - ito_sum[k])
        .collect();
    Ok(ResidualCurve {
        label: label.to_string(),
        times: path.times().to_vec(),
        values: residuals,
    })
}

/// Coordinate SDE residual: the stochastic weak residual with the weighted
/// dictionary member `h_i` as test function (identical arithmetic).
pub fn coordinate_sde_residual(
    path: &MeasurePath,
    noise: &NoisePath,
    c: &CoefficientField,
    fam: &TestFamily,
    i: usize,
) -> Result<ResidualCurve> {
    let hi = fam.weighted_fn(i);
    stochastic_weak_residual_labeled(path, noise, c, &hi, &format!("h_{}", i + 1))
}

/// Per-node weighted-coordinate statistics of one realization: coordinate
/// values, cumulative drift integrals and coordinate noise vectors.
struct CoordinateStats {
    /// `z[node][i] = μ(h_i)`
    z: Vec<Vec<f64>>,
    /// `drift_int[node][i] = ∫_0^node B_i(s, μ_s) ds` (trapezoid)
    drift_int: Vec<Vec<f64>>,
    /// `noise_coords[node][i][α] = Σ^α_i(t, μ)`
    noise_coords: Vec<Vec<Vec<f64>>>,
}

fn coordinate_stats(
    real: &Realization,
    c: &CoefficientField,
    fam: &TestFamily,
    n_coords: usize,
) -> Result<CoordinateStats> {
    let d = c.dim();
    let d1 = c.noise_dim();
    let path = &real.path;
    let mut z = Vec::with_capacity(path.len());
    let mut b_nodes = Vec::with_capacity(path.len());
    let mut noise_coords = Vec::with_capacity(path.len());
    let mut s = Scratch::new(d, d1);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for (k, t) in path.times().iter().enumerate() {
        let mu = path.measure(k);
        let prep = c.prepare(*t, mu);
        let mut zk = vec![0.0; n_coords];
        let mut bk = vec![0.0; n_coords];
        let mut nk = vec![vec![0.0; d1]; n_coords];
        for m in 0..mu.n_points() {
            let w = mu.weights()[m];
            let x = mu.point(m);
            prep.diffusion_into(x, &mut s.a);
            prep.drift_into(x, &mut s.b);
            if d1 > 0 {
                prep.noise_into(x, &mut s.sigma);
            }
            for i in 0..n_coords {
                let v = fam.raw(i).jet_into(x, &mut grad, &mut hess);
                zk[i] += w * v;
                let mut gen = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        gen += s.a[p * d + q] * hess[p * d + q];
                    }
                    gen += s.b[p] * grad[p];
                }
                bk[i] += w * gen;
                for alpha in 0..d1 {
                    let mut dot = 0.0;
                    for p in 0..d {
                        dot += s.sigma[p * d1 + alpha] * grad[p];
                    }
                    nk[i][alpha] += w * dot;
                }
            }
        }
        for i in 0..n_coords {
            let scale = fam.scale(i);
            zk[i] *= scale;
            bk[i] *= scale;
            for alpha in 0..d1 {
                nk[i][alpha] *= scale;
            }
        }
        z.push(zk);
        b_nodes.push(bk);
        noise_coords.push(nk);
    }
    // Integrate the drift coordinates in time.
    let dt = path.dt();
    let mut drift_int = vec![vec![0.0; n_coords]; path.len()];
    for i in 0..n_coords {
        let series: Vec<f64> = b_nodes.iter().map(|b| b[i]).collect();
        for (k, v) in cumulative_trapezoid(&series, dt).into_iter().enumerate() {
            drift_int[k][i] = v;
        }
    }
    Ok(CoordinateStats {
        z,
        drift_int,
        noise_coords,
    })
}

/// Statistics `ψ(z_s)` against which martingale increments are tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MgpStatistic {
    /// `ψ ≡ 1` (plain zero-mean test).
    One,
    /// `ψ = z_j(s)` (0-based coordinate).
    Coord(usize),
    /// `ψ = tanh(z_j(s))`.
    Tanh(usize),
}

impl MgpStatistic {
    pub fn label(&self) -> String {
        match self {
            MgpStatistic::One => "1".into(),
            MgpStatistic::Coord(j) => format!("z_{}", j + 1),
            MgpStatistic::Tanh(j) => format!("tanh(z_{})", j + 1),
        }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        match self {
            MgpStatistic::One => 1.0,
            MgpStatistic::Coord(j) => z[*j],
            MgpStatistic::Tanh(j) => z[*j].tanh(),
        }
    }

    fn max_index(&self) -> usize {
        match self {
            MgpStatistic::One => 0,
            MgpStatistic::Coord(j) | MgpStatistic::Tanh(j) => *j + 1,
        }
    }
}

/// The default battery: `1`, `z_j(s)` for the first three coordinates, and
/// `tanh(z_1(s))`.
pub fn default_mgp_battery() -> Vec<MgpStatistic> {
    vec![
        MgpStatistic::One,
        MgpStatistic::Coord(0),
        MgpStatistic::Coord(1),
        MgpStatistic::Coord(2),
        MgpStatistic::Tanh(0),
    ]
}

/// One orthogonality row: the Monte-Carlo estimate of
/// `E[(M_i(t) - M_i(s)) ψ(z_s)]` with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityEntry {
    /// 1-based coordinate index.
    pub i: usize,
    pub psi: String,
    pub estimate: f64,
    pub se: f64,
    pub pass: bool,
}

/// One covariation row: the estimate of `E[M_i(t) M_j(t) - ∫_0^t A_ij ds]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariationEntry {
    pub i: usize,
    pub j: usize,
    pub estimate: f64,
    pub se: f64,
    pub pass: bool,
}

/// Martingale-problem test report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    /// `(s, t)` window of the orthogonality tests.
    pub window: (f64, f64),
    /// True when the compensator `∫ B_i ds` was deliberately dropped
    /// (negative control: the statistics must then fail).
    pub drift_dropped: bool,
    pub entries: Vec<OrthogonalityEntry>,
    pub all_pass: bool,
}

/// Pass threshold in standard errors (~99.99% two-sided).
pub const SE_FACTOR: f64 = 4.0;

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Orthogonality test of the coordinate martingales: for each coordinate
/// `i < i_max` and each battery statistic, estimate
/// `E[(M_i(t) - M_i(s)) ψ(z_s)]` over the ensemble and require it to vanish
/// within [`SE_FACTOR`] standard errors. With `drop_drift` the compensator
/// is omitted, which must break at least one statistic on a drifting model.
pub fn mgp_test(
    ens: &StochasticEnsemble,
    c: &CoefficientField,
    fam: &TestFamily,
    i_max: usize,
    window: (usize, usize),
    battery: &[MgpStatistic],
    drop_drift: bool,
) -> Result<MartingaleReport> {
    let k_paths = ens.k_paths();
    if k_paths < 2 {
        return Err(Error::invalid("ensemble.k_paths", "need K >= 2 for standard errors"));
    }
    let (s_node, t_node) = window;
    let n_nodes = ens.times().len();
    if s_node >= t_node || t_node >= n_nodes {
        return Err(Error::invalid(
            "mgp.window",
            format!("need s < t < {n_nodes} (got {s_node}, {t_node})"),
        ));
    }
    let n_coords = battery
        .iter()
        .map(MgpStatistic::max_index)
        .chain(std::iter::once(i_max))
        .max()
        .unwrap()
        .min(fam.len());
    // Per realization: the increments ΔM_i and the frozen statistics ψ(z_s).
    let rows: Vec<(Vec<f64>, Vec<f64>)> = ens
        .realizations
        .par_iter()
        .map(|real| -> Result<(Vec<f64>, Vec<f64>)> {
            let stats = coordinate_stats(real, c, fam, n_coords)?;
            let m_at = |node: usize, i: usize| -> f64 {
                let drift = if drop_drift {
                    0.0
                } else {
                    stats.drift_int[node][i]
                };
                stats.z[node][i] - stats.z[0][i] - drift
            };
            let increments: Vec<f64> = (0..i_max.min(n_coords))
                .map(|i| m_at(t_node, i) - m_at(s_node, i))
                .collect();
            let psis: Vec<f64> = battery.iter().map(|b| b.eval(&stats.z[s_node])).collect();
            Ok((increments, psis))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for i in 0..i_max.min(n_coords) {
        for (b_idx, stat) in battery.iter().enumerate() {
            let samples: Vec<f64> = rows
                .iter()
                .map(|(inc, psis)| inc[i] * psis[b_idx])
                .collect();
            let (estimate, se) = mean_and_se(&samples);
            entries.push(OrthogonalityEntry {
                i: i + 1,
                psi: stat.label(),
                estimate,
                se,
                pass: estimate.abs() <= SE_FACTOR * se,
            });
        }
    }
    let all_pass = entries.iter().all(|e| e.pass);
    Ok(MartingaleReport {
        window: (ens.times()[s_node], ens.times()[t_node]),
        drift_dropped: drop_drift,
        entries,
        all_pass,
    })
}

/// Covariation identity at the final time: estimate
/// `E[M_i(T) M_j(T) - ∫_0^T A_ij(s, μ_s) ds]` and require it to vanish at
/// [`SE_FACTOR`] standard errors. (Valid because `M(0) = 0` and `M` is a
/// martingale, so `E[M_i M_j]` equals the expected covariation.)
pub fn covariation_test(
    ens: &StochasticEnsemble,
    c: &CoefficientField,
    fam: &TestFamily,
    i: usize,
    j: usize,
) -> Result<CovariationEntry> {
    let k_paths = ens.k_paths();
    if k_paths < 2 {
        return Err(Error::invalid("ensemble.k_paths", "need K >= 2 for standard errors"));
    }
    let n_coords = (i.max(j) + 1).min(fam.len());
    let dt = ens.realizations[0].path.dt();
    let samples: Vec<f64> = ens
        .realizations
        .par_iter()
        .map(|real| -> Result<f64> {
            let stats = coordinate_stats(real, c, fam, n_coords)?;
            let last = stats.z.len() - 1;
            let m_i = stats.z[last][i] - stats.z[0][i] - stats.drift_int[last][i];
            let m_j = stats.z[last][j] - stats.z[0][j] - stats.drift_int[last][j];
            let a_series: Vec<f64> = stats
                .noise_coords
                .iter()
                .map(|nc| nc[i].iter().zip(&nc[j]).map(|(x, y)| x * y).sum())
                .collect();
            let a_int = *cumulative_trapezoid(&a_series, dt).last().unwrap();
            Ok(m_i * m_j - a_int)
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimate, se) = mean_and_se(&samples);
    Ok(CovariationEntry {
        i: i + 1,
        j: j + 1,
        estimate,
        se,
        pass: estimate.abs() <= SE_FACTOR * se,
    })
}

/// Second-order bilinear form on the measure space:
/// `Hess(F)(μ)(σ1, σ2) = Σ_kl ∂²_kl f(z) (∫σ1·∇h_{i_l} dμ)(∫σ2·∇h_{i_k} dμ)`.
pub fn hess_sp<F1, F2>(
    cyl: &CylinderFunction,
    mu: &ParticleMeasure,
    fam: &TestFamily,
    mut sigma1: F1,
    mut sigma2: F2,
) -> Result<f64>
where
    F1: FnMut(&[f64], &mut [f64]),
    F2: FnMut(&[f64], &mut [f64]),
{
    let z = cyl.coords(mu, fam)?;
    let hess = cyl.hess_coords(&z);
    let n = cyl.n_args();
    if n == 0 {
        return Ok(0.0);
    }
    let d = fam.dim();
    let mut pair1 = vec![0.0; n];
    let mut pair2 = vec![0.0; n];
    let mut grad = vec![0.0; d];
    let mut field = vec![0.0; d];
    for m in 0..mu.n_points() {
        let w = mu.weights()[m];
        let x = mu.point(m);
        sigma1(x, &mut field);
        let f1 = field.clone();
        sigma2(x, &mut field);
        for (k, &idx) in cyl.indices().iter().enumerate() {
            fam.raw(idx).gradient_into(x, &mut grad);
            let scale = fam.scale(idx);
            let dot1: f64 = f1.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let dot2: f64 = field.iter().zip(&grad).map(|(a, b)| a * b).sum();
            pair1[k] += w * scale * dot1;
            pair2[k] += w * scale * dot2;
        }
    }
    let mut acc = 0.0;
    for k in 0..n {
        for l in 0..n {
            acc += hess[k * n + l] * pair1[l] * pair2[k];
        }
    }
    Ok(acc)
}

/// Lifted second-order generator:
/// `L² F = (lifted L) F + ½ Σ_α Hess(F)(σ^α, σ^α)`, with the Hessian term
/// contracted through the coordinate noise vectors.
pub fn apply_second_order(
    cyl: &CylinderFunction,
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    fam: &TestFamily,
) -> Result<f64> {
    let first = apply_lifted(cyl, c, t, mu, fam)?;
    let d1 = c.noise_dim();
    if d1 == 0 || cyl.n_args() == 0 {
        return Ok(first);
    }
    let z = cyl.coords(mu, fam)?;
    let hess = cyl.hess_coords(&z);
    let n = cyl.n_args();
    let coords: Vec<Vec<f64>> = cyl
        .indices()
        .iter()
        .map(|&i| noise_coord(c, t, mu, fam, i))
        .collect::<Result<Vec<_>>>()?;
    let mut second = 0.0;
    for k in 0..n {
        for l in 0..n {
            let dot: f64 = coords[k].iter().zip(&coords[l]).map(|(a, b)| a * b).sum();
            second += hess[k * n + l] * dot;
        }
    }
    Ok(first + 0.5 * second)
}

/// Monte-Carlo residual of the lifted second-order equation for one
/// cylinder function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedResidualEntry {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub pass: bool,
}

/// Estimate `E[F(μ_T) - F(μ_0) - ∫_0^T L²F(μ_s) ds]` over the ensemble;
/// each realization contributes one martingale sample, so the mean must
/// vanish within [`SE_FACTOR`] standard errors.
pub fn lifted_fpk_residual(
    ens: &StochasticEnsemble,
    c: &CoefficientField,
    fam: &TestFamily,
    cyl: &CylinderFunction,
) -> Result<LiftedResidualEntry> {
    if ens.k_paths() < 2 {
        return Err(Error::invalid("ensemble.k_paths", "need K >= 2 for standard errors"));
    }
    let dt = ens.realizations[0].path.dt();
    let samples: Vec<f64> = ens
        .realizations
        .par_iter()
        .map(|real| -> Result<f64> {
            let path = &real.path;
            let gens = path
                .times()
                .iter()
                .enumerate()
                .map(|(k, t)| apply_second_order(cyl, c, *t, path.measure(k), fam))
                .collect::<Result<Vec<_>>>()?;
            let gen_int = *cumulative_trapezoid(&gens, dt).last().unwrap();
            let f_t = cyl.eval(path.measure(path.len() - 1), fam)?;
            let f_0 = cyl.eval(path.measure(0), fam)?;
            Ok(f_t - f_0 - gen_int)
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimate, se) = mean_and_se(&samples);
    Ok(LiftedResidualEntry {
        label: cyl.label().to_string(),
        estimate,
        se,
        pass: estimate.abs() <= SE_FACTOR * se,
    })
}

/// Stochastic mass-conservation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticMassReport {
    /// Max over realizations and times of the exact weight drift.
    pub max_mass_drift: f64,
    /// `(l, max over realizations of max_t |residual with φ_l|)`.
    pub cutoff_residuals: Vec<(u32, f64)>,
}

impl StochasticMassReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.cutoff_residuals
            .windows(2)
            .all(|w| w[1].1 < w[0].1 || (w[0].1 == 0.0 && w[1].1 == 0.0))
    }
}

/// Exact mass drift plus the cutoff-sequence residual trend, both over the
/// whole ensemble (the stochastic weak residual includes the Itô term).
pub fn stochastic_mass_check(
    ens: &StochasticEnsemble,
    c: &CoefficientField,
    ls: &[u32],
) -> Result<StochasticMassReport> {
    let mut max_drift = 0.0f64;
    for real in &ens.realizations {
        let m0 = real.path.measure(0).total_mass();
        for mu in real.path.measures() {
            max_drift = max_drift.max((mu.total_mass() - m0).abs());
        }
    }
    let dim = ens.realizations[0].path.dim();
    let mut cutoff_residuals = Vec::with_capacity(ls.len());
    for &l in ls {
        let phi = cutoff_sequence(dim, l)?;
        let worst = ens
            .realizations
            .par_iter()
            .map(|real| -> Result<f64> {
                Ok(
                    stochastic_weak_residual_labeled(
                        &real.path,
                        &real.noise,
                        c,
                        &phi,
                        &format!("cutoff_l{l}"),
                    )?
                    .max_abs(),
                )
            })
            .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)))?;
        cutoff_residuals.push((l, worst));
    }
    Ok(StochasticMassReport {
        max_mass_drift: max_drift,
        cutoff_residuals,
    })
}
