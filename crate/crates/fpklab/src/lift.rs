//! The linearized layer over the measure space: cylinder test functions
//! `F(μ) = f(μ(h_{i_1}), ..., μ(h_{i_n}))`, the measure-space gradient, the
//! lifted first-order generator, finite-mixture ensemble laws, residuals of
//! the lifted continuity equation, the transfer to sequence-space
//! coordinates, and the constructive superposition audit.
//!
//! Ensembles here are finite mixtures with time-constant weights and
//! evolving members; that is exactly the class of laws produced by pushing
//! a finitely supported path-space measure through the time projections.

use crate::detflow::weak_residuals_batch;
use crate::error::{Error, Result};
use crate::generator::{drift_coord, CoefficientField};
use crate::measure::{Chart, CoordinatePath, MeasurePath, ParticleMeasure};
use crate::residual::ResidualCurve;
use crate::testfn::TestFamily;
use crate::util::cumulative_trapezoid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

type OuterValue = dyn Fn(&[f64]) -> f64 + Send + Sync;
type OuterGrad = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A cylinder function: finitely many weighted-dictionary coordinates fed
/// through a C²_b outer function.
#[derive(Clone)]
pub struct CylinderFunction {
    label: String,
    /// 0-based indices into the weighted dictionary.
    indices: Vec<usize>,
    outer: Arc<OuterValue>,
    outer_grad: Arc<OuterGrad>,
    outer_hess: Arc<OuterGrad>,
}

impl std::fmt::Debug for CylinderFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylinderFunction")
            .field("label", &self.label)
            .field("indices", &self.indices)
            .finish()
    }
}

impl CylinderFunction {
    /// Assemble from closures; `grad` and `hess` write `n` and `n²` entries.
    pub fn new(
        label: &str,
        indices: Vec<usize>,
        outer: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        outer_grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        outer_hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        CylinderFunction {
            label: label.to_string(),
            indices,
            outer: Arc::new(outer),
            outer_grad: Arc::new(outer_grad),
            outer_hess: Arc::new(outer_hess),
        }
    }

    /// `F ≡ c` (no coordinate dependence).
    pub fn constant(c: f64) -> Self {
        CylinderFunction::new(
            &format!("const_{c}"),
            Vec::new(),
            move |_| c,
            |_, _| {},
            |_, _| {},
        )
    }

    /// `F(μ) = μ(h_i)`.
    pub fn coordinate(i: usize) -> Self {
        CylinderFunction::new(
            &format!("u{}", i + 1),
            vec![i],
            |u| u[0],
            |_, g| g[0] = 1.0,
            |_, h| h[0] = 0.0,
        )
    }

    /// `F(μ) = μ(h_i) · μ(h_j)` (squares when `i == j`).
    pub fn product(i: usize, j: usize) -> Self {
        if i == j {
            CylinderFunction::new(
                &format!("u{}^2", i + 1),
                vec![i],
                |u| u[0] * u[0],
                |u, g| g[0] = 2.0 * u[0],
                |_, h| h[0] = 2.0,
            )
        } else {
            CylinderFunction::new(
                &format!("u{}u{}", i + 1, j + 1),
                vec![i, j],
                |u| u[0] * u[1],
                |u, g| {
                    g[0] = u[1];
                    g[1] = u[0];
                },
                |_, h| {
                    h[0] = 0.0;
                    h[1] = 1.0;
                    h[2] = 1.0;
                    h[3] = 0.0;
                },
            )
        }
    }

    /// `F(μ) = tanh(μ(h_i))`.
    pub fn tanh_of(i: usize) -> Self {
        CylinderFunction::new(
            &format!("tanh(u{})", i + 1),
            vec![i],
            |u| u[0].tanh(),
            |u, g| {
                let t = u[0].tanh();
                g[0] = 1.0 - t * t;
            },
            |u, h| {
                let t = u[0].tanh();
                h[0] = -2.0 * t * (1.0 - t * t);
            },
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_args(&self) -> usize {
        self.indices.len()
    }

    fn check_indices(&self, fam: &TestFamily) -> Result<()> {
        if let Some(bad) = self.indices.iter().find(|i| **i >= fam.len()) {
            return Err(Error::invalid(
                "cylinder.indices",
                format!("index {bad} out of range for a family of {}", fam.len()),
            ));
        }
        Ok(())
    }

    /// The selected weighted coordinates of `μ`.
    pub fn coords(&self, mu: &ParticleMeasure, fam: &TestFamily) -> Result<Vec<f64>> {
        self.check_indices(fam)?;
        self.indices
            .iter()
            .map(|&i| Ok(fam.scale(i) * mu.integrate(fam.raw(i))?))
            .collect()
    }

    pub fn eval_coords(&self, z: &[f64]) -> f64 {
        (self.outer)(z)
    }

    pub fn grad_coords(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_args()];
        (self.outer_grad)(z, &mut g);
        g
    }

    pub fn hess_coords(&self, z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.n_args() * self.n_args()];
        (self.outer_hess)(z, &mut h);
        h
    }

    /// `F(μ)`.
    pub fn eval(&self, mu: &ParticleMeasure, fam: &TestFamily) -> Result<f64> {
        Ok(self.eval_coords(&self.coords(mu, fam)?))
    }
}

/// The measure-space gradient of a cylinder function at `μ`: the vector
/// field `x ↦ Σ_k ∂_k f(z) ∇h_{i_k}(x)` with frozen coefficients.
#[derive(Debug, Clone)]
pub struct GradientField<'a> {
    fam: &'a TestFamily,
    indices: Vec<usize>,
    coeffs: Vec<f64>,
}

impl<'a> GradientField<'a> {
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = self.fam.dim();
        let mut g = vec![0.0; d];
        for (idx, coeff) in self.indices.iter().zip(&self.coeffs) {
            self.fam.raw(*idx).gradient_into(x, &mut g);
            let s = coeff * self.fam.scale(*idx);
            for i in 0..d {
                out[i] += s * g[i];
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.fam.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// Tangent-space pairing `⟨∇F(μ), σ⟩_{L²(μ)} = Σ_m w_m ∇F(x_m)·σ(x_m)`.
    pub fn pair_field<F>(&self, mu: &ParticleMeasure, mut sigma: F) -> f64
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let d = self.fam.dim();
        let mut gf = vec![0.0; d];
        let mut sf = vec![0.0; d];
        let mut acc = 0.0;
        for m in 0..mu.n_points() {
            let x = mu.point(m);
            self.eval_into(x, &mut gf);
            sigma(x, &mut sf);
            let dot: f64 = gf.iter().zip(&sf).map(|(a, b)| a * b).sum();
            acc += mu.weights()[m] * dot;
        }
        acc
    }
}

/// Gradient of `F` on the measure space at `μ`, as an evaluable field.
pub fn grad_sp<'a>(
    cyl: &CylinderFunction,
    mu: &ParticleMeasure,
    fam: &'a TestFamily,
) -> Result<GradientField<'a>> {
    let z = cyl.coords(mu, fam)?;
    Ok(GradientField {
        fam,
        indices: cyl.indices().to_vec(),
        coeffs: cyl.grad_coords(&z),
    })
}

/// Lifted first-order generator: `Σ_k ∂_k f(z) · ∫ L h_{i_k} dμ`. The
/// second-order `a∇` part acts through the dictionary's second derivatives,
/// so no regularity of `a` is used.
pub fn apply_lifted(
    cyl: &CylinderFunction,
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    fam: &TestFamily,
) -> Result<f64> {
    let z = cyl.coords(mu, fam)?;
    let grad = cyl.grad_coords(&z);
    let mut acc = 0.0;
    for (k, &i) in cyl.indices().iter().enumerate() {
        if grad[k] != 0.0 {
            acc += grad[k] * drift_coord(c, t, mu, fam, Chart::Weighted, i)?;
        }
    }
    Ok(acc)
}

/// A finite mixture of particle measures: weights `p_k ≥ 0` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLaw {
    pub weights: Vec<f64>,
    pub members: Vec<ParticleMeasure>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::invalid("ensemble.weights", "must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(
            "ensemble.weights",
            format!("must sum to 1 (got {total})"),
        ));
    }
    Ok(())
}

impl EnsembleLaw {
    pub fn new(weights: Vec<f64>, members: Vec<ParticleMeasure>) -> Result<Self> {
        if weights.len() != members.len() || members.is_empty() {
            return Err(Error::DimensionMismatch(
                "ensemble weights and members must match and be nonempty".into(),
            ));
        }
        check_weights(&weights)?;
        let dim = members[0].dim();
        if members.iter().any(|m| m.dim() != dim) {
            return Err(Error::DimensionMismatch(
                "ensemble members must share a dimension".into(),
            ));
        }
        Ok(EnsembleLaw { weights, members })
    }

    /// Dirac ensemble concentrated on a single measure.
    pub fn dirac(mu: ParticleMeasure) -> Self {
        EnsembleLaw {
            weights: vec![1.0],
            members: vec![mu],
        }
    }

    /// `∫ F dΓ = Σ_k p_k F(μ^k)`.
    pub fn integrate_cylinder(&self, cyl: &CylinderFunction, fam: &TestFamily) -> Result<f64> {
        let mut acc = 0.0;
        for (p, m) in self.weights.iter().zip(&self.members) {
            acc += p * cyl.eval(m, fam)?;
        }
        Ok(acc)
    }
}

/// A finite mixture of measure paths on a common grid (the finitely
/// supported path-space law η).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePathLaw {
    pub weights: Vec<f64>,
    pub members: Vec<MeasurePath>,
}

impl EnsemblePathLaw {
    pub fn new(weights: Vec<f64>, members: Vec<MeasurePath>) -> Result<Self> {
        if weights.len() != members.len() || members.is_empty() {
            return Err(Error::DimensionMismatch(
                "ensemble weights and members must match and be nonempty".into(),
            ));
        }
        check_weights(&weights)?;
        let times = members[0].times();
        for m in &members[1..] {
            if m.times() != times {
                return Err(Error::DimensionMismatch(
                    "ensemble members must share the time grid".into(),
                ));
            }
        }
        Ok(EnsemblePathLaw { weights, members })
    }

    pub fn times(&self) -> &[f64] {
        self.members[0].times()
    }

    pub fn n_nodes(&self) -> usize {
        self.members[0].len()
    }

    /// Time marginal at node `k`.
    pub fn marginal(&self, k: usize) -> EnsembleLaw {
        EnsembleLaw {
            weights: self.weights.clone(),
            members: self.members.iter().map(|p| p.measure(k).clone()).collect(),
        }
    }
}

/// Residual of the lifted continuity equation along a mixture ensemble:
/// `R(t) = ∫F dΓ_t - ∫F dΓ_0 - ∫_0^t ∫ (lifted L F) dΓ_s ds`.
pub fn ce_residual(
    ens: &EnsemblePathLaw,
    c: &CoefficientField,
    cyl: &CylinderFunction,
    fam: &TestFamily,
) -> Result<ResidualCurve> {
    let nodes: Vec<(f64, f64)> = (0..ens.n_nodes())
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let t = ens.times()[k];
            let mut value = 0.0;
            let mut gen = 0.0;
            for (p, member) in ens.weights.iter().zip(&ens.members) {
                let mu = member.measure(k);
                value += p * cyl.eval(mu, fam)?;
                gen += p * apply_lifted(cyl, c, t, mu, fam)?;
            }
            Ok((value, gen))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = nodes.iter().map(|(v, _)| *v).collect();
    let gens: Vec<f64> = nodes.iter().map(|(_, g)| *g).collect();
    let dt = ens.members[0].dt();
    let integral = cumulative_trapezoid(&gens, dt);
    Ok(ResidualCurve {
        label: cyl.label().to_string(),
        times: ens.times().to_vec(),
        values: values
            .iter()
            .zip(&integral)
            .map(|(v, i)| (v - values[0]) - i)
            .collect(),
    })
}

/// The ensemble transferred to raw sequence-space coordinates: per node, the
/// weighted point set `{(p_k, (μ^k_t(g_i))_i)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCoordinatePath {
    pub weights: Vec<f64>,
    pub members: Vec<CoordinatePath>,
}

pub fn transfer_coords(ens: &EnsemblePathLaw, fam: &TestFamily) -> Result<EnsembleCoordinatePath> {
    let members = ens
        .members
        .iter()
        .map(|p| p.coordinate_path(fam, Chart::Raw))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleCoordinatePath {
        weights: ens.weights.clone(),
        members,
    })
}

/// Residual of the sequence-space coordinate equation along one path:
/// coordinate `i` must satisfy `z_i(t) - z_i(0) = ∫ B_i(s, μ_s) ds`. The
/// drift is always evaluated on the source measure path (the chart is never
/// inverted), which makes each series identical to the weak residual of the
/// corresponding raw dictionary member.
pub fn rinfty_ode_residual(
    zpath: &CoordinatePath,
    c: &CoefficientField,
    source: &MeasurePath,
    fam: &TestFamily,
) -> Result<Vec<ResidualCurve>> {
    if zpath.times != source.times() {
        return Err(Error::DimensionMismatch(
            "coordinate path and source path must share the time grid".into(),
        ));
    }
    let n_coords = zpath.n_coords().min(fam.len());
    let dt = source.dt();
    (0..n_coords)
        .into_par_iter()
        .map(|i| -> Result<ResidualCurve> {
            let drifts = source
                .times()
                .iter()
                .enumerate()
                .map(|(k, t)| drift_coord(c, *t, source.measure(k), fam, Chart::Raw, i))
                .collect::<Result<Vec<_>>>()?;
            let integral = cumulative_trapezoid(&drifts, dt);
            let values: Vec<f64> = zpath
                .coords
                .iter()
                .zip(&integral)
                .map(|(z, acc)| (z[i] - zpath.coords[0][i]) - acc)
                .collect();
            Ok(ResidualCurve {
                label: format!("z_{}", i + 1),
                times: zpath.times.clone(),
                values,
            })
        })
        .collect()
}

/// Bundle member paths into a path-space mixture together with its exact
/// time marginals. The marginal identity is bookkeeping and is re-verified
/// bit-exactly by [`marginals_exact`].
pub fn superposition_assemble(
    members: Vec<MeasurePath>,
    weights: Vec<f64>,
) -> Result<(EnsemblePathLaw, Vec<EnsembleLaw>)> {
    let eta = EnsemblePathLaw::new(weights, members)?;
    let marginals = (0..eta.n_nodes()).map(|k| eta.marginal(k)).collect();
    Ok((eta, marginals))
}

/// Bit-exact check that the marginals are the node projections of η.
pub fn marginals_exact(eta: &EnsemblePathLaw, marginals: &[EnsembleLaw]) -> bool {
    marginals.len() == eta.n_nodes()
        && marginals.iter().enumerate().all(|(k, gamma)| {
            gamma.weights == eta.weights
                && gamma
                    .members
                    .iter()
                    .zip(&eta.members)
                    .all(|(m, path)| m == path.measure(k))
        })
}

/// Options of the superposition audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Per-member residual tolerance.
    pub tol: f64,
    /// Number of leading raw dictionary members checked per path.
    pub n_check: usize,
    /// Cylinder battery: coordinates, pairwise products and tanh probes of
    /// the first `battery_k` weighted coordinates.
    pub battery_k: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            tol: 0.05,
            n_check: 5,
            battery_k: 5,
        }
    }
}

/// The standard cylinder battery: `u_k`, `u_k u_l`, `tanh(u_k)` for
/// `k, l < battery_k` (linear probes are the coordinate equations;
/// products and tanh probe the genuine nonlinearity of the lift).
pub fn cylinder_battery(battery_k: usize) -> Vec<CylinderFunction> {
    let mut battery = Vec::new();
    for k in 0..battery_k {
        battery.push(CylinderFunction::coordinate(k));
    }
    for k in 0..battery_k {
        for l in k..battery_k {
            battery.push(CylinderFunction::product(k, l));
        }
    }
    for k in 0..battery_k {
        battery.push(CylinderFunction::tanh_of(k));
    }
    battery
}

/// Result of the constructive superposition audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionReport {
    /// η-mass of members whose weak residual stays below tolerance.
    pub mass_fraction: f64,
    /// Max weak residual per member over the first `n_check` dictionary members.
    pub member_max_residuals: Vec<f64>,
    /// `(cylinder label, max_t |R|)` for the lifted continuity battery.
    pub battery: Vec<(String, f64)>,
    /// Bit-exact marginal identity flag.
    pub marginal_identity: bool,
    pub options: AuditOptions,
}

impl SuperpositionReport {
    pub fn battery_max(&self) -> f64 {
        self.battery.iter().fold(0.0f64, |a, (_, v)| a.max(*v))
    }
}

/// Audit a constructed path-space mixture: (a) the η-mass fraction of
/// members that solve the nonlinear equation to tolerance, (b) the lifted
/// continuity residual of the marginal flow over the cylinder battery,
/// (c) the exact marginal identity.
pub fn superposition_audit(
    eta: &EnsemblePathLaw,
    c: &CoefficientField,
    fam: &TestFamily,
    opts: AuditOptions,
) -> Result<SuperpositionReport> {
    let n_check = opts.n_check.min(fam.len());
    let phis: Vec<_> = (0..n_check).map(|i| fam.raw(i).clone()).collect();
    let labels: Vec<String> = (1..=n_check).map(|i| format!("g_{i}")).collect();
    let member_max_residuals = eta
        .members
        .iter()
        .map(|path| -> Result<f64> {
            let curves = weak_residuals_batch(path, c, &phis, &labels)?;
            Ok(curves.iter().map(ResidualCurve::max_abs).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<_>>>()?;
    let mass_fraction = eta
        .weights
        .iter()
        .zip(&member_max_residuals)
        .filter(|(_, r)| **r <= opts.tol)
        .map(|(p, _)| p)
        .sum();
    let battery = cylinder_battery(opts.battery_k)
        .into_iter()
        .map(|cyl| -> Result<(String, f64)> {
            let r = ce_residual(eta, c, &cyl, fam)?;
            Ok((cyl.label().to_string(), r.max_abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    let marginals: Vec<EnsembleLaw> = (0..eta.n_nodes()).map(|k| eta.marginal(k)).collect();
    Ok(SuperpositionReport {
        mass_fraction,
        member_max_residuals,
        battery,
        marginal_identity: marginals_exact(eta, &marginals),
        options: opts,
    })
}
