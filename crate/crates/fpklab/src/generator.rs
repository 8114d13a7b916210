//! Coefficient fields `(a, b, σ)` and the actions derived from them: the
//! pointwise second-order generator `a:D²φ + b·∇φ`, its particle integrals
//! against a measure, the coordinate fields obtained by pairing with the
//! dictionaries, and integrability reports.
//!
//! Evaluators see the full particle measure, so nonlocal dependence (on the
//! mean, the total mass, ...) is expressible. Evaluation is two-staged: a
//! `prepare(t, μ)` pass extracts the measure statistics once, then the
//! pointwise closures run per particle. That keeps mean-field models at
//! O(N) per step instead of O(N²).

use crate::error::{Error, Result};
use crate::measure::{MeasurePath, ParticleMeasure};
use crate::testfn::{TestFamily, TestFunction};
use crate::util::cumulative_trapezoid;
use crate::Chart;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Eigenvalues of `a` may dip this far below zero before the model is
/// rejected (eigensolver jitter).
pub const PSD_TOL_A: f64 = 1e-10;
/// Same allowance for `2a - σσᵀ` in the conditional diffusion factor.
pub const PSD_TOL_COND: f64 = 1e-8;

/// Declared sup bounds of the coefficient components. `sup_b` and `sup_a`
/// may be infinite; `sup_sigma` must be finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub sup_a: f64,
    pub sup_b: f64,
    pub sup_sigma: f64,
}

/// Measure statistics handed to the pointwise evaluators: the time, the
/// total mass and the mass-normalized mean of the prepared measure.
#[derive(Debug, Clone)]
pub struct Context {
    pub t: f64,
    pub mass: f64,
    pub mean: Vec<f64>,
}

impl Context {
    fn from_measure(t: f64, mu: &ParticleMeasure) -> Self {
        let d = mu.dim();
        let mass = mu.total_mass();
        let mut mean = vec![0.0; d];
        for m in 0..mu.n_points() {
            let w = mu.weights()[m];
            for (i, mi) in mean.iter_mut().enumerate() {
                *mi += w * mu.point(m)[i];
            }
        }
        if mass > 0.0 {
            for mi in &mut mean {
                *mi /= mass;
            }
        }
        Context { t, mass, mean }
    }
}

type PointFn = dyn Fn(&Context, &[f64], &mut [f64]) + Send + Sync;

/// The triple `(a, b, σ)` as evaluable maps of `(t, μ, x)`.
#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    dim: usize,
    noise_dim: usize,
    bounds: CoefficientBounds,
    /// True when `a` and `σ` do not depend on `x`; solvers then factor the
    /// diffusion once per step instead of once per particle.
    uniform_diffusion: bool,
    drift: Arc<PointFn>,
    diffusion: Arc<PointFn>,
    noise: Arc<PointFn>,
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl CoefficientField {
    /// Assemble a field from raw closures. `drift` writes `dim` entries,
    /// `diffusion` writes the row-major `dim×dim` matrix `a`, `noise` the
    /// row-major `dim×noise_dim` matrix `σ`.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: &str,
        dim: usize,
        noise_dim: usize,
        bounds: CoefficientBounds,
        uniform_diffusion: bool,
        drift: impl Fn(&Context, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&Context, &[f64], &mut [f64]) + Send + Sync + 'static,
        noise: impl Fn(&Context, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("model.dim", "must be >= 1"));
        }
        if !bounds.sup_sigma.is_finite() {
            return Err(Error::invalid("model.sigma", "must declare a finite bound"));
        }
        Ok(CoefficientField {
            name: name.to_string(),
            dim,
            noise_dim,
            bounds,
            uniform_diffusion,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            noise: Arc::new(noise),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn bounds(&self) -> CoefficientBounds {
        self.bounds
    }

    pub fn uniform_diffusion(&self) -> bool {
        self.uniform_diffusion
    }

    /// Extract the measure statistics once; the returned handle evaluates
    /// pointwise quantities at this `(t, μ)`.
    pub fn prepare<'f>(&'f self, t: f64, mu: &ParticleMeasure) -> Prepared<'f> {
        Prepared {
            field: self,
            ctx: Context::from_measure(t, mu),
        }
    }

    /// Convenience one-shot evaluators.
    pub fn drift_at(&self, t: f64, mu: &ParticleMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.prepare(t, mu).drift_into(x, &mut out);
        out
    }

    pub fn diffusion_at(&self, t: f64, mu: &ParticleMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.prepare(t, mu).diffusion_into(x, &mut out);
        out
    }

    pub fn noise_at(&self, t: f64, mu: &ParticleMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.prepare(t, mu).noise_into(x, &mut out);
        out
    }
}

/// Per-(t, μ) evaluation handle.
pub struct Prepared<'f> {
    field: &'f CoefficientField,
    ctx: Context,
}

/// Reusable buffers for the pointwise generator loops.
#[derive(Debug, Clone)]
pub struct Scratch {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Scratch {
    pub fn new(dim: usize, noise_dim: usize) -> Self {
        Scratch {
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
            a: vec![0.0; dim * dim],
            b: vec![0.0; dim],
            sigma: vec![0.0; dim * noise_dim],
        }
    }
}

impl<'f> Prepared<'f> {
    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.field.drift)(&self.ctx, x, out);
    }

    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.field.diffusion)(&self.ctx, x, out);
    }

    pub fn noise_into(&self, x: &[f64], out: &mut [f64]) {
        (self.field.noise)(&self.ctx, x, out);
    }

    /// Pointwise generator action `Σ_ij a_ij ∂²_ij φ(x) + Σ_i b_i ∂_i φ(x)`.
    pub fn apply_generator(&self, phi: &TestFunction, x: &[f64], s: &mut Scratch) -> Result<f64> {
        let d = self.field.dim;
        phi.jet_into(x, &mut s.grad, &mut s.hess);
        self.diffusion_into(x, &mut s.a);
        self.drift_into(x, &mut s.b);
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += s.a[i * d + j] * s.hess[i * d + j];
            }
            acc += s.b[i] * s.grad[i];
        }
        if !acc.is_finite() {
            return Err(Error::Numeric {
                context: "apply_generator".into(),
                detail: format!("non-finite generator value at x = {x:?}, t = {}", self.ctx.t),
            });
        }
        Ok(acc)
    }

    /// `(σ(x)ᵀ ∇φ(x))_α`, written into `out` (`noise_dim` entries).
    pub fn sigma_dot_grad(&self, phi: &TestFunction, x: &[f64], s: &mut Scratch, out: &mut [f64]) {
        let d = self.field.dim;
        let d1 = self.field.noise_dim;
        phi.gradient_into(x, &mut s.grad);
        self.noise_into(x, &mut s.sigma);
        for (alpha, o) in out.iter_mut().enumerate().take(d1) {
            let mut acc = 0.0;
            for i in 0..d {
                acc += s.sigma[i * d1 + alpha] * s.grad[i];
            }
            *o = acc;
        }
    }

    /// Symmetric PSD square root of `2a(x)` (deterministic particle factor).
    pub fn sqrt_two_a_into(&self, x: &[f64], s: &mut Scratch, out: &mut [f64]) -> Result<()> {
        let d = self.field.dim;
        self.diffusion_into(x, &mut s.a);
        let mut m = vec![0.0; d * d];
        for i in 0..d * d {
            m[i] = 2.0 * s.a[i];
        }
        psd_sqrt_into(&m, d, PSD_TOL_A, "2a", out)
    }

    /// Symmetric PSD square root `τ(x)` of `2a(x) - σσᵀ(x)`, the
    /// idiosyncratic factor of the conditional particle representation.
    pub fn conditional_sqrt_into(&self, x: &[f64], s: &mut Scratch, out: &mut [f64]) -> Result<()> {
        let d = self.field.dim;
        let d1 = self.field.noise_dim;
        self.diffusion_into(x, &mut s.a);
        self.noise_into(x, &mut s.sigma);
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut ssij = 0.0;
                for alpha in 0..d1 {
                    ssij += s.sigma[i * d1 + alpha] * s.sigma[j * d1 + alpha];
                }
                m[i * d + j] = 2.0 * s.a[i * d + j] - ssij;
            }
        }
        psd_sqrt_into(&m, d, PSD_TOL_COND, "2a - sigma sigma^T", out)
    }
}

fn psd_sqrt_into(m: &[f64], d: usize, tol: f64, label: &str, out: &mut [f64]) -> Result<()> {
    if d == 1 {
        let v = m[0];
        if v < -tol {
            return Err(Error::ModelInconsistency(format!(
                "{label} = {v} is not positive semidefinite"
            )));
        }
        out[0] = v.max(0.0).sqrt();
        return Ok(());
    }
    // Symmetrize before the eigensolve; asymmetry beyond jitter is a bug in
    // the caller-supplied field.
    let mut sym = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sym[(i, j)] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    let eig = sym.symmetric_eigen();
    for ev in eig.eigenvalues.iter() {
        if *ev < -tol {
            return Err(Error::ModelInconsistency(format!(
                "{label} has eigenvalue {ev} below -{tol}"
            )));
        }
    }
    let mut root = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                root[(i, j)] += lam * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = root[(i, j)];
        }
    }
    Ok(())
}

/// Generator action paired against a single point: `L_{t,μ} φ (x)`.
pub fn apply_generator(
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    phi: &TestFunction,
    x: &[f64],
) -> Result<f64> {
    if phi.dim() != c.dim() || mu.dim() != c.dim() || x.len() != c.dim() {
        return Err(Error::DimensionMismatch(
            "coefficients, measure, test function and point must share a dimension".into(),
        ));
    }
    let prep = c.prepare(t, mu);
    let mut s = Scratch::new(c.dim(), c.noise_dim());
    prep.apply_generator(phi, x, &mut s)
}

/// Coordinate drift `∫ L_{t,μ} φ_i dμ` for dictionary member `i` of the
/// requested chart. Under the weighted chart the value is bounded by
/// `(d²·sup|a| + d·sup|b|) · 2^-(i+1)`.
pub fn drift_coord(
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    fam: &TestFamily,
    chart: Chart,
    i: usize,
) -> Result<f64> {
    if mu.dim() != c.dim() || fam.dim() != c.dim() {
        return Err(Error::DimensionMismatch(
            "coefficients, measure and family must share a dimension".into(),
        ));
    }
    let prep = c.prepare(t, mu);
    let mut s = Scratch::new(c.dim(), c.noise_dim());
    let mut acc = 0.0;
    for m in 0..mu.n_points() {
        acc += mu.weights()[m] * prep.apply_generator(fam.raw(i), mu.point(m), &mut s)?;
    }
    Ok(match chart {
        Chart::Raw => acc,
        Chart::Weighted => fam.scale(i) * acc,
    })
}

/// Coordinate noise vector `(∫ σ^α·∇h_i dμ)_α` of the weighted dictionary.
pub fn noise_coord(
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    fam: &TestFamily,
    i: usize,
) -> Result<Vec<f64>> {
    if c.noise_dim() == 0 {
        return Err(Error::invalid("model.noise_dim", "must be >= 1"));
    }
    if mu.dim() != c.dim() || fam.dim() != c.dim() {
        return Err(Error::DimensionMismatch(
            "coefficients, measure and family must share a dimension".into(),
        ));
    }
    let prep = c.prepare(t, mu);
    let mut s = Scratch::new(c.dim(), c.noise_dim());
    let mut term = vec![0.0; c.noise_dim()];
    let mut acc = vec![0.0; c.noise_dim()];
    for m in 0..mu.n_points() {
        prep.sigma_dot_grad(fam.raw(i), mu.point(m), &mut s, &mut term);
        let w = mu.weights()[m];
        for (a, v) in acc.iter_mut().zip(&term) {
            *a += w * v;
        }
    }
    let scale = fam.scale(i);
    for a in &mut acc {
        *a *= scale;
    }
    Ok(acc)
}

/// Coordinate covariance `A_ij = Σ_α (∫σ^α·∇h_i dμ)(∫σ^α·∇h_j dμ)`;
/// symmetric and positive semidefinite as a matrix in `(i, j)`.
pub fn covariance_coord(
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    fam: &TestFamily,
    i: usize,
    j: usize,
) -> Result<f64> {
    let si = noise_coord(c, t, mu, fam, i)?;
    let sj = noise_coord(c, t, mu, fam, j)?;
    Ok(si.iter().zip(&sj).map(|(x, y)| x * y).sum())
}

/// Idiosyncratic diffusion factor `τ(t,μ,x)` with `ττᵀ = 2a - σσᵀ`,
/// row-major `d×d`. Fails with a model-inconsistency error when the
/// conditional representation does not exist.
pub fn diffusion_sqrt(
    c: &CoefficientField,
    t: f64,
    mu: &ParticleMeasure,
    x: &[f64],
) -> Result<Vec<f64>> {
    let prep = c.prepare(t, mu);
    let mut s = Scratch::new(c.dim(), c.noise_dim());
    let mut out = vec![0.0; c.dim() * c.dim()];
    prep.conditional_sqrt_into(x, &mut s, &mut out)?;
    Ok(out)
}

/// Time-integrated particle L¹ norms of the coefficients along a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    /// `∫_0^T Σ_ij ∫ |a_ij| dμ_t dt`
    pub a_l1: f64,
    /// `∫_0^T Σ_i ∫ |b_i| dμ_t dt`
    pub b_l1: f64,
    /// `∫_0^T Σ_ik ∫ |σ_ik|² dμ_t dt`
    pub sigma_sq: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Trapezoid-in-time report of the global integrability quantities.
pub fn integrability_report(
    c: &CoefficientField,
    path: &MeasurePath,
    threshold: f64,
) -> Result<IntegrabilityReport> {
    let d = c.dim();
    let d1 = c.noise_dim();
    let mut a_nodes = Vec::with_capacity(path.len());
    let mut b_nodes = Vec::with_capacity(path.len());
    let mut s_nodes = Vec::with_capacity(path.len());
    let mut s = Scratch::new(d, d1);
    for (k, t) in path.times().iter().enumerate() {
        let mu = path.measure(k);
        let prep = c.prepare(*t, mu);
        let (mut fa, mut fb, mut fs) = (0.0, 0.0, 0.0);
        for m in 0..mu.n_points() {
            let w = mu.weights()[m];
            let x = mu.point(m);
            prep.diffusion_into(x, &mut s.a);
            prep.drift_into(x, &mut s.b);
            fa += w * s.a.iter().map(|v| v.abs()).sum::<f64>();
            fb += w * s.b.iter().map(|v| v.abs()).sum::<f64>();
            if d1 > 0 {
                prep.noise_into(x, &mut s.sigma);
                fs += w * s.sigma.iter().map(|v| v * v).sum::<f64>();
            }
        }
        a_nodes.push(fa);
        b_nodes.push(fb);
        s_nodes.push(fs);
    }
    let dt = path.dt();
    let a_l1 = *cumulative_trapezoid(&a_nodes, dt).last().unwrap();
    let b_l1 = *cumulative_trapezoid(&b_nodes, dt).last().unwrap();
    let sigma_sq = *cumulative_trapezoid(&s_nodes, dt).last().unwrap();
    let finite = a_l1.is_finite() && b_l1.is_finite() && sigma_sq.is_finite();
    Ok(IntegrabilityReport {
        a_l1,
        b_l1,
        sigma_sq,
        threshold,
        pass: finite && a_l1 <= threshold && b_l1 <= threshold && sigma_sq <= threshold,
    })
}

// ---------------------------------------------------------------------------
// Preset library
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum DriftSpec {
    Zero,
    /// Every component equal to `c`.
    Const(f64),
    /// `b(x) = -x` (mean reversion to the origin).
    Restoring,
    /// `b(x) = -(x - mean(μ))` (mean-field attraction to the cloud mean).
    MeanField,
    /// `b_i(x) = -tanh(x_i)`: bounded mean reversion.
    BoundedRestoring,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DiffusionSpec {
    Zero,
    /// `a = c·Id`.
    Const(f64),
    /// `a = c·mass(μ)·Id` (porous-medium-like degeneracy).
    Porous(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NoiseSpec {
    Zero,
    /// `σ_iα = c` for `i = α`, zero otherwise.
    Const(f64),
}

fn parse_scaled(spec: &str, name: &str) -> Result<f64> {
    spec.split(':')
        .nth(1)
        .ok_or_else(|| Error::UnknownModel(format!("{name}: missing parameter in `{spec}`")))?
        .parse::<f64>()
        .map_err(|_| Error::UnknownModel(format!("{name}: bad parameter in `{spec}`")))
}

impl DriftSpec {
    fn parse(spec: &str) -> Result<Self> {
        match spec.split(':').next().unwrap_or("") {
            "zero" => Ok(DriftSpec::Zero),
            "const" => Ok(DriftSpec::Const(parse_scaled(spec, "model.b")?)),
            "restoring" => Ok(DriftSpec::Restoring),
            "meanfield" => Ok(DriftSpec::MeanField),
            "tanh" => Ok(DriftSpec::BoundedRestoring),
            _ => Err(Error::UnknownModel(format!("model.b = `{spec}`"))),
        }
    }

    fn bound(&self) -> f64 {
        match self {
            DriftSpec::Zero => 0.0,
            DriftSpec::Const(c) => c.abs(),
            DriftSpec::Restoring | DriftSpec::MeanField => f64::INFINITY,
            DriftSpec::BoundedRestoring => 1.0,
        }
    }

    fn eval(&self, ctx: &Context, x: &[f64], out: &mut [f64]) {
        match self {
            DriftSpec::Zero => out.fill(0.0),
            DriftSpec::Const(c) => out.fill(*c),
            DriftSpec::Restoring => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -xi;
                }
            }
            DriftSpec::MeanField => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -(x[i] - ctx.mean[i]);
                }
            }
            DriftSpec::BoundedRestoring => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -xi.tanh();
                }
            }
        }
    }
}

impl DiffusionSpec {
    fn parse(spec: &str) -> Result<Self> {
        match spec.split(':').next().unwrap_or("") {
            "zero" => Ok(DiffusionSpec::Zero),
            "const" => Ok(DiffusionSpec::Const(parse_scaled(spec, "model.a")?)),
            "porous" => Ok(DiffusionSpec::Porous(parse_scaled(spec, "model.a")?)),
            _ => Err(Error::UnknownModel(format!("model.a = `{spec}`"))),
        }
    }

    fn bound(&self) -> f64 {
        match self {
            DiffusionSpec::Zero => 0.0,
            DiffusionSpec::Const(c) => c.abs(),
            DiffusionSpec::Porous(c) => c.abs(),
        }
    }

    fn eval(&self, ctx: &Context, _x: &[f64], out: &mut [f64]) {
        let d = ctx.mean.len();
        out.fill(0.0);
        let diag = match self {
            DiffusionSpec::Zero => 0.0,
            DiffusionSpec::Const(c) => *c,
            DiffusionSpec::Porous(c) => *c * ctx.mass,
        };
        for i in 0..d {
            out[i * d + i] = diag;
        }
    }
}

impl NoiseSpec {
    fn parse(spec: &str) -> Result<Self> {
        match spec.split(':').next().unwrap_or("") {
            "zero" => Ok(NoiseSpec::Zero),
            "const" => Ok(NoiseSpec::Const(parse_scaled(spec, "model.sigma")?)),
            _ => Err(Error::UnknownModel(format!("model.sigma = `{spec}`"))),
        }
    }

    fn bound(&self) -> f64 {
        match self {
            NoiseSpec::Zero => 0.0,
            NoiseSpec::Const(c) => c.abs(),
        }
    }

    fn eval(&self, d: usize, d1: usize, out: &mut [f64]) {
        out.fill(0.0);
        if let NoiseSpec::Const(c) = self {
            for i in 0..d.min(d1) {
                out[i * d1 + i] = *c;
            }
        }
    }
}

impl CoefficientField {
    /// Build a field from the component spec strings used in config files:
    /// `model.a ∈ {zero, const:c, porous:c}`, `model.b ∈ {zero, const:c,
    /// restoring, meanfield, tanh}`, `model.sigma ∈ {zero, const:c}`.
    pub fn from_specs(
        name: &str,
        dim: usize,
        noise_dim: usize,
        a_spec: &str,
        b_spec: &str,
        sigma_spec: &str,
    ) -> Result<Self> {
        let a = DiffusionSpec::parse(a_spec)?;
        let b = DriftSpec::parse(b_spec)?;
        let sigma = NoiseSpec::parse(sigma_spec)?;
        let bounds = CoefficientBounds {
            sup_a: a.bound(),
            sup_b: b.bound(),
            sup_sigma: sigma.bound(),
        };
        let d1 = noise_dim;
        CoefficientField::custom(
            name,
            dim,
            noise_dim,
            bounds,
            true,
            move |ctx, x, out| b.eval(ctx, x, out),
            move |ctx, x, out| a.eval(ctx, x, out),
            move |_ctx, _x, out| sigma.eval(dim, d1, out),
        )
    }

    /// Named whole-model presets. `p2` accepts parameters as in
    /// `p2:rho=0.5,tau=1`.
    pub fn preset(spec: &str, dim: usize, noise_dim: usize) -> Result<Self> {
        let mut parts = spec.splitn(2, ':');
        let head = parts.next().unwrap_or("");
        match head {
            "zero" => Self::from_specs(spec, dim, noise_dim, "zero", "zero", "zero"),
            "ou" => Self::from_specs(spec, dim, noise_dim, "const:0.5", "restoring", "zero"),
            "meanfield" => {
                Self::from_specs(spec, dim, noise_dim, "const:0.5", "meanfield", "zero")
            }
            "porous" => Self::from_specs(spec, dim, noise_dim, "porous:1.0", "zero", "zero"),
            "tanh" => Self::from_specs(spec, dim, noise_dim, "const:0.5", "tanh", "zero"),
            // Pure common noise: 2a = σσᵀ, so the idiosyncratic factor is 0
            // and every particle rides the shared Wiener path.
            "p1" => Self::from_specs(spec, dim, noise_dim.max(1), "const:0.5", "zero", "const:1.0"),
            "p2" => {
                let mut rho = 0.5;
                let mut tau = 1.0;
                if let Some(args) = parts.next() {
                    for kv in args.split(',') {
                        let mut it = kv.splitn(2, '=');
                        let key = it.next().unwrap_or("");
                        let val: f64 = it
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| Error::UnknownModel(format!("p2 parameter `{kv}`")))?;
                        match key {
                            "rho" => rho = val,
                            "tau" => tau = val,
                            _ => return Err(Error::UnknownModel(format!("p2 parameter `{kv}`"))),
                        }
                    }
                }
                let a = 0.5 * (tau * tau + rho * rho);
                Self::from_specs(
                    spec,
                    dim,
                    noise_dim.max(1),
                    &format!("const:{a}"),
                    "restoring",
                    &format!("const:{rho}"),
                )
            }
            _ => Err(Error::UnknownModel(spec.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParticleMeasure;
    use crate::rng::StreamFactory;
    use crate::testfn::{make_bump, FamilyParams, TestFamily};

    fn family() -> TestFamily {
        TestFamily::enumerate(FamilyParams::new(1, 2)).unwrap()
    }

    fn cloud(seed: u64, n: usize) -> ParticleMeasure {
        let mut rng = StreamFactory::new(seed).stream("cloud", &[0]);
        ParticleMeasure::sample_gaussian(1, n, &[0.1], 0.8, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn null_generator_vanishes() {
        let c = CoefficientField::preset("zero", 1, 0).unwrap();
        let phi = make_bump(&[0.0], 1.0, 1.0).unwrap();
        let mu = cloud(1, 10);
        assert_eq!(apply_generator(&c, 0.3, &mu, &phi, &[0.2]).unwrap(), 0.0);
    }

    #[test]
    fn pure_drift_reduces_to_derivative() {
        let c = CoefficientField::from_specs("drift1", 1, 0, "zero", "const:1.0", "zero").unwrap();
        let phi = make_bump(&[0.0], 1.0, 1.0).unwrap();
        let mu = cloud(2, 5);
        for x in [-0.5, 0.0, 0.4, 0.9] {
            let lhs = apply_generator(&c, 0.0, &mu, &phi, &[x]).unwrap();
            assert!((lhs - phi.gradient(&[x])[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn ou_generator_matches_finite_difference_oracle() {
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let phi = make_bump(&[0.0], 1.5, 1.0).unwrap();
        let mu = cloud(3, 5);
        // h = 1e-5 for the first difference; the second difference needs a
        // larger step to stay above the f64 cancellation floor.
        let (h1, h2) = (1e-5, 1e-4);
        for x in [-0.9, -0.2, 0.3, 1.1] {
            let d1 = (phi.value(&[x + h1]) - phi.value(&[x - h1])) / (2.0 * h1);
            let d2 =
                (phi.value(&[x + h2]) - 2.0 * phi.value(&[x]) + phi.value(&[x - h2])) / (h2 * h2);
            let oracle = 0.5 * d2 - x * d1;
            let lhs = apply_generator(&c, 0.0, &mu, &phi, &[x]).unwrap();
            assert!((lhs - oracle).abs() < 1e-5, "x={x}: {lhs} vs {oracle}");
        }
    }

    #[test]
    fn drift_coord_null_and_centered() {
        let fam = family();
        let zero = CoefficientField::preset("zero", 1, 0).unwrap();
        let mu = cloud(4, 20);
        assert_eq!(
            drift_coord(&zero, 0.0, &mu, &fam, Chart::Weighted, 0).unwrap(),
            0.0
        );
        // Pure unit drift at a Dirac sitting at a bump center: the bump
        // gradient vanishes there.
        let c = CoefficientField::from_specs("d", 1, 0, "zero", "const:1.0", "zero").unwrap();
        let dirac = ParticleMeasure::dirac(&[0.0], 1.0).unwrap();
        let v = drift_coord(&c, 0.0, &dirac, &fam, Chart::Weighted, 0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn drift_coord_matches_bruteforce_sum() {
        let fam = family();
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let mu = cloud(5, 50);
        for i in 0..4 {
            let got = drift_coord(&c, 0.2, &mu, &fam, Chart::Raw, i).unwrap();
            let g = fam.raw(i);
            let mut brute = 0.0;
            for m in 0..mu.n_points() {
                let x = mu.point(m)[0];
                let hess = g.hessian(&[x])[0];
                let grad = g.gradient(&[x])[0];
                brute += mu.weights()[m] * (0.5 * hess + (-x) * grad);
            }
            assert!((got - brute).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn weighted_drift_coord_obeys_dyadic_bound() {
        let fam = TestFamily::enumerate(FamilyParams::new(1, 3)).unwrap();
        let c = CoefficientField::preset("tanh", 1, 0).unwrap();
        let bounds = c.bounds();
        let cc = bounds.sup_a + bounds.sup_b; // d = 1
        for seed in 0..20 {
            let mu = cloud(100 + seed, 30);
            for i in 0..fam.len() {
                let b = drift_coord(&c, 0.0, &mu, &fam, Chart::Weighted, i).unwrap();
                assert!(
                    b.abs() <= cc * fam.weight(i),
                    "i={i}: |{b}| > {}",
                    cc * fam.weight(i)
                );
            }
        }
    }

    #[test]
    fn noise_coord_dirac_and_bruteforce() {
        let fam = family();
        let zero = CoefficientField::preset("zero", 1, 1).unwrap();
        let mu = cloud(6, 10);
        assert_eq!(noise_coord(&zero, 0.0, &mu, &fam, 1).unwrap(), vec![0.0]);

        let c = CoefficientField::from_specs("n", 1, 1, "const:0.5", "zero", "const:1.0").unwrap();
        let x0 = 0.7;
        let dirac = ParticleMeasure::dirac(&[x0], 1.0).unwrap();
        let got = noise_coord(&c, 0.0, &dirac, &fam, 1).unwrap();
        let h1 = fam.weighted_fn(1);
        assert!((got[0] - h1.gradient(&[x0])[0]).abs() < 1e-14);

        let mu2 = cloud(7, 40);
        let got2 = noise_coord(&c, 0.0, &mu2, &fam, 2).unwrap();
        let h2 = fam.weighted_fn(2);
        let mut brute = 0.0;
        for m in 0..mu2.n_points() {
            brute += mu2.weights()[m] * h2.gradient(mu2.point(m))[0];
        }
        assert!((got2[0] - brute).abs() < 1e-13);
    }

    #[test]
    fn covariance_coord_symmetric_and_psd() {
        let fam = family();
        let c = CoefficientField::preset("p1", 1, 1).unwrap();
        let n = 5;
        for seed in 0..10 {
            let mu = cloud(200 + seed, 25);
            let mut gram = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let v = covariance_coord(&c, 0.1, &mu, &fam, i, j).unwrap();
                    gram[(i, j)] = v;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    assert!((gram[(i, j)] - gram[(j, i)]).abs() < 1e-15);
                }
            }
            let eig = gram.clone().symmetric_eigen();
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-10, "eigenvalue {ev}");
            }
        }
        let zero = CoefficientField::preset("zero", 1, 1).unwrap();
        let mu = cloud(1, 5);
        assert_eq!(covariance_coord(&zero, 0.0, &mu, &fam, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn diffusion_sqrt_scalar_cases() {
        let mu = cloud(8, 4);
        let ou = CoefficientField::preset("ou", 1, 0).unwrap();
        let tau = diffusion_sqrt(&ou, 0.0, &mu, &[0.0]).unwrap();
        assert!((tau[0] - 1.0).abs() < 1e-14);

        // Pure common noise: 2a = σσᵀ exactly, so τ = 0.
        let p1 = CoefficientField::preset("p1", 1, 1).unwrap();
        let tau = diffusion_sqrt(&p1, 0.0, &mu, &[0.3]).unwrap();
        assert_eq!(tau[0], 0.0);
    }

    #[test]
    fn diffusion_sqrt_reconstructs_random_psd() {
        use rand::Rng;
        let mut rng = StreamFactory::new(17).stream("cloud", &[9]);
        for d in [2usize, 3] {
            // random PSD a = R Rᵀ/2 so 2a - 0 = R Rᵀ
            let r: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut target = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        target[i * d + j] += r[i * d + k] * r[j * d + k];
                    }
                }
            }
            let a_mat = target.clone();
            let bounds = CoefficientBounds {
                sup_a: 10.0,
                sup_b: 0.0,
                sup_sigma: 0.0,
            };
            let c = CoefficientField::custom(
                "random-psd",
                d,
                0,
                bounds,
                true,
                |_c, _x, out| out.fill(0.0),
                move |_c, _x, out| {
                    for (o, v) in out.iter_mut().zip(&a_mat) {
                        *o = 0.5 * v;
                    }
                },
                |_c, _x, out| out.fill(0.0),
            )
            .unwrap();
            let mu = ParticleMeasure::dirac(&vec![0.0; d], 1.0).unwrap();
            let tau = diffusion_sqrt(&c, 0.0, &mu, &vec![0.0; d]).unwrap();
            for i in 0..d {
                for j in 0..d {
                    let mut rec = 0.0;
                    for k in 0..d {
                        rec += tau[i * d + k] * tau[j * d + k];
                    }
                    assert!(
                        (rec - target[i * d + j]).abs() < 1e-10,
                        "d={d} ({i},{j}): {rec} vs {}",
                        target[i * d + j]
                    );
                }
            }
        }
    }

    #[test]
    fn diffusion_sqrt_rejects_inconsistent_model() {
        // 2a - σσᵀ = 1 - 4 < 0: no conditional representation.
        let c = CoefficientField::from_specs("bad", 1, 1, "const:0.5", "zero", "const:2.0").unwrap();
        let mu = cloud(9, 3);
        let err = diffusion_sqrt(&c, 0.0, &mu, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::ModelInconsistency(_)));
    }

    #[test]
    fn integrability_report_null_and_bounded() {
        let mu = cloud(10, 30);
        let path = MeasurePath::new(
            vec![0.0, 0.5, 1.0],
            vec![mu.clone(), mu.clone(), mu.clone()],
        )
        .unwrap();
        let zero = CoefficientField::preset("zero", 1, 0).unwrap();
        let rep = integrability_report(&zero, &path, 1.0).unwrap();
        assert_eq!((rep.a_l1, rep.b_l1, rep.sigma_sq), (0.0, 0.0, 0.0));
        assert!(rep.pass);

        let c = CoefficientField::preset("tanh", 1, 0).unwrap();
        let rep = integrability_report(&c, &path, 10.0).unwrap();
        assert!(rep.a_l1 <= 1.0 * 0.5 + 1e-12, "a_l1 = {}", rep.a_l1);
        assert!(rep.b_l1 <= 1.0 * 1.0 + 1e-12, "b_l1 = {}", rep.b_l1);
        assert!(rep.pass);
    }

    #[test]
    fn integrability_report_matches_bruteforce() {
        let c = CoefficientField::preset("ou", 1, 0).unwrap();
        let a = cloud(11, 15);
        let b = cloud(12, 15);
        let path = MeasurePath::new(vec![0.0, 0.25], vec![a.clone(), b.clone()]).unwrap();
        let rep = integrability_report(&c, &path, 100.0).unwrap();
        let node = |mu: &ParticleMeasure| -> f64 {
            (0..mu.n_points())
                .map(|m| mu.weights()[m] * mu.point(m)[0].abs())
                .sum()
        };
        let brute = 0.5 * (node(&a) + node(&b)) * 0.25;
        assert!((rep.b_l1 - brute).abs() < 1e-14);
    }

    #[test]
    fn preset_parser_rejects_unknown() {
        assert!(CoefficientField::preset("nope", 1, 0).is_err());
        assert!(CoefficientField::from_specs("x", 1, 0, "const", "zero", "zero").is_err());
    }
}
