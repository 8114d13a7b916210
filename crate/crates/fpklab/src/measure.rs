//! Weighted particle clouds as subprobability measures, their pairings with
//! test functions, and the coordinate charts into sequence space.
//!
//! A cloud `μ = Σ_m w_m δ_{x_m}` with `w_m ≥ 0`, `Σ w_m ≤ 1` is the particle
//! representation of a subprobability measure. All functionals the crate
//! verifies are integrals `μ(φ)`, which are exact on clouds. The raw chart
//! sends `μ` to the sequence `(μ(g_i))_i`; the weighted chart uses the
//! rescaled dictionary and obeys the coordinate bound `|μ(h_i)| ≤ 2^-i`,
//! which makes it a map into the square-summable sequences and yields a
//! pseudometric metrizing vague convergence in the truncation limit.

use crate::error::{Error, Result};
use crate::testfn::{TestFamily, TestFunction};
use crate::util::compensated_sum;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Tolerance on the total-mass invariant `Σ w_m ≤ 1`.
pub const MASS_TOL: f64 = 1e-12;

/// Which coordinate chart to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chart {
    /// Pairings with the raw dictionary members `g_i`.
    Raw,
    /// Pairings with the weighted members `h_i`; coordinate `i` (0-based)
    /// is bounded by `2^-(i+1)`.
    Weighted,
}

/// A finitely supported subprobability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeasure {
    pub(crate) dim: usize,
    /// Row-major particle positions, `n_points * dim` entries.
    pub(crate) points: Vec<f64>,
    pub(crate) weights: Vec<f64>,
}

impl ParticleMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = ParticleMeasure {
            dim,
            points,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    /// Unit point mass at `x` scaled by `mass`.
    pub fn dirac(x: &[f64], mass: f64) -> Result<Self> {
        ParticleMeasure::new(x.len(), x.to_vec(), vec![mass])
    }

    /// The zero measure on `R^dim`.
    pub fn zero(dim: usize) -> Self {
        ParticleMeasure {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Check the type invariants; loaders call this after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("measure.dim", "must be >= 1"));
        }
        if self.points.len() != self.weights.len() * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "points ({}) and weights ({}) disagree for dim {}",
                self.points.len(),
                self.weights.len(),
                self.dim
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("measure.weights", "must be finite and >= 0"));
        }
        let mass = compensated_sum(&self.weights);
        if mass > 1.0 + MASS_TOL {
            return Err(Error::invalid(
                "measure.weights",
                format!("total mass {mass} exceeds 1"),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.weights.len()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.points[m * self.dim..(m + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `μ(R^d) = Σ_m w_m` (compensated summation).
    pub fn total_mass(&self) -> f64 {
        compensated_sum(&self.weights)
    }

    /// `μ(f) = Σ_m w_m f(x_m)`; exact for the discrete measure.
    pub fn integrate(&self, f: &TestFunction) -> Result<f64> {
        if f.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "measure dim {} vs test function dim {}",
                self.dim,
                f.dim()
            )));
        }
        Ok((0..self.n_points())
            .map(|m| self.weights[m] * f.value(self.point(m)))
            .sum())
    }

    /// Raw chart: component `i` is `μ(g_i)`.
    pub fn raw_coords(&self, fam: &TestFamily) -> Result<Vec<f64>> {
        (0..fam.len()).map(|i| self.integrate(fam.raw(i))).collect()
    }

    /// Weighted chart: component `i` is `μ(h_i) = scale_i · μ(g_i)`.
    pub fn weighted_coords(&self, fam: &TestFamily) -> Result<Vec<f64>> {
        (0..fam.len())
            .map(|i| Ok(fam.scale(i) * self.integrate(fam.raw(i))?))
            .collect()
    }

    pub fn coords(&self, fam: &TestFamily, chart: Chart) -> Result<Vec<f64>> {
        match chart {
            Chart::Raw => self.raw_coords(fam),
            Chart::Weighted => self.weighted_coords(fam),
        }
    }

    /// Pushforward under `x ↦ map(x)` (weights unchanged).
    pub fn map_points<F>(&self, mut map: F) -> Self
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut points = vec![0.0; self.points.len()];
        for m in 0..self.n_points() {
            let (src, dst) = (
                self.point(m),
                &mut points[m * self.dim..(m + 1) * self.dim],
            );
            map(src, dst);
        }
        ParticleMeasure {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
        }
    }

    /// Equal-weight cloud of `n` i.i.d. Gaussian points with the given
    /// componentwise mean and standard deviation, total mass `mass`.
    pub fn sample_gaussian<R: Rng>(
        dim: usize,
        n: usize,
        mean: &[f64],
        std: f64,
        mass: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for mu in mean.iter().take(dim) {
                let z: f64 = StandardNormal.sample(rng);
                points.push(mu + std * z);
            }
        }
        ParticleMeasure::new(dim, points, vec![mass / n as f64; n])
    }

    /// Equal-weight cloud of `n` i.i.d. uniform points on the box
    /// `[lo, hi]^dim`, total mass `mass`.
    pub fn sample_uniform<R: Rng>(
        dim: usize,
        n: usize,
        lo: f64,
        hi: f64,
        mass: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for _ in 0..dim {
                points.push(rng.gen_range(lo..hi));
            }
        }
        ParticleMeasure::new(dim, points, vec![mass / n as f64; n])
    }

    /// Equal-weight resampling: `n` i.i.d. draws from the normalized cloud,
    /// each carrying `total_mass / n`.
    pub fn resample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Self> {
        let mass = self.total_mass();
        if self.n_points() == 0 || mass <= 0.0 {
            return Err(Error::invalid(
                "initial",
                "cannot resample from an empty or massless cloud",
            ));
        }
        let dist = rand::distributions::WeightedIndex::new(&self.weights)
            .map_err(|e| Error::invalid("measure.weights", e.to_string()))?;
        let mut points = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let m = dist.sample(rng);
            points.extend_from_slice(self.point(m));
        }
        ParticleMeasure::new(self.dim, points, vec![mass / n as f64; n])
    }
}

/// Euclidean distance of the weighted coordinate vectors: a pseudometric
/// that metrizes vague convergence as the truncation grows.
pub fn vague_distance(a: &ParticleMeasure, b: &ParticleMeasure, fam: &TestFamily) -> Result<f64> {
    let za = a.weighted_coords(fam)?;
    let zb = b.weighted_coords(fam)?;
    Ok(za
        .iter()
        .zip(&zb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Relative tolerance on grid uniformity.
pub const GRID_TOL: f64 = 1e-12;

/// A measure-valued path sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurePath {
    pub(crate) times: Vec<f64>,
    pub(crate) measures: Vec<ParticleMeasure>,
}

impl MeasurePath {
    pub fn new(times: Vec<f64>, measures: Vec<ParticleMeasure>) -> Result<Self> {
        let path = MeasurePath { times, measures };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.measures.len() {
            return Err(Error::DimensionMismatch(format!(
                "path has {} times and {} measures",
                self.times.len(),
                self.measures.len()
            )));
        }
        let dim = self.measures[0].dim();
        for m in &self.measures {
            m.validate()?;
            if m.dim() != dim {
                return Err(Error::DimensionMismatch(
                    "path members must share one dimension".into(),
                ));
            }
        }
        if self.times.len() > 1 {
            let dt = self.times[1] - self.times[0];
            if !(dt > 0.0) {
                return Err(Error::invalid("path.times", "must be strictly increasing"));
            }
            for w in self.times.windows(2) {
                let step = w[1] - w[0];
                if (step - dt).abs() > GRID_TOL * dt.max(1.0) {
                    return Err(Error::invalid("path.times", "grid must be uniform"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Grid spacing; zero for a single-node path.
    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn measure(&self, k: usize) -> &ParticleMeasure {
        &self.measures[k]
    }

    pub fn measures(&self) -> &[ParticleMeasure] {
        &self.measures
    }

    /// Apply a chart at every node.
    pub fn coordinate_path(&self, fam: &TestFamily, chart: Chart) -> Result<CoordinatePath> {
        let coords = self
            .measures
            .iter()
            .map(|m| m.coords(fam, chart))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoordinatePath {
            times: self.times.clone(),
            coords,
        })
    }
}

/// A sequence-space path: one coordinate vector per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatePath {
    pub times: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
}

impl CoordinatePath {
    pub fn n_coords(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    /// CSV rendering with columns `t, z_1, ..., z_N`.
    pub fn to_csv(&self) -> String {
        let n = self.n_coords();
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",z_{i}"));
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.coords) {
            out.push_str(&format!("{t}"));
            for z in row {
                out.push_str(&format!(",{z}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamFactory;
    use crate::testfn::{make_bump, FamilyParams, TestFamily};
    use proptest::prelude::*;

    fn family() -> TestFamily {
        TestFamily::enumerate(FamilyParams::new(1, 2)).unwrap()
    }

    fn random_cloud(seed: u64, n: usize, mass: f64) -> ParticleMeasure {
        let mut rng = StreamFactory::new(seed).stream("cloud", &[0]);
        ParticleMeasure::sample_gaussian(1, n, &[0.0], 1.0, mass, &mut rng).unwrap()
    }

    #[test]
    fn integrate_dirac_at_bump_center() {
        let f = make_bump(&[0.0], 1.0, 1.0).unwrap();
        let mu = ParticleMeasure::dirac(&[0.0], 1.0).unwrap();
        assert_eq!(mu.integrate(&f).unwrap(), 1.0);
        assert_eq!(ParticleMeasure::zero(1).integrate(&f).unwrap(), 0.0);
    }

    #[test]
    fn integrate_two_point_bruteforce() {
        let f = make_bump(&[0.3], 1.5, 2.0).unwrap();
        let mu = ParticleMeasure::new(1, vec![0.1, -0.4], vec![0.5, 0.5]).unwrap();
        let direct = 0.5 * f.value(&[0.1]) + 0.5 * f.value(&[-0.4]);
        assert_eq!(mu.integrate(&f).unwrap(), direct);
    }

    #[test]
    fn integrate_rejects_dim_mismatch() {
        let f = make_bump(&[0.0, 0.0], 1.0, 1.0).unwrap();
        let mu = ParticleMeasure::dirac(&[0.0], 1.0).unwrap();
        assert!(mu.integrate(&f).is_err());
    }

    #[test]
    fn charts_on_zero_and_remote_measures() {
        let fam = family();
        let zero = ParticleMeasure::zero(1);
        assert!(zero.raw_coords(&fam).unwrap().iter().all(|z| *z == 0.0));
        // All supports sit inside [-3, 3]; a Dirac far away sees nothing.
        let far = ParticleMeasure::dirac(&[50.0], 1.0).unwrap();
        assert!(far.raw_coords(&fam).unwrap().iter().all(|z| *z == 0.0));
    }

    #[test]
    fn raw_chart_matches_independent_summation() {
        let fam = family();
        let mu = random_cloud(5, 100, 1.0);
        let coords = mu.raw_coords(&fam).unwrap();
        for i in 0..fam.len() {
            let mut direct = 0.0;
            for m in 0..mu.n_points() {
                direct += mu.weights()[m] * fam.raw(i).value(mu.point(m));
            }
            assert_eq!(coords[i], direct);
        }
    }

    #[test]
    fn weighted_chart_is_rescaled_raw_chart() {
        let fam = family();
        let mu = random_cloud(7, 64, 0.8);
        let raw = mu.raw_coords(&fam).unwrap();
        let weighted = mu.weighted_coords(&fam).unwrap();
        for i in 0..fam.len() {
            let expect = fam.weight(i) / fam.norm(i) * raw[i];
            assert!((weighted[i] - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn mass_invariant_enforced() {
        assert!(ParticleMeasure::new(1, vec![0.0, 1.0], vec![0.7, 0.6]).is_err());
        assert!(ParticleMeasure::new(1, vec![0.0], vec![-0.1]).is_err());
        let ok = ParticleMeasure::new(1, vec![0.0, 1.0], vec![0.2, 0.3]).unwrap();
        assert_eq!(ok.total_mass(), 0.5);
    }

    #[test]
    fn vague_distance_is_a_pseudometric_sample() {
        let fam = family();
        let mu = random_cloud(1, 50, 1.0);
        assert_eq!(vague_distance(&mu, &mu, &fam).unwrap(), 0.0);
        for k in 0..50u64 {
            let a = random_cloud(3 * k + 1, 40, 1.0);
            let b = random_cloud(3 * k + 2, 40, 0.9);
            let c = random_cloud(3 * k + 3, 40, 0.8);
            let dab = vague_distance(&a, &b, &fam).unwrap();
            let dba = vague_distance(&b, &a, &fam).unwrap();
            assert_eq!(dab, dba);
            let dac = vague_distance(&a, &c, &fam).unwrap();
            let dcb = vague_distance(&c, &b, &fam).unwrap();
            assert!(dab <= dac + dcb + 1e-15);
        }
    }

    #[test]
    fn distinct_clouds_are_separated() {
        let fam = family();
        for k in 0..100u64 {
            let a = random_cloud(1000 + k, 30, 1.0);
            let b = a.map_points(|x, y| y[0] = x[0] + 0.5);
            let d = vague_distance(&a, &b, &fam).unwrap();
            assert!(d > 0.0, "pair {k} not separated");
        }
    }

    #[test]
    fn perturbation_distance_decays() {
        let fam = family();
        let mu = random_cloud(42, 200, 1.0);
        let mut last = f64::INFINITY;
        for n in 1..=8 {
            let eps = 0.5f64.powi(n);
            let nu = mu.map_points(|x, y| y[0] = x[0] + eps);
            let d = vague_distance(&mu, &nu, &fam).unwrap();
            assert!(d <= last + 1e-12, "not decaying at n={n}");
            last = d;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn path_chart_matches_nodewise_calls() {
        let fam = family();
        let a = random_cloud(9, 20, 1.0);
        let b = random_cloud(10, 20, 1.0);
        let path = MeasurePath::new(vec![0.0, 0.5], vec![a.clone(), b.clone()]).unwrap();
        let cp = path.coordinate_path(&fam, Chart::Raw).unwrap();
        assert_eq!(cp.coords[0], a.raw_coords(&fam).unwrap());
        assert_eq!(cp.coords[1], b.raw_coords(&fam).unwrap());

        let single = MeasurePath::new(vec![0.0], vec![a.clone()]).unwrap();
        let cp1 = single.coordinate_path(&fam, Chart::Weighted).unwrap();
        assert_eq!(cp1.coords.len(), 1);
        assert_eq!(cp1.coords[0], a.weighted_coords(&fam).unwrap());
    }

    #[test]
    fn path_grid_must_be_uniform() {
        let a = random_cloud(1, 5, 1.0);
        let bad = MeasurePath::new(
            vec![0.0, 0.1, 0.3],
            vec![a.clone(), a.clone(), a.clone()],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn measure_json_round_trip() {
        let mu = random_cloud(11, 10, 0.9);
        let text = serde_json::to_string(&mu).unwrap();
        let back: ParticleMeasure = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(mu, back);
    }

    proptest! {
        /// Weighted coordinates respect the dyadic bound on probability clouds.
        #[test]
        fn weighted_coords_bounded(seed in 0u64..500, n in 1usize..60) {
            let fam = TestFamily::enumerate(FamilyParams::new(1, 3)).unwrap();
            let mut rng = StreamFactory::new(seed).stream("cloud", &[1]);
            let mu = ParticleMeasure::sample_gaussian(1, n, &[0.3], 2.0, 1.0, &mut rng).unwrap();
            let z = mu.weighted_coords(&fam).unwrap();
            for (i, zi) in z.iter().enumerate() {
                let bound = fam.weight(i) * (1.0 + 1e-9);
                prop_assert!(zi.abs() <= bound, "i={} z={} bound={}", i, zi, bound);
            }
        }

        /// Total mass is what the weights say, and resampling preserves it.
        #[test]
        fn resampling_preserves_mass(seed in 0u64..200) {
            let mut rng = StreamFactory::new(seed).stream("cloud", &[2]);
            let mu = ParticleMeasure::sample_uniform(1, 17, -1.0, 1.0, 0.7, &mut rng).unwrap();
            let re = mu.resample(40, &mut rng).unwrap();
            prop_assert!((re.total_mass() - 0.7).abs() < 1e-12);
            prop_assert_eq!(re.n_points(), 40);
        }
    }
}
