//! Compactly supported C² test functions and the countable dictionaries
//! built from them.
//!
//! Two dictionaries matter downstream:
//!
//! * the raw family `g_1, g_2, ...` — smooth bumps on dyadic lattices, dense
//!   in the compactly supported C² functions under refinement;
//! * the weighted family `h_i = 2^{-i} g_i / ||g_i||_{C²_b}`, whose pairings
//!   with any subprobability measure form a square-summable sequence.
//!
//! Every function carries closed-form gradient and Hessian evaluators; the
//! C²_b norms are computed by grid maximization over the support.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a test function; all shapes are radial about `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Shape {
    /// `amplitude * exp(1 - 1/(1 - |x-c|^2/r^2))` inside the ball of radius
    /// `radius`, zero outside.
    Bump,
    /// Plateau cutoff: 1 on `|x| <= plateau`, 0 on `|x| >= 2*plateau`,
    /// quintic C² blend in between. `radius` stores `2*plateau`.
    Cutoff,
}

/// A compactly supported C² function with exact derivative evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    shape: Shape,
    center: Vec<f64>,
    radius: f64,
    amplitude: f64,
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Radius of the ball outside of which the function vanishes.
    pub fn support_radius(&self) -> f64 {
        self.radius
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Same function rescaled by `s` (used to materialize the weighted
    /// dictionary members).
    pub fn scaled(&self, s: f64) -> TestFunction {
        TestFunction {
            amplitude: self.amplitude * s,
            ..self.clone()
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self.shape {
            Shape::Bump => self.bump_jet(x, None, None),
            Shape::Cutoff => self.cutoff_jet(x, None, None),
        }
    }

    pub fn gradient_into(&self, x: &[f64], grad: &mut [f64]) {
        match self.shape {
            Shape::Bump => self.bump_jet(x, Some(grad), None),
            Shape::Cutoff => self.cutoff_jet(x, Some(grad), None),
        };
    }

    /// Row-major d×d Hessian.
    pub fn hessian_into(&self, x: &[f64], hess: &mut [f64]) {
        match self.shape {
            Shape::Bump => self.bump_jet(x, None, Some(hess)),
            Shape::Cutoff => self.cutoff_jet(x, None, Some(hess)),
        };
    }

    /// Value, gradient and Hessian in one pass (the hot path of the
    /// generator loops).
    pub fn jet_into(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        match self.shape {
            Shape::Bump => self.bump_jet(x, Some(grad), Some(hess)),
            Shape::Cutoff => self.cutoff_jet(x, Some(grad), Some(hess)),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(x, &mut g);
        g
    }

    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim() * self.dim()];
        self.hessian_into(x, &mut h);
        h
    }

    fn bump_jet(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
        let d = self.dim();
        let r2 = self.radius * self.radius;
        let mut u = 0.0;
        for i in 0..d {
            let y = x[i] - self.center[i];
            u += y * y;
        }
        u /= r2;
        if u >= 1.0 {
            if let Some(g) = grad {
                g.fill(0.0);
            }
            if let Some(h) = hess {
                h.fill(0.0);
            }
            return 0.0;
        }
        let s = 1.0 - u;
        let phi = self.amplitude * (1.0 - 1.0 / s).exp();
        // dphi_i   = -phi * 2 y_i / (r^2 s^2)
        // d2phi_ij = phi * [ (4 y_i y_j / r^4) (1/s^4 - 2/s^3) - 2 d_ij/(r^2 s^2) ]
        let inv_s2 = 1.0 / (s * s);
        if let Some(g) = grad {
            let c1 = -phi * 2.0 * inv_s2 / r2;
            for i in 0..d {
                g[i] = c1 * (x[i] - self.center[i]);
            }
        }
        if let Some(h) = hess {
            let c_pair = phi * 4.0 / (r2 * r2) * inv_s2 * (inv_s2 - 2.0 / s);
            let c_diag = -phi * 2.0 * inv_s2 / r2;
            for i in 0..d {
                let yi = x[i] - self.center[i];
                for j in 0..d {
                    let yj = x[j] - self.center[j];
                    // (yi * yj) first keeps the matrix bitwise symmetric.
                    let mut v = c_pair * (yi * yj);
                    if i == j {
                        v += c_diag;
                    }
                    h[i * d + j] = v;
                }
            }
        }
        phi
    }

    fn cutoff_jet(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
        let d = self.dim();
        let plateau = self.radius / 2.0;
        let mut norm2 = 0.0;
        for xi in x {
            norm2 += xi * xi;
        }
        let norm = norm2.sqrt();
        let rho = norm / plateau;
        if !(1.0..2.0).contains(&rho) {
            let v = if rho < 1.0 { self.amplitude } else { 0.0 };
            if let Some(g) = grad {
                g.fill(0.0);
            }
            if let Some(h) = hess {
                h.fill(0.0);
            }
            return v;
        }
        // chi(rho) = 1 - S(rho - 1) with the quintic smoothstep S; C² at both ends.
        let t = rho - 1.0;
        let s_val = t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
        let s_d1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        let s_d2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        let value = self.amplitude * (1.0 - s_val);
        let dchi = -self.amplitude * s_d1 / plateau; // d(value)/d|x|
        let d2chi = -self.amplitude * s_d2 / (plateau * plateau);
        if let Some(g) = grad {
            for i in 0..d {
                g[i] = dchi * x[i] / norm;
            }
        }
        if let Some(h) = hess {
            for i in 0..d {
                for j in 0..d {
                    let pair = x[i] * x[j];
                    let rad = d2chi * pair / norm2;
                    let mut tan = -dchi * pair / (norm2 * norm);
                    if i == j {
                        tan += dchi / norm;
                    }
                    h[i * d + j] = rad + tan;
                }
            }
        }
        value
    }
}

/// The standard smooth bump `amplitude * exp(1 - 1/(1 - |x-c|^2/r^2))`.
pub fn make_bump(center: &[f64], radius: f64, amplitude: f64) -> Result<TestFunction> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", "must be positive"));
    }
    Ok(TestFunction {
        shape: Shape::Bump,
        center: center.to_vec(),
        radius,
        amplitude,
    })
}

/// Member `l` of the cutoff sequence: 1 on `|x| <= l`, 0 on `|x| >= 2l`,
/// with first and second derivatives bounded by `M/l` and `M/l²` for a
/// fixed constant `M` (the smoothstep derivative bounds 1.875 and 5.81).
pub fn cutoff_sequence(dim: usize, l: u32) -> Result<TestFunction> {
    if l == 0 {
        return Err(Error::invalid("l", "must be >= 1"));
    }
    Ok(TestFunction {
        shape: Shape::Cutoff,
        center: vec![0.0; dim],
        radius: 2.0 * f64::from(l),
        amplitude: 1.0,
    })
}

/// Sup of `max(|phi|, |d_i phi|, |d²_ij phi|)` over a regular grid of spacing
/// `grid_step` covering the support (the grid always contains the center, so
/// the value maximum of a bump is caught exactly).
pub fn c2b_norm(f: &TestFunction, grid_step: f64) -> f64 {
    assert!(grid_step > 0.0, "grid_step must be positive");
    let d = f.dim();
    let k_max = (f.support_radius() / grid_step).ceil() as i64;
    let mut x = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut idx = vec![-k_max; d];
    let mut best = 0.0f64;
    loop {
        for i in 0..d {
            x[i] = f.center()[i] + idx[i] as f64 * grid_step;
        }
        let v = f.jet_into(&x, &mut grad, &mut hess);
        best = best.max(v.abs());
        for g in &grad {
            best = best.max(g.abs());
        }
        for h in &hess {
            best = best.max(h.abs());
        }
        // odometer over [-k_max, k_max]^d
        let mut carry = true;
        for i in (0..d).rev() {
            if carry {
                idx[i] += 1;
                if idx[i] > k_max {
                    idx[i] = -k_max;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    best
}

/// Parameters of the dyadic-lattice enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub dim: usize,
    /// Number of dyadic levels.
    pub depth: u32,
    /// Radius at level 0; level `l` uses radius and lattice spacing
    /// `r0 * 2^-l` inside the box `[-2^l, 2^l]^dim`.
    pub r0: f64,
    /// The norm grid uses spacing `radius / norm_step_divisor`.
    pub norm_step_divisor: u32,
    /// Keep only the first `truncate` members when set.
    pub truncate: Option<usize>,
}

impl FamilyParams {
    pub fn new(dim: usize, depth: u32) -> Self {
        FamilyParams {
            dim,
            depth,
            r0: 2.0,
            norm_step_divisor: 200,
            truncate: None,
        }
    }

    pub fn truncated(mut self, n: usize) -> Self {
        self.truncate = Some(n);
        self
    }
}

/// An ordered finite truncation of the countable dictionary, with
/// precomputed C²_b norms and the `2^-i`-weighted rescaling factors.
#[derive(Debug, Clone)]
pub struct TestFamily {
    params: FamilyParams,
    members: Vec<TestFunction>,
    norms: Vec<f64>,
    scales: Vec<f64>,
}

/// One row of the exported family manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyManifestEntry {
    pub index: usize,
    pub center: Vec<f64>,
    pub radius: f64,
    pub c2b_norm: f64,
    pub weight: f64,
}

impl TestFamily {
    /// Enumerate bumps over dyadic lattices in a fixed lexicographic order:
    /// levels are visited coarsest first, and within a level the lattice
    /// multi-indices ascend lexicographically.
    pub fn enumerate(params: FamilyParams) -> Result<TestFamily> {
        if params.dim == 0 {
            return Err(Error::invalid("family.dim", "must be >= 1"));
        }
        if params.depth == 0 {
            return Err(Error::invalid("family.depth", "must be >= 1"));
        }
        if !(params.r0 > 0.0) {
            return Err(Error::invalid("family.r0", "must be positive"));
        }
        let d = params.dim;
        let mut members = Vec::new();
        'levels: for level in 0..params.depth {
            let radius = params.r0 * 0.5f64.powi(level as i32);
            let half_width = 2.0f64.powi(level as i32);
            let k_max = (half_width / radius).floor() as i64;
            let mut idx = vec![-k_max; d];
            loop {
                let center: Vec<f64> = idx.iter().map(|k| *k as f64 * radius).collect();
                members.push(make_bump(&center, radius, 1.0)?);
                if let Some(n) = params.truncate {
                    if members.len() >= n {
                        break 'levels;
                    }
                }
                let mut carry = true;
                for i in (0..d).rev() {
                    if carry {
                        idx[i] += 1;
                        if idx[i] > k_max {
                            idx[i] = -k_max;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
        }
        if let Some(n) = params.truncate {
            members.truncate(n);
        }
        let norms: Vec<f64> = members
            .iter()
            .map(|f| c2b_norm(f, f.support_radius() / f64::from(params.norm_step_divisor)))
            .collect();
        let scales: Vec<f64> = norms
            .iter()
            .enumerate()
            .map(|(i, n)| 0.5f64.powi(i as i32 + 1) / n)
            .collect();
        Ok(TestFamily {
            params,
            members,
            norms,
            scales,
        })
    }

    pub fn params(&self) -> &FamilyParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Raw dictionary member `g_i` (0-based index).
    pub fn raw(&self, i: usize) -> &TestFunction {
        &self.members[i]
    }

    /// C²_b norm of `g_i`.
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Scale factor `2^-(i+1) / ||g_i||` turning `g_i` into `h_i`
    /// (0-based `i`, so the weight is `2^-1` for the first member).
    pub fn scale(&self, i: usize) -> f64 {
        self.scales[i]
    }

    /// Weight `2^-(i+1)` of the weighted member (its C²_b norm).
    pub fn weight(&self, i: usize) -> f64 {
        0.5f64.powi(i as i32 + 1)
    }

    /// Materialize the weighted dictionary member `h_i`.
    pub fn weighted_fn(&self, i: usize) -> TestFunction {
        self.members[i].scaled(self.scales[i])
    }

    pub fn manifest(&self) -> Vec<FamilyManifestEntry> {
        (0..self.len())
            .map(|i| FamilyManifestEntry {
                index: i + 1,
                center: self.members[i].center().to_vec(),
                radius: self.members[i].support_radius(),
                c2b_norm: self.norms[i],
                weight: self.weight(i),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central finite differences of the value evaluator.
    fn fd_gradient(f: &TestFunction, x: &[f64], h: f64) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..d {
            xp[i] = x[i] + h;
            xm[i] = x[i] - h;
            out[i] = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
            xp[i] = x[i];
            xm[i] = x[i];
        }
        out
    }

    fn fd_hessian(f: &TestFunction, x: &[f64], h: f64) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d * d];
        let mut y = x.to_vec();
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    y[i] = x[i] + h;
                    let fp = f.value(&y);
                    y[i] = x[i] - h;
                    let fm = f.value(&y);
                    y[i] = x[i];
                    out[i * d + j] = (fp - 2.0 * f.value(x) + fm) / (h * h);
                } else {
                    let mut acc = 0.0;
                    for (si, sj, sign) in
                        [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)]
                    {
                        y[i] = x[i] + si * h;
                        y[j] = x[j] + sj * h;
                        acc += sign * f.value(&y);
                        y[i] = x[i];
                        y[j] = x[j];
                    }
                    out[i * d + j] = acc / (4.0 * h * h);
                }
            }
        }
        out
    }

    #[test]
    fn bump_center_value_is_amplitude() {
        let f = make_bump(&[0.0], 1.0, 1.0).unwrap();
        assert_eq!(f.value(&[0.0]), 1.0);
        let f2 = make_bump(&[0.5, -1.0], 2.0, 3.5).unwrap();
        assert_eq!(f2.value(&[0.5, -1.0]), 3.5);
    }

    #[test]
    fn bump_vanishes_on_support_boundary() {
        let f = make_bump(&[0.25], 0.75, 2.0).unwrap();
        assert_eq!(f.value(&[1.0]), 0.0);
        assert_eq!(f.value(&[-0.5]), 0.0);
        assert_eq!(f.gradient(&[1.0]), vec![0.0]);
        assert_eq!(f.hessian(&[-0.5]), vec![0.0]);
    }

    #[test]
    fn bump_gradient_matches_finite_difference_at_half() {
        let f = make_bump(&[0.0], 1.0, 1.0).unwrap();
        let h = 1e-5;
        let fd = fd_gradient(&f, &[0.5], h);
        let exact = f.gradient(&[0.5]);
        assert!(
            (fd[0] - exact[0]).abs() < 1e-8,
            "fd {} vs exact {}",
            fd[0],
            exact[0]
        );
    }

    #[test]
    fn rejects_nonpositive_radius() {
        assert!(make_bump(&[0.0], 0.0, 1.0).is_err());
        assert!(make_bump(&[0.0], -1.0, 1.0).is_err());
    }

    #[test]
    fn enumeration_first_element_and_uniqueness() {
        let fam = TestFamily::enumerate(FamilyParams::new(1, 1)).unwrap();
        assert_eq!(fam.len(), 1);
        assert_eq!(fam.raw(0).center(), &[0.0]);
        assert_eq!(fam.raw(0).support_radius(), 2.0);

        let fam2 = TestFamily::enumerate(FamilyParams::new(1, 3)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..fam2.len() {
            let key = format!(
                "{:?}|{:?}",
                fam2.raw(i).center(),
                fam2.raw(i).support_radius()
            );
            assert!(seen.insert(key), "duplicate (center, radius) at {i}");
        }
    }

    #[test]
    fn enumeration_count_matches_bruteforce_lattice() {
        // Independent count: walk x from -2^l to 2^l in steps of the level
        // spacing and count admissible lattice points.
        for (d, depth) in [(1usize, 2u32), (1, 3), (2, 2)] {
            let fam = TestFamily::enumerate(FamilyParams::new(d, depth)).unwrap();
            let mut count = 0usize;
            for level in 0..depth {
                let spacing = 2.0 * 0.5f64.powi(level as i32);
                let half = 2.0f64.powi(level as i32);
                let mut per_axis = 0usize;
                let mut k = 0i64;
                loop {
                    let x = k as f64 * spacing;
                    if x > half + 1e-12 {
                        break;
                    }
                    per_axis += if k == 0 { 1 } else { 2 };
                    k += 1;
                }
                count += per_axis.pow(d as u32);
            }
            assert_eq!(fam.len(), count, "d={d} depth={depth}");
        }
    }

    #[test]
    fn enumeration_is_deterministic() {
        let a = TestFamily::enumerate(FamilyParams::new(2, 2)).unwrap();
        let b = TestFamily::enumerate(FamilyParams::new(2, 2)).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.raw(i).center(), b.raw(i).center());
            assert!(a.raw(i).support_radius() == b.raw(i).support_radius());
            assert!(a.norm(i) == b.norm(i), "norms must be bit-identical");
        }
    }

    #[test]
    fn c2b_norm_zero_function() {
        let f = make_bump(&[0.0], 1.0, 0.0).unwrap();
        assert_eq!(c2b_norm(&f, 0.005), 0.0);
    }

    #[test]
    fn c2b_norm_unit_bump_lower_bound_and_refinement() {
        let f = make_bump(&[0.0], 1.0, 1.0).unwrap();
        let coarse = c2b_norm(&f, 1.0 / 200.0);
        assert!(coarse >= 1.0, "norm {coarse} must dominate the center value");
        let fine = c2b_norm(&f, 1.0 / 2000.0);
        assert!(
            (coarse - fine).abs() / fine < 0.01,
            "coarse {coarse} vs fine {fine}"
        );
        assert!(fine >= coarse, "grid refinement can only increase the max");
    }

    #[test]
    fn weighted_norms_follow_the_dyadic_weights() {
        let fam = TestFamily::enumerate(FamilyParams::new(1, 2)).unwrap();
        for i in 0..fam.len() {
            let h = fam.weighted_fn(i);
            let norm = c2b_norm(&h, h.support_radius() / 200.0);
            let expect = fam.weight(i);
            assert!(
                (norm - expect).abs() <= 1e-12 * expect,
                "i={i}: {norm} vs {expect}"
            );
        }
    }

    #[test]
    fn cutoff_plateau_support_and_derivative_decay() {
        for l in [1u32, 2, 4] {
            let f = cutoff_sequence(1, l).unwrap();
            let lf = f64::from(l);
            assert_eq!(f.value(&[0.0]), 1.0);
            assert_eq!(f.value(&[lf]), 1.0);
            assert_eq!(f.value(&[0.3 * lf]), 1.0);
            assert_eq!(f.value(&[2.0 * lf]), 0.0);
            assert_eq!(f.value(&[2.5 * lf]), 0.0);
        }
        // sup|dphi_l| over a grid scales like 1/l.
        let sup_grad = |l: u32| -> f64 {
            let f = cutoff_sequence(1, l).unwrap();
            let mut best = 0.0f64;
            let n = 4000;
            for k in 0..=n {
                let x = [2.0 * f64::from(l) * (k as f64 / n as f64)];
                best = best.max(f.gradient(&x)[0].abs());
            }
            best
        };
        let (s1, s2, s4) = (sup_grad(1), sup_grad(2), sup_grad(4));
        assert!((s1 / s2 - 2.0).abs() < 0.02, "s1/s2 = {}", s1 / s2);
        assert!((s2 / s4 - 2.0).abs() < 0.02, "s2/s4 = {}", s2 / s4);
    }

    #[test]
    fn cutoff_derivatives_match_finite_differences() {
        let f = cutoff_sequence(2, 1).unwrap();
        for x in [[1.2, 0.7], [1.5, -0.4], [0.3, 1.4]] {
            let fd_g = fd_gradient(&f, &x, 1e-5);
            let g = f.gradient(&x);
            let fd_h = fd_hessian(&f, &x, 1e-4);
            let hs = f.hessian(&x);
            for i in 0..2 {
                assert!((fd_g[i] - g[i]).abs() < 1e-7, "grad at {x:?}");
            }
            for i in 0..4 {
                assert!((fd_h[i] - hs[i]).abs() < 1e-5, "hess at {x:?}");
            }
        }
    }

    /// Measured derivative suprema of the unit bump: |φ'''| ≤ 507 and
    /// |φ''''| ≤ 22600 globally (attained near the support boundary), but
    /// only 6.4 and 118 on the inner 60% of the support. FD tolerances
    /// below carry these constants divided by the stencil factors 6 and 12,
    /// scaled by amplitude and the radius powers.
    const BUMP_D3_GLOBAL: f64 = 507.0 / 6.0;
    const BUMP_D4_GLOBAL: f64 = 22600.0 / 12.0;

    #[test]
    fn family_jets_match_finite_differences_on_the_core() {
        // On |x - c| <= 0.6 r the third derivative is small enough that the
        // plain 10 h² budget holds for every unit-amplitude member.
        let fam = TestFamily::enumerate(FamilyParams::new(1, 3)).unwrap();
        let h = 1e-5;
        for i in 0..fam.len() {
            let g = fam.raw(i);
            let r = g.support_radius();
            let tol = 10.0 * h * h * (1.0 / r).powi(3).max(1.0);
            for frac in [-0.55, -0.3, 0.0, 0.25, 0.6] {
                let x = [g.center()[0] + frac * r];
                let fd = fd_gradient(g, &x, h);
                let exact = g.gradient(&x);
                assert!(
                    (fd[0] - exact[0]).abs() <= tol,
                    "member {i}, frac {frac}: {} vs {} (tol {tol})",
                    exact[0],
                    fd[0]
                );
            }
        }
    }

    proptest! {
        /// Full-support FD agreement at the measured global constants.
        /// Second differences use a larger step because the f64
        /// cancellation noise 4ε/h² would swamp an h = 1e-5 stencil.
        #[test]
        fn bump_jets_match_finite_differences(
            cx in -1.0f64..1.0,
            radius in 0.6f64..2.5,
            frac in -0.95f64..0.95,
            amp in 0.5f64..2.0,
        ) {
            let f = make_bump(&[cx], radius, amp).unwrap();
            let x = [cx + frac * radius];
            let h = 1e-5;
            let g = f.gradient(&x);
            let fd_g = fd_gradient(&f, &x, h);
            let tol_g = BUMP_D3_GLOBAL * h * h * amp * (1.0 / radius).powi(3).max(1.0) + 1e-10;
            prop_assert!((g[0] - fd_g[0]).abs() <= tol_g,
                "grad {} vs fd {} (tol {})", g[0], fd_g[0], tol_g);
            let h2 = 1e-3;
            let hs = f.hessian(&x);
            let fd_h = fd_hessian(&f, &x, h2);
            let tol_h = BUMP_D4_GLOBAL * h2 * h2 * amp * (1.0 / radius).powi(4).max(1.0) + 1e-9;
            prop_assert!((hs[0] - fd_h[0]).abs() <= tol_h,
                "hess {} vs fd {} (tol {})", hs[0], fd_h[0], tol_h);
        }

        /// Hessians are exactly symmetric and vanish outside the support.
        #[test]
        fn bump_hessian_symmetric_and_supported(
            x0 in -3.0f64..3.0,
            x1 in -3.0f64..3.0,
            radius in 0.5f64..2.0,
        ) {
            let f = make_bump(&[0.2, -0.1], radius, 1.3).unwrap();
            let h = f.hessian(&[x0, x1]);
            prop_assert_eq!(h[1], h[2]);
            let dist = ((x0 - 0.2f64).powi(2) + (x1 + 0.1f64).powi(2)).sqrt();
            if dist >= radius {
                prop_assert_eq!(f.value(&[x0, x1]), 0.0);
                prop_assert!(h.iter().all(|v| *v == 0.0));
            }
        }
    }
}
