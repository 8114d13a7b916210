//! Small numeric helpers: deterministic parallel reduction and trapezoid
//! quadrature on uniform grids.

use rayon::prelude::*;

/// Chunk size of the deterministic parallel sum. Fixed so that the summation
/// tree, and therefore the floating-point result, does not depend on the
/// number of worker threads.
pub const DET_SUM_CHUNK: usize = 8192;

/// Sum `term(i)` for `i in 0..n` with a fixed-shape reduction: chunks of
/// [`DET_SUM_CHUNK`] are summed serially, chunk subtotals are summed in
/// index order. Bit-identical for any thread count.
pub fn det_par_sum<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n <= DET_SUM_CHUNK {
        return (0..n).map(&term).sum();
    }
    let n_chunks = n.div_ceil(DET_SUM_CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * DET_SUM_CHUNK;
            let hi = ((c + 1) * DET_SUM_CHUNK).min(n);
            (lo..hi).map(&term).sum()
        })
        .collect();
    partials.iter().sum()
}

/// Neumaier compensated sum: error below one ulp of the result, so weight
/// totals stay accurate for clouds of any size.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Cumulative trapezoid integral of the samples `values` on a grid with
/// spacing `dt`; entry `k` approximates the integral up to node `k`.
/// The first entry is exactly zero.
pub fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dt;
        out.push(acc);
    }
    out
}
