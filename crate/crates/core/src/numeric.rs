//! Small numeric kernels: stable softmax, log-sum-exp, deterministic summation
//! and a bounded golden-section minimizer.

use crate::error::{Error, Result};

/// Sum by recursive halving. The reduction tree depends only on the length,
/// so the result is reproducible bit-for-bit regardless of how the input was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Arithmetic mean via [`pairwise_sum`]. Returns NaN on an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// `log(sum(exp(z)))` with the maximum subtracted first.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Max-subtracted softmax. Rejects non-finite inputs.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "softmax input entry {i} is not finite ({})",
            z[i]
        )));
    }
    if z.is_empty() {
        return Ok(Vec::new());
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn max_value(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ceil(fraction * n)` tolerant to the representation error of decimal fractions
/// such as 0.95, so that `0.95 * 20` counts as exactly 19.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let rounded = x.round();
    if (x - rounded).abs() <= 1e-9 * x.abs().max(1.0) {
        rounded as usize
    } else {
        x.ceil() as usize
    }
}

/// Result of a golden-section search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMinimum {
    pub x: f64,
    pub value: f64,
    pub iterations: usize,
}

/// Golden-section search for a minimum of a unimodal `f` on `[lo, hi]`,
/// stopping once the bracket is narrower than `tol`.
///
/// Both endpoints are evaluated as candidates as well, so a minimum sitting
/// exactly on the boundary is returned exactly.
pub fn golden_section_minimize<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> ScalarMinimum
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iterations = 0;
    while (b - a) > tol && iterations < 500 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        iterations += 1;
    }
    let mut best = if f1 <= f2 {
        ScalarMinimum { x: x1, value: f1, iterations }
    } else {
        ScalarMinimum { x: x2, value: f2, iterations }
    };
    for edge in [lo, hi] {
        let v = f(edge);
        if v < best.value {
            best = ScalarMinimum { x: edge, value: v, iterations };
        }
    }
    best
}
