//! Expected end-to-end delay as a function of the inter-sending time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Samples needed before a curve is fitted.
pub const MIN_CURVE_SAMPLES: usize = 8;
pub const CURVE_DEGREE: usize = 3;
const GRID_POINTS: usize = 101;
/// Quantile of the observed IST values that bounds the fitted domain.
const DOMAIN_QUANTILE: f64 = 0.95;

/// Fitted delay curve `d(IST)`, non-increasing on its domain `[0, ist_hi]`,
/// constant beyond it and bounded by the observed delays.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayCurve {
    /// Polynomial coefficients in `s = IST / ist_hi`, lowest order first.
    coeffs: Vec<f64>,
    ist_hi: f64,
    /// Post-processed curve on an evenly spaced grid over the domain.
    grid: Vec<f64>,
}

impl DelayCurve {
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn domain(&self) -> (f64, f64) {
        (0.0, self.ist_hi)
    }

    pub fn d0(&self) -> f64 {
        self.grid[0]
    }

    /// Raw least-squares polynomial, before the monotone clamp.
    pub fn raw(&self, ist_ms: f64) -> f64 {
        let s = if self.ist_hi > 0.0 { ist_ms / self.ist_hi } else { 0.0 };
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    /// Expected delay in ms for an update sent `ist_ms` after the previous one.
    pub fn eval(&self, ist_ms: f64) -> f64 {
        if self.ist_hi <= 0.0 || ist_ms <= 0.0 {
            return self.grid[0];
        }
        let pos = (ist_ms / self.ist_hi).min(1.0) * (GRID_POINTS - 1) as f64;
        let i = (pos.floor() as usize).min(GRID_POINTS - 2);
        let frac = pos - i as f64;
        let v = self.grid[i] + frac * (self.grid[i + 1] - self.grid[i]);
        v.clamp(0.0, self.grid[0])
    }
}

/// Least-squares cubic through `(ist, delay)` samples, clamped to be
/// non-increasing in IST and to stay within the observed delay range.
pub fn fit_delay_curve(samples: &[(f64, f64)]) -> Result<DelayCurve> {
    if samples.len() < MIN_CURVE_SAMPLES {
        return Err(Error::CurveUnavailable { have: samples.len(), needed: MIN_CURVE_SAMPLES });
    }
    // The domain ends at a high quantile of the observed IST so that a few
    // long gaps do not get the leverage to bend the whole fit.
    let mut ists: Vec<f64> = samples.iter().map(|s| s.0.max(0.0)).collect();
    ists.sort_by(f64::total_cmp);
    let rank = ((DOMAIN_QUANTILE * ists.len() as f64).ceil() as usize).clamp(1, ists.len());
    let ist_hi = if ists[rank - 1] > 0.0 { ists[rank - 1] } else { ists[ists.len() - 1] };
    let scaled: Vec<(f64, f64)> = samples
        .iter()
        .map(|&(ist, d)| (if ist_hi > 0.0 { (ist.max(0.0) / ist_hi).min(1.0) } else { 0.0 }, d))
        .collect();

    let mut distinct: Vec<f64> = scaled.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut degree = CURVE_DEGREE.min(distinct.len() - 1);
    let coeffs = loop {
        if let Some(c) = least_squares(&scaled, degree) {
            break c;
        }
        if degree == 0 {
            return Err(Error::Singular("delay curve normal equations"));
        }
        degree -= 1;
    };

    let mut curve = DelayCurve { coeffs, ist_hi, grid: Vec::new() };
    let raw: Vec<f64> = (0..GRID_POINTS).map(|i| curve.raw(ist_hi * i as f64 / (GRID_POINTS - 1) as f64)).collect();
    // Extrapolating the polynomial far from the data must not predict delays
    // never observed.
    let lo = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min).max(0.0);
    let hi = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    curve.grid = isotonic_non_increasing(&raw).into_iter().map(|v| v.clamp(lo, hi)).collect();
    if curve.d0() <= 0.0 {
        return Err(Error::Singular("delay curve vanishes at zero IST"));
    }
    Ok(curve)
}

fn least_squares(points: &[(f64, f64)], degree: usize) -> Option<Vec<f64>> {
    let cols = degree + 1;
    let design = DMatrix::from_fn(points.len(), cols, |r, c| points[r].0.powi(c as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let normal = design.transpose() * &design;
    let rhs = design.transpose() * y;
    let chol = normal.cholesky()?;
    let c = chol.solve(&rhs);
    c.iter().all(|v| v.is_finite()).then(|| c.iter().copied().collect())
}

/// Pool-adjacent-violators fit of a non-increasing sequence (unit weights).
pub fn isotonic_non_increasing(values: &[f64]) -> Vec<f64> {
    // Blocks of (mean, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Cost of admitting now: `λ · d(IST) / d(0)`, or `λ` without a curve.
pub fn transmission_cost(curve: Option<&DelayCurve>, ist_ms: f64, lambda: f64) -> f64 {
    match curve {
        Some(c) => lambda * (c.eval(ist_ms) / c.d0()),
        None => lambda,
    }
}
