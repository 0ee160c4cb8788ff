//! Summary statistics for experiment outputs.

use serde::Serialize;

/// Bandwidth used for cost-difference densities.
pub const DEFAULT_BANDWIDTH: f64 = 3.47;
pub const DEFAULT_GRID: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensityPoint {
    pub x: f64,
    pub density: f64,
}

/// Gaussian kernel density estimate on `points` evenly spaced values from
/// `min - 3h` to `max + 3h`. Empty input gives an empty curve.
pub fn gaussian_kde(data: &[f64], bandwidth: f64, points: usize) -> Vec<DensityPoint> {
    if data.is_empty() || points == 0 || bandwidth.is_nan() || bandwidth <= 0.0 {
        return Vec::new();
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    let norm = 1.0 / (data.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            let density = data
                .iter()
                .map(|d| {
                    let z = (x - d) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm;
            DensityPoint { x, density }
        })
        .collect()
}
