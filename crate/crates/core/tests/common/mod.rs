#![allow(dead_code)]

use statrs::function::erf::erf;

/// Mean charge kept by clustering for a photon of `adu` total charge with a
/// Gaussian cloud of `sigma` px, noise-free pixels and a `split` threshold:
/// pixels below the threshold are dropped. Averaged over uniform sub-pixel
/// positions by midpoint quadrature.
pub fn expected_collected_adu(adu: f64, sigma: f64, split: f64) -> f64 {
    if sigma == 0.0 {
        return adu;
    }
    let n = 400;
    let share = |u: f64| -> [f64; 3] {
        let cdf = |x: f64| 0.5 * (1.0 + erf((x - u) / (sigma * std::f64::consts::SQRT_2)));
        [cdf(0.0), cdf(1.0) - cdf(0.0), 1.0 - cdf(1.0)]
    };
    let shares: Vec<[f64; 3]> = (0..n).map(|i| share((i as f64 + 0.5) / n as f64)).collect();
    let mut total = 0.0;
    for fx in &shares {
        for fy in &shares {
            for a in fx {
                for b in fy {
                    let q = adu * a * b;
                    if q >= split {
                        total += q;
                    }
                }
            }
        }
    }
    total / (n * n) as f64
}
