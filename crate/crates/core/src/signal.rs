//! One-dimensional smoothing shared by the audio and metric code.

use crate::scalar::Real;

/// Gaussian taps for standard deviation `sigma`, truncated at `⌈3σ⌉`.
/// `sigma = 0` yields the single tap `[1]`.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return vec![T::one()];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|k| T::lit((-(k * k) as f64 / (2.0 * sigma * sigma)).exp()))
        .collect()
}

/// Convolves with a truncated Gaussian, renormalizing the taps that fall
/// inside the signal so constants are preserved at the edges.
pub fn gaussian_smooth<T: Real>(signal: &[T], sigma: f64) -> Vec<T> {
    let taps = gaussian_kernel::<T>(sigma);
    let radius = (taps.len() / 2) as isize;
    let n = signal.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut weight) = (T::zero(), T::zero());
            for (j, &w) in taps.iter().enumerate() {
                let k = i + j as isize - radius;
                if (0..n).contains(&k) {
                    acc += w * signal[k as usize];
                    weight += w;
                }
            }
            acc / weight
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let x = [1.0, -2.0, 5.5, 0.25];
        assert_eq!(gaussian_smooth(&x, 0.0), x.to_vec());
    }

    #[test]
    fn preserves_constants_at_edges() {
        let x = vec![0.7f64; 9];
        for v in gaussian_smooth(&x, 2.0) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn interior_matches_direct_convolution() {
        let x: Vec<f64> = (0..40).map(|i| ((i * i) % 7) as f64).collect();
        let sigma = 1.5;
        let y = gaussian_smooth(&x, sigma);
        let i = 20i32;
        let (mut num, mut den) = (0.0, 0.0);
        for k in -5..=5 {
            let w = (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
            num += w * x[(i + k) as usize];
            den += w;
        }
        assert!((y[20] - num / den).abs() < 1e-12);
    }
}
