//! Beat alignment, diversity and Fréchet distance between feature Gaussians.

use std::io::Write;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{matmul, sqrtm_psd, symmetric_eigen};
use crate::motion::MotionSequence;
use crate::scalar::Real;
use crate::signal::gaussian_smooth;

pub const DEFAULT_SIGMA_SMOOTH: f64 = 2.0;
pub const DEFAULT_SIGMA_BEAT: f64 = 0.1;
/// Most negative eigenvalue tolerated in a covariance.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Mean keypoint speed for each velocity row (`C/2` points per row).
pub fn keypoint_speed<T: Real>(vel: &Array2<T>) -> Vec<T> {
    let points = T::from_usize_lossy(vel.ncols() / 2);
    vel.rows()
        .into_iter()
        .map(|row| {
            let s: T = (0..row.len() / 2)
                .map(|k| (row[2 * k] * row[2 * k] + row[2 * k + 1] * row[2 * k + 1]).sqrt())
                .sum();
            s / points
        })
        .collect()
}

/// Raw and smoothed speed curves with their strict interior minima.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedCurve<T> {
    pub raw: Vec<T>,
    pub smoothed: Vec<T>,
    pub minima: Vec<usize>,
}

pub fn speed_curve<T: Real>(seq: &MotionSequence<T>, sigma_smooth: f64) -> Result<SpeedCurve<T>> {
    if seq.len() < 3 {
        return Err(Error::invalid(format!("gesture beats need at least 3 frames, got {}", seq.len())));
    }
    if !(sigma_smooth >= 0.0 && sigma_smooth.is_finite()) {
        return Err(Error::invalid("sigma_smooth must be a finite non-negative number"));
    }
    let raw = keypoint_speed(&seq.velocity()?);
    let smoothed = gaussian_smooth(&raw, sigma_smooth);
    let minima = (1..smoothed.len().saturating_sub(1))
        .filter(|&i| smoothed[i] < smoothed[i - 1] && smoothed[i] < smoothed[i + 1])
        .collect();
    Ok(SpeedCurve { raw, smoothed, minima })
}

/// Times (s) of strict local minima of the Gaussian-smoothed keypoint speed.
/// Speed sample `m` (between frames `m` and `m+1`) is placed at `m/fps`.
pub fn gesture_beats<T: Real>(seq: &MotionSequence<T>, sigma_smooth: f64) -> Result<Vec<f64>> {
    let curve = speed_curve(seq, sigma_smooth)?;
    let fps = seq.fps.as_f64();
    Ok(curve.minima.iter().map(|&m| m as f64 / fps).collect())
}

/// Writes `frame,raw_speed,smoothed_speed,is_beat` rows.
pub fn write_velocity_curve<T: Real, W: Write>(curve: &SpeedCurve<T>, mut out: W) -> Result<()> {
    writeln!(out, "frame,raw_speed,smoothed_speed,is_beat")?;
    for (i, (r, s)) in curve.raw.iter().zip(&curve.smoothed).enumerate() {
        let beat = curve.minima.binary_search(&i).is_ok() as u8;
        writeln!(out, "{i},{r:e},{s:e},{beat}")?;
    }
    Ok(())
}

fn nearest_distance(t: f64, beats: &[f64]) -> Option<f64> {
    beats.iter().map(|&g| (t - g).abs()).min_by(f64::total_cmp)
}

/// `1/|B_a| Σ exp(−d²/(2σ_b²))` with `d` the distance from each audio beat
/// to its nearest gesture beat; 0 when there are no gesture beats.
pub fn beat_align_score(audio_beats: &[f64], gesture_beats: &[f64], sigma_b: f64) -> Result<f64> {
    if audio_beats.is_empty() {
        return Err(Error::invalid("beat alignment needs at least one audio beat"));
    }
    if !(sigma_b > 0.0) {
        return Err(Error::invalid("sigma_b must be positive"));
    }
    if gesture_beats.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = audio_beats
        .iter()
        .map(|&t| {
            let d = nearest_distance(t, gesture_beats).expect("nonempty");
            (-d * d / (2.0 * sigma_b * sigma_b)).exp()
        })
        .sum();
    Ok(sum / audio_beats.len() as f64)
}

/// Mean distance (s) from each audio beat to its nearest gesture beat, or
/// `None` without gesture beats.
pub fn mean_beat_distance(audio_beats: &[f64], gesture_beats: &[f64]) -> Result<Option<f64>> {
    if audio_beats.is_empty() {
        return Err(Error::invalid("beat distance needs at least one audio beat"));
    }
    if gesture_beats.is_empty() {
        return Ok(None);
    }
    let sum: f64 = audio_beats.iter().map(|&t| nearest_distance(t, gesture_beats).expect("nonempty")).sum();
    Ok(Some(sum / audio_beats.len() as f64))
}

fn check_features<T: Real>(features: &[Array1<T>], min: usize, what: &str) -> Result<usize> {
    if features.len() < min {
        return Err(Error::invalid(format!("{what} needs at least {min} feature vectors, got {}", features.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid(format!("{what}: feature vectors differ in length")));
    }
    Ok(d)
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity<T: Real>(features: &[Array1<T>]) -> Result<T> {
    check_features(features, 2, "diversity")?;
    let n = features.len();
    let mut sum = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            let d: T = features[i].iter().zip(features[j].iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            sum += d.sqrt();
        }
    }
    Ok(sum / T::from_usize_lossy(n * (n - 1) / 2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary<T> {
    pub mean: Array1<T>,
    pub covariance: Array2<T>,
}

impl<T: Real> GaussianSummary<T> {
    pub fn new(mean: Array1<T>, covariance: Array2<T>) -> Result<Self> {
        let d = mean.len();
        if covariance.dim() != (d, d) {
            return Err(Error::invalid(format!(
                "covariance is {:?}, expected ({d}, {d})",
                covariance.dim()
            )));
        }
        Ok(GaussianSummary { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_psd(&self) -> Result<()> {
        let scale = self.covariance.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::lit(1e-10) * scale;
        let d = self.dim();
        for i in 0..d {
            for j in i + 1..d {
                if (self.covariance[[i, j]] - self.covariance[[j, i]]).abs() > tol {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        let (values, _) = symmetric_eigen(&self.covariance);
        if let Some(v) = values.iter().find(|v| v.to_f64_lossy() < -PSD_TOLERANCE) {
            return Err(Error::invalid(format!("covariance has eigenvalue {v:e} below -{PSD_TOLERANCE:e}")));
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance (zero covariance for a single vector).
pub fn summarize<T: Real>(features: &[Array1<T>]) -> Result<GaussianSummary<T>> {
    let d = check_features(features, 1, "summarize")?;
    let n = features.len();
    let mut mean = Array1::from_elem(d, T::zero());
    for f in features {
        mean += f;
    }
    mean.mapv_inplace(|v| v / T::from_usize_lossy(n));
    let mut cov = Array2::from_elem((d, d), T::zero());
    if n > 1 {
        for f in features {
            let c = f - &mean;
            for i in 0..d {
                for j in i..d {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        let denom = T::from_usize_lossy(n - 1);
        for i in 0..d {
            for j in i..d {
                let v = cov[[i, j]] / denom;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
    }
    GaussianSummary::new(mean, cov)
}

/// Squared 2-Wasserstein distance `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`,
/// with the trace term taken from `√Σ₁ Σ₂ √Σ₁`; clamped at 0.
pub fn frechet_distance<T: Real>(g1: &GaussianSummary<T>, g2: &GaussianSummary<T>) -> Result<T> {
    if g1.dim() != g2.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", g1.dim(), g2.dim())));
    }
    g1.check_psd()?;
    g2.check_psd()?;
    let mean_term: T = g1.mean.iter().zip(g2.mean.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let s1 = sqrtm_psd(&g1.covariance);
    let mut inner = matmul(&matmul(&s1, &g2.covariance), &s1);
    let d = g1.dim();
    for i in 0..d {
        for j in i + 1..d {
            let v = (inner[[i, j]] + inner[[j, i]]) / T::lit(2.0);
            inner[[i, j]] = v;
            inner[[j, i]] = v;
        }
    }
    let (values, _) = symmetric_eigen(&inner);
    let cross: T = values.iter().map(|&v| v.max(T::zero()).sqrt()).sum();
    let trace: T = (0..d).map(|i| g1.covariance[[i, i]] + g2.covariance[[i, i]]).sum();
    Ok((mean_term + trace - T::lit(2.0) * cross).max(T::zero()))
}

/// Pooled descriptor: per-channel mean, per-channel population standard
/// deviation, mean keypoint speed and mean keypoint acceleration magnitude.
pub fn motion_features<T: Real>(seq: &MotionSequence<T>) -> Result<Array1<T>> {
    let m = seq.len();
    if m < 3 {
        return Err(Error::invalid(format!("motion features need at least 3 frames, got {m}")));
    }
    let c = seq.channels();
    let mf = T::from_usize_lossy(m);
    let mut out = Array1::from_elem(2 * c + 2, T::zero());
    for (j, col) in seq.frames.columns().into_iter().enumerate() {
        let mean = col.iter().copied().sum::<T>() / mf;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        out[j] = mean;
        out[c + j] = var.sqrt();
    }
    let speed = keypoint_speed(&seq.velocity()?);
    out[2 * c] = speed.iter().copied().sum::<T>() / T::from_usize_lossy(speed.len());
    let acc = keypoint_speed(&seq.acceleration()?);
    out[2 * c + 1] = acc.iter().copied().sum::<T>() / T::from_usize_lossy(acc.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Fps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: Array2<f64>) -> MotionSequence<f64> {
        MotionSequence::new(frames, Fps::new(25, 1)).unwrap()
    }

    /// One keypoint moving along x with the given per-step speeds.
    fn from_speeds(speeds: &[f64]) -> MotionSequence<f64> {
        let mut x = vec![0.0];
        for s in speeds {
            x.push(x.last().unwrap() + s);
        }
        seq(Array2::from_shape_fn((x.len(), 2), |(i, j)| if j == 0 { x[i] } else { 0.0 }))
    }

    #[test]
    fn constant_velocity_has_no_beats() {
        assert!(gesture_beats(&from_speeds(&[1.0; 20]), 2.0).unwrap().is_empty());
        assert!(gesture_beats(&from_speeds(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn single_dip() {
        let speeds: Vec<f64> = (0..25).map(|i| if i == 10 { 0.2 } else { 1.0 }).collect();
        assert_eq!(gesture_beats(&from_speeds(&speeds), 2.0).unwrap(), vec![10.0 / 25.0]);
        assert_eq!(gesture_beats(&from_speeds(&speeds), 0.0).unwrap(), vec![10.0 / 25.0]);
    }

    #[test]
    fn bas_closed_forms() {
        assert_eq!(beat_align_score(&[0.5, 1.5], &[0.5, 1.5], 0.1).unwrap(), 1.0);
        assert_eq!(beat_align_score(&[0.5], &[], 0.1).unwrap(), 0.0);
        let v = beat_align_score(&[1.0], &[1.1], 0.1).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-9);
        assert!(beat_align_score(&[], &[1.0], 0.1).is_err());
        assert_eq!(mean_beat_distance(&[1.0, 2.0], &[1.25]).unwrap(), Some(0.5));
    }

    #[test]
    fn diversity_cases() {
        let a = Array1::from(vec![1.0, 2.0]);
        assert_eq!(diversity(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert_eq!(diversity(&[a.clone(), Array1::from(vec![2.0, 2.0])]).unwrap(), 1.0);
        assert!(diversity(&[a]).is_err());
    }

    #[test]
    fn summarize_two_points() {
        let v = Array1::from(vec![1.0f64, -2.0]);
        let s = summarize(&[-&v, v.clone()]).unwrap();
        assert_eq!(s.mean, Array1::from(vec![0.0, 0.0]));
        for i in 0..2 {
            for j in 0..2 {
                assert!((s.covariance[[i, j]] - 2.0 * v[i] * v[j]).abs() < 1e-15);
            }
        }
        let one = summarize(std::slice::from_ref(&v)).unwrap();
        assert!(one.covariance.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn frechet_closed_forms() {
        let g = |m: f64, var: f64| GaussianSummary::new(Array1::from(vec![m]), Array2::from_elem((1, 1), var)).unwrap();
        let d = frechet_distance(&g(1.0, 4.0), &g(-0.5, 0.25)).unwrap();
        assert!((d - (1.5f64.powi(2) + 1.5f64.powi(2))).abs() < 1e-9);
        assert_eq!(frechet_distance(&g(1.0, 4.0), &g(1.0, 4.0)).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 6;
        let m1 = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let m2 = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let l1: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let l2: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let a = GaussianSummary::new(m1.clone(), Array2::from_diag(&Array1::from(l1.clone()))).unwrap();
        let b = GaussianSummary::new(m2.clone(), Array2::from_diag(&Array1::from(l2.clone()))).unwrap();
        let expected: f64 = (0..d).map(|i| (m1[i] - m2[i]).powi(2) + (l1[i].sqrt() - l2[i].sqrt()).powi(2)).sum();
        assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-9);

        let bad = GaussianSummary::new(Array1::zeros(1), Array2::from_elem((1, 1), -1.0)).unwrap();
        assert!(frechet_distance(&bad, &bad).is_err());
        assert!(frechet_distance(&a, &g(0.0, 1.0)).is_err());
    }

    #[test]
    fn features_of_ramp() {
        let v = [0.3, -0.4];
        let s = seq(Array2::from_shape_fn((6, 2), |(i, j)| 1.0 + v[j] * i as f64));
        let f = motion_features(&s).unwrap();
        assert_eq!(f.len(), 6);
        assert!((f[4] - 0.5).abs() < 1e-12);
        assert!(f[5].abs() < 1e-12);
        assert!((f[0] - (1.0 + 0.3 * 2.5)).abs() < 1e-12);
        let constant = seq(Array2::from_elem((4, 2), 0.7));
        let f = motion_features(&constant).unwrap();
        assert!(f.iter().skip(2).all(|&v| v == 0.0));
    }

    #[test]
    fn velocity_curve_csv() {
        let speeds: Vec<f64> = (0..12).map(|i| if i == 6 { 0.1 } else { 1.0 }).collect();
        let curve = speed_curve(&from_speeds(&speeds), 1.0).unwrap();
        let mut buf = Vec::new();
        write_velocity_curve(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.lines().nth(7).unwrap().ends_with(",1"));
    }
}
