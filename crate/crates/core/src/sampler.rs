//! Arbitrary-length generation: segment-wise sampling, candidate
//! selection at each junction and spline re-filling of the transition.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::diffusion::{sample, Condition, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::motion::{spline_fill, DEFAULT_SPLINE_KNOTS};
use crate::scalar::Real;

/// Frames compared on each side of a junction.
pub const SCORE_WINDOW: usize = 5;
pub const DEFAULT_CANDIDATES: usize = 5;
pub const DEFAULT_GAP: usize = 2;
/// Mean velocities shorter than this contribute no angle.
pub const MIN_VELOCITY_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore<T> {
    pub position: T,
    pub angle: T,
    pub total: T,
}

impl<T: Real> CandidateScore<T> {
    pub fn new(position: T, angle: T) -> Self {
        CandidateScore { position, angle, total: position + angle }
    }
}

fn check_windows<T>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> Result<()> {
    if a.nrows() != SCORE_WINDOW || b.nrows() != SCORE_WINDOW {
        return Err(Error::invalid(format!(
            "score windows must have {SCORE_WINDOW} frames, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::invalid("score windows differ in channel count"));
    }
    Ok(())
}

/// L1 distance between the per-channel means of the two windows.
pub fn position_score<T: Real>(prev_tail: ArrayView2<'_, T>, cand_head: ArrayView2<'_, T>) -> Result<T> {
    check_windows(&prev_tail, &cand_head)?;
    let a = prev_tail.mean_axis(Axis(0)).expect("nonempty window");
    let b = cand_head.mean_axis(Axis(0)).expect("nonempty window");
    Ok(a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()).sum())
}

/// Per-keypoint mean velocity `(last − first)/(W − 1)` of a window.
fn mean_velocity<T: Real>(w: ArrayView2<'_, T>) -> Array1<T> {
    let n = w.nrows();
    (&w.row(n - 1) - &w.row(0)).mapv(|v| v / T::from_usize_lossy(n - 1))
}

/// Mean over keypoints of the angle between the windows' mean velocities.
pub fn velocity_angle_score<T: Real>(prev_tail: ArrayView2<'_, T>, cand_head: ArrayView2<'_, T>) -> Result<T> {
    check_windows(&prev_tail, &cand_head)?;
    let c = prev_tail.ncols();
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::invalid(format!("{c} channels do not decode to 2D points")));
    }
    let (va, vb) = (mean_velocity(prev_tail), mean_velocity(cand_head));
    let eps = T::lit(MIN_VELOCITY_NORM);
    let mut sum = T::zero();
    for k in 0..c / 2 {
        let (ax, ay, bx, by) = (va[2 * k], va[2 * k + 1], vb[2 * k], vb[2 * k + 1]);
        let (na, nb) = (ax.hypot(ay), bx.hypot(by));
        if na < eps || nb < eps {
            continue;
        }
        let cos = ((ax * bx + ay * by) / (na * nb)).max(-T::one()).min(T::one());
        sum += cos.acos();
    }
    Ok(sum / T::from_usize_lossy(c / 2))
}

/// Weighted score of one candidate against the preceding segment.
pub fn score_candidate<T: Real>(
    prev: ArrayView2<'_, T>,
    cand: ArrayView2<'_, T>,
    weights: (T, T),
) -> Result<CandidateScore<T>> {
    if prev.nrows() < SCORE_WINDOW || cand.nrows() < SCORE_WINDOW {
        return Err(Error::invalid(format!("segments need at least {SCORE_WINDOW} frames")));
    }
    let tail = prev.slice(s![prev.nrows() - SCORE_WINDOW.., ..]);
    let head = cand.slice(s![..SCORE_WINDOW, ..]);
    Ok(CandidateScore::new(
        weights.0 * position_score(tail, head)?,
        weights.1 * velocity_angle_score(tail, head)?,
    ))
}

/// Index of the lowest total score (earliest on ties) and all scores.
pub fn select_best<T: Real>(
    prev: ArrayView2<'_, T>,
    candidates: &[Array2<T>],
    weights: (T, T),
) -> Result<(usize, Vec<CandidateScore<T>>)> {
    let first = candidates.first().ok_or_else(|| Error::invalid("no candidates to select from"))?;
    if candidates.iter().any(|c| c.dim() != first.dim()) {
        return Err(Error::invalid("candidates differ in shape"));
    }
    let scores = candidates
        .iter()
        .map(|c| score_candidate(prev, c.view(), weights))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, sc) in scores.iter().enumerate() {
        if sc.total < scores[best].total {
            best = i;
        }
    }
    Ok((best, scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongConfig {
    pub segment_len: usize,
    pub candidates: usize,
    /// Frames re-filled by spline at each junction; 0 concatenates as is.
    pub gap: usize,
    pub guidance: f64,
    pub position_weight: f64,
    pub angle_weight: f64,
    pub seed: u64,
}

impl Default for LongConfig {
    fn default() -> Self {
        LongConfig {
            segment_len: 80,
            candidates: DEFAULT_CANDIDATES,
            gap: DEFAULT_GAP,
            guidance: crate::diffusion::DEFAULT_GUIDANCE,
            position_weight: 1.0,
            angle_weight: 1.0,
            seed: 0,
        }
    }
}

/// Seed of candidate `p` in segment `s`; `(0, 0)` maps to `base`.
pub fn candidate_seed(base: u64, segment: usize, candidate: usize) -> u64 {
    base.wrapping_add(((segment as u64) << 32) | candidate as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSelection<T> {
    pub segment: usize,
    pub scores: Vec<CandidateScore<T>>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongSample<T> {
    pub motion: Array2<T>,
    /// One entry per segment after the first.
    pub selections: Vec<SegmentSelection<T>>,
}

impl<T: Real> LongSample<T> {
    /// Frame indices where segments meet.
    pub fn junctions(&self, segment_len: usize) -> Vec<usize> {
        (1..=self.selections.len()).map(|s| s * segment_len).collect()
    }
}

/// Generates `audio.nrows()` frames in segments of `segment_len`, each
/// conditioned on its audio slice and the previous segment's last frame.
pub fn generate_long<T: Real, D: Denoiser<T> + ?Sized>(
    d: &D,
    audio: &Array2<T>,
    seed_motion: &Array1<T>,
    sched: &DiffusionSchedule<T>,
    cfg: &LongConfig,
) -> Result<LongSample<T>> {
    let m = cfg.segment_len;
    let total = audio.nrows();
    let channels = seed_motion.len();
    if m < SCORE_WINDOW + cfg.gap.max(1) || m < DEFAULT_SPLINE_KNOTS + cfg.gap {
        return Err(Error::invalid(format!(
            "segment length {m} too short for {SCORE_WINDOW}-frame scoring with gap {}",
            cfg.gap
        )));
    }
    if total < m {
        return Err(Error::invalid(format!("audio has {total} frames, shorter than one {m}-frame segment")));
    }
    if cfg.candidates == 0 {
        return Err(Error::invalid("need at least one candidate per segment"));
    }
    let gamma = T::lit(cfg.guidance);
    let weights = (T::lit(cfg.position_weight), T::lit(cfg.angle_weight));
    let segments = total.div_ceil(m);
    let slice = |s: usize| -> Array2<T> {
        Array2::from_shape_fn((m, audio.ncols()), |(i, c)| audio[[(s * m + i).min(total - 1), c]])
    };

    let cond = Condition::new(slice(0), seed_motion.clone());
    let mut out = Array2::from_elem((segments * m, channels), T::zero());
    let mut prev = sample(d, &cond, m, channels, sched, gamma, cfg.seed)?;
    out.slice_mut(s![..m, ..]).assign(&prev);
    let mut selections = Vec::with_capacity(segments - 1);
    for s in 1..segments {
        let cond = Condition::new(slice(s), prev.row(m - 1).to_owned());
        let candidates = (0..cfg.candidates)
            .map(|p| sample(d, &cond, m, channels, sched, gamma, candidate_seed(cfg.seed, s, p)))
            .collect::<Result<Vec<_>>>()?;
        let (best, scores) = select_best(prev.view(), &candidates, weights)?;
        prev = candidates.into_iter().nth(best).expect("index in range");
        out.slice_mut(s![s * m..(s + 1) * m, ..]).assign(&prev);
        selections.push(SegmentSelection { segment: s, scores, selected: best });
    }
    if cfg.gap > 0 {
        let (lo_half, hi_half) = (cfg.gap / 2, cfg.gap - cfg.gap / 2);
        let k = DEFAULT_SPLINE_KNOTS;
        for s in 1..segments {
            let j = s * m;
            let start = j - lo_half;
            let left = out.slice(s![start - k..start, ..]).to_owned();
            let right = out.slice(s![j + hi_half..j + hi_half + k, ..]).to_owned();
            let fill = spline_fill(left.view(), right.view(), cfg.gap)?;
            out.slice_mut(s![start..j + hi_half, ..]).assign(&fill);
        }
    }
    out = out.slice(s![..total, ..]).to_owned();
    Ok(LongSample { motion: out, selections })
}

/// Scores of the final output around each junction, comparing the
/// `SCORE_WINDOW` frames before it with those after it (unit weights).
pub fn junction_scores<T: Real>(motion: &Array2<T>, junctions: &[usize]) -> Result<Vec<CandidateScore<T>>> {
    junctions
        .iter()
        .filter(|&&j| j >= SCORE_WINDOW && j + SCORE_WINDOW <= motion.nrows())
        .map(|&j| {
            let tail = motion.slice(s![j - SCORE_WINDOW..j, ..]);
            let head = motion.slice(s![j..j + SCORE_WINDOW, ..]);
            Ok(CandidateScore::new(position_score(tail, head)?, velocity_angle_score(tail, head)?))
        })
        .collect()
}

/// Writes `segment,candidate,position,angle,total,selected` rows.
pub fn write_scores_csv<T: Real, W: Write>(selections: &[SegmentSelection<T>], mut out: W) -> Result<()> {
    writeln!(out, "segment,candidate,position,angle,total,selected")?;
    for sel in selections {
        for (p, sc) in sel.scores.iter().enumerate() {
            writeln!(
                out,
                "{},{p},{:e},{:e},{:e},{}",
                sel.segment,
                sc.position,
                sc.angle,
                sc.total,
                (p == sel.selected) as u8
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn moving(dir: (f64, f64), points: usize) -> Array2<f64> {
        Array2::from_shape_fn((5, 2 * points), |(i, c)| if c % 2 == 0 { dir.0 * i as f64 } else { dir.1 * i as f64 })
    }

    #[test]
    fn position_score_cases() {
        let a = moving((1.0, 0.0), 2);
        assert_eq!(position_score(a.view(), a.view()).unwrap(), 0.0);
        let delta = [0.5, -1.0, 2.0, 0.25];
        let b = Array2::from_shape_fn((5, 4), |(i, c)| a[[i, c]] + delta[c]);
        assert!((position_score(a.view(), b.view()).unwrap() - 3.75).abs() < 1e-12);
        assert!(position_score(a.view(), a.slice(s![..4, ..])).is_err());
    }

    #[test]
    fn position_score_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
        let mut expected = 0.0;
        for c in 0..6 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..5 {
                ma += a[[i, c]] / 5.0;
                mb += b[[i, c]] / 5.0;
            }
            expected += f64::abs(ma - mb);
        }
        assert!((position_score(a.view(), b.view()).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn angle_score_cases() {
        let px = moving((1.0, 0.0), 3);
        let score = |b: &Array2<f64>| velocity_angle_score(px.view(), b.view()).unwrap();
        assert_eq!(score(&px), 0.0);
        assert!((score(&moving((-1.0, 0.0), 3)) - PI).abs() < 1e-12);
        assert!((score(&moving((0.0, 2.0), 3)) - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(score(&moving((0.0, 0.0), 3)), 0.0);
        assert!(velocity_angle_score(px.slice(s![.., ..5]), px.slice(s![.., ..5])).is_err());
    }

    #[test]
    fn selection_prefers_continuation() {
        let prev = Array2::from_shape_fn((10, 4), |(i, c)| 0.1 * i as f64 + c as f64);
        let cont = Array2::from_shape_fn((10, 4), |(i, c)| 0.1 * (i + 10) as f64 + c as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cands: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_simple_fn((10, 4), || rng.random_range(-2.0..2.0)))
            .collect();
        cands.insert(2, cont);
        let (best, scores) = select_best(prev.view(), &cands, (1.0, 1.0)).unwrap();
        assert_eq!(best, 2);
        assert!(scores.iter().all(|s| s.total == s.position + s.angle));
        let same = vec![cands[0].clone(); 3];
        assert_eq!(select_best(prev.view(), &same, (1.0, 1.0)).unwrap().0, 0);
        assert!(select_best::<f64>(prev.view(), &[], (1.0, 1.0)).is_err());
    }

    #[test]
    fn single_segment_equals_plain_sample() {
        let sched = make_schedule::<f64>(10, ScheduleKind::Cosine).unwrap();
        let d = |x: &Array2<f64>, _t: usize, c: &Condition<f64>| x.mapv(|v| 0.5 * v) + c.audio.sum();
        let audio = Array2::from_elem((20, 1), 0.01);
        let seed = Array1::from(vec![0.0, 1.0]);
        let cfg = LongConfig { segment_len: 20, seed: 9, ..LongConfig::default() };
        let long = generate_long(&d, &audio, &seed, &sched, &cfg).unwrap();
        let cond = Condition::new(audio.clone(), seed.clone());
        let plain = sample(&d, &cond, 20, 2, &sched, 2.0, 9).unwrap();
        assert_eq!(long.motion, plain);
        assert!(long.selections.is_empty());
    }

    #[test]
    fn oracle_continuation_is_seamless() {
        let sched = make_schedule::<f64>(20, ScheduleKind::Cosine).unwrap();
        let m = 16;
        let target = |f: f64| [0.3 * (0.2 * f).sin(), 0.1 * f - 1.0];
        // the audio carries the absolute frame index, so the oracle knows
        // which stretch of the smooth target each window covers
        let audio = Array2::from_shape_fn((40, 1), |(i, _)| i as f64);
        let d = |x: &Array2<f64>, _t: usize, c: &Condition<f64>| {
            Array2::from_shape_fn(x.dim(), |(i, ch)| target(c.audio[[0, 0]] + i as f64)[ch])
        };
        let cfg = LongConfig { segment_len: m, candidates: 3, seed: 1, guidance: 1.0, ..LongConfig::default() };
        let long = generate_long(&d, &audio, &Array1::zeros(2), &sched, &cfg).unwrap();
        assert_eq!(long.motion.nrows(), 40);
        assert_eq!(long.selections.len(), 2);
        for i in 0..40 {
            for ch in 0..2 {
                assert!((long.motion[[i, ch]] - target(i as f64)[ch]).abs() < 1e-2, "frame {i}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_trimmed() {
        let sched = make_schedule::<f64>(5, ScheduleKind::Linear).unwrap();
        let d = |x: &Array2<f64>, _t: usize, c: &Condition<f64>| {
            x.mapv(|v| 0.3 * v) + c.seed_motion.view().insert_axis(Axis(0))
        };
        let audio = Array2::zeros((33, 2));
        let cfg = LongConfig { segment_len: 12, seed: 4, ..LongConfig::default() };
        let a = generate_long(&d, &audio, &Array1::from(vec![0.2, 0.4]), &sched, &cfg).unwrap();
        let b = generate_long(&d, &audio, &Array1::from(vec![0.2, 0.4]), &sched, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.motion.nrows(), 33);
        assert_eq!(a.junctions(12), vec![12, 24]);
        assert_eq!(junction_scores(&a.motion, &a.junctions(12)).unwrap().len(), 2);
        assert!(generate_long(&d, &Array2::zeros((11, 2)), &Array1::zeros(2), &sched, &cfg).is_err());
        let mut buf = Vec::new();
        write_scores_csv(&a.selections, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn seeds_are_distinct() {
        assert_eq!(candidate_seed(7, 0, 0), 7);
        assert_ne!(candidate_seed(7, 1, 0), candidate_seed(7, 0, 1));
    }
}
