//! Synthetic beat-driven datasets and their on-disk layout.
//!
//! A dataset directory holds, per item `XXXX`, the motion `seq_XXXX.mdsq`,
//! its features `audio_XXXX.mdaf` and the one-frame rest pose
//! `seed_XXXX.mdsq`, plus a human-readable `index.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use motiondiff::audio::{decode_features, encode_features, synth_condition, AudioCondition};
use motiondiff::diffusion::{Condition, TrainingExample};
use motiondiff::motion::{clip_windows, decode_sequence, encode_sequence, Fps, MotionSequence};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{read_bytes, write_bytes, CliError, PipelineConfig};

/// Radius of each keypoint group around its center in the rest pose.
const GROUP_RADIUS: f64 = 0.15;
/// Sway amplitude relative to the stroke amplitude.
const SWAY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub motion: MotionSequence<f64>,
    pub audio: AudioCondition<f64>,
    pub rest: MotionSequence<f64>,
}

fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Stroke phase in `[-1, 1]`: a half cosine between consecutive beats, so
/// keypoints rest at an extreme on every beat and move fastest between.
fn stroke(t: f64, beats: &[f64], interval: f64) -> f64 {
    let (first, last) = (beats[0], beats[beats.len() - 1]);
    let (j, start, len) = if t < first {
        let back = ((first - t) / interval).ceil();
        (-(back as i64), first - back * interval, interval)
    } else if t >= last {
        let fwd = ((t - last) / interval).floor();
        ((beats.len() - 1) as i64 + fwd as i64, last + fwd * interval, interval)
    } else {
        let j = beats.partition_point(|&b| b <= t) - 1;
        (j as i64, beats[j], beats[j + 1] - beats[j])
    };
    let u = (t - start) / len;
    let sign = if j.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    sign * (std::f64::consts::PI * u).cos()
}

/// One synthetic item: keypoints stroke between extremes timed by the
/// beats, with a small sway driven by the noise feature channels.
pub fn synth_item(cfg: &PipelineConfig, seed: u64) -> Result<DataItem, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.sequence_frames;
    let fps = cfg.fps.as_f64();
    let duration = (m - 1) as f64 / fps;
    let interval: f64 = rng.random_range(0.4..0.7);
    let mut beats = Vec::new();
    let mut t: f64 = rng.random_range(0.1..0.1 + interval);
    while t <= duration {
        beats.push(t);
        t += interval * rng.random_range(0.9..1.1);
    }
    if beats.is_empty() {
        beats.push(duration / 2.0);
    }
    let audio = synth_condition::<f64>(&beats, m, cfg.fps, cfg.audio_dim, rng.random())?;

    let (k, n) = (cfg.k, cfg.n);
    let c = cfg.channels();
    let mut rest = vec![0.0; c];
    let mut dirs = Vec::with_capacity(k);
    let mut gains = vec![0.0; k * n];
    for g in 0..k {
        let (cx, cy): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for p in 0..n {
            let a = offset + std::f64::consts::TAU * p as f64 / n as f64;
            rest[2 * (g * n + p)] = cx + GROUP_RADIUS * a.cos();
            rest[2 * (g * n + p) + 1] = cy + GROUP_RADIUS * a.sin();
            gains[g * n + p] = rng.random_range(0.7..1.3);
        }
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        dirs.push((theta.cos(), theta.sin()));
    }
    let amp = cfg.amplitude;
    let frames = Array2::from_shape_fn((m, c), |(f, ch)| {
        let point = ch / 2;
        let g = point / n;
        let (dx, dy) = dirs[g];
        let phase = stroke(f as f64 / fps, &beats, interval);
        let sway = if cfg.audio_dim > 1 {
            SWAY * audio.features[[f, 1 + g % (cfg.audio_dim - 1)]]
        } else {
            0.0
        };
        let (along, across) = (amp * gains[point] * phase, amp * sway);
        rest[ch] + if ch % 2 == 0 { along * dx - across * dy } else { along * dy + across * dx }
    });
    let motion = MotionSequence::new(frames, cfg.fps)?;
    let rest = MotionSequence::new(Array2::from_shape_vec((1, c), rest).expect("one frame"), cfg.fps)?;
    Ok(DataItem { motion, audio, rest })
}

pub fn synth_dataset(cfg: &PipelineConfig, seed: u64) -> Result<Vec<DataItem>, CliError> {
    (0..cfg.sequences).map(|i| synth_item(cfg, item_seed(seed, i))).collect()
}

fn names(i: usize) -> [String; 3] {
    [format!("seq_{i:04}.mdsq"), format!("audio_{i:04}.mdaf"), format!("seed_{i:04}.mdsq")]
}

pub fn write_dataset(dir: &Path, items: &[DataItem], seed: u64) -> Result<(), CliError> {
    let mut index = format!("# seed={seed}\nindex,motion,audio,seed_motion,frames,beats\n");
    for (i, item) in items.iter().enumerate() {
        let [seq, audio, rest] = names(i);
        write_bytes(&dir.join(&seq), &encode_sequence(&item.motion)?)?;
        write_bytes(&dir.join(&audio), &encode_features(&item.audio)?)?;
        write_bytes(&dir.join(&rest), &encode_sequence(&item.rest)?)?;
        let _ = writeln!(index, "{i},{seq},{audio},{rest},{},{}", item.motion.len(), item.audio.beats.len());
    }
    write_bytes(&dir.join("index.csv"), index.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DataItem>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::parse(format!("cannot list {}: {e}", dir.display())))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|name| name.strip_prefix("seq_").and_then(|s| s.strip_suffix(".mdsq")).map(str::to_string))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::numeric(format!("no seq_*.mdsq files in {}", dir.display())));
    }
    stems
        .iter()
        .map(|stem| {
            let path = |prefix: &str, ext: &str| -> PathBuf { dir.join(format!("{prefix}_{stem}.{ext}")) };
            let motion: MotionSequence<f64> = decode_sequence(&read_bytes(&path("seq", "mdsq"))?)?;
            let audio: AudioCondition<f64> = decode_features(&read_bytes(&path("audio", "mdaf"))?)?;
            let rest: MotionSequence<f64> = decode_sequence(&read_bytes(&path("seed", "mdsq"))?)?;
            if audio.frames() != motion.len() || rest.channels() != motion.channels() {
                return Err(CliError::parse(format!("item {stem}: motion, audio and seed shapes disagree")));
            }
            Ok(DataItem { motion, audio, rest })
        })
        .collect()
}

/// Windows of `m` frames every `stride`; each is conditioned on its audio
/// slice and on the frame just before it (the rest pose for the first).
pub fn training_examples(items: &[DataItem], m: usize, stride: usize) -> Result<Vec<TrainingExample<f64>>, CliError> {
    let mut out = Vec::new();
    for item in items {
        let windows = clip_windows(&item.motion, m, stride)?;
        for (w, win) in windows.into_iter().enumerate() {
            let start = w * stride;
            let seed_motion = if start == 0 {
                item.rest.frames.row(0).to_owned()
            } else {
                item.motion.frames.row(start - 1).to_owned()
            };
            let audio = item.audio.features.slice(s![start..start + m, ..]).to_owned();
            out.push(TrainingExample { motion: win.frames, cond: Condition::new(audio, seed_motion) });
        }
    }
    if out.is_empty() {
        return Err(CliError::numeric(format!("dataset yields no {m}-frame training windows")));
    }
    Ok(out)
}

/// Fps shared by all items, or an error if they disagree.
pub fn dataset_fps(items: &[DataItem]) -> Result<Fps, CliError> {
    let fps = items.first().map(|i| i.motion.fps).unwrap_or_default();
    if items.iter().any(|i| i.motion.fps != fps) {
        return Err(CliError::parse("dataset items have different frame rates"));
    }
    Ok(fps)
}
