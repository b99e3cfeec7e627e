//! Audio conditioning: WAV parsing, spectral-flux onsets, beat picking,
//! feature alignment and the `MDAF` feature container.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::motion::Fps;
use crate::scalar::Real;
use crate::signal::gaussian_smooth;

pub const DEFAULT_WIN: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_RATE: u32 = 16_000;
pub const DEFAULT_BEAT_THRESHOLD: f64 = 1.5;
/// Half-width, in envelope frames, of the beat-picking moving mean.
pub const BEAT_MEAN_RADIUS: usize = 10;
/// Minimum spacing between detected beats, seconds.
pub const MIN_BEAT_SPACING: f64 = 0.1;
/// Smoothing of the beat impulse channel in [`synth_condition`], frames.
pub const IMPULSE_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn riff_err(chunk: &str, message: impl std::fmt::Display) -> Error {
    Error::parse("WAV", format!("{chunk} chunk: {message}"))
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses a RIFF/WAVE PCM16 file; stereo is averaged to mono and samples
/// are scaled by `1/32768`.
pub fn read_wav<T: Real>(bytes: &[u8]) -> Result<AudioClip<T>> {
    if bytes.len() < 12 {
        return Err(riff_err("RIFF", "truncated header"));
    }
    if &bytes[..4] != b"RIFF" {
        return Err(riff_err("RIFF", "bad magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(riff_err("RIFF", "form type is not WAVE"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    let mut data: Option<&[u8]> = None;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(riff_err("RIFF", format!("truncated chunk header at offset {pos}")));
        }
        let id = &bytes[pos..pos + 4];
        let name = String::from_utf8_lossy(id).into_owned();
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body = bytes
            .get(body_start..body_start.saturating_add(size))
            .ok_or_else(|| riff_err(&name, format!("declares {size} bytes but the file ends early")))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(riff_err("fmt", "shorter than 16 bytes"));
                }
                let tag = le_u16(&body[0..2]);
                let channels = le_u16(&body[2..4]);
                let rate = le_u32(&body[4..8]);
                let bits = le_u16(&body[14..16]);
                if tag != 1 {
                    return Err(riff_err("fmt", format!("format tag {tag} is not PCM")));
                }
                if bits != 16 {
                    return Err(riff_err("fmt", format!("{bits}-bit samples; only 16-bit PCM is supported")));
                }
                if channels != 1 && channels != 2 {
                    return Err(riff_err("fmt", format!("{channels} channels; expected mono or stereo")));
                }
                if rate == 0 {
                    return Err(riff_err("fmt", "zero sample rate"));
                }
                format = Some((channels, rate));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let (channels, rate) = format.ok_or_else(|| riff_err("fmt", "missing"))?;
    let data = data.ok_or_else(|| riff_err("data", "missing"))?;
    let frame_bytes = 2 * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(riff_err("data", "length is not a whole number of sample frames"));
    }
    let scale = T::lit(1.0 / 32768.0);
    let samples: Vec<T> = data
        .chunks_exact(frame_bytes)
        .map(|f| {
            let sum: i32 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as i32).sum();
            T::lit(sum as f64 / channels as f64) * scale
        })
        .collect();
    AudioClip::new(samples, rate).map_err(|e| riff_err("data", e))
}

/// Writes a mono PCM16 WAV, rounding `s·32768` and clamping to the i16 range.
pub fn write_wav<T: Real>(clip: &AudioClip<T>) -> Result<Vec<u8>> {
    let data_len = clip
        .samples
        .len()
        .checked_mul(2)
        .and_then(|n| u32::try_from(n).ok().filter(|&n| n <= u32::MAX - 36))
        .ok_or_else(|| Error::invalid("clip too long for a WAV file"))?;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &clip.samples {
        let q = (s.to_f64_lossy() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

/// Half-wave rectified spectral flux of Hann-windowed frames centered at
/// multiples of `hop` (the clip is zero-padded by `win/2` on each side).
/// The first value is 0.
pub fn onset_envelope<T: Real>(clip: &AudioClip<T>, win: usize, hop: usize) -> Result<Vec<T>> {
    if !win.is_power_of_two() || win < 2 {
        return Err(Error::invalid(format!("window {win} is not a power of two")));
    }
    if hop == 0 {
        return Err(Error::invalid("hop must be positive"));
    }
    let n = clip.samples.len();
    if n < win {
        return Err(Error::invalid(format!("clip has {n} samples, shorter than the {win}-sample window")));
    }
    let frames = 1 + n / hop;
    let half = win / 2;
    let hann: Vec<T> = (0..win)
        .map(|i| {
            let s = (T::PI() * T::from_usize_lossy(i) / T::from_usize_lossy(win)).sin();
            s * s
        })
        .collect();
    let fft: Arc<dyn Fft<T>> = FftPlanner::new().plan_fft_forward(win);
    let bins = win / 2 + 1;
    let mut prev: Vec<T> = vec![T::zero(); bins];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); win];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = (f * hop) as isize - half as isize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let k = start + i as isize;
            let s = if k >= 0 && (k as usize) < n { clip.samples[k as usize] } else { T::zero() };
            *slot = Complex::new(s * hann[i], T::zero());
        }
        fft.process(&mut buf);
        let mags: Vec<T> = buf[..bins].iter().map(|c| c.norm()).collect();
        let flux = if f == 0 {
            T::zero()
        } else {
            mags.iter().zip(&prev).map(|(&m, &p)| (m - p).max(T::zero())).sum()
        };
        out.push(flux);
        prev = mags;
    }
    Ok(out)
}

/// Picks local maxima of `envelope` above `threshold_ratio` times the
/// moving mean over ±10 frames, converts them to seconds and enforces a
/// 0.1 s minimum spacing, keeping the larger peak.
pub fn detect_beats<T: Real>(envelope: &[T], hop: usize, rate: u32, threshold_ratio: f64) -> Vec<f64> {
    let n = envelope.len();
    let e: Vec<f64> = envelope.iter().map(|v| v.to_f64_lossy()).collect();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + e[i];
    }
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    for i in 0..n {
        let left = if i == 0 { f64::NEG_INFINITY } else { e[i - 1] };
        let right = if i + 1 == n { f64::NEG_INFINITY } else { e[i + 1] };
        if !(e[i] > 0.0 && e[i] > left && e[i] >= right) {
            continue;
        }
        let lo = i.saturating_sub(BEAT_MEAN_RADIUS);
        let hi = (i + BEAT_MEAN_RADIUS + 1).min(n);
        let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        if e[i] > threshold_ratio * mean {
            peaks.push((i, e[i]));
        }
    }
    let seconds = |i: usize| (i * hop) as f64 / rate as f64;
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<f64> = Vec::new();
    for (i, _) in peaks {
        let t = seconds(i);
        if kept.iter().all(|&k| (k - t).abs() >= MIN_BEAT_SPACING - 1e-12) {
            kept.push(t);
        }
    }
    kept.sort_by(f64::total_cmp);
    kept
}

/// Resamples rows recorded at `source_fps` onto `target_m` frames at
/// `target_fps` by linear interpolation in time, clamping at the ends.
pub fn align_features<T: Real>(
    source: &Array2<T>,
    source_fps: f64,
    target_m: usize,
    target_fps: f64,
) -> Result<Array2<T>> {
    let rows = source.nrows();
    if rows == 0 {
        return Err(Error::invalid("cannot align an empty feature matrix"));
    }
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::invalid("frame rates must be positive"));
    }
    let last = (rows - 1) as f64;
    let mut out = Array2::from_elem((target_m, source.ncols()), T::zero());
    for j in 0..target_m {
        let mut pos = (j as f64 * source_fps / target_fps).clamp(0.0, last);
        let nearest = pos.round();
        if (pos - nearest).abs() <= 1e-9 * (1.0 + pos) {
            pos = nearest;
        }
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        if frac == 0.0 {
            out.row_mut(j).assign(&source.row(i0));
        } else {
            let w = T::lit(frac);
            for c in 0..source.ncols() {
                let (a, b) = (source[[i0, c]], source[[i0 + 1, c]]);
                out[[j, c]] = a + w * (b - a);
            }
        }
    }
    Ok(out)
}

/// Per-frame conditioning features with the beat times they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioCondition<T> {
    pub features: Array2<T>,
    pub fps: Fps,
    pub beats: Vec<f64>,
}

impl<T: Real> AudioCondition<T> {
    pub fn new(features: Array2<T>, fps: Fps, beats: Vec<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::invalid("audio features must have at least one frame and channel"));
        }
        if !fps.is_valid() {
            return Err(Error::invalid("fps must have positive numerator and denominator"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("audio features must be finite"));
        }
        let duration = features.nrows() as f64 / fps.as_f64();
        if beats.iter().any(|b| !(b.is_finite() && *b >= 0.0 && *b <= duration)) {
            return Err(Error::invalid(format!("beat times must lie in [0, {duration}] s")));
        }
        if beats.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("beat times must be sorted"));
        }
        Ok(AudioCondition { features, fps, beats })
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
}

/// Synthetic condition: channel 0 holds Gaussian-smoothed beat impulses
/// (renormalized at the edges, so a beat on every frame gives a constant
/// channel); the remaining channels are seeded low-frequency sinusoids.
pub fn synth_condition<T: Real>(
    beat_times: &[f64],
    m: usize,
    fps: Fps,
    channels: usize,
    seed: u64,
) -> Result<AudioCondition<T>> {
    if m == 0 || channels == 0 {
        return Err(Error::invalid("synthetic condition needs frames and channels"));
    }
    if !fps.is_valid() {
        return Err(Error::invalid("invalid fps"));
    }
    let rate = fps.as_f64();
    let mut impulses = vec![T::zero(); m];
    for &b in beat_times {
        let f = (b * rate).round();
        if f >= 0.0 && (f as usize) < m {
            impulses[f as usize] = T::one();
        }
    }
    let smoothed = gaussian_smooth(&impulses, IMPULSE_SIGMA);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::from_elem((m, channels), T::zero());
    for (i, v) in smoothed.into_iter().enumerate() {
        features[[i, 0]] = v;
    }
    for c in 1..channels {
        let freq: f64 = rng.random_range(0.2..1.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.1..0.5);
        for i in 0..m {
            let t = i as f64 / rate;
            features[[i, c]] = T::lit(amp * (std::f64::consts::TAU * freq * t + phase).sin());
        }
    }
    let mut beats = beat_times.to_vec();
    beats.sort_by(f64::total_cmp);
    AudioCondition::new(features, fps, beats)
}

pub const FEATURE_MAGIC: &[u8; 4] = b"MDAF";

/// `MDAF`: magic, u32 M, u32 C_a, u32 fps_num, u32 fps_den, u32 beat
/// count, f64 beat times, then row-major f32 features.
pub fn encode_features<T: Real>(cond: &AudioCondition<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 8 * cond.beats.len() + 4 * cond.features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    binio::put_u32(&mut out, binio::dim_u32(cond.frames(), "frame count")?);
    binio::put_u32(&mut out, binio::dim_u32(cond.channels(), "channel count")?);
    binio::put_u32(&mut out, cond.fps.num);
    binio::put_u32(&mut out, cond.fps.den);
    binio::put_u32(&mut out, binio::dim_u32(cond.beats.len(), "beat count")?);
    for &b in &cond.beats {
        binio::put_f64(&mut out, b);
    }
    for v in cond.features.iter() {
        binio::put_f32(&mut out, v.to_f32_lossy());
    }
    Ok(out)
}

pub fn decode_features<T: Real>(bytes: &[u8]) -> Result<AudioCondition<T>> {
    let mut r = Reader::new(bytes, "MDAF");
    r.magic(FEATURE_MAGIC)?;
    let m = r.u32("frame count")? as usize;
    let c = r.u32("channel count")? as usize;
    let fps = Fps::new(r.u32("fps numerator")?, r.u32("fps denominator")?);
    let nb = r.u32("beat count")? as usize;
    if m == 0 || c == 0 {
        return Err(r.error("zero frame or channel count"));
    }
    if !fps.is_valid() {
        return Err(r.error("zero fps component"));
    }
    let beats = r.f64s(nb, "beat times")?;
    let n = m.checked_mul(c).ok_or_else(|| r.error("feature size overflows"))?;
    let data = r.f32s(n, "features")?;
    binio::check_finite(&data, &r, "features")?;
    r.finish()?;
    let features = Array2::from_shape_vec((m, c), data.into_iter().map(|v| T::lit(v as f64)).collect())
        .expect("shape checked");
    AudioCondition::new(features, fps, beats).map_err(|e| Error::parse("MDAF", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm_fixture(channels: u16, rate: u32, frames: &[Vec<i16>]) -> Vec<u8> {
        let data: Vec<u8> = frames.iter().flatten().flat_map(|s| s.to_le_bytes()).collect();
        let mut out = Vec::new();
        out.extend(b"RIFF");
        out.extend((36 + data.len() as u32).to_le_bytes());
        out.extend(b"WAVE");
        out.extend(b"fmt ");
        out.extend(16u32.to_le_bytes());
        out.extend(1u16.to_le_bytes());
        out.extend(channels.to_le_bytes());
        out.extend(rate.to_le_bytes());
        out.extend((rate * 2 * channels as u32).to_le_bytes());
        out.extend((2 * channels).to_le_bytes());
        out.extend(16u16.to_le_bytes());
        out.extend(b"data");
        out.extend((data.len() as u32).to_le_bytes());
        out.extend(data);
        out
    }

    #[test]
    fn silence_and_square_wave() {
        let silence = pcm_fixture(1, 16_000, &vec![vec![0]; 16_000]);
        let clip: AudioClip<f64> = read_wav(&silence).unwrap();
        assert_eq!(clip.samples.len(), 16_000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));

        let square: Vec<Vec<i16>> = (0..64).map(|i| vec![if i % 8 < 4 { 32767 } else { -32767 }]).collect();
        let clip: AudioClip<f64> = read_wav(&pcm_fixture(1, 8000, &square)).unwrap();
        for (i, s) in clip.samples.iter().enumerate() {
            let expected = if i % 8 < 4 { 32767.0 / 32768.0 } else { -32767.0 / 32768.0 };
            assert_eq!(*s, expected);
        }
    }

    #[test]
    fn stereo_is_averaged() {
        let clip: AudioClip<f64> = read_wav(&pcm_fixture(2, 100, &[vec![1000, 3000], vec![-2, 0]])).unwrap();
        assert_eq!(clip.samples, vec![2000.0 / 32768.0, -1.0 / 32768.0]);
    }

    #[test]
    fn malformed_wavs_name_the_chunk() {
        let good = pcm_fixture(1, 100, &[vec![1], vec![2]]);
        let err = read_wav::<f64>(&good[..10]).unwrap_err().to_string();
        assert!(err.contains("RIFF"), "{err}");
        let mut float_fmt = good.clone();
        float_fmt[20] = 3;
        let err = read_wav::<f64>(&float_fmt).unwrap_err().to_string();
        assert!(err.contains("fmt"), "{err}");
        let err = read_wav::<f64>(&good[..good.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("data"), "{err}");
    }

    #[test]
    fn wav_round_trip() {
        let square: Vec<Vec<i16>> = (0..50).map(|i| vec![(i * 997 % 65536) as i16]).collect();
        let bytes = pcm_fixture(1, 22_050, &square);
        let clip: AudioClip<f64> = read_wav(&bytes).unwrap();
        assert_eq!(write_wav(&clip).unwrap(), bytes);
    }

    #[test]
    fn onset_envelope_cases() {
        let silence = AudioClip::new(vec![0.0f64; 4096], 16_000).unwrap();
        assert!(onset_envelope(&silence, 1024, 256).unwrap().iter().all(|&v| v == 0.0));
        assert!(onset_envelope(&AudioClip::new(vec![0.0f64; 100], 16_000).unwrap(), 1024, 256).is_err());
        assert!(onset_envelope(&silence, 1000, 256).is_err());
    }

    #[test]
    fn beats_from_impulses() {
        assert!(detect_beats(&[0.0f64; 50], 256, 16_000, 1.5).is_empty());
        let mut env = vec![0.0f64; 100];
        env[40] = 1.0;
        assert_eq!(detect_beats(&env, 256, 16_000, 1.5), vec![40.0 * 256.0 / 16_000.0]);
        // 0.05 s apart at 16 ms per frame: about 3 frames
        env[43] = 0.5;
        assert_eq!(detect_beats(&env, 256, 16_000, 1.5), vec![40.0 * 256.0 / 16_000.0]);
    }

    #[test]
    fn align_linear_ramp() {
        let src = Array2::from_shape_fn((11, 2), |(i, c)| 0.5 + 2.0 * (i as f64 / 10.0) + c as f64);
        let out = align_features(&src, 10.0, 25, 25.0).unwrap();
        for j in 0..25 {
            let t = (j as f64 / 25.0).min(1.0);
            for c in 0..2 {
                assert!((out[[j, c]] - (0.5 + 2.0 * t + c as f64)).abs() < 1e-9);
            }
        }
        assert_eq!(align_features(&src, 10.0, 11, 10.0).unwrap(), src);
        assert!(align_features(&Array2::<f64>::zeros((0, 2)), 10.0, 5, 25.0).is_err());
    }

    #[test]
    fn synthetic_condition_channels() {
        let fps = Fps::new(25, 1);
        let none: AudioCondition<f64> = synth_condition(&[], 30, fps, 3, 1).unwrap();
        assert!(none.features.column(0).iter().all(|&v| v == 0.0));
        let every: Vec<f64> = (0..30).map(|i| i as f64 / 25.0).collect();
        let full: AudioCondition<f64> = synth_condition(&every, 30, fps, 3, 1).unwrap();
        assert!(full.features.column(0).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(none.features.column(1), full.features.column(1));
        let other: AudioCondition<f64> = synth_condition(&[], 30, fps, 3, 2).unwrap();
        assert_ne!(none.features, other.features);
    }

    #[test]
    fn feature_codec() {
        let cond: AudioCondition<f64> = synth_condition(&[0.2, 0.6], 20, Fps::new(25, 1), 4, 9).unwrap();
        let bytes = encode_features(&cond).unwrap();
        let back: AudioCondition<f64> = decode_features(&bytes).unwrap();
        assert_eq!(back.beats, cond.beats);
        assert_eq!(encode_features(&back).unwrap(), bytes);
        assert!(decode_features::<f64>(&bytes[..bytes.len() - 2]).is_err());
        let wide = AudioCondition::new(Array2::<f64>::zeros((2, 1059)), Fps::new(25, 1), vec![]).unwrap();
        let back: AudioCondition<f64> = decode_features(&encode_features(&wide).unwrap()).unwrap();
        assert_eq!(back.channels(), 1059);
    }
}
