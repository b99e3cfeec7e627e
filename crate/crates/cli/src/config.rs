//! Pipeline configuration: `key = value` lines with `#` comments.

use std::path::Path;

use motiondiff::diffusion::{parse_key_values, TrainConfig, DEFAULT_GUIDANCE};
use motiondiff::flow::DEFAULT_SOFTNESS;
use motiondiff::metrics::{DEFAULT_SIGMA_BEAT, DEFAULT_SIGMA_SMOOTH};
use motiondiff::motion::Fps;
use motiondiff::sampler::{LongConfig, DEFAULT_CANDIDATES, DEFAULT_GAP};
use motiondiff::Error;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Keypoint groups (one TPS transform each).
    pub k: usize,
    /// Keypoints per group.
    pub n: usize,
    /// Frames per diffusion window / generated segment.
    pub m: usize,
    pub stride: usize,
    pub guidance: f64,
    pub candidates: usize,
    pub gap: usize,
    pub softness: f64,
    pub sigma_b: f64,
    pub sigma_smooth: f64,
    pub position_weight: f64,
    pub angle_weight: f64,
    pub seed: u64,
    pub fps: Fps,
    pub audio_dim: usize,
    pub sequences: usize,
    pub sequence_frames: usize,
    pub amplitude: f64,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 20,
            n: 5,
            m: 80,
            stride: 10,
            guidance: DEFAULT_GUIDANCE,
            candidates: DEFAULT_CANDIDATES,
            gap: DEFAULT_GAP,
            softness: DEFAULT_SOFTNESS,
            sigma_b: DEFAULT_SIGMA_BEAT,
            sigma_smooth: DEFAULT_SIGMA_SMOOTH,
            position_weight: 1.0,
            angle_weight: 1.0,
            seed: 0,
            fps: Fps::default(),
            audio_dim: 4,
            sequences: 200,
            sequence_frames: 80,
            amplitude: 0.15,
            train: TrainConfig::default(),
        }
    }
}

fn value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V, Error> {
    v.parse().map_err(|_| Error::Parse {
        context: "config".into(),
        message: format!("invalid value {v:?} for {key}"),
    })
}

fn parse_fps(v: &str) -> Result<Fps, Error> {
    let fps = match v.split_once('/') {
        Some((a, b)) => Fps::new(value("fps", a.trim())?, value("fps", b.trim())?),
        None => Fps::new(value("fps", v)?, 1),
    };
    if !fps.is_valid() {
        return Err(Error::Parse { context: "config".into(), message: format!("invalid fps {v:?}") });
    }
    Ok(fps)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in parse_key_values(text)? {
            let v = v.as_str();
            match k.as_str() {
                "k" => cfg.k = value(&k, v)?,
                "n" => cfg.n = value(&k, v)?,
                "m" => cfg.m = value(&k, v)?,
                "stride" => cfg.stride = value(&k, v)?,
                "guidance" => cfg.guidance = value(&k, v)?,
                "candidates" => cfg.candidates = value(&k, v)?,
                "gap" => cfg.gap = value(&k, v)?,
                "softness" => cfg.softness = value(&k, v)?,
                "sigma_b" => cfg.sigma_b = value(&k, v)?,
                "sigma_smooth" => cfg.sigma_smooth = value(&k, v)?,
                "position_weight" => cfg.position_weight = value(&k, v)?,
                "angle_weight" => cfg.angle_weight = value(&k, v)?,
                "seed" => cfg.seed = value(&k, v)?,
                "fps" => cfg.fps = parse_fps(v)?,
                "audio_dim" => cfg.audio_dim = value(&k, v)?,
                "sequences" => cfg.sequences = value(&k, v)?,
                "sequence_frames" => cfg.sequence_frames = value(&k, v)?,
                "amplitude" => cfg.amplitude = value(&k, v)?,
                _ => {
                    if !cfg.train.set(&k, v)? {
                        return Err(CliError::parse(format!("config: unknown key {k:?}")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::parse(&crate::read_text(p)?),
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::parse(format!("config: {m}")));
        if self.k == 0 || self.n == 0 {
            return bad("k and n must be positive");
        }
        if self.m == 0 || self.stride == 0 || self.sequence_frames == 0 || self.audio_dim == 0 {
            return bad("m, stride, sequence_frames and audio_dim must be positive");
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1");
        }
        if !(self.softness > 0.0 && self.sigma_b > 0.0 && self.sigma_smooth >= 0.0) {
            return bad("softness and sigma_b must be positive, sigma_smooth non-negative");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be non-negative");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Channels per motion frame, `C = 2·K·N`.
    pub fn channels(&self) -> usize {
        2 * self.k * self.n
    }

    pub fn long_config(&self, seed: u64) -> LongConfig {
        LongConfig {
            segment_len: self.m,
            candidates: self.candidates,
            gap: self.gap,
            guidance: self.guidance,
            position_weight: self.position_weight,
            angle_weight: self.angle_weight,
            seed,
        }
    }
}
