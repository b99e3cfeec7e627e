//! Structural checks for every artifact the toolkit writes.

use motiondiff::audio::{decode_features, read_wav, FEATURE_MAGIC};
use motiondiff::diffusion::{decode_mlp, MLP_MAGIC};
use motiondiff::flow::{decode_flow, FLOW_MAGIC};
use motiondiff::image::{decode_pgm, decode_ppm};
use motiondiff::motion::{decode_sequence, SEQUENCE_MAGIC};
use motiondiff::tps::{decode_tps, TPS_MAGIC};

use crate::CliError;

/// Side conditions must vanish to this fraction of the weight scale.
const SIDE_CONDITION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tps,
    Flow,
    Sequence,
    Features,
    Model,
    Ppm,
    Pgm,
    Wav,
}

impl Format {
    pub fn detect(bytes: &[u8]) -> Option<Format> {
        let magic = bytes.get(..4)?;
        Some(match magic {
            m if m == TPS_MAGIC => Format::Tps,
            m if m == FLOW_MAGIC => Format::Flow,
            m if m == SEQUENCE_MAGIC => Format::Sequence,
            m if m == FEATURE_MAGIC => Format::Features,
            m if m == MLP_MAGIC => Format::Model,
            b"RIFF" => Format::Wav,
            m if m.starts_with(b"P6") => Format::Ppm,
            m if m.starts_with(b"P5") => Format::Pgm,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Tps => "MDTP",
            Format::Flow => "MDFL",
            Format::Sequence => "MDSQ",
            Format::Features => "MDAF",
            Format::Model => "MDNN",
            Format::Ppm => "PPM",
            Format::Pgm => "PGM",
            Format::Wav => "WAV",
        }
    }
}

/// Decodes `bytes` in full and returns a one-line description.
pub fn verify_bytes(bytes: &[u8]) -> Result<String, CliError> {
    let format = Format::detect(bytes).ok_or_else(|| CliError::parse("unrecognized file format"))?;
    let detail = match format {
        Format::Tps => {
            let t = decode_tps::<f64>(bytes)?;
            let extent = t.controls.iter().fold(0.0f64, |m, c| m.max(c.x.abs()).max(c.y.abs()));
            let scale = (t.max_weight() * t.len() as f64 * (1.0 + extent)).max(1.0);
            let err = t.side_condition_error();
            if !(err <= SIDE_CONDITION_TOLERANCE * scale) {
                return Err(CliError::parse(format!("MDTP: side conditions violated ({err:e})")));
            }
            format!("controls={} side_condition_error={err:e}", t.len())
        }
        Format::Flow => {
            let f = decode_flow::<f64>(bytes)?;
            let invalid = f.valid_mask.iter().filter(|&&v| !v).count();
            format!("size={}x{} invalid={invalid}", f.width, f.height)
        }
        Format::Sequence => {
            let s = decode_sequence::<f64>(bytes)?;
            format!("frames={} channels={} fps={}/{}", s.len(), s.channels(), s.fps.num, s.fps.den)
        }
        Format::Features => {
            let a = decode_features::<f64>(bytes)?;
            format!("frames={} channels={} beats={}", a.frames(), a.channels(), a.beats.len())
        }
        Format::Model => {
            let m = decode_mlp::<f64>(bytes)?;
            format!(
                "motion_dim={} audio_dim={} hidden={} parameters={}",
                m.motion_dim(),
                m.audio_dim(),
                m.hidden(),
                m.num_params()
            )
        }
        Format::Ppm => {
            let i = decode_ppm::<f64>(bytes)?;
            format!("size={}x{}", i.width, i.height)
        }
        Format::Pgm => {
            let i = decode_pgm::<f64>(bytes)?;
            format!("size={}x{}", i.width, i.height)
        }
        Format::Wav => {
            let c = read_wav::<f64>(bytes)?;
            format!("samples={} rate={}", c.samples.len(), c.sample_rate)
        }
    };
    Ok(format!("{} ok {detail}", format.name()))
}
