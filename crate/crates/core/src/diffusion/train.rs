//! Stochastic training of the MLP denoiser.

use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::MlpDenoiser;
use super::{make_schedule, normal_matrix, q_sample, total_loss_grad, Condition, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    /// Probability of replacing the audio with the null condition.
    pub mask_prob: f64,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            lambda_vel: 1.0,
            lambda_acc: 1.0,
            mask_prob: 0.25,
            schedule: ScheduleKind::Cosine,
            diffusion_steps: super::DEFAULT_STEPS,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("config", format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::parse("config", format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Overrides fields from one `key = value` pair. Returns `false` for
    /// keys that are not training keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train_steps" => self.steps = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "lambda_vel" => self.lambda_vel = parse_value(key, value)?,
            "lambda_acc" => self.lambda_acc = parse_value(key, value)?,
            "mask_prob" => self.mask_prob = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "diffusion_steps" => self.diffusion_steps = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_key_values(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::parse("config", format!("unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.hidden == 0 || self.diffusion_steps == 0 {
            return Err(Error::invalid("steps, batch, hidden and diffusion_steps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid("mask_prob must lie in [0, 1]"));
        }
        if self.lambda_vel < 0.0 || self.lambda_acc < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// One clean motion window with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub motion: Array2<T>,
    pub cond: Condition<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per optimizer step.
    pub loss_curve: Vec<f64>,
    /// Loss on a fixed unmasked probe batch before and after training.
    pub probe_before: f64,
    pub probe_after: f64,
}

/// Noised draw used by both the optimizer and the probe.
struct Draw<T> {
    example: usize,
    t: usize,
    x_t: Array2<T>,
    masked: bool,
}

fn draw<T: Real>(
    rng: &mut ChaCha8Rng,
    data: &[TrainingExample<T>],
    sched: &DiffusionSchedule<T>,
    mask_prob: f64,
) -> Result<Draw<T>> {
    let example = rng.random_range(0..data.len());
    let t = rng.random_range(1..=sched.steps());
    let (m, c) = data[example].motion.dim();
    let noise = normal_matrix(rng, m, c);
    let x_t = q_sample(&data[example].motion, t, &noise, sched)?;
    let masked = mask_prob > 0.0 && rng.random::<f64>() < mask_prob;
    Ok(Draw { example, t, x_t, masked })
}

fn condition_for<T: Real>(ex: &TrainingExample<T>, masked: bool) -> Condition<T> {
    if masked {
        ex.cond.masked()
    } else {
        ex.cond.unmasked()
    }
}

fn batch_loss<T: Real>(
    model: &MlpDenoiser<T>,
    data: &[TrainingExample<T>],
    draws: &[Draw<T>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (lv, la) = (T::lit(cfg.lambda_vel), T::lit(cfg.lambda_acc));
    let mut total = 0.0;
    for d in draws {
        let ex = &data[d.example];
        let pred = model.try_predict(&d.x_t, d.t, &condition_for(ex, d.masked))?;
        total += total_loss_grad(&ex.motion, &pred, lv, la)?.0.to_f64_lossy();
    }
    Ok(total / draws.len() as f64)
}

fn check_data<T: Real>(model: &MlpDenoiser<T>, data: &[TrainingExample<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (i, ex) in data.iter().enumerate() {
        let (m, c) = ex.motion.dim();
        if m < 3 || c != model.motion_dim() {
            return Err(Error::invalid(format!(
                "example {i} has shape {:?}; need at least 3 frames of {} channels",
                ex.motion.dim(),
                model.motion_dim()
            )));
        }
        if ex.cond.audio.dim() != (m, model.audio_dim()) {
            return Err(Error::invalid(format!("example {i} audio shape mismatch")));
        }
    }
    Ok(())
}

const PROBE_SIZE: usize = 16;

/// Trains `model` in place with momentum SGD on `L_simple + λ_vel·L_vel +
/// λ_acc·L_acc`, sampling the step uniformly and masking the audio with
/// probability `mask_prob`.
pub fn train_denoiser<T: Real>(
    model: &mut MlpDenoiser<T>,
    data: &[TrainingExample<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    let sched = make_schedule::<T>(cfg.diffusion_steps, cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_9b0be);
    let probe = (0..PROBE_SIZE)
        .map(|_| draw(&mut probe_rng, data, &sched, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let probe_before = batch_loss(model, data, &probe, cfg)?;

    let (lv, la) = (T::lit(cfg.lambda_vel), T::lit(cfg.lambda_acc));
    let (lr, mu) = (T::lit(cfg.lr), T::lit(cfg.momentum));
    let inv_batch = T::one() / T::from_usize_lossy(cfg.batch);
    let mut velocity = super::MlpGrads::zeros_like(model);
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grads = super::MlpGrads::zeros_like(model);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let d = draw(&mut rng, data, &sched, cfg.mask_prob)?;
            let ex = &data[d.example];
            let (pred, acts) = model.forward(&d.x_t, d.t, &condition_for(ex, d.masked))?;
            let (l, g) = total_loss_grad(&ex.motion, &pred, lv, la)?;
            loss += l.to_f64_lossy();
            grads.add_assign(&model.backward(&acts, &g));
        }
        grads.scale(inv_batch);
        model.apply_momentum(&mut velocity, &grads, lr, mu);
        let mean = loss / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::invalid("training diverged to a non-finite loss"));
        }
        loss_curve.push(mean);
    }
    let probe_after = batch_loss(model, data, &probe, cfg)?;
    Ok(TrainReport { loss_curve, probe_before, probe_after })
}

/// Gradient of the training loss for one fixed draw.
pub fn loss_and_grads<T: Real>(
    model: &MlpDenoiser<T>,
    ex: &TrainingExample<T>,
    x_t: &Array2<T>,
    t: usize,
    masked: bool,
    lambda_vel: T,
    lambda_acc: T,
) -> Result<(T, super::MlpGrads<T>)> {
    let (pred, acts) = model.forward(x_t, t, &condition_for(ex, masked))?;
    let (l, g) = total_loss_grad(&ex.motion, &pred, lambda_vel, lambda_acc)?;
    Ok((l, model.backward(&acts, &g)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// `(parameter index, analytic, central difference)`
    pub probes: Vec<(usize, f64, f64)>,
    pub max_rel_error: f64,
}

/// Compares backpropagated gradients with central differences at
/// `probes` seeded parameter indices. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &MlpDenoiser<f64>,
    ex: &TrainingExample<f64>,
    x_t: &Array2<f64>,
    t: usize,
    masked: bool,
    lambda_vel: f64,
    lambda_acc: f64,
    probes: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, grads) = loss_and_grads(model, ex, x_t, t, masked, lambda_vel, lambda_acc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let h = 1e-5;
    let mut out = Vec::with_capacity(probes);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..model.num_params());
        let orig = work.param(i);
        work.set_param(i, orig + h);
        let up = loss_and_grads(&work, ex, x_t, t, masked, lambda_vel, lambda_acc)?.0;
        work.set_param(i, orig - h);
        let down = loss_and_grads(&work, ex, x_t, t, masked, lambda_vel, lambda_acc)?.0;
        work.set_param(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        out.push((i, analytic, numeric));
    }
    Ok(GradientCheck { probes: out, max_rel_error: max_rel })
}
