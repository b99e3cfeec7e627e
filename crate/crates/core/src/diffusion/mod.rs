//! Latent motion diffusion: noise schedules, the forward and reverse
//! processes with an x₀-predicting denoiser, classifier-free guidance and
//! the geometric training losses.

mod mlp;
mod train;

pub use mlp::{decode_mlp, encode_mlp, time_embedding, MlpDenoiser, MlpGrads, MLP_MAGIC, TIME_EMBED_DIM};
pub use train::{
    gradient_check, loss_and_grads, parse_key_values, train_denoiser, GradientCheck, TrainConfig,
    TrainReport, TrainingExample,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::motion::{acceleration, velocity};
use crate::scalar::Real;

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 50;
/// Default guidance scale at inference.
pub const DEFAULT_GUIDANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Per-step `α_t` and cumulative `ᾱ_t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule<T> {
    pub kind: ScheduleKind,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

impl<T: Real> DiffusionSchedule<T> {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `α_t` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> T {
        T::one() - self.alpha(t)
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> T {
        (T::one() - self.alpha_bar(t - 1)) / (T::one() - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn alphas(&self) -> &[T] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }
}

/// Builds a `T`-step schedule.
///
/// Linear: `β_t` evenly spaced over `[1e-4·s, 0.02·s]` with `s = 1000/T`.
/// Cosine: `β_t = 1 − f(t)/f(t−1)` with `f(t) = cos²((t/T + 0.008)/1.008 · π/2)`.
/// Both clamp `β_t ≤ 0.999`, and `ᾱ` is the running product of `α`.
pub fn make_schedule<T: Real>(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule<T>> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let n = steps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / n;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..steps)
                .map(|i| {
                    let frac = if steps == 1 { 0.0 } else { i as f64 / (n - 1.0) };
                    (lo + (hi - lo) * frac).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let a = (t / n + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(0.0, MAX_BETA))
                .collect()
        }
    };
    let alpha: Vec<T> = betas.iter().map(|&b| T::one() - T::lit(b)).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = T::one();
    for &a in &alpha {
        acc = a * acc;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { kind, alpha, alpha_bar })
}

/// Closed-form forward noising `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Real>(
    x0: &Array2<T>,
    t: usize,
    noise: &Array2<T>,
    sched: &DiffusionSchedule<T>,
) -> Result<Array2<T>> {
    sched.check_step(t)?;
    same_shape(x0, noise, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    let mut out = x0.mapv(|v| a * v);
    out.zip_mut_with(noise, |o, &e| *o += b * e);
    Ok(out)
}

/// One reverse step: posterior mean given the predicted `x̂₀`, plus
/// `σ_t·noise` with `σ_t² = β̃_t`. At `t = 1` the noise term is dropped.
pub fn p_step<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    x0_hat: &Array2<T>,
    sched: &DiffusionSchedule<T>,
    noise: &Array2<T>,
) -> Result<Array2<T>> {
    sched.check_step(t)?;
    same_shape(x_t, x0_hat, "p_step")?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let denom = T::one() - ab;
    let coef_x0 = ab_prev.sqrt() * beta / denom;
    let coef_xt = sched.alpha(t).sqrt() * (T::one() - ab_prev) / denom;
    let mut out = Array2::from_elem(x_t.dim(), T::zero());
    ndarray::Zip::from(&mut out)
        .and(x0_hat)
        .and(x_t)
        .for_each(|o, &x0, &xt| *o = coef_x0 * x0 + coef_xt * xt);
    if t > 1 {
        same_shape(x_t, noise, "p_step noise")?;
        let sigma = sched.posterior_variance(t).sqrt();
        out.zip_mut_with(noise, |o, &e| *o += sigma * e);
    }
    Ok(out)
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Conditioning for one motion window: per-frame audio features and the
/// seed motion frame. With `audio_masked` set the denoiser sees the null
/// condition (all-zero audio).
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub audio: Array2<T>,
    pub seed_motion: Array1<T>,
    pub audio_masked: bool,
}

impl<T: Real> Condition<T> {
    pub fn new(audio: Array2<T>, seed_motion: Array1<T>) -> Self {
        Condition { audio, seed_motion, audio_masked: false }
    }

    pub fn masked(&self) -> Self {
        Condition { audio_masked: true, ..self.clone() }
    }

    pub fn unmasked(&self) -> Self {
        Condition { audio_masked: false, ..self.clone() }
    }
}

/// Anything that predicts clean motion `x̂₀` from a noised window.
pub trait Denoiser<T: Real> {
    fn predict(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Array2<T>;
}

impl<T: Real, F> Denoiser<T> for F
where
    F: Fn(&Array2<T>, usize, &Condition<T>) -> Array2<T>,
{
    fn predict(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Array2<T> {
        self(x_t, t, cond)
    }
}

/// Classifier-free guidance `γ·G(x_t, t, c) + (1 − γ)·G(x_t, t, c_∅)`.
pub fn guided_x0<T: Real, D: Denoiser<T> + ?Sized>(
    d: &D,
    x_t: &Array2<T>,
    t: usize,
    cond: &Condition<T>,
    gamma: T,
) -> Array2<T> {
    if gamma == T::one() {
        return d.predict(x_t, t, &cond.unmasked());
    }
    let uncond = d.predict(x_t, t, &cond.masked());
    if gamma == T::zero() {
        return uncond;
    }
    let mut out = d.predict(x_t, t, &cond.unmasked());
    let rest = T::one() - gamma;
    out.zip_mut_with(&uncond, |c, &u| *c = gamma * *c + rest * u);
    out
}

/// Standard normal matrix drawn row-major from `rng`.
pub fn normal_matrix<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

/// Full reverse chain from seeded Gaussian noise down to `x₀`.
pub fn sample<T: Real, D: Denoiser<T> + ?Sized>(
    d: &D,
    cond: &Condition<T>,
    frames: usize,
    channels: usize,
    sched: &DiffusionSchedule<T>,
    gamma: T,
    seed: u64,
) -> Result<Array2<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_matrix(&mut rng, frames, channels);
    let zeros = Array2::from_elem((frames, channels), T::zero());
    for t in (1..=sched.steps()).rev() {
        let x0_hat = guided_x0(d, &x, t, cond, gamma);
        if x0_hat.dim() != (frames, channels) {
            return Err(Error::invalid(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                (frames, channels)
            )));
        }
        let noise = if t > 1 { normal_matrix(&mut rng, frames, channels) } else { zeros.clone() };
        x = p_step(&x, t, &x0_hat, sched, &noise)?;
    }
    Ok(x)
}

/// Mean squared error over all `M·C` entries.
pub fn loss_simple<T: Real>(x0: &Array2<T>, x0_hat: &Array2<T>) -> Result<T> {
    same_shape(x0, x0_hat, "loss_simple")?;
    if x0.is_empty() {
        return Err(Error::invalid("loss_simple on empty input"));
    }
    let sum: T = x0.iter().zip(x0_hat.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sum / T::from_usize_lossy(x0.len()))
}

/// Squared row norms of `a − b`, summed and divided by the row count.
fn mean_row_sq<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    let sum: T = a.iter().zip(b.iter()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    sum / T::from_usize_lossy(a.nrows())
}

/// `1/(M−1) Σ_m ‖Δx₀_m − Δx̂₀_m‖²` over forward differences.
pub fn loss_vel<T: Real>(x0: &Array2<T>, x0_hat: &Array2<T>) -> Result<T> {
    same_shape(x0, x0_hat, "loss_vel")?;
    let (a, b) = (velocity(x0.view())?, velocity(x0_hat.view())?);
    Ok(mean_row_sq(a.view(), b.view()))
}

/// `1/(M−2) Σ_m ‖Δ²x₀_m − Δ²x̂₀_m‖²` over second differences.
pub fn loss_acc<T: Real>(x0: &Array2<T>, x0_hat: &Array2<T>) -> Result<T> {
    same_shape(x0, x0_hat, "loss_acc")?;
    let (a, b) = (acceleration(x0.view())?, acceleration(x0_hat.view())?);
    Ok(mean_row_sq(a.view(), b.view()))
}

/// `L_simple + λ_vel·L_vel + λ_acc·L_acc`.
pub fn total_loss<T: Real>(x0: &Array2<T>, x0_hat: &Array2<T>, lambda_vel: T, lambda_acc: T) -> Result<T> {
    Ok(loss_simple(x0, x0_hat)? + lambda_vel * loss_vel(x0, x0_hat)? + lambda_acc * loss_acc(x0, x0_hat)?)
}

/// [`total_loss`] together with its gradient with respect to `x0_hat`.
pub fn total_loss_grad<T: Real>(
    x0: &Array2<T>,
    x0_hat: &Array2<T>,
    lambda_vel: T,
    lambda_acc: T,
) -> Result<(T, Array2<T>)> {
    let loss = total_loss(x0, x0_hat, lambda_vel, lambda_acc)?;
    let (m, c) = x0.dim();
    let two = T::lit(2.0);
    let diff = x0_hat - x0;

    let mut grad = diff.mapv(|d| two * d / T::from_usize_lossy(m * c));

    let vel_scale = two * lambda_vel / T::from_usize_lossy(m - 1);
    for i in 0..m - 1 {
        for j in 0..c {
            let g = vel_scale * (diff[[i + 1, j]] - diff[[i, j]]);
            grad[[i + 1, j]] += g;
            grad[[i, j]] -= g;
        }
    }

    let acc_scale = two * lambda_acc / T::from_usize_lossy(m - 2);
    for i in 0..m - 2 {
        for j in 0..c {
            let g = acc_scale * (diff[[i + 2, j]] - two * diff[[i + 1, j]] + diff[[i, j]]);
            grad[[i + 2, j]] += g;
            grad[[i + 1, j]] -= two * g;
            grad[[i, j]] += g;
        }
    }
    Ok((loss, grad))
}
