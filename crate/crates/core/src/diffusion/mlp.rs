//! Two-layer perceptron denoiser applied frame by frame.
//!
//! Each frame's input is `[x_t row ‖ audio row ‖ seed motion ‖ time
//! embedding]`; the hidden layer uses `tanh`. Both layers store their bias
//! as the last column of the weight matrix.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Condition, Denoiser};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Width of the sinusoidal step embedding.
pub const TIME_EMBED_DIM: usize = 16;

pub const MLP_MAGIC: &[u8; 4] = b"MDNN";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser<T> {
    motion_dim: usize,
    audio_dim: usize,
    /// `hidden × (input + 1)`
    pub w1: Array2<T>,
    /// `motion_dim × (hidden + 1)`
    pub w2: Array2<T>,
}

/// Parameter gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(model: &MlpDenoiser<T>) -> Self {
        MlpGrads {
            w1: Array2::from_elem(model.w1.dim(), T::zero()),
            w2: Array2::from_elem(model.w2.dim(), T::zero()),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads<T>) {
        self.w1 += &other.w1;
        self.w2 += &other.w2;
    }

    pub fn scale(&mut self, s: T) {
        self.w1.mapv_inplace(|v| v * s);
        self.w2.mapv_inplace(|v| v * s);
    }

    pub fn get(&self, index: usize) -> T {
        let n1 = self.w1.len();
        if index < n1 {
            self.w1.as_slice().expect("standard layout")[index]
        } else {
            self.w2.as_slice().expect("standard layout")[index - n1]
        }
    }
}

/// Forward activations kept for backpropagation.
pub(crate) struct Activations<T> {
    input: Array2<T>,
    hidden: Array2<T>,
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding<T: Real>(t: usize) -> Array1<T> {
    let half = TIME_EMBED_DIM / 2;
    let tf = t as f64;
    Array1::from_shape_fn(TIME_EMBED_DIM, |i| {
        let k = i % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let v = if i < half { (tf * freq).sin() } else { (tf * freq).cos() };
        T::lit(v)
    })
}

impl<T: Real> MlpDenoiser<T> {
    /// Randomly initialized network (uniform Glorot weights, zero biases).
    pub fn new(motion_dim: usize, audio_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if motion_dim == 0 || hidden == 0 {
            return Err(Error::invalid("motion and hidden widths must be positive"));
        }
        let input = 2 * motion_dim + audio_dim + TIME_EMBED_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, fan_in: usize| {
            let limit = (6.0 / (fan_in + rows) as f64).sqrt();
            Array2::from_shape_fn((rows, fan_in + 1), |(_, c)| {
                if c == fan_in {
                    T::zero()
                } else {
                    T::lit(rng.random_range(-limit..limit))
                }
            })
        };
        let w1 = layer(hidden, input);
        let w2 = layer(motion_dim, hidden);
        Ok(MlpDenoiser { motion_dim, audio_dim, w1, w2 })
    }

    pub fn motion_dim(&self) -> usize {
        self.motion_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols() - 1
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn param(&self, index: usize) -> T {
        let n1 = self.w1.len();
        if index < n1 {
            self.w1.as_slice().expect("standard layout")[index]
        } else {
            self.w2.as_slice().expect("standard layout")[index - n1]
        }
    }

    pub fn set_param(&mut self, index: usize, v: T) {
        let n1 = self.w1.len();
        if index < n1 {
            self.w1.as_slice_mut().expect("standard layout")[index] = v;
        } else {
            self.w2.as_slice_mut().expect("standard layout")[index - n1] = v;
        }
    }

    /// Index range of the first-layer weights that read audio features.
    pub fn audio_param_indices(&self) -> Vec<usize> {
        let cols = self.w1.ncols();
        let start = self.motion_dim;
        (0..self.hidden())
            .flat_map(|r| (start..start + self.audio_dim).map(move |c| r * cols + c))
            .collect()
    }

    fn check_shapes(&self, x_t: &Array2<T>, cond: &Condition<T>) -> Result<()> {
        let m = x_t.nrows();
        if x_t.ncols() != self.motion_dim {
            return Err(Error::invalid(format!(
                "x_t has {} channels, model expects {}",
                x_t.ncols(),
                self.motion_dim
            )));
        }
        if cond.seed_motion.len() != self.motion_dim {
            return Err(Error::invalid("seed motion width mismatch"));
        }
        if cond.audio.dim() != (m, self.audio_dim) {
            return Err(Error::invalid(format!(
                "audio is {:?}, model expects ({m}, {})",
                cond.audio.dim(),
                self.audio_dim
            )));
        }
        Ok(())
    }

    fn build_input(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Array2<T> {
        let m = x_t.nrows();
        let (c, a) = (self.motion_dim, self.audio_dim);
        let emb = time_embedding::<T>(t);
        let mut input = Array2::from_elem((m, self.input_dim() + 1), T::zero());
        input.slice_mut(s![.., ..c]).assign(x_t);
        if !cond.audio_masked {
            input.slice_mut(s![.., c..c + a]).assign(&cond.audio);
        }
        let seed_view = cond.seed_motion.view().insert_axis(Axis(0));
        input
            .slice_mut(s![.., c + a..2 * c + a])
            .assign(&seed_view.broadcast((m, c)).expect("broadcast seed"));
        let emb_view = emb.view().insert_axis(Axis(0));
        input
            .slice_mut(s![.., 2 * c + a..2 * c + a + TIME_EMBED_DIM])
            .assign(&emb_view.broadcast((m, TIME_EMBED_DIM)).expect("broadcast embedding"));
        input.column_mut(self.input_dim()).fill(T::one());
        input
    }

    pub(crate) fn forward(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Result<(Array2<T>, Activations<T>)> {
        self.check_shapes(x_t, cond)?;
        let input = self.build_input(x_t, t, cond);
        let pre = input.dot(&self.w1.t());
        let h = self.hidden();
        let mut hidden = Array2::from_elem((x_t.nrows(), h + 1), T::one());
        hidden.slice_mut(s![.., ..h]).assign(&pre.mapv(T::tanh));
        let out = hidden.dot(&self.w2.t());
        Ok((out, Activations { input, hidden }))
    }

    /// Parameter gradients given `d loss / d output`.
    pub(crate) fn backward(&self, acts: &Activations<T>, grad_out: &Array2<T>) -> MlpGrads<T> {
        let h = self.hidden();
        let gw2 = grad_out.t().dot(&acts.hidden);
        let mut g_hidden = grad_out.dot(&self.w2.slice(s![.., ..h]));
        let act = acts.hidden.slice(s![.., ..h]);
        g_hidden.zip_mut_with(&act, |g, &a| *g *= T::one() - a * a);
        let gw1 = g_hidden.t().dot(&acts.input);
        MlpGrads { w1: gw1, w2: gw2 }
    }

    /// Fallible prediction; [`Denoiser::predict`] panics on shape errors.
    pub fn try_predict(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Result<Array2<T>> {
        Ok(self.forward(x_t, t, cond)?.0)
    }

    /// Momentum step: `v ← μ·v − lr·g`, `θ ← θ + v`.
    pub(crate) fn apply_momentum(&mut self, velocity: &mut MlpGrads<T>, grads: &MlpGrads<T>, lr: T, momentum: T) {
        ndarray::Zip::from(&mut velocity.w1)
            .and(&grads.w1)
            .and(&mut self.w1)
            .for_each(|v, &g, w| {
                *v = momentum * *v - lr * g;
                *w += *v;
            });
        ndarray::Zip::from(&mut velocity.w2)
            .and(&grads.w2)
            .and(&mut self.w2)
            .for_each(|v, &g, w| {
                *v = momentum * *v - lr * g;
                *w += *v;
            });
    }
}

impl<T: Real> Denoiser<T> for MlpDenoiser<T> {
    fn predict(&self, x_t: &Array2<T>, t: usize, cond: &Condition<T>) -> Array2<T> {
        self.try_predict(x_t, t, cond).expect("denoiser input shapes")
    }
}

/// Encodes `MDNN`: magic, u32 layer count, then per layer u32 rows, u32
/// cols and row-major float32 data (bias in the last column).
pub fn encode_mlp<T: Real>(model: &MlpDenoiser<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MLP_MAGIC);
    binio::put_u32(&mut out, 2);
    for layer in [&model.w1, &model.w2] {
        binio::put_u32(&mut out, binio::dim_u32(layer.nrows(), "rows")?);
        binio::put_u32(&mut out, binio::dim_u32(layer.ncols(), "cols")?);
        for v in layer.iter() {
            binio::put_f32(&mut out, v.to_f32_lossy());
        }
    }
    Ok(out)
}

pub fn decode_mlp<T: Real>(bytes: &[u8]) -> Result<MlpDenoiser<T>> {
    let mut r = Reader::new(bytes, "MDNN");
    r.magic(MLP_MAGIC)?;
    let layers = r.u32("layer count")?;
    if layers != 2 {
        return Err(r.error(format!("expected 2 layers, found {layers}")));
    }
    let mut mats = Vec::with_capacity(2);
    for l in 0..2 {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if rows == 0 || cols < 2 {
            return Err(r.error(format!("layer {l} has invalid shape {rows}x{cols}")));
        }
        let n = rows.checked_mul(cols).ok_or_else(|| r.error("layer size overflows"))?;
        let data = r.f32s(n, "layer data")?;
        binio::check_finite(&data, &r, "layer data")?;
        mats.push(
            Array2::from_shape_vec((rows, cols), data.into_iter().map(|v| T::lit(v as f64)).collect())
                .expect("shape checked"),
        );
    }
    r.finish()?;
    let w2 = mats.pop().expect("two layers");
    let w1 = mats.pop().expect("two layers");
    let hidden = w1.nrows();
    if w2.ncols() != hidden + 1 {
        return Err(Error::parse("MDNN", "layer widths do not chain"));
    }
    let motion_dim = w2.nrows();
    let input = w1.ncols() - 1;
    let fixed = 2 * motion_dim + TIME_EMBED_DIM;
    if input < fixed {
        return Err(Error::parse("MDNN", format!("input width {input} too small for motion width {motion_dim}")));
    }
    Ok(MlpDenoiser { motion_dim, audio_dim: input - fixed, w1, w2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(m: usize, c: usize, a: usize) -> Condition<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        Condition::new(
            Array2::from_shape_simple_fn((m, a), || rng.random_range(-1.0..1.0)),
            Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn shapes_and_determinism() {
        let model = MlpDenoiser::<f64>::new(4, 3, 8, 1).unwrap();
        let c = cond(5, 4, 3);
        let x = Array2::from_elem((5, 4), 0.1);
        let a = model.predict(&x, 3, &c);
        assert_eq!(a.dim(), (5, 4));
        assert_eq!(a, model.predict(&x, 3, &c));
        assert!(model.try_predict(&Array2::zeros((5, 3)), 3, &c).is_err());
        assert!(model.try_predict(&x, 3, &cond(4, 4, 3)).is_err());
    }

    #[test]
    fn masking_zeroes_audio() {
        let model = MlpDenoiser::<f64>::new(2, 2, 6, 2).unwrap();
        let c = cond(3, 2, 2);
        let mut zero_audio = c.clone();
        zero_audio.audio.fill(0.0);
        let x = Array2::from_elem((3, 2), -0.3);
        assert_eq!(model.predict(&x, 7, &c.masked()), model.predict(&x, 7, &zero_audio));
    }

    #[test]
    fn codec_round_trip() {
        let model = MlpDenoiser::<f64>::new(8, 4, 16, 3).unwrap();
        let bytes = encode_mlp(&model).unwrap();
        let back: MlpDenoiser<f64> = decode_mlp(&bytes).unwrap();
        assert_eq!(back.audio_dim(), 4);
        assert_eq!(back.motion_dim(), 8);
        assert_eq!(encode_mlp(&back).unwrap(), bytes);
        assert!(decode_mlp::<f64>(&bytes[..20]).is_err());
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let a = time_embedding::<f64>(1);
        let b = time_embedding::<f64>(2);
        assert_eq!(a.len(), TIME_EMBED_DIM);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
    }
}
