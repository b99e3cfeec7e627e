//! Latent motion features: per-frame flattened keypoints and the
//! operations defined on sequences of them.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::scalar::Real;
use crate::tps::Point2;

/// Knots taken on each side of a junction by [`spline_fill`] callers.
pub const DEFAULT_SPLINE_KNOTS: usize = 5;

/// K groups of N keypoints for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame<T> {
    pub groups: Vec<Vec<Point2<T>>>,
}

impl<T: Real> KeypointFrame<T> {
    pub fn new(groups: Vec<Vec<Point2<T>>>) -> Self {
        KeypointFrame { groups }
    }

    /// `(K, N)` when every group has the same length.
    pub fn layout(&self) -> Option<(usize, usize)> {
        let n = self.groups.first()?.len();
        self.groups.iter().all(|g| g.len() == n).then_some((self.groups.len(), n))
    }
}

/// Frame rate as a rational number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub const fn new(num: u32, den: u32) -> Self {
        Fps { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_valid(self) -> bool {
        self.num > 0 && self.den > 0
    }
}

impl Default for Fps {
    fn default() -> Self {
        Fps::new(25, 1)
    }
}

/// Order in which keypoints are laid out along a feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlattenOrder {
    /// Group major, point minor, `x` before `y`.
    #[default]
    GroupPointXy,
}

/// `M × C` latent motion features, `C = K · N · 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<T> {
    pub frames: Array2<T>,
    pub fps: Fps,
    pub order: FlattenOrder,
}

impl<T: Real> MotionSequence<T> {
    pub fn new(frames: Array2<T>, fps: Fps) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::invalid("motion sequence needs at least one frame"));
        }
        if frames.ncols() == 0 || !frames.ncols().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "feature width must be a positive even number, got {}",
                frames.ncols()
            )));
        }
        if !fps.is_valid() {
            return Err(Error::invalid("fps numerator and denominator must be positive"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("motion features must be finite"));
        }
        Ok(MotionSequence { frames, fps, order: FlattenOrder::GroupPointXy })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    /// Duration spanned by the frame times, `(M − 1) / fps` seconds.
    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 / self.fps.as_f64()
    }

    pub fn velocity(&self) -> Result<Array2<T>> {
        velocity(self.frames.view())
    }

    pub fn acceleration(&self) -> Result<Array2<T>> {
        acceleration(self.frames.view())
    }
}

/// Flattens keypoint frames into one feature row each.
pub fn flatten<T: Real>(frames: &[KeypointFrame<T>], fps: Fps) -> Result<MotionSequence<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("flatten needs at least one frame"))?;
    let (k, n) = first
        .layout()
        .ok_or_else(|| Error::invalid("frame groups have unequal sizes"))?;
    if k == 0 || n == 0 {
        return Err(Error::invalid("frames need at least one keypoint"));
    }
    let c = k * n * 2;
    let mut data = Vec::with_capacity(frames.len() * c);
    for (m, f) in frames.iter().enumerate() {
        if f.layout() != Some((k, n)) {
            return Err(Error::invalid(format!("frame {m} does not have {k}x{n} keypoints")));
        }
        for p in f.groups.iter().flatten() {
            data.push(p.x);
            data.push(p.y);
        }
    }
    let frames = Array2::from_shape_vec((frames.len(), c), data).expect("shape checked");
    MotionSequence::new(frames, fps)
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Real>(seq: &MotionSequence<T>, k: usize, n: usize) -> Result<Vec<KeypointFrame<T>>> {
    if k * n * 2 != seq.channels() {
        return Err(Error::invalid(format!(
            "K={k}, N={n} needs {} channels, sequence has {}",
            k * n * 2,
            seq.channels()
        )));
    }
    Ok(seq
        .frames
        .outer_iter()
        .map(|row| {
            let groups = (0..k)
                .map(|g| {
                    (0..n)
                        .map(|i| {
                            let off = (g * n + i) * 2;
                            Point2::new(row[off], row[off + 1])
                        })
                        .collect()
                })
                .collect();
            KeypointFrame { groups }
        })
        .collect())
}

/// Forward difference `x[m+1] − x[m]`.
pub fn velocity<T: Real>(frames: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let m = frames.nrows();
    if m < 2 {
        return Err(Error::invalid(format!("velocity needs at least 2 frames, got {m}")));
    }
    Ok(&frames.slice(s![1.., ..]) - &frames.slice(s![..m - 1, ..]))
}

/// Second difference `x[m+2] − 2·x[m+1] + x[m]`, computed as the forward
/// difference of the velocity.
pub fn acceleration<T: Real>(frames: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let m = frames.nrows();
    if m < 3 {
        return Err(Error::invalid(format!("acceleration needs at least 3 frames, got {m}")));
    }
    velocity(velocity(frames)?.view())
}

/// Consecutive windows of `window` frames starting every `stride` frames.
pub fn clip_windows<T: Real>(
    seq: &MotionSequence<T>,
    window: usize,
    stride: usize,
) -> Result<Vec<MotionSequence<T>>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if window > seq.len() {
        return Ok(Vec::new());
    }
    Ok((0..=seq.len() - window)
        .step_by(stride)
        .map(|start| MotionSequence {
            frames: seq.frames.slice(s![start..start + window, ..]).to_owned(),
            fps: seq.fps,
            order: seq.order,
        })
        .collect())
}

/// Natural cubic spline through `(times, values)`; returns the second
/// derivatives at the knots.
fn natural_second_derivatives<T: Real>(times: &[T], values: &[T]) -> Vec<T> {
    let n = times.len();
    let mut m2 = vec![T::zero(); n];
    if n < 3 {
        return m2;
    }
    let inner = n - 2;
    let mut lower = vec![T::zero(); inner];
    let mut diag = vec![T::zero(); inner];
    let mut upper = vec![T::zero(); inner];
    let mut rhs = vec![T::zero(); inner];
    let six = T::lit(6.0);
    for i in 1..n - 1 {
        let h0 = times[i] - times[i - 1];
        let h1 = times[i + 1] - times[i];
        lower[i - 1] = h0;
        diag[i - 1] = T::lit(2.0) * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = six * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
    }
    let solved = solve_tridiagonal(&lower, &diag, &upper, &rhs);
    m2[1..n - 1].copy_from_slice(&solved);
    m2
}

fn eval_spline<T: Real>(times: &[T], values: &[T], m2: &[T], t: T) -> T {
    let n = times.len();
    let mut i = 0;
    while i + 2 < n && t > times[i + 1] {
        i += 1;
    }
    let h = times[i + 1] - times[i];
    let a = (times[i + 1] - t) / h;
    let b = (t - times[i]) / h;
    let six = T::lit(6.0);
    a * values[i]
        + b * values[i + 1]
        + ((a * a * a - a) * m2[i] + (b * b * b - b) * m2[i + 1]) * h * h / six
}

/// Fills `gap` frames between `left` and `right` with a per-channel natural
/// cubic spline through all supplied knot frames.
///
/// Knot times are `0..L` for `left`, the gap occupies `L..L+gap`, and
/// `right` follows at `L+gap..`.
pub fn spline_fill<T: Real>(left: ArrayView2<'_, T>, right: ArrayView2<'_, T>, gap: usize) -> Result<Array2<T>> {
    if left.nrows() < 2 || right.nrows() < 2 {
        return Err(Error::invalid("spline_fill needs at least 2 knot frames on each side"));
    }
    if gap == 0 {
        return Err(Error::invalid("spline_fill gap must be at least 1"));
    }
    if left.ncols() != right.ncols() {
        return Err(Error::invalid("knot frames have different channel counts"));
    }
    let (nl, nr, c) = (left.nrows(), right.nrows(), left.ncols());
    let times: Vec<T> = (0..nl)
        .chain(nl + gap..nl + gap + nr)
        .map(T::from_usize_lossy)
        .collect();
    let knots = ndarray::concatenate(Axis(0), &[left, right]).expect("same width");
    let mut out = Array2::from_elem((gap, c), T::zero());
    for ch in 0..c {
        let values: Vec<T> = knots.column(ch).to_vec();
        let m2 = natural_second_derivatives(&times, &values);
        for g in 0..gap {
            out[[g, ch]] = eval_spline(&times, &values, &m2, T::from_usize_lossy(nl + g));
        }
    }
    Ok(out)
}

pub const SEQUENCE_MAGIC: &[u8; 4] = b"MDSQ";

/// Encodes `MDSQ`: magic, u32 M, u32 C, u32 fps numerator, u32 fps
/// denominator, then M·C float32 row-major.
pub fn encode_sequence<T: Real>(seq: &MotionSequence<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 4 * seq.frames.len());
    out.extend_from_slice(SEQUENCE_MAGIC);
    binio::put_u32(&mut out, binio::dim_u32(seq.len(), "frame count")?);
    binio::put_u32(&mut out, binio::dim_u32(seq.channels(), "channel count")?);
    binio::put_u32(&mut out, seq.fps.num);
    binio::put_u32(&mut out, seq.fps.den);
    for v in seq.frames.iter() {
        binio::put_f32(&mut out, v.to_f32_lossy());
    }
    Ok(out)
}

pub fn decode_sequence<T: Real>(bytes: &[u8]) -> Result<MotionSequence<T>> {
    let mut r = Reader::new(bytes, "MDSQ");
    r.magic(SEQUENCE_MAGIC)?;
    let m = r.u32("frame count")? as usize;
    let c = r.u32("channel count")? as usize;
    let fps = Fps::new(r.u32("fps numerator")?, r.u32("fps denominator")?);
    if m == 0 || c == 0 || !c.is_multiple_of(2) {
        return Err(r.error(format!("invalid shape {m}x{c}")));
    }
    if !fps.is_valid() {
        return Err(r.error("fps must be positive"));
    }
    let n = m.checked_mul(c).ok_or_else(|| r.error("shape overflows"))?;
    let data = r.f32s(n, "frames")?;
    binio::check_finite(&data, &r, "frames")?;
    r.finish()?;
    let frames = Array2::from_shape_vec((m, c), data.into_iter().map(|v| T::lit(v as f64)).collect())
        .expect("shape checked");
    MotionSequence::new(frames, fps)
}

/// CSV mirror: a `frame` column followed by `c0..c{C-1}`.
pub fn write_sequence_csv<T: Real, W: Write>(seq: &MotionSequence<T>, mut out: W) -> Result<()> {
    let header: Vec<String> = std::iter::once("frame".to_string())
        .chain((0..seq.channels()).map(|c| format!("c{c}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (m, row) in seq.frames.outer_iter().enumerate() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{m},{}", fields.join(","))?;
    }
    Ok(())
}
