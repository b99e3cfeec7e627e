//! Thin-plate spline transformations between two keypoint sets.
//!
//! A transform maps coordinates of the driving (origin) space onto the
//! source (deformation) space:
//!
//! ```text
//! T(p) = A · [p; 1] + Σ_i w_i · U(‖c_i − p‖),   U(r) = r² · ln r²
//! ```
//!
//! where `c_i` are the origin-space control points. Parameters come from the
//! `(N + 3) × (N + 3)` block system `[[K, P], [Pᵀ, 0]] · [w; A] = [Y; 0]`.
//! All coordinates live in the normalized `[-1, 1]²` image square.

use std::io::{Read, Write};
use std::ops::{Add, Mul, Sub};

use ndarray::Array2;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Point2 { x, y }
    }

    /// Normalized coordinate of pixel `(row, col)` on a `height × width`
    /// lattice: `(0, 0)` maps to `(-1, -1)` and `(height-1, width-1)` to `(1, 1)`.
    pub fn from_pixel(row: usize, col: usize, height: usize, width: usize) -> Self {
        Point2 {
            x: pixel_to_unit(col, width),
            y: pixel_to_unit(row, height),
        }
    }

    pub fn norm_sq(self) -> T {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist_sq(self, other: Self) -> T {
        (self - other).norm_sq()
    }
}

pub(crate) fn pixel_to_unit<T: Real>(index: usize, extent: usize) -> T {
    let two = T::lit(2.0);
    two * T::from_usize_lossy(index) / T::from_usize_lossy(extent - 1) - T::one()
}

impl<T: Real> Add for Point2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Point2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Point2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Point2::new(self.x * s, self.y * s)
    }
}

/// One correspondence: `dst` in the origin space maps onto `src` in the
/// deformation space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPair<T> {
    pub src: Point2<T>,
    pub dst: Point2<T>,
}

impl<T: Real> ControlPair<T> {
    pub fn new(src: Point2<T>, dst: Point2<T>) -> Self {
        ControlPair { src, dst }
    }
}

/// Radial basis `U(r) = r² ln r²`, continuously extended with `U(0) = 0`.
pub fn rbf_u<T: Real>(r: T) -> Result<T> {
    if !r.is_finite() || r < T::zero() {
        return Err(Error::invalid(format!("rbf_u: r must be finite and >= 0, got {r}")));
    }
    Ok(rbf_u_sq(r * r))
}

/// `U` evaluated from a squared distance.
#[inline]
pub(crate) fn rbf_u_sq<T: Real>(r2: T) -> T {
    if r2 == T::zero() {
        T::zero()
    } else {
        r2 * r2.ln()
    }
}

/// A solved thin-plate spline.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsTransform<T> {
    /// Rows are the x and y outputs; columns multiply `[x, y, 1]`.
    pub affine: [[T; 3]; 2],
    /// One `(w_x, w_y)` pair per control point.
    pub weights: Vec<[T; 2]>,
    /// Origin-space control points anchoring the radial terms.
    pub controls: Vec<Point2<T>>,
    /// Tikhonov term that was added to the kernel diagonal at solve time.
    pub regularization: T,
}

impl<T: Real> TpsTransform<T> {
    /// The identity map anchored at `controls` (zero radial weights).
    pub fn identity(controls: Vec<Point2<T>>) -> Self {
        let (o, z) = (T::one(), T::zero());
        TpsTransform {
            affine: [[o, z, z], [z, o, z]],
            weights: vec![[z, z]; controls.len()],
            controls,
            regularization: z,
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Evaluates the transform at `p`.
    pub fn eval(&self, p: Point2<T>) -> Point2<T> {
        let a = &self.affine;
        let mut x = a[0][0] * p.x + a[0][1] * p.y + a[0][2];
        let mut y = a[1][0] * p.x + a[1][1] * p.y + a[1][2];
        for (w, c) in self.weights.iter().zip(&self.controls) {
            let u = rbf_u_sq(c.dist_sq(p));
            x += w[0] * u;
            y += w[1] * u;
        }
        Point2::new(x, y)
    }

    /// Largest absolute value among `Σ w`, `Σ w·x` and `Σ w·y` over both
    /// output dimensions.
    pub fn side_condition_error(&self) -> T {
        let mut worst = T::zero();
        for d in 0..2 {
            let mut s = T::zero();
            let mut sx = T::zero();
            let mut sy = T::zero();
            for (w, c) in self.weights.iter().zip(&self.controls) {
                s += w[d];
                sx += w[d] * c.x;
                sy += w[d] * c.y;
            }
            worst = worst.max(s.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }

    /// Largest radial weight magnitude.
    pub fn max_weight(&self) -> T {
        self.weights
            .iter()
            .fold(T::zero(), |m, w| m.max(w[0].abs()).max(w[1].abs()))
    }

    /// Largest `‖T(dst_i) − src_i‖` over the given pairs.
    pub fn max_residual(&self, pairs: &[ControlPair<T>]) -> T {
        pairs
            .iter()
            .map(|p| (self.eval(p.dst) - p.src).norm())
            .fold(T::zero(), T::max)
    }
}

/// Solves the thin-plate spline through `pairs` with `regularization`
/// added to the kernel diagonal.
pub fn solve_tps<T: Real>(pairs: &[ControlPair<T>], regularization: T) -> Result<TpsTransform<T>> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::invalid(format!("solve_tps needs at least 3 pairs, got {n}")));
    }
    if !regularization.is_finite() || regularization < T::zero() {
        return Err(Error::invalid(format!(
            "regularization must be finite and >= 0, got {regularization}"
        )));
    }
    if pairs.iter().any(|p| !p.src.is_finite() || !p.dst.is_finite()) {
        return Err(Error::invalid("control points must be finite"));
    }
    if collinear(pairs) {
        return Err(Error::Singular("destination control points are collinear".into()));
    }

    let size = n + 3;
    let mut l = Array2::from_elem((size, size), T::zero());
    let mut y = Array2::from_elem((size, 2), T::zero());
    for i in 0..n {
        let pi = pairs[i].dst;
        for j in 0..n {
            l[[i, j]] = rbf_u_sq(pi.dist_sq(pairs[j].dst));
        }
        l[[i, i]] += regularization;
        l[[i, n]] = T::one();
        l[[i, n + 1]] = pi.x;
        l[[i, n + 2]] = pi.y;
        l[[n, i]] = T::one();
        l[[n + 1, i]] = pi.x;
        l[[n + 2, i]] = pi.y;
        y[[i, 0]] = pairs[i].src.x;
        y[[i, 1]] = pairs[i].src.y;
    }

    let theta = linalg::lu_solve(&l, &y)?;

    let residual = linalg::matmul(&l, &theta) - &y;
    let worst = residual.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let y_scale = y.iter().fold(T::one(), |m, v| m.max(v.abs()));
    let tolerance = T::lit(1e-6).max(T::lit(1e3) * T::epsilon() * y_scale);
    if !(worst <= tolerance) {
        return Err(Error::Singular(format!(
            "solve residual {worst:e} exceeds {tolerance:e}"
        )));
    }

    let weights = (0..n).map(|i| [theta[[i, 0]], theta[[i, 1]]]).collect();
    // theta rows n..n+3 hold the coefficients of [1, x, y].
    let affine = [
        [theta[[n + 1, 0]], theta[[n + 2, 0]], theta[[n, 0]]],
        [theta[[n + 1, 1]], theta[[n + 2, 1]], theta[[n, 1]]],
    ];
    Ok(TpsTransform {
        affine,
        weights,
        controls: pairs.iter().map(|p| p.dst).collect(),
        regularization,
    })
}

/// True when the destination points span less than a plane.
fn collinear<T: Real>(pairs: &[ControlPair<T>]) -> bool {
    let n = T::from_usize_lossy(pairs.len());
    let (mut mx, mut my) = (T::zero(), T::zero());
    for p in pairs {
        mx += p.dst.x;
        my += p.dst.y;
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for p in pairs {
        let dx = p.dst.x - mx;
        let dy = p.dst.y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let trace = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if trace == T::zero() {
        return true;
    }
    // smallest eigenvalue of the 2x2 scatter matrix, relative to the largest
    let disc = ((sxx - syy) * (sxx - syy) + T::lit(4.0) * sxy * sxy).sqrt();
    let largest = (trace + disc) * T::lit(0.5);
    let smallest = det / largest;
    smallest <= T::lit(1e3) * T::epsilon() * largest
}

/// Free-function form of [`TpsTransform::eval`].
pub fn eval_tps<T: Real>(t: &TpsTransform<T>, p: Point2<T>) -> Point2<T> {
    t.eval(p)
}

/// A row-major `height × width` grid of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid<T> {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Point2<T>>,
}

impl<T: Real> PointGrid<T> {
    /// The normalized pixel lattice itself.
    pub fn lattice(height: usize, width: usize) -> Result<Self> {
        check_grid_dims(height, width)?;
        let points = (0..height)
            .flat_map(|r| (0..width).map(move |c| Point2::from_pixel(r, c, height, width)))
            .collect();
        Ok(PointGrid { height, width, points })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Point2<T> {
        self.points[row * self.width + col]
    }
}

pub(crate) fn check_grid_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::invalid(format!(
            "grid must be at least 2x2, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Evaluates `t` at every normalized pixel coordinate of a `height × width`
/// lattice.
pub fn eval_tps_grid<T: Real>(t: &TpsTransform<T>, height: usize, width: usize) -> Result<PointGrid<T>> {
    check_grid_dims(height, width)?;
    let points = (0..height)
        .flat_map(|r| (0..width).map(move |c| t.eval(Point2::from_pixel(r, c, height, width))))
        .collect();
    Ok(PointGrid { height, width, points })
}

/// Discrete bending energy `Σ_d w_dᵀ K w_d`, clamped at zero.
///
/// `K` is the pure radial kernel, without the regularization term.
pub fn bending_energy<T: Real>(t: &TpsTransform<T>) -> T {
    let n = t.len();
    let mut e = T::zero();
    for i in 0..n {
        for j in 0..n {
            let u = rbf_u_sq(t.controls[i].dist_sq(t.controls[j]));
            e += u * (t.weights[i][0] * t.weights[j][0] + t.weights[i][1] * t.weights[j][1]);
        }
    }
    e.max(T::zero())
}

/// Reads control pairs from CSV with header `src_x,src_y,dst_x,dst_y`.
pub fn read_pairs_csv<T: Real, R: Read>(input: R) -> Result<Vec<ControlPair<T>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse("pairs csv", e.to_string()))?
        .clone();
    let expected = ["src_x", "src_y", "dst_x", "dst_y"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::parse(
            "pairs csv",
            format!("header must be src_x,src_y,dst_x,dst_y, got {:?}", headers),
        ));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse("pairs csv", e.to_string()))?;
        let mut v = [T::zero(); 4];
        for (k, field) in rec.iter().enumerate().take(4) {
            let parsed: f64 = field.trim().parse().map_err(|_| {
                Error::parse("pairs csv", format!("line {}: bad number {field:?}", line + 2))
            })?;
            if !parsed.is_finite() {
                return Err(Error::parse("pairs csv", format!("line {}: non-finite value", line + 2)));
            }
            v[k] = T::lit(parsed);
        }
        if rec.len() != 4 {
            return Err(Error::parse("pairs csv", format!("line {}: expected 4 fields", line + 2)));
        }
        out.push(ControlPair::new(Point2::new(v[0], v[1]), Point2::new(v[2], v[3])));
    }
    Ok(out)
}

/// Writes control pairs as CSV.
pub fn write_pairs_csv<T: Real, W: Write>(pairs: &[ControlPair<T>], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(["src_x", "src_y", "dst_x", "dst_y"]).map_err(io)?;
    for p in pairs {
        wtr.write_record([
            p.src.x.to_string(),
            p.src.y.to_string(),
            p.dst.x.to_string(),
            p.dst.y.to_string(),
        ])
        .map_err(io)?;
    }
    wtr.flush()?;
    Ok(())
}

pub const TPS_MAGIC: &[u8; 4] = b"MDTP";

/// Encodes a transform: magic `MDTP`, u32 N, then float32 affine (row-major
/// 2×3), weights (N×2) and controls (N×2).
pub fn encode_tps<T: Real>(t: &TpsTransform<T>) -> Result<Vec<u8>> {
    let n = t.len();
    let mut out = Vec::with_capacity(8 + 4 * (6 + 4 * n));
    out.extend_from_slice(TPS_MAGIC);
    binio::put_u32(&mut out, binio::dim_u32(n, "control count")?);
    for row in &t.affine {
        for v in row {
            binio::put_f32(&mut out, v.to_f32_lossy());
        }
    }
    for w in &t.weights {
        binio::put_f32(&mut out, w[0].to_f32_lossy());
        binio::put_f32(&mut out, w[1].to_f32_lossy());
    }
    for c in &t.controls {
        binio::put_f32(&mut out, c.x.to_f32_lossy());
        binio::put_f32(&mut out, c.y.to_f32_lossy());
    }
    Ok(out)
}

/// Decodes an `MDTP` buffer. The regularization is not stored and reads
/// back as zero.
pub fn decode_tps<T: Real>(bytes: &[u8]) -> Result<TpsTransform<T>> {
    let mut r = Reader::new(bytes, "MDTP");
    r.magic(TPS_MAGIC)?;
    let n = r.u32("control count")? as usize;
    if n < 3 {
        return Err(r.error(format!("control count {n} < 3")));
    }
    let affine = r.f32s(6, "affine")?;
    let weights = r.f32s(2 * n, "weights")?;
    let controls = r.f32s(2 * n, "controls")?;
    binio::check_finite(&affine, &r, "affine")?;
    binio::check_finite(&weights, &r, "weights")?;
    binio::check_finite(&controls, &r, "controls")?;
    r.finish()?;
    let c = |v: f32| T::lit(v as f64);
    Ok(TpsTransform {
        affine: [
            [c(affine[0]), c(affine[1]), c(affine[2])],
            [c(affine[3]), c(affine[4]), c(affine[5])],
        ],
        weights: weights.chunks_exact(2).map(|w| [c(w[0]), c(w[1])]).collect(),
        controls: controls.chunks_exact(2).map(|p| Point2::new(c(p[0]), c(p[1]))).collect(),
        regularization: T::zero(),
    })
}
