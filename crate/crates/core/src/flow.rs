//! Dense backward flow composed from several local thin-plate splines,
//! plus bilinear backward warping.
//!
//! Each output pixel `q` blends the K deformed grids with softmax weights
//! over `-d_k(q) / softness`, where `d_k(q)` is the distance from `q` to the
//! nearest origin-space control point of transform `k`. An optional
//! background component contributes the identity coordinate with distance
//! `max_k d_k(q)`.

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::scalar::Real;
use crate::tps::{check_grid_dims, eval_tps_grid, Point2, PointGrid, TpsTransform};

/// Resolution at which flows are composed before upsampling.
pub const FLOW_RESOLUTION: usize = 64;

/// Default blending softness in normalized units.
pub const DEFAULT_SOFTNESS: f64 = 0.1;

/// Backward coordinate map into a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub height: usize,
    pub width: usize,
    pub map: Vec<Point2<T>>,
    /// `true` where the mapped coordinate lies inside `[-1, 1]²`.
    pub valid_mask: Vec<bool>,
}

#[inline]
fn in_unit_square<T: Real>(p: Point2<T>) -> bool {
    let one = T::one();
    p.x >= -one && p.x <= one && p.y >= -one && p.y <= one
}

impl<T: Real> FlowField<T> {
    /// Builds a flow from its coordinate map, deriving the validity mask.
    pub fn from_map(height: usize, width: usize, map: Vec<Point2<T>>) -> Result<Self> {
        if map.len() != height * width {
            return Err(Error::invalid(format!(
                "flow map has {} entries, expected {}",
                map.len(),
                height * width
            )));
        }
        if map.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("flow map entries must be finite"));
        }
        let valid_mask = map.iter().map(|&p| in_unit_square(p)).collect();
        Ok(FlowField { height, width, map, valid_mask })
    }

    pub fn identity(height: usize, width: usize) -> Result<Self> {
        let g = PointGrid::lattice(height, width)?;
        FlowField::from_map(height, width, g.points)
    }

    pub fn from_grid(grid: PointGrid<T>) -> Result<Self> {
        FlowField::from_map(grid.height, grid.width, grid.points)
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Point2<T> {
        self.map[row * self.width + col]
    }

    /// True when the stored mask matches the map.
    pub fn mask_consistent(&self) -> bool {
        self.map
            .iter()
            .zip(&self.valid_mask)
            .all(|(&p, &v)| in_unit_square(p) == v)
    }
}

/// Evaluates every transform on the `height × width` lattice.
pub fn deform_grids<T: Real>(
    transforms: &[TpsTransform<T>],
    height: usize,
    width: usize,
) -> Result<Vec<PointGrid<T>>> {
    if transforms.is_empty() {
        return Err(Error::invalid("deform_grids needs at least one transform"));
    }
    transforms.iter().map(|t| eval_tps_grid(t, height, width)).collect()
}

/// Per-pixel blending weights: one per grid, plus the background weight
/// last when `background` is set.
pub fn blend_weights<T: Real>(
    q: Point2<T>,
    controls: &[Vec<Point2<T>>],
    softness: T,
    background: bool,
) -> Vec<T> {
    let mut dists: Vec<T> = controls
        .iter()
        .map(|set| {
            set.iter()
                .map(|c| c.dist_sq(q))
                .fold(T::infinity(), T::min)
                .sqrt()
        })
        .collect();
    if background {
        let far = dists.iter().copied().fold(T::neg_infinity(), T::max);
        dists.push(far);
    }
    let logits: Vec<T> = dists.iter().map(|&d| -d / softness).collect();
    let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - top).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Blends the deformed grids into one backward flow.
pub fn combine_flow<T: Real>(
    grids: &[PointGrid<T>],
    controls: &[Vec<Point2<T>>],
    softness: T,
    background: bool,
) -> Result<FlowField<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("combine_flow needs at least one grid"))?;
    let (h, w) = (first.height, first.width);
    if grids.iter().any(|g| g.height != h || g.width != w || g.points.len() != h * w) {
        return Err(Error::invalid("all grids must share one shape"));
    }
    if controls.len() != grids.len() {
        return Err(Error::invalid(format!(
            "{} control sets for {} grids",
            controls.len(),
            grids.len()
        )));
    }
    if controls.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every transform needs control points"));
    }
    if !(softness > T::zero()) || !softness.is_finite() {
        return Err(Error::invalid(format!("softness must be positive, got {softness}")));
    }
    check_grid_dims(h, w)?;

    let mut map = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let q = Point2::from_pixel(r, c, h, w);
            let weights = blend_weights(q, controls, softness, background);
            let mut acc = Point2::new(T::zero(), T::zero());
            for (k, g) in grids.iter().enumerate() {
                acc = acc + g.at(r, c) * weights[k];
            }
            if background {
                acc = acc + q * weights[grids.len()];
            }
            map.push(acc);
        }
    }
    FlowField::from_map(h, w, map)
}

/// Composes a flow for a `height × width` output: blended at most at
/// [`FLOW_RESOLUTION`] and bilinearly upsampled when the output is larger.
pub fn compose_flow<T: Real>(
    transforms: &[TpsTransform<T>],
    height: usize,
    width: usize,
    softness: T,
    background: bool,
) -> Result<FlowField<T>> {
    let fh = height.min(FLOW_RESOLUTION);
    let fw = width.min(FLOW_RESOLUTION);
    let grids = deform_grids(transforms, fh, fw)?;
    let controls: Vec<Vec<Point2<T>>> = transforms.iter().map(|t| t.controls.clone()).collect();
    let coarse = combine_flow(&grids, &controls, softness, background)?;
    if fh == height && fw == width {
        Ok(coarse)
    } else {
        upsample_flow(&coarse, height, width)
    }
}

/// Bilinear resampling of a flow's coordinate map onto a new lattice.
pub fn upsample_flow<T: Real>(flow: &FlowField<T>, height: usize, width: usize) -> Result<FlowField<T>> {
    check_grid_dims(height, width)?;
    let mut map = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let q = Point2::from_pixel(r, c, height, width);
            let (y0, y1, fy) = bilinear_index(q.y, flow.height);
            let (x0, x1, fx) = bilinear_index(q.x, flow.width);
            let lerp = |a: Point2<T>, b: Point2<T>, f: T| a * (T::one() - f) + b * f;
            let top = lerp(flow.at(y0, x0), flow.at(y0, x1), fx);
            let bottom = lerp(flow.at(y1, x0), flow.at(y1, x1), fx);
            map.push(lerp(top, bottom, fy));
        }
    }
    FlowField::from_map(height, width, map)
}

/// Maps a normalized coordinate in `[-1, 1]` to a pixel pair and a
/// fractional weight. Positions within rounding noise of a pixel center
/// snap to it so that integral shifts sample exactly.
#[inline]
fn bilinear_index<T: Real>(u: T, extent: usize) -> (usize, usize, T) {
    let last = T::from_usize_lossy(extent - 1);
    let mut pos = (u + T::one()) * T::lit(0.5) * last;
    let nearest = pos.round();
    if (pos - nearest).abs() <= T::lit(1e-9).max(T::epsilon() * T::lit(64.0)) * (T::one() + last) {
        pos = nearest;
    }
    let pos = pos.max(T::zero()).min(last);
    let i0 = pos.floor().to_usize().unwrap_or(0).min(extent - 1);
    if i0 + 1 >= extent {
        return (extent - 1, extent - 1, T::zero());
    }
    (i0, i0 + 1, pos - T::from_usize_lossy(i0))
}

/// Samples `src` at each flow coordinate; invalid pixels become 0.
pub fn warp_image<T: Real>(src: &RasterImage<T>, flow: &FlowField<T>) -> Result<RasterImage<T>> {
    if src.data.is_empty() {
        return Err(Error::invalid("source image is empty"));
    }
    if flow.map.len() != flow.height * flow.width || flow.valid_mask.len() != flow.map.len() {
        return Err(Error::invalid("malformed flow field"));
    }
    let ch = src.channels;
    let mut out = RasterImage::zeros(flow.height, flow.width, ch);
    for r in 0..flow.height {
        for c in 0..flow.width {
            let idx = r * flow.width + c;
            if !flow.valid_mask[idx] {
                continue;
            }
            let p = flow.map[idx];
            let (y0, y1, fy) = bilinear_index(p.y, src.height);
            let (x0, x1, fx) = bilinear_index(p.x, src.width);
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            for k in 0..ch {
                let top = src.get(y0, x0, k) * gx + src.get(y0, x1, k) * fx;
                let bottom = src.get(y1, x0, k) * gx + src.get(y1, x1, k) * fx;
                out.set(r, c, k, top * gy + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Pixels the flow cannot source from the input image.
pub fn occlusion_mask<T: Real>(flow: &FlowField<T>) -> Vec<bool> {
    flow.valid_mask.iter().map(|v| !v).collect()
}

pub const FLOW_MAGIC: &[u8; 4] = b"MDFL";

/// Encodes `MDFL`: magic, u32 height, u32 width, H·W float32 (x, y) pairs,
/// then H·W mask bytes. The mask is derived from the stored float32
/// coordinates so the file is self-consistent.
pub fn encode_flow<T: Real>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    let n = flow.height * flow.width;
    let mut out = Vec::with_capacity(12 + 9 * n);
    out.extend_from_slice(FLOW_MAGIC);
    binio::put_u32(&mut out, binio::dim_u32(flow.height, "height")?);
    binio::put_u32(&mut out, binio::dim_u32(flow.width, "width")?);
    let stored: Vec<Point2<f32>> = flow
        .map
        .iter()
        .map(|p| Point2::new(p.x.to_f32_lossy(), p.y.to_f32_lossy()))
        .collect();
    for p in &stored {
        binio::put_f32(&mut out, p.x);
        binio::put_f32(&mut out, p.y);
    }
    out.extend(stored.iter().map(|&p| u8::from(in_unit_square(p))));
    Ok(out)
}

pub fn decode_flow<T: Real>(bytes: &[u8]) -> Result<FlowField<T>> {
    let mut r = Reader::new(bytes, "MDFL");
    r.magic(FLOW_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 {
        return Err(r.error(format!("zero-sized flow {h}x{w}")));
    }
    let n = h
        .checked_mul(w)
        .ok_or_else(|| r.error("flow size overflows"))?;
    let coords = r.f32s(2 * n, "coordinates")?;
    binio::check_finite(&coords, &r, "coordinates")?;
    let mask_bytes = r.bytes(n, "mask")?;
    check_mask_bytes(mask_bytes, &r)?;
    r.finish()?;
    let map: Vec<Point2<T>> = coords
        .chunks_exact(2)
        .map(|c| Point2::new(T::lit(c[0] as f64), T::lit(c[1] as f64)))
        .collect();
    let valid_mask: Vec<bool> = mask_bytes.iter().map(|&b| b == 1).collect();
    let flow = FlowField { height: h, width: w, map, valid_mask };
    if !flow.mask_consistent() {
        return Err(Error::parse("MDFL", "mask disagrees with coordinates"));
    }
    Ok(flow)
}

fn check_mask_bytes(mask: &[u8], r: &Reader<'_>) -> Result<()> {
    if let Some(i) = mask.iter().position(|&b| b > 1) {
        return Err(r.error(format!("mask byte {i} is {}, expected 0 or 1", mask[i])));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tps::{solve_tps, ControlPair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Point2<f64> {
        Point2::new(x, y)
    }

    fn corners() -> Vec<Point2<f64>> {
        vec![p(-0.5, -0.5), p(0.5, -0.5), p(0.0, 0.5), p(-0.4, 0.2)]
    }

    fn shifted(shift: Point2<f64>, pts: &[Point2<f64>]) -> TpsTransform<f64> {
        let pairs: Vec<_> = pts.iter().map(|&d| ControlPair::new(d + shift, d)).collect();
        solve_tps(&pairs, 0.0).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> RasterImage<f64> {
        let data = (0..h * w * ch).map(|_| rng.random_range(0.0..=1.0)).collect();
        RasterImage::new(h, w, ch, data).unwrap()
    }

    #[test]
    fn single_grid_passes_through() {
        let t = shifted(p(0.1, 0.05), &corners());
        let grids = deform_grids(std::slice::from_ref(&t), 9, 7).unwrap();
        let flow = combine_flow(&grids, std::slice::from_ref(&t.controls), 0.1, false).unwrap();
        assert_eq!(flow.map, grids[0].points);
    }

    #[test]
    fn identical_transforms_are_convex() {
        let t = shifted(p(0.1, 0.05), &corners());
        let other: Vec<_> = corners().iter().map(|&c| c + p(0.3, 0.0)).collect();
        let mut t2 = t.clone();
        t2.controls = other.clone();
        // same map, different anchors for the blend
        let grids = vec![eval_tps_grid(&t, 6, 6).unwrap(); 2];
        let flow = combine_flow(&grids, &[t.controls.clone(), other], 0.1, false).unwrap();
        for (a, b) in flow.map.iter().zip(&grids[0].points) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }

    #[test]
    fn equidistant_pixel_is_midpoint() {
        // control sets mirrored about x = 0; the pixel at x = 0 is equidistant
        let left = vec![p(-0.5, -0.5), p(-0.5, 0.5), p(-0.8, 0.0)];
        let right: Vec<_> = left.iter().map(|c| p(-c.x, c.y)).collect();
        let ta = shifted(p(0.2, 0.0), &left);
        let tb = shifted(p(0.0, -0.3), &right);
        let grids = deform_grids(&[ta.clone(), tb.clone()], 5, 5).unwrap();
        let flow = combine_flow(&grids, &[left, right], 0.1, false).unwrap();
        for r in 0..5 {
            let mid = (grids[0].at(r, 2) + grids[1].at(r, 2)) * 0.5;
            assert!((flow.at(r, 2) - mid).norm() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets: Vec<Vec<Point2<f64>>> = (0..5)
            .map(|_| (0..3).map(|_| p(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        for bg in [false, true] {
            let w = blend_weights(p(0.1, -0.2), &sets, 0.1, bg);
            assert_eq!(w.len(), 5 + usize::from(bg));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn combine_rejects_mismatch() {
        let t = TpsTransform::identity(corners());
        let a = eval_tps_grid(&t, 4, 4).unwrap();
        let b = eval_tps_grid(&t, 5, 4).unwrap();
        assert!(combine_flow(&[a.clone(), b], &[corners(), corners()], 0.1, false).is_err());
        assert!(combine_flow(std::slice::from_ref(&a), &[corners()], 0.0, false).is_err());
        assert!(combine_flow(&[a], &[corners(), corners()], 0.1, false).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 13, 9, 3);
        let flow = FlowField::identity(13, 9).unwrap();
        assert_eq!(warp_image(&img, &flow).unwrap(), img);
    }

    #[test]
    fn one_pixel_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (10, 12);
        let img = random_image(&mut rng, h, w, 1);
        let pitch = 2.0 / (w - 1) as f64;
        let map = PointGrid::<f64>::lattice(h, w)
            .unwrap()
            .points
            .into_iter()
            .map(|q| q + p(pitch, 0.0))
            .collect();
        let flow = FlowField::from_map(h, w, map).unwrap();
        let out = warp_image(&img, &flow).unwrap();
        for r in 0..h {
            for c in 1..w - 2 {
                assert_eq!(out.get(r, c, 0), img.get(r, c + 1, 0), "({r},{c})");
            }
            assert_eq!(out.get(r, w - 1, 0), 0.0);
        }
    }

    #[test]
    fn out_of_range_is_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 4, 4, 3);
        let flow = FlowField::from_map(4, 4, vec![p(-5.0, -5.0); 16]).unwrap();
        let out = warp_image(&img, &flow).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert!(flow.valid_mask.iter().all(|&v| !v));
        assert!(occlusion_mask(&flow).iter().all(|&v| v));
    }

    #[test]
    fn half_plane_occlusion() {
        let map: Vec<_> = PointGrid::<f64>::lattice(6, 6)
            .unwrap()
            .points
            .into_iter()
            .map(|q| if q.x < 0.0 { q + p(-3.0, 0.0) } else { q })
            .collect();
        let flow = FlowField::from_map(6, 6, map).unwrap();
        let occ = occlusion_mask(&flow);
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(occ[r * 6 + c], c < 3);
            }
        }
    }

    #[test]
    fn identity_flow_has_no_occlusion() {
        let flow = FlowField::<f64>::identity(5, 5).unwrap();
        assert!(occlusion_mask(&flow).iter().all(|&v| !v));
    }

    #[test]
    fn upsampled_identity_stays_identity() {
        let coarse = FlowField::<f64>::identity(8, 8).unwrap();
        let fine = upsample_flow(&coarse, 20, 17).unwrap();
        let lat = PointGrid::<f64>::lattice(20, 17).unwrap();
        for (a, b) in fine.map.iter().zip(&lat.points) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn flow_codec_round_trip() {
        let t = shifted(p(0.6, 0.0), &corners());
        let flow = compose_flow(&[t], 16, 16, 0.1, true).unwrap();
        let bytes = encode_flow(&flow).unwrap();
        let back: FlowField<f64> = decode_flow(&bytes).unwrap();
        assert_eq!(encode_flow(&back).unwrap(), bytes);
        assert!(decode_flow::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(decode_flow::<f64>(&bad).is_err());
    }
}
