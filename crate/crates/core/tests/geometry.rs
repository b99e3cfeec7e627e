use motiondiff::flow::{combine_flow, deform_grids, warp_image};
use motiondiff::image::RasterImage;
use motiondiff::tps::{bending_energy, solve_tps, ControlPair, Point2, TpsTransform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(x: f64, y: f64) -> Point2<f64> {
    Point2::new(x, y)
}

/// Well-spread random pairs: points at least 0.1 apart.
fn spread_pairs(seed: u64, n: usize) -> Vec<ControlPair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dst: Vec<Point2<f64>> = Vec::new();
    while dst.len() < n {
        let q = p(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if dst.iter().all(|d| d.dist_sq(q) > 0.01) {
            dst.push(q);
        }
    }
    dst.into_iter()
        .map(|d| ControlPair::new(d + p(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)), d))
        .collect()
}

fn side_conditions(t: &TpsTransform<f64>) -> [f64; 6] {
    let mut s = [0.0; 6];
    for (w, c) in t.weights.iter().zip(&t.controls) {
        for k in 0..2 {
            s[k] += w[k];
            s[2 + k] += w[k] * c.x;
            s[4 + k] += w[k] * c.y;
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolates_and_satisfies_side_conditions(seed in any::<u64>(), n in 3usize..10) {
        let pairs = spread_pairs(seed, n);
        // rare near-collinear triples are legitimately rejected
        if let Ok(t) = solve_tps(&pairs, 0.0) {
            for pr in &pairs {
                let q = t.eval(pr.dst);
                prop_assert!((q.x - pr.src.x).abs() < 1e-8 && (q.y - pr.src.y).abs() < 1e-8);
            }
            for v in side_conditions(&t) {
                prop_assert!(v.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn affine_pairs_have_no_bending(
        seed in any::<u64>(),
        n in 3usize..9,
        m in prop::array::uniform4(-2.0f64..2.0),
        b in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let pairs: Vec<_> = spread_pairs(seed, n)
            .into_iter()
            .map(|pr| {
                let d = pr.dst;
                ControlPair::new(p(m[0] * d.x + m[1] * d.y + b[0], m[2] * d.x + m[3] * d.y + b[1]), d)
            })
            .collect();
        if let Ok(t) = solve_tps(&pairs, 0.0) {
            prop_assert!(t.max_weight() < 1e-8);
            prop_assert!(bending_energy(&t) < 1e-10);
        }
    }

    #[test]
    fn translation_equivariance(seed in any::<u64>(), n in 3usize..8, sx in -1.0f64..1.0, sy in -1.0f64..1.0) {
        let pairs = spread_pairs(seed, n);
        let shift = p(sx, sy);
        let moved: Vec<_> = pairs.iter().map(|pr| ControlPair::new(pr.src + shift, pr.dst + shift)).collect();
        if let (Ok(a), Ok(b)) = (solve_tps(&pairs, 0.0), solve_tps(&moved, 0.0)) {
            for q in [p(0.1, -0.4), p(-0.9, 0.7), p(0.5, 0.5)] {
                let (ya, yb) = (a.eval(q) + shift, b.eval(q + shift));
                prop_assert!((ya.x - yb.x).abs() < 1e-9 && (ya.y - yb.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn combined_flow_is_convex(seed in any::<u64>(), k in 1usize..4, softness in 0.02f64..1.0, bg in any::<bool>()) {
        let transforms: Vec<_> = (0..k)
            .filter_map(|i| solve_tps(&spread_pairs(seed.wrapping_add(i as u64), 5), 0.0).ok())
            .collect();
        prop_assume!(!transforms.is_empty());
        let (h, w) = (9, 11);
        let grids = deform_grids(&transforms, h, w).unwrap();
        let controls: Vec<_> = transforms.iter().map(|t| t.controls.clone()).collect();
        let flow = combine_flow(&grids, &controls, softness, bg).unwrap();
        for r in 0..h {
            for c in 0..w {
                let mut cands: Vec<Point2<f64>> = grids.iter().map(|g| g.at(r, c)).collect();
                if bg {
                    cands.push(Point2::from_pixel(r, c, h, w));
                }
                let v = flow.at(r, c);
                let lo_x = cands.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
                let hi_x = cands.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
                let lo_y = cands.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
                let hi_y = cands.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v.x >= lo_x - 1e-9 && v.x <= hi_x + 1e-9);
                prop_assert!(v.y >= lo_y - 1e-9 && v.y <= hi_y + 1e-9);
            }
        }
    }

    #[test]
    fn warp_is_linear(seed in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let t = match solve_tps(&spread_pairs(seed, 6), 0.0) {
            Ok(t) => t,
            Err(_) => return Ok(()),
        };
        let (h, w) = (8, 10);
        let grids = deform_grids(std::slice::from_ref(&t), h, w).unwrap();
        let flow = combine_flow(&grids, &[t.controls.clone()], 0.1, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut img = || {
            RasterImage::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
        };
        let (i1, i2) = (img(), img());
        let mix = RasterImage::new(h, w, 3, i1.data.iter().zip(&i2.data).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let (w1, w2, wm) = (warp_image(&i1, &flow).unwrap(), warp_image(&i2, &flow).unwrap(), warp_image(&mix, &flow).unwrap());
        for i in 0..wm.data.len() {
            prop_assert!((wm.data[i] - (a * w1.data[i] + b * w2.data[i])).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_transforms_compose_to_identity() {
    let (h, w) = (7, 6);
    let ids: Vec<_> = (0..3)
        .map(|i| TpsTransform::identity(vec![p(-0.5 + 0.3 * i as f64, 0.2), p(0.4, -0.6), p(0.0, 0.9)]))
        .collect();
    let grids = deform_grids(&ids, h, w).unwrap();
    let controls: Vec<_> = ids.iter().map(|t| t.controls.clone()).collect();
    for bg in [false, true] {
        let flow = combine_flow(&grids, &controls, 0.1, bg).unwrap();
        let again = combine_flow(&grids, &controls, 0.1, bg).unwrap();
        assert_eq!(flow, again);
        for r in 0..h {
            for c in 0..w {
                let q = Point2::<f64>::from_pixel(r, c, h, w);
                let v = flow.at(r, c);
                assert!((v.x - q.x).abs() < 1e-9 && (v.y - q.y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn regularization_never_increases_energy() {
    for seed in 0..20 {
        let pairs = spread_pairs(seed, 7);
        let energies: Vec<f64> = [0.0, 1e-4, 1e-2]
            .iter()
            .map(|&eps| bending_energy(&solve_tps(&pairs, eps).unwrap()))
            .collect();
        assert!(energies[1] <= energies[0] * (1.0 + 1e-9) && energies[2] <= energies[1] * (1.0 + 1e-9), "{energies:?}");
    }
}
