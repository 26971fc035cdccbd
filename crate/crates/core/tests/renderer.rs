use episdf::geometry::{self, BoundingBox, Camera, Ray, Vec3};
use episdf::model::{Image, SceneContext};
use episdf::renderer::{clip_to_box, composite, importance_resample, render_oracle, render_rays, RenderConfig};
use episdf::verify::toy_setup;
use episdf::DualArray;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RADIUS: f64 = 1.0;

fn sphere(p: Vec3) -> f64 {
    geometry::norm(p) - RADIUS
}

/// Seeded rays from a camera at distance 4 aimed inside the sphere's
/// silhouette, with their closed-form camera-frame hit depth.
fn oracle_rays(seed: u64, n: usize) -> Vec<(Camera, Ray, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bbox = BoundingBox::cube(1.25);
    (0..n)
        .map(|_| {
            let dir = geometry::normalize([0; 3].map(|_| rng.random_range(-1.0..1.0)));
            let eye = geometry::scale(dir, 4.0);
            let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0].map(|v| v + 1e-3), 80.0, 65, 65).unwrap();
            // pixels within 0.7 r of the centre in the image plane
            let px = [
                32.0 + rng.random_range(-14.0..14.0),
                32.0 + rng.random_range(-14.0..14.0),
            ];
            let ray = clip_to_box(&cam.pixel_to_ray(px, 0.0, f64::MAX).unwrap(), &bbox).unwrap();
            let b = geometry::dot(ray.origin, ray.direction);
            let disc = b * b - (geometry::dot(ray.origin, ray.origin) - RADIUS * RADIUS);
            assert!(disc > 0.0);
            let t = -b - disc.sqrt();
            let z = t * geometry::dot(ray.direction, cam.forward());
            (cam, ray, z)
        })
        .collect()
}

#[test]
fn oracle_depth_matches_sphere_intersection() {
    for (cam, ray, z) in oracle_rays(41, 20) {
        let out = render_oracle(&ray, sphere, 128, 200.0, cam.forward()).unwrap();
        assert!((out.depth - z).abs() < 0.01 * RADIUS, "{} vs {z}", out.depth);
        assert!(out.weights.iter().sum::<f64>() <= 1.0 + 1e-9);
        assert!(out.acc > 0.99);
    }
}

// Below about 128 samples the discretisation error alternates in sign, so
// a lucky near-zero error at one count says nothing about the next.
#[test]
fn doubling_samples_never_doubles_the_error() {
    let mut improved = 0;
    for (cam, ray, z) in oracle_rays(42, 20) {
        let err = |n| (render_oracle(&ray, sphere, n, 200.0, cam.forward()).unwrap().depth - z).abs();
        let (coarse, fine) = (err(128), err(256));
        assert!(fine <= 2.0 * coarse + 1e-12, "{coarse} -> {fine}");
        improved += (fine <= coarse) as usize;
    }
    assert!(improved >= 10, "{improved} of 20 improved");
}

#[test]
fn uniform_weights_give_uniform_fine_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let t: Vec<f64> = (0..17).map(|i| 2.0 + 0.25 * i as f64).collect();
    let fine = importance_resample(&t, &[1.0; 16], 1000, true, &mut rng).unwrap();
    assert!(fine.windows(2).all(|w| w[0] <= w[1]));
    let ks = fine
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - 2.0) / 4.0;
            (f - i as f64 / 1000.0).abs().max((f - (i + 1) as f64 / 1000.0).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.1, "{ks}");
    assert!(fine.iter().all(|&x| (2.0..=6.0).contains(&x)));
}

#[test]
fn toy_model_colours_stay_within_source_range() {
    let (config, params, views, bbox) = toy_setup(5).unwrap();
    let sources: Vec<(&Camera, &Image)> = views[1..].iter().map(|(c, i)| (c, i)).collect();
    let ctx = SceneContext::build(&params, &config, &bbox, &sources, None).unwrap();
    let target = &views[0].0;
    let rays: Vec<Ray> = (0..12)
        .flat_map(|y| (0..12).map(move |x| (x, y)))
        .map(|(x, y)| target.pixel_to_ray([x as f64, y as f64], 0.0, f64::MAX).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = render_rays(
        &params,
        &params,
        &config,
        &ctx,
        &ctx,
        target,
        &rays,
        &RenderConfig::default(),
        &mut rng,
    )
    .unwrap();
    let max_src = sources
        .iter()
        .flat_map(|(_, img)| img.data.iter().copied())
        .fold(0.0, f64::max);
    for (rgb, &acc) in out.color.values().chunks(3).zip(out.acc.values().iter()) {
        assert!(acc <= 1.0 + 1e-9);
        for &c in rgb {
            assert!(c >= -1e-12 && c <= max_src * acc + 1e-9, "{c} > {max_src} * {acc}");
        }
    }
    for t in &out.samples {
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }
}

proptest! {
    #[test]
    fn weights_never_exceed_one(alpha in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let n = alpha.len();
        let a = DualArray::new(vec![1, n], alpha).unwrap();
        let c = composite(&a, &DualArray::zeros(vec![1, n, 1])).unwrap();
        prop_assert!(c.weights.values().iter().all(|&w| w >= 0.0));
        prop_assert!(c.acc.item() <= 1.0 + 1e-9);
    }

    #[test]
    fn composite_is_linear_in_quantity(
        alpha in prop::collection::vec(0.0f64..=1.0, 6),
        q1 in prop::collection::vec(-5.0f64..5.0, 12),
        q2 in prop::collection::vec(-5.0f64..5.0, 12),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let al = DualArray::new(vec![1, 6], alpha).unwrap();
        let mix: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| a * x + b * y).collect();
        let r = |q: Vec<f64>| composite(&al, &DualArray::new(vec![1, 6, 2], q).unwrap()).unwrap().rendered.to_vec();
        let (r1, r2, rm) = (r(q1.clone()), r(q2.clone()), r(mix));
        for k in 0..2 {
            prop_assert!((rm[k] - (a * r1[k] + b * r2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_heavy_bin_captures_the_fine_samples(bin in 0usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut w = vec![0.0; 8];
        w[bin] = 1.0;
        let fine = importance_resample(&t, &w, 200, true, &mut rng).unwrap();
        let inside = fine.iter().filter(|&&x| x >= bin as f64 && x <= bin as f64 + 1.0).count();
        prop_assert!(inside as f64 >= 0.95 * 200.0);
    }
}
