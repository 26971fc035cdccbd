use episdf::featvol::FeatureMap2D;
use episdf::geometry::{self, epipolar_gather, format_cameras, parse_cameras, Camera, Vec3};
use episdf::{grad_check, DualArray};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_camera(rng: &mut impl Rng) -> Camera {
    let dir = geometry::normalize([
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..1.0) + 1e-3,
    ]);
    let eye = geometry::scale(dir, rng.random_range(2.0..6.0));
    let target = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    let w = rng.random_range(16..128);
    let h = rng.random_range(16..128);
    Camera::look_at(eye, target, [0.0, 1.0, 0.0], rng.random_range(20.0..100.0), w, h).unwrap()
}

fn rotation(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = geometry::normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply(r: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| geometry::dot(r[i], p))
}

#[test]
fn pixel_ray_projection_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let cam = random_camera(&mut rng);
        let px = [
            rng.random_range(0.0..cam.width as f64),
            rng.random_range(0.0..cam.height as f64),
        ];
        let ray = cam.pixel_to_ray(px, 0.0, 100.0).unwrap();
        let t = rng.random_range(0.5..10.0);
        let back = cam.project(ray.at(t));
        assert!(back.valid);
        assert!((back.pixel[0] - px[0]).abs() < 1e-9 && (back.pixel[1] - px[1]).abs() < 1e-9);
    }
}

#[test]
fn rigid_motion_leaves_projections_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let cam = random_camera(&mut rng);
        let r = rotation(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0],
            rng.random_range(-3.0..3.0),
        );
        let t = [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        // p' = R p + t, so the moved camera is world_to_cam * [R^T | -R^T t].
        let m = &cam.world_to_cam;
        let mut moved = *m;
        for i in 0..3 {
            for j in 0..3 {
                moved[i][j] = (0..3).map(|k| m[i][k] * r[j][k]).sum();
            }
            moved[i][3] = m[i][3] - (0..3).map(|j| moved[i][j] * t[j]).sum::<f64>();
        }
        let cam2 = Camera::new(cam.fx, cam.fy, cam.cx, cam.cy, moved, cam.width, cam.height).unwrap();
        for _ in 0..5 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let a = cam.project(p);
            let b = cam2.project(geometry::add(apply(&r, p), t));
            assert_eq!(a.valid, b.valid);
            assert!((a.depth - b.depth).abs() < 1e-9);
            if a.valid {
                assert!((a.pixel[0] - b.pixel[0]).abs() < 1e-9 && (a.pixel[1] - b.pixel[1]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn epipolar_gather_gradient_in_feature_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cams: Vec<Camera> = [[0.4, 0.1, 3.0], [-0.5, 0.2, 3.0]]
        .iter()
        .map(|&eye| Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 20.0, 16, 16).unwrap())
        .collect();
    let points: Vec<Vec3> = (0..6)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ]
        })
        .collect();
    let values: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = DualArray::new(vec![4, 4, 3], values).unwrap();
    let other = FeatureMap2D::new(x.detach(), 4.0).unwrap();
    let weights: Vec<f64> = (0..2 * 6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = DualArray::new(vec![2, 6, 3], weights).unwrap();
    let err = grad_check(
        |x| {
            let fmap = FeatureMap2D::new(x.clone(), 4.0)?;
            let (f, _) = epipolar_gather(&points, &[(&cams[0], &fmap), (&cams[1], &other)])?;
            f.mul(&w)?.sum()
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gather_masks_points_behind_a_camera() {
    let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 16, 16).unwrap();
    let fmap = FeatureMap2D::new(DualArray::full(vec![4, 4, 2], 1.0), 4.0).unwrap();
    let (f, mask) = epipolar_gather(&[[0.0, 0.0, 0.0], [0.0, 0.0, 4.0]], &[(&cam, &fmap)]).unwrap();
    assert_eq!(mask, vec![vec![true, false]]);
    assert_eq!(&f.values()[2..], &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn camera_text_round_trips(
        focal in 5.0f64..500.0,
        eye in prop::array::uniform3(-5.0f64..5.0),
        w in 2usize..200,
        h in 2usize..200,
    ) {
        prop_assume!(geometry::norm(eye) > 0.5 && (eye[0].abs() + eye[2].abs()) > 1e-3);
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, w, h).unwrap();
        let back = parse_cameras(&format_cameras(std::slice::from_ref(&cam)), "cameras.txt").unwrap();
        prop_assert_eq!(back, vec![cam]);
    }
}
