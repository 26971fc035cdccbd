use episdf::geometry::{self, BoundingBox, Vec3};
use episdf::meshing::{chamfer, chamfer_brute_force, depth_metrics, marching_cubes, sample_mesh, sphere_samples, Mesh};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vec3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-half..half))).collect()
}

#[test]
fn sphere_mesh_is_close_and_closed() {
    let bbox = BoundingBox::cube(1.25);
    for res in [16, 32, 64] {
        let mesh = marching_cubes(|p| geometry::norm(p) - 1.0, &bbox, res).unwrap();
        mesh.validate().unwrap();
        let diag = 3f64.sqrt() * 2.5 / res as f64;
        assert!(mesh.vertices.iter().all(|&v| (geometry::norm(v) - 1.0).abs() < diag));
        assert_eq!(mesh.euler_characteristic(), 2, "res {res}");
    }
}

#[test]
fn offset_sphere_and_torus_topology() {
    let bbox = BoundingBox::cube(1.5);
    let off = marching_cubes(|p| geometry::norm(geometry::sub(p, [0.2, -0.1, 0.3])) - 0.7, &bbox, 40).unwrap();
    assert_eq!(off.euler_characteristic(), 2);
    let torus = |p: Vec3| {
        let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - 0.8;
        (q * q + p[1] * p[1]).sqrt() - 0.3
    };
    assert_eq!(marching_cubes(torus, &bbox, 48).unwrap().euler_characteristic(), 0);
}

#[test]
fn grid_chamfer_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for (n, m) in [(1, 1), (50, 300), (700, 90), (400, 400)] {
        let a = cloud(&mut rng, n, 1.0);
        let mut b = cloud(&mut rng, m, 0.3);
        b.iter_mut().for_each(|p| p[0] += 0.9);
        let (fast, slow) = (chamfer(&a, &b).unwrap(), chamfer_brute_force(&a, &b).unwrap());
        assert!((fast.accuracy - slow.accuracy).abs() < 1e-12);
        assert!((fast.completeness - slow.completeness).abs() < 1e-12);
        assert!((fast.mean - slow.mean).abs() < 1e-12);
    }
}

#[test]
fn subset_prediction_has_zero_accuracy_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let gt = cloud(&mut rng, 500, 1.0);
    let c = chamfer(&gt[..100], &gt).unwrap();
    assert_eq!(c.accuracy, 0.0);
    assert!(c.completeness > 0.0);
}

#[test]
fn mesh_samples_stay_on_the_sphere() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mesh = marching_cubes(|p| geometry::norm(p) - 1.0, &BoundingBox::cube(1.25), 48).unwrap();
    let pts = sample_mesh(&mesh, 5000, &mut rng).unwrap();
    assert!(pts.iter().all(|&p| (geometry::norm(p) - 1.0).abs() < 0.01));
    let reference = sphere_samples([0.0; 3], 1.0, 5000, &mut rng);
    assert!(chamfer(&pts, &reference).unwrap().mean < 0.05);
    assert!(sample_mesh(&Mesh::default(), 10, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric(seed in 0u64..10_000, n in 1usize..60, m in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (cloud(&mut rng, n, 1.0), cloud(&mut rng, m, 1.0));
        let (ab, ba) = (chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert_eq!(ab.accuracy, ba.completeness);
        prop_assert_eq!(ab.completeness, ba.accuracy);
        prop_assert!((ab.mean - ba.mean).abs() < 1e-15);
    }

    #[test]
    fn threshold_percentages_are_monotone(
        pred in prop::collection::vec(0.5f64..3.0, 20),
        gt in prop::collection::vec(0.5f64..3.0, 20),
        mut thresholds in prop::collection::vec(0.0f64..2.0, 1..6),
    ) {
        thresholds.sort_by(f64::total_cmp);
        let m = depth_metrics(&pred, &gt, &[true; 20], &thresholds).unwrap();
        prop_assert!(m.pct_below.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.pct_below.iter().all(|p| (0.0..=100.0).contains(p)));
        prop_assert!(m.abs_err >= 0.0 && m.rel_err >= 0.0);
    }

    #[test]
    fn marching_cubes_vertices_are_within_a_cell_diagonal(
        c in prop::array::uniform3(-0.3f64..0.3),
        r in 0.3f64..0.9,
        res in 6usize..24,
    ) {
        let bbox = BoundingBox::cube(1.25);
        let mesh = marching_cubes(|p| geometry::norm(geometry::sub(p, c)) - r, &bbox, res).unwrap();
        let diag = 3f64.sqrt() * 2.5 / res as f64;
        for v in &mesh.vertices {
            prop_assert!((geometry::norm(geometry::sub(*v, c)) - r).abs() < diag);
        }
    }
}
