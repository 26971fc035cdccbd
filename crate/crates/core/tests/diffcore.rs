use episdf::verify::{run_suite, Suite, PRIMITIVE_TOL};
use episdf::{grad_check, DualArray, Tape};
use proptest::prelude::*;

#[test]
fn primitive_ops_pass_at_100_seeded_points() {
    for seed in 0..100 {
        for c in run_suite(Suite::Diffcore, seed).unwrap() {
            assert!(c.error < PRIMITIVE_TOL, "seed {seed}: {} {:.3e}", c.name, c.error);
        }
    }
}

#[test]
fn power_rule_mean_and_sigmoid_examples() {
    let tape = Tape::new();
    let x = tape.leaf(DualArray::scalar(3.0));
    let g = tape.backward(&x.square().unwrap()).unwrap();
    assert_eq!(g.get(&x).item(), 6.0);

    let v = tape.leaf(DualArray::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let g = tape.backward(&v.mean().unwrap()).unwrap();
    assert!(g.get(&v).values().iter().all(|&d| d == 0.25));

    let z = tape.leaf(DualArray::scalar(0.0));
    let g = tape.backward(&z.sigmoid().unwrap()).unwrap();
    assert_eq!(g.get(&z).item(), 0.25);
}

#[test]
fn grad_check_examples() {
    let x = DualArray::vector(vec![0.5, -2.0, 3.25]);
    assert!(grad_check(|x| x.square()?.sum(), &x, 1e-5).unwrap() < 1e-6);
    assert_eq!(grad_check(|_| Ok(DualArray::scalar(1.5)), &x, 1e-5).unwrap(), 0.0);
}

fn composite(x: &DualArray, w: &DualArray) -> DualArray {
    let h = x.matmul(w).unwrap().elu().unwrap();
    let s = h.softmax_last().unwrap();
    s.mul(&h).unwrap().variance_axis(0).unwrap().sum().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_bit_deterministic(
        xs in prop::collection::vec(-3.0f64..3.0, 12),
        ws in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(DualArray::new(vec![3, 4], xs.clone()).unwrap());
            let w = tape.leaf(DualArray::new(vec![4, 2], ws.clone()).unwrap());
            let g = tape.backward(&composite(&x, &w)).unwrap();
            (g.get(&x).to_vec(), g.get(&w).to_vec())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn variance_matches_moment_identity(
        rows in 1usize..6,
        cols in 1usize..5,
        seed in prop::collection::vec(-10.0f64..10.0, 30),
    ) {
        let data: Vec<f64> = seed.iter().cycle().take(rows * cols).copied().collect();
        let x = DualArray::new(vec![rows, cols], data.clone()).unwrap();
        let var = x.variance_axis(0).unwrap();
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| data[r * cols + c]).collect();
            let n = rows as f64;
            let m = col.iter().sum::<f64>() / n;
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / n;
            prop_assert!((var.values()[c] - (m2 - m * m)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_ops_stay_finite(xs in prop::collection::vec(-50.0f64..50.0, 6)) {
        let x = DualArray::new(vec![2, 3], xs).unwrap();
        let outs = [
            x.exp().unwrap(),
            x.elu().unwrap(),
            x.sigmoid().unwrap(),
            x.softmax_last().unwrap(),
            x.abs().unwrap().add_scalar(1.0).unwrap().log().unwrap(),
            x.square().unwrap().sqrt().unwrap(),
            x.variance_axis(1).unwrap(),
        ];
        for o in &outs {
            prop_assert!(o.values().iter().all(|v| v.is_finite()));
        }
    }
}
