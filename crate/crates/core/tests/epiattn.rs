use episdf::epiattn::{
    embedding_width, epipolar_aggregate, geometry_decoder, grouped_attention, linearized_attention, ray_aggregate,
    weight_decoder, EpipolarParams, Mlp, RayParams,
};
use episdf::geometry::Vec3;
use episdf::verify::{MODULE_STEP, MODULE_TOL};
use episdf::{grad_check_with, DualArray, Stencil};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: Vec<usize>) -> DualArray {
    let n = shape.iter().product();
    DualArray::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Quadratic-cost reference: explicit similarity matrix, then normalise.
fn naive(q: &[f64], k: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for qi in q.chunks(d) {
        let sims: Vec<f64> = k
            .chunks(d)
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| phi(*a) * phi(*b)).sum())
            .collect();
        let total: f64 = sims.iter().sum();
        for c in 0..d {
            out.push(sims.iter().zip(v.chunks(d)).map(|(s, vj)| s * vj[c]).sum::<f64>() / total);
        }
    }
    out
}

#[test]
fn factored_attention_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let (nq, nk, d) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..7));
        let q = random(&mut rng, vec![nq, d]);
        let k = random(&mut rng, vec![nk, d]);
        let v = random(&mut rng, vec![nk, d]);
        let fast = linearized_attention(&q, &k, &v).unwrap();
        let slow = naive(&q.values(), &k.values(), &v.values(), d);
        for (a, b) in fast.values().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn heads_and_groups_are_independent_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (g, nq, nk, heads, d) = (3, 2, 4, 2, 3);
    let c = heads * d;
    let q = random(&mut rng, vec![g * nq, c]);
    let k = random(&mut rng, vec![g * nk, c]);
    let v = random(&mut rng, vec![g * nk, c]);
    let out = grouped_attention(&q, &k, &v, g, heads).unwrap();
    let block = |x: &DualArray, rows: usize, gi: usize, h: usize| -> Vec<f64> {
        let vals = x.values();
        (0..rows)
            .flat_map(|r| vals[(gi * rows + r) * c + h * d..(gi * rows + r) * c + (h + 1) * d].to_vec())
            .collect()
    };
    for gi in 0..g {
        for h in 0..heads {
            let want = naive(&block(&q, nq, gi, h), &block(&k, nk, gi, h), &block(&v, nk, gi, h), d);
            let got = block(&out, nq, gi, h);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn full_path_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (ns, nv, c, freqs) = (4, 2, 8, 1);
    let width = c + embedding_width(freqs);
    let epi = EpipolarParams::init(&mut rng, c);
    let ray = RayParams::init(&mut rng, width);
    let geo = Mlp::init(&mut rng, width, 8, 1);
    let f_b = random(&mut rng, vec![ns, c]);
    let f_e = random(&mut rng, vec![nv, ns, c]);
    let mask = vec![vec![true; ns], vec![true; ns]];
    let pos: Vec<Vec3> = (0..ns)
        .map(|i| [0.2 * i as f64 - 0.3, 0.1, -0.25 + 0.1 * i as f64])
        .collect();
    let sdf = |fb: &DualArray, fe: &DualArray, p: &EpipolarParams, r: &RayParams| {
        let x = epipolar_aggregate(fb, fe, &mask, p, 2)?;
        geometry_decoder(&ray_aggregate(&x, &pos, r, freqs, 1)?, &geo)?.sum()
    };
    let checks = [
        grad_check_with(|x| sdf(&f_b, x, &epi, &ray), &f_e, MODULE_STEP, Stencil::Ridders),
        grad_check_with(|x| sdf(x, &f_e, &epi, &ray), &f_b, MODULE_STEP, Stencil::Ridders),
        grad_check_with(
            |x| {
                sdf(
                    &f_b,
                    &f_e,
                    &EpipolarParams {
                        w_k: x.clone(),
                        ..epi.clone()
                    },
                    &ray,
                )
            },
            &epi.w_k,
            MODULE_STEP,
            Stencil::Ridders,
        ),
        grad_check_with(
            |x| {
                sdf(
                    &f_b,
                    &f_e,
                    &epi,
                    &RayParams {
                        w_v: x.clone(),
                        ..ray.clone()
                    },
                )
            },
            &ray.w_v,
            MODULE_STEP,
            Stencil::Ridders,
        ),
    ];
    for err in checks {
        let err = err.unwrap();
        assert!(err < MODULE_TOL, "{err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_is_convex_combination_of_values(seed in 0u64..10_000, nk in 1usize..10, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, vec![3, d]);
        let k = random(&mut rng, vec![nk, d]);
        let v = random(&mut rng, vec![nk, d]);
        let out = linearized_attention(&q, &k, &v).unwrap();
        let vv = v.values();
        for row in out.values().chunks(d) {
            for (c, &o) in row.iter().enumerate() {
                let col = vv.iter().skip(c).step_by(d);
                let lo = col.clone().copied().fold(f64::INFINITY, f64::min);
                let hi = col.copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn blend_weights_form_a_distribution(seed in 0u64..10_000, invalid in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, nv, wh, c) = (2, 3, 5, 4);
        let mlp = Mlp::init(&mut rng, wh + c + 4, 8, 1);
        let xhat = random(&mut rng, vec![m, wh]);
        let x = random(&mut rng, vec![m, c]);
        let dirs = random(&mut rng, vec![nv * m, 4]);
        let mut valid = vec![true; nv * m];
        valid[invalid] = false;
        let w = weight_decoder(&xhat, &x, &dirs, Some(&valid), nv, &mlp).unwrap();
        for (s, row) in w.values().chunks(nv).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            for v in 0..nv {
                if !valid[v * m + s] {
                    prop_assert!(row[v] < 1e-300);
                }
            }
        }
    }
}
