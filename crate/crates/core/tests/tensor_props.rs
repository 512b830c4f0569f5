use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicewise::{gradcheck, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_in(rng, shape, -1.0, 1.0)
}

fn random_in(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn shape_strategy(
    rank: std::ops::RangeInclusive<usize>,
    max: usize,
) -> impl Strategy<Value = Vec<usize>> {
    rank.prop_flat_map(move |r| prop::collection::vec(1..=max, r))
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_round_trip_is_bitwise(
        shape in shape_strategy(1..=5, 4),
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &shape);
        let mut order: Vec<usize> = (0..shape.len()).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, prng.random_range(0..=i));
        }
        let permuted_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        let p = t.permute_reshape(&order, &permuted_shape).unwrap();
        let back = p.permute_reshape(&inverse(&order), &shape).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &[rows, cols]).map(|v| v * 30.0);
        let s = t.softmax_rows().unwrap();
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        let expected = Tensor::new(&[m, n], expected).unwrap();
        prop_assert!(a.matmul(&b).unwrap().max_rel_diff(&expected) <= 1e-6);
    }

    #[test]
    fn f32_matmul_matches_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f32> = random(&mut rng, &[m, k]).cast();
        let b: Tensor<f32> = random(&mut rng, &[k, n]).cast();
        let product = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let expected: f64 = (0..k)
                    .map(|p| a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64)
                    .sum();
                prop_assert!((product.data()[i * n + j] as f64 - expected).abs() <= 1e-5);
            }
        }
    }
}

/// Gradcheck of every differentiable tape operation on random inputs with
/// extents ≤ 4.
mod operations {
    use super::*;
    use slicewise::Tape;

    const TOL: f64 = 1e-6;
    const EPS: f64 = 1e-6;

    fn check(
        params: Vec<Tensor<f64>>,
        f: impl Fn(&Tape<f64>, &[slicewise::Var]) -> slicewise::Result<slicewise::Var>,
    ) {
        let report = gradcheck(&params, EPS, f).unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
    }

    /// Random positive linear functional: every output coordinate gets a
    /// distinct upstream gradient and sums of them stay away from zero, where
    /// central differences lose relative accuracy.
    fn probe(tape: &Tape<f64>, v: slicewise::Var, seed: u64) -> slicewise::Result<slicewise::Var> {
        let shape = tape.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        tape.dot_const(v, random_in(&mut rng, &shape, 0.5, 1.5))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn elementwise(shape in shape_strategy(1..=3, 4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![random(&mut rng, &shape), random(&mut rng, &shape)];
            let positive = vec![random_in(&mut rng, &shape, 0.5, 1.5), random_in(&mut rng, &shape, 0.5, 1.5)];
            check(params.clone(), |t, v| { let s = t.add(v[0], v[1])?; probe(t, s, seed) });
            check(positive, |t, v| { let s = t.mul(v[0], v[1])?; probe(t, s, seed) });
            check(params.clone(), |t, v| { let s = t.scale(v[0], 1.7); probe(t, s, seed) });
            check(params, |t, v| Ok(t.sum(v[0])));
        }

        #[test]
        fn relu_away_from_kink(shape in shape_strategy(1..=3, 4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &shape).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            check(vec![x], |t, v| { let r = t.relu(v[0]); probe(t, r, seed) });
        }

        #[test]
        fn matmul_softmax_permute(m in 1usize..=4, k in 1usize..=4, n in 1usize..=4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
            let positive = vec![random_in(&mut rng, &[m, k], 0.5, 1.5), random_in(&mut rng, &[k, n], 0.5, 1.5)];
            check(positive, |t, v| { let p = t.matmul(v[0], v[1])?; probe(t, p, seed) });
            // One output at a time: its gradient p_c·(δ_cj − p_j) stays well away from zero.
            for at in 0..m * k {
                let mut one_hot = vec![0.0; m * k];
                one_hot[at] = 1.0;
                let one_hot = Tensor::new(&[m, k], one_hot).unwrap();
                check(params.clone(), |t, v| {
                    let s = t.softmax_rows(v[0])?;
                    t.dot_const(s, one_hot.clone())
                });
            }
            check(params.clone(), |t, v| { let p = t.permute_reshape(v[0], &[1, 0], &[k, m])?; probe(t, p, seed) });
            check(params, |t, v| { let r = t.reshape(v[1], &[k * n])?; probe(t, r, seed) });
        }

        #[test]
        fn scaled_residual(shape in shape_strategy(1..=3, 4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let params = vec![
                Tensor::scalar(sign * rng.random_range(0.3..1.0)),
                random_in(&mut rng, &shape, 0.5, 1.5),
                random(&mut rng, &shape),
            ];
            check(params, |t, v| { let r = t.scaled_residual(v[0], v[1], v[2])?; probe(t, r, seed) });
        }

        #[test]
        fn batch_and_channel_ops(
            n in 1usize..=2, c in 1usize..=3, d in 1usize..=3, h in 1usize..=3, w in 1usize..=3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![random(&mut rng, &[n, c, d, h, w]), random(&mut rng, &[n, c + 1, d, h, w])];
            check(params.clone(), |t, v| { let r = t.concat_channels(v[0], v[1])?; probe(t, r, seed) });
            check(params.clone(), |t, v| { let r = t.upsample_nearest2(v[0])?; probe(t, r, seed) });
            check(params, |t, v| {
                let items = (0..n).rev().map(|i| t.select_batch(v[0], i)).collect::<slicewise::Result<Vec<_>>>()?;
                let r = t.stack_batch(&items)?;
                probe(t, r, seed)
            });
        }

        #[test]
        fn convolutions(
            cin in 1usize..=2, cout in 1usize..=2, side in 2usize..=4, stride in 1usize..=2,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random_in(&mut rng, &[1, cin, side, side, side], 0.5, 1.5),
                random_in(&mut rng, &[cout, cin, 3, 3, 3], 0.5, 1.5),
                random(&mut rng, &[cout]),
                random_in(&mut rng, &[cout, cin], 0.5, 1.5),
            ];
            check(params.clone(), |t, v| { let y = t.conv3d(v[0], v[1], Some(v[2]), stride, 1)?; probe(t, y, seed) });
            check(params, |t, v| { let y = t.conv3d_1x1(v[0], v[3], Some(v[2]))?; probe(t, y, seed) });
        }
    }
}
