use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicewise::attention::{
    nonlocal_attention_map, nonlocal_forward, rsa_block, sa_block, RsaVars, SaVars,
};
use slicewise::{
    rsa_forward, rsa_forward_stepwise, sa_attention_map, sa_forward, sa_forward_naive, Embedding,
    RSAParams, SAParams, SliceAxis, Tape, Tensor,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn map_strategy(max: usize) -> impl Strategy<Value = [usize; 4]> {
    [1..=max, 1..=max, 1..=max, 1..=max]
}

fn embedding(rng: &mut ChaCha8Rng, c: usize, with_value: bool) -> Embedding<f64> {
    let ce = rng.random_range(1..=c + 1);
    Embedding {
        query: Some(random(rng, &[ce, c])),
        key: Some(random(rng, &[ce, c])),
        value: with_value.then(|| random(rng, &[c, c])),
    }
}

/// Reorders the slices of `m` (`[C, D, H, W]`) along `axis`: output slice `i`
/// is input slice `perm[i]`.
fn permute_slices(m: &Tensor<f64>, axis: SliceAxis, perm: &[usize]) -> Tensor<f64> {
    let s = m.shape();
    let dim = axis.spatial_index() + 1;
    let strides = slicewise::tensor::strides(s);
    let data = (0..m.len())
        .map(|flat| {
            let idx = (flat / strides[dim]) % s[dim];
            m.data()[flat - idx * strides[dim] + perm[idx] * strides[dim]]
        })
        .collect();
    Tensor::new(s, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fast_paths_match_naive_oracles(
        shape in map_strategy(5),
        seed in any::<u64>(),
        embed in 0u8..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, &shape);
        let embed = (embed > 0).then(|| embedding(&mut rng, shape[0], embed == 2));
        let mut sa = SAParams::with_alpha(rng.random_range(-2.0..2.0));
        sa.embed = embed.clone();
        for axis in SliceAxis::ALL {
            let fast = sa_forward(&m, axis, &sa).unwrap();
            let slow = sa_forward_naive(&m, axis, &sa).unwrap();
            prop_assert!(fast.max_rel_diff(&slow) <= 1e-6, "{axis:?}");
        }
        let mut rsa = RSAParams::with_alphas([0, 1, 2].map(|_| rng.random_range(-2.0..2.0)));
        rsa.embed = embed;
        let fast = rsa_forward(&m, &rsa).unwrap();
        let slow = rsa_forward_stepwise(&m, &rsa).unwrap();
        prop_assert!(fast.max_rel_diff(&slow) <= 1e-6);
    }

    #[test]
    fn attention_maps_are_row_stochastic(shape in map_strategy(5), seed in any::<u64>(), embed in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, &shape).map(|v| v * 10.0);
        let mut sa = SAParams::with_alpha(1.0);
        sa.embed = embed.then(|| embedding(&mut rng, shape[0], false));
        let mut maps = vec![nonlocal_attention_map(&m, &sa).unwrap()];
        for axis in SliceAxis::ALL {
            maps.push(sa_attention_map(&m, axis, &sa).unwrap());
        }
        for map in maps {
            for s in map.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn blocks_are_identity_at_zero_alpha(shape in map_strategy(4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, &shape);
        let mut sa = SAParams::with_alpha(0.0);
        sa.embed = Some(embedding(&mut rng, shape[0], true));
        let mut rsa = RSAParams::with_alphas([0.0; 3]);
        rsa.embed = sa.embed.clone();
        prop_assert_eq!(nonlocal_forward(&m, &sa).unwrap(), m.clone());
        prop_assert_eq!(rsa_forward(&m, &rsa).unwrap(), m.clone());
        for axis in SliceAxis::ALL {
            prop_assert_eq!(sa_forward(&m, axis, &sa).unwrap(), m.clone());
        }
    }

    #[test]
    fn slice_attention_is_permutation_equivariant(
        shape in map_strategy(5),
        seed in any::<u64>(),
        embed in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, &shape);
        let mut sa = SAParams::with_alpha(rng.random_range(-1.0..1.0));
        sa.embed = embed.then(|| embedding(&mut rng, shape[0], true));
        for axis in SliceAxis::ALL {
            let n = shape[axis.spatial_index() + 1];
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let out = sa_forward(&m, axis, &sa).unwrap();
            let permuted = sa_forward(&permute_slices(&m, axis, &perm), axis, &sa).unwrap();
            prop_assert!(permuted.max_abs_diff(&permute_slices(&out, axis, &perm)) <= 1e-6);
        }
    }

    #[test]
    fn blocks_preserve_shape(shape in map_strategy(4), batch in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = vec![batch];
        full.extend_from_slice(&shape);
        let m = random(&mut rng, &full);
        let sa = SAParams::with_alpha(0.7);
        let rsa = RSAParams::with_alphas([0.7, -0.2, 0.4]);
        prop_assert_eq!(nonlocal_forward(&m, &sa).unwrap().shape().to_vec(), full.clone());
        prop_assert_eq!(rsa_forward(&m, &rsa).unwrap().shape().to_vec(), full.clone());
        for axis in SliceAxis::ALL {
            prop_assert_eq!(sa_forward(&m, axis, &sa).unwrap().shape().to_vec(), full.clone());
        }
    }
}

#[test]
fn shared_embedding_gradient_sums_the_three_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = random(&mut rng, &[2, 3, 2, 3]);
    let embed = embedding(&mut rng, 2, true);
    let alphas = [0.6, -0.4, 0.9];
    let probe = random(&mut rng, &[2, 3, 2, 3]);

    let shared_tape = Tape::new();
    let x = shared_tape.constant(m.clone());
    let vars = RsaVars {
        alphas: alphas.map(|a| shared_tape.constant(Tensor::scalar(a))),
        embed: Some(embed.register(&shared_tape, true)),
    };
    let out = rsa_block(&shared_tape, x, &vars).unwrap();
    let loss = shared_tape.dot_const(out, probe.clone()).unwrap();
    let shared = shared_tape.backward(loss).unwrap();

    // Same computation with a private copy of the embedding per pass.
    let split_tape = Tape::new();
    let mut current = split_tape.constant(m);
    let mut copies = Vec::new();
    for (axis, alpha) in SliceAxis::RECURRENT_ORDER.into_iter().zip(alphas) {
        let copy = embed.register(&split_tape, true);
        let pass = SaVars {
            alpha: split_tape.constant(Tensor::scalar(alpha)),
            embed: Some(copy),
        };
        current = sa_block(&split_tape, current, axis, &pass).unwrap();
        copies.push(copy);
    }
    let loss = split_tape.dot_const(current, probe).unwrap();
    let split = split_tape.backward(loss).unwrap();

    let shared_embed = vars.embed.unwrap();
    let roles = |e: &slicewise::attention::EmbeddingVars| {
        [e.query.unwrap(), e.key.unwrap(), e.value.unwrap()]
    };
    for role in 0..3 {
        let total = copies
            .iter()
            .map(|c| split.get(roles(c)[role]).unwrap().clone())
            .reduce(|a, b| {
                Tensor::new(
                    a.shape(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                )
                .unwrap()
            })
            .unwrap();
        let per_pass_nonzero = copies
            .iter()
            .filter(|c| {
                split
                    .get(roles(c)[role])
                    .unwrap()
                    .data()
                    .iter()
                    .any(|&g| g != 0.0)
            })
            .count();
        assert_eq!(per_pass_nonzero, 3, "every pass contributes to role {role}");
        assert!(
            shared
                .get(roles(&shared_embed)[role])
                .unwrap()
                .max_rel_diff(&total)
                <= 1e-10
        );
    }
}
