use proptest::prelude::*;
use slicewise::metrics::{aggregate, confusion, dice_iou, Confusion};
use slicewise::network::LossWeights;
use slicewise::Tensor;

fn confusion_strategy() -> impl Strategy<Value = Confusion> {
    (0u64..50, 0u64..50, 0u64..50).prop_map(|(tp, fp, fn_)| Confusion::new(tp, fp, fn_))
}

fn masks(len: usize) -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (
        prop::collection::vec(any::<bool>(), len),
        prop::collection::vec(any::<bool>(), len),
    )
}

fn to_tensor(bits: &[bool]) -> Tensor<f32> {
    Tensor::new(
        &[bits.len()],
        bits.iter().map(|&b| b as u8 as f32).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_never_exceeds_dice(c in confusion_strategy()) {
        let (dice, iou) = dice_iou(c);
        prop_assert!(iou <= dice + 1e-15);
        let at_extreme = dice == 0.0 || dice == 1.0;
        prop_assert_eq!((dice - iou).abs() < 1e-15, at_extreme);
        prop_assert!((0.0..=1.0).contains(&dice) && (0.0..=1.0).contains(&iou));
    }

    #[test]
    fn voxel_average_ignores_sample_partition(
        (pred, label) in masks(60),
        cuts in prop::collection::btree_set(1usize..60, 0..6),
    ) {
        let whole = confusion(&to_tensor(&pred), &to_tensor(&label)).unwrap();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(60);
        let parts: Vec<(String, Confusion)> = bounds
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let c = confusion(&to_tensor(&pred[w[0]..w[1]]), &to_tensor(&label[w[0]..w[1]])).unwrap();
                (format!("s{i}"), c)
            })
            .collect();
        let mut reversed = parts.clone();
        reversed.reverse();
        let report = aggregate(&parts).unwrap();
        prop_assert_eq!(report.pooled, whole);
        prop_assert_eq!(report.voxel_avg_dice, dice_iou(whole).0);
        prop_assert_eq!(aggregate(&reversed).unwrap().voxel_avg_dice, report.voxel_avg_dice);
    }

    #[test]
    fn duplicating_a_sample_moves_the_sample_average_toward_it(
        cs in prop::collection::vec(confusion_strategy(), 1..6),
        pick in any::<prop::sample::Index>(),
    ) {
        let named: Vec<(String, Confusion)> = cs.iter().enumerate().map(|(i, c)| (format!("s{i}"), *c)).collect();
        let base = aggregate(&named).unwrap();
        let dup = pick.get(&named).clone();
        let mut extended = named.clone();
        extended.push(dup.clone());
        let after = aggregate(&extended).unwrap();
        let target = dice_iou(dup.1).0;
        prop_assert!((after.sample_avg_dice - target).abs() <= (base.sample_avg_dice - target).abs() + 1e-12);
        for (a, b) in base.per_sample.iter().zip(&after.per_sample) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_weights_sum_to_one(r in 1e-9f64..1.0) {
        prop_assume!(r < 1.0);
        let w = LossWeights::from_rate(r).unwrap();
        prop_assert!((w.background + w.lesion - 1.0).abs() <= 1e-12);
        prop_assert!(w.lesion > 0.0 && w.background > 0.0);
        let s = w.swapped();
        prop_assert_eq!((s.background, s.lesion), (w.lesion, w.background));
    }
}

#[test]
fn loss_weights_reject_rates_outside_the_open_interval() {
    for r in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(LossWeights::from_rate(r).is_err(), "{r}");
    }
}
