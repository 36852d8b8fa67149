use candle_core::{Device, Tensor, Var};
use ndarray::Array2;
use proptest::prelude::*;

use semimamba::nn::softmax_classes;
use semimamba::objectives::{
    contrastive_loss, cross_entropy_loss, cross_supervision_loss, dice_loss, project_features, pseudo_label,
    supervised_loss, LabelMap,
};

fn tensor(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// `(B, C, H, W)` logits with `B ≤ 2`, `C ∈ 2..=4`, `H, W ≤ 4`.
fn logits() -> impl Strategy<Value = (Vec<f64>, (usize, usize, usize, usize))> {
    (1usize..3, 2usize..5, 1usize..5, 1usize..5).prop_flat_map(|s| {
        prop::collection::vec(-4.0f64..4.0, s.0 * s.1 * s.2 * s.3).prop_map(move |v| (v, s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_labels_ignore_shifts_and_monotone_maps((v, s) in logits(), shift in prop::collection::vec(-5.0f64..5.0, 32)) {
        let (b, c, h, w) = s;
        let base = pseudo_label(&tensor(&v, s)).unwrap().to_masks().unwrap();
        let mut shifted = v.clone();
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    shifted[(bi * c + ci) * h * w + p] += shift[(bi * h * w + p) % shift.len()];
                }
            }
        }
        prop_assert_eq!(&pseudo_label(&tensor(&shifted, s)).unwrap().to_masks().unwrap(), &base);
        let warped: Vec<f64> = v.iter().map(|x| x * x * x + 0.5 * x).collect();
        prop_assert_eq!(&pseudo_label(&tensor(&warped, s)).unwrap().to_masks().unwrap(), &base);
    }

    #[test]
    fn softmax_sums_to_one((v, s) in logits()) {
        let p = softmax_classes(&tensor(&v, s)).unwrap().sum(1).unwrap();
        for x in p.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            prop_assert!((x - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_ranges((v, s) in logits(), labels in prop::collection::vec(0u8..4, 32)) {
        let (b, c, h, w) = s;
        let masks: Vec<Array2<u8>> = (0..b)
            .map(|bi| Array2::from_shape_fn((h, w), |(y, x)| labels[(bi * h * w + y * w + x) % 32] % c as u8))
            .collect();
        let target = LabelMap::from_masks(&masks, c).unwrap();
        let probs = softmax_classes(&tensor(&v, s)).unwrap();
        let dice = scalar(&dice_loss(&probs, &target).unwrap());
        prop_assert!((0.0..=1.0 + 1e-4).contains(&dice));
        prop_assert!(scalar(&cross_entropy_loss(&probs, &target).unwrap()) >= 0.0);
        let total = scalar(&supervised_loss(&tensor(&v, s), &target).unwrap());
        prop_assert!((total - dice - scalar(&cross_entropy_loss(&probs, &target).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn contrastive_ignores_positive_scale(
        f1 in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4 * 4),
        f2 in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4 * 4),
        k1 in 0.01f64..100.0,
        k2 in 0.01f64..100.0,
        grid in 1usize..5,
    ) {
        let s = (2, 3, 4, 4);
        let (a, b) = (tensor(&f1, s), tensor(&f2, s));
        let loss = |x: &Tensor, y: &Tensor| {
            scalar(&contrastive_loss(&project_features(x, grid).unwrap(), &project_features(y, grid).unwrap()).unwrap())
        };
        let base = loss(&a, &b);
        prop_assert!(base >= 0.0);
        let scaled = loss(&(&a * k1).unwrap(), &(&b * k2).unwrap());
        prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn pseudo_label_producer_gets_no_gradient((v1, s) in logits(), seed in 0u64..100) {
        let v2: Vec<f64> = v1.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 + seed) % 7) as f64 - 3.0).collect();
        let l1 = Var::from_tensor(&tensor(&v1, s)).unwrap();
        let l2 = Var::from_tensor(&tensor(&v2, s)).unwrap();
        let (semi1, semi2) = cross_supervision_loss(l1.as_tensor(), l2.as_tensor()).unwrap();
        let g1 = semi1.backward().unwrap();
        prop_assert!(g1.get(&l2).is_none());
        let g2 = semi2.backward().unwrap();
        prop_assert!(g2.get(&l1).is_none());
    }
}

#[test]
fn identical_logits_reduce_to_supervised_on_own_argmax() {
    let v: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| ((i * 7) % 11) as f64 / 4.0 - 1.0).collect();
    let l = tensor(&v, (2, 3, 3, 3));
    let (semi1, semi2) = cross_supervision_loss(&l, &l).unwrap();
    let own = supervised_loss(&l, &pseudo_label(&l).unwrap()).unwrap();
    assert!((scalar(&semi1) - scalar(&own)).abs() < 1e-12);
    assert!((scalar(&semi2) - scalar(&own)).abs() < 1e-12);
}
