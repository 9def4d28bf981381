use proptest::prelude::*;

use selfcheck::activation::pearson;
use selfcheck::attack::{apply_patch, forge_noise, linf_distance, NoiseAttackSpec};
use selfcheck::cam::{locate_and_crop, CropConfig, SaliencyMap};
use selfcheck::eval::{roc, uniform_grid};
use selfcheck::network::LayerParams;
use selfcheck::profiler::canonical_mean;
use selfcheck::tensor::Tensor;
use selfcheck::{LayerSpec, Network, NetworkSpec};

fn tiny_net(weights: &[f32]) -> Network<f32> {
    let conv_w: Vec<f32> = weights.iter().cycle().take(2 * 9).copied().collect();
    let dense_w: Vec<f32> = weights.iter().rev().cycle().take(3 * 2 * 4 * 4).copied().collect();
    let spec = NetworkSpec {
        input_shape: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: [3, 3],
                stride: 1,
                padding: 0,
                last_conv: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 32, outputs: 3 },
        ],
        class_labels: vec!["a".into(), "b".into(), "c".into()],
    };
    let params = vec![
        Some(LayerParams {
            weight: Tensor::new(vec![2, 1, 3, 3], conv_w).unwrap(),
            bias: Tensor::filled(&[2], 0.05),
        }),
        None,
        None,
        Some(LayerParams {
            weight: Tensor::new(vec![3, 32], dense_w).unwrap(),
            bias: Tensor::zeros(&[3]),
        }),
    ];
    Network::new(spec, params).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_attacks_stay_in_the_ball(
        weights in prop::collection::vec(-1.0f32..1.0, 8..20),
        pixels in prop::collection::vec(0.0f32..1.0, 36),
        eps in 0.0f64..0.3,
        iterations in 1usize..6,
        bim in any::<bool>(),
    ) {
        let net = tiny_net(&weights);
        let x = Tensor::new(vec![1, 6, 6], pixels).unwrap();
        let source = net.predict(&x).unwrap();
        let spec = if bim { NoiseAttackSpec::bim(eps, iterations) } else { NoiseAttackSpec::fgsm(eps) };
        let adv = forge_noise(&net, &x, source, &spec, Some((0.0, 1.0))).unwrap();
        prop_assert!(linf_distance(&adv, &x) <= eps);
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn patches_touch_only_their_rectangle(
        side in 1usize..6,
        top in 0usize..8,
        left in 0usize..8,
        fill in -2.0f32..2.0,
    ) {
        let x = Tensor::from_fn(&[3, 12, 12], |i| i as f32 * 0.01);
        let patch = Tensor::filled(&[3, side, side], fill);
        let y = apply_patch(&x, &patch, top, left).unwrap();
        for c in 0..3 {
            for r in 0..12 {
                for col in 0..12 {
                    let inside = (top..top + side).contains(&r) && (left..left + side).contains(&col);
                    let v = y.get(&[c, r, col]);
                    if inside {
                        prop_assert_eq!(v, fill);
                    } else {
                        prop_assert_eq!(v.to_bits(), x.get(&[c, r, col]).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn crop_is_in_bounds_and_large_enough(
        coarse in prop::collection::vec(0.0f64..1.0, 16),
        alpha in 0.05f64..1.0,
        min_frac in 0.0f64..1.0,
    ) {
        let map = SaliencyMap::from_coarse(coarse, (4, 4), (16, 16));
        prop_assume!(map.fine_max() > 0.0);
        let x = Tensor::<f32>::zeros(&[1, 16, 16]);
        let cfg = CropConfig { alpha, min_frac, weighted_by_class: false };
        let region = locate_and_crop(&x, &map, &cfg).unwrap();
        let (top, left, h, w) = region.rect();
        prop_assert!(top + h <= 16 && left + w <= 16);
        let min_side = ((min_frac * 16.0).ceil() as usize).clamp(1, 16);
        prop_assert!(h >= min_side && w >= min_side);
        prop_assert_eq!(region.pattern.shape(), &[1, h, w][..]);
    }

    #[test]
    fn canonical_mean_ignores_order(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 5), 1..12),
        seed in any::<u64>(),
    ) {
        let mut shuffled = rows.clone();
        let k = shuffled.len();
        shuffled.rotate_left((seed as usize) % k);
        shuffled.reverse();
        let a = canonical_mean(&rows);
        let b = canonical_mean(&shuffled);
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn roc_is_monotone(
        naturals in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..1.0), 1..40),
        adversarial in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..1.0), 1..40),
    ) {
        let points = roc(&naturals, &adversarial, &uniform_grid(0.0, 1.0, 0.05));
        for pair in points.windows(2) {
            prop_assert!(pair[1].detection_rate <= pair[0].detection_rate);
            prop_assert!(pair[1].false_positive_rate <= pair[0].false_positive_rate);
        }
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(
        pairs in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0), 2..30),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = pearson(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(pearson(&b, &a).unwrap(), r);
        }
    }
}
