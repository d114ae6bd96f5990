use cmunet_tensor::{Conv2dSpec, Tensor};
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one(c in 2usize..7, hw in 1usize..5, scale in 0.1f64..40.0, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[2, c, hw, hw], scale, &mut rng);
        let p = x.softmax(1).unwrap();
        for n in 0..2 {
            for pos in 0..hw * hw {
                let s: f64 = (0..c).map(|k| p.data()[(n * c + k) * hw * hw + pos]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn depthwise_is_per_channel(x in tensor_strategy(vec![1, 3, 5, 4]), w in tensor_strategy(vec![3, 1, 3, 3])) {
        let y = x.conv2d(&w, None, Conv2dSpec::same(3).with_groups(3)).unwrap();
        for ch in 0..3 {
            let xc = x.select(1, ch).unwrap().reshape(&[1, 1, 5, 4]).unwrap();
            let wc = w.select(0, ch).unwrap().reshape(&[1, 1, 3, 3]).unwrap();
            let yc = xc.conv2d(&wc, None, Conv2dSpec::same(3)).unwrap();
            let got = y.select(1, ch).unwrap();
            for (a, b) in got.data().iter().zip(yc.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in tensor_strategy(vec![3, 8])) {
        let y = x.layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1, 1e-5).unwrap();
        for row in y.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn permute_round_trip(x in tensor_strategy(vec![2, 3, 4])) {
        let back = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn linear_is_additive(a in tensor_strategy(vec![4, 3]), b in tensor_strategy(vec![4, 3]), w in tensor_strategy(vec![2, 3])) {
        let lhs = a.add(&b).unwrap().linear(&w, None).unwrap();
        let rhs = a.linear(&w, None).unwrap().add(&b.linear(&w, None).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_keep_shapes(x in tensor_strategy(vec![2, 2, 4, 4])) {
        let x = x.to_leaf();
        x.silu().pool2d(cmunet_tensor::PoolKind::Max, 2, 2, 0).unwrap().sum().backward().unwrap();
        let g = x.grad().unwrap();
        prop_assert_eq!(g.len(), x.numel());
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }
}
