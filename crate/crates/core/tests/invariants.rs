use edgestereo::data::{pfm, png16};
use edgestereo::loss::{class_balanced_bce, edge_aware_smoothness, evaluate};
use edgestereo::{ConvParams, Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..4, 2usize..6, 2usize..8).prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, h, w]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_pointwise_conv(x in image()) {
        let c = x.shape()[1];
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }));
        let y = g.conv2d(xv, w, None, ConvParams::same(1, 1)).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn pool_then_resize_keeps_constants(v in -5.0f64..5.0, h in 1usize..5, w in 1usize..5) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 2 * h, 2 * w], v));
        let p = g.avg_pool(x, 2, 2).unwrap();
        let r = g.bilinear_resize(p, 2 * h, 2 * w).unwrap();
        prop_assert!(g.value(r).data().iter().all(|&y| (y - v).abs() < 1e-12));
    }

    #[test]
    fn reused_input_accumulates(x in image()) {
        let mut g = Graph::<f64>::new();
        let xv = g.variable(x.clone());
        let y = g.add(xv, xv).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(xv).unwrap().data().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn concat_backward_splits_exactly(a in tensor(vec![1, 2, 3, 3]), b in tensor(vec![1, 3, 3, 3]), up in tensor(vec![1, 5, 3, 3])) {
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.variable(a), g.variable(b));
        let cat = g.concat_channels(&[av, bv]).unwrap();
        let weight = g.constant(up.clone());
        let prod = g.mul(cat, weight).unwrap();
        let l = g.sum(prod).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert_eq!(grads.get(av).unwrap().data(), &up.data()[..18]);
        prop_assert_eq!(grads.get(bv).unwrap().data(), &up.data()[18..]);
    }

    #[test]
    fn self_correlation_at_zero_is_mean_square(f in image(), d in 0usize..4) {
        let [_, c, h, w] = f.dims4().unwrap();
        let d = d.min(w - 1);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.clone());
        let corr = g.correlation1d(fv, fv, d).unwrap();
        let out = g.value(corr);
        prop_assert_eq!(out.shape()[1], d + 1);
        for b in 0..f.shape()[0] {
            for y in 0..h {
                for x in 0..w {
                    let expect = (0..c).map(|k| f.at4(b, k, y, x).powi(2)).sum::<f64>() / c as f64;
                    prop_assert!((out.at4(b, 0, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn integer_warp_is_clamped_shift(x in image(), d in 0usize..4) {
        let [b, c, h, w] = x.dims4().unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let dv = g.constant(Tensor::full(&[b, 1, h, w], d as f64));
        let warped = g.warp_right_to_left(xv, dv).unwrap();
        let out = g.value(warped);
        for bi in 0..b {
            for k in 0..c {
                for y in 0..h {
                    for xi in 0..w {
                        let src = xi.saturating_sub(d);
                        prop_assert!((out.at4(bi, k, y, xi) - x.at4(bi, k, y, src)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn composition_telescopes_on_constants(v in 0.0f64..10.0, s in 2usize..5) {
        let mut g = Graph::<f64>::new();
        let mut d = g.constant(Tensor::full(&[1, 1, 2, 3], v));
        for _ in 1..s {
            let [_, _, h, w] = g.value(d).dims4().unwrap();
            let r = g.constant(Tensor::zeros(&[1, 1, 2 * h, 2 * w]));
            d = g.compose_disparity(d, r).unwrap();
        }
        let factor = (1u32 << (s - 1)) as f64;
        prop_assert_eq!(g.value(d).shape(), &[1, 1, 2 << (s - 1), 3 << (s - 1)]);
        prop_assert!(g.value(d).data().iter().all(|&y| (y - factor * v).abs() < 1e-9 * (1.0 + factor * v)));
    }

    #[test]
    fn smoothness_ignores_edge_offset(d in tensor(vec![1, 1, 4, 5]), e in tensor(vec![1, 1, 4, 5]), c in -3.0f64..3.0) {
        let mut g = Graph::<f64>::new();
        let dv = g.variable(d);
        let a = edge_aware_smoothness(&mut g, dv, &e).unwrap();
        let b = edge_aware_smoothness(&mut g, dv, &e.map(|v| v + c)).unwrap();
        prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn bce_falls_as_positive_prediction_rises(p in 0.01f64..0.98, step in 0.001f64..0.01) {
        // a negative pixel keeps both classes present so the balance weight is nonzero
        let labels = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let loss = |q: f64| {
            let mut g = Graph::<f64>::new();
            let pv = g.variable(Tensor::new(&[1, 1, 1, 2], vec![q, 0.5]).unwrap());
            let l = class_balanced_bce(&mut g, pv, &labels, None).unwrap();
            g.value(l).item()
        };
        prop_assert!(loss((p + step).min(0.99)) < loss(p));
    }

    #[test]
    fn epe_is_mean_absolute_error(pred in tensor(vec![1, 1, 3, 4]), gt in tensor(vec![1, 1, 3, 4])) {
        let valid = Tensor::ones(&[1, 1, 3, 4]);
        let r = evaluate(&pred, &gt, &valid, &[3.0]).unwrap();
        let mae = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
        prop_assert!((r.epe - mae).abs() < 1e-12);
        prop_assert_eq!(r.valid_count, 12);
    }

    #[test]
    fn pfm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let map = Tensor::from_fn(&[1, 1, h, w], |i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 7) as u32));
        let back = pfm::decode_pfm(&pfm::encode_pfm(&map).unwrap()).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&map));
    }

    #[test]
    fn png16_quantization_bound(v in prop::collection::vec(0.0f32..255.0, 12)) {
        let map = Tensor::new(&[1, 3, 4], v).unwrap();
        let (back, valid) = png16::decode_png16(&png16::encode_png16(&map, None).unwrap());
        for i in 0..12 {
            if valid.data()[i] == 1.0 {
                prop_assert!((back.data()[i] - map.data()[i]).abs() <= 1.0 / 512.0);
            }
        }
    }
}
