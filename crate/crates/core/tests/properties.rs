use collidenet_core::decomposition::decompose;
use collidenet_core::diagnostics::{adf_test, kpss_test};
use collidenet_core::numerics::{moving_average, softmax, Tensor};
use collidenet_core::params::ParamStore;
use collidenet_core::segment_attention::{segment_correlation, SegmentOptions};
use collidenet_core::spatial::{SpatialConfig, SpatialEncoder};
use collidenet_core::stationarity::{denormalize, normalize, Rescalers};
use proptest::prelude::*;

fn matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-1.0f64..1.0, n * d).prop_map(move |v| Tensor::new(&[n, d], v).unwrap())
    })
}

fn odd_window(n: usize) -> impl Strategy<Value = usize> {
    (0..n).prop_map(|h| 2 * h + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moving_average_is_linear(
        (x, y, k) in matrix(12, 3).prop_flat_map(|x| {
            let (n, d) = x.dims2().unwrap();
            (Just(x), prop::collection::vec(-1.0f64..1.0, n * d), odd_window(n))
                .prop_map(move |(x, y, k)| (x, Tensor::new(&[n, d], y).unwrap(), k))
        }),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let lhs = moving_average(&x.scale(a).add(&y.scale(b)).unwrap(), k).unwrap();
        let rhs = moving_average(&x, k).unwrap().scale(a).add(&moving_average(&y, k).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(x in matrix(6, 8), c in -50.0f64..50.0) {
        let y = softmax(&x, 1).unwrap();
        let (n, d) = x.dims2().unwrap();
        for i in 0..n {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(i).iter().all(|v| *v > 0.0));
        }
        let shifted = softmax(&x.map(|v| v + c), 1).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) <= 1e-12);
        prop_assert_eq!(y.shape(), &[n, d]);
    }

    #[test]
    fn decomposition_reconstructs(
        (z, k) in matrix(30, 4).prop_flat_map(|z| { let n = z.dims2().unwrap().0; (Just(z), odd_window(n)) }),
    ) {
        let dec = decompose(&z, k).unwrap();
        prop_assert!(dec.trend.add(&dec.seasonality).unwrap().max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn normalisation_round_trip(x in matrix(20, 5), scale in 0.1f64..100.0, shift in -50.0f64..50.0) {
        prop_assume!(x.dims2().unwrap().0 >= 2);
        let z = x.map(|v| v * scale + shift);
        let (zn, stats) = normalize(&z).unwrap();
        prop_assume!(stats.sigma.iter().all(|s| *s > 1e-3));
        prop_assert!(denormalize(&zn, &stats).unwrap().max_abs_diff(&z) <= 1e-9);
        // The other composition: normalising the de-normalised sequence gives it back.
        let (again, _) = normalize(&denormalize(&zn, &stats).unwrap()).unwrap();
        prop_assert!(again.max_abs_diff(&zn) <= 1e-9);
    }

    #[test]
    fn attention_weights_sum_to_one(
        (q, k, v, l) in (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(segs, l, d)| {
            let n = segs * l;
            let m = move || prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |x| Tensor::new(&[n, d], x).unwrap());
            (m(), m(), m(), Just(l))
        }),
        tau in 0.1f64..3.0,
    ) {
        let r = Rescalers { tau, delta: vec![] };
        let out = segment_correlation(&q, &k, &v, &SegmentOptions::new(l), &r).unwrap();
        for row in out.weights.iter().flatten() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn permuting_key_and_value_segments_leaves_output(
        (q, k, v, l, perm) in (2usize..5, 1usize..4, 1usize..5).prop_flat_map(|(segs, l, d)| {
            let n = segs * l;
            let m = move || prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |x| Tensor::new(&[n, d], x).unwrap());
            (m(), m(), m(), Just(l), Just((0..segs).collect::<Vec<_>>()).prop_shuffle())
        }),
    ) {
        let permute = |t: &Tensor| {
            let (_, d) = t.dims2().unwrap();
            let mut out = Vec::new();
            for &s in &perm {
                out.extend_from_slice(&t.data()[s * l * d..(s + 1) * l * d]);
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let r = Rescalers::identity();
        let base = segment_correlation(&q, &k, &v, &SegmentOptions::new(l), &r).unwrap().y;
        let moved = segment_correlation(&q, &permute(&k), &permute(&v), &SegmentOptions::new(l), &r).unwrap().y;
        prop_assert!(base.max_abs_diff(&moved) <= 1e-12);
    }

    #[test]
    fn adf_statistic_is_affine_invariant(
        noise in prop::collection::vec(-1.0f64..1.0, 60..200),
        a in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0],
        b in -100.0f64..100.0,
    ) {
        // A random walk plus noise, so the regression is far from degenerate.
        let mut acc = 0.0;
        let y: Vec<f64> = noise.iter().enumerate().map(|(i, e)| { acc += e; acc + 0.3 * ((i * 7919) % 13) as f64 }).collect();
        let moved: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let (s0, s1) = (adf_test(&y, None).unwrap(), adf_test(&moved, None).unwrap());
        prop_assert_eq!(s0.lags, s1.lags);
        prop_assert!((s0.stat - s1.stat).abs() <= 1e-8, "{} vs {}", s0.stat, s1.stat);
    }

    #[test]
    fn kpss_statistic_ignores_constant_shift(
        y in prop::collection::vec(-1.0f64..1.0, 20..200),
        c in -1000.0f64..1000.0,
    ) {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let (a, b) = (kpss_test(&y, None).unwrap(), kpss_test(&shifted, None).unwrap());
        prop_assert!((a.stat - b.stat).abs() <= 1e-8 * a.stat.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn clip_encoding_commutes_with_frame_order(
        pixels in prop::collection::vec(0.0f64..1.0, 3 * 16 * 16 * 3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let mut store = ParamStore::with_seed(5);
        let enc = SpatialEncoder::new(&mut store, "s", SpatialConfig::hierarchical(16, 4, 8, 2, 6)).unwrap();
        let clip = Tensor::new(&[3, 16, 16, 3], pixels.clone()).unwrap();
        let per = 16 * 16 * 3;
        let shuffled: Vec<f64> = perm.iter().flat_map(|&f| pixels[f * per..(f + 1) * per].to_vec()).collect();
        let a = enc.encode_clip(&store, &clip).unwrap();
        let b = enc.encode_clip(&store, &Tensor::new(&[3, 16, 16, 3], shuffled).unwrap()).unwrap();
        for (i, &f) in perm.iter().enumerate() {
            prop_assert!(a.row(f).iter().zip(b.row(i)).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }
}
