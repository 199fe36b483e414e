use fvalign::codebook::{beta_dyn, Codebook, CodebookConfig};
use fvalign::config::RunConfig;
use fvalign::container::{decode_dataset, encode_dataset};
use fvalign::cosine_similarity;
use fvalign::eval::recall_at_k;
use fvalign::hrf::HrfKernel;
use fvalign::matching::{hrf_operator, structural_loss, temporal_loss, TemporalOperand};
use fvalign::synth::{Split, TripletSample};
use fvalign::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d))
}

fn structural(f: &Tensor, v: &Tensor) -> f64 {
    let mut g = Graph::new();
    let a = g.input(f.clone());
    let b = g.input(v.clone());
    let l = structural_loss(&mut g, &[a], &[b]).unwrap();
    g.value(l).item()
}

fn away_from_zero(t: &Tensor) -> bool {
    (0..t.rows()).all(|i| t.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..8), s in 0.01f64..50.0) {
        let b: Vec<f64> = a.iter().rev().cloned().collect();
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        if a.iter().any(|x| x.abs() > 1e-3) {
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_dyn_stays_inside_open_interval(vf in 0.0f64..1e3, vvt in 0.0f64..1e3) {
        let b = beta_dyn(vf, vvt, 1e-5);
        prop_assert!(b > 0.0 && b < 2.0);
        // more video/text variance never lowers the fMRI weight
        prop_assert!(beta_dyn(vf, vvt * 2.0 + 1.0, 1e-5) >= b);
    }

    #[test]
    fn structural_is_symmetric_scale_free_and_order_free(
        f in matrix(5, 3),
        v in matrix(5, 4),
        scales in prop::collection::vec(0.1f64..10.0, 5),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!(away_from_zero(&f) && away_from_zero(&v));
        let base = structural(&f, &v);
        prop_assert!((base - structural(&v, &f)).abs() < 1e-12);
        let mut fs = f.clone();
        for i in 0..5 {
            fs.row_mut(i).iter_mut().for_each(|x| *x *= scales[i]);
        }
        prop_assert!((base - structural(&fs, &v)).abs() < 1e-9);
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((base - structural(&permute(&f), &permute(&v))).abs() < 1e-12);
    }

    #[test]
    fn hrf_operator_is_linear(x in matrix(12, 2), y in matrix(12, 2), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let k = HrfKernel::canonical(1.0, 8).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let ax = g.scale(xv, a);
        let by = g.scale(yv, b);
        let mix = g.add(ax, by).unwrap();
        let lhs = hrf_operator(&mut g, mix, 6, &k).unwrap();
        let hx = hrf_operator(&mut g, xv, 6, &k).unwrap();
        let hy = hrf_operator(&mut g, yv, 6, &k).unwrap();
        let hx = g.scale(hx, a);
        let hy = g.scale(hy, b);
        let rhs = g.add(hx, hy).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-12);
        let t = temporal_loss(&mut g, &[xv], 6, &k, TemporalOperand::FilteredHistory).unwrap();
        prop_assert!(g.value(t).item() >= 0.0);
    }

    #[test]
    fn quantize_returns_a_nearest_entry(e in matrix(6, 3), h in matrix(4, 3)) {
        let cfg = CodebookConfig { size: 6, dim: 3, ..CodebookConfig::default() };
        let cb = Codebook::from_entries(cfg, e.clone()).unwrap();
        let a = cb.quantize(&h).unwrap();
        for i in 0..4 {
            let d = |k: usize| e.row(k).iter().zip(h.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            let mine = d(a.indices[i]);
            prop_assert!((0..6).all(|k| mine <= d(k)));
            prop_assert_eq!(a.quantized.row(i), e.row(a.indices[i]));
        }
    }

    #[test]
    fn recall_is_monotone_in_k(q in matrix(10, 3), g in matrix(10, 3)) {
        let mut last = 0.0;
        for k in 1..=10 {
            let r = recall_at_k(&q, &g, k).unwrap();
            prop_assert!(r >= last && (0.0..=100.0).contains(&r));
            last = r;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn dataset_bytes_round_trip(
        vals in prop::collection::vec(-100.0f32..100.0, 2 * (6 + 6 + 2)),
        ids in (0u64..1000, 1000u64..2000),
    ) {
        let v: Vec<f64> = vals.iter().map(|&x| x as f64).collect();
        let sample = |id: u64, off: usize, split: Split| TripletSample {
            pair_id: id,
            fmri: Tensor::matrix(3, 2, v[off..off + 6].to_vec()),
            video: Tensor::matrix(2, 3, v[off + 6..off + 12].to_vec()),
            caption: Tensor::vector(v[off + 12..off + 14].to_vec()),
            split,
        };
        let data = vec![sample(ids.0, 0, Split::Train), sample(ids.1, 14, Split::Test)];
        let back = decode_dataset(&encode_dataset(&data)).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-6f64..1e-2, beta in 0.0f64..2.0, k in 2usize..256, seed in any::<u32>()) {
        let mut cfg = RunConfig::default();
        cfg.train.lr_max = lr;
        cfg.train.seed = seed as u64;
        cfg.matching.beta_struct = beta;
        cfg.codebook.size = k;
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
        prop_assert_eq!(back, cfg);
    }
}
