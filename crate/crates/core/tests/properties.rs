//! Property tests against the public API.

use lawin::analysis::oracle::{oracle_attention, OracleWeights};
use lawin::attention::*;
use lawin::checkpoint;
use lawin::data::{synthesize, Dataset, SynthConfig};
use lawin::segmenter::ConfusionMatrix;
use lawin::{Graph, ParamStore, Session, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    // small LCG keeps the inputs reproducible without an RNG dependency
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_roundtrips(c in 1usize..5, ny in 1usize..4, nx in 1usize..4, p in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (ny * p, nx * p);
        let x = tensor(&[c, h, w], seed);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let win = window_partition(&mut g, v, p).unwrap();
        prop_assert_eq!(g.shape(win), &[ny * nx, p * p, c][..]);
        let back = window_unpartition(&mut g, win, p, h, w).unwrap();
        prop_assert!(g.value(back).bit_eq(&x));
    }

    #[test]
    fn large_attention_matches_oracle_at_any_extent(
        h in 1usize..12,
        w in 1usize..12,
        patch in 1usize..4,
        ratio in 1usize..4,
        per_head in 1usize..3,
        seed in any::<u64>(),
    ) {
        let cfg = LawinConfig::new(patch, ratio, ratio * ratio * per_head).unwrap();
        let c = cfg.dim;
        let p2 = patch * patch;
        let weights = OracleWeights {
            w_q: tensor(&[c, c], seed ^ 1).map(|v| v * 0.5),
            w_k: tensor(&[c, c], seed ^ 2).map(|v| v * 0.5),
            w_v: tensor(&[c, c], seed ^ 3).map(|v| v * 0.5),
            w_mha: tensor(&[c, c], seed ^ 4).map(|v| v * 0.5),
            position_mix: Some((tensor(&[cfg.heads, p2, p2], seed ^ 5), tensor(&[cfg.heads, 1, p2], seed ^ 6))),
        };
        let x = tensor(&[c, h, w], seed);
        let mut store = ParamStore::new();
        let aw = AttentionWeights::from_tensors(
            &mut store,
            "a",
            [weights.w_q.clone(), weights.w_k.clone(), weights.w_v.clone(), weights.w_mha.clone()],
        )
        .unwrap();
        let (pw, pb) = weights.position_mix.clone().unwrap();
        let mix = ContextMixWeights {
            position: Some(PositionMixWeights::from_tensors(&mut store, "pm", &cfg, pw, pb).unwrap()),
            channel: None,
        };
        let mut s = Session::new(&store, false);
        let (aw, mix) = (aw.bind(&mut s), mix.bind(&mut s));
        let xv = s.constant(x.clone());
        let y = large_window_attention(&mut s, xv, &aw, &mix, &cfg).unwrap();
        prop_assert_eq!(s.shape(y), x.shape());
        let err = s.value(y).max_abs_diff(&oracle_attention(&x, &weights, &cfg).unwrap());
        prop_assert!(err < 1e-9, "error {err:e}");
    }

    #[test]
    fn checkpoint_roundtrips_at_f32(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            store.insert(format!("p{i}"), tensor(shape, seed + i as u64)).unwrap();
        }
        let decoded = checkpoint::decode(&checkpoint::encode(&store)).unwrap();
        prop_assert_eq!(decoded.len(), store.len());
        for ((name, t), (want_name, want)) in decoded.iter().zip(store.iter()) {
            prop_assert_eq!(name.as_str(), want_name);
            prop_assert!(t.bit_eq(&want.map(|v| v as f32 as f64)));
        }
    }

    #[test]
    fn miou_stays_in_unit_interval(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..64)) {
        let mut cm = ConfusionMatrix::new(4);
        for &(t, p) in &pairs {
            cm.add(t, p);
        }
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        let m = cm.miou();
        prop_assert!((0.0..=1.0).contains(&m));
        let hits = pairs.iter().filter(|(t, p)| t == p).count() as f64;
        prop_assert!((cm.pixel_accuracy() - hits / pairs.len() as f64).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_sets_roundtrip_through_disk(seed in any::<u64>(), classes in 2usize..5) {
        let data = synthesize(&SynthConfig { count: 2, size: 32, num_classes: classes, seed }).unwrap();
        for s in &data.samples {
            s.check_labels(classes).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), classes).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.samples.iter().zip(&data.samples) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert!(a.image.bit_eq(&b.image));
        }
    }
}
