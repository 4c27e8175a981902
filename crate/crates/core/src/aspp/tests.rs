use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::analysis::gradcheck::{check_gradients, GradCheckConfig};
use crate::analysis::oracle::{concat_oracle, linear_oracle, oracle_attention, resize_oracle, OracleWeights};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn small(dim: usize) -> PyramidConfig {
    PyramidConfig {
        patch: 2,
        ratios: vec![1, 2, 4],
        dim,
        num_classes: 3,
        ..PyramidConfig::default()
    }
}

fn pyramid_tensors(channels: [usize; 4], h4: usize, rng: &mut ChaCha8Rng) -> [Tensor; 4] {
    [0, 1, 2, 3].map(|i| random(&[channels[i], h4 >> i, h4 >> i], rng))
}

fn bind_pyramid(g: &mut Graph, t: &[Tensor; 4]) -> FeaturePyramid {
    FeaturePyramid {
        levels: [0, 1, 2, 3].map(|i| g.constant(t[i].clone())),
    }
}

struct Built {
    store: ParamStore,
    weights: DecoderWeights,
}

fn build(cfg: &PyramidConfig, channels: [usize; 4], seed: u64) -> Built {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = DecoderWeights::init(&mut store, "decoder", cfg, channels, &mut rng).unwrap();
    // non-zero biases so the oracle sees every term
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random(&shape, &mut rng).map(|v| v * 0.1);
        }
    }
    Built { store, weights }
}

#[test]
fn default_config_is_five_branch_pyramid() {
    let cfg = PyramidConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.num_branches(), 5);
    assert_eq!(cfg.patch, 8);
    let heads: Vec<usize> = cfg.branch_configs().unwrap().iter().map(|(_, c)| c.heads).collect();
    assert_eq!(heads, [4, 16, 64]);
    assert_eq!(cfg.receptive_fields(), [16, 32, 64]);
    assert!(cfg.branch_configs().unwrap().iter().all(|(_, c)| !c.is_ablation()));
}

#[test]
fn config_rejects_empty_and_inconsistent_pyramids() {
    let none = PyramidConfig {
        enable_ratios: vec![false; 3],
        enable_shortcut: false,
        enable_image_pool: false,
        ..small(16)
    };
    assert!(matches!(none.validate(), Err(Error::Config(_))));
    let flags = PyramidConfig {
        enable_ratios: vec![true; 2],
        ..small(16)
    };
    assert!(flags.validate().is_err());
    let heads = PyramidConfig {
        heads: Some(vec![1, 8, 16]),
        ..small(64)
    };
    assert!(heads.validate().unwrap_err().to_string().contains("R²"));
    let ablation = PyramidConfig {
        heads: Some(vec![1, 1, 1]),
        mixing: Mixing::NONE,
        ..small(64)
    };
    ablation.validate().unwrap();
}

#[test]
fn config_json_roundtrip_and_unknown_keys() {
    let cfg = PyramidConfig {
        heads: Some(vec![1, 1, 1]),
        mixing: Mixing::NONE,
        enable_ratios: vec![true, false, true],
        decoder: DecoderKind::Linear,
        ..small(32)
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let back: PyramidConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: PyramidConfig = serde_json::from_str(r#"{"dim": 64}"#).unwrap();
    assert_eq!(partial.ratios, [2, 4, 8]);
    assert!(serde_json::from_str::<PyramidConfig>(r#"{"dims": 64}"#).is_err());
}

#[test]
fn pyramid_validation_rejects_bad_strides() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = pyramid_tensors([2, 2, 2, 2], 8, &mut rng);
    let pyr = bind_pyramid(&mut g, &t);
    assert_eq!(pyr.validate(&g).unwrap(), ([2, 2, 2, 2], (8, 8)));
    t[2] = Tensor::zeros(&[2, 3, 2]);
    let pyr = bind_pyramid(&mut g, &t);
    assert!(pyr.validate(&g).is_err());
}

fn aggregate(t: &[Tensor; 4], w: Tensor, b: Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let l = Linear::from_tensors(&mut store, "agg", w, b).unwrap();
    let mut s = Session::new(&store, false);
    let l = l.bind(&mut s);
    let pyr = bind_pyramid(&mut s, t);
    let y = aggregate_levels(&mut s, &pyr, &l).unwrap();
    s.value(y).clone()
}

#[test]
fn aggregate_keeps_constant_levels_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = [0, 1, 2, 3].map(|i| Tensor::full(&[2, 8 >> i, 8 >> i], i as f64 + 1.0));
    let y = aggregate(&t, random(&[3, 6], &mut rng), random(&[3, 1], &mut rng));
    assert_eq!(y.shape(), &[3, 4, 4]);
    for c in 0..3 {
        let first = y.at(&[c, 0, 0]);
        assert!(y.data()[c * 16..(c + 1) * 16].iter().all(|v| (v - first).abs() < 1e-12));
    }
}

#[test]
fn aggregate_with_identity_is_resize_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = pyramid_tensors([1, 2, 2, 2], 16, &mut rng);
    let eye = Tensor::from_fn(&[6, 6], |i| (i[0] == i[1]) as u8 as f64);
    let y = aggregate(&t, eye, Tensor::zeros(&[6, 1]));
    let want = concat_oracle(&[t[1].clone(), resize_oracle(&t[2], 8, 8), resize_oracle(&t[3], 8, 8)]);
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn aggregate_matches_unfused_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = pyramid_tensors([3, 4, 5, 6], 16, &mut rng);
    let (w, b) = (random(&[7, 15], &mut rng), random(&[7, 1], &mut rng));
    let y = aggregate(&t, w.clone(), b.clone());
    let cat = concat_oracle(&[t[1].clone(), resize_oracle(&t[2], 8, 8), resize_oracle(&t[3], 8, 8)]);
    assert!(y.max_abs_diff(&linear_oracle(&cat, &w, &b)) < 1e-6);
}

fn image_pool(x: Tensor, w: Tensor, b: Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let l = Linear::from_tensors(&mut store, "ip", w, b).unwrap();
    let mut s = Session::new(&store, false);
    let l = l.bind(&mut s);
    let xv = s.constant(x);
    let y = image_pool_branch(&mut s, xv, &l).unwrap();
    s.value(y).clone()
}

#[test]
fn image_pool_constant_input_broadcasts_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, b) = (random(&[3, 3], &mut rng), random(&[3, 1], &mut rng));
    let y = image_pool(Tensor::full(&[3, 4, 5], 2.0), w.clone(), b.clone());
    for c in 0..3 {
        let want = b.data()[c] + 2.0 * (0..3).map(|k| w.at(&[c, k])).sum::<f64>();
        assert!(y.data()[c * 20..(c + 1) * 20].iter().all(|v| (v - want).abs() < 1e-12));
    }
}

#[test]
fn image_pool_zero_weights_give_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = image_pool(random(&[3, 4, 4], &mut rng), Tensor::zeros(&[3, 3]), Tensor::zeros(&[3, 1]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_pool_is_spatially_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = image_pool(random(&[4, 5, 3], &mut rng), random(&[4, 4], &mut rng), random(&[4, 1], &mut rng));
    for c in 0..4 {
        let row = &y.data()[c * 15..(c + 1) * 15];
        assert!(row.iter().all(|&v| v == row[0]));
    }
}

fn aspp_run(b: &Built, cfg: &PyramidConfig, x: &Tensor, features: bool) -> Tensor {
    let mut s = Session::new(&b.store, false);
    let w = b.weights.bind(&mut s);
    let xv = s.constant(x.clone());
    let aspp = w.aspp.as_ref().unwrap();
    let y = if features {
        aspp_features(&mut s, xv, cfg, aspp)
    } else {
        lawin_aspp_forward(&mut s, xv, cfg, aspp)
    }
    .unwrap();
    s.value(y).clone()
}

#[test]
fn shortcut_only_with_identity_reduction_is_identity() {
    let cfg = PyramidConfig {
        enable_ratios: vec![false; 3],
        enable_image_pool: false,
        ..small(8)
    };
    let mut b = build(&cfg, [4, 4, 4, 4], 7);
    let reduce = b.weights.aspp.as_ref().unwrap().reduce;
    *b.store.get_mut(reduce.weight) = Tensor::from_fn(&[8, 8], |i| (i[0] == i[1]) as u8 as f64);
    *b.store.get_mut(reduce.bias) = Tensor::zeros(&[8, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[8, 5, 6], &mut rng);
    assert!(aspp_run(&b, &cfg, &x, false).bit_eq(&x));
}

fn all_subsets(dim: usize) -> impl Iterator<Item = PyramidConfig> {
    (1u32..32).map(move |mask| PyramidConfig {
        enable_shortcut: mask & 1 != 0,
        enable_ratios: vec![mask & 2 != 0, mask & 4 != 0, mask & 8 != 0],
        enable_image_pool: mask & 16 != 0,
        ..small(dim)
    })
}

#[test]
fn branch_subsets_preserve_extent_and_concat_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[64, 5, 3], &mut rng);
    for cfg in all_subsets(64) {
        let b = build(&cfg, [4, 4, 4, 4], 10);
        let cat = aspp_run(&b, &cfg, &x, true);
        assert_eq!(cat.shape(), &[cfg.num_branches() * 64, 5, 3]);
        let y = aspp_run(&b, &cfg, &x, false);
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn disabling_a_branch_removes_exactly_its_parameters() {
    let channels = [8, 8, 16, 16];
    let full = build(&small(64), channels, 0).store;
    let total = full.num_scalars();
    let reduce_row = 64 * 64;
    for (name, cfg) in [
        (
            "decoder.aspp.r1",
            PyramidConfig {
                enable_ratios: vec![false, true, true],
                ..small(64)
            },
        ),
        (
            "decoder.aspp.r2",
            PyramidConfig {
                enable_ratios: vec![true, false, true],
                ..small(64)
            },
        ),
        (
            "decoder.aspp.r4",
            PyramidConfig {
                enable_ratios: vec![true, true, false],
                ..small(64)
            },
        ),
        (
            "decoder.aspp.image_pool",
            PyramidConfig {
                enable_image_pool: false,
                ..small(64)
            },
        ),
    ] {
        let branch = full.num_scalars_with_prefix(name);
        assert!(branch > 0, "{name}");
        let reduced = build(&cfg, channels, 0).store;
        assert_eq!(reduced.num_scalars_with_prefix(name), 0);
        // the reduction loses the branch's D input channels as well
        assert_eq!(reduced.num_scalars(), total - branch - reduce_row, "{name}");
    }
    let no_shortcut = build(
        &PyramidConfig {
            enable_shortcut: false,
            ..small(64)
        },
        channels,
        0,
    )
    .store;
    assert_eq!(no_shortcut.num_scalars(), total - reduce_row);
    let no_lowlevel = build(
        &PyramidConfig {
            enable_lowlevel: false,
            ..small(64)
        },
        channels,
        0,
    )
    .store;
    let fuse = full.num_scalars_with_prefix("decoder.fuse");
    assert_eq!(fuse, (64 + 8) * 64 + 64);
    assert_eq!(no_lowlevel.num_scalars(), total - fuse);
}

#[test]
fn five_branch_pyramid_matches_branch_oracle() {
    let cfg = PyramidConfig {
        dim: 64,
        ..PyramidConfig::default()
    };
    let b = build(&cfg, [4, 4, 4, 4], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[64, 16, 16], &mut rng);
    let got = aspp_run(&b, &cfg, &x, false);

    let st = &b.store;
    let aspp = b.weights.aspp.as_ref().unwrap();
    let mut parts = vec![x.clone()];
    for (i, bc) in cfg.branch_configs().unwrap() {
        let br = aspp.branches[i].unwrap();
        let pm = br.mix.position.unwrap();
        let w = OracleWeights {
            w_q: st.get(br.attn.w_q).clone(),
            w_k: st.get(br.attn.w_k).clone(),
            w_v: st.get(br.attn.w_v).clone(),
            w_mha: st.get(br.attn.w_mha).clone(),
            position_mix: Some((st.get(pm.weight).clone(), st.get(pm.bias).clone())),
        };
        parts.push(oracle_attention(&x, &w, &bc).unwrap());
    }
    let ip = aspp.image_pool.unwrap();
    let means = Tensor::from_fn(&[64, 1, 1], |i| x.data()[i[0] * 256..(i[0] + 1) * 256].iter().sum::<f64>() / 256.0);
    let pooled = linear_oracle(&means, st.get(ip.weight), st.get(ip.bias));
    parts.push(Tensor::from_fn(&[64, 16, 16], |i| pooled.data()[i[0]]));
    let want = linear_oracle(&concat_oracle(&parts), st.get(aspp.reduce.weight), st.get(aspp.reduce.bias));
    assert!(got.max_abs_diff(&want) < 1e-6, "{}", got.max_abs_diff(&want));
}

fn decode_run(b: &Built, cfg: &PyramidConfig, t: &[Tensor; 4]) -> Tensor {
    let mut s = Session::new(&b.store, false);
    let w = b.weights.bind(&mut s);
    let pyr = bind_pyramid(&mut s, t);
    let y = decode(&mut s, &pyr, cfg, &w).unwrap();
    s.value(y).clone()
}

#[test]
fn decode_without_lowlevel_skips_fusion() {
    let cfg = PyramidConfig {
        enable_lowlevel: false,
        ..small(16)
    };
    let channels = [3, 4, 5, 6];
    let b = build(&cfg, channels, 13);
    assert!(b.weights.fuse.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t = pyramid_tensors(channels, 8, &mut rng);
    let got = decode_run(&b, &cfg, &t);
    assert_eq!(got.shape(), &[3, 8, 8]);

    // aggregate + pyramid through the graph, classifier by hand
    let mut s = Session::new(&b.store, false);
    let w = b.weights.bind(&mut s);
    let pyr = bind_pyramid(&mut s, &t);
    let agg = aggregate_levels(&mut s, &pyr, &w.aggregate).unwrap();
    let y = lawin_aspp_forward(&mut s, agg, &cfg, w.aspp.as_ref().unwrap()).unwrap();
    let up = resize_oracle(s.value(y), 8, 8);
    let c = b.weights.classifier;
    let want = linear_oracle(&up, b.store.get(c.weight), b.store.get(c.bias));
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn decode_zero_classifier_gives_zero_logits() {
    let cfg = PyramidConfig {
        num_classes: 1,
        ..small(16)
    };
    let channels = [2, 2, 2, 2];
    let mut b = build(&cfg, channels, 15);
    let c = b.weights.classifier;
    *b.store.get_mut(c.weight) = Tensor::zeros(&[1, 16]);
    *b.store.get_mut(c.bias) = Tensor::zeros(&[1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let got = decode_run(&b, &cfg, &pyramid_tensors(channels, 8, &mut rng));
    assert_eq!(got.shape(), &[1, 8, 8]);
    assert!(got.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_decoder_has_no_pyramid_parameters() {
    let cfg = PyramidConfig {
        decoder: DecoderKind::Linear,
        ..small(16)
    };
    let b = build(&cfg, [2, 2, 2, 2], 0);
    assert_eq!(b.store.num_scalars_with_prefix("decoder.aspp"), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    assert_eq!(decode_run(&b, &cfg, &pyramid_tensors([2, 2, 2, 2], 8, &mut rng)).shape(), &[3, 8, 8]);
}

#[test]
fn gradients_reach_exactly_the_enabled_branches() {
    let cfg = PyramidConfig {
        enable_ratios: vec![true, false, true],
        ..small(16)
    };
    let channels = [2, 3, 4, 5];
    let b = build(&cfg, channels, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let t = pyramid_tensors(channels, 8, &mut rng);
    let mut s = Session::new(&b.store, true);
    let w = b.weights.bind(&mut s);
    let pyr = bind_pyramid(&mut s, &t);
    let y = decode(&mut s, &pyr, &cfg, &w).unwrap();
    let sq = s.mul(y, y).unwrap();
    let loss = s.sum(sq);
    let grads = s.backward(loss).unwrap();
    let per_param = s.param_grads(&grads);
    for (id, g) in b.store.ids().zip(&per_param) {
        let name = b.store.name(id);
        let g = g.as_ref().unwrap_or_else(|| panic!("{name} got no gradient"));
        // zero-initialised biases of position mixing still see gradient
        assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
    }
    assert_eq!(b.store.num_scalars_with_prefix("decoder.aspp.r2"), 0);
    assert!(b.store.num_scalars_with_prefix("decoder.aspp.r4") > 0);
}

#[test]
fn decoder_gradients() {
    let cfg = PyramidConfig {
        ratios: vec![1, 2],
        enable_ratios: vec![true, true],
        dim: 4,
        num_classes: 2,
        ..small(4)
    };
    let channels = [2, 2, 3, 3];
    let b = build(&cfg, channels, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let t = pyramid_tensors(channels, 8, &mut rng);
    let ids: Vec<_> = b.store.ids().collect();
    let mut inputs: Vec<Tensor> = t.to_vec();
    inputs.extend(ids.iter().map(|&id| b.store.get(id).map(|v| v * 10.0)));
    let report = check_gradients(&inputs, &GradCheckConfig::default(), |g, v| {
        let pyr = FeaturePyramid {
            levels: [v[0], v[1], v[2], v[3]],
        };
        // map each ParamId to the corresponding input Var
        let lookup = |id: ParamId| v[4 + ids.iter().position(|&i| i == id).unwrap()];
        let lin = |l: &Linear| Linear {
            weight: lookup(l.weight),
            bias: lookup(l.bias),
        };
        let w = &b.weights;
        let aspp = w.aspp.as_ref().unwrap();
        let bound = DecoderWeights {
            aggregate: lin(&w.aggregate),
            aspp: Some(AsppWeights {
                branches: aspp
                    .branches
                    .iter()
                    .map(|br| {
                        br.map(|br| LawinBranchWeights {
                            attn: AttentionWeights {
                                w_q: lookup(br.attn.w_q),
                                w_k: lookup(br.attn.w_k),
                                w_v: lookup(br.attn.w_v),
                                w_mha: lookup(br.attn.w_mha),
                            },
                            mix: ContextMixWeights {
                                position: br.mix.position.map(|p| crate::attention::PositionMixWeights {
                                    weight: lookup(p.weight),
                                    bias: lookup(p.bias),
                                }),
                                channel: None,
                            },
                        })
                    })
                    .collect(),
                image_pool: aspp.image_pool.as_ref().map(lin),
                reduce: lin(&aspp.reduce),
            }),
            fuse: w.fuse.as_ref().map(lin),
            classifier: lin(&w.classifier),
        };
        let y = decode(g, &pyr, &cfg, &bound)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
