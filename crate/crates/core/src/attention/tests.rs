#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::analysis::gradcheck::{check_gradients, GradCheckConfig};
use crate::analysis::oracle::{oracle_attention, OracleWeights};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn eye(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
}

struct Fixture {
    x: Tensor,
    attn: [Tensor; 4],
    pos_mix: Option<(Tensor, Tensor)>,
}

impl Fixture {
    fn random(c: usize, h: usize, w: usize, cfg: &LawinConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng, 1.0);
        let attn = [(); 4].map(|_| random(&[c, c], &mut rng, 0.5));
        let p2 = cfg.patch * cfg.patch;
        let pos_mix = cfg.mixing.position.then(|| {
            (
                random(&[cfg.heads, p2, p2], &mut rng, 0.5),
                random(&[cfg.heads, 1, p2], &mut rng, 0.5),
            )
        });
        Fixture { x, attn, pos_mix }
    }

    fn oracle_weights(&self) -> OracleWeights {
        let [q, k, v, o] = self.attn.clone();
        OracleWeights {
            w_q: q,
            w_k: k,
            w_v: v,
            w_mha: o,
            position_mix: self.pos_mix.clone(),
        }
    }

    fn store(&self, cfg: &LawinConfig) -> (ParamStore, AttentionWeights, ContextMixWeights) {
        let mut store = ParamStore::new();
        let aw = AttentionWeights::from_tensors(&mut store, "attn", self.attn.clone()).unwrap();
        let position = self
            .pos_mix
            .clone()
            .map(|(w, b)| PositionMixWeights::from_tensors(&mut store, "pm", cfg, w, b).unwrap());
        (store, aw, ContextMixWeights { position, channel: None })
    }

    fn local(&self, cfg: &LawinConfig) -> Tensor {
        let (store, aw, _) = self.store(cfg);
        let mut s = Session::new(&store, false);
        let w = aw.bind(&mut s);
        let x = s.constant(self.x.clone());
        let y = local_window_attention(&mut s, x, &w, cfg).unwrap();
        s.value(y).clone()
    }

    fn lawin(&self, cfg: &LawinConfig) -> Tensor {
        let (store, aw, mix) = self.store(cfg);
        let mut s = Session::new(&store, false);
        let w = aw.bind(&mut s);
        let mix = mix.bind(&mut s);
        let x = s.constant(self.x.clone());
        let y = large_window_attention(&mut s, x, &w, &mix, cfg).unwrap();
        s.value(y).clone()
    }
}

fn run1(x: Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

#[test]
fn partition_ramp_windows() {
    let w = run1(Tensor::arange(&[1, 4, 4]), |g, x| window_partition(g, x, 2));
    assert_eq!(w.shape(), &[4, 4, 1]);
    assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&w.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn partition_single_window_is_flattened_input() {
    let x = Tensor::arange(&[1, 3, 3]);
    let w = run1(x.clone(), |g, v| window_partition(g, v, 3));
    assert_eq!(w.shape(), &[1, 9, 1]);
    assert_eq!(w.data(), x.data());
}

#[test]
fn partition_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 6, 4], &mut rng, 10.0);
    let y = run1(x.clone(), |g, v| {
        let w = window_partition(g, v, 2)?;
        window_unpartition(g, w, 2, 6, 4)
    });
    assert!(y.bit_eq(&x));
}

#[test]
fn partition_requires_padding() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 5, 4]));
    assert!(matches!(
        window_partition(&mut g, x, 2),
        Err(Error::PadRequired { extent: 5, divisor: 2, .. })
    ));
}

#[test]
fn local_zero_logits_average_the_window() {
    let cfg = LawinConfig::local(2, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 4, 4], &mut rng, 1.0);
    let z = Tensor::zeros(&[4, 4]);
    let fx = Fixture {
        x: x.clone(),
        attn: [z.clone(), z, eye(4), eye(4)],
        pos_mix: None,
    };
    let y = fx.local(&cfg);
    for ch in 0..4 {
        for r in 0..4 {
            for c in 0..4 {
                let (r0, c0) = (r / 2 * 2, c / 2 * 2);
                let mean = (x.at(&[ch, r0, c0]) + x.at(&[ch, r0, c0 + 1]) + x.at(&[ch, r0 + 1, c0]) + x.at(&[ch, r0 + 1, c0 + 1])) / 4.0;
                assert!((y.at(&[ch, r, c]) - (x.at(&[ch, r, c]) + mean)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn local_singleton_windows_apply_value_and_output_projections() {
    let cfg = LawinConfig::local(1, 1, 3).unwrap();
    let fx = Fixture::random(3, 2, 2, &cfg, 5);
    let y = fx.local(&cfg);
    let [_, _, wv, wo] = &fx.attn;
    for r in 0..2 {
        for c in 0..2 {
            let tok: Vec<f64> = (0..3).map(|ch| fx.x.at(&[ch, r, c])).collect();
            let v: Vec<f64> = (0..3).map(|j| (0..3).map(|i| tok[i] * wv.at(&[i, j])).sum()).collect();
            for ch in 0..3 {
                let o: f64 = (0..3).map(|i| v[i] * wo.at(&[i, ch])).sum();
                assert!((y.at(&[ch, r, c]) - (tok[ch] + o)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn local_matches_loop_oracle() {
    let cfg = LawinConfig::local(2, 2, 4).unwrap();
    let fx = Fixture::random(4, 8, 8, &cfg, 21);
    let want = oracle_attention(&fx.x, &fx.oracle_weights(), &cfg).unwrap();
    assert!(fx.local(&cfg).max_abs_diff(&want) < 1e-6);
}

#[test]
fn context_with_unit_ratio_is_query_patch() {
    let cfg = LawinConfig::local(2, 1, 1).unwrap();
    let x = Tensor::arange(&[1, 4, 4]);
    let ctx = run1(x, |g, v| {
        let p = pad_for_context(g, v, &cfg)?;
        extract_context(g, p, 3, &cfg)
    });
    assert_eq!(ctx.data(), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn context_offset_goes_up_left() {
    // R = 2, P = 1: overhang 1 cell, placed before the query
    let cfg = LawinConfig::new(1, 2, 4).unwrap();
    assert_eq!(cfg.halo(), (1, 0));
    let x = Tensor::arange(&[1, 4, 4]).map(|v| v + 1.0);
    let ctx = run1(x, |g, v| {
        let p = pad_for_context(g, v, &cfg)?;
        extract_context(g, p, 4 + 1, &cfg)
    });
    // rows/cols {0, 1} of the unpadded map
    assert_eq!(ctx.data(), &[1.0, 2.0, 5.0, 6.0]);
}

#[test]
fn corner_context_sees_zero_padding() {
    let cfg = LawinConfig::new(2, 2, 4).unwrap();
    let x = Tensor::full(&[1, 4, 4], 3.0);
    let ctx = run1(x, |g, v| {
        let p = pad_for_context(g, v, &cfg)?;
        extract_context(g, p, 0, &cfg)
    });
    assert_eq!(ctx.shape(), &[1, 4, 4]);
    assert_eq!(ctx.at(&[0, 0, 0]), 0.0);
    assert_eq!(ctx.at(&[0, 1, 1]), 3.0);
    assert_eq!(ctx.data().iter().filter(|&&v| v == 0.0).count(), 7);
}

#[test]
fn extract_context_rejects_unpadded_map() {
    let cfg = LawinConfig::new(2, 4, 16).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 4]));
    assert!(extract_context(&mut g, x, 0, &cfg).is_err());
}

fn position_mix(ctx: Tensor, cfg: &LawinConfig, weight: Tensor, bias: Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let pm = PositionMixWeights::from_tensors(&mut store, "pm", cfg, weight, bias).unwrap();
    let mut s = Session::new(&store, false);
    let pm = pm.bind(&mut s);
    let c = s.constant(ctx);
    let out = position_mix_context(&mut s, c, &pm, cfg).unwrap();
    s.value(out).clone()
}

#[test]
fn zero_position_mix_returns_pooled_context() {
    let cfg = LawinConfig::new(2, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ctx = random(&[4, 4, 4], &mut rng, 1.0);
    let out = position_mix(ctx.clone(), &cfg, Tensor::zeros(&[4, 4, 4]), Tensor::zeros(&[4, 1, 4]));
    let pooled = run1(ctx, |g, v| {
        let p = g.avg_pool2d(v, 2)?;
        let r = g.reshape(p, &[4, 4])?;
        g.transpose(r)
    });
    assert!(out.bit_eq(&pooled));
}

#[test]
fn unit_ratio_zero_mix_is_query_patch() {
    let cfg = LawinConfig::new(3, 1, 2).unwrap();
    let ctx = Tensor::arange(&[2, 3, 3]);
    let out = position_mix(ctx.clone(), &cfg, Tensor::zeros(&[1, 9, 9]), Tensor::zeros(&[1, 1, 9]));
    assert_eq!(out.shape(), &[9, 2]);
    for p in 0..9 {
        for c in 0..2 {
            assert_eq!(out.at(&[p, c]), ctx.data()[c * 9 + p]);
        }
    }
}

#[test]
fn position_mix_matches_unfused_steps() {
    let cfg = LawinConfig::new(2, 2, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ctx = random(&[8, 4, 4], &mut rng, 1.0);
    let weight = random(&[4, 4, 4], &mut rng, 1.0);
    let bias = random(&[4, 1, 4], &mut rng, 1.0);
    let out = position_mix(ctx.clone(), &cfg, weight.clone(), bias.clone());

    // explicit pool
    let mut pooled = vec![[0.0; 4]; 8];
    for (c, row) in pooled.iter_mut().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                row[i * 2 + j] = (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| ctx.at(&[c, 2 * i + a, 2 * j + b]))
                    .sum::<f64>()
                    / 4.0;
            }
        }
    }
    // per head: channels [2h, 2h+2) through MLP_h plus residual, then concat
    for head in 0..4 {
        for c in 2 * head..2 * head + 2 {
            for po in 0..4 {
                let mixed: f64 = (0..4).map(|pi| pooled[c][pi] * weight.at(&[head, pi, po])).sum::<f64>()
                    + bias.at(&[head, 0, po]);
                let want = mixed + pooled[c][po];
                assert!((out.at(&[po, c]) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn position_mix_rejects_head_ratio_mismatch() {
    let err = LawinConfig::ablation(2, 2, 1, 4, Mixing::default()).unwrap_err();
    assert!(err.to_string().contains("R²"), "{err}");
    assert!(LawinConfig::ablation(2, 2, 1, 4, Mixing::NONE).is_ok());
}

#[test]
fn head_count_law() {
    assert!(LawinConfig::with_heads(8, 2, 4, 64).is_ok());
    let err = LawinConfig::with_heads(8, 2, 8, 64).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("R²"));
    for r in [2, 4, 8] {
        assert_eq!(LawinConfig::new(8, r, 512).unwrap().heads, r * r);
    }
    assert!(LawinConfig::new(8, 8, 96).is_err());
}

#[test]
fn unit_ratio_zero_mix_is_bitwise_local() {
    let cfg = LawinConfig::new(2, 1, 4).unwrap();
    assert_eq!(cfg.heads, 1);
    let mut fx = Fixture::random(4, 6, 4, &cfg, 8);
    fx.pos_mix = Some((Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 1, 4])));
    assert!(fx.lawin(&cfg).bit_eq(&fx.local(&cfg)));
}

#[test]
fn zero_query_projection_gives_uniform_attention() {
    let cfg = LawinConfig::new(2, 2, 4).unwrap();
    let mut fx = Fixture::random(4, 4, 4, &cfg, 9);
    fx.attn[0] = Tensor::zeros(&[4, 4]);
    let (store, aw, mix) = fx.store(&cfg);
    let mut s = Session::new(&store, false);
    let w = aw.bind(&mut s);
    let mix = mix.bind(&mut s);
    let x = s.constant(fx.x.clone());
    let trace = large_window_attention_traced(&mut s, x, &w, &mix, &cfg).unwrap();
    let attn = s.value(trace.attention);
    assert!(attn.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));

    let ctx = s.value(trace.context).clone();
    let out = s.value(trace.output).clone();
    let [_, _, wv, wo] = &fx.attn;
    for win in 0..4 {
        // mean over context positions of (Cᴾ W_v), then W_mha
        let mean_v: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|p| (0..4).map(|i| ctx.at(&[win, p, i]) * wv.at(&[i, j])).sum::<f64>()).sum::<f64>() / 4.0)
            .collect();
        let proj: Vec<f64> = (0..4).map(|c| (0..4).map(|j| mean_v[j] * wo.at(&[j, c])).sum()).collect();
        let (wy, wx) = (win / 2, win % 2);
        for pos in 0..4 {
            let (r, c) = (wy * 2 + pos / 2, wx * 2 + pos % 2);
            for ch in 0..4 {
                let want = fx.x.at(&[ch, r, c]) + proj[ch];
                assert!((out.at(&[ch, r, c]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lawin_matches_loop_oracle() {
    for (seed, ratio) in [(1, 2), (2, 4), (3, 1)] {
        let cfg = LawinConfig::new(2, ratio, 16).unwrap();
        let fx = Fixture::random(16, 8, 8, &cfg, seed);
        let want = oracle_attention(&fx.x, &fx.oracle_weights(), &cfg).unwrap();
        assert!(fx.lawin(&cfg).max_abs_diff(&want) < 1e-6, "ratio {ratio}");
    }
}

#[test]
fn lawin_preserves_shape_for_any_extent() {
    for ratio in [1, 2, 4, 8] {
        let cfg = LawinConfig::new(2, ratio, 64).unwrap();
        for (h, w) in [(5, 7), (3, 3), (8, 6)] {
            let fx = Fixture::random(64, h, w, &cfg, (h * w) as u64);
            let y = fx.lawin(&cfg);
            assert_eq!(y.shape(), &[64, h, w]);
            assert!(y.is_finite());
        }
    }
}

#[test]
fn attention_matrix_is_patch_area_square_for_every_ratio() {
    for ratio in [1, 2, 4, 8] {
        let cfg = LawinConfig::new(2, ratio, 64).unwrap();
        let fx = Fixture::random(64, 4, 4, &cfg, 4);
        let (store, aw, mix) = fx.store(&cfg);
        let mut s = Session::new(&store, false);
        let w = aw.bind(&mut s);
        let mix = mix.bind(&mut s);
        let x = s.constant(fx.x.clone());
        let trace = large_window_attention_traced(&mut s, x, &w, &mix, &cfg).unwrap();
        assert_eq!(s.shape(trace.attention), &[4, ratio * ratio, 4, 4]);
    }
}

#[test]
fn window_order_permutation_is_equivariant() {
    let cfg = LawinConfig::new(2, 2, 8).unwrap();
    let fx = Fixture::random(8, 6, 6, &cfg, 12);
    let (store, aw, _) = fx.store(&cfg);
    let mut s = Session::new(&store, false);
    let w = aw.bind(&mut s);
    let x = s.constant(fx.x.clone());
    let tokens = window_partition(&mut s, x, 2).unwrap();
    let ctx = s.constant(Tensor::from_fn(&[9, 4, 8], |i| ((i[0] * 31 + i[1] * 7 + i[2]) % 13) as f64 / 13.0));
    let (base, _) = window_mha(&mut s, tokens, ctx, &w, cfg.heads).unwrap();

    let order = [4usize, 0, 8, 2, 7, 1, 6, 3, 5];
    let pick = |s: &mut Session, v: Var| {
        let parts: Vec<Var> = order.iter().map(|&i| s.slice(v, 0, i, 1).unwrap()).collect();
        s.concat(&parts, 0).unwrap()
    };
    let (pt, pc) = (pick(&mut s, tokens), pick(&mut s, ctx));
    let (shuffled, _) = window_mha(&mut s, pt, pc, &w, cfg.heads).unwrap();
    let (b, sh) = (s.value(base).clone(), s.value(shuffled).clone());
    for (slot, &i) in order.iter().enumerate() {
        let stride = 4 * 8;
        assert_eq!(&sh.data()[slot * stride..(slot + 1) * stride], &b.data()[i * stride..(i + 1) * stride]);
    }
}

fn mlp(x: Tensor, w1: Tensor, w2: Tensor, channel: bool) -> Tensor {
    let mut store = ParamStore::new();
    let mw = MlpWeights::from_tensors(&mut store, "mlp", w1, w2).unwrap();
    let mut s = Session::new(&store, false);
    let mw = mw.bind(&mut s);
    let x = s.constant(x);
    let y = if channel {
        channel_mixing_mlp(&mut s, x, &mw, Activation::Gelu)
    } else {
        token_mixing_mlp(&mut s, x, &mw, Activation::Gelu)
    }
    .unwrap();
    s.value(y).clone()
}

#[test]
fn zero_mixing_mlps_are_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&[3, 2, 2], &mut rng, 1.0);
    let r = random(&[4, 5], &mut rng, 1.0);
    assert!(mlp(x.clone(), Tensor::zeros(&[4, 5]), random(&[5, 4], &mut rng, 1.0), false).bit_eq(&x));
    assert!(mlp(x.clone(), r, Tensor::zeros(&[5, 4]), false).bit_eq(&x));
    assert!(mlp(x.clone(), Tensor::zeros(&[3, 5]), random(&[5, 3], &mut rng, 1.0), true).bit_eq(&x));
    assert!(mlp(x.clone(), random(&[3, 5], &mut rng, 1.0), Tensor::zeros(&[5, 3]), true).bit_eq(&x));
}

#[test]
fn scalar_mixing_mlps_add_gelu() {
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
    for channel in [false, true] {
        let x = Tensor::new(&[1, 1, 1], vec![0.7]).unwrap();
        let one = Tensor::ones(&[1, 1]);
        let y = mlp(x, one.clone(), one, channel);
        assert!((y.data()[0] - (0.7 + gelu(0.7))).abs() < 1e-15);
    }
}

#[test]
fn mixing_mlps_match_flattened_oracle() {
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[2, 2, 2], &mut rng, 1.0);
    let w1 = random(&[4, 3], &mut rng, 1.0);
    let w2 = random(&[3, 4], &mut rng, 1.0);
    let y = mlp(x.clone(), w1.clone(), w2.clone(), false);
    for c in 0..2 {
        let row: Vec<f64> = x.data()[c * 4..c * 4 + 4].to_vec();
        let hid: Vec<f64> = (0..3).map(|j| gelu((0..4).map(|i| row[i] * w1.at(&[i, j])).sum())).collect();
        for p in 0..4 {
            let want = row[p] + (0..3).map(|j| hid[j] * w2.at(&[j, p])).sum::<f64>();
            assert!((y.data()[c * 4 + p] - want).abs() < 1e-6);
        }
    }

    // transposed: the same computation along channels
    let w1 = random(&[2, 3], &mut rng, 1.0);
    let w2 = random(&[3, 2], &mut rng, 1.0);
    let y = mlp(x.clone(), w1.clone(), w2.clone(), true);
    for p in 0..4 {
        let col: Vec<f64> = (0..2).map(|c| x.data()[c * 4 + p]).collect();
        let hid: Vec<f64> = (0..3).map(|j| gelu((0..2).map(|i| col[i] * w1.at(&[i, j])).sum())).collect();
        for c in 0..2 {
            let want = col[c] + (0..3).map(|j| hid[j] * w2.at(&[j, c])).sum::<f64>();
            assert!((y.data()[c * 4 + p] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn token_mixing_rejects_wrong_extent() {
    let mut store = ParamStore::new();
    let mw = MlpWeights::from_tensors(&mut store, "m", Tensor::zeros(&[5, 2]), Tensor::zeros(&[2, 5])).unwrap();
    let mut s = Session::new(&store, false);
    let mw = mw.bind(&mut s);
    let x = s.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(
        token_mixing_mlp(&mut s, x, &mw, Activation::Gelu),
        Err(Error::ShapeMismatch { .. })
    ));
}

fn grad_cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

#[test]
fn local_attention_gradients() {
    let cfg = LawinConfig::local(2, 2, 4).unwrap();
    let fx = Fixture::random(4, 4, 4, &cfg, 40);
    let mut inputs = vec![fx.x.clone()];
    inputs.extend(fx.attn.iter().cloned());
    let report = check_gradients(&inputs, &grad_cfg(), |g, v| {
        let w = AttentionWeights {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            w_mha: v[4],
        };
        let y = local_window_attention(g, v[0], &w, &cfg)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn large_attention_gradients() {
    let cfg = LawinConfig::new(2, 2, 4).unwrap();
    let fx = Fixture::random(4, 3, 5, &cfg, 41);
    let (pw, pb) = fx.pos_mix.clone().unwrap();
    let mut inputs = vec![fx.x.clone()];
    inputs.extend(fx.attn.iter().cloned());
    inputs.extend([pw, pb]);
    let report = check_gradients(&inputs, &grad_cfg(), |g, v| {
        let w = AttentionWeights {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            w_mha: v[4],
        };
        let mix = ContextMixWeights {
            position: Some(PositionMixWeights { weight: v[5], bias: v[6] }),
            channel: None,
        };
        let y = large_window_attention(g, v[0], &w, &mix, &cfg)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn mixing_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let inputs = [
        random(&[3, 2, 2], &mut rng, 1.0),
        random(&[4, 5], &mut rng, 1.0),
        random(&[5, 4], &mut rng, 1.0),
        random(&[3, 2], &mut rng, 1.0),
        random(&[2, 3], &mut rng, 1.0),
    ];
    let report = check_gradients(&inputs, &grad_cfg(), |g, v| {
        let t = token_mixing_mlp(g, v[0], &MlpWeights { w1: v[1], w2: v[2] }, Activation::Gelu)?;
        let c = channel_mixing_mlp(g, t, &MlpWeights { w1: v[3], w2: v[4] }, Activation::Gelu)?;
        let sq = g.mul(c, c)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn channel_mixed_context_gradients() {
    let cfg = LawinConfig::ablation(
        2,
        2,
        4,
        4,
        Mixing {
            position: true,
            channel: true,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let inputs = [
        random(&[4, 4, 4], &mut rng, 1.0),
        random(&[4, 4, 4], &mut rng, 0.5),
        random(&[4, 1, 4], &mut rng, 0.5),
        random(&[4, 4], &mut rng, 0.5),
        random(&[4, 4], &mut rng, 0.5),
    ];
    let attn = [(); 4].map(|_| random(&[4, 4], &mut rng, 0.5));
    let report = check_gradients(&inputs, &grad_cfg(), |g, v| {
        let ws: Vec<Var> = attn.iter().map(|t| g.constant(t.clone())).collect();
        let w = AttentionWeights {
            w_q: ws[0],
            w_k: ws[1],
            w_v: ws[2],
            w_mha: ws[3],
        };
        let mix = ContextMixWeights {
            position: Some(PositionMixWeights { weight: v[1], bias: v[2] }),
            channel: Some(MlpWeights { w1: v[3], w2: v[4] }),
        };
        let y = large_window_attention(g, v[0], &w, &mix, &cfg)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
