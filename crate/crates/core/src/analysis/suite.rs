//! The verification suite run by `lawin check`: oracle equivalences,
//! gradient checks, cost-model identities and structural properties.
//! `Quick` uses fewer random cases and skips the training runs.

// `!(x < tol)` also fails on NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flops::{flops_large_window, flops_local_window, measure_large_attention, measure_local_attention, ratio_sweep};
use super::gradcheck::{check_gradients, check_param_gradients, GradCheckConfig};
use super::oracle::*;
use crate::aspp::{aggregate_levels, lawin_aspp_forward, DecoderWeights, FeaturePyramid, PyramidConfig};
use crate::attention::*;
use crate::autodiff::{Graph, Var};
use crate::data::{synthesize, SynthConfig};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::params::{ParamStore, Session};
use crate::segmenter::{train, ConfusionMatrix, ModelConfig, Segmenter, ToyEncoderConfig, TrainConfig, TrainOptions};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    fn cases(self, quick: usize, full: usize) -> usize {
        match self {
            Level::Quick => quick,
            Level::Full => full,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(Level) -> Result<String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(Error::Invalid(format!($($fmt)+)));
        }
    };
}

/// Every check in run order.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul_oracle", matmul),
        ("softmax_values", softmax),
        ("avg_pool_ramp", avg_pool),
        ("bilinear_resize", bilinear),
        ("window_partition", partition),
        ("local_attention_oracle", local_oracle),
        ("context_centering", centering),
        ("position_mix_oracle", position_mix),
        ("large_attention_oracle", lawin_oracle),
        ("mixing_mlp_oracle", mixing_mlps),
        ("aggregate_oracle", aggregate),
        ("lawin_aspp_oracle", lawin_aspp),
        ("segmenter_output_stride", segmenter_shape),
        ("cross_entropy_oracle", cross_entropy),
        ("miou_counts", miou),
        ("flops_closed_form", flops_closed_form),
        ("flops_measured", flops_measured),
        ("flops_ratio_sweep", flops_sweep),
        ("degenerate_identities", degeneracies),
        ("pyramid_structure", structure),
        ("op_gradients", op_gradients),
        ("end_to_end_gradients", end_to_end_gradients),
        ("training_determinism", determinism),
        ("single_sample_overfit", overfit),
    ]
}

/// Runs every check, reporting each result to `on_result` as it finishes.
pub fn run_suite(level: Level, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    checks()
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let out = std::panic::catch_unwind(|| f(level));
            let (passed, detail) = match out {
                Ok(Ok(d)) => (true, d),
                Ok(Err(e)) => (false, e.to_string()),
                Err(_) => (false, "panicked".into()),
            };
            let r = CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_result(&r);
            r
        })
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn run1(x: Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Random weights for one attention block, usable by both the kernels and the oracle.
struct Case {
    x: Tensor,
    oracle: OracleWeights,
}

impl Case {
    fn random(c: usize, h: usize, w: usize, cfg: &LawinConfig, rng: &mut ChaCha8Rng) -> Self {
        let x = random(&[c, h, w], rng, 1.0);
        let [w_q, w_k, w_v, w_mha] = [(); 4].map(|_| random(&[c, c], rng, 0.5));
        let p2 = cfg.patch * cfg.patch;
        let position_mix = cfg
            .mixing
            .position
            .then(|| (random(&[cfg.heads, p2, p2], rng, 0.5), random(&[cfg.heads, 1, p2], rng, 0.5)));
        Case {
            x,
            oracle: OracleWeights {
                w_q,
                w_k,
                w_v,
                w_mha,
                position_mix,
            },
        }
    }

    fn run(&self, cfg: &LawinConfig, large: bool) -> Result<Tensor> {
        let o = &self.oracle;
        let mut store = ParamStore::new();
        let aw = AttentionWeights::from_tensors(&mut store, "attn", [o.w_q.clone(), o.w_k.clone(), o.w_v.clone(), o.w_mha.clone()])?;
        let position = match &o.position_mix {
            Some((w, b)) => Some(PositionMixWeights::from_tensors(&mut store, "pm", cfg, w.clone(), b.clone())?),
            None => None,
        };
        let mix = ContextMixWeights { position, channel: None };
        let mut s = Session::new(&store, false);
        let w = aw.bind(&mut s);
        let mix = mix.bind(&mut s);
        let x = s.constant(self.x.clone());
        let y = if large {
            large_window_attention(&mut s, x, &w, &mix, cfg)?
        } else {
            local_window_attention(&mut s, x, &w, cfg)?
        };
        Ok(s.value(y).clone())
    }
}

fn matmul(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = level.cases(20, 200);
    for _ in 0..n {
        let (m, k, p) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let (a, b) = (random(&[m, k], &mut rng, 1.0), random(&[k, p], &mut rng, 1.0));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb)?;
        let want = matmul_oracle(&a, &b);
        let ok = g.value(y).data().iter().zip(want.data()).all(|(x, w)| (x - w).abs() <= 1e-12 * w.abs().max(1.0));
        ensure!(ok, "{m}x{k}x{p} product differs from the triple loop");
    }
    Ok(format!("{n} random products"))
}

fn softmax(_: Level) -> Result<String> {
    let y = run1(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0])?, |g, x| g.softmax(x))?;
    let want = [0.09003, 0.24473, 0.66524];
    let err = y.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(err < 5e-6, "softmax([1,2,3]) = {:?}", y.data());
    Ok(format!("max error {err:.1e}"))
}

fn avg_pool(_: Level) -> Result<String> {
    let y = run1(Tensor::arange(&[1, 4, 4]), |g, x| g.avg_pool2d(x, 2))?;
    ensure!(y.data() == [2.5, 4.5, 10.5, 12.5], "pooled ramp {:?}", y.data());
    Ok("ramp pooled blockwise".into())
}

fn bilinear(level: Level) -> Result<String> {
    let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0])?;
    let y = run1(x, |g, v| g.bilinear_resize(v, 2, 4))?;
    ensure!(y.data() == [0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0], "rows {:?}", y.data());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..level.cases(5, 50) {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (oh, ow) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let x = random(&[2, h, w], &mut rng, 1.0);
        let y = run1(x.clone(), |g, v| g.bilinear_resize(v, oh, ow))?;
        let err = y.max_abs_diff(&resize_oracle(&x, oh, ow));
        ensure!(err < 1e-12, "{h}x{w} -> {oh}x{ow}: error {err:e}");
    }
    Ok("hand example and random resizes".into())
}

fn partition(_: Level) -> Result<String> {
    let w = run1(Tensor::arange(&[1, 4, 4]), |g, x| window_partition(g, x, 2))?;
    ensure!(w.shape() == [4, 4, 1], "shape {:?}", w.shape());
    ensure!(w.data()[..4] == [0.0, 1.0, 4.0, 5.0], "window 0 {:?}", &w.data()[..4]);
    let back = run1(w, |g, v| window_unpartition(g, v, 2, 4, 4))?;
    ensure!(back.bit_eq(&Tensor::arange(&[1, 4, 4])), "roundtrip changed values");
    Ok("4 windows, window 0 = [0,1,4,5]".into())
}

fn random_cfg(rng: &mut ChaCha8Rng, ratio: usize) -> Result<(LawinConfig, usize, usize)> {
    let patch = [1, 2, 4][rng.gen_range(0..3)];
    let heads = ratio * ratio;
    let dim = heads * rng.gen_range(1..3);
    let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let cfg = if ratio == 0 {
        LawinConfig::local(patch, 1, dim.max(1))?
    } else {
        LawinConfig::new(patch, ratio, dim)?
    };
    Ok((cfg, h, w))
}

fn local_oracle(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = level.cases(20, 100);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (cfg, h, w) = random_cfg(&mut rng, 1)?;
        let cfg = LawinConfig::local(cfg.patch, [1, 2][rng.gen_range(0..2)].min(cfg.dim), cfg.dim)?;
        let (h, w) = (h.next_multiple_of(cfg.patch), w.next_multiple_of(cfg.patch));
        let case = Case::random(cfg.dim, h, w, &cfg, &mut rng);
        let err = case.run(&cfg, false)?.max_abs_diff(&oracle_attention(&case.x, &case.oracle, &cfg)?);
        ensure!(err < 1e-6, "P={} {h}x{w}: error {err:e}", cfg.patch);
        worst = worst.max(err);
    }
    Ok(format!("{n} cases, max error {worst:.1e}"))
}

fn centering(_: Level) -> Result<String> {
    let cfg = LawinConfig::new(1, 2, 4)?;
    let x = Tensor::arange(&[1, 4, 4]).map(|v| v + 1.0);
    let ctx = run1(x, |g, v| {
        let p = pad_for_context(g, v, &cfg)?;
        extract_context(g, p, 5, &cfg)
    })?;
    ensure!(ctx.data() == [1.0, 2.0, 5.0, 6.0], "context of (1,1) is {:?}", ctx.data());
    Ok("query (1,1) sees rows/cols {0,1}".into())
}

fn position_mix(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..level.cases(5, 40) {
        let (patch, ratio) = ([1, 2, 3][rng.gen_range(0..3)], [1, 2][rng.gen_range(0..2)]);
        let cfg = LawinConfig::new(patch, ratio, ratio * ratio * 2)?;
        let side = patch * ratio;
        let p2 = patch * patch;
        let ctx = random(&[cfg.dim, side, side], &mut rng, 1.0);
        let (w, b) = (random(&[cfg.heads, p2, p2], &mut rng, 1.0), random(&[cfg.heads, 1, p2], &mut rng, 1.0));
        let mut store = ParamStore::new();
        let pm = PositionMixWeights::from_tensors(&mut store, "pm", &cfg, w.clone(), b.clone())?;
        let mut s = Session::new(&store, false);
        let pm = pm.bind(&mut s);
        let c = s.constant(ctx.clone());
        let y = position_mix_context(&mut s, c, &pm, &cfg)?;
        let err = s.value(y).max_abs_diff(&position_mix_oracle(&ctx, &w, &b, &cfg));
        ensure!(err < 1e-6, "P={patch} R={ratio}: error {err:e}");
    }
    Ok("matches explicit pool, per-head mix and concat".into())
}

fn lawin_oracle(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = level.cases(21, 99);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let ratio = [1, 2, 4][i % 3];
        let (cfg, h, w) = random_cfg(&mut rng, ratio)?;
        let case = Case::random(cfg.dim, h, w, &cfg, &mut rng);
        let err = case.run(&cfg, true)?.max_abs_diff(&oracle_attention(&case.x, &case.oracle, &cfg)?);
        ensure!(err < 1e-6, "P={} R={ratio} {h}x{w}: error {err:e}", cfg.patch);
        worst = worst.max(err);
    }
    Ok(format!("{n} cases over R in {{1,2,4}}, max error {worst:.1e}"))
}

fn mlp_run(x: &Tensor, w1: &Tensor, w2: &Tensor, channel: bool) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let mw = MlpWeights::from_tensors(&mut store, "mlp", w1.clone(), w2.clone())?;
    let mut s = Session::new(&store, false);
    let mw = mw.bind(&mut s);
    let v = s.constant(x.clone());
    let y = if channel {
        channel_mixing_mlp(&mut s, v, &mw, Activation::Gelu)?
    } else {
        token_mixing_mlp(&mut s, v, &mw, Activation::Gelu)?
    };
    Ok(s.value(y).clone())
}

fn mixing_mlps(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..level.cases(5, 40) {
        let (c, h, w, hidden) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
        let x = random(&[c, h, w], &mut rng, 1.0);
        for channel in [false, true] {
            let n = if channel { c } else { h * w };
            let (w1, w2) = (random(&[n, hidden], &mut rng, 1.0), random(&[hidden, n], &mut rng, 1.0));
            let err = mlp_run(&x, &w1, &w2, channel)?.max_abs_diff(&mlp_oracle(&x, &w1, &w2, channel));
            ensure!(err < 1e-6, "{c}x{h}x{w} channel={channel}: error {err:e}");
        }
    }
    Ok("token and channel mixing match the flattened oracle".into())
}

fn aggregate(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..level.cases(3, 20) {
        let ch: [usize; 4] = [(); 4].map(|_| rng.gen_range(1..5));
        let h4 = [8, 16][rng.gen_range(0..2)];
        let t = [0, 1, 2, 3].map(|i| random(&[ch[i], h4 >> i, h4 >> i], &mut rng, 1.0));
        let cin = ch[1] + ch[2] + ch[3];
        let (w, b) = (random(&[5, cin], &mut rng, 1.0), random(&[5, 1], &mut rng, 1.0));
        let mut store = ParamStore::new();
        let l = Linear::from_tensors(&mut store, "agg", w.clone(), b.clone())?;
        let mut s = Session::new(&store, false);
        let l = l.bind(&mut s);
        let pyr = FeaturePyramid {
            levels: [0, 1, 2, 3].map(|i| s.constant(t[i].clone())),
        };
        let y = aggregate_levels(&mut s, &pyr, &l)?;
        let h8 = h4 / 2;
        let cat = concat_oracle(&[t[1].clone(), resize_oracle(&t[2], h8, h8), resize_oracle(&t[3], h8, h8)]);
        let err = s.value(y).max_abs_diff(&linear_oracle(&cat, &w, &b));
        ensure!(err < 1e-6, "error {err:e}");
    }
    Ok("resize, concat and projection match".into())
}

fn lawin_aspp(_: Level) -> Result<String> {
    let cfg = PyramidConfig {
        dim: 64,
        ..PyramidConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights = DecoderWeights::init(&mut store, "decoder", &cfg, [4; 4], &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random(&shape, &mut rng, 0.1);
        }
    }
    let x = random(&[64, 16, 16], &mut rng, 1.0);
    let aspp = weights.aspp.as_ref().ok_or_else(|| Error::Invalid("no pyramid weights".into()))?;
    let got = {
        let mut s = Session::new(&store, false);
        let w = weights.bind(&mut s);
        let v = s.constant(x.clone());
        let y = lawin_aspp_forward(&mut s, v, &cfg, w.aspp.as_ref().expect("lawin decoder"))?;
        s.value(y).clone()
    };
    let mut parts = vec![x.clone()];
    for (i, bc) in cfg.branch_configs()? {
        let br = aspp.branches[i].ok_or_else(|| Error::Invalid(format!("branch {i} missing")))?;
        let pm = br.mix.position.ok_or_else(|| Error::Invalid("position mix missing".into()))?;
        let w = OracleWeights {
            w_q: store.get(br.attn.w_q).clone(),
            w_k: store.get(br.attn.w_k).clone(),
            w_v: store.get(br.attn.w_v).clone(),
            w_mha: store.get(br.attn.w_mha).clone(),
            position_mix: Some((store.get(pm.weight).clone(), store.get(pm.bias).clone())),
        };
        parts.push(oracle_attention(&x, &w, &bc)?);
    }
    let ip = aspp.image_pool.ok_or_else(|| Error::Invalid("image pool missing".into()))?;
    let means = Tensor::from_fn(&[64, 1, 1], |i| x.data()[i[0] * 256..(i[0] + 1) * 256].iter().sum::<f64>() / 256.0);
    let pooled = linear_oracle(&means, store.get(ip.weight), store.get(ip.bias));
    parts.push(Tensor::from_fn(&[64, 16, 16], |i| pooled.data()[i[0]]));
    let want = linear_oracle(&concat_oracle(&parts), store.get(aspp.reduce.weight), store.get(aspp.reduce.bias));
    let err = got.max_abs_diff(&want);
    ensure!(err < 1e-6, "error {err:e}");
    Ok(format!("five branches at D=64 on 16x16, max error {err:.1e}"))
}

fn segmenter_shape(_: Level) -> Result<String> {
    let model = Segmenter::new(ModelConfig::desk(3), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = model.logits(&random(&[3, 32, 32], &mut rng, 1.0))?;
    ensure!(logits.shape() == [3, 8, 8], "logits shape {:?}", logits.shape());
    Ok("32x32 image gives [3, 8, 8] logits".into())
}

fn cross_entropy(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..level.cases(5, 50) {
        let (k, h, w) = (rng.gen_range(2..6), rng.gen_range(1..5), rng.gen_range(1..5));
        let logits = random(&[k, h, w], &mut rng, 4.0);
        let labels: Vec<usize> = (0..h * w).map(|_| if rng.gen_bool(0.2) { 255 } else { rng.gen_range(0..k) }).collect();
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let loss = g.cross_entropy(l, &labels, 255)?;
        let got = g.value(loss).item()?;
        let want = cross_entropy_oracle(&logits, &labels, 255);
        ensure!((got - want).abs() < 1e-10, "loss {got} vs per-pixel {want}");
    }
    let uniform = run1(Tensor::zeros(&[4, 2, 2]), |g, x| g.cross_entropy(x, &[0, 1, 2, 3], 255))?;
    ensure!((uniform.item()? - 4f64.ln()).abs() < 1e-12, "uniform logits give {}", uniform.data()[0]);
    Ok("matches per-pixel evaluation".into())
}

fn miou(_: Level) -> Result<String> {
    let mut m = ConfusionMatrix::new(3);
    m.add_count(0, 0, 3);
    m.add_count(2, 0, 1);
    m.add_count(0, 2, 1);
    m.add_count(1, 1, 2);
    m.add_count(1, 2, 2);
    let (a, b) = (m.iou(0).unwrap_or(f64::NAN), m.iou(1).unwrap_or(f64::NAN));
    ensure!((a - 0.6).abs() < 1e-15 && (b - 0.5).abs() < 1e-15, "IoU {a}, {b}");
    ensure!(((a + b) / 2.0 - 0.55).abs() < 1e-15, "mean {}", (a + b) / 2.0);
    Ok("IoU 0.6 and 0.5, mean 0.55".into())
}

fn flops_closed_form(level: Level) -> Result<String> {
    ensure!(flops_local_window(1, 1, 1, 1) == 6 && flops_large_window(1, 1, 1, 1) == 7, "unit case");
    ensure!(flops_local_window(128, 128, 512, 8) == 18_253_611_008, "local at 128x128x512, P=8");
    ensure!(flops_large_window(128, 128, 512, 8) == 18_790_481_920, "large at 128x128x512, P=8");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..level.cases(100, 10_000) {
        let [h, w, c, p] = [(); 4].map(|_| rng.gen_range(1..=1u64 << 16));
        let (hw, c2, p2) = (h as u128 * w as u128, c as u128 * c as u128, p as u128 * p as u128);
        ensure!(flops_local_window(h, w, c, p) == 4 * hw * c2 + 2 * hw * p2 * c as u128, "local ({h},{w},{c},{p})");
        let diff = flops_large_window(h, w, c, p) - flops_local_window(h, w, c, p);
        ensure!(diff == hw * p2 * c as u128, "difference at ({h},{w},{c},{p})");
    }
    Ok("unit, reference and random tuples agree".into())
}

fn flops_measured(_: Level) -> Result<String> {
    let (h, w, c, p) = (16, 16, 16, 4);
    let local = measure_local_attention(h, w, &LawinConfig::local(p, 1, c)?, 0)?;
    let want = flops_local_window(h as u64, w as u64, c as u64, p as u64);
    ensure!(local.matmul_macs as u128 == want, "local measured {} vs {want}", local.matmul_macs);
    for r in [1, 2, 4] {
        let m = measure_large_attention(h, w, &LawinConfig::new(p, r, c)?, 0)?;
        let want = flops_large_window(h as u64, w as u64, c as u64, p as u64);
        ensure!(m.matmul_macs as u128 == want, "R={r}: measured {} vs {want}", m.matmul_macs);
    }
    Ok("instrumented MACs equal the closed forms".into())
}

fn flops_sweep(_: Level) -> Result<String> {
    let sweep = ratio_sweep(32, 32, 64, 8, &[2, 4, 8])?;
    let macs: Vec<u64> = sweep.iter().map(|(_, c)| c.matmul_macs).collect();
    ensure!(macs.windows(2).all(|p| p[0] == p[1]), "MACs per ratio {macs:?}");
    Ok(format!("{} MACs for R in {{2,4,8}}", macs[0]))
}

fn degeneracies(_: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LawinConfig::new(2, 1, 4)?;
    let mut case = Case::random(4, 6, 4, &cfg, &mut rng);
    case.oracle.position_mix = Some((Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 1, 4])));
    ensure!(case.run(&cfg, true)?.bit_eq(&case.run(&cfg, false)?), "R=1 with zero mixing differs from local");

    let x = random(&[3, 2, 2], &mut rng, 1.0);
    let r = random(&[4, 5], &mut rng, 1.0);
    ensure!(mlp_run(&x, &Tensor::zeros(&[4, 5]), &r.reshape(&[5, 4])?, false)?.bit_eq(&x), "zero token mixing");
    ensure!(mlp_run(&x, &r.reshape(&[4, 5])?, &Tensor::zeros(&[5, 4]), false)?.bit_eq(&x), "zero token mixing");
    let r3 = random(&[3, 5], &mut rng, 1.0);
    ensure!(mlp_run(&x, &Tensor::zeros(&[3, 5]), &r3.reshape(&[5, 3])?, true)?.bit_eq(&x), "zero channel mixing");

    let cfg = LawinConfig::new(2, 2, 4)?;
    let ctx = random(&[4, 4, 4], &mut rng, 1.0);
    let mut store = ParamStore::new();
    let pm = PositionMixWeights::from_tensors(&mut store, "pm", &cfg, Tensor::zeros(&[4, 4, 4]), Tensor::zeros(&[4, 1, 4]))?;
    let mut s = Session::new(&store, false);
    let pm = pm.bind(&mut s);
    let c = s.constant(ctx.clone());
    let mixed = position_mix_context(&mut s, c, &pm, &cfg)?;
    let pooled = run1(ctx, |g, v| {
        let p = g.avg_pool2d(v, 2)?;
        let r = g.reshape(p, &[4, 4])?;
        g.transpose(r)
    })?;
    ensure!(s.value(mixed).bit_eq(&pooled), "zero position mixing is not the pooled context");
    Ok("R=1 is local; zero mixing blocks are identities".into())
}

fn structure(_: Level) -> Result<String> {
    let cfg = PyramidConfig::default();
    cfg.validate()?;
    ensure!(cfg.num_branches() == 5, "{} branches", cfg.num_branches());
    let heads: Vec<usize> = cfg.branch_configs()?.iter().map(|(_, c)| c.heads).collect();
    ensure!(heads == [4, 16, 64], "heads {heads:?}");
    ensure!(cfg.receptive_fields() == [16, 32, 64], "receptive fields {:?}", cfg.receptive_fields());
    ensure!(LawinConfig::with_heads(8, 2, 8, 64).is_err(), "h != R² accepted");

    let build = |cfg: &PyramidConfig| -> Result<ParamStore> {
        let mut store = ParamStore::new();
        DecoderWeights::init(&mut store, "decoder", cfg, [8, 8, 16, 16], &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(store)
    };
    let small = PyramidConfig {
        patch: 2,
        ratios: vec![1, 2, 4],
        dim: 32,
        num_classes: 3,
        ..PyramidConfig::default()
    };
    let full = build(&small)?;
    let reduce_row = 32 * 32;
    for i in 0..3 {
        let mut enable = vec![true; 3];
        enable[i] = false;
        let name = format!("decoder.aspp.r{}", small.ratios[i]);
        let reduced = build(&PyramidConfig {
            enable_ratios: enable,
            ..small.clone()
        })?;
        let branch = full.num_scalars_with_prefix(&name);
        ensure!(branch > 0 && reduced.num_scalars_with_prefix(&name) == 0, "{name} not removed");
        ensure!(reduced.num_scalars() == full.num_scalars() - branch - reduce_row, "{name} removed other parameters");
    }
    let no_pool = build(&PyramidConfig {
        enable_image_pool: false,
        ..small.clone()
    })?;
    let pool = full.num_scalars_with_prefix("decoder.aspp.image_pool");
    ensure!(no_pool.num_scalars() == full.num_scalars() - pool - reduce_row, "image pool toggle");
    let no_shortcut = build(&PyramidConfig {
        enable_shortcut: false,
        ..small
    })?;
    ensure!(no_shortcut.num_scalars() == full.num_scalars() - reduce_row, "shortcut toggle");
    Ok("five branches, heads (4,16,64), fields (16,32,64), toggles exact".into())
}

fn grad_cfg(rel_tol: f64) -> GradCheckConfig {
    GradCheckConfig {
        rel_tol,
        ..GradCheckConfig::default()
    }
}

fn op_gradients(level: Level) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = grad_cfg(1e-4);
    let mut probes = 0;
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let report = check_gradients(&inputs, &cfg, |g, v| {
            let y = f(g, v)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })?;
        probes += report.probes;
        ensure!(report.passed(), "{name}: {:?}", report.failures.first());
        Ok(())
    };
    let r = &mut rng;
    run("matmul", vec![random(&[3, 4], r, 1.0), random(&[4, 2], r, 1.0)], &|g, v| g.matmul(v[0], v[1]))?;
    run("softmax", vec![random(&[2, 5], r, 2.0)], &|g, v| g.softmax(v[0]))?;
    run("gelu", vec![random(&[2, 3, 3], r, 2.0)], &|g, v| Ok(g.gelu(v[0])))?;
    run("avg_pool", vec![random(&[2, 4, 6], r, 1.0)], &|g, v| g.avg_pool2d(v[0], 2))?;
    run("bilinear", vec![random(&[2, 3, 2], r, 1.0)], &|g, v| g.bilinear_resize(v[0], 5, 7))?;
    run("unfold", vec![random(&[2, 6, 6], r, 1.0)], &|g, v| g.unfold(v[0], 4, 2))?;
    run("pad_crop", vec![random(&[2, 3, 3], r, 1.0)], &|g, v| {
        let p = g.pad2d(v[0], 1, 2, 0, 1)?;
        g.crop2d(p, 1, 0, 3, 3)
    })?;
    run("permute_concat", vec![random(&[2, 3, 4], r, 1.0), random(&[1, 3, 4], r, 1.0)], &|g, v| {
        let c = g.concat(&[v[0], v[1]], 0)?;
        g.permute(c, &[2, 0, 1])
    })?;
    let labels = [0, 2, 255, 1, 1, 0];
    run("cross_entropy", vec![random(&[3, 2, 3], r, 2.0)], &|g, v| g.cross_entropy(v[0], &labels, 255))?;

    let local = LawinConfig::local(2, 2, 4)?;
    let case = Case::random(4, 4, 4, &local, r);
    let o = &case.oracle;
    let attn = vec![case.x.clone(), o.w_q.clone(), o.w_k.clone(), o.w_v.clone(), o.w_mha.clone()];
    run("local_attention", attn, &|g, v| {
        let w = AttentionWeights {
            w_q: v[1],
            w_k: v[2],
            w_v: v[3],
            w_mha: v[4],
        };
        local_window_attention(g, v[0], &w, &local)
    })?;
    let ratios: &[usize] = match level {
        Level::Quick => &[2],
        Level::Full => &[1, 2],
    };
    for &ratio in ratios {
        let lcfg = LawinConfig::new(2, ratio, 4)?;
        let case = Case::random(4, 3, 5, &lcfg, r);
        let o = &case.oracle;
        let (pw, pb) = o.position_mix.clone().ok_or_else(|| Error::Invalid("no mixing".into()))?;
        let inputs = vec![case.x.clone(), o.w_q.clone(), o.w_k.clone(), o.w_v.clone(), o.w_mha.clone(), pw, pb];
        run("large_attention", inputs, &|g, v| {
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
            large_window_attention(g, v[0], &w, &mix, &lcfg)
        })?;
    }
    let mlp_inputs = vec![
        random(&[3, 2, 2], r, 1.0),
        random(&[4, 5], r, 1.0),
        random(&[5, 4], r, 1.0),
        random(&[3, 2], r, 1.0),
        random(&[2, 3], r, 1.0),
    ];
    run("mixing_mlps", mlp_inputs, &|g, v| {
        let t = token_mixing_mlp(g, v[0], &MlpWeights { w1: v[1], w2: v[2] }, Activation::Gelu)?;
        channel_mixing_mlp(g, t, &MlpWeights { w1: v[3], w2: v[4] }, Activation::Gelu)
    })?;
    Ok(format!("{probes} probes, rel < 1e-4"))
}

/// Tiny encoder and decoder small enough for exhaustive finite differences.
pub fn micro_model_config(ratios: Vec<usize>) -> ModelConfig {
    let n = ratios.len();
    ModelConfig {
        encoder: ToyEncoderConfig {
            widths: [4, 4, 8, 8],
            heads: [1, 1, 2, 2],
            mlp_ratio: 1,
            window: 2,
            ..ToyEncoderConfig::default()
        },
        pyramid: PyramidConfig {
            patch: 2,
            ratios,
            enable_ratios: vec![true; n],
            dim: 8,
            num_classes: 3,
            ..PyramidConfig::default()
        },
    }
}

/// Finite-difference check of every parameter of a micro segmenter under
/// cross-entropy on one synthetic image.
pub fn end_to_end_gradient_report(ratios: Vec<usize>, max_probes: usize, seed: u64) -> Result<super::gradcheck::GradCheckReport> {
    let data = synthesize(&SynthConfig {
        count: 1,
        size: 32,
        num_classes: 3,
        seed,
    })?;
    let sample = &data.samples[0];
    let mut model = Segmenter::new(micro_model_config(ratios), seed)?;
    // weights well away from zero keep deep gradients significant
    let ids: Vec<_> = model.store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let cfg = GradCheckConfig {
        rel_tol: 1e-3,
        max_probes_per_input: max_probes,
        ..GradCheckConfig::default()
    };
    let labels = sample.labels_at(8, 8);
    check_param_gradients(&model.store, &cfg, |s| {
        let x = s.constant(sample.image.clone());
        let logits = model.forward(s, x)?;
        s.cross_entropy(logits, &labels, 255)
    })
}

fn end_to_end_gradients(level: Level) -> Result<String> {
    let probes = level.cases(3, 12);
    let mut total = 0;
    for ratios in [vec![1], vec![2]] {
        let report = end_to_end_gradient_report(ratios.clone(), probes, 3)?;
        ensure!(report.passed(), "R={ratios:?}: {:?}", report.failures.first());
        total += report.probes;
    }
    Ok(format!("{total} parameter probes, rel < 1e-3"))
}

fn determinism(_: Level) -> Result<String> {
    let data = synthesize(&SynthConfig {
        count: 3,
        size: 32,
        num_classes: 3,
        seed: 4,
    })?;
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || -> Result<_> {
        let mut model = Segmenter::new(micro_model_config(vec![1, 2]), cfg.seed)?;
        let hist = train(&mut model, &data, &cfg, &TrainOptions::default(), |_| {})?;
        Ok((hist, crate::checkpoint::encode(&model.store)))
    };
    let (a, b) = (run()?, run()?);
    ensure!(a == b, "two runs with one seed differ");
    Ok("identical losses and checkpoint bytes".into())
}

fn overfit(level: Level) -> Result<String> {
    if level == Level::Quick {
        return Ok("skipped at quick level".into());
    }
    let data = synthesize(&SynthConfig {
        count: 1,
        size: 32,
        num_classes: 3,
        seed: 2,
    })?;
    let mut model = Segmenter::new(ModelConfig::desk(3), 0)?;
    let cfg = TrainConfig {
        lr: 3e-3,
        steps: 150,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let hist = train(&mut model, &data, &cfg, &TrainOptions::default(), |_| {})?;
    let last = hist.last().map_or(f64::NAN, |m| m.loss);
    ensure!(last < 0.05, "final loss {last}");
    Ok(format!("loss {:.3} -> {last:.4}", hist[0].loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let results = run_suite(Level::Quick, |_| {});
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert_eq!(results.len(), checks().len());
    }
}
