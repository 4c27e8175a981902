//! Literal loop implementations of window attention and large window
//! attention, used as references by the test suites and `lawin check`.
//! Nothing here touches the autodiff graph.

#![allow(clippy::needless_range_loop)]

use crate::attention::LawinConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense weights for the oracle; `position_mix` is `(weight [h,P²,P²], bias [h,1,P²])`.
#[derive(Clone, Debug)]
pub struct OracleWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_mha: Tensor,
    pub position_mix: Option<(Tensor, Tensor)>,
}

/// Per-window, per-head, per-position evaluation of (large) window attention
/// with residual. `cfg.ratio == 1` without position mixing is plain local
/// window attention. Channel mixing is not modelled.
pub fn oracle_attention(x: &Tensor, w: &OracleWeights, cfg: &LawinConfig) -> Result<Tensor> {
    let &[c, h, wd] = x.shape() else {
        return Err(Error::Invalid("oracle needs a [C, H, W] map".into()));
    };
    if cfg.mixing.channel {
        return Err(Error::Config("the oracle does not model channel mixing".into()));
    }
    if cfg.mixing.position != w.position_mix.is_some() {
        return Err(Error::Config("position-mix weights do not match the config".into()));
    }
    let (p, r, heads) = (cfg.patch, cfg.ratio, cfg.heads);
    let d = cfg.dim;
    let dh = d / heads;
    let p2 = p * p;
    let side = r * p;
    let (before, _) = cfg.halo();
    let ny = h.div_ceil(p);
    let nx = wd.div_ceil(p);
    let at = |ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
            0.0
        } else {
            x.at(&[ch, y as usize, xx as usize])
        }
    };

    let mut out = x.clone();
    for wy in 0..ny {
        for wx in 0..nx {
            // query tokens [P², C]
            let mut query = vec![vec![0.0; c]; p2];
            for (pos, tok) in query.iter_mut().enumerate() {
                let (y, xx) = ((wy * p + pos / p) as isize, (wx * p + pos % p) as isize);
                for (ch, v) in tok.iter_mut().enumerate() {
                    *v = at(ch, y, xx);
                }
            }

            // pooled context [C][P²]
            let oy = (wy * p) as isize - before as isize;
            let ox = (wx * p) as isize - before as isize;
            let mut pooled = vec![vec![0.0; p2]; c];
            for (ch, row) in pooled.iter_mut().enumerate() {
                for i in 0..p {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for a in 0..r {
                            for b in 0..r {
                                acc += at(ch, oy + (i * r + a) as isize, ox + (j * r + b) as isize);
                            }
                        }
                        row[i * p + j] = acc / (r * r) as f64;
                    }
                }
            }
            debug_assert_eq!(side, r * p);

            let context: Vec<Vec<f64>> = match &w.position_mix {
                Some((mw, mb)) => {
                    let per_head = c / heads;
                    let mut mixed = pooled.clone();
                    for ch in 0..c {
                        let head = ch / per_head;
                        for po in 0..p2 {
                            let mut acc = mb.at(&[head, 0, po]);
                            for pi in 0..p2 {
                                acc += pooled[ch][pi] * mw.at(&[head, pi, po]);
                            }
                            mixed[ch][po] += acc;
                        }
                    }
                    mixed
                }
                None => pooled,
            };
            // context tokens [P², C]
            let ctx_tokens: Vec<Vec<f64>> = (0..p2).map(|pos| (0..c).map(|ch| context[ch][pos]).collect()).collect();

            let project = |tokens: &[Vec<f64>], m: &Tensor| -> Vec<Vec<f64>> {
                tokens
                    .iter()
                    .map(|t| (0..d).map(|j| (0..c).map(|i| t[i] * m.at(&[i, j])).sum()).collect())
                    .collect()
            };
            let q = project(&query, &w.w_q);
            let k = project(&ctx_tokens, &w.w_k);
            let v = project(&ctx_tokens, &w.w_v);

            let mut concat = vec![vec![0.0; d]; p2];
            for head in 0..heads {
                let lo = head * dh;
                for qi in 0..p2 {
                    let mut scores: Vec<f64> = (0..p2)
                        .map(|ki| (lo..lo + dh).map(|e| q[qi][e] * k[ki][e]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for e in lo..lo + dh {
                        concat[qi][e] = (0..p2).map(|ki| scores[ki] / z * v[ki][e]).sum();
                    }
                }
            }

            for pos in 0..p2 {
                let (y, xx) = (wy * p + pos / p, wx * p + pos % p);
                if y >= h || xx >= wd {
                    continue;
                }
                for ch in 0..c {
                    let proj: f64 = (0..d).map(|e| concat[pos][e] * w.w_mha.at(&[e, ch])).sum();
                    let idx = (ch * h + y) * wd + xx;
                    out.data_mut()[idx] += proj;
                }
            }
        }
    }
    Ok(out)
}

/// Triple-loop `[M, K] × [K, N]`.
pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(b.shape()[0], k, "inner extents differ");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Align-corners=false bilinear resize of a `[C, H, W]` map.
pub fn resize_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let &[c, h, w] = x.shape() else {
        panic!("resize_oracle needs [C, H, W]");
    };
    let taps = |n: usize, o: usize, i: usize| {
        let src = ((i as f64 + 0.5) * n as f64 / o as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (y0, y1, fy) = taps(h, oh, i[1]);
        let (x0, x1, fx) = taps(w, ow, i[2]);
        let v = |y, xx| x.at(&[i[0], y, xx]);
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    })
}

/// Per-pixel `W x + b` with `W: [out, C]`, `b: [out, 1]`.
pub fn linear_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let &[c, h, wd] = x.shape() else {
        panic!("linear_oracle needs [C, H, W]");
    };
    Tensor::from_fn(&[w.shape()[0], h, wd], |i| {
        b.data()[i[0]] + (0..c).map(|k| w.at(&[i[0], k]) * x.at(&[k, i[1], i[2]])).sum::<f64>()
    })
}

/// Channel concatenation of equally sized `[C_i, H, W]` maps.
pub fn concat_oracle(parts: &[Tensor]) -> Tensor {
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let c: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&[c, h, w], data).unwrap()
}

/// Residual GELU MLP of a `[C, H, W]` map, mixing over the flattened
/// spatial axis (`channel == false`) or over channels.
pub fn mlp_oracle(x: &Tensor, w1: &Tensor, w2: &Tensor, channel: bool) -> Tensor {
    let &[c, h, w] = x.shape() else {
        panic!("mlp_oracle needs [C, H, W]");
    };
    let hw = h * w;
    let hidden = w1.shape()[1];
    let (rows, len) = if channel { (hw, c) } else { (c, hw) };
    let at = |r: usize, i: usize| if channel { i * hw + r } else { r * hw + i };
    let mut out = x.clone();
    for r in 0..rows {
        let hid: Vec<f64> = (0..hidden)
            .map(|j| gelu((0..len).map(|i| x.data()[at(r, i)] * w1.at(&[i, j])).sum()))
            .collect();
        for i in 0..len {
            out.data_mut()[at(r, i)] += (0..hidden).map(|j| hid[j] * w2.at(&[j, i])).sum::<f64>();
        }
    }
    out
}

/// Explicit pool, per-head mixing with residual and concat of one `[C, RP, RP]`
/// context; returns `[P², C]` tokens.
pub fn position_mix_oracle(ctx: &Tensor, weight: &Tensor, bias: &Tensor, cfg: &LawinConfig) -> Tensor {
    let (p, r) = (cfg.patch, cfg.ratio);
    let c = ctx.shape()[0];
    let per_head = c / cfg.heads;
    let pooled = |ch: usize, pos: usize| {
        let (i, j) = (pos / p, pos % p);
        let mut acc = 0.0;
        for a in 0..r {
            for b in 0..r {
                acc += ctx.at(&[ch, i * r + a, j * r + b]);
            }
        }
        acc / (r * r) as f64
    };
    Tensor::from_fn(&[p * p, c], |i| {
        let (po, ch) = (i[0], i[1]);
        let head = ch / per_head;
        let mixed: f64 = (0..p * p).map(|pi| pooled(ch, pi) * weight.at(&[head, pi, po])).sum::<f64>()
            + bias.at(&[head, 0, po]);
        mixed + pooled(ch, po)
    })
}

/// Mean negative log-softmax over pixels of `[K, H, W]` logits whose label
/// is not `ignore`; 0 when every pixel is ignored.
pub fn cross_entropy_oracle(logits: &Tensor, labels: &[usize], ignore: usize) -> f64 {
    let k = logits.shape()[0];
    let hw = logits.numel() / k;
    let (mut total, mut n) = (0.0, 0);
    for (p, &lab) in labels.iter().enumerate().take(hw) {
        if lab == ignore {
            continue;
        }
        let z: Vec<f64> = (0..k).map(|c| logits.data()[c * hw + p]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[lab];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
