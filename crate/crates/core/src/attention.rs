//! Window attention kernels: window partitioning, local multi-head window
//! attention, token/channel-mixing MLPs, pooled context extraction with
//! per-head position mixing, and large window attention.
//!
//! Feature maps are `[C, H, W]`. Tokens are laid out `[windows, positions, C]`
//! and multiply projections on the right (`tokens · W`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore, Session, INIT_STD};
use crate::tensor::Tensor;

/// Nonlinearity used inside mixing MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Which mixing blocks run on the pooled context before attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixing {
    pub position: bool,
    pub channel: bool,
}

impl Default for Mixing {
    fn default() -> Self {
        Mixing {
            position: true,
            channel: false,
        }
    }
}

impl Mixing {
    pub const NONE: Mixing = Mixing {
        position: false,
        channel: false,
    };
}

/// Hyperparameters of one (large) window attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct LawinConfig {
    /// Query patch side `P`, in cells.
    pub patch: usize,
    /// Context-to-query side ratio `R`.
    pub ratio: usize,
    pub heads: usize,
    /// Embedding dimension `D`; equals the channel count of the feature map.
    pub dim: usize,
    pub mixing: Mixing,
    pub activation: Activation,
    /// Hidden width of the channel-mixing MLP, when enabled.
    pub channel_hidden: usize,
    head_override: bool,
}

impl LawinConfig {
    /// Standard configuration: `heads = ratio²`, position mixing on.
    pub fn new(patch: usize, ratio: usize, dim: usize) -> Result<Self> {
        Self::with_heads(patch, ratio, ratio * ratio, dim)
    }

    /// Standard configuration with an explicit head count, which must equal `ratio²`.
    pub fn with_heads(patch: usize, ratio: usize, heads: usize, dim: usize) -> Result<Self> {
        if heads != ratio * ratio {
            return Err(Error::Config(format!(
                "large window attention needs heads = R² (R = {ratio} gives {}), got {heads}",
                ratio * ratio
            )));
        }
        Self::build(patch, ratio, heads, dim, Mixing::default(), false)
    }

    /// Ablation configuration: any head count and mixing selection. Position
    /// mixing still requires `heads = ratio²`.
    pub fn ablation(patch: usize, ratio: usize, heads: usize, dim: usize, mixing: Mixing) -> Result<Self> {
        Self::build(patch, ratio, heads, dim, mixing, true)
    }

    /// Plain local window attention (`R = 1`, no context mixing).
    pub fn local(patch: usize, heads: usize, dim: usize) -> Result<Self> {
        Self::build(patch, 1, heads, dim, Mixing::NONE, true)
    }

    fn build(patch: usize, ratio: usize, heads: usize, dim: usize, mixing: Mixing, head_override: bool) -> Result<Self> {
        if patch == 0 || ratio == 0 || heads == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "patch ({patch}), ratio ({ratio}), heads ({heads}) and dim ({dim}) must be positive"
            )));
        }
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let cfg = LawinConfig {
            patch,
            ratio,
            heads,
            dim,
            mixing,
            activation: Activation::Gelu,
            channel_hidden: dim,
            head_override,
        };
        cfg.check_mixing()?;
        Ok(cfg)
    }

    pub fn with_mixing(mut self, mixing: Mixing) -> Result<Self> {
        self.mixing = mixing;
        self.check_mixing()?;
        Ok(self)
    }

    fn check_mixing(&self) -> Result<()> {
        if self.mixing.position && self.heads != self.ratio * self.ratio {
            return Err(Error::Config(format!(
                "position mixing needs heads = R² (R = {} gives {}), got {}",
                self.ratio,
                self.ratio * self.ratio,
                self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Side length of the context patch, `R·P`.
    pub fn context_side(&self) -> usize {
        self.ratio * self.patch
    }

    pub fn is_ablation(&self) -> bool {
        self.head_override
    }

    /// Zero halo added before and after each spatial axis so that every
    /// query window has a full context patch. When the overhang `P·(R−1)` is
    /// odd the extra cell goes before (up/left).
    pub fn halo(&self) -> (usize, usize) {
        let overhang = self.patch * (self.ratio - 1);
        let before = overhang.div_ceil(2);
        (before, overhang - before)
    }
}

/// The four projections of one attention block, each `D × D`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<T = ParamId> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_mha: T,
}

impl AttentionWeights<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut mk = |name: &str| store.insert(format!("{prefix}.{name}"), trunc_normal(&[dim, dim], INIT_STD, rng));
        Ok(AttentionWeights {
            w_q: mk("w_q")?,
            w_k: mk("w_k")?,
            w_v: mk("w_v")?,
            w_mha: mk("w_mha")?,
        })
    }

    pub fn from_tensors(store: &mut ParamStore, prefix: &str, [q, k, v, o]: [Tensor; 4]) -> Result<Self> {
        let dim = q.shape().first().copied().unwrap_or(0);
        for t in [&q, &k, &v, &o] {
            if t.shape() != [dim, dim] {
                return Err(Error::shape("attention weights", &[dim, dim], t.shape()));
            }
        }
        Ok(AttentionWeights {
            w_q: store.insert(format!("{prefix}.w_q"), q)?,
            w_k: store.insert(format!("{prefix}.w_k"), k)?,
            w_v: store.insert(format!("{prefix}.w_v"), v)?,
            w_mha: store.insert(format!("{prefix}.w_mha"), o)?,
        })
    }

    pub fn bind(&self, s: &mut Session) -> AttentionWeights<Var> {
        AttentionWeights {
            w_q: s.param(self.w_q),
            w_k: s.param(self.w_k),
            w_v: s.param(self.w_v),
            w_mha: s.param(self.w_mha),
        }
    }
}

/// Per-head position-mixing maps: `weight` is `[h, P², P²]` (input position
/// by output position), `bias` is `[h, 1, P²]`.
#[derive(Clone, Copy, Debug)]
pub struct PositionMixWeights<T = ParamId> {
    pub weight: T,
    pub bias: T,
}

impl PositionMixWeights<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &LawinConfig, rng: &mut impl Rng) -> Result<Self> {
        let p2 = cfg.patch * cfg.patch;
        Ok(PositionMixWeights {
            weight: store.insert(
                format!("{prefix}.weight"),
                trunc_normal(&[cfg.heads, p2, p2], INIT_STD, rng),
            )?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cfg.heads, 1, p2]))?,
        })
    }

    pub fn from_tensors(store: &mut ParamStore, prefix: &str, cfg: &LawinConfig, weight: Tensor, bias: Tensor) -> Result<Self> {
        let p2 = cfg.patch * cfg.patch;
        if weight.shape() != [cfg.heads, p2, p2] {
            return Err(Error::shape("position-mix weight", &[cfg.heads, p2, p2], weight.shape()));
        }
        if bias.shape() != [cfg.heads, 1, p2] {
            return Err(Error::shape("position-mix bias", &[cfg.heads, 1, p2], bias.shape()));
        }
        Ok(PositionMixWeights {
            weight: store.insert(format!("{prefix}.weight"), weight)?,
            bias: store.insert(format!("{prefix}.bias"), bias)?,
        })
    }

    pub fn bind(&self, s: &mut Session) -> PositionMixWeights<Var> {
        PositionMixWeights {
            weight: s.param(self.weight),
            bias: s.param(self.bias),
        }
    }
}

/// Two-layer mixing MLP `W₂ σ(W₁ x)`, used across positions (token mixing,
/// `W₁: HW × hidden`) or across channels (channel mixing, `W₁: C × hidden`).
#[derive(Clone, Copy, Debug)]
pub struct MlpWeights<T = ParamId> {
    pub w1: T,
    pub w2: T,
}

pub type TokenMixWeights<T = ParamId> = MlpWeights<T>;
pub type ChannelMixWeights<T = ParamId> = MlpWeights<T>;

impl MlpWeights<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MlpWeights {
            w1: store.insert(format!("{prefix}.w1"), trunc_normal(&[width, hidden], INIT_STD, rng))?,
            w2: store.insert(format!("{prefix}.w2"), trunc_normal(&[hidden, width], INIT_STD, rng))?,
        })
    }

    pub fn from_tensors(store: &mut ParamStore, prefix: &str, w1: Tensor, w2: Tensor) -> Result<Self> {
        let (width, hidden) = match w1.shape() {
            &[a, b] => (a, b),
            other => return Err(Error::shape("mlp w1", &[0, 0], other)),
        };
        if w2.shape() != [hidden, width] {
            return Err(Error::shape("mlp w2", &[hidden, width], w2.shape()));
        }
        Ok(MlpWeights {
            w1: store.insert(format!("{prefix}.w1"), w1)?,
            w2: store.insert(format!("{prefix}.w2"), w2)?,
        })
    }

    pub fn bind(&self, s: &mut Session) -> MlpWeights<Var> {
        MlpWeights {
            w1: s.param(self.w1),
            w2: s.param(self.w2),
        }
    }
}

/// Mixing weights for the pooled context; presence must match `LawinConfig::mixing`.
#[derive(Clone, Copy, Debug)]
pub struct ContextMixWeights<T = ParamId> {
    pub position: Option<PositionMixWeights<T>>,
    pub channel: Option<ChannelMixWeights<T>>,
}

impl ContextMixWeights<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &LawinConfig, rng: &mut impl Rng) -> Result<Self> {
        let position = if cfg.mixing.position {
            Some(PositionMixWeights::init(store, &format!("{prefix}.pos_mix"), cfg, rng)?)
        } else {
            None
        };
        let channel = if cfg.mixing.channel {
            Some(MlpWeights::init(store, &format!("{prefix}.chan_mix"), cfg.dim, cfg.channel_hidden, rng)?)
        } else {
            None
        };
        Ok(ContextMixWeights { position, channel })
    }

    pub fn bind(&self, s: &mut Session) -> ContextMixWeights<Var> {
        ContextMixWeights {
            position: self.position.map(|p| p.bind(s)),
            channel: self.channel.map(|c| c.bind(s)),
        }
    }
}

impl<T> ContextMixWeights<T> {
    pub fn none() -> Self {
        ContextMixWeights {
            position: None,
            channel: None,
        }
    }
}

pub(crate) fn feature_map_dims(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref other => Err(Error::Invalid(format!("{op} needs a [C, H, W] map, got {other:?}"))),
    }
}

/// `[C, H, W]` → `[HW/P², P², C]`; window `(i, j)` (row-major) holds the
/// `P × P` block at `(iP, jP)` with positions in row-major order.
pub fn window_partition(g: &mut Graph, x: Var, patch: usize) -> Result<Var> {
    let (c, h, w) = feature_map_dims(g, x, "window_partition")?;
    for extent in [h, w] {
        if patch == 0 || extent % patch != 0 {
            return Err(Error::PadRequired {
                op: "window_partition",
                extent,
                divisor: patch,
            });
        }
    }
    let (ny, nx) = (h / patch, w / patch);
    let r = g.reshape(x, &[c, ny, patch, nx, patch])?;
    let p = g.permute(r, &[1, 3, 2, 4, 0])?;
    g.reshape(p, &[ny * nx, patch * patch, c])
}

/// Inverse of [`window_partition`] for an `h × w` map.
pub fn window_unpartition(g: &mut Graph, windows: Var, patch: usize, h: usize, w: usize) -> Result<Var> {
    let shape = g.shape(windows).to_vec();
    let (ny, nx) = (h / patch, w / patch);
    let &[n, p2, c] = shape.as_slice() else {
        return Err(Error::shape("window_unpartition", &shape, &[h, w]));
    };
    if !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || n != ny * nx || p2 != patch * patch {
        return Err(Error::shape("window_unpartition", &shape, &[h, w]));
    }
    let r = g.reshape(windows, &[ny, nx, patch, patch, c])?;
    let p = g.permute(r, &[4, 0, 2, 1, 3])?;
    g.reshape(p, &[c, h, w])
}

/// Multi-head attention between query tokens `[n, N, D]` and key/value
/// tokens `[n, M, D]`, followed by the output projection. Returns the
/// projected tokens `[n, N, D]` and the attention probabilities `[n, h, N, M]`.
pub fn window_mha(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: &AttentionWeights<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = g.shape(queries).to_vec();
    let ks = g.shape(keys_values).to_vec();
    let (&[n, nq, d], &[n2, nk, d2]) = (qs.as_slice(), ks.as_slice()) else {
        return Err(Error::shape("window_mha", &qs, &ks));
    };
    if n != n2 || d != d2 || d % heads != 0 {
        return Err(Error::shape("window_mha", &qs, &ks));
    }
    let dh = d / heads;
    let q = g.matmul(queries, w.w_q)?;
    let k = g.matmul(keys_values, w.w_k)?;
    let v = g.matmul(keys_values, w.w_v)?;
    let q = g.reshape(q, &[n, nq, heads, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[n, nk, heads, dh])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, &[n, nk, heads, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(logits)?;
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[n, nq, d])?;
    let out = g.matmul(out, w.w_mha)?;
    Ok((out, attn))
}

/// Multi-head self-attention inside non-overlapping `P × P` windows plus the
/// residual connection. `H` and `W` must be multiples of `P`; `cfg.ratio`
/// is ignored.
pub fn local_window_attention(g: &mut Graph, x: Var, w: &AttentionWeights<Var>, cfg: &LawinConfig) -> Result<Var> {
    let (c, h, wd) = feature_map_dims(g, x, "local_window_attention")?;
    if c != cfg.dim {
        return Err(Error::shape("local_window_attention", &[cfg.dim], &[c]));
    }
    let tokens = window_partition(g, x, cfg.patch)?;
    let (out, _) = window_mha(g, tokens, tokens, w, cfg.heads)?;
    let map = window_unpartition(g, out, cfg.patch, h, wd)?;
    g.add(map, x)
}

/// Zero-pads `x` to multiples of `P` (bottom/right) and then by the context
/// halo on every side.
pub fn pad_for_context(g: &mut Graph, x: Var, cfg: &LawinConfig) -> Result<Var> {
    let (_, h, w) = feature_map_dims(g, x, "pad_for_context")?;
    let p = cfg.patch;
    let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let (before, after) = cfg.halo();
    g.pad2d(x, before, hp - h + after, before, wp - w + after)
}

/// The `R·P × R·P` context patch of query window `window` (row-major over the
/// query grid) from a map already padded by [`pad_for_context`].
pub fn extract_context(g: &mut Graph, padded: Var, window: usize, cfg: &LawinConfig) -> Result<Var> {
    let (_, h, w) = feature_map_dims(g, padded, "extract_context")?;
    let side = cfg.context_side();
    let overhang = side - cfg.patch;
    if h < side || w < side || !(h - overhang).is_multiple_of(cfg.patch) || !(w - overhang).is_multiple_of(cfg.patch) {
        return Err(Error::Invalid(format!(
            "map {h}x{w} is not padded for {side}x{side} contexts (padding bug)"
        )));
    }
    let nx = (w - overhang) / cfg.patch;
    let ny = (h - overhang) / cfg.patch;
    if window >= nx * ny {
        return Err(Error::Invalid(format!(
            "window {window} out of range for a {ny}x{nx} query grid (padding bug)"
        )));
    }
    let (wy, wx) = (window / nx, window % nx);
    g.crop2d(padded, wy * cfg.patch, wx * cfg.patch, side, side)
}

/// Pools `[n, C, P, P]` contexts and applies the configured mixing, giving
/// context tokens `[n, P², C]`.
fn mix_pooled_context(g: &mut Graph, pooled: Var, mix: &ContextMixWeights<Var>, cfg: &LawinConfig) -> Result<Var> {
    let shape = g.shape(pooled).to_vec();
    let &[n, c, p, _] = shape.as_slice() else {
        return Err(Error::shape("context mixing", &shape, &[]));
    };
    let p2 = p * p;
    if mix.position.is_some() != cfg.mixing.position || mix.channel.is_some() != cfg.mixing.channel {
        return Err(Error::Config("mixing weights do not match the configured mixing blocks".into()));
    }
    let mut ctx = g.reshape(pooled, &[n, c, p2])?;
    if let Some(pm) = &mix.position {
        if cfg.heads != cfg.ratio * cfg.ratio {
            return Err(Error::Config(format!(
                "position mixing needs heads = R² (R = {} gives {}), got {}",
                cfg.ratio,
                cfg.ratio * cfg.ratio,
                cfg.heads
            )));
        }
        if c % cfg.heads != 0 {
            return Err(Error::Config(format!("{c} channels cannot be split into {} heads", cfg.heads)));
        }
        let heads = g.reshape(ctx, &[n, cfg.heads, c / cfg.heads, p2])?;
        let mixed = g.matmul(heads, pm.weight)?;
        let mixed = g.add(mixed, pm.bias)?;
        let mixed = g.add(mixed, heads)?;
        ctx = g.reshape(mixed, &[n, c, p2])?;
    }
    let mut tokens = g.transpose(ctx)?;
    if let Some(cm) = &mix.channel {
        let hidden = g.matmul(tokens, cm.w1)?;
        let hidden = cfg.activation.apply(g, hidden);
        let out = g.matmul(hidden, cm.w2)?;
        tokens = g.add(out, tokens)?;
    }
    Ok(tokens)
}

/// Average-pools one `[C, R·P, R·P]` context by `R` and applies per-head
/// position mixing with residual, giving the position-mixed context `[P², C]`.
pub fn position_mix_context(g: &mut Graph, ctx: Var, pm: &PositionMixWeights<Var>, cfg: &LawinConfig) -> Result<Var> {
    let (c, h, w) = feature_map_dims(g, ctx, "position_mix_context")?;
    if h != cfg.context_side() || w != cfg.context_side() {
        return Err(Error::shape("position_mix_context", &[c, cfg.context_side(), cfg.context_side()], &[c, h, w]));
    }
    let batched = g.reshape(ctx, &[1, c, h, w])?;
    let pooled = g.avg_pool2d(batched, cfg.ratio)?;
    let mix = ContextMixWeights {
        position: Some(*pm),
        channel: None,
    };
    let cfg = cfg.clone().with_mixing(Mixing {
        position: true,
        channel: false,
    })?;
    let tokens = mix_pooled_context(g, pooled, &mix, &cfg)?;
    let p2 = cfg.patch * cfg.patch;
    g.reshape(tokens, &[p2, c])
}

/// Output of [`large_window_attention_traced`].
pub struct LawinTrace {
    pub output: Var,
    /// Attention probabilities `[windows, h, P², P²]`.
    pub attention: Var,
    /// Position-mixed context tokens `[windows, P², C]`.
    pub context: Var,
}

/// Large window attention with its residual: every `P × P` query window
/// attends to its `R·P × R·P` context, average-pooled back to `P × P` and
/// mixed per head. Inputs of any size are zero-padded and the output is
/// cropped back to the input extent.
pub fn large_window_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights<Var>,
    mix: &ContextMixWeights<Var>,
    cfg: &LawinConfig,
) -> Result<Var> {
    Ok(large_window_attention_traced(g, x, w, mix, cfg)?.output)
}

pub fn large_window_attention_traced(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights<Var>,
    mix: &ContextMixWeights<Var>,
    cfg: &LawinConfig,
) -> Result<LawinTrace> {
    let (c, h, wd) = feature_map_dims(g, x, "large_window_attention")?;
    if c != cfg.dim {
        return Err(Error::shape("large_window_attention", &[cfg.dim], &[c]));
    }
    let p = cfg.patch;
    let (hp, wp) = (h.div_ceil(p) * p, wd.div_ceil(p) * p);
    let aligned = g.pad2d(x, 0, hp - h, 0, wp - wd)?;
    let queries = window_partition(g, aligned, p)?;

    let (before, after) = cfg.halo();
    let haloed = g.pad2d(aligned, before, after, before, after)?;
    let contexts = g.unfold(haloed, cfg.context_side(), p)?;
    let pooled = g.avg_pool2d(contexts, cfg.ratio)?;
    let context = mix_pooled_context(g, pooled, mix, cfg)?;

    let (tokens, attention) = window_mha(g, queries, context, w, cfg.heads)?;
    let map = window_unpartition(g, tokens, p, hp, wp)?;
    let map = g.crop2d(map, 0, 0, h, wd)?;
    let output = g.add(map, x)?;
    Ok(LawinTrace {
        output,
        attention,
        context,
    })
}

/// Token-mixing MLP with residual: each channel's `HW` values pass through
/// `W₂ σ(W₁ ·)`.
pub fn token_mixing_mlp(g: &mut Graph, x: Var, w: &TokenMixWeights<Var>, act: Activation) -> Result<Var> {
    let (c, h, wd) = feature_map_dims(g, x, "token_mixing_mlp")?;
    let w1 = g.shape(w.w1).to_vec();
    if w1.first() != Some(&(h * wd)) {
        return Err(Error::shape("token_mixing_mlp", &[h * wd], &w1));
    }
    let flat = g.reshape(x, &[c, h * wd])?;
    let hidden = g.matmul(flat, w.w1)?;
    let hidden = act.apply(g, hidden);
    let out = g.matmul(hidden, w.w2)?;
    let out = g.reshape(out, &[c, h, wd])?;
    g.add(out, x)
}

/// Channel-mixing MLP with residual: each position's `C` values pass
/// through `W₂ σ(W₁ ·)`.
pub fn channel_mixing_mlp(g: &mut Graph, x: Var, w: &ChannelMixWeights<Var>, act: Activation) -> Result<Var> {
    let (c, h, wd) = feature_map_dims(g, x, "channel_mixing_mlp")?;
    let w1 = g.shape(w.w1).to_vec();
    if w1.first() != Some(&c) {
        return Err(Error::shape("channel_mixing_mlp", &[c], &w1));
    }
    let flat = g.reshape(x, &[c, h * wd])?;
    let tokens = g.transpose(flat)?;
    let hidden = g.matmul(tokens, w.w1)?;
    let hidden = act.apply(g, hidden);
    let out = g.matmul(hidden, w.w2)?;
    let out = g.transpose(out)?;
    let out = g.reshape(out, &[c, h, wd])?;
    g.add(out, x)
}

#[cfg(test)]
mod tests;
