//! Closed-form cost model of local and large window attention and its
//! instrumented counterpart.
//!
//! The closed forms count multiply-adds (MACs):
//!
//! * `4·HW·C²`: the q, k, v and output projections, each a `C × C` map
//!   applied to `HW` tokens. For large window attention the keys and values
//!   come from `P²` pooled context tokens per window, which is again `HW`
//!   tokens in total.
//! * `2·HW·P²·C`: `QKᵀ` and `AV`. Each of the `HW/P²` windows multiplies
//!   `P²` queries against `P²` keys over `C` channels (summed over heads).
//! * `HW·P²·C` (large window only): position mixing, a `P² × P²` map on each
//!   of the `C` pooled context rows of every window.
//!
//! A MAC is reported as two FLOPs. Pooling, softmax, bias and residual adds
//! fall into separate excluded buckets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    large_window_attention, local_window_attention, AttentionWeights, ContextMixWeights, LawinConfig, Mixing,
};
use crate::autodiff::{FlopCounter, Graph};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

fn check_extents(h: u64, w: u64, c: u64, p: u64) {
    assert!(h > 0 && w > 0 && c > 0 && p > 0, "extents must be positive");
}

/// `4·HW·C² + 2·HW·P²·C` multiply-adds.
pub fn flops_local_window(h: u64, w: u64, c: u64, p: u64) -> u128 {
    check_extents(h, w, c, p);
    let (hw, c, p2) = ((h as u128) * (w as u128), c as u128, (p as u128) * (p as u128));
    4 * hw * c * c + 2 * hw * p2 * c
}

/// `4·HW·C² + 3·HW·P²·C` multiply-adds. The ratio `R` does not appear.
pub fn flops_large_window(h: u64, w: u64, c: u64, p: u64) -> u128 {
    check_extents(h, w, c, p);
    let (hw, c, p2) = ((h as u128) * (w as u128), c as u128, (p as u128) * (p as u128));
    4 * hw * c * c + 3 * hw * p2 * c
}

/// Runs `f` on a fresh graph and returns its result with the operation counts
/// it recorded.
pub fn measure_flops<T>(f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<(T, FlopCounter)> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok((out, g.flops()))
}

fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
}

/// Counts one forward pass of local window attention on a random `[C, H, W]`
/// map. `H` and `W` must be multiples of `P`.
pub fn measure_local_attention(h: usize, w: usize, cfg: &LawinConfig, seed: u64) -> Result<FlopCounter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let aw = AttentionWeights::init(&mut store, "attn", cfg.dim, &mut rng)?;
    let x = random_input(cfg.dim, h, w, seed ^ 0x5eed);
    let mut s = Session::new(&store, false);
    let weights = aw.bind(&mut s);
    let xv = s.constant(x);
    let before = s.flops();
    local_window_attention(&mut s, xv, &weights, cfg)?;
    Ok(s.flops().since(&before))
}

/// Counts one forward pass of large window attention on a random `[C, H, W]`
/// map.
pub fn measure_large_attention(h: usize, w: usize, cfg: &LawinConfig, seed: u64) -> Result<FlopCounter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let aw = AttentionWeights::init(&mut store, "attn", cfg.dim, &mut rng)?;
    let mix = ContextMixWeights::init(&mut store, "mix", cfg, &mut rng)?;
    let x = random_input(cfg.dim, h, w, seed ^ 0x5eed);
    let mut s = Session::new(&store, false);
    let weights = aw.bind(&mut s);
    let mix = mix.bind(&mut s);
    let xv = s.constant(x);
    let before = s.flops();
    large_window_attention(&mut s, xv, &weights, &mix, cfg)?;
    Ok(s.flops().since(&before))
}

/// Parameters of one attention block: four `C × C` projections plus the
/// per-head position-mixing maps and biases when enabled.
pub fn attention_params(cfg: &LawinConfig) -> u64 {
    let c = cfg.dim as u64;
    let p2 = (cfg.patch * cfg.patch) as u64;
    let mut n = 4 * c * c;
    if cfg.mixing.position {
        n += cfg.heads as u64 * (p2 * p2 + p2);
    }
    if cfg.mixing.channel {
        n += 2 * c * cfg.channel_hidden as u64;
    }
    n
}

/// Measured counts of large window attention for each ratio at a fixed
/// `(H, W, C, P)`, with the standard `heads = R²` configuration.
pub fn ratio_sweep(h: usize, w: usize, c: usize, p: usize, ratios: &[usize]) -> Result<Vec<(usize, FlopCounter)>> {
    ratios
        .iter()
        .map(|&r| {
            let cfg = LawinConfig::new(p, r, c)?;
            Ok((r, measure_large_attention(h, w, &cfg, r as u64)?))
        })
        .collect()
}

/// One row of a [`FlopsReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub block: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    /// `R`; `None` for local window attention.
    pub ratio: Option<usize>,
    /// Closed-form multiply-adds, when the block has one.
    pub analytic_macs: Option<u128>,
    /// Instrumented counts, when the block was run.
    pub measured: Option<FlopCounter>,
    pub params: u64,
}

impl FlopsRow {
    /// True when both counts exist and the measured matmul MACs equal the
    /// closed form.
    pub fn agrees(&self) -> Option<bool> {
        Some(self.analytic_macs? == self.measured?.matmul_macs as u128)
    }
}

/// Analytic and measured costs of attention blocks plus the ratio sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    /// `(R, measured counts)` of large window attention at fixed extents.
    pub sweep: Vec<(usize, FlopCounter)>,
}

impl FlopsReport {
    /// Closed-form rows at `(H, W, C, P)` for local and large window
    /// attention, one large-window row per ratio.
    pub fn analytic(h: usize, w: usize, c: usize, p: usize, ratios: &[usize]) -> Result<Self> {
        let mut rows = vec![FlopsRow {
            block: "lowin".into(),
            h,
            w,
            c,
            p,
            ratio: None,
            analytic_macs: Some(flops_local_window(h as u64, w as u64, c as u64, p as u64)),
            measured: None,
            params: attention_params(&LawinConfig::local(p, 1, c)?),
        }];
        for &r in ratios {
            let cfg = LawinConfig::new(p, r, c)?;
            rows.push(FlopsRow {
                block: format!("lawin_r{r}"),
                h,
                w,
                c,
                p,
                ratio: Some(r),
                analytic_macs: Some(flops_large_window(h as u64, w as u64, c as u64, p as u64)),
                measured: None,
                params: attention_params(&cfg),
            });
        }
        Ok(FlopsReport { rows, sweep: vec![] })
    }

    /// Instrumented rows at `(H, W, C, P)`: local attention and one large
    /// window row per ratio. The sweep is filled from the same runs.
    pub fn measured(h: usize, w: usize, c: usize, p: usize, ratios: &[usize]) -> Result<Self> {
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "measured rows need extents divisible by P = {p}, got {h}x{w}"
            )));
        }
        let mut report = Self::analytic(h, w, c, p, ratios)?;
        report.rows[0].measured = Some(measure_local_attention(h, w, &LawinConfig::local(p, 1, c)?, 0)?);
        report.sweep = ratio_sweep(h, w, c, p, ratios)?;
        for (row, (_, counts)) in report.rows[1..].iter_mut().zip(&report.sweep) {
            row.measured = Some(*counts);
        }
        Ok(report)
    }

    pub fn extend(&mut self, other: FlopsReport) {
        self.rows.extend(other.rows);
        self.sweep.extend(other.sweep);
    }

    /// True when every ratio in the sweep recorded the same matmul MACs.
    pub fn sweep_invariant(&self) -> bool {
        self.sweep.windows(2).all(|p| p[0].1.matmul_macs == p[1].1.matmul_macs)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "block\tH\tW\tC\tP\tR\tanalytic_macs\tanalytic_flops\tmeasured_macs\tmeasured_flops\texcluded_pooling\texcluded_elementwise\tparams\tagrees\n",
        );
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let m = r.measured;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.block,
                r.h,
                r.w,
                r.c,
                r.p,
                opt(r.ratio.map(|v| v.to_string())),
                opt(r.analytic_macs.map(|v| v.to_string())),
                opt(r.analytic_macs.map(|v| (2 * v).to_string())),
                opt(m.map(|v| v.matmul_macs.to_string())),
                opt(m.map(|v| v.matmul_flops().to_string())),
                opt(m.map(|v| v.pooling.to_string())),
                opt(m.map(|v| v.elementwise.to_string())),
                r.params,
                opt(r.agrees().map(|v| v.to_string())),
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let name = match r.ratio {
                None => "Lowin".to_string(),
                Some(ratio) => format!("Lawin R={ratio}"),
            };
            out.push_str(&format!("{name:<12} H={} W={} C={} P={}", r.h, r.w, r.c, r.p));
            if let Some(a) = r.analytic_macs {
                out.push_str(&format!("  analytic {} MACs", group_digits(a)));
            }
            if let Some(m) = r.measured {
                out.push_str(&format!(
                    "  measured {} MACs (pooling {}, elementwise {})",
                    group_digits(m.matmul_macs as u128),
                    m.pooling,
                    m.elementwise
                ));
            }
            if let Some(ok) = r.agrees() {
                out.push_str(if ok { "  [match]" } else { "  [MISMATCH]" });
            }
            out.push('\n');
        }
        if !self.sweep.is_empty() {
            let ratios: Vec<String> = self.sweep.iter().map(|(r, _)| r.to_string()).collect();
            out.push_str(&format!(
                "R-sweep over {{{}}}: attention-core MACs {}\n",
                ratios.join(","),
                if self.sweep_invariant() { "identical" } else { "DIFFER" }
            ));
        }
        out
    }
}

/// `18253611008` → `18,253,611,008`.
pub fn group_digits(v: u128) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// A large window config with mixing disabled, for sweeps that isolate the
/// attention core from position mixing.
pub fn unmixed(p: usize, r: usize, c: usize) -> Result<LawinConfig> {
    LawinConfig::ablation(p, r, r * r, c, Mixing::NONE)
}
