//! LawinASPP decoder: multi-level aggregation at output stride 8, the
//! five-branch pyramid (shortcut, large window attention at each ratio,
//! image pooling), and low-level fusion at output stride 4.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    feature_map_dims, large_window_attention, AttentionWeights, ContextMixWeights, LawinConfig, Mixing,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linear::{linear_1x1, Linear};
use crate::params::{ParamId, ParamStore, Session};

/// Decoder head selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Aggregation, LawinASPP, low-level fusion, classifier.
    #[default]
    Lawin,
    /// Aggregation, low-level fusion, classifier; no pyramid.
    Linear,
}

/// Branch enablement and dimensions of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Query patch side `P` of every large window branch.
    pub patch: usize,
    pub ratios: Vec<usize>,
    /// One flag per entry of `ratios`.
    pub enable_ratios: Vec<bool>,
    pub enable_shortcut: bool,
    pub enable_image_pool: bool,
    pub enable_lowlevel: bool,
    /// Decoder width `D`.
    pub dim: usize,
    pub num_classes: usize,
    /// Head count per ratio, overriding `R²`. Marks the branches as ablations.
    pub heads: Option<Vec<usize>>,
    pub mixing: Mixing,
    pub decoder: DecoderKind,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            patch: 8,
            ratios: vec![2, 4, 8],
            enable_ratios: vec![true; 3],
            enable_shortcut: true,
            enable_image_pool: true,
            enable_lowlevel: true,
            dim: 512,
            num_classes: 150,
            heads: None,
            mixing: Mixing::default(),
            decoder: DecoderKind::Lawin,
        }
    }
}

impl PyramidConfig {
    /// Small-width variant for toy images: `P = 2`, `D = 64`.
    pub fn desk(num_classes: usize) -> Self {
        PyramidConfig {
            patch: 2,
            dim: 64,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("patch, dim and num_classes must be positive".into()));
        }
        if self.enable_ratios.len() != self.ratios.len() {
            return Err(Error::Config(format!(
                "{} ratios but {} enable flags",
                self.ratios.len(),
                self.enable_ratios.len()
            )));
        }
        if let Some(h) = &self.heads {
            if h.len() != self.ratios.len() {
                return Err(Error::Config(format!("{} ratios but {} head counts", self.ratios.len(), h.len())));
            }
        }
        for (i, r) in self.ratios.iter().enumerate() {
            if self.ratios[..i].contains(r) {
                return Err(Error::Config(format!("ratio {r} listed twice")));
            }
        }
        if self.decoder == DecoderKind::Lawin && self.num_branches() == 0 {
            return Err(Error::Config("every LawinASPP branch is disabled".into()));
        }
        self.branch_configs().map(|_| ())
    }

    /// Configs of the enabled large window branches as `(ratio index, config)`.
    pub fn branch_configs(&self) -> Result<Vec<(usize, LawinConfig)>> {
        let mut out = vec![];
        for (i, (&r, &on)) in self.ratios.iter().zip(&self.enable_ratios).enumerate() {
            if !on {
                continue;
            }
            let cfg = match &self.heads {
                Some(h) => LawinConfig::ablation(self.patch, r, h[i], self.dim, self.mixing)?,
                None => LawinConfig::new(self.patch, r, self.dim)?.with_mixing(self.mixing)?,
            };
            out.push((i, cfg));
        }
        Ok(out)
    }

    /// Enabled pyramid branches, shortcut and image pooling included.
    pub fn num_branches(&self) -> usize {
        self.enable_ratios.iter().filter(|&&e| e).count()
            + self.enable_shortcut as usize
            + self.enable_image_pool as usize
    }

    /// Context side `R·P` of each enabled large window branch.
    pub fn receptive_fields(&self) -> Vec<usize> {
        self.ratios
            .iter()
            .zip(&self.enable_ratios)
            .filter(|(_, &on)| on)
            .map(|(r, _)| r * self.patch)
            .collect()
    }
}

/// Four feature maps at output strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    /// Checks the strides and returns the channel count of each level and
    /// the OS-4 extent.
    pub fn validate(&self, g: &Graph) -> Result<([usize; 4], (usize, usize))> {
        let mut channels = [0; 4];
        let mut base = (0, 0);
        for (i, &v) in self.levels.iter().enumerate() {
            let (c, h, w) = feature_map_dims(g, v, "feature pyramid")?;
            channels[i] = c;
            if i == 0 {
                base = (h, w);
                continue;
            }
            let f = 1 << i;
            if h * f != base.0 || w * f != base.1 {
                return Err(Error::Invalid(format!(
                    "pyramid level {i} is {h}x{w}, expected {}x{} for an OS-4 level of {}x{}",
                    base.0 / f,
                    base.1 / f,
                    base.0,
                    base.1
                )));
            }
        }
        Ok((channels, base))
    }
}

/// One large window attention branch.
#[derive(Clone, Copy, Debug)]
pub struct LawinBranchWeights<T = ParamId> {
    pub attn: AttentionWeights<T>,
    pub mix: ContextMixWeights<T>,
}

/// Weights of the pyramid; `branches` is indexed like `PyramidConfig::ratios`.
#[derive(Clone, Debug)]
pub struct AsppWeights<T = ParamId> {
    pub branches: Vec<Option<LawinBranchWeights<T>>>,
    pub image_pool: Option<Linear<T>>,
    pub reduce: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights<T = ParamId> {
    pub aggregate: Linear<T>,
    pub aspp: Option<AsppWeights<T>>,
    pub fuse: Option<Linear<T>>,
    pub classifier: Linear<T>,
}

impl DecoderWeights<ParamId> {
    /// Registers decoder parameters under `prefix` for a pyramid with the
    /// given per-level channel counts. Disabled branches get no parameters.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &PyramidConfig,
        level_channels: [usize; 4],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let agg_in = level_channels[1] + level_channels[2] + level_channels[3];
        let aggregate = Linear::init(store, &format!("{prefix}.aggregate"), agg_in, d, rng)?;
        let aspp = match cfg.decoder {
            DecoderKind::Lawin => {
                let mut branches = vec![None; cfg.ratios.len()];
                for (i, bc) in cfg.branch_configs()? {
                    let p = format!("{prefix}.aspp.r{}", cfg.ratios[i]);
                    branches[i] = Some(LawinBranchWeights {
                        attn: AttentionWeights::init(store, &format!("{p}.attn"), d, rng)?,
                        mix: ContextMixWeights::init(store, &p, &bc, rng)?,
                    });
                }
                let image_pool = if cfg.enable_image_pool {
                    Some(Linear::init(store, &format!("{prefix}.aspp.image_pool"), d, d, rng)?)
                } else {
                    None
                };
                let reduce = Linear::init(store, &format!("{prefix}.aspp.reduce"), cfg.num_branches() * d, d, rng)?;
                Some(AsppWeights {
                    branches,
                    image_pool,
                    reduce,
                })
            }
            DecoderKind::Linear => None,
        };
        let fuse = if cfg.enable_lowlevel {
            Some(Linear::init(store, &format!("{prefix}.fuse"), d + level_channels[0], d, rng)?)
        } else {
            None
        };
        let classifier = Linear::init(store, &format!("{prefix}.classifier"), d, cfg.num_classes, rng)?;
        Ok(DecoderWeights {
            aggregate,
            aspp,
            fuse,
            classifier,
        })
    }

    pub fn bind(&self, s: &mut Session) -> DecoderWeights<Var> {
        DecoderWeights {
            aggregate: self.aggregate.bind(s),
            aspp: self.aspp.as_ref().map(|a| AsppWeights {
                branches: a
                    .branches
                    .iter()
                    .map(|b| {
                        b.map(|b| LawinBranchWeights {
                            attn: b.attn.bind(s),
                            mix: b.mix.bind(s),
                        })
                    })
                    .collect(),
                image_pool: a.image_pool.map(|l| l.bind(s)),
                reduce: a.reduce.bind(s),
            }),
            fuse: self.fuse.map(|l| l.bind(s)),
            classifier: self.classifier.bind(s),
        }
    }
}

/// Resizes the OS-16 and OS-32 levels to OS-8, concatenates them after the
/// OS-8 level and projects to `D` channels.
pub fn aggregate_levels(g: &mut Graph, pyr: &FeaturePyramid, w: &Linear<Var>) -> Result<Var> {
    pyr.validate(g)?;
    let [_, os8, os16, os32] = pyr.levels;
    let (_, h, wd) = feature_map_dims(g, os8, "aggregate_levels")?;
    let up16 = g.bilinear_resize(os16, h, wd)?;
    let up32 = g.bilinear_resize(os32, h, wd)?;
    let cat = g.concat(&[os8, up16, up32], 0)?;
    linear_1x1(g, cat, w)
}

/// Global average per channel, a linear map, and a bilinear upsample of the
/// `1 × 1` result back to the input extent.
pub fn image_pool_branch(g: &mut Graph, x: Var, w: &Linear<Var>) -> Result<Var> {
    let (c, h, wd) = feature_map_dims(g, x, "image_pool_branch")?;
    let flat = g.reshape(x, &[c, h * wd])?;
    let mean = g.mean_lastdim(flat)?;
    let pooled = g.reshape(mean, &[c, 1, 1])?;
    let y = linear_1x1(g, pooled, w)?;
    g.bilinear_resize(y, h, wd)
}

/// Channel concatenation of every enabled branch, in the order shortcut,
/// large window branches by ratio index, image pooling.
pub fn aspp_features(g: &mut Graph, x: Var, cfg: &PyramidConfig, w: &AsppWeights<Var>) -> Result<Var> {
    let (c, _, _) = feature_map_dims(g, x, "lawin_aspp_forward")?;
    if c != cfg.dim {
        return Err(Error::shape("lawin_aspp_forward", &[cfg.dim], &[c]));
    }
    if cfg.num_branches() == 0 {
        return Err(Error::Config("every LawinASPP branch is disabled".into()));
    }
    let mut parts = vec![];
    if cfg.enable_shortcut {
        parts.push(x);
    }
    for (i, bc) in cfg.branch_configs()? {
        let b = w.branches.get(i).copied().flatten().ok_or_else(|| {
            Error::Config(format!("no weights for the enabled R = {} branch", cfg.ratios[i]))
        })?;
        parts.push(large_window_attention(g, x, &b.attn, &b.mix, &bc)?);
    }
    if cfg.enable_image_pool {
        let l = w
            .image_pool
            .ok_or_else(|| Error::Config("no weights for the enabled image pooling branch".into()))?;
        parts.push(image_pool_branch(g, x, &l)?);
    }
    g.concat(&parts, 0)
}

/// Runs the enabled branches, concatenates them and reduces back to `D`
/// channels.
pub fn lawin_aspp_forward(g: &mut Graph, x: Var, cfg: &PyramidConfig, w: &AsppWeights<Var>) -> Result<Var> {
    let cat = aspp_features(g, x, cfg, w)?;
    linear_1x1(g, cat, &w.reduce)
}

/// Pyramid to OS-4 logits `[num_classes, H/4, W/4]`.
pub fn decode(g: &mut Graph, pyr: &FeaturePyramid, cfg: &PyramidConfig, w: &DecoderWeights<Var>) -> Result<Var> {
    let (_, (h4, w4)) = pyr.validate(g)?;
    let mut x = aggregate_levels(g, pyr, &w.aggregate)?;
    if cfg.decoder == DecoderKind::Lawin {
        let aspp = w
            .aspp
            .as_ref()
            .ok_or_else(|| Error::Config("LawinASPP decoder without pyramid weights".into()))?;
        x = lawin_aspp_forward(g, x, cfg, aspp)?;
    }
    let mut x = g.bilinear_resize(x, h4, w4)?;
    if cfg.enable_lowlevel {
        let fuse = w
            .fuse
            .ok_or_else(|| Error::Config("low-level fusion enabled without weights".into()))?;
        let cat = g.concat(&[x, pyr.levels[0]], 0)?;
        x = linear_1x1(g, cat, &fuse)?;
    }
    linear_1x1(g, x, &w.classifier)
}

#[cfg(test)]
mod tests;
