use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aspp::FeaturePyramid;
use crate::attention::{
    channel_mixing_mlp, feature_map_dims, local_window_attention, Activation, AttentionWeights, ChannelMixWeights,
    LawinConfig, MlpWeights,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linear::{linear_1x1, space_to_depth, Linear};
use crate::params::{ParamId, ParamStore, Session};

/// Four-stage hierarchical encoder: a patch-4 stem, then 2×2 patch merging
/// before stages 2–4, each stage a stack of local window attention and
/// channel-MLP blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEncoderConfig {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    /// Stem patch side; only 4 gives strides 4/8/16/32.
    pub stem_patch: usize,
    /// Upper bound on the local attention window side.
    pub window: usize,
    /// Channel-MLP hidden width as a multiple of the stage width.
    pub mlp_ratio: usize,
    pub activation: Activation,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            widths: [16, 32, 48, 64],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            stem_patch: 4,
            window: 4,
            mlp_ratio: 2,
            activation: Activation::Gelu,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_patch != 4 {
            return Err(Error::Config(format!(
                "stem patch must be 4 for output strides 4/8/16/32, got {}",
                self.stem_patch
            )));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("window and mlp_ratio must be positive".into()));
        }
        for i in 0..4 {
            if self.widths[i] == 0 || self.heads[i] == 0 || !self.widths[i].is_multiple_of(self.heads[i]) {
                return Err(Error::Config(format!(
                    "stage {} width {} is not divisible by {} heads",
                    i + 1,
                    self.widths[i],
                    self.heads[i]
                )));
            }
        }
        Ok(())
    }

    /// Largest window side `≤ window` that tiles an `h × w` map.
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        (1..=self.window.min(h).min(w)).rev().find(|p| h.is_multiple_of(*p) && w.is_multiple_of(*p)).unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock<T = ParamId> {
    pub attn: AttentionWeights<T>,
    pub mlp: ChannelMixWeights<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderStage<T = ParamId> {
    /// Stem (stage 1) or patch merging (stages 2–4).
    pub embed: Linear<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderWeights<T = ParamId> {
    pub stages: Vec<EncoderStage<T>>,
}

impl EncoderWeights<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ToyEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let p = format!("{prefix}.stage{}", i + 1);
            let inputs = if i == 0 { 3 * cfg.stem_patch * cfg.stem_patch } else { 4 * cfg.widths[i - 1] };
            let width = cfg.widths[i];
            let embed = Linear::init(store, &format!("{p}.embed"), inputs, width, rng)?;
            let mut blocks = Vec::with_capacity(cfg.blocks[i]);
            for b in 0..cfg.blocks[i] {
                let bp = format!("{p}.block{b}");
                blocks.push(EncoderBlock {
                    attn: AttentionWeights::init(store, &format!("{bp}.attn"), width, rng)?,
                    mlp: MlpWeights::init(store, &format!("{bp}.mlp"), width, width * cfg.mlp_ratio, rng)?,
                });
            }
            stages.push(EncoderStage { embed, blocks });
        }
        Ok(EncoderWeights { stages })
    }

    pub fn bind(&self, s: &mut Session) -> EncoderWeights<Var> {
        EncoderWeights {
            stages: self
                .stages
                .iter()
                .map(|st| EncoderStage {
                    embed: st.embed.bind(s),
                    blocks: st
                        .blocks
                        .iter()
                        .map(|b| EncoderBlock {
                            attn: b.attn.bind(s),
                            mlp: b.mlp.bind(s),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// `[3, H, W]` image to the four-level feature pyramid.
pub fn toy_encoder_forward(
    g: &mut Graph,
    img: Var,
    cfg: &ToyEncoderConfig,
    w: &EncoderWeights<Var>,
) -> Result<FeaturePyramid> {
    let (c, h, wd) = feature_map_dims(g, img, "toy_encoder_forward")?;
    if c != 3 {
        return Err(Error::shape("toy_encoder_forward", &[3, h, wd], &[c, h, wd]));
    }
    if h % 32 != 0 || wd % 32 != 0 {
        return Err(Error::PadRequired {
            op: "toy_encoder_forward",
            extent: if h % 32 != 0 { h } else { wd },
            divisor: 32,
        });
    }
    let mut x = img;
    let mut levels = Vec::with_capacity(4);
    for (i, stage) in w.stages.iter().enumerate() {
        let k = if i == 0 { cfg.stem_patch } else { 2 };
        let patches = space_to_depth(g, x, k)?;
        x = linear_1x1(g, patches, &stage.embed)?;
        let (_, sh, sw) = feature_map_dims(g, x, "toy_encoder_forward")?;
        let local = LawinConfig::local(cfg.window_for(sh, sw), cfg.heads[i], cfg.widths[i])?;
        for b in &stage.blocks {
            x = local_window_attention(g, x, &b.attn, &local)?;
            x = channel_mixing_mlp(g, x, &b.mlp, cfg.activation)?;
        }
        levels.push(x);
    }
    Ok(FeaturePyramid {
        levels: [levels[0], levels[1], levels[2], levels[3]],
    })
}
