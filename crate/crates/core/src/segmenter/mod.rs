//! Toy segmentation model: hierarchical encoder plus LawinASPP decoder,
//! pixelwise cross-entropy, training and evaluation.

mod encoder;
mod metrics;
mod train;

pub use encoder::{toy_encoder_forward, EncoderBlock, EncoderStage, EncoderWeights, ToyEncoderConfig};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use train::{train, LossKind, Optimizer, OptimizerKind, Precision, StepMetrics, TrainConfig, TrainOptions};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aspp::{decode, DecoderWeights, FeaturePyramid, PyramidConfig};
use crate::autodiff::Var;
use crate::data::{Dataset, Sample};
use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: ToyEncoderConfig,
    pub pyramid: PyramidConfig,
}

impl ModelConfig {
    /// Toy encoder with the desk-scale pyramid (`P = 2`, `D = 64`).
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            encoder: ToyEncoderConfig::default(),
            pyramid: PyramidConfig::desk(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pyramid.validate()
    }
}

pub struct Segmenter {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub decoder: DecoderWeights,
}

impl Segmenter {
    /// Initialises every parameter from `seed`. Encoder and decoder draw from
    /// separate streams, so changing the decoder leaves the encoder weights
    /// unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderWeights::init(&mut store, "encoder", &config.encoder, &mut enc_rng)?;
        let mut dec_rng = ChaCha8Rng::seed_from_u64(seed);
        dec_rng.set_stream(1);
        let decoder = DecoderWeights::init(&mut store, "decoder", &config.pyramid, config.encoder.widths, &mut dec_rng)?;
        Ok(Segmenter {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encode(&self, s: &mut Session, img: Var) -> Result<FeaturePyramid> {
        let w = self.encoder.bind(s);
        toy_encoder_forward(s, img, &self.config.encoder, &w)
    }

    /// `[3, H, W]` image to `[num_classes, H/4, W/4]` logits.
    pub fn forward(&self, s: &mut Session, img: Var) -> Result<Var> {
        let pyr = self.encode(s, img)?;
        let w = self.decoder.bind(s);
        decode(s, &pyr, &self.config.pyramid, &w)
    }

    pub fn logits(&self, img: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let x = s.constant(img.clone());
        let y = self.forward(&mut s, x)?;
        Ok(s.value(y).clone())
    }

    /// Per-pixel class prediction at the label resolution: argmax of the
    /// OS-4 logits, upsampled by nearest neighbour.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        let logits = self.logits(&sample.image)?;
        let coarse = argmax_classes(&logits);
        let (h4, w4) = (logits.shape()[1], logits.shape()[2]);
        Ok(upsample_nearest(&coarse, h4, w4, sample.height(), sample.width()))
    }
}

/// Class index of the largest logit at every position of `[K, H, W]`.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let &[k, h, w] = logits.shape() else {
        panic!("argmax_classes needs [K, H, W] logits");
    };
    let hw = h * w;
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Nearest-neighbour resize of a row-major `h × w` grid to `oh × ow`.
pub fn upsample_nearest(grid: &[usize], h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((2 * y + 1) * h / (2 * oh)).min(h - 1);
        for x in 0..ow {
            let sx = ((2 * x + 1) * w / (2 * ow)).min(w - 1);
            out.push(grid[sy * w + sx]);
        }
    }
    out
}

/// Full-resolution predictions and metrics over a dataset.
pub struct Evaluation {
    pub report: EvalReport,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Segmenter, data: &Dataset, ignore_index: usize) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(data.num_classes);
    let mut predictions = Vec::with_capacity(data.len());
    for sample in &data.samples {
        let pred = model.predict(sample)?;
        let truth: Vec<usize> = sample.labels.iter().map(|&l| l as usize).collect();
        confusion.add_all(&truth, &pred, ignore_index);
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: confusion.report(),
        confusion,
        predictions,
    })
}
