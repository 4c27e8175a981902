use std::borrow::Cow;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_classes, ConfusionMatrix, Segmenter};
use crate::checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// SGD with momentum 0.9.
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds initialisation and data order.
    pub seed: u64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub precision: Precision,
    /// Mirror each drawn image left-right with probability ½.
    pub flip: bool,
    /// Set from the dataset description rather than serialized with the schedule.
    #[serde(skip)]
    pub ignore_index: usize,
    /// Write `step_NNNNNN.lawn` every this many steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerKind::Adam,
            precision: Precision::F64,
            flip: false,
            ignore_index: 255,
            checkpoint_every: 0,
        }
    }
}

/// Runtime settings that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Worker threads for per-image passes; 0 or 1 runs on the calling thread.
    pub threads: usize,
    /// Checkpoint directory; `final.lawn` is written there on completion.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Metrics of one step, measured on that step's batch at output stride 4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

/// Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) or momentum SGD over a parameter store.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Optimizer {
            kind,
            lr,
            t: 0,
            m: zeros(),
            v: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Sgd => vec![],
            },
        }
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let v = self.v[i].data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = B1 * m[j] + (1.0 - B1) * gj;
                        v[j] = B2 * v[j] + (1.0 - B2) * gj * gj;
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        m[j] = 0.9 * m[j] + g.data()[j];
                        p[j] -= self.lr * m[j];
                    }
                }
            }
        }
    }
}

struct ImagePass {
    loss: f64,
    grads: Vec<Option<Tensor>>,
    pred: Vec<usize>,
    truth: Vec<usize>,
}

fn image_pass(model: &Segmenter, sample: &Sample, ignore: usize) -> Result<ImagePass> {
    let mut s = Session::new(&model.store, true);
    let img = s.constant(sample.image.clone());
    let logits = model.forward(&mut s, img)?;
    let (h4, w4) = (s.shape(logits)[1], s.shape(logits)[2]);
    let truth = sample.labels_at(h4, w4);
    let loss = s.cross_entropy(logits, &truth, ignore)?;
    let value = s.value(loss).item()?;
    let pred = argmax_classes(s.value(logits));
    let grads = if value.is_finite() {
        let g = s.backward(loss)?;
        s.param_grads(&g)
    } else {
        vec![]
    };
    Ok(ImagePass {
        loss: value,
        grads,
        pred,
        truth,
    })
}

/// Trains `model` in place for `cfg.steps` steps, calling `on_step` after
/// each one. Each step averages per-image gradients over a batch drawn from
/// a seeded per-epoch shuffle.
pub fn train(
    model: &mut Segmenter,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for s in &data.samples {
        s.check_labels(data.num_classes)?;
    }
    if data.num_classes != model.config.pyramid.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes, model.config.pyramid.num_classes
        )));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.store);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &data.samples[order[cursor]];
            batch.push(if cfg.flip && order_rng.gen_bool(0.5) {
                Cow::Owned(sample.flipped())
            } else {
                Cow::Borrowed(sample)
            });
            cursor += 1;
        }
        let run = |s: &Cow<Sample>| image_pass(model, s, cfg.ignore_index);
        let passes: Vec<ImagePass> = match &pool {
            Some(p) => p.install(|| batch.par_iter().map(run).collect::<Result<_>>())?,
            None => batch.iter().map(run).collect::<Result<_>>()?,
        };

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut confusion = ConfusionMatrix::new(data.num_classes);
        let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
        for pass in passes {
            loss += pass.loss * scale;
            confusion.add_all(&pass.truth, &pass.pred, cfg.ignore_index);
            for (acc, g) in grads.iter_mut().zip(pass.grads) {
                let Some(g) = g else { continue };
                match acc {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y * scale;
                        }
                    }
                    None => *acc = Some(g.map(|v| v * scale)),
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut model.store, &grads);

        let m = StepMetrics {
            step,
            loss,
            pixel_accuracy: confusion.pixel_accuracy(),
            miou: confusion.miou(),
        };
        on_step(&m);
        history.push(m);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("step_{step:06}.lawn")), &model.store)?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint::save(&dir.join("final.lawn"), &model.store)?;
    }
    Ok(history)
}
