//! Deterministic training loop: per-cell NLL over the gold grid, AdamW with
//! decoupled weight decay, per-epoch dev evaluation and best-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_label_set, AnnotatedExample, LabelSet, TokenVectors};
use crate::decoder::decode_entities;
use crate::error::{Error, Result};
use crate::eval::{span_f1, EvalResult};
use crate::kernel::{Graph, Tensor, Var};
use crate::model::{Mode, Model, ModelConfig, ModelInput};
use crate::tagging::{encode_grid, GridLabelMatrix};
use crate::vocab::Vocab;

fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Examples whose gradients are averaged into one optimizer step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Rescale the averaged gradient when its global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Per-label loss weights by label name (`None`, `Frag`, `Gap`, types); unlisted labels weigh 1.
    #[serde(default)]
    pub class_weights: Option<std::collections::BTreeMap<String, f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            clip_norm: None,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and clip_norm > 0".into(),
            ));
        }
        Ok(())
    }

    fn weights_for(&self, labels: &LabelSet) -> Result<Option<Vec<f64>>> {
        let Some(map) = &self.class_weights else {
            return Ok(None);
        };
        let mut w = vec![1.0; labels.len()];
        for (name, &value) in map {
            let id = labels
                .id_of(name)
                .ok_or_else(|| Error::Config(format!("class weight for unknown label `{name}`")))?;
            if !(value >= 0.0) {
                return Err(Error::Config(format!(
                    "class weight for `{name}` must be >= 0"
                )));
            }
            w[id.0] = value;
        }
        Ok(Some(w))
    }
}

/// Width and dropout settings; vocabulary and label counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    #[serde(default)]
    pub d_prime: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.5
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            embed_dim: 64,
            lstm_hidden: 32,
            d_prime: None,
            dropout: default_dropout(),
        }
    }
}

/// One example ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub input: ModelInput,
    /// Gold label id per cell, row-major; empty for examples without a gold grid.
    pub targets: Vec<usize>,
}

/// Maps tokens (or looks up vectors) for `example`.
pub fn model_input(
    example: &AnnotatedExample,
    vocab: &Vocab,
    vectors: Option<&TokenVectors>,
) -> Result<ModelInput> {
    match vectors {
        Some(v) => ModelInput::from_vectors(v.for_example(example)?),
        None => Ok(ModelInput::Tokens(vocab.ids(example.sentence().tokens()))),
    }
}

fn grid_targets(grid: &GridLabelMatrix) -> Vec<usize> {
    grid.cells().iter().map(|l| l.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev: Option<EvalResult>,
    /// Dev examples whose predicted grid exceeded the decoder's path cap and
    /// were scored as predicting nothing.
    pub capped: usize,
}

impl EpochRecord {
    /// `epoch=.. loss=.. dev_p=.. dev_r=.. dev_f1=..`
    pub fn metrics_line(&self) -> String {
        let mut s = format!("epoch={} loss={:.6}", self.epoch, self.loss);
        if let Some(d) = &self.dev {
            s.push_str(&format!(
                " dev_p={:.4} dev_r={:.4} dev_f1={:.4}",
                d.precision, d.recall, d.f1
            ));
        }
        if self.capped > 0 {
            s.push_str(&format!(" capped={}", self.capped));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Training examples left out because their grid could not be encoded.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters of the best epoch.
    pub model: Model,
    pub labels: LabelSet,
    pub vocab: Vocab,
}

/// Mean NLL of the gold label over all `n * n` cells.
pub fn nll_loss(
    g: &mut Graph,
    probs: Var,
    gold: &GridLabelMatrix,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    let n = gold.n();
    if shape.len() != 3 || shape[0] != n || shape[1] != n {
        return Err(Error::Invalid(format!(
            "probabilities {shape:?} do not match a {n}x{n} grid"
        )));
    }
    if let Some(bad) = gold.cells().iter().find(|l| l.0 >= shape[2]) {
        return Err(Error::Invalid(format!(
            "gold label {} outside {} classes",
            bad.0, shape[2]
        )));
    }
    Ok(g.nll(probs, &grid_targets(gold), weights)?)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[&Tensor], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *x -= self.lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// Loss and parameter gradients of one example.
pub fn example_gradients(
    model: &Model,
    example: &Prepared,
    weights: Option<&[f64]>,
    mode: &mut Mode<'_>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let trace = model.forward(&mut g, &p, &example.input, mode)?;
    let loss = g.nll(trace.probs, &example.targets, weights)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            id: example.id.clone(),
        });
    }
    let grads = g.backward(loss)?;
    let per_param = p
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| {
            grads
                .data(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    Ok((value, per_param))
}

/// Decodes the model's grid for every example into predicted mentions.
/// Examples whose decoding hits the path cap are returned with no mentions
/// and counted.
pub fn predict_corpus(
    model: &Model,
    labels: &LabelSet,
    vocab: &Vocab,
    corpus: &[AnnotatedExample],
    vectors: Option<&TokenVectors>,
) -> Result<(Vec<AnnotatedExample>, usize)> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut capped = 0;
    for ex in corpus {
        let grid = model.predict_grid(&model_input(ex, vocab, vectors)?)?;
        let mentions = match decode_entities(&grid, labels) {
            Ok(m) => m,
            Err(Error::PathCap { .. }) => {
                capped += 1;
                Default::default()
            }
            Err(e) => return Err(e),
        };
        out.push(ex.with_entities(mentions)?);
    }
    Ok((out, capped))
}

/// Trains a fresh model on `train`, scoring `dev` after every epoch.
/// With an empty `dev` the last epoch is kept.
pub fn train(
    train: &[AnnotatedExample],
    dev: &[AnnotatedExample],
    hyper: &ModelHyper,
    config: &TrainConfig,
    vectors: Option<&TokenVectors>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let labels = derive_label_set(train);
    let vocab = Vocab::build(train);
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: vectors.map_or(hyper.embed_dim, TokenVectors::dim),
        lstm_hidden: hyper.lstm_hidden,
        d_prime: hyper.d_prime,
        num_labels: labels.len(),
        dropout: hyper.dropout,
        pretrained_vectors: vectors.is_some(),
    };
    let mut model = Model::new(model_config, config.seed)?;
    let weights = config.weights_for(&labels)?;

    let mut prepared = Vec::with_capacity(train.len());
    let mut skipped = Vec::new();
    for ex in train {
        match encode_grid(ex, &labels) {
            Ok((grid, _)) => prepared.push(Prepared {
                id: ex.id().to_string(),
                input: model_input(ex, &vocab, vectors)?,
                targets: grid_targets(&grid),
            }),
            Err(Error::TypeCollision { .. }) => skipped.push(ex.id().to_string()),
            Err(e) => return Err(e),
        }
    }
    if prepared.is_empty() {
        return Err(Error::Invalid(
            "no training example could be encoded".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = {
        let params: Vec<&Tensor> = model.params().tensors().collect();
        AdamW::new(&params, config.learning_rate, config.weight_decay)
    };
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = model
                .params()
                .tensors()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            for &k in batch {
                let (loss, grads) = example_gradients(
                    &model,
                    &prepared[k],
                    weights.as_deref(),
                    &mut Mode::Train(&mut rng),
                )?;
                total_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut norm_sq = 0.0;
            for x in acc.iter_mut().flatten() {
                *x *= scale;
                norm_sq += *x * *x;
            }
            if let Some(clip) = config.clip_norm {
                let norm = norm_sq.sqrt();
                if norm > clip {
                    for x in acc.iter_mut().flatten() {
                        *x *= clip / norm;
                    }
                }
            }
            let mut params: Vec<&mut Tensor> = model.params_mut().tensors_mut().collect();
            optimizer.step(&mut params, &acc);
            if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFiniteParameter(name.to_string()));
            }
        }

        let (dev_result, capped) = if dev.is_empty() {
            (None, 0)
        } else {
            let (pred, capped) = predict_corpus(&model, &labels, &vocab, dev, vectors)?;
            (Some(span_f1(&pred, dev)?), capped)
        };
        let record = EpochRecord {
            epoch,
            loss: total_loss / prepared.len() as f64,
            dev: dev_result,
            capped,
        };
        on_epoch(&record);
        let score = dev_result.map_or(epoch as f64, |d| d.f1);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        records.push(record);
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        report: TrainReport {
            epochs: records,
            best_epoch,
            skipped,
        },
        model: best_model,
        labels,
        vocab,
    })
}
