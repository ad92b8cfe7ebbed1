//! Mini-batch SGD with global-norm clipping and validation-based early
//! stopping.
//!
//! Every random choice is keyed by the run seed plus a fixed position
//! (epoch, slot in the epoch), and per-batch gradients are summed over a
//! fixed partition of the batch in a fixed order. The thread count therefore
//! never changes the result.

use std::fmt;
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::Matrix;
use crate::error::{Error, Result};
use crate::features::{FeatureTable, VisualFeature};
use crate::model::{sentence_forward, Dims, GradTape, LossConfig, ModelParams, NegativeSampler, Variant};
use crate::text::{encode, ImageSentences, TokenSequence, Vocabulary};

/// Gradient partitions per batch. Fixed so results do not depend on the
/// number of worker threads.
pub const GRADIENT_SHARDS: usize = 8;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NEGATIVE_STREAM: u64 = 0x4e45_4741;
const VALIDATION_STREAM: u64 = 0x5641_4c49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub learning_rate: f64,
    /// Sentences per step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub lambda: f64,
    pub num_negatives: usize,
    pub seed: u64,
    /// Share of images held out, taken from the end of the corpus.
    pub validation_fraction: f64,
    pub max_validation_images: usize,
    /// Steps between validation passes; 0 means once per epoch.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::A,
            embed_dim: 128,
            state_dim: 512,
            learning_rate: 1.0,
            batch_size: 256,
            clip_norm: 10.0,
            max_epochs: 5,
            lambda: 1.0,
            num_negatives: 1024,
            seed: 0,
            validation_fraction: 0.05,
            max_validation_images: 10_000,
            eval_interval: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("num_negatives", self.num_negatives),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize, feature: usize) -> Dims {
        Dims {
            vocab,
            embed: self.embed_dim,
            state: self.state_dim,
            feature,
        }
    }
}

fn glorot(m: &mut Matrix, rng: &mut ChaCha8Rng) {
    let s = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
    for x in m.as_mut_slice() {
        *x = rng.random_range(-s..=s);
    }
}

/// Glorot-uniform weights, reset and update gate biases at 1, other biases 0.
pub fn init_params(variant: Variant, dims: Dims, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(variant, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    glorot(&mut p.embedding, &mut rng);
    if !variant.shares_softmax() {
        glorot(p.softmax_mut(), &mut rng);
    }
    glorot(&mut p.w_reset, &mut rng);
    glorot(&mut p.w_update, &mut rng);
    glorot(&mut p.w_candidate, &mut rng);
    glorot(&mut p.w_decode, &mut rng);
    if let Some(w) = p.w_image.as_mut() {
        glorot(w, &mut rng);
    }
    p.b_reset.fill(1.0);
    p.b_update.fill(1.0);
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Norm of the mean gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Averages `summed` over `n` sentences, clips its global norm to
/// `clip_norm`, and takes one plain gradient step.
pub fn sgd_step(
    params: &mut ModelParams,
    summed: &mut GradTape,
    n: usize,
    learning_rate: f64,
    clip_norm: f64,
) -> Result<StepStats> {
    if n == 0 {
        return Err(Error::Config("gradient step over an empty batch".into()));
    }
    summed.scale(1.0 / n as f64);
    let grad_norm = summed.norm();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
    }
    let clipped = grad_norm > clip_norm;
    if clipped {
        summed.scale(clip_norm / grad_norm);
    }
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(summed.grads().tensors()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= learning_rate * d;
        }
    }
    Ok(StepStats { grad_norm, clipped })
}

/// Stops after `patience` consecutive evaluations that fail to beat the best
/// loss so far. The first observation only sets the baseline.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Records a loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if loss >= b => {
                self.bad += 1;
                self.bad >= self.patience
            }
            _ => {
                self.best = Some(loss);
                self.bad = 0;
                false
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub seq: TokenSequence,
    /// Index into [`TrainingData::features`].
    pub image: usize,
}

/// Encoded sentences with their images, split into training and validation
/// parts by image.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub image_ids: Vec<String>,
    /// One entry per image; `None` for the text-only model.
    pub features: Vec<Option<VisualFeature>>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

impl TrainingData {
    /// Encodes every sentence and attaches features. Sentences with no
    /// in-vocabulary word are dropped. The last images (by corpus order) form
    /// the validation set.
    pub fn build(
        groups: &[ImageSentences],
        vocab: &Vocabulary,
        features: Option<&FeatureTable>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let needs = cfg.variant.uses_features();
        if needs && features.is_none() {
            return Err(Error::Data(format!(
                "variant {} needs image features",
                cfg.variant
            )));
        }
        let n_images = groups.len();
        let n_val = if cfg.validation_fraction > 0.0 && n_images > 1 {
            ((n_images as f64 * cfg.validation_fraction).round() as usize)
                .clamp(1, cfg.max_validation_images.max(1))
                .min(n_images - 1)
        } else {
            0
        };
        let mut data = TrainingData {
            image_ids: Vec::with_capacity(n_images),
            features: Vec::with_capacity(n_images),
            train: Vec::new(),
            validation: Vec::new(),
        };
        let mut dropped = 0usize;
        for (i, g) in groups.iter().enumerate() {
            let feature = if needs {
                let table = features.expect("checked above");
                let f = table.get(&g.image_id).ok_or_else(|| {
                    Error::Data(format!("no feature vector for image {}", g.image_id))
                })?;
                Some(f.clone())
            } else {
                None
            };
            data.image_ids.push(g.image_id.clone());
            data.features.push(feature);
            let dest = if i >= n_images - n_val {
                &mut data.validation
            } else {
                &mut data.train
            };
            for s in &g.sentences {
                let seq = encode(s, vocab);
                if seq.content().next().is_none() {
                    dropped += 1;
                    continue;
                }
                dest.push(Example { seq, image: i });
            }
        }
        if dropped > 0 {
            warn!("{dropped} sentences have no known word and were dropped");
        }
        if data.train.is_empty() {
            return Err(Error::Data("no training sentences".into()));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean sentence loss since the previous row; absent for the baseline.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(out, "step,epoch,train_loss,val_loss")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.step, r.epoch, cell(r.train_loss), cell(r.val_loss))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss (the final ones when there is
    /// no validation set).
    pub params: ModelParams,
    pub log: TrainLog,
    pub best_val_loss: Option<f64>,
    /// Mean per-token loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

fn sentence_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(stream);
    rng
}

/// Sums of per-sentence totals, per-token base losses and scored positions.
#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    total: f64,
    token_loss: f64,
    tokens: usize,
}

impl LossSums {
    fn add(&mut self, o: LossSums) {
        self.total += o.total;
        self.token_loss += o.token_loss;
        self.tokens += o.tokens;
    }
}

/// Gradient of the summed loss of `batch` into `shards[0]`.
fn batch_gradient(
    params: &ModelParams,
    data: &TrainingData,
    batch: &[(u64, &Example)],
    loss: &LossConfig<'_>,
    seed: u64,
    shards: &mut [GradTape],
) -> Result<LossSums> {
    let per = batch.len().div_ceil(shards.len()).max(1);
    let used = batch.len().div_ceil(per);
    let sums: Vec<LossSums> = shards[..used]
        .par_iter_mut()
        .zip(batch.par_chunks(per))
        .map(|(tape, chunk)| {
            tape.zero();
            let mut s = LossSums::default();
            for &(stream, ex) in chunk {
                let mut rng = sentence_rng(seed, NEGATIVE_STREAM, stream);
                let f = data.features[ex.image].as_ref();
                let out = sentence_forward(params, &ex.seq, f, loss, &mut rng, Some(tape))?;
                s.add(LossSums {
                    total: out.total,
                    token_loss: out.base * out.scored as f64,
                    tokens: out.scored,
                });
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let (first, rest) = shards.split_at_mut(1);
    for t in &rest[..used - 1] {
        first[0].add_assign(t);
    }
    let mut total = LossSums::default();
    for s in sums {
        total.add(s);
    }
    Ok(total)
}

/// Mean total loss over the validation sentences. Each sentence always sees
/// the same negatives, so successive evaluations are comparable.
pub fn validation_loss(
    params: &ModelParams,
    data: &TrainingData,
    loss: &LossConfig<'_>,
    seed: u64,
) -> Result<Option<f64>> {
    if data.validation.is_empty() {
        return Ok(None);
    }
    let losses: Vec<f64> = data
        .validation
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = sentence_rng(seed, VALIDATION_STREAM, i as u64);
            let f = data.features[ex.image].as_ref();
            Ok(sentence_forward(params, &ex.seq, f, loss, &mut rng, None)?.total)
        })
        .collect::<Result<_>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Number of negatives actually drawn: the configured count, capped by the
/// size of the sampling support.
pub fn effective_negatives(requested: usize, sampler: &NegativeSampler) -> usize {
    let cap = sampler.eligible_count().saturating_sub(1);
    if requested > cap {
        warn!("only {cap} words can serve as negatives; using {cap} instead of {requested}");
    }
    requested.min(cap)
}

pub fn train(data: &TrainingData, vocab: &Vocabulary, feature_dim: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_params(cfg.variant, cfg.dims(vocab.len(), feature_dim), cfg.seed), data, vocab, cfg)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    data: &TrainingData,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.variant() != cfg.variant || params.dims().vocab != vocab.len() {
        return Err(Error::Config("initial parameters do not match the configuration".into()));
    }
    let sampler = NegativeSampler::from_vocab(vocab)?;
    let loss = LossConfig {
        sampler: &sampler,
        num_negatives: effective_negatives(cfg.num_negatives, &sampler),
        lambda: cfg.lambda,
    };
    let mut shards: Vec<GradTape> = (0..GRADIENT_SHARDS.min(cfg.batch_size))
        .map(|_| GradTape::for_params(&params))
        .collect();

    let mut log = TrainLog::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let baseline = validation_loss(&params, data, &loss, cfg.seed)?;
    log.rows.push(LogRow {
        step: 0,
        epoch: 0,
        train_loss: None,
        val_loss: baseline,
    });
    let mut best = params.clone();
    if let Some(v) = baseline {
        stopper.observe(v);
        info!("initial validation loss {v:.4}");
    }

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    let mut since_eval = LossSums::default();
    let mut since_eval_sentences = 0usize;
    let mut stopped_early = false;
    let mut epochs = 0usize;

    let mut evaluate = |params: &ModelParams,
                        step: usize,
                        epoch: usize,
                        since: &mut LossSums,
                        n: &mut usize,
                        log: &mut TrainLog,
                        best: &mut ModelParams|
     -> Result<bool> {
        let val = validation_loss(params, data, &loss, cfg.seed)?;
        let train_loss = (*n > 0).then(|| since.total / *n as f64);
        *since = LossSums::default();
        *n = 0;
        log.rows.push(LogRow {
            step,
            epoch,
            train_loss,
            val_loss: val,
        });
        info!(
            "epoch {epoch} step {step}: train {:.4} val {}",
            train_loss.unwrap_or(f64::NAN),
            val.map_or("-".into(), |v| format!("{v:.4}"))
        );
        match val {
            Some(v) => {
                let prev_best = stopper.best();
                let stop = stopper.observe(v);
                if prev_best.is_none_or(|b| v < b) {
                    *best = params.clone();
                }
                Ok(stop)
            }
            None => {
                *best = params.clone();
                Ok(false)
            }
        }
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        let mut shuffle_rng = sentence_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let base = (epoch as u64) << 32;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(u64, &Example)> = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| (base + (b * cfg.batch_size + j) as u64, &data.train[i]))
                .collect();
            let sums = batch_gradient(&params, data, &batch, &loss, cfg.seed, &mut shards)?;
            let stats = sgd_step(&mut params, &mut shards[0], batch.len(), cfg.learning_rate, cfg.clip_norm)?;
            step += 1;
            step_losses.push(sums.token_loss / sums.tokens.max(1) as f64);
            since_eval.add(sums);
            since_eval_sentences += batch.len();
            debug!(
                "step {step}: loss {:.4} grad norm {:.3}{}",
                sums.total / batch.len() as f64,
                stats.grad_norm,
                if stats.clipped { " (clipped)" } else { "" }
            );
            if cfg.eval_interval > 0
                && step.is_multiple_of(cfg.eval_interval)
                && evaluate(&params, step, epoch, &mut since_eval, &mut since_eval_sentences, &mut log, &mut best)?
            {
                stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.eval_interval == 0
            && evaluate(&params, step, epoch, &mut since_eval, &mut since_eval_sentences, &mut log, &mut best)?
        {
            stopped_early = true;
            break;
        }
    }
    if !stopped_early && since_eval_sentences > 0 {
        evaluate(&params, step, epochs, &mut since_eval, &mut since_eval_sentences, &mut log, &mut best)?;
    }
    if stopped_early {
        info!("validation loss stopped improving; stopping after {step} steps");
    }
    Ok(TrainOutcome {
        params: best,
        best_val_loss: stopper.best(),
        log,
        step_losses,
        steps: step,
        epochs,
        stopped_early,
    })
}
