//! Stage one: per-domain positive and negative prompt labels.
//!
//! The positive prompt is fitted with softmax cross-entropy over
//! `<t+_i, phi(x)> / tau`. The negative prompt is fitted with binary
//! cross-entropy of `sigmoid(<t-_i, phi(x)> / tau_bce)` against the complement
//! of the one-hot label, so "a photo without class i" is true for every wrong
//! class.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::DomainDataset;
use crate::encoders::{ClassVocabulary, EncoderPair};
use crate::error::{Error, Result};
use crate::numkernel::{optimizer_step, Graph, LrSchedule, OptimizerState, ParamStore, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPL1";
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptVector {
    tokens: Tensor,
}

impl PromptVector {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::shape("prompt must be a context_len x d_tok matrix"));
        }
        if !tokens.is_finite() {
            return Err(Error::numeric("prompt has non-finite entries"));
        }
        Ok(PromptVector { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn context_len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tokens.data().to_vec()
    }

    pub fn distance(&self, other: &PromptVector) -> f64 {
        self.tokens.squared_distance(&other.tokens).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeTarget {
    pub bits: Vec<u8>,
}

impl NegativeTarget {
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

pub fn negative_target(label: usize, k: usize) -> Result<NegativeTarget> {
    if label >= k {
        return Err(Error::param(format!("label {label} out of range for {k} classes")));
    }
    Ok(NegativeTarget {
        bits: (0..k).map(|i| u8::from(i != label)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Set from the run configuration, not the stage section.
    #[serde(skip)]
    pub tau: f64,
    #[serde(skip)]
    pub tau_bce: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 70,
            lr: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            tau: 0.1,
            tau_bce: 0.1,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Validation {
            field: format!("stage1.{field}"),
            reason: reason.to_string(),
        };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(bad("tau", "must be positive"));
        }
        if !(self.tau_bce > 0.0) {
            return Err(bad("tau_bce", "must be positive"));
        }
        Ok(())
    }
}

/// Similarities `<t_i, e>` as an `n x K` node, for a single prompt.
pub fn similarities_on_graph(
    g: &mut Graph,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    prompt: Var,
    template: &Tensor,
    embeddings: &Tensor,
) -> Result<Var> {
    let t = enc.text_features(g, prompt, template, vocab)?;
    let e = g.constant(embeddings.clone());
    let tt = g.transpose(t);
    g.matmul(e, tt)
}

/// `n x K` similarity matrix of `embeddings` against one prompt's text features.
pub fn similarities(
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    prompt: &PromptVector,
    template: &Tensor,
    embeddings: &Tensor,
) -> Result<Tensor> {
    let feats = enc.encode_text_batch(prompt.tokens(), template, vocab)?;
    embeddings.matmul(&feats.transpose())
}

fn check_batch(embeddings: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(<t+_i, e> / tau)` against the labels.
pub fn positive_label_loss(
    g: &mut Graph,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    prompt: Var,
    embeddings: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    check_batch(embeddings, labels)?;
    let s = similarities_on_graph(g, enc, vocab, prompt, &vocab.positive_template, embeddings)?;
    let z = g.scale(s, 1.0 / tau);
    g.cross_entropy(z, labels)
}

/// Binary cross-entropy against complement-of-one-hot targets, averaged over
/// classes and then over the batch.
pub fn negative_label_loss(
    g: &mut Graph,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    prompt: Var,
    embeddings: &Tensor,
    labels: &[usize],
    tau_bce: f64,
) -> Result<Var> {
    check_batch(embeddings, labels)?;
    let k = vocab.num_classes();
    let mut targets = Vec::with_capacity(labels.len() * k);
    for &y in labels {
        targets.extend(negative_target(y, k)?.as_f64());
    }
    let s = similarities_on_graph(g, enc, vocab, prompt, &vocab.negative_template, embeddings)?;
    let z = g.scale(s, 1.0 / tau_bce);
    g.bce_with_logits(z, &targets, BCE_CLAMP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPromptLabelPair {
    pub domain: usize,
    pub positive: PromptVector,
    pub negative: PromptVector,
    pub val_accuracy: f64,
    pub val_ce: f64,
    pub val_bce: f64,
    /// Accuracy of the selected positive prompt on the training split.
    pub train_accuracy: f64,
    /// 1-based epochs of the selected positive and negative snapshots.
    pub epoch_selected: usize,
    pub epoch_selected_negative: usize,
    /// Fitted on a held-out target for diagnostics; never a training artifact.
    pub oracle: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub positive_loss: f64,
    pub positive_train_accuracy: f64,
    pub positive_val_accuracy: f64,
    pub positive_val_ce: f64,
    pub negative_loss: f64,
    pub negative_val_bce: f64,
    /// Fraction of validation samples whose true class has the lowest
    /// negative similarity.
    pub negative_val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct LabelTraining {
    pub pair: DomainPromptLabelPair,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed, a, b)
}

pub(crate) fn accuracy_argmax(s: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(s.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn accuracy_argmin(s: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = s.row(i);
            (0..row.len()).fold(0, |b, j| if row[j] < row[b] { j } else { b }) == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

fn ce_value(s: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = s.row(i).iter().map(|v| v / tau).collect();
        total += crate::numkernel::graph::log_sum_exp(&z) - z[y];
    }
    total / labels.len() as f64
}

fn bce_value(s: &Tensor, labels: &[usize], tau_bce: f64) -> f64 {
    let k = s.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (j, &v) in s.row(i).iter().enumerate() {
            let p = crate::numkernel::graph::sigmoid(v / tau_bce).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= if j == y { (1.0 - p).ln() } else { p.ln() };
        }
    }
    total / (labels.len() * k) as f64
}

struct Fitted {
    prompt: Tensor,
    epoch: usize,
    losses: Vec<f64>,
    train_metric: Vec<f64>,
    val_metrics: Vec<(f64, f64)>,
    selected_metrics: (f64, f64, f64),
}

#[allow(clippy::too_many_arguments)]
fn fit_prompt(
    path: Polarity,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    train_e: &Tensor,
    train_y: &[usize],
    val_e: &Tensor,
    val_y: &[usize],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Fitted> {
    let template = match path {
        Polarity::Positive => &vocab.positive_template,
        Polarity::Negative => &vocab.negative_template,
    };
    let mut store = ParamStore::new();
    store.insert("prompt", enc.template_prompt(template), false);
    let n = train_y.len();
    let batches = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::cosine(cfg.lr, cfg.epochs * batches);
    let mut opt = OptimizerState::sgd(schedule, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let d = train_e.cols();

    let mut best: Option<(Tensor, usize, (f64, f64, f64))> = None;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut train_metric = Vec::with_capacity(cfg.epochs);
    let mut val_metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(train_e.row(i));
            }
            let e = Tensor::new(vec![chunk.len(), d], data)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new();
            let v = g.param(&store, "prompt")?;
            let loss = match path {
                Polarity::Positive => positive_label_loss(&mut g, enc, vocab, v, &e, &y, cfg.tau)?,
                Polarity::Negative => negative_label_loss(&mut g, enc, vocab, v, &e, &y, cfg.tau_bce)?,
            };
            let value = g.scalar(loss);
            let grads = g.backward(loss).map_err(|e| Error::TrainingFailure {
                epoch,
                reason: e.to_string(),
            })?;
            epoch_loss += value * chunk.len() as f64 / n as f64;
            store.set_grads(grads)?;
            optimizer_step(&mut store, &mut opt, step)?;
            step += 1;
        }
        if !epoch_loss.is_finite() || !store.get("prompt")?.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: "non-finite loss or prompt".into(),
            });
        }
        losses.push(epoch_loss);

        let prompt = PromptVector::new(store.get("prompt")?.clone())?;
        let s_train = similarities(enc, vocab, &prompt, template, train_e)?;
        let s_val = similarities(enc, vocab, &prompt, template, val_e)?;
        // (primary, secondary) where larger primary wins and smaller secondary breaks ties
        let (metrics, key) = match path {
            Polarity::Positive => {
                let acc = accuracy_argmax(&s_val, val_y);
                let ce = ce_value(&s_val, val_y, cfg.tau);
                train_metric.push(accuracy_argmax(&s_train, train_y));
                ((acc, ce, 0.0), (acc, ce))
            }
            Polarity::Negative => {
                let bce = bce_value(&s_val, val_y, cfg.tau_bce);
                let acc = accuracy_argmin(&s_val, val_y);
                train_metric.push(accuracy_argmin(&s_train, train_y));
                ((acc, 0.0, bce), (-bce, 0.0))
            }
        };
        val_metrics.push((metrics.0, if path == Polarity::Positive { metrics.1 } else { metrics.2 }));
        let better = match &best {
            None => true,
            Some((_, _, m)) => {
                let old = match path {
                    Polarity::Positive => (m.0, m.1),
                    Polarity::Negative => (-m.2, 0.0),
                };
                key.0 > old.0 || (key.0 == old.0 && key.1 < old.1)
            }
        };
        if better {
            best = Some((prompt.tokens().clone(), epoch, metrics));
        }
    }
    let (prompt, epoch, selected_metrics) = best.expect("at least one epoch");
    Ok(Fitted {
        prompt,
        epoch,
        losses,
        train_metric,
        val_metrics,
        selected_metrics,
    })
}

fn split_embeddings(
    ds: &DomainDataset,
    enc: &EncoderPair,
    idx: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let e = enc.encode_images(&ds.inputs(idx)?)?;
    Ok((e, ds.labels(idx)))
}

/// Fits the positive and negative prompt labels of one domain on its training
/// split and keeps the best validation snapshot of each.
pub fn train_domain_labels(
    ds: &DomainDataset,
    domain: usize,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    cfg: &Stage1Config,
) -> Result<LabelTraining> {
    cfg.validate()?;
    let split = ds
        .splits
        .get(domain)
        .ok_or_else(|| Error::param(format!("no domain {domain}")))?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::input(format!("domain {domain} has an empty split")));
    }
    let (train_e, train_y) = split_embeddings(ds, enc, &split.train)?;
    let (val_e, val_y) = split_embeddings(ds, enc, &split.val)?;
    let d = domain as u64;
    let pos = fit_prompt(
        Polarity::Positive,
        enc,
        vocab,
        &train_e,
        &train_y,
        &val_e,
        &val_y,
        cfg,
        derive_seed(cfg.seed, d, 1),
    )?;
    let neg = fit_prompt(
        Polarity::Negative,
        enc,
        vocab,
        &train_e,
        &train_y,
        &val_e,
        &val_y,
        cfg,
        derive_seed(cfg.seed, d, 2),
    )?;
    let history = (0..cfg.epochs)
        .map(|i| EpochRecord {
            epoch: i + 1,
            positive_loss: pos.losses[i],
            positive_train_accuracy: pos.train_metric[i],
            positive_val_accuracy: pos.val_metrics[i].0,
            positive_val_ce: pos.val_metrics[i].1,
            negative_loss: neg.losses[i],
            negative_val_bce: neg.val_metrics[i].1,
            negative_val_accuracy: neg.val_metrics[i].0,
        })
        .collect::<Vec<_>>();
    let positive = PromptVector::new(pos.prompt)?;
    let s_train = similarities(enc, vocab, &positive, &vocab.positive_template, &train_e)?;
    let pair = DomainPromptLabelPair {
        domain,
        positive,
        negative: PromptVector::new(neg.prompt)?,
        val_accuracy: pos.selected_metrics.0,
        val_ce: pos.selected_metrics.1,
        val_bce: neg.selected_metrics.2,
        train_accuracy: accuracy_argmax(&s_train, &train_y),
        epoch_selected: pos.epoch,
        epoch_selected_negative: neg.epoch,
        oracle: false,
    };
    Ok(LabelTraining { pair, history })
}

/// A single positive prompt fitted on several domains at once (the
/// fixed-prompt baseline).
pub fn train_pooled_prompt(
    ds: &DomainDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    cfg: &Stage1Config,
) -> Result<PromptVector> {
    cfg.validate()?;
    let (train_e, train_y) = split_embeddings(ds, enc, train_idx)?;
    let (val_e, val_y) = split_embeddings(ds, enc, val_idx)?;
    let fitted = fit_prompt(
        Polarity::Positive,
        enc,
        vocab,
        &train_e,
        &train_y,
        &val_e,
        &val_y,
        cfg,
        derive_seed(cfg.seed, u64::MAX, 3),
    )?;
    PromptVector::new(fitted.prompt)
}

impl DomainPromptLabelPair {
    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_MAGIC, config_hash);
        let t = self.positive.tokens();
        ck.header = vec![
            self.domain as u64,
            t.rows() as u64,
            t.cols() as u64,
            self.epoch_selected as u64,
            self.epoch_selected_negative as u64,
            u64::from(self.oracle),
        ];
        ck.push("positive", t);
        ck.push("negative", self.negative.tokens());
        let metrics = Tensor::from_raw(
            vec![4],
            vec![self.val_accuracy, self.val_ce, self.val_bce, self.train_accuracy],
        );
        ck.push("val_metrics", &metrics);
        ck
    }

    pub fn save(&self, config_hash: &str, path: &Path) -> Result<()> {
        self.to_checkpoint(config_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<(DomainPromptLabelPair, String)> {
        let ck = Checkpoint::load(path, CHECKPOINT_MAGIC)?;
        let h = |i| ck.header_at(i, "label header");
        let m = ck.tensor("val_metrics")?.data().to_vec();
        if m.len() != 4 {
            return Err(Error::format(path, "val_metrics must hold 4 values"));
        }
        let positive = PromptVector::new(ck.tensor("positive")?.clone())?;
        let negative = PromptVector::new(ck.tensor("negative")?.clone())?;
        if positive.tokens().shape() != [h(1)? as usize, h(2)? as usize] {
            return Err(Error::format(path, "prompt shape disagrees with header"));
        }
        let pair = DomainPromptLabelPair {
            domain: h(0)? as usize,
            positive,
            negative,
            val_accuracy: m[0],
            val_ce: m[1],
            val_bce: m[2],
            train_accuracy: m[3],
            epoch_selected: h(3)? as usize,
            epoch_selected_negative: h(4)? as usize,
            oracle: h(5)? != 0,
        };
        Ok((pair, ck.config_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_targets() {
        assert_eq!(negative_target(1, 3).unwrap().bits, vec![1, 0, 1]);
        assert_eq!(negative_target(0, 2).unwrap().bits, vec![0, 1]);
        assert!(negative_target(3, 3).is_err());
    }

    #[test]
    fn prompt_vector_rejects_non_finite() {
        let t = Tensor::from_raw(vec![1, 2], vec![1.0, f64::NAN]);
        assert!(PromptVector::new(t).is_err());
    }

    #[test]
    fn value_helpers_match_graph_losses() {
        let s = Tensor::from_raw(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]);
        let y = [2, 0];
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let z = g.scale(sv, 10.0);
        let ce = g.cross_entropy(z, &y).unwrap();
        assert!((g.scalar(ce) - ce_value(&s, &y, 0.1)).abs() < 1e-12);
        let mut targets = Vec::new();
        for &l in &y {
            targets.extend(negative_target(l, 3).unwrap().as_f64());
        }
        let b = g.bce_with_logits(z, &targets, BCE_CLAMP).unwrap();
        assert!((g.scalar(b) - bce_value(&s, &y, 0.1)).abs() < 1e-12);
    }
}
