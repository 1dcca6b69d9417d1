//! Stage two: transformer prompt generators.
//!
//! A generator turns one image embedding into a `context_len x d_tok` prompt:
//! per-position linear projections of the embedding plus learned positional
//! embeddings form the input sequence, four pre-norm transformer layers mix
//! it, and a linear head shared across positions reads the prompt off.
//! The positive and negative generators are regressed onto the prompt labels
//! of the domain each training image comes from.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{DomainDataset, LodoSplit};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::numkernel::{
    init_transformer_layer, optimizer_step, transformer_layer_blocks, Graph, LrSchedule,
    OptimizerState, ParamStore, Tensor, TransformerConfig, Var,
};
use crate::promptlabels::{derive_seed, DomainPromptLabelPair, Polarity, PromptVector};

pub const GENERATOR_LAYERS: usize = 4;
const CHECKPOINT_MAGIC: &[u8; 4] = b"DPG1";
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_feat: usize,
    pub d_tok: usize,
    pub context_len: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl GeneratorConfig {
    pub fn layer(&self) -> TransformerConfig {
        TransformerConfig::new(self.d_tok, self.heads, self.d_ff)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub alpha_loss: f64,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            alpha_loss: 0.2,
            epochs: 50,
            lr: 2e-4,
            warmup_epochs: 4,
            warmup_lr: 1e-5,
            weight_decay: 1e-3,
            betas: (0.9, 0.999),
            batch_size: 32,
            heads: 4,
            d_ff: 64,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Validation {
            field: format!("stage2.{field}"),
            reason: reason.to_string(),
        };
        if !(self.alpha_loss >= 0.0 && self.alpha_loss.is_finite()) {
            return Err(bad("alpha_loss", "must be finite and nonnegative"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(bad("warmup_epochs", "must be shorter than training"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.warmup_lr >= 0.0) {
            return Err(bad("warmup_lr", "must be nonnegative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be nonnegative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(bad("betas", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.heads == 0 || self.d_ff == 0 {
            return Err(bad("heads", "heads and d_ff must be positive"));
        }
        Ok(())
    }

    pub fn generator_config(&self, enc: &EncoderPair) -> Result<GeneratorConfig> {
        let c = GeneratorConfig {
            d_feat: enc.config.d_feat,
            d_tok: enc.config.d_tok,
            context_len: enc.config.context_len,
            heads: self.heads,
            d_ff: self.d_ff,
        };
        if c.d_tok % c.heads != 0 {
            return Err(Error::Validation {
                field: "stage2.heads".into(),
                reason: format!("{} heads do not divide d_tok {}", c.heads, c.d_tok),
            });
        }
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub polarity: Polarity,
    pub config: GeneratorConfig,
    params: ParamStore,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, polarity: Polarity, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, t, m) = (config.d_feat, config.d_tok, config.context_len);
        let mut p = ParamStore::new();
        p.insert("in_proj.w", Tensor::randn(&[f, m * t], 1.0 / (f as f64).sqrt(), &mut rng), false);
        p.insert("in_proj.b", Tensor::zeros(&[m * t]), false);
        p.insert("pos", Tensor::randn(&[m, t], 1.0 / (t as f64).sqrt(), &mut rng), false);
        let layer = config.layer();
        for l in 0..GENERATOR_LAYERS {
            init_transformer_layer(&mut p, &format!("layer{l}"), &layer, false, &mut rng)?;
        }
        p.insert("head.w", Tensor::randn(&[t, t], HEAD_INIT_STD, &mut rng), false);
        p.insert("head.b", Tensor::zeros(&[t]), false);
        Ok(GeneratorModel {
            polarity,
            config,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the generator on `g` for a batch `B x d_feat`; the result stacks
    /// `B` prompts into `(B * context_len) x d_tok`.
    pub fn forward(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        self.forward_with(g, &self.params, embeddings)
    }

    /// [`GeneratorModel::forward`] reading weights from `params`, which must
    /// have this model's layout.
    pub fn forward_with(&self, g: &mut Graph, params: &ParamStore, embeddings: Var) -> Result<Var> {
        let c = &self.config;
        let (b, f) = g.value(embeddings).dims2();
        if f != c.d_feat {
            return Err(Error::shape(format!(
                "generator expects {}-dimensional embeddings, got {f}",
                c.d_feat
            )));
        }
        let w = g.param(params, "in_proj.w")?;
        let bias = g.param(params, "in_proj.b")?;
        let h = g.matmul(embeddings, w)?;
        let h = g.add_row(h, bias)?;
        let h = g.reshape(h, &[b * c.context_len, c.d_tok])?;
        let pos = g.param(params, "pos")?;
        let pos = g.tile_rows(pos, b)?;
        let mut h = g.add(h, pos)?;
        let layer = c.layer();
        for l in 0..GENERATOR_LAYERS {
            h = transformer_layer_blocks(g, h, params, &format!("layer{l}"), &layer, c.context_len)?;
        }
        let w = g.param(params, "head.w")?;
        let bias = g.param(params, "head.b")?;
        let h = g.matmul(h, w)?;
        g.add_row(h, bias)
    }

    pub fn generate_batch(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.constant(embeddings.clone());
        let out = self.forward(&mut g, e)?;
        Ok(g.value(out).clone())
    }

    pub fn generate_prompt(&self, embedding: &[f64]) -> Result<PromptVector> {
        let e = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
        PromptVector::new(self.generate_batch(&e)?)
    }

    pub fn to_checkpoint(&self, provenance: &Provenance, config_hash: &str) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(CHECKPOINT_MAGIC, config_hash);
        ck.header = vec![
            u64::from(self.polarity == Polarity::Negative),
            c.context_len as u64,
            c.d_tok as u64,
            c.d_feat as u64,
            GENERATOR_LAYERS as u64,
            c.heads as u64,
            c.d_ff as u64,
            u64::from(provenance.oracle),
            provenance.sources.len() as u64,
        ];
        ck.header.extend(provenance.sources.iter().map(|&s| s as u64));
        for (name, p) in self.params.iter() {
            ck.push(name.clone(), &p.value);
        }
        if let Some(s) = provenance.input_noise {
            ck.push("input_noise", &Tensor::scalar(s));
        }
        ck
    }

    pub fn save(&self, provenance: &Provenance, config_hash: &str, path: &Path) -> Result<()> {
        self.to_checkpoint(provenance, config_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<(GeneratorModel, Provenance, String)> {
        let ck = Checkpoint::load(path, CHECKPOINT_MAGIC)?;
        let h = |i| ck.header_at(i, "generator header");
        if h(4)? as usize != GENERATOR_LAYERS {
            return Err(Error::format(path, "generator must have four layers"));
        }
        let config = GeneratorConfig {
            context_len: h(1)? as usize,
            d_tok: h(2)? as usize,
            d_feat: h(3)? as usize,
            heads: h(5)? as usize,
            d_ff: h(6)? as usize,
        };
        let polarity = if h(0)? == 0 { Polarity::Positive } else { Polarity::Negative };
        let mut model = GeneratorModel::new(config, polarity, 0)?;
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let t = ck.tensor(&name)?;
            let slot = model.params.value_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::format(path, format!("tensor `{name}` has wrong shape")));
            }
            *slot = t.clone();
        }
        let n = h(8)? as usize;
        let sources = (0..n).map(|i| h(9 + i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let provenance = Provenance {
            sources,
            oracle: h(7)? != 0,
            input_noise: ck.tensor("input_noise").ok().map(|t| t.data()[0]),
        };
        Ok((model, provenance, ck.config_hash))
    }
}

/// Which domains an artifact has seen, and how it must be run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<usize>,
    pub oracle: bool,
    /// Standard deviation of the Gaussian noise added to generator inputs
    /// (single-path baseline only).
    pub input_noise: Option<f64>,
}

/// Mean squared error over all prompt entries of the positive path plus
/// `alpha` times that of the negative path.
pub fn generator_loss(
    pred_pos: &PromptVector,
    pred_neg: &PromptVector,
    label_pos: &PromptVector,
    label_neg: &PromptVector,
    alpha: f64,
) -> Result<f64> {
    let shape = pred_pos.tokens().shape();
    if [pred_neg, label_pos, label_neg].iter().any(|p| p.tokens().shape() != shape) {
        return Err(Error::shape("generator loss needs prompts of one shape"));
    }
    let n = pred_pos.tokens().len() as f64;
    let pos = pred_pos.tokens().squared_distance(label_pos.tokens()) / n;
    let neg = pred_neg.tokens().squared_distance(label_neg.tokens()) / n;
    Ok(pos + alpha * neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorVariant {
    /// Both generators, trained on the weighted sum of their regressions.
    DualPath,
    /// Positive generator only, with Gaussian noise of the given standard
    /// deviation added to (then renormalised away from) every input
    /// embedding, in training and at inference.
    NoisySinglePath { noise: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean squared prompt distance `||G+(phi(x)) - v+_d(x)||^2` on the
    /// source validation split.
    pub val_metric: f64,
    /// Whatever the per-epoch observer reported (usually target accuracy).
    pub observed: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedGenerators {
    pub positive: GeneratorModel,
    pub negative: Option<GeneratorModel>,
    pub provenance: Provenance,
    /// `val_metric` before the first update.
    pub initial_val_metric: f64,
    pub history: Vec<GeneratorEpoch>,
}

/// Per-epoch hook; sees the models after each epoch.
pub type EpochObserver<'a> = dyn FnMut(usize, &GeneratorModel, Option<&GeneratorModel>, &Provenance) -> Result<Option<f64>> + 'a;

/// Root-mean-square over coordinates of the per-coordinate standard deviation.
pub fn matched_noise_scale(embeddings: &Tensor) -> f64 {
    let (n, d) = embeddings.dims2();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| embeddings.row(i)[j]).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (embeddings.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    (total / d as f64).sqrt()
}

/// Adds `N(0, noise^2)` to every entry of each row and renormalises the row.
pub fn perturb_embeddings<R: Rng>(embeddings: &Tensor, noise: f64, rng: &mut R) -> Result<Tensor> {
    let (n, d) = embeddings.dims2();
    let mut out = embeddings.clone().reshape(vec![n, d])?;
    for i in 0..n {
        let row = out.row_mut(i);
        for v in row.iter_mut() {
            *v += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let norm = crate::numkernel::l2_norm(row);
        if !(norm > 0.0) {
            return Err(Error::numeric("perturbed embedding has zero norm"));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

fn stack_rows(src: &Tensor, idx: &[usize]) -> Tensor {
    let c = src.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(src.row(i));
    }
    Tensor::from_raw(vec![idx.len(), c], data)
}

fn stack_labels(labels: &[&PromptVector]) -> Tensor {
    let t = labels[0].tokens();
    let mut data = Vec::with_capacity(labels.len() * t.len());
    for l in labels {
        data.extend_from_slice(l.tokens().data());
    }
    Tensor::from_raw(vec![labels.len() * t.rows(), t.cols()], data)
}

fn lookup_labels<'a>(
    split: &LodoSplit,
    labels: &'a [DomainPromptLabelPair],
) -> Result<BTreeMap<usize, &'a DomainPromptLabelPair>> {
    let mut map = BTreeMap::new();
    for &d in &split.sources {
        let pair = labels
            .iter()
            .find(|p| p.domain == d)
            .ok_or_else(|| Error::state(format!("no prompt label pair for source domain {d}")))?;
        if pair.oracle {
            return Err(Error::Contamination(format!(
                "prompt labels of domain {d} are an oracle artifact"
            )));
        }
        map.insert(d, pair);
    }
    Ok(map)
}

/// Mean squared distance between generated positive prompts and the
/// positive labels of each sample's domain.
fn label_distance(
    model: &GeneratorModel,
    emb: &Tensor,
    domains: &[usize],
    labels: &BTreeMap<usize, &DomainPromptLabelPair>,
) -> Result<f64> {
    let out = model.generate_batch(emb)?;
    let m = model.config.context_len;
    let c = model.config.d_tok;
    let mut total = 0.0;
    for (i, d) in domains.iter().enumerate() {
        let label = labels[d].positive.tokens().data();
        let pred = &out.data()[i * m * c..(i + 1) * m * c];
        total += pred.iter().zip(label).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / domains.len() as f64)
}

/// Trains the generators on the source domains of `split`.
#[allow(clippy::too_many_arguments)]
pub fn train_generators(
    ds: &DomainDataset,
    split: &LodoSplit,
    labels: &[DomainPromptLabelPair],
    enc: &EncoderPair,
    cfg: &Stage2Config,
    variant: GeneratorVariant,
    observer: Option<&mut EpochObserver<'_>>,
) -> Result<TrainedGenerators> {
    cfg.validate()?;
    let label_map = lookup_labels(split, labels)?;
    if split.sources.contains(&split.target) {
        return Err(Error::Contamination(format!(
            "target domain {} listed as a source",
            split.target
        )));
    }
    let gcfg = cfg.generator_config(enc)?;
    let train_e = enc.encode_images(&ds.inputs(&split.source_train)?)?;
    let train_dom: Vec<usize> = split.source_train.iter().map(|&i| ds.samples[i].domain).collect();
    let val_e = enc.encode_images(&ds.inputs(&split.source_val)?)?;
    let val_dom: Vec<usize> = split.source_val.iter().map(|&i| ds.samples[i].domain).collect();

    let mut pos = GeneratorModel::new(gcfg, Polarity::Positive, derive_seed(cfg.seed, 1, 0))?;
    let (mut neg, noise) = match variant {
        GeneratorVariant::DualPath => (
            Some(GeneratorModel::new(gcfg, Polarity::Negative, derive_seed(cfg.seed, 2, 0))?),
            None,
        ),
        GeneratorVariant::NoisySinglePath { noise } => {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::param("input noise must be finite and nonnegative"));
            }
            (None, Some(noise))
        }
    };
    let provenance = Provenance {
        sources: split.sources.clone(),
        oracle: false,
        input_noise: noise,
    };

    let n = split.source_train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::cosine(cfg.lr, cfg.epochs * batches)
        .with_warmup(cfg.warmup_epochs * batches, cfg.warmup_lr);
    let mut opt_pos = OptimizerState::adamw(schedule, cfg.betas, cfg.weight_decay);
    let mut opt_neg = OptimizerState::adamw(schedule, cfg.betas, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, 0));
    let mut order: Vec<usize> = (0..n).collect();
    let initial_val_metric = label_distance(&pos, &val_e, &val_dom, &label_map)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut observer = observer;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut e = stack_rows(&train_e, chunk);
            if let Some(s) = noise {
                e = perturb_embeddings(&e, s, &mut noise_rng)?;
            }
            let doms: Vec<usize> = chunk.iter().map(|&i| train_dom[i]).collect();
            let pos_target = stack_labels(&doms.iter().map(|d| &label_map[d].positive).collect::<Vec<_>>());
            let mut g = Graph::new();
            let ev = g.constant(e);
            let out = pos.forward(&mut g, ev)?;
            let loss = g.mse(out, &pos_target)?;
            let mut neg_loss = None;
            if let Some(neg) = &neg {
                let neg_target =
                    stack_labels(&doms.iter().map(|d| &label_map[d].negative).collect::<Vec<_>>());
                let mut g2 = Graph::new();
                let ev = g2.constant(stack_rows(&train_e, chunk));
                let out = neg.forward(&mut g2, ev)?;
                let l = g2.mse(out, &neg_target)?;
                let l = g2.scale(l, cfg.alpha_loss);
                neg_loss = Some((g2, l));
            }
            let mut value = g.scalar(loss);
            let fail = |e: Error| Error::TrainingFailure {
                epoch,
                reason: e.to_string(),
            };
            let grads = g.backward(loss).map_err(fail)?;
            pos.params_mut().set_grads(grads)?;
            optimizer_step(pos.params_mut(), &mut opt_pos, step)?;
            if let (Some(neg), Some((g2, l))) = (neg.as_mut(), neg_loss) {
                value += g2.scalar(l);
                let grads = g2.backward(l).map_err(fail)?;
                neg.params_mut().set_grads(grads)?;
                optimizer_step(neg.params_mut(), &mut opt_neg, step)?;
            }
            epoch_loss += value * chunk.len() as f64 / n as f64;
            step += 1;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        let val_metric = label_distance(&pos, &val_e, &val_dom, &label_map)?;
        let observed = match observer.as_mut() {
            Some(f) => f(epoch, &pos, neg.as_ref(), &provenance)?,
            None => None,
        };
        history.push(GeneratorEpoch {
            epoch,
            loss: epoch_loss,
            val_metric,
            observed,
        });
    }
    Ok(TrainedGenerators {
        positive: pos,
        negative: neg,
        provenance,
        initial_val_metric,
        history,
    })
}

pub fn history_csv_bytes(history: &[GeneratorEpoch]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "val_metric"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.loss.to_string(), h.val_metric.to_string()])?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::grad_check;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            d_feat: 6,
            d_tok: 8,
            context_len: 3,
            heads: 2,
            d_ff: 10,
        }
    }

    #[test]
    fn shape_and_determinism() {
        let g = GeneratorModel::new(small(), Polarity::Positive, 1).unwrap();
        let e = [0.5, -0.5, 0.5, -0.5, 0.0, 0.0];
        let a = g.generate_prompt(&e).unwrap();
        assert_eq!(a.tokens().shape(), &[3, 8]);
        assert_eq!(a, g.generate_prompt(&e).unwrap());
        assert!(matches!(g.generate_prompt(&[1.0]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn batched_generation_matches_single() {
        let g = GeneratorModel::new(small(), Polarity::Negative, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::randn(&[4, 6], 0.4, &mut rng);
        let all = g.generate_batch(&e).unwrap();
        for i in 0..4 {
            let one = g.generate_prompt(e.row(i)).unwrap();
            let block = &all.data()[i * 24..(i + 1) * 24];
            for (a, b) in one.tokens().data().iter().zip(block) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_prompt_norm_passes_finite_differences() {
        let g = GeneratorModel::new(small(), Polarity::Positive, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = Tensor::randn(&[2, 6], 0.4, &mut rng);
        let report = grad_check(
            |gr, p| {
                let model = GeneratorModel {
                    polarity: Polarity::Positive,
                    config: small(),
                    params: p.clone(),
                };
                let ev = gr.constant(e.clone());
                let out = model.forward(gr, ev)?;
                Ok(gr.sum_squares(out))
            },
            g.params(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn loss_arithmetic() {
        let z = PromptVector::new(Tensor::zeros(&[1, 2])).unwrap();
        let a = PromptVector::new(Tensor::from_raw(vec![1, 2], vec![1.0, 0.0])).unwrap();
        let b = PromptVector::new(Tensor::from_raw(vec![1, 2], vec![1.0, 1.0])).unwrap();
        assert_eq!(generator_loss(&a, &b, &a, &b, 0.2).unwrap(), 0.0);
        assert!((generator_loss(&a, &b, &z, &z, 0.2).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(generator_loss(&a, &b, &z, &b, 0.0).unwrap(), 0.5);
        let wide = PromptVector::new(Tensor::zeros(&[1, 3])).unwrap();
        assert!(generator_loss(&a, &b, &wide, &z, 0.2).is_err());
    }

    #[test]
    fn noise_scale_of_constant_rows_is_zero() {
        let e = Tensor::from_raw(vec![3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        assert!(matched_noise_scale(&e) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturb_embeddings(&e, 0.1, &mut rng).unwrap();
        for i in 0..3 {
            assert!((crate::numkernel::l2_norm(p.row(i)) - 1.0).abs() < 1e-12);
        }
    }
}
