//! End-to-end wiring shared by the command-line stages and the seed sweep.

use crate::cli::RunConfig;
use crate::datagen::{generate_dataset, leave_one_out_split, DomainDataset, LodoSplit};
use crate::encoders::{build_vocabulary, AlignmentReport, ClassVocabulary, EncoderPair};
use crate::error::Result;
use crate::generators::{
    matched_noise_scale, train_generators, GeneratorModel, GeneratorVariant, Provenance, TrainedGenerators,
};
use crate::inference::{evaluate_lodo, EvalMode, Pipeline};
use crate::promptlabels::{derive_seed, train_domain_labels, train_pooled_prompt, LabelTraining, PromptVector};

/// Trailing epochs whose target accuracy feeds the stability statistic.
pub const STABILITY_WINDOW: usize = 10;

/// The frozen, seed-independent part of a run.
#[derive(Clone, Debug)]
pub struct Stack {
    pub dataset: DomainDataset,
    pub encoders: EncoderPair,
    pub vocab: ClassVocabulary,
    /// Present when the encoders were aligned in this process.
    pub alignment: Option<AlignmentReport>,
}

pub fn build_encoders(cfg: &RunConfig, ds: &DomainDataset) -> Result<(EncoderPair, ClassVocabulary, AlignmentReport)> {
    let vocab = build_vocabulary(ds.num_classes(), cfg.encoder.d_tok, cfg.vocab_seed)?;
    let mut enc = EncoderPair::new(&cfg.encoder, ds.spec.d_raw)?;
    let alignment = enc.align_to_prototypes(&vocab, &ds.prototypes)?;
    Ok((enc, vocab, alignment))
}

pub fn build_stack(cfg: &RunConfig) -> Result<Stack> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let (encoders, vocab, alignment) = build_encoders(cfg, &dataset)?;
    Ok(Stack {
        dataset,
        encoders,
        vocab,
        alignment: Some(alignment),
    })
}

/// Prompt labels of every domain for one training seed.
pub fn train_labels(cfg: &RunConfig, stack: &Stack, seed: u64) -> Result<Vec<LabelTraining>> {
    let s1 = cfg.stage1_config(seed);
    (0..stack.dataset.spec.num_domains)
        .map(|d| train_domain_labels(&stack.dataset, d, &stack.encoders, &stack.vocab, &s1))
        .collect()
}

/// Noise level of the single-path baseline: the spread of the source
/// training embeddings.
pub fn single_path_noise(stack: &Stack, split: &LodoSplit) -> Result<f64> {
    let e = stack.encoders.encode_images(&stack.dataset.inputs(&split.source_train)?)?;
    Ok(matched_noise_scale(&e))
}

pub fn variant_for(stack: &Stack, split: &LodoSplit, single_path: bool) -> Result<GeneratorVariant> {
    Ok(if single_path {
        GeneratorVariant::NoisySinglePath {
            noise: single_path_noise(stack, split)?,
        }
    } else {
        GeneratorVariant::DualPath
    })
}

/// Seed of the input-noise stream used when evaluating after `epoch`
/// (epoch 0 is the final evaluation).
pub fn eval_noise_seed(seed: u64, target: usize, epoch: usize) -> u64 {
    derive_seed(seed, 5 + target as u64, epoch as u64)
}

/// Trains the generators for one held-out target. With `track_target`, the
/// target accuracy after each of the last [`STABILITY_WINDOW`] epochs is
/// recorded in the history (an observation only; nothing is fitted to it).
pub fn train_target(
    cfg: &RunConfig,
    stack: &Stack,
    labels: &[LabelTraining],
    target: usize,
    seed: u64,
    single_path: bool,
    track_target: bool,
) -> Result<TrainedGenerators> {
    let split = leave_one_out_split(&stack.dataset, target)?;
    let variant = variant_for(stack, &split, single_path)?;
    let s2 = cfg.stage2_config(seed);
    let pairs: Vec<_> = labels.iter().map(|l| l.pair.clone()).collect();
    let epochs = s2.epochs;
    let mut observe = |epoch: usize, pos: &GeneratorModel, neg: Option<&GeneratorModel>, prov: &Provenance| {
        if epoch + STABILITY_WINDOW <= epochs {
            return Ok(None);
        }
        let p = Pipeline::new(&stack.encoders, &stack.vocab)
            .with_generators(pos, neg, prov)
            .with_noise_seed(eval_noise_seed(seed, target, epoch));
        let mode = if neg.is_some() { EvalMode::Full } else { EvalMode::PositiveOnly };
        Ok(Some(evaluate_lodo(&stack.dataset, target, &p, mode, cfg.alpha_fuse, cfg.tau, seed)?.accuracy))
    };
    train_generators(
        &stack.dataset,
        &split,
        &pairs,
        &stack.encoders,
        &s2,
        variant,
        if track_target { Some(&mut observe) } else { None },
    )
}

/// One positive prompt fitted on all source domains of `target` at once.
pub fn train_fixed_prompt(cfg: &RunConfig, stack: &Stack, target: usize, seed: u64) -> Result<(PromptVector, Provenance)> {
    let split = leave_one_out_split(&stack.dataset, target)?;
    let prompt = train_pooled_prompt(
        &stack.dataset,
        &split.source_train,
        &split.source_val,
        &stack.encoders,
        &stack.vocab,
        &cfg.stage1_config(seed),
    )?;
    Ok((
        prompt,
        Provenance {
            sources: split.sources,
            oracle: false,
            input_noise: None,
        },
    ))
}
