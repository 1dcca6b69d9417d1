//! Dual-path fusion classification and leave-one-domain-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::DomainDataset;
use crate::encoders::{ClassVocabulary, EncoderPair};
use crate::error::{Error, Result};
use crate::generators::{perturb_embeddings, GeneratorModel, Provenance};
use crate::numkernel::{softmax, Tensor};
use crate::promptlabels::{argmax, PromptVector};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionScores {
    pub s_pos: Vec<f64>,
    pub s_neg: Vec<f64>,
    /// Combined logits `s_pos - alpha * s_neg`.
    pub g: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub alpha: f64,
    pub tau: f64,
}

impl FusionScores {
    pub fn from_similarities(s_pos: Vec<f64>, s_neg: Vec<f64>, alpha: f64, tau: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be finite and nonnegative, got {alpha}")));
        }
        if s_pos.len() != s_neg.len() {
            return Err(Error::shape(format!(
                "{} positive scores but {} negative scores",
                s_pos.len(),
                s_neg.len()
            )));
        }
        let g: Vec<f64> = s_pos.iter().zip(&s_neg).map(|(p, n)| p - alpha * n).collect();
        let probs = softmax(&g, tau)?;
        let predicted = argmax(&g);
        Ok(FusionScores {
            s_pos,
            s_neg,
            g,
            probs,
            predicted,
            alpha,
            tau,
        })
    }

    /// `g_y - g_i` for every class (zero at `y`).
    pub fn margins(&self, y: usize) -> Result<Vec<f64>> {
        let gy = *self
            .g
            .get(y)
            .ok_or_else(|| Error::input(format!("class {y} out of range")))?;
        Ok(self.g.iter().map(|gi| gy - gi).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Full,
    PositiveOnly,
    FixedPrompt,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Full, EvalMode::PositiveOnly, EvalMode::FixedPrompt];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::PositiveOnly => "positive_only",
            EvalMode::FixedPrompt => "fixed_prompt",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EvalMode::Full),
            "positive_only" => Ok(EvalMode::PositiveOnly),
            "fixed_prompt" => Ok(EvalMode::FixedPrompt),
            _ => Err(Error::param(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

/// Borrowed view over everything needed to classify images.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub encoders: &'a EncoderPair,
    pub vocab: &'a ClassVocabulary,
    pub positive: Option<&'a GeneratorModel>,
    pub negative: Option<&'a GeneratorModel>,
    pub provenance: Option<&'a Provenance>,
    /// Pooled-source prompt for the fixed-prompt mode, with its provenance.
    pub fixed_prompt: Option<(&'a PromptVector, &'a Provenance)>,
    /// Seeds the input-noise stream of single-path models.
    pub noise_seed: u64,
}

impl<'a> Pipeline<'a> {
    pub fn new(encoders: &'a EncoderPair, vocab: &'a ClassVocabulary) -> Self {
        Pipeline {
            encoders,
            vocab,
            positive: None,
            negative: None,
            provenance: None,
            fixed_prompt: None,
            noise_seed: 0,
        }
    }

    pub fn with_generators(
        mut self,
        positive: &'a GeneratorModel,
        negative: Option<&'a GeneratorModel>,
        provenance: &'a Provenance,
    ) -> Self {
        self.positive = Some(positive);
        self.negative = negative;
        self.provenance = Some(provenance);
        self
    }

    pub fn with_fixed_prompt(mut self, prompt: &'a PromptVector, provenance: &'a Provenance) -> Self {
        self.fixed_prompt = Some((prompt, provenance));
        self
    }

    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    fn generator(&self, which: Option<&'a GeneratorModel>, name: &str) -> Result<&'a GeneratorModel> {
        which.ok_or_else(|| Error::state(format!("no {name} generator configured")))
    }

    /// Generated prompts for a batch of embeddings, stacked
    /// `(n * context_len) x d_tok`; the negative stack is absent for
    /// single-path models.
    pub fn prompts(&self, embeddings: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let pos = self.generator(self.positive, "positive")?;
        let input = match self.provenance.and_then(|p| p.input_noise) {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
                perturb_embeddings(embeddings, s, &mut rng)?
            }
            None => embeddings.clone(),
        };
        let p = pos.generate_batch(&input)?;
        let n = match self.negative {
            Some(neg) => Some(neg.generate_batch(&input)?),
            None => None,
        };
        Ok((p, n))
    }

    /// Per-sample similarities of `embeddings` against per-sample prompts.
    fn per_sample_scores(&self, embeddings: &Tensor, prompts: &Tensor, template: &Tensor) -> Result<Vec<Vec<f64>>> {
        let k = self.vocab.num_classes();
        let feats = self.encoders.encode_text_batch(prompts, template, self.vocab)?;
        Ok((0..embeddings.rows())
            .map(|i| {
                let e = embeddings.row(i);
                (0..k).map(|c| crate::numkernel::dot(feats.row(i * k + c), e)).collect()
            })
            .collect())
    }

    /// Classifies a batch of image embeddings.
    pub fn classify_embeddings(&self, embeddings: &Tensor, mode: EvalMode, alpha: f64, tau: f64) -> Result<Vec<FusionScores>> {
        let n = embeddings.rows();
        let k = self.vocab.num_classes();
        let (s_pos, s_neg, alpha) = match mode {
            EvalMode::FixedPrompt => {
                let (prompt, _) = self
                    .fixed_prompt
                    .ok_or_else(|| Error::state("no fixed prompt configured"))?;
                let s = embeddings.matmul(
                    &self
                        .encoders
                        .encode_text_batch(prompt.tokens(), &self.vocab.positive_template, self.vocab)?
                        .transpose(),
                )?;
                let rows = (0..n).map(|i| s.row(i).to_vec()).collect();
                (rows, vec![vec![0.0; k]; n], 0.0)
            }
            EvalMode::PositiveOnly => {
                let only = Pipeline {
                    negative: None,
                    ..*self
                };
                let (p, _) = only.prompts(embeddings)?;
                let s = self.per_sample_scores(embeddings, &p, &self.vocab.positive_template)?;
                (s, vec![vec![0.0; k]; n], 0.0)
            }
            EvalMode::Full => {
                let (p, neg) = self.prompts(embeddings)?;
                let neg = neg.ok_or_else(|| Error::state("no negative generator configured"))?;
                let s_pos = self.per_sample_scores(embeddings, &p, &self.vocab.positive_template)?;
                let s_neg = self.per_sample_scores(embeddings, &neg, &self.vocab.negative_template)?;
                (s_pos, s_neg, alpha)
            }
        };
        s_pos
            .into_iter()
            .zip(s_neg)
            .map(|(p, q)| FusionScores::from_similarities(p, q, alpha, tau))
            .collect()
    }

    /// Classifies raw inputs `n x d_raw`.
    pub fn classify(&self, x: &Tensor, mode: EvalMode, alpha: f64, tau: f64) -> Result<Vec<FusionScores>> {
        let e = self.encoders.encode_images(x)?;
        self.classify_embeddings(&e, mode, alpha, tau)
    }

    /// Refuses models that have seen `target`, or that were fitted on it.
    pub fn check_provenance(&self, target: usize, mode: EvalMode) -> Result<()> {
        let check = |p: &Provenance, what: &str| {
            if p.oracle {
                return Err(Error::Contamination(format!("{what} is an oracle artifact")));
            }
            if p.sources.contains(&target) {
                return Err(Error::Contamination(format!(
                    "{what} was trained on target domain {target}"
                )));
            }
            Ok(())
        };
        match mode {
            EvalMode::FixedPrompt => {
                let (_, p) = self
                    .fixed_prompt
                    .ok_or_else(|| Error::state("no fixed prompt configured"))?;
                check(p, "fixed prompt")
            }
            _ => {
                let p = self
                    .provenance
                    .ok_or_else(|| Error::state("generators carry no provenance"))?;
                check(p, "generator pair")
            }
        }
    }
}

/// Classifies one raw sample with both paths.
pub fn fuse_and_classify(pipeline: &Pipeline<'_>, x: &[f64], alpha: f64, tau: f64) -> Result<FusionScores> {
    let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let mut out = pipeline.classify(&x, EvalMode::Full, alpha, tau)?;
    Ok(out.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: usize,
    pub mode: EvalMode,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn csv_header(num_classes: usize) -> Vec<String> {
        let mut h: Vec<String> = ["target", "mode", "alpha", "tau", "seed", "accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..num_classes).map(|c| format!("class{c}")));
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![
            self.target.to_string(),
            self.mode.as_str().to_string(),
            self.alpha.to_string(),
            self.tau.to_string(),
            self.seed.to_string(),
            self.accuracy.to_string(),
        ];
        r.extend(self.per_class_accuracy.iter().map(|a| a.to_string()));
        r
    }
}

pub fn eval_csv_bytes(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let k = reports.first().map_or(0, |r| r.per_class_accuracy.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EvalReport::csv_header(k))?;
    for r in reports {
        if r.per_class_accuracy.len() != k {
            return Err(Error::shape("reports disagree on the number of classes"));
        }
        w.write_record(r.csv_record())?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Accuracy of `scores` against `labels`, overall and per class.
pub fn accuracy_report(scores: &[FusionScores], labels: &[usize], k: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("need one label per score"));
    }
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (s, &y) in scores.iter().zip(labels) {
        counts[y] += 1;
        if s.predicted == y {
            hits[y] += 1;
        }
    }
    let acc = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    let per = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok((acc, per))
}

/// Evaluates on every sample of the held-out `target` domain.
pub fn evaluate_lodo(
    ds: &DomainDataset,
    target: usize,
    pipeline: &Pipeline<'_>,
    mode: EvalMode,
    alpha: f64,
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    if target >= ds.spec.num_domains {
        return Err(Error::param(format!("target domain {target} out of range")));
    }
    pipeline.check_provenance(target, mode)?;
    let idx = ds.domain_indices(target);
    let labels = ds.labels(&idx);
    let scores = pipeline.classify(&ds.inputs(&idx)?, mode, alpha, tau)?;
    let (accuracy, per_class_accuracy) = accuracy_report(&scores, &labels, ds.num_classes())?;
    let alpha = if mode == EvalMode::Full { alpha } else { 0.0 };
    Ok(EvalReport {
        target,
        mode,
        alpha,
        tau,
        seed,
        accuracy,
        per_class_accuracy,
        n_test: idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_fusion_arithmetic() {
        let f = FusionScores::from_similarities(vec![0.8, 0.2], vec![0.1, 0.9], 0.2, 1.0).unwrap();
        assert!((f.g[0] - 0.78).abs() < 1e-15 && (f.g[1] - 0.02).abs() < 1e-15);
        let p0 = 1.0 / (1.0 + (-0.76f64).exp());
        assert!((f.probs[0] - p0).abs() < 1e-12);
        assert!((f.probs[1] - (1.0 - p0)).abs() < 1e-12);
        assert!((f.probs[0] - 0.6812).abs() < 2e-4);
        assert_eq!(f.predicted, 0);
        assert_eq!(f.margins(0).unwrap(), vec![0.0, f.g[0] - f.g[1]]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(FusionScores::from_similarities(vec![0.0], vec![0.0], -0.1, 1.0).is_err());
        assert!(FusionScores::from_similarities(vec![0.0], vec![0.0], 0.1, 0.0).is_err());
        assert!(FusionScores::from_similarities(vec![0.0, 1.0], vec![0.0], 0.1, 1.0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
        }
        assert!("both".parse::<EvalMode>().is_err());
    }
}
