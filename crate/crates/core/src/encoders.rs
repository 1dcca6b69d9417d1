//! Frozen mini vision-language encoder pair.
//!
//! The image side is a two-layer tanh MLP followed by L2 normalisation. The
//! text side embeds the token sequence `[prompt ‖ template ‖ class]`, adds
//! positional embeddings, runs it through frozen pre-norm transformer layers,
//! mean-pools, projects to the feature width and L2 normalises.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::{
    init_transformer_layer, l2_norm, transformer_layer_blocks, Graph, ParamStore, Tensor,
    TransformerConfig, Var,
};

/// Tokens in each of the two fixed phrase templates.
pub const TEMPLATE_LEN: usize = 4;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPV1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_tok: usize,
    pub d_feat: usize,
    pub context_len: usize,
    pub image_hidden: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub seed: u64,
    /// Relative ridge strength of the projection alignment fit.
    pub align_ridge: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_tok: 32,
            d_feat: 64,
            context_len: 4,
            image_hidden: 64,
            text_layers: 2,
            text_heads: 4,
            text_ffn: 64,
            seed: 7,
            align_ridge: 1e-2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: &str| Error::Validation {
            field: format!("encoder.{f}"),
            reason: reason.to_string(),
        };
        if self.d_tok < 4 {
            return Err(field("d_tok", "must be at least 4"));
        }
        if self.d_feat == 0 || self.image_hidden == 0 || self.text_ffn == 0 {
            return Err(field("d_feat", "widths must be positive"));
        }
        if self.context_len == 0 {
            return Err(field("context_len", "must be positive"));
        }
        if self.text_layers == 0 {
            return Err(field("text_layers", "must be positive"));
        }
        if self.text_heads == 0 || self.d_tok % self.text_heads != 0 {
            return Err(field("text_heads", "must divide d_tok"));
        }
        if !(self.align_ridge > 0.0) {
            return Err(field("align_ridge", "must be positive"));
        }
        Ok(())
    }

    pub fn text_layer(&self) -> TransformerConfig {
        TransformerConfig::new(self.d_tok, self.text_heads, self.text_ffn)
    }

    /// Rows in one text sequence.
    pub fn seq_len(&self) -> usize {
        self.context_len + TEMPLATE_LEN + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    /// `K x d_tok`
    pub class_embeddings: Tensor,
    /// `4 x d_tok`, the "a photo of a" analogue.
    pub positive_template: Tensor,
    /// `4 x d_tok`, the "a photo without a" analogue.
    pub negative_template: Tensor,
    pub seed: u64,
}

impl ClassVocabulary {
    pub fn num_classes(&self) -> usize {
        self.class_embeddings.rows()
    }

    pub fn d_tok(&self) -> usize {
        self.class_embeddings.cols()
    }
}

pub fn build_vocabulary(k: usize, d_tok: usize, seed: u64) -> Result<ClassVocabulary> {
    if k < 2 {
        return Err(Error::param(format!("need at least 2 classes, got {k}")));
    }
    if d_tok < 4 {
        return Err(Error::param(format!("d_tok must be at least 4, got {d_tok}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x766f_6361_6200_0000);
    let s = 1.0 / (d_tok as f64).sqrt();
    let class_embeddings = Tensor::randn(&[k, d_tok], s, &mut rng);
    let positive_template = Tensor::randn(&[TEMPLATE_LEN, d_tok], s, &mut rng);
    let negative_template = Tensor::randn(&[TEMPLATE_LEN, d_tok], s, &mut rng);
    Ok(ClassVocabulary {
        class_embeddings,
        positive_template,
        negative_template,
        seed,
    })
}

/// Frozen image and text encoders.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub config: EncoderConfig,
    pub d_raw: usize,
    params: ParamStore,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentReport {
    /// `||P W - T|| / ||T||` after the fit.
    pub relative_residual: f64,
    pub positive_zero_shot_margin: f64,
}

impl EncoderPair {
    pub fn new(config: &EncoderConfig, d_raw: usize) -> Result<Self> {
        config.validate()?;
        if d_raw == 0 {
            return Err(Error::param("raw input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (h, f, t) = (config.image_hidden, config.d_feat, config.d_tok);
        p.insert("image.w1", Tensor::randn(&[d_raw, h], 1.0 / (d_raw as f64).sqrt(), &mut rng), true);
        p.insert("image.b1", Tensor::randn(&[h], 0.1, &mut rng), true);
        p.insert("image.w2", Tensor::randn(&[h, f], 1.0 / (h as f64).sqrt(), &mut rng), true);
        p.insert(
            "text.pos",
            Tensor::randn(&[config.seq_len(), t], 1.0 / (t as f64).sqrt(), &mut rng),
            true,
        );
        let layer = config.text_layer();
        for l in 0..config.text_layers {
            init_transformer_layer(&mut p, &format!("text.l{l}"), &layer, true, &mut rng)?;
        }
        p.insert("text.proj", Tensor::randn(&[t, f], 1.0 / (t as f64).sqrt(), &mut rng), true);
        Ok(EncoderPair {
            config: config.clone(),
            d_raw,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Embeds each row of `x` (`n x d_raw`).
    pub fn encode_images(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2();
        if d != self.d_raw {
            return Err(Error::shape(format!(
                "image encoder expects {} raw features, got {d}",
                self.d_raw
            )));
        }
        let x = x.clone().reshape(vec![n, d])?;
        let mut h = x.matmul(self.params.get("image.w1")?)?;
        let b1 = self.params.get("image.b1")?.data();
        let hidden = b1.len();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v = (*v + b1[i % hidden]).tanh();
        }
        let mut z = h.matmul(self.params.get("image.w2")?)?;
        for i in 0..n {
            let row = z.row_mut(i);
            let norm = l2_norm(row);
            if !(norm > 0.0) {
                return Err(Error::numeric("image embedding has zero norm"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(z)
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.encode_images(&t)?.into_data())
    }

    fn pooled_text(
        &self,
        g: &mut Graph,
        prompts: Var,
        template: &Tensor,
        classes: &Tensor,
    ) -> Result<Var> {
        let cfg = &self.config;
        let m = cfg.context_len;
        let (rows, width) = g.value(prompts).dims2();
        if width != cfg.d_tok || rows % m != 0 || rows == 0 {
            return Err(Error::shape(format!(
                "prompts must stack {m} x {} blocks, got {rows} x {width}",
                cfg.d_tok
            )));
        }
        if template.dims2() != (TEMPLATE_LEN, cfg.d_tok) {
            return Err(Error::shape(format!(
                "template must be {TEMPLATE_LEN} x {}",
                cfg.d_tok
            )));
        }
        let (k, cw) = classes.dims2();
        if cw != cfg.d_tok {
            return Err(Error::shape("class embeddings width differs from d_tok"));
        }
        let batch = rows / m;
        let tmpl = g.constant(template.clone());
        let class_rows: Vec<Var> = (0..k)
            .map(|i| g.constant(Tensor::from_raw(vec![1, cw], classes.row(i).to_vec())))
            .collect();
        let mut parts = Vec::with_capacity(batch * k * 3);
        for b in 0..batch {
            let p = if batch == 1 {
                prompts
            } else {
                g.slice_rows(prompts, b * m, m)?
            };
            for &c in &class_rows {
                parts.extend_from_slice(&[p, tmpl, c]);
            }
        }
        let seq = g.concat_rows(&parts)?;
        let pos = g.param(&self.params, "text.pos")?;
        let pos = g.tile_rows(pos, batch * k)?;
        let mut h = g.add(seq, pos)?;
        let layer = cfg.text_layer();
        for l in 0..cfg.text_layers {
            h = transformer_layer_blocks(g, h, &self.params, &format!("text.l{l}"), &layer, cfg.seq_len())?;
        }
        g.mean_blocks(h, cfg.seq_len())
    }

    /// Text features for every (prompt, class) pair. `prompts` stacks
    /// `B` prompts of `context_len` rows; the result is `(B*K) x d_feat`,
    /// prompt-major.
    pub fn text_features(
        &self,
        g: &mut Graph,
        prompts: Var,
        template: &Tensor,
        vocab: &ClassVocabulary,
    ) -> Result<Var> {
        let pooled = self.pooled_text(g, prompts, template, &vocab.class_embeddings)?;
        let proj = g.param(&self.params, "text.proj")?;
        let z = g.matmul(pooled, proj)?;
        g.l2_normalize_rows(z)
    }

    /// Value-only text features, `(B*K) x d_feat`.
    pub fn encode_text_batch(
        &self,
        prompts: &Tensor,
        template: &Tensor,
        vocab: &ClassVocabulary,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(prompts.clone());
        let t = self.text_features(&mut g, p, template, vocab)?;
        Ok(g.value(t).clone())
    }

    /// Feature of a single `[prompt ‖ template ‖ class]` sequence.
    pub fn encode_text(&self, prompt: &Tensor, template: &Tensor, class_embed: &[f64]) -> Result<Vec<f64>> {
        let m = self.config.context_len;
        if prompt.dims2() != (m, self.config.d_tok) {
            return Err(Error::shape(format!(
                "prompt must be {m} x {}, got {:?}",
                self.config.d_tok,
                prompt.shape()
            )));
        }
        let classes = Tensor::new(vec![1, class_embed.len()], class_embed.to_vec())?;
        let mut g = Graph::new();
        let p = g.constant(prompt.clone());
        let pooled = self.pooled_text(&mut g, p, template, &classes)?;
        let proj = g.param(&self.params, "text.proj")?;
        let z = g.matmul(pooled, proj)?;
        let z = g.l2_normalize_rows(z)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Fits the frozen text projection so that, with each template used as
    /// its own prompt, positive-template features point at the image
    /// embeddings of the class prototypes and negative-template features point
    /// from each prototype towards the mean of the others. Ridge-regularised
    /// least squares around the random initialisation.
    pub fn align_to_prototypes(
        &mut self,
        vocab: &ClassVocabulary,
        prototypes: &Tensor,
    ) -> Result<AlignmentReport> {
        let k = vocab.num_classes();
        if prototypes.rows() != k {
            return Err(Error::shape(format!(
                "{} prototypes for {k} classes",
                prototypes.rows()
            )));
        }
        let img = self.encode_images(prototypes)?;
        let f = self.config.d_feat;
        let mut targets = Vec::with_capacity(2 * k * f);
        targets.extend_from_slice(img.data());
        for c in 0..k {
            let mut v = vec![0.0; f];
            for j in (0..k).filter(|&j| j != c) {
                for (o, x) in v.iter_mut().zip(img.row(j)) {
                    *o += x / (k - 1) as f64;
                }
            }
            for (o, x) in v.iter_mut().zip(img.row(c)) {
                *o -= x;
            }
            let n = l2_norm(&v);
            if !(n > 0.0) {
                return Err(Error::numeric("coincident class prototypes"));
            }
            targets.extend(v.iter().map(|x| x / n));
        }

        let mut pooled = Vec::new();
        for tmpl in [&vocab.positive_template, &vocab.negative_template] {
            let mut g = Graph::new();
            let p = g.constant(self.template_prompt(tmpl));
            let v = self.pooled_text(&mut g, p, tmpl, &vocab.class_embeddings)?;
            pooled.extend_from_slice(g.value(v).data());
        }
        let d = self.config.d_tok;
        let p = DMatrix::from_row_slice(2 * k, d, &pooled);
        let t = DMatrix::from_row_slice(2 * k, f, &targets);
        let w0 = self.params.get("text.proj")?;
        let w = DMatrix::from_row_slice(d, f, w0.data());
        let lambda = self.config.align_ridge * p.norm_squared() / (2 * k) as f64;
        let gram = p.transpose() * &p + DMatrix::identity(d, d) * lambda;
        let rhs = p.transpose() * (&t - &p * &w);
        let delta = gram
            .cholesky()
            .ok_or_else(|| Error::numeric("alignment system is not positive definite"))?
            .solve(&rhs);
        let w = w + delta;
        let resid = (&p * &w - &t).norm() / t.norm();
        let mut data = Vec::with_capacity(d * f);
        for i in 0..d {
            for j in 0..f {
                data.push(w[(i, j)]);
            }
        }
        *self.params.value_mut("text.proj")? = Tensor::new(vec![d, f], data)?;

        let feats = self.encode_text_batch(&self.template_prompt(&vocab.positive_template), &vocab.positive_template, vocab)?;
        let sims = img.matmul(&feats.transpose())?;
        let mut margin = 0.0;
        for c in 0..k {
            let row = sims.row(c);
            let other = (0..k).filter(|&j| j != c).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            margin += (row[c] - other) / k as f64;
        }
        Ok(AlignmentReport {
            relative_residual: resid,
            positive_zero_shot_margin: margin,
        })
    }

    /// A prompt made of the template tokens, cycled to `context_len` rows.
    pub fn template_prompt(&self, template: &Tensor) -> Tensor {
        let m = self.config.context_len;
        let mut data = Vec::with_capacity(m * template.cols());
        for i in 0..m {
            data.extend_from_slice(template.row(i % template.rows()));
        }
        Tensor::from_raw(vec![m, template.cols()], data)
    }

    pub fn to_checkpoint(&self, vocab: &ClassVocabulary, config_hash: &str) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(CHECKPOINT_MAGIC, config_hash);
        ck.header = vec![
            self.d_raw as u64,
            c.d_tok as u64,
            c.d_feat as u64,
            vocab.num_classes() as u64,
            c.context_len as u64,
            c.image_hidden as u64,
            c.text_layers as u64,
            c.text_heads as u64,
            c.text_ffn as u64,
            c.seed,
            vocab.seed,
        ];
        for (name, p) in self.params.iter() {
            ck.push(name.clone(), &p.value);
        }
        ck.push("vocab.class_embeddings", &vocab.class_embeddings);
        ck.push("vocab.positive_template", &vocab.positive_template);
        ck.push("vocab.negative_template", &vocab.negative_template);
        ck
    }

    pub fn save(&self, vocab: &ClassVocabulary, config_hash: &str, path: &Path) -> Result<()> {
        self.to_checkpoint(vocab, config_hash).save(path)
    }

    /// Restores encoders and vocabulary. `align_ridge` is not stored and is
    /// taken from `base`.
    pub fn load(path: &Path, base: &EncoderConfig) -> Result<(EncoderPair, ClassVocabulary, String)> {
        let ck = Checkpoint::load(path, CHECKPOINT_MAGIC)?;
        let h = |i: usize| ck.header_at(i, "encoder dimensions");
        let config = EncoderConfig {
            d_tok: h(1)? as usize,
            d_feat: h(2)? as usize,
            context_len: h(4)? as usize,
            image_hidden: h(5)? as usize,
            text_layers: h(6)? as usize,
            text_heads: h(7)? as usize,
            text_ffn: h(8)? as usize,
            seed: h(9)?,
            align_ridge: base.align_ridge,
        };
        let mut pair = EncoderPair::new(&config, h(0)? as usize)?;
        let names: Vec<String> = pair.params.names().cloned().collect();
        for name in names {
            let t = ck.tensor(&name)?;
            let slot = pair.params.value_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(Error::format(path, format!("tensor `{name}` has wrong shape")));
            }
            *slot = t.clone();
        }
        let vocab = ClassVocabulary {
            class_embeddings: ck.tensor("vocab.class_embeddings")?.clone(),
            positive_template: ck.tensor("vocab.positive_template")?.clone(),
            negative_template: ck.tensor("vocab.negative_template")?.clone(),
            seed: h(10)?,
        };
        if vocab.num_classes() as u64 != h(3)? {
            return Err(Error::format(path, "class count disagrees with header"));
        }
        Ok((pair, vocab, ck.config_hash))
    }
}
