//! Pre-norm transformer encoder layer:
//! `h = x + MHA(LN1(x))`, `y = h + FFN(LN2(h))` with a GELU feed-forward.
//!
//! Parameters live in a [`ParamStore`] under a caller-chosen prefix:
//!
//! ```text
//! {prefix}.ln1.gain  {prefix}.ln1.bias
//! {prefix}.attn.wq   {prefix}.attn.bq   (and wk/bk, wv/bv, wo/bo)
//! {prefix}.ln2.gain  {prefix}.ln2.bias
//! {prefix}.ffn.w1    {prefix}.ffn.b1    {prefix}.ffn.w2   {prefix}.ffn.b2
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        TransformerConfig {
            d_model,
            n_heads,
            d_ff,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::param("transformer widths must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Inserts freshly initialised layer parameters. Projections are Gaussian with
/// standard deviation `1/sqrt(fan_in)`; biases start at zero and layer-norm
/// gains at one.
pub fn init_transformer_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
    frozen: bool,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    store.insert(format!("{prefix}.ln1.gain"), Tensor::full(&[d], 1.0), frozen);
    store.insert(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]), frozen);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("{prefix}.attn.{w}"),
            Tensor::randn(&[d, d], fan(d), rng),
            frozen,
        );
        let b = w.replace('w', "b");
        store.insert(format!("{prefix}.attn.{b}"), Tensor::zeros(&[d]), frozen);
    }
    store.insert(format!("{prefix}.ln2.gain"), Tensor::full(&[d], 1.0), frozen);
    store.insert(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d]), frozen);
    store.insert(format!("{prefix}.ffn.w1"), Tensor::randn(&[d, f], fan(d), rng), frozen);
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[f]), frozen);
    store.insert(format!("{prefix}.ffn.w2"), Tensor::randn(&[f, d], fan(f), rng), frozen);
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]), frozen);
    Ok(())
}

fn linear(g: &mut Graph, x: Var, store: &ParamStore, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let h = g.matmul(x, wv)?;
    g.add_row(h, bv)
}

/// Records one layer on the tape. `x` is `seq x d_model`.
pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    store: &ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Result<Var> {
    let rows = g.value(x).dims2().0;
    transformer_layer_blocks(g, x, store, prefix, cfg, rows)
}

/// Same as [`transformer_layer`] over a stack of independent sequences, each
/// `seq_len` consecutive rows of `x`. Attention never crosses sequences.
pub fn transformer_layer_blocks(
    g: &mut Graph,
    x: Var,
    store: &ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
    seq_len: usize,
) -> Result<Var> {
    cfg.validate()?;
    let (_, d) = g.value(x).dims2();
    if d != cfg.d_model {
        return Err(Error::shape(format!(
            "layer `{prefix}` expects width {}, got {d}",
            cfg.d_model
        )));
    }

    let gain = g.param(store, &format!("{prefix}.ln1.gain"))?;
    let bias = g.param(store, &format!("{prefix}.ln1.bias"))?;
    let h = g.layer_norm(x, gain, bias, cfg.ln_eps)?;
    let q = linear(g, h, store, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let k = linear(g, h, store, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = linear(g, h, store, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let merged = g.attention(q, k, v, seq_len, cfg.n_heads)?;
    let attn_out = linear(g, merged, store, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    let x = g.add(x, attn_out)?;

    let gain = g.param(store, &format!("{prefix}.ln2.gain"))?;
    let bias = g.param(store, &format!("{prefix}.ln2.bias"))?;
    let h = g.layer_norm(x, gain, bias, cfg.ln_eps)?;
    let h = linear(g, h, store, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let h = g.gelu(h);
    let h = linear(g, h, store, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
    g.add(x, h)
}

/// Value-only evaluation of one layer.
pub fn transformer_layer_forward(
    x: &Tensor,
    params: &ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = transformer_layer(&mut g, xv, params, prefix, cfg)?;
    Ok(g.value(y).clone())
}
