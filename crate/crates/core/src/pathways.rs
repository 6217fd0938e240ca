//! Modality-specific pathways.
//!
//! Each pathway maps a raw embedding to a refined feature `z`, a scalar
//! confidence `c` and class logits `p`:
//!
//! ```text
//! x = Dense2(relu(Dense1(x_raw)))      width D
//! z = SelfAttn(x)                      tokenized, single head, residual
//! c = sigmoid(W2 relu(W1 z + b1) + b2)
//! p = W_cls z + b_cls
//! ```

use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::model::{ModelConfig, TrimodalModel};
use crate::numcore::{Matrix, ParamStore, Tape, Var};

/// Output of one pathway for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayOutput {
    pub z: Vec<f64>,
    pub c: f64,
    pub p: Vec<f64>,
}

/// Tape nodes of one pathway for a batch.
#[derive(Clone, Copy, Debug)]
pub struct PathwayVars {
    pub z: Var,
    pub c: Var,
    pub p: Var,
}

pub fn prefix(m: ModalityId) -> String {
    format!("pathway.{}.", m.key())
}

/// Registers `{prefix}attn.{wq,wk,wv}`, each `token_dim x token_dim`.
pub(crate) fn register_attention(params: &mut ParamStore, prefix: &str, token_dim: usize, seed: u64) -> Result<()> {
    for w in ["wq", "wk", "wv"] {
        params.register_uniform(&format!("{prefix}attn.{w}"), token_dim, token_dim, seed)?;
    }
    Ok(())
}

pub(crate) fn register_dense(
    params: &mut ParamStore,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    seed: u64,
) -> Result<()> {
    params.register_uniform(&format!("{name}.w"), out_dim, in_dim, seed)?;
    params.register(format!("{name}.b"), Matrix::zeros(1, out_dim))?;
    Ok(())
}

pub(crate) fn register_params(params: &mut ParamStore, cfg: &ModelConfig, m: ModalityId, seed: u64) -> Result<()> {
    let p = prefix(m);
    register_dense(params, &format!("{p}dense1"), cfg.hidden_dim, m.input_dim(), seed)?;
    register_dense(params, &format!("{p}dense2"), cfg.feature_dim, cfg.hidden_dim, seed)?;
    register_attention(params, &p, cfg.token_dim(), seed)?;
    register_dense(params, &format!("{p}conf1"), cfg.conf_hidden, cfg.feature_dim, seed)?;
    register_dense(params, &format!("{p}conf2"), 1, cfg.conf_hidden, seed)?;
    register_dense(params, &format!("{p}cls"), cfg.num_classes, cfg.feature_dim, seed)?;
    Ok(())
}

/// `x W^T + b` using the parameters `{name}.w` / `{name}.b`.
pub(crate) fn dense_named(tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
    let w = tape.param_named(&format!("{name}.w"))?;
    let b = tape.param_named(&format!("{name}.b"))?;
    tape.dense(x, w, Some(b))
}

/// Tokenized single-head attention with residual: the `B x D` input is viewed
/// as `B*T` tokens of width `D/T`; returns `x + Attn(x)`.
pub(crate) fn attention_block(tape: &mut Tape, prefix: &str, x: Var, tokens: usize) -> Result<Var> {
    let (b, d) = tape.shape(x);
    if tokens == 0 || d % tokens != 0 {
        return Err(Error::Invalid(format!(
            "feature width {d} is not divisible by token count {tokens}"
        )));
    }
    let tok = tape.reshape(x, b * tokens, d / tokens)?;
    let wq = tape.param_named(&format!("{prefix}attn.wq"))?;
    let wk = tape.param_named(&format!("{prefix}attn.wk"))?;
    let wv = tape.param_named(&format!("{prefix}attn.wv"))?;
    let q = tape.dense(tok, wq, None)?;
    let k = tape.dense(tok, wk, None)?;
    let v = tape.dense(tok, wv, None)?;
    let a = tape.attention(q, k, v, tokens)?;
    let a = tape.reshape(a, b, d)?;
    tape.add(x, a)
}

/// Builds one pathway over a `B x input_dim` batch.
pub fn pathway_vars(tape: &mut Tape, cfg: &ModelConfig, m: ModalityId, x_raw: Var) -> Result<PathwayVars> {
    let (_, width) = tape.shape(x_raw);
    if width != m.input_dim() {
        return Err(Error::shape("pathway input", (1, m.input_dim()), (1, width)));
    }
    let p = prefix(m);
    let h = dense_named(tape, &format!("{p}dense1"), x_raw)?;
    let h = tape.relu(h);
    let x = dense_named(tape, &format!("{p}dense2"), h)?;
    let z = attention_block(tape, &p, x, cfg.tokens)?;
    let hc = dense_named(tape, &format!("{p}conf1"), z)?;
    let hc = tape.relu(hc);
    let c = dense_named(tape, &format!("{p}conf2"), hc)?;
    let c = tape.sigmoid(c);
    let logits = dense_named(tape, &format!("{p}cls"), z)?;
    Ok(PathwayVars { z, c, p: logits })
}

/// Runs pathway `m` on a single raw embedding. A zero vector is a legal
/// input and stands for a missing modality.
pub fn pathway_forward(model: &TrimodalModel, m: ModalityId, x_raw: &[f64]) -> Result<PathwayOutput> {
    if x_raw.len() != m.input_dim() {
        return Err(Error::shape("pathway_forward", (1, m.input_dim()), (1, x_raw.len())));
    }
    let mut tape = Tape::new(model.params());
    let x = tape.input(Matrix::row_vector(x_raw.to_vec()));
    let v = pathway_vars(&mut tape, model.config(), m, x)?;
    Ok(PathwayOutput {
        z: tape.value(v.z).as_slice().to_vec(),
        c: tape.value(v.c).as_slice()[0],
        p: tape.value(v.p).as_slice().to_vec(),
    })
}

/// The pathway self-attention of modality `m` applied to one `D`-vector.
pub fn self_attention(model: &TrimodalModel, m: ModalityId, x: &[f64]) -> Result<Vec<f64>> {
    attention_on_vector(model.params(), &prefix(m), x, model.config().tokens)
}

/// Attention block with parameters under `prefix` applied to one vector.
pub fn attention_on_vector(params: &ParamStore, prefix: &str, x: &[f64], tokens: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let xv = tape.input(Matrix::row_vector(x.to_vec()));
    let out = attention_block(&mut tape, prefix, xv, tokens)?;
    Ok(tape.value(out).as_slice().to_vec())
}
