//! Multi-head scaled dot-product attention, built from tape primitives so
//! the backward pass falls out of the recorded graph.

use super::tape::{NodeId, Tape};
use super::Parameter;
use crate::element::Element;
use crate::error::{Error, Result};
use rand::Rng;

/// Projection weights of one attention module. All projections are square
/// (embed width in, embed width out).
#[derive(Debug, Clone)]
pub struct AttentionParams<F: Element = f32> {
    pub wq: Parameter<F>,
    pub bq: Parameter<F>,
    pub wk: Parameter<F>,
    pub bk: Parameter<F>,
    pub wv: Parameter<F>,
    pub bv: Parameter<F>,
    pub wo: Parameter<F>,
    pub bo: Parameter<F>,
    pub heads: usize,
}

impl<F: Element> AttentionParams<F> {
    pub fn init<R: Rng>(embed: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(embed, heads)?;
        let proj = |rng: &mut R| Parameter::kaiming(&[embed, embed], embed, rng);
        Ok(AttentionParams {
            wq: proj(rng),
            bq: Parameter::zeros(&[embed]),
            wk: proj(rng),
            bk: Parameter::zeros(&[embed]),
            wv: proj(rng),
            bv: Parameter::zeros(&[embed]),
            wo: proj(rng),
            bo: Parameter::zeros(&[embed]),
            heads,
        })
    }
}

pub fn check_heads(embed: usize, heads: usize) -> Result<()> {
    if heads == 0 || embed % heads != 0 {
        return Err(Error::Config(format!(
            "embed width {embed} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

/// Node-id view of attention projections already bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub heads: usize,
}

/// Scaled dot-product attention over `[N, L, D]` sequences.
///
/// Self-attention is the call with `query_src == kv_src`; cross-attention
/// feeds one modality's sequence as queries against the other's keys/values.
/// Per head the scores are scaled by 1/sqrt(D/heads); head outputs are
/// concatenated and passed through the output projection.
pub fn multi_head_attention<F: Element>(
    tape: &mut Tape<F>,
    query_src: NodeId,
    kv_src: NodeId,
    p: &AttentionNodes,
) -> Result<NodeId> {
    let (n, l_q, d) = seq_dims(tape, query_src)?;
    let (n_kv, l_kv, d_kv) = seq_dims(tape, kv_src)?;
    if n != n_kv || d != d_kv {
        return Err(Error::shape(
            "multi_head_attention",
            &tape.value(query_src).shape.clone(),
            &tape.value(kv_src).shape.clone(),
        ));
    }
    check_heads(d, p.heads)?;
    let dh = d / p.heads;

    let q = tape.dense(query_src, p.wq, p.bq)?;
    let k = tape.dense(kv_src, p.wk, p.bk)?;
    let v = tape.dense(kv_src, p.wv, p.bv)?;

    // [N, L, D] -> [N*heads, L, dh]
    let split = |tape: &mut Tape<F>, x: NodeId, l: usize| -> Result<NodeId> {
        let x = tape.reshape(x, &[n, l, p.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[n * p.heads, l, dh])
    };
    let qh = split(tape, q, l_q)?;
    let kh = split(tape, k, l_kv)?;
    let vh = split(tape, v, l_kv)?;

    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scores = tape.matmul_bat(qh, kt)?;
    let scores = tape.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let weights = tape.softmax(scores);
    let ctx = tape.matmul_bat(weights, vh)?;

    // [N*heads, L_q, dh] -> [N, L_q, D]
    let ctx = tape.reshape(ctx, &[n, p.heads, l_q, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, l_q, d])?;

    tape.dense(ctx, p.wo, p.bo)
}

fn seq_dims<F: Element>(tape: &Tape<F>, id: NodeId) -> Result<(usize, usize, usize)> {
    match tape.value(id).shape.as_slice() {
        &[n, l, d] => Ok((n, l, d)),
        s => Err(Error::shape("multi_head_attention: sequence", &[3], &[s.len()])),
    }
}
