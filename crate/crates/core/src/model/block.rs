//! Shared pre-LN transformer block pieces, in two mirrored forms: tape
//! nodes for batched/trainable passes and raw kernels for incremental
//! steps. The two must stay op-for-op identical so cached decoding matches
//! the batched forward bitwise.

use crate::model::Bound;
use crate::numcore::{ops, NodeId, Tape, Tensor};
use crate::Result;

pub(super) struct LayerRefs {
    pub ln1g: NodeId,
    pub ln1b: NodeId,
    pub ln2g: NodeId,
    pub ln2b: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub(super) fn layer_refs(bnd: &Bound, pfx: &str) -> LayerRefs {
    LayerRefs {
        ln1g: bnd.p(&format!("{pfx}.ln1.g")),
        ln1b: bnd.p(&format!("{pfx}.ln1.b")),
        ln2g: bnd.p(&format!("{pfx}.ln2.g")),
        ln2b: bnd.p(&format!("{pfx}.ln2.b")),
        wq: bnd.p(&format!("{pfx}.wq")),
        wk: bnd.p(&format!("{pfx}.wk")),
        wv: bnd.p(&format!("{pfx}.wv")),
        wo: bnd.p(&format!("{pfx}.wo")),
        w1: bnd.p(&format!("{pfx}.ff.w1")),
        b1: bnd.p(&format!("{pfx}.ff.b1")),
        w2: bnd.p(&format!("{pfx}.ff.w2")),
        b2: bnd.p(&format!("{pfx}.ff.b2")),
    }
}

pub(super) fn ln_affine(tape: &mut Tape, x: NodeId, g: NodeId, b: NodeId) -> Result<NodeId> {
    let n = tape.layernorm(x);
    let n = tape.mul_bias(n, g)?;
    tape.add_bias(n, b)
}

/// Multi-head attention over pre-normalized query rows `qx` and key/value
/// rows `kx`, with rotary positions and an optional additive mask.
#[allow(clippy::too_many_arguments)]
pub(super) fn attention(
    tape: &mut Tape,
    lr: &LayerRefs,
    qx: NodeId,
    kx: NodeId,
    q_pos: &[usize],
    k_pos: &[usize],
    heads: usize,
    head_dim: usize,
    mask: Option<NodeId>,
    rope_base: f32,
) -> Result<NodeId> {
    let q = tape.matmul(qx, lr.wq)?;
    let k = tape.matmul(kx, lr.wk)?;
    let v = tape.matmul(kx, lr.wv)?;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let qh = tape.rope(qh, q_pos, rope_base)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let kh = tape.rope(kh, k_pos, rope_base)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let att = tape.softmax(scores);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, lr.wo)
}

pub(super) fn feedforward(tape: &mut Tape, lr: &LayerRefs, xn: NodeId) -> Result<NodeId> {
    let h = tape.matmul(xn, lr.w1)?;
    let h = tape.add_bias(h, lr.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, lr.w2)?;
    tape.add_bias(h, lr.b2)
}

// ---- raw-kernel mirrors (incremental decoding path) ----

pub(super) struct LayerTensors<'a> {
    pub ln1g: &'a Tensor,
    pub ln1b: &'a Tensor,
    pub ln2g: &'a Tensor,
    pub ln2b: &'a Tensor,
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

pub(super) fn layer_tensors<'a>(params: &'a crate::model::Params, pfx: &str) -> LayerTensors<'a> {
    LayerTensors {
        ln1g: params.get(&format!("{pfx}.ln1.g")),
        ln1b: params.get(&format!("{pfx}.ln1.b")),
        ln2g: params.get(&format!("{pfx}.ln2.g")),
        ln2b: params.get(&format!("{pfx}.ln2.b")),
        wq: params.get(&format!("{pfx}.wq")),
        wk: params.get(&format!("{pfx}.wk")),
        wv: params.get(&format!("{pfx}.wv")),
        wo: params.get(&format!("{pfx}.wo")),
        w1: params.get(&format!("{pfx}.ff.w1")),
        b1: params.get(&format!("{pfx}.ff.b1")),
        w2: params.get(&format!("{pfx}.ff.w2")),
        b2: params.get(&format!("{pfx}.ff.b2")),
    }
}

pub(super) fn ln_affine_ops(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = ops::layernorm(x);
    let n = ops::mul_bias(&n, g)?;
    ops::add_bias(&n, b)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_ops(
    lt: &LayerTensors,
    qx: &Tensor,
    kx: &Tensor,
    q_pos: &[usize],
    k_pos: &[usize],
    heads: usize,
    head_dim: usize,
    mask: Option<&Tensor>,
    rope_base: f32,
) -> Result<Tensor> {
    let q = ops::matmul(qx, lt.wq)?;
    let k = ops::matmul(kx, lt.wk)?;
    let v = ops::matmul(kx, lt.wv)?;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ops::slice_cols(&q, h * head_dim, head_dim)?;
        let qh = ops::rope(&qh, q_pos, rope_base)?;
        let kh = ops::slice_cols(&k, h * head_dim, head_dim)?;
        let kh = ops::rope(&kh, k_pos, rope_base)?;
        let vh = ops::slice_cols(&v, h * head_dim, head_dim)?;
        let kt = ops::transpose(&kh);
        let mut scores = ops::matmul(&qh, &kt)?;
        scores = ops::scale(&scores, scale);
        if let Some(m) = mask {
            scores = ops::add(&scores, m)?;
        }
        let att = ops::softmax(&scores);
        outs.push(ops::matmul(&att, &vh)?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let cat = ops::concat_cols(&refs)?;
    ops::matmul(&cat, lt.wo)
}

pub(super) fn feedforward_ops(lt: &LayerTensors, xn: &Tensor) -> Result<Tensor> {
    let h = ops::matmul(xn, lt.w1)?;
    let h = ops::add_bias(&h, lt.b1)?;
    let h = ops::relu(&h);
    let h = ops::matmul(&h, lt.w2)?;
    ops::add_bias(&h, lt.b2)
}
