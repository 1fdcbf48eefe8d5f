//! Decoder-only transformer over the interleaved sequence: a batched
//! whole-sequence pass (training, rescoring) and an incremental cached
//! step path (streaming inference). The cache stores each slot's
//! ln-normalized hidden per layer; keys/values are derived on demand, so
//! eviction shrinks both memory and compute.

use super::block::{
    attention, attention_ops, feedforward, feedforward_ops, layer_refs, layer_tensors,
    ln_affine, ln_affine_ops,
};
use crate::model::{
    mask_allowed, mask_matrix, Bound, InterleavedSequence, Model, ModelConfig, Slot, SlotKind,
    MASK_NEG,
};
use crate::numcore::{ops, NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Batched decoder pass. Returns per-slot next-token log-distributions
/// [N × (n_text+1)].
pub fn decoder_graph(
    tape: &mut Tape,
    bnd: &Bound,
    cfg: &ModelConfig,
    enc: NodeId,
    seq: &InterleavedSequence,
) -> Result<NodeId> {
    if seq.is_empty() {
        return Err(Error::Invalid("empty interleaved sequence".into()));
    }
    let proj = tape.matmul(enc, bnd.p("dec.proj.w"))?;
    let proj = tape.add_bias(proj, bnd.p("dec.proj.b"))?;
    let table = bnd.p("dec.embed");

    // group consecutive slots of the same kind into slices / embed lookups
    let mut parts = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        match seq.slots[i].kind {
            SlotKind::Audio { frame } => {
                let mut j = i;
                while j + 1 < seq.len() {
                    match seq.slots[j + 1].kind {
                        SlotKind::Audio { frame: f2 }
                            if f2 == frame + (j + 1 - i) => j += 1,
                        _ => break,
                    }
                }
                parts.push(tape.slice_rows(proj, frame, j - i + 1)?);
                i = j + 1;
            }
            _ => {
                let mut ids = Vec::new();
                while i < seq.len() {
                    match seq.slots[i].kind {
                        SlotKind::Text { id } => ids.push(id as usize),
                        SlotKind::Eos => ids.push(cfg.eos_id() as usize),
                        SlotKind::Audio { .. } => break,
                    }
                    i += 1;
                }
                parts.push(tape.embed(table, &ids)?);
            }
        }
    }
    let mut h = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };

    let pos: Vec<usize> = (0..seq.len()).collect();
    let mask = tape.constant(mask_matrix(seq, cfg.context_chunks, cfg.exclude_prev_eos));
    for l in 0..cfg.dec_layers {
        let lr = layer_refs(bnd, &format!("dec.{l}"));
        let xn = ln_affine(tape, h, lr.ln1g, lr.ln1b)?;
        let att = attention(
            tape,
            &lr,
            xn,
            xn,
            &pos,
            &pos,
            cfg.heads,
            cfg.head_dim(),
            Some(mask),
            cfg.rope_base,
        )?;
        h = tape.add(h, att)?;
        let xn2 = ln_affine(tape, h, lr.ln2g, lr.ln2b)?;
        let ff = feedforward(tape, &lr, xn2)?;
        h = tape.add(h, ff)?;
    }
    let out = ln_affine(tape, h, bnd.p("dec.out_ln.g"), bnd.p("dec.out_ln.b"))?;
    let logits = tape.matmul(out, bnd.p("dec.head.w"))?;
    let logits = tape.add_bias(logits, bnd.p("dec.head.b"))?;
    Ok(tape.log_softmax(logits))
}

/// One incremental slot.
pub enum StepInput<'a> {
    /// A [1 × width] encoder output row.
    Audio(&'a Tensor),
    Text(u32),
    Eos,
}

#[derive(Clone, Copy, Debug)]
struct Tag {
    chunk: usize,
    pos: usize,
    eos: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Audio,
    Text,
    Done,
}

/// Streaming decoder state for one session/hypothesis. Clone to fork a
/// beam hypothesis.
#[derive(Clone)]
pub struct DecoderCache {
    /// Per layer: flattened ln-normalized slot rows.
    norm_rows: Vec<Vec<f32>>,
    tags: Vec<Tag>,
    next_pos: usize,
    current_chunk: usize,
    started: bool,
    stage: Stage,
    evict_floor: usize,
}

impl DecoderCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        DecoderCache {
            norm_rows: vec![Vec::new(); cfg.dec_layers],
            tags: Vec::new(),
            next_pos: 0,
            current_chunk: 0,
            started: false,
            stage: Stage::Audio,
            evict_floor: 0,
        }
    }

    pub fn slots_cached(&self) -> usize {
        self.tags.len()
    }

    /// Distinct chunk indices still held (memory-bound probe).
    pub fn retained_chunks(&self) -> usize {
        let mut n = 0;
        let mut last = usize::MAX;
        for t in &self.tags {
            if t.chunk != last {
                n += 1;
                last = t.chunk;
            }
        }
        n
    }

    pub fn current_chunk(&self) -> usize {
        self.current_chunk
    }

    fn admit(&mut self, chunk: usize, kind_rank: Stage) -> Result<()> {
        if chunk < self.evict_floor {
            return Err(Error::Invalid(format!(
                "chunk {} was evicted (floor {})",
                chunk, self.evict_floor
            )));
        }
        if self.started {
            if chunk < self.current_chunk {
                return Err(Error::Invalid(format!(
                    "out-of-order slot: chunk {} after chunk {}",
                    chunk, self.current_chunk
                )));
            }
            if chunk == self.current_chunk {
                let ok = match (self.stage, kind_rank) {
                    (Stage::Done, _) => false,
                    (Stage::Text, Stage::Audio) => false,
                    _ => true,
                };
                if !ok {
                    return Err(Error::Invalid(format!(
                        "out-of-order slot within chunk {}",
                        chunk
                    )));
                }
            } else {
                self.stage = Stage::Audio;
            }
        }
        self.started = true;
        self.current_chunk = chunk;
        self.stage = kind_rank;
        Ok(())
    }

    /// Feeds one slot; returns the next-token log-distribution row.
    pub fn step(&mut self, model: &Model, chunk: usize, input: StepInput) -> Result<Tensor> {
        let cfg = &model.cfg;
        let p = &model.params;
        let (x0, eos) = match input {
            StepInput::Audio(row) => {
                self.admit(chunk, Stage::Audio)?;
                if row.rc() != (1, cfg.width) {
                    return Err(Error::shape("decoder_step", "audio row width"));
                }
                let x = ops::matmul(row, p.get("dec.proj.w"))?;
                (ops::add_bias(&x, p.get("dec.proj.b"))?, false)
            }
            StepInput::Text(id) => {
                self.admit(chunk, Stage::Text)?;
                if id >= cfg.n_text as u32 {
                    return Err(Error::Invalid(format!("token id {} out of range", id)));
                }
                (ops::embed(p.get("dec.embed"), &[id as usize])?, false)
            }
            StepInput::Eos => {
                self.admit(chunk, Stage::Done)?;
                (ops::embed(p.get("dec.embed"), &[cfg.eos_id() as usize])?, true)
            }
        };
        let pos = self.next_pos;
        let tag = Tag { chunk, pos, eos };
        let width = cfg.width;

        let mut x = x0;
        for l in 0..cfg.dec_layers {
            let lt = layer_tensors(p, &format!("dec.{l}"));
            let xn = ln_affine_ops(&x, lt.ln1g, lt.ln1b)?;
            self.norm_rows[l].extend_from_slice(xn.row(0));

            let nk = self.tags.len() + 1;
            let kx = Tensor::new(vec![nk, width], self.norm_rows[l].clone())?;
            let mut k_pos: Vec<usize> = self.tags.iter().map(|t| t.pos).collect();
            k_pos.push(pos);
            let mut mask = Tensor::zeros(&[1, nk]);
            for (j, kt) in self.tags.iter().enumerate() {
                let q = Slot { kind: SlotKind::Eos, chunk };
                let ks = Slot {
                    kind: if kt.eos { SlotKind::Eos } else { SlotKind::Text { id: 0 } },
                    chunk: kt.chunk,
                };
                if !mask_allowed(
                    (pos, &q),
                    (kt.pos, &ks),
                    cfg.context_chunks,
                    cfg.exclude_prev_eos,
                ) {
                    mask.set(0, j, MASK_NEG);
                }
            }
            let att = attention_ops(
                &lt,
                &xn,
                &kx,
                &[pos],
                &k_pos,
                cfg.heads,
                cfg.head_dim(),
                Some(&mask),
                cfg.rope_base,
            )?;
            x = ops::add(&x, &att)?;
            let xn2 = ln_affine_ops(&x, lt.ln2g, lt.ln2b)?;
            let ff = feedforward_ops(&lt, &xn2)?;
            x = ops::add(&x, &ff)?;
        }
        self.tags.push(tag);
        self.next_pos += 1;

        let out = ln_affine_ops(&x, p.get("dec.out_ln.g"), p.get("dec.out_ln.b"))?;
        let logits = ops::matmul(&out, p.get("dec.head.w"))?;
        let logits = ops::add_bias(&logits, p.get("dec.head.b"))?;
        Ok(ops::log_softmax(&logits))
    }

    /// Drops cached slots from chunks before `current - b`. No-op for
    /// unbounded context.
    pub fn evict(&mut self, current_chunk: usize, cfg: &ModelConfig) {
        let Some(b) = cfg.context_chunks else { return };
        let floor = current_chunk.saturating_sub(b);
        if floor <= self.evict_floor {
            return;
        }
        let keep_from = self.tags.iter().position(|t| t.chunk >= floor).unwrap_or(self.tags.len());
        for rows in &mut self.norm_rows {
            rows.drain(..keep_from * cfg.width);
        }
        self.tags.drain(..keep_from);
        self.evict_floor = floor;
    }
}
