//! Chunked streaming encoder. Each chunk is processed as an extended block
//! (its frames plus up to f lookahead frames); attention is unrestricted
//! within the block and over the per-layer hidden states of the previous
//! b chunks (context_chunks; None = all history). Lookahead rows are
//! recomputed scratch — only main-chunk rows are kept as keys for later
//! chunks — so frame encodings depend on nothing past chunk_end + f at any
//! depth. Bounding the left context keeps the steady state of a long
//! stream identical to what training-length utterances exercise; with
//! layer-input caching the receptive field is still enc_layers·b chunks,
//! but that too is length-independent.

use super::block::{attention, feedforward, layer_refs, ln_affine};
use crate::data::ChunkPlan;
use crate::model::{Bound, Model, ModelConfig};
use crate::numcore::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// One extended block through all layers.
/// `h0`: in-projected extended rows [ext_len, w]; `prev[l]`: layer-l input
/// hiddens of all earlier main frames. Returns post-LN encodings of the
/// main rows and the per-layer main-row inputs to cache.
fn chunk_block(
    tape: &mut Tape,
    bnd: &Bound,
    cfg: &ModelConfig,
    h0: NodeId,
    prev: &[Option<NodeId>],
    start_frame: usize,
    main_len: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ext_len = tape.value(h0).rc().0;
    let q_pos: Vec<usize> = (start_frame..start_frame + ext_len).collect();
    let k_pos: Vec<usize> = (0..start_frame + ext_len).collect();
    let mut h = h0;
    let mut cached = Vec::with_capacity(cfg.enc_layers);
    for l in 0..cfg.enc_layers {
        cached.push(tape.slice_rows(h, 0, main_len)?);
        let lr = layer_refs(bnd, &format!("enc.{l}"));
        let kv_raw = match prev[l] {
            Some(p) => tape.concat_rows(&[p, h])?,
            None => h,
        };
        let qn = ln_affine(tape, h, lr.ln1g, lr.ln1b)?;
        let kn = ln_affine(tape, kv_raw, lr.ln1g, lr.ln1b)?;
        let k_pos_here = &k_pos[k_pos.len() - tape.value(kv_raw).rc().0..];
        let att = attention(
            tape,
            &lr,
            qn,
            kn,
            &q_pos,
            k_pos_here,
            cfg.heads,
            cfg.head_dim(),
            None,
            cfg.rope_base,
        )?;
        h = tape.add(h, att)?;
        let xn2 = ln_affine(tape, h, lr.ln2g, lr.ln2b)?;
        let ff = feedforward(tape, &lr, xn2)?;
        h = tape.add(h, ff)?;
    }
    let main = tape.slice_rows(h, 0, main_len)?;
    let enc = ln_affine(tape, main, bnd.p("enc.out_ln.g"), bnd.p("enc.out_ln.b"))?;
    Ok((enc, cached))
}

/// Whole-utterance encoder over post-stacking features already on the tape.
/// Returns `(encodings [T'×w], ctc_logits [T'×(n_text+1)])`.
pub fn encoder_graph(
    tape: &mut Tape,
    bnd: &Bound,
    cfg: &ModelConfig,
    feats: NodeId,
    t_len: usize,
) -> Result<(NodeId, NodeId)> {
    let (rows, d) = tape.value(feats).rc();
    if rows != t_len || d != cfg.stacked_dim() {
        return Err(Error::shape(
            "encoder_forward",
            format!("features {}x{} vs expected {}x{}", rows, d, t_len, cfg.stacked_dim()),
        ));
    }
    let plan = ChunkPlan::new(t_len, cfg.chunk_frames)?;
    let xp = tape.matmul(feats, bnd.p("enc.in.w"))?;
    let xp = tape.add_bias(xp, bnd.p("enc.in.b"))?;
    let mut kept: Vec<Vec<NodeId>> = vec![Vec::new(); cfg.enc_layers];
    let mut encs = Vec::with_capacity(plan.num_chunks());
    for k in 0..plan.num_chunks() {
        let r = plan.chunk_range(k);
        let ext_end = (r.end + cfg.lookahead_frames).min(t_len);
        let h0 = tape.slice_rows(xp, r.start, ext_end - r.start)?;
        let prev: Vec<Option<NodeId>> = kept
            .iter()
            .map(|cs| match cs.len() {
                0 => Ok(None),
                1 => Ok(Some(cs[0])),
                _ => tape.concat_rows(cs).map(Some),
            })
            .collect::<Result<_>>()?;
        let (enc, cached) = chunk_block(tape, bnd, cfg, h0, &prev, r.start, r.len())?;
        encs.push(enc);
        for (l, c) in cached.into_iter().enumerate() {
            kept[l].push(c);
            if let Some(b) = cfg.context_chunks {
                while kept[l].len() > b {
                    kept[l].remove(0);
                }
            }
        }
    }
    let enc = if encs.len() == 1 {
        encs[0]
    } else {
        tape.concat_rows(&encs)?
    };
    let ctc = tape.matmul(enc, bnd.p("enc.ctc.w"))?;
    let ctc = tape.add_bias(ctc, bnd.p("enc.ctc.b"))?;
    Ok((enc, ctc))
}

/// Streaming encoder state: per-layer hidden rows of the retained
/// (last `context_chunks`) already-final chunks.
#[derive(Clone)]
pub struct EncoderState {
    layer_chunks: Vec<Vec<Tensor>>,
    frames_done: usize,
}

impl EncoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        EncoderState {
            layer_chunks: vec![Vec::new(); cfg.enc_layers],
            frames_done: 0,
        }
    }

    pub fn frames_done(&self) -> usize {
        self.frames_done
    }

    /// Encodes the next chunk. `ext_feats` holds the chunk's `main_len`
    /// frames followed by whatever lookahead frames are available (0..=f),
    /// post-stacking. Matches the batched pass bitwise.
    pub fn encode_chunk(
        &mut self,
        model: &Model,
        ext_feats: &Tensor,
        main_len: usize,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = &model.cfg;
        let (ext_len, d) = ext_feats.rc();
        if d != cfg.stacked_dim() || main_len == 0 || main_len > cfg.chunk_frames {
            return Err(Error::shape(
                "encode_chunk",
                format!("ext {}x{}, main_len {}", ext_len, d, main_len),
            ));
        }
        if ext_len < main_len || ext_len > main_len + cfg.lookahead_frames {
            return Err(Error::shape(
                "encode_chunk",
                format!("{} rows for main {} + lookahead <= {}", ext_len, main_len, cfg.lookahead_frames),
            ));
        }
        let mut tape = Tape::new();
        let bnd = model.params.bind(&mut tape, false);
        let x = tape.constant(ext_feats.clone());
        let xp = tape.matmul(x, bnd.p("enc.in.w"))?;
        let xp = tape.add_bias(xp, bnd.p("enc.in.b"))?;
        let prev: Vec<Option<NodeId>> = self
            .layer_chunks
            .iter()
            .map(|cs| match cs.len() {
                0 => Ok(None),
                _ => {
                    let refs: Vec<&Tensor> = cs.iter().collect();
                    let cat = crate::numcore::ops::concat_rows(&refs)?;
                    Ok(Some(tape.constant(cat)))
                }
            })
            .collect::<Result<_>>()?;
        let (enc, cached) = chunk_block(&mut tape, &bnd, cfg, xp, &prev, self.frames_done, main_len)?;
        let ctc = tape.matmul(enc, bnd.p("enc.ctc.w"))?;
        let ctc = tape.add_bias(ctc, bnd.p("enc.ctc.b"))?;
        for (l, c) in cached.into_iter().enumerate() {
            self.layer_chunks[l].push(tape.value(c).clone());
            if let Some(b) = cfg.context_chunks {
                while self.layer_chunks[l].len() > b {
                    self.layer_chunks[l].remove(0);
                }
            }
        }
        self.frames_done += main_len;
        Ok((tape.value(enc).clone(), tape.value(ctc).clone()))
    }
}
