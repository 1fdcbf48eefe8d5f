//! Chunked streaming encoder with a CTC head, decoder-only transformer over
//! interleaved audio/text slots, windowed attention, and a chunk-evicting
//! attention cache.

mod block;
mod decoder;
mod encoder;
mod interleave;

pub use decoder::{decoder_graph, DecoderCache, StepInput};
pub use encoder::{encoder_graph, EncoderState};
pub use interleave::{interleave, mask_allowed, mask_matrix, InterleavedSequence, Slot, SlotKind};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::data::FRAME_STACK_STRIDE;
use crate::numcore::{randn, NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Additive mask value; exp(score + MASK_NEG - max) underflows to exactly
/// 0.0, so masked keys contribute nothing bitwise.
pub const MASK_NEG: f32 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Raw (pre-stacking) feature dimension.
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Feedforward hidden size = ff_mult * width.
    pub ff_mult: usize,
    /// Chunk size c in encoder frames.
    pub chunk_frames: usize,
    /// Previous chunks b kept attendable; None = unbounded.
    pub context_chunks: Option<usize>,
    /// Encoder lookahead f in encoder frames.
    pub lookahead_frames: usize,
    /// Text vocabulary size; blank and EOS ids both equal n_text.
    pub n_text: usize,
    pub max_tokens_per_chunk: usize,
    /// Drop previous chunks' EOS keys from the decoder window.
    pub exclude_prev_eos: bool,
    pub rope_base: f32,
}

impl ModelConfig {
    /// Desk-scale default: trains to low WER in minutes on a CPU.
    pub fn desk(feat_dim: usize, n_text: usize) -> Self {
        ModelConfig {
            feat_dim,
            enc_layers: 2,
            dec_layers: 2,
            width: 64,
            heads: 4,
            ff_mult: 4,
            chunk_frames: 8,
            context_chunks: Some(2),
            lookahead_frames: 6,
            n_text,
            max_tokens_per_chunk: 8,
            exclude_prev_eos: false,
            rope_base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 {
            return Err(Error::Config("chunk_frames must be >= 1".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::Config("head dim must be even for rotary".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.n_text == 0 || self.feat_dim == 0 {
            return Err(Error::Config("empty vocab or features".into()));
        }
        if self.max_tokens_per_chunk == 0 {
            return Err(Error::Config("max_tokens_per_chunk must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stacked_dim(&self) -> usize {
        self.feat_dim * FRAME_STACK_STRIDE
    }

    /// CTC head classes: text + blank.
    pub fn ctc_classes(&self) -> usize {
        self.n_text + 1
    }

    /// Decoder output classes: text + EOS.
    pub fn decoder_classes(&self) -> usize {
        self.n_text + 1
    }

    pub fn eos_id(&self) -> u32 {
        self.n_text as u32
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Ordered, named parameter set. Order is fixed at init time so optimizer
/// state and gradient slots line up across runs and checkpoints.
#[derive(Clone)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: &str, t: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.names.len()).is_none(),
            "duplicate param {}",
            name
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.tensors.len());
        self.tensors = tensors;
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Feed every parameter onto a tape, as trainable inputs or as
    /// constants, returning name -> node bindings in entry order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut ids = Vec::with_capacity(self.names.len());
        let mut by_name = HashMap::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let id = if trainable {
                tape.input(t.clone())
            } else {
                tape.constant(t.clone())
            };
            ids.push(id);
            by_name.insert(name.clone(), id);
        }
        Bound { ids, by_name }
    }
}

/// Tape bindings for a parameter set.
pub struct Bound {
    pub ids: Vec<NodeId>,
    by_name: HashMap<String, NodeId>,
}

impl Bound {
    pub fn p(&self, name: &str) -> NodeId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unbound param {}", name))
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

fn init_layer(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, w: usize, ff: usize) {
    let std = 0.08;
    for n in ["ln1.g", "ln2.g"] {
        params.push(&format!("{prefix}.{n}"), Tensor::new(vec![w], vec![1.0; w]).unwrap());
    }
    for n in ["ln1.b", "ln2.b"] {
        params.push(&format!("{prefix}.{n}"), Tensor::zeros(&[w]));
    }
    for n in ["wq", "wk", "wv", "wo"] {
        params.push(&format!("{prefix}.{n}"), randn(rng, &[w, w], std));
    }
    params.push(&format!("{prefix}.ff.w1"), randn(rng, &[w, ff], std));
    params.push(&format!("{prefix}.ff.b1"), Tensor::zeros(&[ff]));
    params.push(&format!("{prefix}.ff.w2"), randn(rng, &[ff, w], std));
    params.push(&format!("{prefix}.ff.b2"), Tensor::zeros(&[w]));
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_64656c);
        let mut p = Params::new();
        let w = cfg.width;
        let ff = cfg.ff_mult * w;
        let std = 0.08;

        p.push("enc.in.w", randn(&mut rng, &[cfg.stacked_dim(), w], std));
        p.push("enc.in.b", Tensor::zeros(&[w]));
        for l in 0..cfg.enc_layers {
            init_layer(&mut p, &mut rng, &format!("enc.{l}"), w, ff);
        }
        p.push("enc.out_ln.g", Tensor::new(vec![w], vec![1.0; w]).unwrap());
        p.push("enc.out_ln.b", Tensor::zeros(&[w]));
        p.push("enc.ctc.w", randn(&mut rng, &[w, cfg.ctc_classes()], std));
        p.push("enc.ctc.b", Tensor::zeros(&[cfg.ctc_classes()]));

        p.push("dec.proj.w", randn(&mut rng, &[w, w], std));
        p.push("dec.proj.b", Tensor::zeros(&[w]));
        p.push("dec.embed", randn(&mut rng, &[cfg.decoder_classes(), w], std));
        for l in 0..cfg.dec_layers {
            init_layer(&mut p, &mut rng, &format!("dec.{l}"), w, ff);
        }
        p.push("dec.out_ln.g", Tensor::new(vec![w], vec![1.0; w]).unwrap());
        p.push("dec.out_ln.b", Tensor::zeros(&[w]));
        p.push("dec.head.w", randn(&mut rng, &[w, cfg.decoder_classes()], std));
        p.push("dec.head.b", Tensor::zeros(&[cfg.decoder_classes()]));

        Ok(Model { cfg, params: p })
    }

    /// Full-utterance encoder pass over post-stacking features.
    /// Returns per-frame encodings and CTC logits.
    pub fn encoder_forward(&self, feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bnd = self.params.bind(&mut tape, false);
        let x = tape.constant(feats.clone());
        let (enc, ctc) = encoder_graph(&mut tape, &bnd, &self.cfg, x, feats.rc().0)?;
        Ok((tape.value(enc).clone(), tape.value(ctc).clone()))
    }

    /// CTC log-probabilities over post-stacking features.
    pub fn ctc_logprobs(&self, feats: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bnd = self.params.bind(&mut tape, false);
        let x = tape.constant(feats.clone());
        let (_, ctc) = encoder_graph(&mut tape, &bnd, &self.cfg, x, feats.rc().0)?;
        let lp = tape.log_softmax(ctc);
        Ok(tape.value(lp).clone())
    }

    /// Batched decoder pass: per-slot next-token log-distributions.
    pub fn decoder_forward_full(&self, enc: &Tensor, seq: &InterleavedSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bnd = self.params.bind(&mut tape, false);
        let e = tape.constant(enc.clone());
        let out = decoder_graph(&mut tape, &bnd, &self.cfg, e, seq)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        let mut w = Writer::new(BufWriter::new(f));
        w.bytes(b"BRKM")?;
        w.u32(1)?;
        let c = &self.cfg;
        for v in [
            c.feat_dim,
            c.enc_layers,
            c.dec_layers,
            c.width,
            c.heads,
            c.ff_mult,
            c.chunk_frames,
            c.lookahead_frames,
            c.n_text,
            c.max_tokens_per_chunk,
        ] {
            w.u32(v as u32)?;
        }
        // u32::MAX encodes unbounded context
        w.u32(c.context_chunks.map_or(u32::MAX, |b| b as u32))?;
        w.u8(c.exclude_prev_eos as u8)?;
        w.f32(c.rope_base)?;
        w.u32(self.params.len() as u32)?;
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            w.string(name)?;
            w.u32(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.u32(d as u32)?;
            }
            w.f32_slice(t.data())?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Model> {
        let f = File::open(path)?;
        let mut r = Reader::new(BufReader::new(f));
        r.magic(b"BRKM")?;
        let ver = r.u32()?;
        if ver != 1 {
            return Err(r.data_err(format!("unsupported checkpoint version {}", ver)));
        }
        let mut v = [0usize; 10];
        for slot in v.iter_mut() {
            *slot = r.u32()? as usize;
        }
        let ctx = r.u32()?;
        let cfg = ModelConfig {
            feat_dim: v[0],
            enc_layers: v[1],
            dec_layers: v[2],
            width: v[3],
            heads: v[4],
            ff_mult: v[5],
            chunk_frames: v[6],
            lookahead_frames: v[7],
            n_text: v[8],
            max_tokens_per_chunk: v[9],
            context_chunks: if ctx == u32::MAX { None } else { Some(ctx as usize) },
            exclude_prev_eos: r.u8()? != 0,
            rope_base: r.f32()?,
        };
        cfg.validate()?;
        let n = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = r.f32_vec(count)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Data {
                offset: 0,
                detail: format!("param {}: {}", name, e),
            })?;
            params.push(&name, t);
        }
        Ok(Model { cfg, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChunkPlan;
    use crate::ctcalign::SegmentedTranscript;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            enc_layers: 2,
            dec_layers: 2,
            width: 16,
            heads: 2,
            ff_mult: 2,
            chunk_frames: 4,
            context_chunks: Some(1),
            lookahead_frames: 2,
            n_text: 5,
            max_tokens_per_chunk: 4,
            exclude_prev_eos: false,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.width = 10; // not divisible by heads * 2
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.chunk_frames = 0;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("brook_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let m = Model::new(tiny_cfg(), 7).unwrap();
        m.save(&path).unwrap();
        let m2 = Model::load(&path).unwrap();
        assert_eq!(m.cfg, m2.cfg);
        assert_eq!(m.params.names(), m2.params.names());
        for (a, b) in m.params.tensors().iter().zip(m2.params.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn forward_shapes_and_distributions() {
        use rand::SeedableRng;
        let cfg = tiny_cfg();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let feats = crate::numcore::randn(&mut rng, &[10, cfg.stacked_dim()], 1.0);
        let (enc, ctc) = m.encoder_forward(&feats).unwrap();
        assert_eq!(enc.rc(), (10, cfg.width));
        assert_eq!(ctc.rc(), (10, cfg.ctc_classes()));

        let plan = ChunkPlan::new(10, cfg.chunk_frames).unwrap();
        let seg = SegmentedTranscript {
            chunks: vec![vec![0, 1], vec![2], vec![]],
        };
        let seq = interleave(&plan, &seg).unwrap();
        let out = m.decoder_forward_full(&enc, &seq).unwrap();
        assert_eq!(out.rc(), (seq.slots.len(), cfg.decoder_classes()));
        // every row is a log-distribution
        for i in 0..out.rc().0 {
            let lse: f64 = out.row(i).iter().map(|&x| (x as f64).exp()).sum();
            assert!((lse - 1.0).abs() < 1e-5, "row {} sums to {}", i, lse);
        }
    }
}
