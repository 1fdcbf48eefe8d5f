//! Streaming inference: per-chunk autoregressive generation until EOS,
//! alignment-synchronous beam search, and the session API.
//!
//! Every synchronous step extends each live hypothesis by exactly one
//! token (text or EOS). A hypothesis that emits EOS is frozen for the rest
//! of the chunk and rejoins the beam when the next chunk arrives. Pruning
//! keeps the top-W scores; ties prefer frozen hypotheses, then smaller
//! token ids.

use crate::ctcalign::SegmentedTranscript;
use crate::data::ChunkPlan;
use crate::model::{interleave, DecoderCache, EncoderState, Model, SlotKind, StepInput};
use crate::numcore::{ops, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    Token(u32),
    Eos,
}

#[derive(Clone)]
pub struct Hypothesis {
    pub emissions: Vec<Emission>,
    pub score: f64,
    cache: DecoderCache,
    last_row: Option<Tensor>,
    frozen: bool,
}

impl Hypothesis {
    fn new(model: &Model) -> Self {
        Hypothesis {
            emissions: Vec::new(),
            score: 0.0,
            cache: DecoderCache::new(&model.cfg),
            last_row: None,
            frozen: false,
        }
    }

    /// Emitted text tokens, EOS markers stripped.
    pub fn tokens(&self) -> Vec<u32> {
        self.emissions
            .iter()
            .filter_map(|e| match e {
                Emission::Token(t) => Some(*t),
                Emission::Eos => None,
            })
            .collect()
    }

    /// Per-chunk token lists (EOS closes a chunk).
    pub fn per_chunk(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new()];
        for e in &self.emissions {
            match e {
                Emission::Token(t) => out.last_mut().unwrap().push(*t),
                Emission::Eos => out.push(Vec::new()),
            }
        }
        out.pop(); // every chunk ends with EOS
        out
    }
}

/// New output since the previous push: `confirmed` tokens are shared by the
/// whole beam and will never change; `provisional` is the current best
/// hypothesis's unstable tail.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptDelta {
    pub confirmed: Vec<u32>,
    pub provisional: Vec<u32>,
}

pub struct StreamingSession<'m> {
    model: &'m Model,
    beam: usize,
    enc: EncoderState,
    /// Stacked frames received but not yet consumed as chunk mains.
    buf: Vec<f32>,
    buf_rows: usize,
    next_chunk: usize,
    hyps: Vec<Hypothesis>,
    confirmed: Vec<u32>,
    finalized: bool,
    pushed_any: bool,
}

impl<'m> StreamingSession<'m> {
    pub fn new(model: &'m Model, beam: usize) -> Result<Self> {
        if beam == 0 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        Ok(StreamingSession {
            model,
            beam,
            enc: EncoderState::new(&model.cfg),
            buf: Vec::new(),
            buf_rows: 0,
            next_chunk: 0,
            hyps: Vec::new(),
            confirmed: Vec::new(),
            finalized: false,
            pushed_any: false,
        })
    }

    /// Pushes up to c post-stacking frames. Chunks are decoded as soon as
    /// their lookahead is covered by later frames.
    pub fn push_chunk(&mut self, frames: &Tensor) -> Result<TranscriptDelta> {
        if self.finalized {
            return Err(Error::Invalid("push after finalize".into()));
        }
        let (rows, d) = frames.rc();
        let cfg = &self.model.cfg;
        if d != cfg.stacked_dim() {
            return Err(Error::shape("push_chunk", format!("feature dim {}", d)));
        }
        if rows == 0 || rows > cfg.chunk_frames {
            return Err(Error::Invalid(format!(
                "chunk of {} frames exceeds c = {}",
                rows, cfg.chunk_frames
            )));
        }
        self.buf.extend_from_slice(frames.data());
        self.buf_rows += rows;
        self.pushed_any = true;
        self.process(false)?;
        Ok(self.delta())
    }

    /// Flushes buffered frames (with whatever lookahead remains) and
    /// returns the best hypothesis's tokens, EOS markers removed.
    pub fn finalize(&mut self) -> Result<Vec<u32>> {
        if self.finalized {
            return Err(Error::Invalid("finalize twice".into()));
        }
        if !self.pushed_any {
            return Err(Error::Invalid("finalize before any chunk".into()));
        }
        self.process(true)?;
        self.finalized = true;
        let best = self.best().expect("non-empty beam after finalize");
        let tokens = best.tokens();
        self.confirmed = tokens.clone();
        Ok(tokens)
    }

    /// Best hypothesis (score, ties toward lexicographically smaller token
    /// sequence). Present once at least one chunk was decoded.
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.iter().min_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens().cmp(&b.tokens()))
        })
    }

    pub fn chunks_decoded(&self) -> usize {
        self.next_chunk
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Largest cache footprint across the beam, in retained chunks.
    pub fn max_retained_chunks(&self) -> usize {
        self.hyps.iter().map(|h| h.cache.retained_chunks()).max().unwrap_or(0)
    }

    fn delta(&self) -> TranscriptDelta {
        let streams: Vec<Vec<u32>> = self.hyps.iter().map(|h| h.tokens()).collect();
        let mut common = streams.first().cloned().unwrap_or_default();
        for s in &streams[1.min(streams.len())..] {
            let n = common.iter().zip(s.iter()).take_while(|(a, b)| a == b).count();
            common.truncate(n);
        }
        let confirmed = common[self.confirmed.len()..].to_vec();
        let best = self.best().map(|h| h.tokens()).unwrap_or_default();
        let provisional = best[common.len().min(best.len())..].to_vec();
        TranscriptDelta { confirmed, provisional }
    }

    fn process(&mut self, flush: bool) -> Result<()> {
        let c = self.model.cfg.chunk_frames;
        let f = self.model.cfg.lookahead_frames;
        let d = self.model.cfg.stacked_dim();
        loop {
            let (main, ext) = if !flush && self.buf_rows >= c + f {
                (c, c + f)
            } else if flush && self.buf_rows > 0 {
                let main = c.min(self.buf_rows);
                (main, (main + f).min(self.buf_rows))
            } else {
                break;
            };
            let ext_feats = Tensor::new(vec![ext, d], self.buf[..ext * d].to_vec())?;
            let (enc, _) = self.enc.encode_chunk(self.model, &ext_feats, main)?;
            self.buf.drain(..main * d);
            self.buf_rows -= main;
            self.decode_chunk(&enc)?;
        }
        Ok(())
    }

    fn decode_chunk(&mut self, enc: &Tensor) -> Result<()> {
        let cfg = &self.model.cfg;
        let k = self.next_chunk;
        if self.hyps.is_empty() {
            self.hyps.push(Hypothesis::new(self.model));
        }
        for h in &mut self.hyps {
            h.cache.evict(k, cfg);
            h.frozen = false;
            for i in 0..enc.rc().0 {
                let row = ops::slice_rows(enc, i, 1)?;
                h.last_row = Some(h.cache.step(self.model, k, StepInput::Audio(&row))?);
            }
        }

        let eos = cfg.eos_id() as usize;
        for step in 0..=cfg.max_tokens_per_chunk {
            if self.hyps.iter().all(|h| h.frozen) {
                break;
            }
            if step == cfg.max_tokens_per_chunk {
                // cap reached: force EOS at its actual model probability
                for h in &mut self.hyps {
                    if !h.frozen {
                        let lp = h.last_row.as_ref().unwrap().at(0, eos) as f64;
                        h.last_row = Some(h.cache.step(self.model, k, StepInput::Eos)?);
                        h.score += lp;
                        h.emissions.push(Emission::Eos);
                        h.frozen = true;
                    }
                }
                break;
            }
            // candidate = (score, frozen-first, class, parent index)
            let mut cands: Vec<(f64, u8, usize, usize)> = Vec::new();
            for (i, h) in self.hyps.iter().enumerate() {
                if h.frozen {
                    cands.push((h.score, 0, 0, i));
                } else {
                    let row = h.last_row.as_ref().unwrap();
                    for cls in 0..=eos {
                        cands.push((h.score + row.at(0, cls) as f64, 1, cls, i));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            cands.truncate(self.beam);

            let mut next = Vec::with_capacity(cands.len());
            for (score, kind, cls, i) in cands {
                if kind == 0 {
                    next.push(self.hyps[i].clone());
                    continue;
                }
                let mut h = self.hyps[i].clone();
                h.score = score;
                if cls == eos {
                    h.last_row = Some(h.cache.step(self.model, k, StepInput::Eos)?);
                    h.emissions.push(Emission::Eos);
                    h.frozen = true;
                } else {
                    h.last_row =
                        Some(h.cache.step(self.model, k, StepInput::Text(cls as u32))?);
                    h.emissions.push(Emission::Token(cls as u32));
                }
                next.push(h);
            }
            self.hyps = next;

            // alignment-synchrony: every live hypothesis has emitted the
            // same number of tokens (frozen ones wait at their EOS)
            let live: Vec<usize> = self
                .hyps
                .iter()
                .filter(|h| !h.frozen)
                .map(|h| h.emissions.len())
                .collect();
            assert!(
                live.windows(2).all(|w| w[0] == w[1]),
                "beam lost alignment-synchrony"
            );
        }
        self.next_chunk += 1;
        Ok(())
    }
}

/// Beam width 1 over the whole (post-stacking) utterance.
pub fn greedy_decode(model: &Model, feats: &Tensor) -> Result<Vec<u32>> {
    decode_stacked(model, feats, 1)
}

/// Streams an utterance through a session in c-frame pushes.
pub fn decode_stacked(model: &Model, feats: &Tensor, beam: usize) -> Result<Vec<u32>> {
    let mut s = StreamingSession::new(model, beam)?;
    let c = model.cfg.chunk_frames;
    let t = feats.rc().0;
    let mut i = 0;
    while i < t {
        let n = c.min(t - i);
        let part = ops::slice_rows(feats, i, n)?;
        s.push_chunk(&part)?;
        i += n;
    }
    s.finalize()
}

/// Decodes and also returns the winning hypothesis's per-chunk emissions
/// and score, for rescoring checks.
pub fn decode_traced(
    model: &Model,
    feats: &Tensor,
    beam: usize,
) -> Result<(Vec<u32>, Vec<Vec<u32>>, f64)> {
    let mut s = StreamingSession::new(model, beam)?;
    let c = model.cfg.chunk_frames;
    let t = feats.rc().0;
    let mut i = 0;
    while i < t {
        let n = c.min(t - i);
        let part = ops::slice_rows(feats, i, n)?;
        s.push_chunk(&part)?;
        i += n;
    }
    let tokens = s.finalize()?;
    let best = s.best().unwrap();
    Ok((tokens, best.per_chunk(), best.score))
}

/// Scores an emission sequence with the batched forward pass: the sum of
/// next-token log-probabilities of every text token and EOS.
pub fn rescore(model: &Model, feats: &Tensor, per_chunk: &[Vec<u32>]) -> Result<f64> {
    let t_len = feats.rc().0;
    let plan = ChunkPlan::new(t_len, model.cfg.chunk_frames)?;
    let seg = SegmentedTranscript { chunks: per_chunk.to_vec() };
    let seq = interleave(&plan, &seg)?;
    let (enc, _) = model.encoder_forward(feats)?;
    let out = model.decoder_forward_full(&enc, &seq)?;
    let mut score = 0.0;
    for i in 1..seq.len() {
        let cls = match seq.slots[i].kind {
            SlotKind::Text { id } => id as usize,
            SlotKind::Eos => model.cfg.eos_id() as usize,
            SlotKind::Audio { .. } => continue,
        };
        score += out.at(i - 1, cls) as f64;
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::randn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            enc_layers: 1,
            dec_layers: 1,
            width: 16,
            heads: 2,
            ff_mult: 2,
            chunk_frames: 4,
            context_chunks: Some(1),
            lookahead_frames: 2,
            n_text: 4,
            max_tokens_per_chunk: 3,
            exclude_prev_eos: false,
            rope_base: 10000.0,
        }
    }

    fn feats(rng: &mut ChaCha8Rng, t: usize, cfg: &ModelConfig) -> Tensor {
        randn(rng, &[t, cfg.stacked_dim()], 1.0)
    }

    #[test]
    fn beam_one_equals_greedy_and_is_deterministic() {
        let cfg = cfg();
        let m = Model::new(cfg.clone(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..6 {
            let t = rng.gen_range(3..=14);
            let x = feats(&mut rng, t, &cfg);
            let a = greedy_decode(&m, &x).unwrap();
            let b = decode_stacked(&m, &x, 1).unwrap();
            let c = greedy_decode(&m, &x).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn session_lifecycle_errors() {
        let cfg = cfg();
        let m = Model::new(cfg.clone(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);

        let mut s = StreamingSession::new(&m, 1).unwrap();
        assert!(s.finalize().is_err()); // nothing pushed

        let mut s = StreamingSession::new(&m, 1).unwrap();
        let too_big = feats(&mut rng, cfg.chunk_frames + 1, &cfg);
        assert!(s.push_chunk(&too_big).is_err());
        let ok = feats(&mut rng, cfg.chunk_frames, &cfg);
        s.push_chunk(&ok).unwrap();
        s.finalize().unwrap();
        assert!(s.push_chunk(&ok).is_err()); // push after finalize
        assert!(s.finalize().is_err()); // finalize twice
    }

    #[test]
    fn per_chunk_emission_counts_respect_the_cap() {
        let mut cfg = cfg();
        cfg.max_tokens_per_chunk = 1;
        let m = Model::new(cfg.clone(), 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = feats(&mut rng, 12, &cfg);
        let (_, per_chunk, _) = decode_traced(&m, &x, 2).unwrap();
        assert_eq!(per_chunk.len(), 3);
        assert!(per_chunk.iter().all(|c| c.len() <= 1));
    }

    #[test]
    fn scores_match_batched_rescoring() {
        let cfg = cfg();
        let m = Model::new(cfg.clone(), 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..5 {
            let t = rng.gen_range(4..=14);
            let x = feats(&mut rng, t, &cfg);
            let (_, per_chunk, score) = decode_traced(&m, &x, 3).unwrap();
            let re = rescore(&m, &x, &per_chunk).unwrap();
            assert!((score - re).abs() <= 1e-5, "{} vs {}", score, re);
        }
    }

    #[test]
    fn wide_beam_finds_the_exhaustive_argmax() {
        // single chunk, all token sequences up to the cap enumerable
        let mut cfg = cfg();
        cfg.chunk_frames = 8;
        cfg.n_text = 3;
        cfg.max_tokens_per_chunk = 3;
        let m = Model::new(cfg.clone(), 34).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..3 {
            let x = feats(&mut rng, 5, &cfg);
            // exhaustive: every sequence of length <= 3 ends in EOS and is
            // scored by the batched pass
            let mut best: Option<(f64, Vec<u32>)> = None;
            let mut stack: Vec<Vec<u32>> = vec![vec![]];
            while let Some(seq) = stack.pop() {
                let sc = rescore(&m, &x, &[seq.clone()]).unwrap();
                let better = match &best {
                    None => true,
                    Some((bs, bt)) => sc > *bs || (sc == *bs && seq < *bt),
                };
                if better {
                    best = Some((sc, seq.clone()));
                }
                if seq.len() < 3 {
                    for t in 0..cfg.n_text as u32 {
                        let mut s2 = seq.clone();
                        s2.push(t);
                        stack.push(s2);
                    }
                }
            }
            let (oracle_score, oracle) = best.unwrap();
            let (tokens, _, score) = decode_traced(&m, &x, 64).unwrap();
            assert_eq!(tokens, oracle);
            assert!((score - oracle_score).abs() <= 1e-5);
        }
    }

    #[test]
    fn confirmed_prefix_never_changes() {
        let cfg = cfg();
        let m = Model::new(cfg.clone(), 35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = feats(&mut rng, 16, &cfg);
        let mut s = StreamingSession::new(&m, 3).unwrap();
        let mut confirmed = Vec::new();
        for i in 0..4 {
            let part = ops::slice_rows(&x, i * 4, 4).unwrap();
            let d = s.push_chunk(&part).unwrap();
            confirmed.extend(d.confirmed);
        }
        let fin = s.finalize().unwrap();
        assert!(fin.starts_with(&confirmed));
    }

    #[test]
    fn cache_stays_within_window_during_streaming() {
        let cfg = cfg();
        let m = Model::new(cfg.clone(), 36).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = feats(&mut rng, 24, &cfg);
        let mut s = StreamingSession::new(&m, 2).unwrap();
        for i in 0..6 {
            let part = ops::slice_rows(&x, i * 4, 4).unwrap();
            s.push_chunk(&part).unwrap();
            assert!(s.max_retained_chunks() <= cfg.context_chunks.unwrap() + 1);
        }
        s.finalize().unwrap();
    }
}
