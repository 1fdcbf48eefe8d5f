//! Vocabulary, feature preprocessing, chunk planning, synthetic corpus
//! generation, and dataset file I/O.
//!
//! Token end times are expressed in post-stacking encoder-frame indices
//! everywhere in this crate; seconds exist only at the CLI boundary
//! (40 ms per encoder frame).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::numcore::Tensor;
use crate::{Error, Result};

pub const FRAME_STACK_STRIDE: usize = 4;
/// Seconds per post-stacking encoder frame (10 ms raw shift x stride 4).
pub const SECONDS_PER_FRAME: f64 = 0.040;

/// Ordered text tokens plus the two reserved symbols: the CTC blank (never a
/// text token) and the per-chunk EOS (never in the CTC target alphabet).
/// Text ids are dense from 0; blank and EOS both map to id `n_text` in their
/// respective output spaces (CTC head and decoder head).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    labels: Vec<String>,
}

impl Vocab {
    pub fn synthetic(n_text: usize) -> Self {
        Vocab {
            labels: (0..n_text).map(|i| format!("t{}", i)).collect(),
        }
    }

    pub fn n_text(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    /// CTC blank id within the CTC output space of `n_text + 1` classes.
    pub fn blank_id(&self) -> usize {
        self.labels.len()
    }

    /// EOS id within the decoder output space of `n_text + 1` classes.
    pub fn eos_id(&self) -> usize {
        self.labels.len()
    }

    pub fn ctc_classes(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn decoder_classes(&self) -> usize {
        self.labels.len() + 1
    }

    /// Total symbol count: text tokens + blank + EOS.
    pub fn total_symbols(&self) -> usize {
        self.labels.len() + 2
    }
}

/// One training/eval example. `features` is the raw (pre-stacking) frame
/// matrix; `ref_end_frames` are ground-truth token end times in post-stacking
/// encoder-frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub transcript: Vec<u32>,
    pub ref_end_frames: Option<Vec<u32>>,
}

/// Contiguous, non-overlapping partition of `total` encoder frames into
/// chunks of `chunk_size` frames (last chunk may be short).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    chunk_size: usize,
    total: usize,
}

impl ChunkPlan {
    pub fn new(total_frames: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        if total_frames == 0 {
            return Err(Error::Config("chunk plan over zero frames".into()));
        }
        Ok(ChunkPlan {
            chunk_size,
            total: total_frames,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn total_frames(&self) -> usize {
        self.total
    }

    pub fn num_chunks(&self) -> usize {
        self.total.div_ceil(self.chunk_size)
    }

    /// Boundary list `[0, c, 2c, ..., total]`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b: Vec<usize> = (0..self.num_chunks())
            .map(|k| k * self.chunk_size)
            .collect();
        b.push(self.total);
        b
    }

    /// Frame range of chunk `k`.
    pub fn chunk_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * self.chunk_size;
        let end = ((k + 1) * self.chunk_size).min(self.total);
        start..end
    }

    pub fn chunk_of_frame(&self, frame: usize) -> usize {
        debug_assert!(frame < self.total);
        frame / self.chunk_size
    }
}

/// Stacks `stride` consecutive frames into one row; the trailing remainder is
/// zero-padded. `[T, d] -> [ceil(T/stride), stride*d]`.
pub fn stack_frames(features: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, d) = features.rc();
    if t == 0 || features.numel() == 0 {
        return Err(Error::Config("stack_frames on empty input".into()));
    }
    let out_rows = t.div_ceil(stride);
    let mut data = vec![0.0f32; out_rows * stride * d];
    for i in 0..t {
        let (row, slot) = (i / stride, i % stride);
        let dst = row * stride * d + slot * d;
        data[dst..dst + d].copy_from_slice(features.row(i));
    }
    Tensor::matrix(out_rows, stride * d, data)
}

/// Generator parameters for the alignment-known synthetic task. Each text
/// token has a fixed feature template; an utterance is a sampled token
/// sequence expanded to `duration * stride` raw frames per token with
/// Gaussian noise, so reference end times are exact by construction.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_text: usize,
    pub feat_dim: usize,
    /// token duration range in encoder (post-stacking) frames
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_std: f32,
    /// utterance length range in tokens
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_text: 10,
            feat_dim: 8,
            dur_min: 2,
            dur_max: 4,
            noise_std: 0.05,
            len_min: 3,
            len_max: 8,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    /// Noise-free, fixed-duration corpus used by the desk training recipe.
    /// Deterministic timing keeps chunk bucketing learnable at this scale;
    /// the default (noisy, variable-duration) spec needs far more data and
    /// steps to generalize past boundary ambiguity.
    pub fn desk() -> Self {
        // Noise-free, fixed duration so timing is learnable in minutes; long
        // enough (up to 14 tokens = 42 frames > (b+1)·c) that cache eviction
        // and encoder-context truncation occur during training, which is what
        // makes the steady state of concatenated streams in-distribution.
        SyntheticSpec {
            noise_std: 0.0,
            dur_min: 3,
            dur_max: 3,
            len_max: 14,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_text == 0 || self.feat_dim == 0 {
            return Err(Error::Config("synthetic vocab/feat_dim must be > 0".into()));
        }
        if self.dur_min < 1 || self.dur_max < self.dur_min {
            return Err(Error::Config("invalid duration range".into()));
        }
        if self.len_min < 1 || self.len_max < self.len_min {
            return Err(Error::Config("invalid token-count range".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise stddev must be >= 0".into()));
        }
        Ok(())
    }

    /// The per-token template matrix is a pure function of the seed.
    pub fn templates(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e3a_11d5);
        crate::numcore::randn(&mut rng, &[self.n_text, self.feat_dim], 1.0)
    }
}

/// Deterministically generates `n` utterances from the spec.
pub fn synth_generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let templates = spec.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let n_tokens = rng.gen_range(spec.len_min..=spec.len_max);
        let mut transcript = Vec::with_capacity(n_tokens);
        let mut ends = Vec::with_capacity(n_tokens);
        let mut rows: Vec<f32> = Vec::new();
        let mut frame = 0usize;
        for _ in 0..n_tokens {
            let tok = rng.gen_range(0..spec.n_text) as u32;
            let dur = rng.gen_range(spec.dur_min..=spec.dur_max);
            transcript.push(tok);
            frame += dur;
            ends.push(frame as u32 - 1);
            for _ in 0..dur * FRAME_STACK_STRIDE {
                for j in 0..spec.feat_dim {
                    let noise = if spec.noise_std > 0.0 {
                        gauss(&mut rng) * spec.noise_std
                    } else {
                        0.0
                    };
                    rows.push(templates.at(tok as usize, j) + noise);
                }
            }
        }
        let t_raw = frame * FRAME_STACK_STRIDE;
        out.push(Utterance {
            features: Tensor::matrix(t_raw, spec.feat_dim, rows)?,
            transcript,
            ref_end_frames: Some(ends),
        });
    }
    Ok(out)
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

const DATASET_MAGIC: &[u8; 4] = b"BRKD";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.u32(utterances.len() as u32)?;
    for u in utterances {
        let (t, d) = u.features.rc();
        w.u32(t as u32)?;
        w.u32(d as u32)?;
        w.f32_slice(u.features.data())?;
        w.u32(u.transcript.len() as u32)?;
        w.u32_slice(&u.transcript)?;
        match &u.ref_end_frames {
            Some(ends) => {
                w.u8(1)?;
                w.u32_slice(ends)?;
            }
            None => w.u8(0)?,
        }
    }
    w.flush()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.data_err(format!("unsupported dataset version {}", version)));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        if t == 0 || d == 0 || t.saturating_mul(d) > (1 << 30) {
            return Err(r.data_err(format!("implausible feature dims {}x{}", t, d)));
        }
        let features = Tensor::matrix(t, d, r.f32_vec(t * d)?)?;
        let n_tokens = r.u32()? as usize;
        let transcript = r.u32_vec(n_tokens)?;
        let ref_end_frames = match r.u8()? {
            0 => None,
            1 => Some(r.u32_vec(n_tokens)?),
            other => return Err(r.data_err(format!("bad ref-alignment flag {}", other))),
        };
        out.push(Utterance {
            features,
            transcript,
            ref_end_frames,
        });
    }
    Ok(out)
}
