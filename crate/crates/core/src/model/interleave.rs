//! Interleaved decoder input: per chunk, audio slots then text slots then
//! one EOS slot. Windowed-causal attention mask over that order.

use crate::ctcalign::SegmentedTranscript;
use crate::data::ChunkPlan;
use crate::model::MASK_NEG;
use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Encoder frame index into the encodings matrix.
    Audio { frame: usize },
    Text { id: u32 },
    Eos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub kind: SlotKind,
    pub chunk: usize,
}

impl Slot {
    pub fn is_eos(&self) -> bool {
        matches!(self.kind, SlotKind::Eos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub slots: Vec<Slot>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Builds [audio(0).., text(0).., EOS, audio(1).., ...]; every chunk gets an
/// EOS slot, empty chunks go straight from audio to EOS.
pub fn interleave(plan: &ChunkPlan, seg: &SegmentedTranscript) -> Result<InterleavedSequence> {
    if seg.num_chunks() != plan.num_chunks() {
        return Err(Error::Invalid(format!(
            "{} transcript chunks vs {} plan chunks",
            seg.num_chunks(),
            plan.num_chunks()
        )));
    }
    let mut slots = Vec::new();
    for (k, tokens) in seg.chunks.iter().enumerate() {
        for frame in plan.chunk_range(k) {
            slots.push(Slot {
                kind: SlotKind::Audio { frame },
                chunk: k,
            });
        }
        for &id in tokens {
            slots.push(Slot {
                kind: SlotKind::Text { id },
                chunk: k,
            });
        }
        slots.push(Slot {
            kind: SlotKind::Eos,
            chunk: k,
        });
    }
    Ok(InterleavedSequence { slots })
}

/// Attention rule: key must be causal (position <= query) and within the
/// query's chunk window [chunk - b, chunk]. `exclude_prev_eos` additionally
/// drops earlier chunks' EOS keys (the figure-literal reading).
pub fn mask_allowed(
    query: (usize, &Slot),
    key: (usize, &Slot),
    b: Option<usize>,
    exclude_prev_eos: bool,
) -> bool {
    let (qi, q) = query;
    let (ki, k) = key;
    if ki > qi {
        return false;
    }
    if let Some(b) = b {
        if k.chunk + b < q.chunk {
            return false;
        }
    }
    if exclude_prev_eos && k.is_eos() && k.chunk < q.chunk {
        return false;
    }
    true
}

/// Additive mask matrix: 0 where allowed, MASK_NEG where not.
pub fn mask_matrix(seq: &InterleavedSequence, b: Option<usize>, exclude_prev_eos: bool) -> Tensor {
    let n = seq.len();
    let mut m = Tensor::zeros(&[n, n]);
    for qi in 0..n {
        for ki in 0..n {
            if !mask_allowed(
                (qi, &seq.slots[qi]),
                (ki, &seq.slots[ki]),
                b,
                exclude_prev_eos,
            ) {
                m.set(qi, ki, MASK_NEG);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_sequence() -> InterleavedSequence {
        // two chunks of 4 audio frames: a b c d 1 $ e f g h 2 3 4 $
        let plan = ChunkPlan::new(8, 4).unwrap();
        let seg = SegmentedTranscript {
            chunks: vec![vec![1], vec![2, 3, 4]],
        };
        interleave(&plan, &seg).unwrap()
    }

    fn allowed_set(seq: &InterleavedSequence, qi: usize, b: Option<usize>, excl: bool) -> Vec<usize> {
        (0..seq.len())
            .filter(|&ki| mask_allowed((qi, &seq.slots[qi]), (ki, &seq.slots[ki]), b, excl))
            .collect()
    }

    #[test]
    fn layout_matches_two_chunk_example() {
        let seq = fig_sequence();
        let kinds: Vec<_> = seq.slots.iter().map(|s| s.kind).collect();
        use SlotKind::*;
        assert_eq!(
            kinds,
            vec![
                Audio { frame: 0 },
                Audio { frame: 1 },
                Audio { frame: 2 },
                Audio { frame: 3 },
                Text { id: 1 },
                Eos,
                Audio { frame: 4 },
                Audio { frame: 5 },
                Audio { frame: 6 },
                Audio { frame: 7 },
                Text { id: 2 },
                Text { id: 3 },
                Text { id: 4 },
                Eos,
            ]
        );
        assert_eq!(seq.slots[5].chunk, 0);
        assert_eq!(seq.slots[13].chunk, 1);
    }

    #[test]
    fn token_four_window_worked_example() {
        // with b=1, token "4" (index 12) sees both chunks; the previous
        // chunk's EOS is included by default and dropped under the
        // exclude switch
        let seq = fig_sequence();
        let with_eos = allowed_set(&seq, 12, Some(1), false);
        assert_eq!(with_eos, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        let without_eos = allowed_set(&seq, 12, Some(1), true);
        assert_eq!(without_eos, vec![0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn b_zero_drops_all_earlier_chunks() {
        let seq = fig_sequence();
        let set = allowed_set(&seq, 12, Some(0), false);
        assert_eq!(set, vec![6, 7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn b_infinite_is_pure_causal() {
        let seq = fig_sequence();
        for qi in 0..seq.len() {
            let set = allowed_set(&seq, qi, None, false);
            assert_eq!(set, (0..=qi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_chunk_goes_straight_to_eos() {
        let plan = ChunkPlan::new(6, 3).unwrap();
        let seg = SegmentedTranscript {
            chunks: vec![vec![], vec![9]],
        };
        let seq = interleave(&plan, &seg).unwrap();
        assert!(seq.slots[3].is_eos());
        assert_eq!(seq.slots[3].chunk, 0);
    }

    #[test]
    fn single_chunk_is_prompt_then_transcript() {
        let plan = ChunkPlan::new(4, 32).unwrap();
        let seg = SegmentedTranscript {
            chunks: vec![vec![5, 6]],
        };
        let seq = interleave(&plan, &seg).unwrap();
        assert_eq!(seq.len(), 4 + 2 + 1);
        assert!(seq.slots.iter().all(|s| s.chunk == 0));
    }

    #[test]
    fn mask_matrix_mirrors_predicate() {
        let seq = fig_sequence();
        let m = mask_matrix(&seq, Some(1), false);
        for qi in 0..seq.len() {
            for ki in 0..seq.len() {
                let ok = mask_allowed((qi, &seq.slots[qi]), (ki, &seq.slots[ki]), Some(1), false);
                assert_eq!(m.at(qi, ki) == 0.0, ok);
            }
        }
    }

    #[test]
    fn chunk_count_mismatch_rejected() {
        let plan = ChunkPlan::new(8, 4).unwrap();
        let seg = SegmentedTranscript {
            chunks: vec![vec![1]],
        };
        assert!(interleave(&plan, &seg).is_err());
    }
}
