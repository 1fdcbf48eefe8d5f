//! CTC loss, forced alignment, transcript segmentation, and alignment
//! quality metrics.
//!
//! All lattice arithmetic runs in f64 log space. The expanded state sequence
//! for targets `y_1..y_U` is `blank, y_1, blank, y_2, ..., y_U, blank`
//! (2U+1 states). Viterbi ties are broken toward the lexicographically
//! smallest state sequence, i.e. the path that stays longest in blank and
//! emits each token as late as possible.

use std::sync::Arc;

use crate::data::ChunkPlan;
use crate::numcore::{CustomGrad, Mat64, NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Best-path forced alignment: per-frame labels (blank included), the end
/// frame of each target token occurrence, and the path log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub path: Vec<u32>,
    pub end_frames: Vec<u32>,
    pub log_prob: f64,
}

/// Per-chunk token lists; every chunk is implicitly terminated by EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedTranscript {
    pub chunks: Vec<Vec<u32>>,
}

impl SegmentedTranscript {
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn flatten(&self) -> Vec<u32> {
        self.chunks.iter().flatten().copied().collect()
    }

    /// Total transcript tokens (EOS not counted).
    pub fn num_tokens(&self) -> usize {
        self.chunks.iter().map(|c| c.len()).sum()
    }
}

fn expanded_states(targets: &[u32], blank: usize) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank as u32);
    for &y in targets {
        ext.push(y);
        ext.push(blank as u32);
    }
    ext
}

/// Minimum frame count that admits any valid path.
fn min_frames(targets: &[u32]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

fn check_feasible(t_len: usize, targets: &[u32], n_classes: usize, blank: usize) -> Result<()> {
    if blank >= n_classes {
        return Err(Error::Invalid(format!(
            "blank id {} outside {} classes",
            blank, n_classes
        )));
    }
    for &y in targets {
        if y as usize >= n_classes || y as usize == blank {
            return Err(Error::Invalid(format!("target {} not a text class", y)));
        }
    }
    let need = min_frames(targets);
    if t_len < need {
        return Err(Error::Infeasible(format!(
            "{} frames cannot carry {} targets (need >= {})",
            t_len,
            targets.len(),
            need
        )));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward (alpha) lattice. `lp(t, k)` reads the log-prob matrix.
fn alphas(
    lp: &dyn Fn(usize, usize) -> f64,
    t_len: usize,
    ext: &[u32],
) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp(0, ext[0] as usize);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext[1] as usize);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] && ext[s] as usize != ext[0] as usize {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[t][s] = acc + lp(t, ext[s] as usize);
            }
        }
    }
    alpha
}

/// Backward (beta) lattice, including the frame-t emission term.
fn betas(lp: &dyn Fn(usize, usize) -> f64, t_len: usize, ext: &[u32]) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp(t_len - 1, ext[s_len - 1] as usize);
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = lp(t_len - 1, ext[s_len - 2] as usize);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] && ext[s + 2] as usize != ext[0] as usize {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            if acc != f64::NEG_INFINITY {
                beta[t][s] = acc + lp(t, ext[s] as usize);
            }
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().unwrap();
    let s_len = last.len();
    let mut z = last[s_len - 1];
    if s_len > 1 {
        z = log_add(z, last[s_len - 2]);
    }
    z
}

/// `-log P(targets | logprobs)` summed over all valid CTC paths.
/// `lp` indexes a `[t_len, n_classes]` log-probability matrix.
pub fn ctc_loss_with(
    lp: &dyn Fn(usize, usize) -> f64,
    t_len: usize,
    n_classes: usize,
    targets: &[u32],
    blank: usize,
) -> Result<f64> {
    if t_len == 0 {
        return Err(Error::Infeasible("zero-length input".into()));
    }
    check_feasible(t_len, targets, n_classes, blank)?;
    let ext = expanded_states(targets, blank);
    let alpha = alphas(lp, t_len, &ext);
    let z = total_log_prob(&alpha);
    if z == f64::NEG_INFINITY {
        return Err(Error::Infeasible("no valid path has positive mass".into()));
    }
    Ok(-z)
}

/// Convenience wrapper over a tensor of log-probabilities.
pub fn ctc_logloss(logprobs: &Tensor, targets: &[u32], blank: usize) -> Result<f64> {
    let (t_len, n_classes) = logprobs.rc();
    ctc_loss_with(
        &|t, k| logprobs.at(t, k) as f64,
        t_len,
        n_classes,
        targets,
        blank,
    )
}

/// Tape primitive for the CTC loss; gradients flow to the log-prob matrix.
pub struct CtcLossOp {
    pub targets: Vec<u32>,
    pub blank: usize,
}

impl CustomGrad for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let lp = inputs[0];
        Ok(Tensor::scalar(
            ctc_logloss(lp, &self.targets, self.blank)? as f32
        ))
    }

    fn forward_f64(&self, inputs: &[&Mat64]) -> Result<Mat64> {
        let lp = inputs[0];
        let loss = ctc_loss_with(
            &|t, k| lp.at(t, k),
            lp.rows,
            lp.cols,
            &self.targets,
            self.blank,
        )?;
        Ok(Mat64 {
            rows: 1,
            cols: 1,
            data: vec![loss],
        })
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let lp_t = inputs[0];
        let (t_len, n_classes) = lp_t.rc();
        check_feasible(t_len, &self.targets, n_classes, self.blank)?;
        let lp = |t: usize, k: usize| lp_t.at(t, k) as f64;
        let ext = expanded_states(&self.targets, self.blank);
        let alpha = alphas(&lp, t_len, &ext);
        let beta = betas(&lp, t_len, &ext);
        let z = total_log_prob(&alpha);
        if z == f64::NEG_INFINITY {
            return Err(Error::Infeasible("no valid path has positive mass".into()));
        }
        // d(-log Z)/d lp(t,k) = -P(state with label k at frame t | valid paths)
        let g = grad_out.item() as f64;
        let mut grad = Tensor::zeros(lp_t.shape());
        for t in 0..t_len {
            for (s, &label) in ext.iter().enumerate() {
                let occ = alpha[t][s] + beta[t][s] - lp(t, label as usize) - z;
                if occ != f64::NEG_INFINITY {
                    let k = label as usize;
                    let v = grad.at(t, k) as f64 - g * occ.exp();
                    grad.set(t, k, v as f32);
                }
            }
        }
        Ok(vec![grad])
    }
}

/// Records a CTC loss node on a tape over an existing log-prob node.
pub fn ctc_loss_node(
    tape: &mut Tape,
    logprobs: NodeId,
    targets: &[u32],
    blank: usize,
) -> Result<NodeId> {
    tape.custom(
        Arc::new(CtcLossOp {
            targets: targets.to_vec(),
            blank,
        }),
        &[logprobs],
    )
}

const BRUTE_FORCE_LIMIT: f64 = 1e6;

fn collapse(path: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &l in path {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Exhaustive-path CTC loss: enumerates every label path of length `T`
/// and sums those that collapse to the targets. Test oracle only.
pub fn brute_force_ctc(logprobs: &Tensor, targets: &[u32], blank: usize) -> Result<f64> {
    let (t_len, n_classes) = logprobs.rc();
    if (n_classes as f64).powi(t_len as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::Invalid(format!(
            "brute force instance too large: {}^{}",
            n_classes, t_len
        )));
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0u32; t_len];
    loop {
        if collapse(&path, blank as u32) == targets {
            let score: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &l)| logprobs.at(t, l as usize) as f64)
                .sum();
            total = log_add(total, score);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                if total == f64::NEG_INFINITY {
                    return Err(Error::Infeasible(
                        "no path collapses to the target".into(),
                    ));
                }
                return Ok(-total);
            }
            path[i] += 1;
            if (path[i] as usize) < n_classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Exhaustive best-path search with the same tie-break as `ctc_forced_align`
/// (max score, then lexicographically smallest expanded-state sequence).
/// Test oracle only.
pub fn brute_force_align(
    logprobs: &Tensor,
    targets: &[u32],
    blank: usize,
) -> Result<AlignmentResult> {
    let (t_len, n_classes) = logprobs.rc();
    if (n_classes as f64).powi(t_len as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::Invalid("brute force instance too large".into()));
    }
    check_feasible(t_len, targets, n_classes, blank)?;
    let ext = expanded_states(targets, blank);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut states = vec![0usize; t_len];

    // enumerate monotone state sequences through the expanded lattice
    fn recur(
        t: usize,
        s: usize,
        t_len: usize,
        ext: &[u32],
        lp: &Tensor,
        states: &mut Vec<usize>,
        score: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let score = score + lp.at(t, ext[s] as usize) as f64;
        states[t] = s;
        if t + 1 == t_len {
            if s + 2 >= ext.len() {
                let better = match best {
                    None => true,
                    Some((bs, bp)) => {
                        score > *bs || (score == *bs && states[..] < bp[..])
                    }
                };
                if better {
                    *best = Some((score, states.clone()));
                }
            }
            return;
        }
        let mut nexts = vec![s, s + 1];
        if s + 2 < ext.len() && ext[s + 2] != ext[s] && ext[s + 2] as usize != ext[0] as usize {
            nexts.push(s + 2);
        }
        for n in nexts {
            if n < ext.len() {
                recur(t + 1, n, t_len, ext, lp, states, score, best);
            }
        }
    }

    for s0 in [0usize, 1] {
        if s0 < ext.len() {
            recur(0, s0, t_len, &ext, logprobs, &mut states, 0.0, &mut best);
        }
    }
    let (score, state_seq) =
        best.ok_or_else(|| Error::Infeasible("no valid path".into()))?;
    Ok(alignment_from_states(&state_seq, &ext, targets, score))
}

fn alignment_from_states(
    state_seq: &[usize],
    ext: &[u32],
    targets: &[u32],
    score: f64,
) -> AlignmentResult {
    let path: Vec<u32> = state_seq.iter().map(|&s| ext[s]).collect();
    let mut end_frames = vec![0u32; targets.len()];
    for (t, &s) in state_seq.iter().enumerate() {
        if s % 2 == 1 {
            end_frames[(s - 1) / 2] = t as u32;
        }
    }
    AlignmentResult {
        path,
        end_frames,
        log_prob: score,
    }
}

/// Viterbi forced alignment through the CTC lattice. Ties prefer staying
/// longer in blank (tokens emitted as late as possible), realized as the
/// lexicographically smallest expanded-state sequence among optimal paths.
pub fn ctc_forced_align(
    logprobs: &Tensor,
    targets: &[u32],
    blank: usize,
) -> Result<AlignmentResult> {
    let (t_len, n_classes) = logprobs.rc();
    if t_len == 0 {
        return Err(Error::Infeasible("zero-length input".into()));
    }
    check_feasible(t_len, targets, n_classes, blank)?;
    let ext = expanded_states(targets, blank);
    let s_len = ext.len();
    let lp = |t: usize, k: usize| logprobs.at(t, k) as f64;

    // suffix DP: delta[t][s] = best score of frames t.. starting in state s
    let mut delta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    for s in 0..s_len {
        if s + 2 >= s_len {
            delta[t_len - 1][s] = lp(t_len - 1, ext[s] as usize);
        }
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut m = delta[t + 1][s];
            if s + 1 < s_len {
                m = m.max(delta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != ext[s] && ext[s + 2] as usize != ext[0] as usize {
                m = m.max(delta[t + 1][s + 2]);
            }
            if m != f64::NEG_INFINITY {
                delta[t][s] = m + lp(t, ext[s] as usize);
            }
        }
    }

    // greedy forward reconstruction; ties take the smallest next state
    let start = if s_len > 1 && delta[0][1] > delta[0][0] {
        1
    } else {
        0
    };
    if delta[0][start] == f64::NEG_INFINITY {
        return Err(Error::Infeasible("no valid path".into()));
    }
    let score = delta[0][start];
    let mut state_seq = Vec::with_capacity(t_len);
    let mut s = start;
    state_seq.push(s);
    for t in 0..t_len - 1 {
        let mut cands = vec![s, s + 1];
        if s + 2 < s_len && ext[s + 2] != ext[s] && ext[s + 2] as usize != ext[0] as usize {
            cands.push(s + 2);
        }
        let mut next = None;
        let mut best = f64::NEG_INFINITY;
        for &c in &cands {
            if c < s_len && delta[t + 1][c] > best {
                best = delta[t + 1][c];
                next = Some(c);
            }
        }
        s = next.ok_or_else(|| Error::Infeasible("dead end in lattice".into()))?;
        state_seq.push(s);
    }
    Ok(alignment_from_states(&state_seq, &ext, targets, score))
}

/// Buckets token `u` into chunk `floor(end_frame(u) / c)`; chunks with no
/// tokens get an empty (EOS-only) list.
pub fn segment_transcript(
    transcript: &[u32],
    end_frames: &[u32],
    plan: &ChunkPlan,
) -> Result<SegmentedTranscript> {
    if transcript.len() != end_frames.len() {
        return Err(Error::Invalid(format!(
            "{} tokens vs {} end frames",
            transcript.len(),
            end_frames.len()
        )));
    }
    let mut chunks = vec![Vec::new(); plan.num_chunks()];
    for (&tok, &e) in transcript.iter().zip(end_frames) {
        if e as usize >= plan.total_frames() {
            return Err(Error::Invalid(format!(
                "end frame {} outside {} frames",
                e,
                plan.total_frames()
            )));
        }
        chunks[plan.chunk_of_frame(e as usize)].push(tok);
    }
    Ok(SegmentedTranscript { chunks })
}

/// Signed mean end-time difference in frames; negative means the estimate
/// leads the reference.
pub fn alignment_delay(est: &[u32], reference: &[u32]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::Invalid(format!(
            "delay over {} vs {} tokens",
            est.len(),
            reference.len()
        )));
    }
    let sum: f64 = est
        .iter()
        .zip(reference)
        .map(|(&a, &b)| a as f64 - b as f64)
        .sum();
    Ok(sum / est.len() as f64)
}

/// Mean absolute end-time difference in frames.
pub fn alignment_delta(est: &[u32], reference: &[u32]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::Invalid(format!(
            "delta over {} vs {} tokens",
            est.len(),
            reference.len()
        )));
    }
    let sum: f64 = est
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / est.len() as f64)
}

/// Random valid log-probability matrix (rows are log-distributions).
pub fn random_logprobs(rng: &mut impl rand::Rng, t_len: usize, n_classes: usize) -> Tensor {
    let logits = crate::numcore::randn(rng, &[t_len, n_classes], 2.0);
    let mut tape = Tape::new();
    let x = tape.input(logits);
    let lp = tape.log_softmax(x);
    tape.value(lp).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lp2(rows: Vec<Vec<f32>>) -> Tensor {
        let c = rows[0].len();
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), c, data).unwrap()
    }

    #[test]
    fn single_frame_single_target() {
        // classes: 0 = token, 1 = blank
        let lp = lp2(vec![vec![0.6f32.ln(), 0.4f32.ln()]]);
        let loss = ctc_logloss(&lp, &[0], 1).unwrap();
        assert!((loss - (-(0.6f64.ln()))).abs() < 1e-6);
    }

    #[test]
    fn two_frames_uniform_three_valid_paths() {
        // uniform over {a, blank}: valid paths aa, a., .a -> P = 0.75
        let half = 0.5f32.ln();
        let lp = lp2(vec![vec![half, half], vec![half, half]]);
        let loss = ctc_logloss(&lp, &[0], 1).unwrap();
        assert!((loss - (-(0.75f64.ln()))).abs() < 1e-6);
        let bf = brute_force_ctc(&lp, &[0], 1).unwrap();
        assert!((loss - bf).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            use rand::Rng;
            let t_len = rng.gen_range(1..=5);
            let u_len = rng.gen_range(0..=3usize);
            let targets: Vec<u32> = (0..u_len).map(|_| rng.gen_range(0..3u32)).collect();
            let lp = random_logprobs(&mut rng, t_len, 4);
            let fwd = ctc_loss_with(
                &|t, k| lp.at(t, k) as f64,
                t_len,
                4,
                &targets,
                3,
            );
            let bf = brute_force_ctc(&lp, &targets, 3);
            match (fwd, bf) {
                (Ok(a), Ok(b)) => assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b),
                (Err(_), Err(_)) => {}
                (a, b) => panic!("disagree: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
    }

    #[test]
    fn infeasible_target_is_rejected() {
        let lp = random_logprobs(&mut ChaCha8Rng::seed_from_u64(1), 2, 4);
        // 2 frames cannot carry 3 targets
        assert!(matches!(
            ctc_logloss(&lp, &[0, 1, 2], 3),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            brute_force_ctc(&lp, &[0, 1, 2], 3),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = random_logprobs(&mut ChaCha8Rng::seed_from_u64(2), 3, 4);
        let loss = ctc_logloss(&lp, &[], 3).unwrap();
        let expect: f64 = -(0..3).map(|t| lp.at(t, 3) as f64).sum::<f64>();
        assert!((loss - expect).abs() < 1e-6);
    }

    #[test]
    fn ctc_gradient_passes_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = crate::numcore::randn(&mut rng, &[5, 4], 1.0);
        let mut tape = Tape::new();
        let x = tape.input(logits.clone());
        let lp = tape.log_softmax(x);
        let loss = ctc_loss_node(&mut tape, lp, &[0, 2, 1], 3).unwrap();
        let err = finite_diff_check(&tape, &[&logits], loss, &[x], 1e-3).unwrap();
        assert!(err <= 1e-4, "ctc fd err {}", err);
    }

    #[test]
    fn forced_align_trivial_cases() {
        let lp = lp2(vec![vec![0.9f32.ln(), 0.1f32.ln()]]);
        let a = ctc_forced_align(&lp, &[0], 1).unwrap();
        assert_eq!(a.path, vec![0]);
        assert_eq!(a.end_frames, vec![0]);

        // 3 frames strongly favoring (y, blank, blank)
        let lp = lp2(vec![
            vec![0.99f32.ln(), 0.01f32.ln()],
            vec![0.01f32.ln(), 0.99f32.ln()],
            vec![0.01f32.ln(), 0.99f32.ln()],
        ]);
        let a = ctc_forced_align(&lp, &[0], 1).unwrap();
        assert_eq!(a.path, vec![0, 1, 1]);
        assert_eq!(a.end_frames, vec![0]);
    }

    #[test]
    fn forced_align_matches_brute_force_with_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..60 {
            use rand::Rng;
            let t_len = rng.gen_range(1..=5);
            let u_len = rng.gen_range(0..=3usize).min(t_len);
            let targets: Vec<u32> = (0..u_len).map(|_| rng.gen_range(0..3u32)).collect();
            let lp = random_logprobs(&mut rng, t_len, 4);
            let dp = ctc_forced_align(&lp, &targets, 3);
            let bf = brute_force_align(&lp, &targets, 3);
            match (dp, bf) {
                (Ok(a), Ok(b)) => {
                    assert!((a.log_prob - b.log_prob).abs() < 1e-9);
                    assert_eq!(a.path, b.path);
                    assert_eq!(a.end_frames, b.end_frames);
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("disagree: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
    }

    #[test]
    fn forced_align_ties_prefer_late_emission() {
        // perfectly uniform: every path ties; the documented rule stays in
        // blank as long as possible, emitting at the last frame
        let half = 0.5f32.ln();
        let lp = lp2(vec![vec![half, half]; 3]);
        let a = ctc_forced_align(&lp, &[0], 1).unwrap();
        assert_eq!(a.path, vec![1, 1, 0]);
        assert_eq!(a.end_frames, vec![2]);
    }

    #[test]
    fn viterbi_never_exceeds_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            use rand::Rng;
            let t_len = rng.gen_range(1..=5);
            let targets: Vec<u32> = (0..rng.gen_range(0..=2usize))
                .map(|_| rng.gen_range(0..3u32))
                .collect();
            let lp = random_logprobs(&mut rng, t_len, 4);
            if let (Ok(a), Ok(loss)) = (
                ctc_forced_align(&lp, &targets, 3),
                ctc_logloss(&lp, &targets, 3),
            ) {
                assert!(a.log_prob <= -loss + 1e-9);
            }
        }
    }

    #[test]
    fn viterbi_equals_forward_when_single_path() {
        // T = U: the only valid path emits every frame
        let lp = random_logprobs(&mut ChaCha8Rng::seed_from_u64(4), 3, 4);
        let targets = vec![0, 1, 2];
        let a = ctc_forced_align(&lp, &targets, 3).unwrap();
        let loss = ctc_logloss(&lp, &targets, 3).unwrap();
        assert!((a.log_prob + loss).abs() < 1e-9);
    }

    #[test]
    fn segmentation_buckets_by_end_frame() {
        let plan = ChunkPlan::new(128, 32).unwrap();
        let seg = segment_transcript(&[1, 2, 3, 4], &[10, 40, 41, 100], &plan).unwrap();
        assert_eq!(
            seg.chunks,
            vec![vec![1], vec![2, 3], vec![], vec![4]]
        );
    }

    #[test]
    fn segmentation_boundary_rule() {
        let plan = ChunkPlan::new(64, 32).unwrap();
        let seg = segment_transcript(&[7], &[31], &plan).unwrap();
        assert_eq!(seg.chunks, vec![vec![7], vec![]]);
        let seg = segment_transcript(&[7], &[32], &plan).unwrap();
        assert_eq!(seg.chunks, vec![vec![], vec![7]]);
    }

    #[test]
    fn segmentation_single_chunk() {
        let plan = ChunkPlan::new(16, 32).unwrap();
        let seg = segment_transcript(&[1, 2, 3], &[0, 5, 15], &plan).unwrap();
        assert_eq!(seg.chunks, vec![vec![1, 2, 3]]);
    }

    #[test]
    fn delay_and_delta_examples() {
        assert_eq!(alignment_delay(&[10, 20], &[10, 20]).unwrap(), 0.0);
        assert_eq!(alignment_delay(&[10, 20], &[12, 22]).unwrap(), -2.0);
        assert_eq!(alignment_delta(&[10, 20], &[10, 20]).unwrap(), 0.0);
        assert_eq!(alignment_delta(&[10, 20], &[12, 18]).unwrap(), 2.0);
        assert!(alignment_delay(&[1], &[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn delta_dominates_delay(pairs in proptest::collection::vec((0u32..500, 0u32..500), 1..20)) {
            let est: Vec<u32> = pairs.iter().map(|p| p.0).collect();
            let rf: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            let delay = alignment_delay(&est, &rf).unwrap();
            let delta = alignment_delta(&est, &rf).unwrap();
            prop_assert!(delta >= delay.abs() - 1e-12);
        }

        #[test]
        fn segmentation_flatten_is_identity(
            ends in proptest::collection::vec(0u32..200, 1..15),
            c in 1usize..40,
        ) {
            let mut ends = ends;
            ends.sort_unstable();
            ends.dedup();
            let tokens: Vec<u32> = (0..ends.len() as u32).collect();
            let total = *ends.last().unwrap() as usize + 1;
            let plan = ChunkPlan::new(total, c).unwrap();
            let seg = segment_transcript(&tokens, &ends, &plan).unwrap();
            prop_assert_eq!(seg.flatten(), tokens);
        }
    }

    #[test]
    fn forced_align_end_frames_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            use rand::Rng;
            let t_len = rng.gen_range(3..=6);
            let targets: Vec<u32> = (0..rng.gen_range(1..=3usize))
                .map(|_| rng.gen_range(0..3u32))
                .collect();
            let lp = random_logprobs(&mut rng, t_len, 4);
            if let Ok(a) = ctc_forced_align(&lp, &targets, 3) {
                for w in a.end_frames.windows(2) {
                    assert!(w[0] < w[1]);
                }
                // collapsing the path yields exactly the transcript
                assert_eq!(collapse(&a.path, 3), targets);
            }
        }
    }
}
