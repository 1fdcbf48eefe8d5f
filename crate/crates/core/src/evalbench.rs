//! WER with error-type breakdown, concatenation-based length
//! extrapolation, ablation grids, and exact attention-cost accounting.

use crate::data::{stack_frames, ChunkPlan, Utterance};
use crate::model::{interleave, mask_allowed, Model, ModelConfig};
use crate::numcore::Tensor;
use crate::search::decode_stacked;
use crate::ctcalign::SegmentedTranscript;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerReport {
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    pub ref_len: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.subs + self.dels + self.ins
    }

    /// (S+D+I)/N; may exceed 1.0.
    pub fn wer(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors() == 0 { 0.0 } else { f64::INFINITY }
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    pub fn add(&mut self, other: &WerReport) {
        self.subs += other.subs;
        self.dels += other.dels;
        self.ins += other.ins;
        self.ref_len += other.ref_len;
    }
}

/// Minimal-edit alignment with a deterministic tie-break: among minimal
/// alignments, prefer the one with the most substitutions (a substitution
/// beats a deletion + insertion pair). With cost and substitution count
/// fixed, D - I = |ref| - |hyp| pins down the full breakdown.
pub fn wer(reference: &[u32], hyp: &[u32]) -> WerReport {
    let n = reference.len();
    let m = hyp.len();
    // dp holds (cost, -subs) minimized lexicographically; track counts
    #[derive(Clone, Copy)]
    struct Cell {
        cost: usize,
        subs: usize,
        dels: usize,
        ins: usize,
    }
    let better = |a: &Cell, b: &Cell| a.cost < b.cost || (a.cost == b.cost && a.subs > b.subs);
    let mut dp = vec![vec![Cell { cost: 0, subs: 0, dels: 0, ins: 0 }; m + 1]; n + 1];
    for i in 1..=n {
        dp[i][0] = Cell { cost: i, subs: 0, dels: i, ins: 0 };
    }
    for j in 1..=m {
        dp[0][j] = Cell { cost: j, subs: 0, dels: 0, ins: j };
    }
    for i in 1..=n {
        for j in 1..=m {
            let mut best = if reference[i - 1] == hyp[j - 1] {
                dp[i - 1][j - 1]
            } else {
                let mut c = dp[i - 1][j - 1];
                c.cost += 1;
                c.subs += 1;
                c
            };
            let mut del = dp[i - 1][j];
            del.cost += 1;
            del.dels += 1;
            if better(&del, &best) {
                best = del;
            }
            let mut ins = dp[i][j - 1];
            ins.cost += 1;
            ins.ins += 1;
            if better(&ins, &best) {
                best = ins;
            }
            dp[i][j] = best;
        }
    }
    let c = dp[n][m];
    WerReport { subs: c.subs, dels: c.dels, ins: c.ins, ref_len: n }
}

/// Exact attended (query,key) pair counts for one interleaved sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub pairs: u64,
    pub seq_len: usize,
    pub emitted: usize,
    pub per_token: f64,
}

/// Closed-form pair count over per-chunk slot counts `n_k` (audio + text
/// + EOS): each chunk contributes n_k * W_k + n_k(n_k+1)/2, where W_k is
/// the slot count of the previous min(b, k) chunks.
pub fn attention_pairs(slot_counts: &[usize], b: Option<usize>) -> u64 {
    let mut total = 0u64;
    for (k, &nk) in slot_counts.iter().enumerate() {
        let lo = match b {
            Some(b) => k.saturating_sub(b),
            None => 0,
        };
        let w: usize = slot_counts[lo..k].iter().sum();
        let nk = nk as u64;
        total += nk * w as u64 + nk * (nk + 1) / 2;
    }
    total
}

/// Brute-force pair count by enumerating the mask. Test oracle.
pub fn attention_pairs_enumerated(
    t_frames: usize,
    seg: &SegmentedTranscript,
    c: usize,
    b: Option<usize>,
) -> Result<u64> {
    let plan = ChunkPlan::new(t_frames, c)?;
    let seq = interleave(&plan, seg)?;
    let mut n = 0u64;
    for qi in 0..seq.len() {
        for ki in 0..seq.len() {
            if mask_allowed((qi, &seq.slots[qi]), (ki, &seq.slots[ki]), b, false) {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Spreads U tokens over the chunks of a T'-frame utterance as evenly as
/// possible (earlier chunks take the remainder) and counts attended pairs.
pub fn attention_cost(t_frames: usize, u_tokens: usize, c: usize, b: Option<usize>) -> Result<CostReport> {
    let plan = ChunkPlan::new(t_frames, c)?;
    let k = plan.num_chunks();
    let mut slot_counts = Vec::with_capacity(k);
    for i in 0..k {
        let tokens = u_tokens / k + usize::from(i < u_tokens % k);
        slot_counts.push(plan.chunk_range(i).len() + tokens + 1);
    }
    let pairs = attention_pairs(&slot_counts, b);
    let emitted = u_tokens + k; // text tokens plus one EOS per chunk
    Ok(CostReport {
        pairs,
        seq_len: slot_counts.iter().sum(),
        emitted,
        per_token: pairs as f64 / emitted as f64,
    })
}

/// The same token spread as `attention_cost`, as a SegmentedTranscript
/// (token ids are irrelevant to cost; zeros used).
pub fn spread_tokens(t_frames: usize, u_tokens: usize, c: usize) -> Result<SegmentedTranscript> {
    let plan = ChunkPlan::new(t_frames, c)?;
    let k = plan.num_chunks();
    let chunks = (0..k)
        .map(|i| vec![0u32; u_tokens / k + usize::from(i < u_tokens % k)])
        .collect();
    Ok(SegmentedTranscript { chunks })
}

/// Repeats an utterance's (post-stacking) features and transcript n times,
/// optionally separated by `gap_frames` zero frames.
pub fn concat_utterance(feats: &Tensor, transcript: &[u32], n: usize, gap_frames: usize) -> (Tensor, Vec<u32>) {
    let (t, d) = feats.rc();
    let mut data = Vec::with_capacity(n * t * d);
    for i in 0..n {
        if i > 0 && gap_frames > 0 {
            data.extend(std::iter::repeat(0.0).take(gap_frames * d));
        }
        data.extend_from_slice(feats.data());
    }
    let rows = data.len() / d;
    let mut tr = Vec::with_capacity(n * transcript.len());
    for _ in 0..n {
        tr.extend_from_slice(transcript);
    }
    (Tensor::new(vec![rows, d], data).unwrap(), tr)
}

/// Corpus WER plus a separate report for the top-decile-length utterances
/// (the long-utterance deletion analysis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub overall: WerReport,
    pub top_decile: WerReport,
}

pub fn eval_corpus(model: &Model, utts: &[Utterance], beam: usize) -> Result<EvalReport> {
    let mut per_utt = Vec::with_capacity(utts.len());
    for u in utts {
        let feats = stack_frames(&u.features, crate::data::FRAME_STACK_STRIDE)?;
        let hyp = decode_stacked(model, &feats, beam)?;
        per_utt.push((u.transcript.len(), wer(&u.transcript, &hyp)));
    }
    let mut overall = WerReport::default();
    for (_, r) in &per_utt {
        overall.add(r);
    }
    let mut by_len: Vec<usize> = (0..per_utt.len()).collect();
    by_len.sort_by_key(|&i| std::cmp::Reverse(per_utt[i].0));
    let top_n = per_utt.len().div_ceil(10).max(1).min(per_utt.len());
    let mut top_decile = WerReport::default();
    for &i in by_len.iter().take(top_n) {
        top_decile.add(&per_utt[i].1);
    }
    Ok(EvalReport { overall, top_decile })
}

/// WER per concatenation multiplier: each utterance's features and
/// transcript repeated n times, decoded with the streaming session.
pub fn concat_eval(
    model: &Model,
    utts: &[Utterance],
    multipliers: &[usize],
    beam: usize,
    gap_frames: usize,
) -> Result<Vec<(usize, WerReport)>> {
    let mut out = Vec::with_capacity(multipliers.len());
    for &n in multipliers {
        let mut agg = WerReport::default();
        for u in utts {
            let feats = stack_frames(&u.features, crate::data::FRAME_STACK_STRIDE)?;
            let (cat, tr) = concat_utterance(&feats, &u.transcript, n, gap_frames);
            let hyp = decode_stacked(model, &cat, beam)?;
            agg.add(&wer(&tr, &hyp));
        }
        out.push((n, agg));
    }
    Ok(out)
}

/// One ablation cell result.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub chunk_frames: usize,
    pub context_chunks: Option<usize>,
    pub report: EvalReport,
}

/// Trains (via the supplied closure) and evaluates one model per
/// (chunk size, context) combination.
pub fn ablation_grid<F>(
    template: &ModelConfig,
    chunk_sizes: &[usize],
    contexts: &[Option<usize>],
    dev: &[Utterance],
    beam: usize,
    mut train_cell: F,
) -> Result<Vec<GridCell>>
where
    F: FnMut(&ModelConfig) -> Result<Model>,
{
    let mut cells = Vec::with_capacity(chunk_sizes.len() * contexts.len());
    for &c in chunk_sizes {
        for &b in contexts {
            let mut cfg = template.clone();
            cfg.chunk_frames = c;
            cfg.context_chunks = b;
            cfg.max_tokens_per_chunk = cfg.max_tokens_per_chunk.max(c);
            let model = train_cell(&cfg)?;
            let report = eval_corpus(&model, dev, beam)?;
            cells.push(GridCell { chunk_frames: c, context_chunks: b, report });
        }
    }
    Ok(cells)
}

/// Plain-text table of grid cells.
pub fn format_grid(cells: &[GridCell]) -> String {
    let mut s = String::from("chunk  context  wer      sub  del  ins\n");
    for cell in cells {
        let b = cell
            .context_chunks
            .map_or("inf".to_string(), |b| b.to_string());
        let r = &cell.report.overall;
        s.push_str(&format!(
            "{:<6} {:<8} {:<8.4} {:<4} {:<4} {:<4}\n",
            cell.chunk_frames,
            b,
            r.wer(),
            r.subs,
            r.dels,
            r.ins
        ));
    }
    s
}
