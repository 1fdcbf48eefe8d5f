//! Training: next-token cross-entropy over text/EOS slots plus weighted
//! auxiliary CTC, tri-stage LR schedule, CTC pretraining stage, per-epoch
//! alignment refresh, and dev-WER best-checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctcalign::{ctc_forced_align, ctc_loss_node, segment_transcript, SegmentedTranscript};
use crate::data::{stack_frames, ChunkPlan, Utterance, FRAME_STACK_STRIDE};
use crate::evalbench::wer;
use crate::model::{decoder_graph, encoder_graph, interleave, InterleavedSequence, Model, SlotKind};
use crate::numcore::{AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::search::greedy_decode;
use crate::{Error, Result};

/// Counted next-token targets: slot i predicts slot i+1 whenever slot i+1
/// is a text token or an EOS. Audio-successor slots are uncounted.
pub fn build_targets(seq: &InterleavedSequence, eos_id: usize) -> Vec<(usize, usize)> {
    let mut picks = Vec::new();
    for i in 1..seq.len() {
        match seq.slots[i].kind {
            SlotKind::Text { id } => picks.push((i - 1, id as usize)),
            SlotKind::Eos => picks.push((i - 1, eos_id)),
            SlotKind::Audio { .. } => {}
        }
    }
    picks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean NLL over counted slots (text tokens and EOS).
    pub ce: f64,
    /// CTC loss of the full transcript under the encoder head.
    pub ctc: f64,
    pub total: f64,
}

/// Evaluates the joint loss for one utterance without touching parameters.
pub fn total_loss(
    model: &Model,
    feats_stacked: &Tensor,
    transcript: &[u32],
    seg: &SegmentedTranscript,
    ctc_weight: f32,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bnd = model.params.bind(&mut tape, false);
    let (g, _) = build_loss_graph(&mut tape, &bnd, model, feats_stacked, transcript, seg, true)?;
    let ce = tape.value(g.ce.unwrap()).item() as f64;
    let ctc = g.ctc.map(|n| tape.value(n).item() as f64).unwrap_or(0.0);
    Ok(LossBreakdown { ce, ctc, total: ce + ctc_weight as f64 * ctc })
}

struct GraphOut {
    ce: Option<NodeId>,
    ctc: Option<NodeId>,
    #[allow(dead_code)]
    counted: usize,
}

/// Shared graph builder. `with_decoder = false` gives the CTC-pretrain
/// encoder-only objective. A CTC-infeasible utterance yields `ctc: None`.
fn build_loss_graph(
    tape: &mut Tape,
    bnd: &crate::model::Bound,
    model: &Model,
    feats: &Tensor,
    transcript: &[u32],
    seg: &SegmentedTranscript,
    with_decoder: bool,
) -> Result<(GraphOut, usize)> {
    let cfg = &model.cfg;
    let t_len = feats.rc().0;
    let x = tape.constant(feats.clone());
    let (enc, ctc_logits) = encoder_graph(tape, bnd, cfg, x, t_len)?;
    let ctc_lp = tape.log_softmax(ctc_logits);
    let ctc = match ctc_loss_node(tape, ctc_lp, transcript, cfg.n_text) {
        Ok(n) => Some(n),
        Err(Error::Infeasible(_)) => None,
        Err(e) => return Err(e),
    };
    if !with_decoder {
        return Ok((GraphOut { ce: None, ctc, counted: 0 }, t_len));
    }
    let plan = ChunkPlan::new(t_len, cfg.chunk_frames)?;
    let seq = interleave(&plan, seg)?;
    let out = decoder_graph(tape, bnd, cfg, enc, &seq)?;
    let picks = build_targets(&seq, cfg.eos_id() as usize);
    let counted = picks.len();
    let ce = tape.mean_nll(out, &picks)?;
    Ok((GraphOut { ce: Some(ce), ctc, counted }, t_len))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriStageSchedule {
    pub warmup_steps: u64,
    pub hold_steps: u64,
    pub decay_steps: u64,
    pub peak_lr: f32,
    pub floor_lr: f32,
}

impl TriStageSchedule {
    pub fn lr_at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f32 / self.warmup_steps as f32;
        }
        let step = step - self.warmup_steps;
        if step < self.hold_steps {
            return self.peak_lr;
        }
        let step = step - self.hold_steps;
        if step >= self.decay_steps {
            return self.floor_lr;
        }
        // exponential decay hitting the floor at decay_steps
        let gamma = (self.peak_lr / self.floor_lr).ln() / self.decay_steps as f32;
        (self.peak_lr * (-gamma * step as f32).exp()).max(self.floor_lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignSource {
    /// Ground-truth token end frames carried by the corpus.
    Reference,
    /// Forced alignment from the current encoder's CTC head, refreshed at
    /// each epoch start.
    Ctc,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub ctc_pretrain_epochs: usize,
    pub batch_size: usize,
    pub schedule: TriStageSchedule,
    pub ctc_weight: f32,
    pub align_source: AlignSource,
    pub seed: u64,
    /// Schedule position to resume from (continues the step counter).
    pub start_step: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 14,
            ctc_pretrain_epochs: 2,
            batch_size: 4,
            schedule: TriStageSchedule {
                warmup_steps: 60,
                hold_steps: 1000,
                decay_steps: 800,
                peak_lr: 3e-3,
                floor_lr: 5e-5,
            },
            ctc_weight: 0.5,
            align_source: AlignSource::Reference,
            seed: 1234,
            start_step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f32,
    pub ce: f64,
    pub ctc: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub dev_wer_by_epoch: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_wer: f64,
    /// CTC-infeasible utterances excluded from the auxiliary loss.
    pub infeasible_skipped: usize,
    pub diverged: bool,
}

fn segments_for_epoch(
    model: &Model,
    stacked: &[Tensor],
    utts: &[Utterance],
    source: AlignSource,
) -> Result<Vec<SegmentedTranscript>> {
    let mut segs = Vec::with_capacity(utts.len());
    for (u, feats) in utts.iter().zip(stacked) {
        let plan = ChunkPlan::new(feats.rc().0, model.cfg.chunk_frames)?;
        let ends = match source {
            AlignSource::Reference => u
                .ref_end_frames
                .clone()
                .ok_or_else(|| Error::Config("corpus has no reference alignments".into()))?,
            AlignSource::Ctc => {
                let lp = model.ctc_logprobs(feats)?;
                ctc_forced_align(&lp, &u.transcript, model.cfg.n_text)?.end_frames
            }
        };
        segs.push(segment_transcript(&u.transcript, &ends, &plan)?);
    }
    Ok(segs)
}

fn dev_wer(model: &Model, dev: &[Utterance], stacked: &[Tensor]) -> Result<f64> {
    let mut agg = crate::evalbench::WerReport::default();
    for (u, feats) in dev.iter().zip(stacked) {
        let hyp = greedy_decode(model, feats)?;
        agg.add(&wer(&u.transcript, &hyp));
    }
    Ok(agg.wer())
}

/// Joint training. Stage 1 (optional): encoder-only CTC epochs. Stage 2:
/// cross-entropy + weighted CTC with alignments refreshed per epoch.
/// Returns with the dev-WER-best parameters installed in `model`.
pub fn train_loop(
    model: &mut Model,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("empty train or dev split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let train_stacked: Vec<Tensor> = train
        .iter()
        .map(|u| stack_frames(&u.features, FRAME_STACK_STRIDE))
        .collect::<Result<_>>()?;
    let dev_stacked: Vec<Tensor> = dev
        .iter()
        .map(|u| stack_frames(&u.features, FRAME_STACK_STRIDE))
        .collect::<Result<_>>()?;

    let shapes = model.params.shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(AdamConfig::default(), &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut report = TrainReport {
        steps: Vec::new(),
        dev_wer_by_epoch: Vec::new(),
        best_epoch: 0,
        best_dev_wer: f64::INFINITY,
        infeasible_skipped: 0,
        diverged: false,
    };
    let mut best_params: Vec<Tensor> = model.params.tensors().to_vec();
    let mut global_step: u64 = cfg.start_step;

    // length-bucketed batches in shuffled order
    let make_batches = |rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(rng);
        idx.sort_by_key(|&i| train_stacked[i].rc().0);
        let mut batches: Vec<Vec<usize>> =
            idx.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        batches.shuffle(rng);
        batches
    };

    let total_epochs = cfg.ctc_pretrain_epochs + cfg.epochs;
    for epoch in 0..total_epochs {
        let pretrain = epoch < cfg.ctc_pretrain_epochs;
        let segs = if pretrain {
            None
        } else {
            Some(segments_for_epoch(model, &train_stacked, train, cfg.align_source)?)
        };

        for batch in make_batches(&mut rng) {
            // per-token CE averaging needs the batch's counted-slot total
            let mut counted = vec![0usize; batch.len()];
            if !pretrain {
                let segs = segs.as_ref().unwrap();
                for (bi, &i) in batch.iter().enumerate() {
                    let plan = ChunkPlan::new(train_stacked[i].rc().0, model.cfg.chunk_frames)?;
                    let seq = interleave(&plan, &segs[i])?;
                    counted[bi] = build_targets(&seq, model.cfg.eos_id() as usize).len();
                }
            }
            let total_counted: usize = counted.iter().sum();

            let mut grad_acc: Vec<Tensor> =
                shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut ce_sum = 0.0;
            let mut ctc_sum = 0.0;
            for (bi, &i) in batch.iter().enumerate() {
                let mut tape = Tape::new();
                let bnd = model.params.bind(&mut tape, true);
                let empty_seg;
                let seg = match &segs {
                    Some(s) => &s[i],
                    None => {
                        empty_seg = SegmentedTranscript { chunks: vec![] };
                        &empty_seg
                    }
                };
                let (g, _) = build_loss_graph(
                    &mut tape,
                    &bnd,
                    model,
                    &train_stacked[i],
                    &train[i].transcript,
                    seg,
                    !pretrain,
                )?;
                let mut loss = None;
                if let Some(ce) = g.ce {
                    let w = counted[bi] as f32 / total_counted as f32;
                    loss = Some(tape.scale(ce, w));
                    ce_sum += tape.value(ce).item() as f64 * w as f64;
                }
                match g.ctc {
                    Some(ctc) => {
                        let w = if pretrain { 1.0 } else { cfg.ctc_weight } / batch.len() as f32;
                        let term = tape.scale(ctc, w);
                        loss = Some(match loss {
                            Some(l) => tape.add(l, term)?,
                            None => term,
                        });
                        ctc_sum += tape.value(ctc).item() as f64 / batch.len() as f64;
                    }
                    None => report.infeasible_skipped += 1,
                }
                let Some(loss) = loss else { continue };
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    model.params.set_tensors(best_params);
                    report.diverged = true;
                    return Ok(report);
                }
                let grads = tape.backward(loss)?;
                for (gi, id) in bnd.ids.iter().enumerate() {
                    if let Some(g) = grads.get(*id) {
                        let acc = &mut grad_acc[gi];
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let lr = cfg.schedule.lr_at(global_step);
            adam.step(model.params.tensors_mut(), &grad_acc, lr)?;
            let total = ce_sum + cfg.ctc_weight as f64 * ctc_sum;
            report.steps.push(StepLog { step: global_step, lr, ce: ce_sum, ctc: ctc_sum, total });
            global_step += 1;
        }

        if !pretrain {
            let w = dev_wer(model, dev, &dev_stacked)?;
            report.dev_wer_by_epoch.push(w);
            if w < report.best_dev_wer {
                report.best_dev_wer = w;
                report.best_epoch = epoch;
                best_params = model.params.tensors().to_vec();
            }
        }
    }
    model.params.set_tensors(best_params);
    Ok(report)
}
