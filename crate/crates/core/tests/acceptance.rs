//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a single pass/fail line; failures also fail the test.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brook::ctcalign::{
    alignment_delay, alignment_delta, brute_force_align, brute_force_ctc, ctc_forced_align,
    ctc_logloss, ctc_loss_node, random_logprobs, SegmentedTranscript,
};
use brook::data::{
    stack_frames, synth_generate, ChunkPlan, SyntheticSpec, Utterance, FRAME_STACK_STRIDE,
};
use brook::evalbench::{
    attention_cost, attention_pairs, attention_pairs_enumerated, concat_eval, wer,
};
use brook::model::{
    interleave, mask_allowed, DecoderCache, EncoderState, Model, ModelConfig, SlotKind, StepInput,
};
use brook::numcore::{finite_diff_check, randn, Tape, Tensor};
use brook::search::{decode_traced, greedy_decode, rescore, StreamingSession};
use brook::train::{build_targets, train_loop, AlignSource, TrainConfig, TriStageSchedule};

fn check(criterion: usize, desc: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {criterion}: PASS  ({desc})"),
        Err(e) => {
            println!("criterion {criterion}: FAIL  ({desc}): {e}");
            panic!("criterion {criterion} failed: {e}");
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Random CTC instances in the oracle-tractable family T'<=5, U<=3, |V|=3.
fn ctc_family(rng: &mut ChaCha8Rng) -> (Tensor, Vec<u32>) {
    loop {
        let t = rng.gen_range(1..=5usize);
        let u = rng.gen_range(1..=3usize);
        let targets: Vec<u32> = (0..u).map(|_| rng.gen_range(0..3u32)).collect();
        let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
        if u + repeats <= t {
            return (random_logprobs(rng, t, 4), targets);
        }
    }
}

#[test]
fn criterion_01_ctc_oracle_equivalence() {
    check(1, "ctc_logloss vs path enumeration, 200 instances", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for i in 0..200 {
            let (lp, targets) = ctc_family(&mut rng);
            let fast = ctc_logloss(&lp, &targets, 3).map_err(|e| e.to_string())?;
            let slow = brute_force_ctc(&lp, &targets, 3).map_err(|e| e.to_string())?;
            ensure(
                (fast - slow).abs() <= 1e-6,
                format!("instance {i}: {fast} vs {slow}"),
            )?;
        }
        ensure(start.elapsed().as_secs() <= 30, "exceeded 30 s budget")
    });
}

#[test]
fn criterion_02_ctc_gradient() {
    check(2, "finite-difference gradient of ctc_logloss", || {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for _ in 0..5 {
            let t = rng.gen_range(4..=8usize);
            let logits = randn(&mut rng, &[t, 4], 1.0);
            let targets: Vec<u32> = (0..3).map(|_| rng.gen_range(0..3u32)).collect();
            let mut tape = Tape::new();
            let x = tape.input(logits.clone());
            let lp = tape.log_softmax(x);
            let loss = ctc_loss_node(&mut tape, lp, &targets, 3).map_err(|e| e.to_string())?;
            let err = finite_diff_check(&tape, &[&logits], loss, &[x], 1e-3)
                .map_err(|e| e.to_string())?;
            ensure(err <= 1e-4, format!("max relative error {err}"))?;
        }
        Ok(())
    });
}

#[test]
fn criterion_03_forced_alignment_oracle() {
    check(3, "Viterbi alignment vs exhaustive search", || {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for i in 0..200 {
            let (lp, targets) = ctc_family(&mut rng);
            let fast = ctc_forced_align(&lp, &targets, 3).map_err(|e| e.to_string())?;
            let slow = brute_force_align(&lp, &targets, 3).map_err(|e| e.to_string())?;
            ensure(
                (fast.log_prob - slow.log_prob).abs() <= 1e-9,
                format!("instance {i}: score {} vs {}", fast.log_prob, slow.log_prob),
            )?;
            ensure(
                fast.path == slow.path && fast.end_frames == slow.end_frames,
                format!("instance {i}: tie-break mismatch"),
            )?;
        }
        Ok(())
    });
}

#[test]
fn criterion_04_mask_window_correctness() {
    check(4, "attended set of the worked example; masked-slot independence", || {
        // two chunks of 4 frames: a b c d 1 $ e f g h 2 3 4 $
        let plan = ChunkPlan::new(8, 4).map_err(|e| e.to_string())?;
        let seg = SegmentedTranscript { chunks: vec![vec![1], vec![2, 3, 4]] };
        let seq = interleave(&plan, &seg).map_err(|e| e.to_string())?;
        ensure(seq.len() == 14, format!("expected 14 slots, got {}", seq.len()))?;

        // token "4" (slot 12) with b=1 attends to everything up to and
        // including itself; with the EOS of chunk 0 excluded, slot 5 drops.
        let cases: [(bool, Vec<usize>); 2] = [
            (false, (0..=12).collect()),
            (true, (0..=12).filter(|&i| i != 5).collect()),
        ];
        for (excl, expect) in cases {
            let got: Vec<usize> = (0..seq.len())
                .filter(|&k| {
                    mask_allowed((12, &seq.slots[12]), (k, &seq.slots[k]), Some(1), excl)
                })
                .collect();
            ensure(got == expect, format!("excl={excl}: attended {got:?}"))?;
        }
        // audio slot "c" of chunk 0 (slot 2) sees only slots 0..=2
        let got: Vec<usize> = (0..seq.len())
            .filter(|&k| mask_allowed((2, &seq.slots[2]), (k, &seq.slots[k]), Some(1), false))
            .collect();
        ensure(got == vec![0, 1, 2], format!("causal set {got:?}"))?;

        // bitwise independence: with b=0, changing chunk-0 text must leave
        // chunk-2 rows bit-identical (all chunk-0 keys are masked out)
        let mut cfg = small_cfg();
        cfg.context_chunks = Some(0);
        let m = Model::new(cfg.clone(), 104).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let enc = randn(&mut rng, &[12, cfg.width], 1.0);
        let plan = ChunkPlan::new(12, 4).map_err(|e| e.to_string())?;
        let seg_a = SegmentedTranscript { chunks: vec![vec![1], vec![2], vec![3]] };
        let seg_b = SegmentedTranscript { chunks: vec![vec![4], vec![2], vec![3]] };
        let seq_a = interleave(&plan, &seg_a).map_err(|e| e.to_string())?;
        let seq_b = interleave(&plan, &seg_b).map_err(|e| e.to_string())?;
        let out_a = m.decoder_forward_full(&enc, &seq_a).map_err(|e| e.to_string())?;
        let out_b = m.decoder_forward_full(&enc, &seq_b).map_err(|e| e.to_string())?;
        let last_chunk: Vec<usize> = (0..seq_a.len()).filter(|&i| seq_a.slots[i].chunk == 2).collect();
        for i in last_chunk {
            for j in 0..cfg.decoder_classes() {
                ensure(
                    out_a.at(i, j).to_bits() == out_b.at(i, j).to_bits(),
                    format!("slot {i} class {j} depends on a masked slot"),
                )?;
            }
        }
        Ok(())
    });
}

fn small_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::desk(8, 10);
    cfg.width = 16;
    cfg.heads = 2;
    cfg.ff_mult = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 2;
    cfg.chunk_frames = 4;
    cfg.lookahead_frames = 2;
    cfg
}

fn random_case(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> (Tensor, brook::model::InterleavedSequence) {
    let chunks = rng.gen_range(2..=4usize);
    let t = cfg.chunk_frames * (chunks - 1) + rng.gen_range(1..=cfg.chunk_frames);
    let enc = randn(rng, &[t, cfg.width], 1.0);
    let plan = ChunkPlan::new(t, cfg.chunk_frames).unwrap();
    let seg = SegmentedTranscript {
        chunks: (0..plan.num_chunks())
            .map(|_| {
                (0..rng.gen_range(0..=3usize))
                    .map(|_| rng.gen_range(0..cfg.n_text as u32))
                    .collect()
            })
            .collect(),
    };
    (enc, interleave(&plan, &seg).unwrap())
}

fn feed_incremental(m: &Model, enc: &Tensor, seq: &brook::model::InterleavedSequence, evict: bool) -> Vec<Tensor> {
    let mut cache = DecoderCache::new(&m.cfg);
    let mut rows = Vec::new();
    for s in &seq.slots {
        if evict {
            cache.evict(s.chunk, &m.cfg);
        }
        let row;
        let input = match s.kind {
            SlotKind::Audio { frame } => {
                row = enc.slice_rows(frame, 1).unwrap();
                StepInput::Audio(&row)
            }
            SlotKind::Text { id } => StepInput::Text(id),
            SlotKind::Eos => StepInput::Eos,
        };
        rows.push(cache.step(m, s.chunk, input).unwrap());
    }
    rows
}

#[test]
fn criterion_05_incremental_equivalence() {
    check(5, "cached steps vs batched forward on 50 sequences", || {
        let cfg = small_cfg();
        let m = Model::new(cfg.clone(), 105).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        for i in 0..50 {
            let (enc, seq) = random_case(&mut rng, &cfg);
            let full = m.decoder_forward_full(&enc, &seq).map_err(|e| e.to_string())?;
            let inc = feed_incremental(&m, &enc, &seq, false);
            for (s, row) in inc.iter().enumerate() {
                for j in 0..cfg.decoder_classes() {
                    ensure(
                        (row.at(0, j) - full.at(s, j)).abs() <= 1e-5,
                        format!("case {i} slot {s} class {j}"),
                    )?;
                }
            }
            // eviction vs full-cache windowed path
            let evicted = feed_incremental(&m, &enc, &seq, true);
            for (s, (a, b)) in inc.iter().zip(&evicted).enumerate() {
                ensure(
                    a.max_abs_diff(b) <= 1e-6,
                    format!("case {i} slot {s}: eviction changed the output"),
                )?;
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_06_degenerate_single_chunk() {
    check(6, "K=1 matches a direct single-sequence decoder", || {
        let mut cfg = small_cfg();
        cfg.chunk_frames = 64; // any utterance below fits in one chunk
        cfg.max_tokens_per_chunk = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        for trial in 0..10 {
            let m = Model::new(cfg.clone(), 1000 + trial).map_err(|e| e.to_string())?;
            let t_raw = rng.gen_range(3..=10usize) * FRAME_STACK_STRIDE;
            let feats = randn(&mut rng, &[t_raw, cfg.feat_dim], 1.0);
            let stacked = stack_frames(&feats, FRAME_STACK_STRIDE).map_err(|e| e.to_string())?;
            let t = stacked.rc().0;

            // direct decoder: all audio up front, then autoregressive
            // next-token argmax (ties to the smaller id) until EOS or cap
            let (enc, _) = m.encoder_forward(&stacked).map_err(|e| e.to_string())?;
            let plan = ChunkPlan::new(t, cfg.chunk_frames).map_err(|e| e.to_string())?;
            ensure(plan.num_chunks() == 1, "expected a single chunk")?;
            let mut text: Vec<u32> = Vec::new();
            loop {
                let seg = SegmentedTranscript { chunks: vec![text.clone()] };
                let seq = interleave(&plan, &seg).map_err(|e| e.to_string())?;
                // drop the trailing EOS slot: its row predicts beyond it
                let query = seq.len() - 2;
                let out = m.decoder_forward_full(&enc, &seq).map_err(|e| e.to_string())?;
                let mut best = 0usize;
                for j in 1..cfg.decoder_classes() {
                    if out.at(query, j) > out.at(query, best) {
                        best = j;
                    }
                }
                if best == cfg.eos_id() as usize || text.len() == cfg.max_tokens_per_chunk {
                    break;
                }
                text.push(best as u32);
            }

            let session_out = decode_traced(&m, &stacked, 1).map_err(|e| e.to_string())?.0;
            ensure(
                session_out == text,
                format!("trial {trial}: session {session_out:?} vs direct {text:?}"),
            )?;

            // §2 factorization: counted targets = U + 1
            let seg = SegmentedTranscript { chunks: vec![vec![1, 2, 3]] };
            let seq = interleave(&plan, &seg).map_err(|e| e.to_string())?;
            let picks = build_targets(&seq, cfg.eos_id() as usize);
            ensure(picks.len() == 4, format!("counted {} targets", picks.len()))?;
        }
        Ok(())
    });
}

struct DeskRun {
    model: Model,
    dev: Vec<Utterance>,
    wer: f64,
    secs: f64,
}

fn desk_corpus() -> &'static (Vec<Utterance>, Vec<Utterance>) {
    static C: OnceLock<(Vec<Utterance>, Vec<Utterance>)> = OnceLock::new();
    C.get_or_init(|| {
        let all = synth_generate(&SyntheticSpec::desk(), 512).unwrap();
        let (train, dev) = all.split_at(480);
        (train.to_vec(), dev.to_vec())
    })
}

fn desk_train(align: AlignSource) -> DeskRun {
    let (train, dev) = desk_corpus();
    let spec = SyntheticSpec::desk();
    let cfg = ModelConfig::desk(spec.feat_dim, spec.n_text);
    let mut model = Model::new(cfg, 7).unwrap();
    let tc = TrainConfig { align_source: align, ..TrainConfig::desk() };
    let start = Instant::now();
    let report = train_loop(&mut model, train, dev, &tc).unwrap();
    DeskRun { model, dev: dev.clone(), wer: report.best_dev_wer, secs: start.elapsed().as_secs_f64() }
}

// the CTC-forced-alignment arm is the production path; it is shared with
// the length-extrapolation criterion
fn desk_ctc() -> &'static DeskRun {
    static R: OnceLock<DeskRun> = OnceLock::new();
    R.get_or_init(|| desk_train(AlignSource::Ctc))
}

#[test]
fn criterion_07_end_to_end_training() {
    check(7, "desk training reaches dev WER <= 5% with both align sources", || {
        let r = desk_train(AlignSource::Reference);
        let c = desk_ctc();
        println!(
            "  reference-aligned: dev WER {:.4} in {:.0}s; ctc-aligned: dev WER {:.4} in {:.0}s; gap {:+.4}",
            r.wer, r.secs, c.wer, c.secs, c.wer - r.wer
        );
        ensure(r.wer <= 0.05, format!("reference-aligned WER {:.4}", r.wer))?;
        ensure(c.wer <= 0.05, format!("ctc-aligned WER {:.4}", c.wer))?;
        ensure(r.secs <= 600.0 && c.secs <= 600.0, "exceeded the 10 min budget")
    });
}

#[test]
fn criterion_08_length_extrapolation() {
    check(8, "10x concatenation holds up; K=1 full attention collapses at 2x", || {
        let r = desk_ctc();
        let rows = concat_eval(&r.model, &r.dev, &[1, 10], 1, 0).map_err(|e| e.to_string())?;
        let (w1, w10) = (rows[0].1.wer(), rows[1].1.wer());
        println!("  windowed desk model: WER 1x {:.4}, 10x {:.4}", w1, w10);
        ensure(
            w10 <= w1 + 0.02,
            format!("10x degraded {:.4} -> {:.4}", w1, w10),
        )?;

        // K=1: every 1x and 2x evaluation fits one chunk, unbounded context.
        // Full attention lacks the windowed inductive bias for alignment, so
        // this arm gets shorter utterances and a longer, gentler schedule to
        // become a usable baseline at all.
        let spec = SyntheticSpec { len_max: 5, ..SyntheticSpec::desk() };
        let all = synth_generate(&spec, 512).map_err(|e| e.to_string())?;
        let (train, dev) = all.split_at(480);
        let mut cfg = ModelConfig::desk(spec.feat_dim, spec.n_text);
        cfg.chunk_frames = 100; // 2x concatenations still fit one chunk
        cfg.context_chunks = None;
        cfg.max_tokens_per_chunk = 32;
        let mut k1 = Model::new(cfg, 7).unwrap();
        let tc = TrainConfig {
            epochs: 40,
            schedule: TriStageSchedule {
                warmup_steps: 100,
                hold_steps: 1500,
                decay_steps: 2500,
                peak_lr: 2e-3,
                floor_lr: 5e-5,
            },
            ..TrainConfig::desk()
        };
        train_loop(&mut k1, train, dev, &tc).map_err(|e| e.to_string())?;
        let rows = concat_eval(&k1, dev, &[1, 2], 1, 0).map_err(|e| e.to_string())?;
        let (k1_1x, k1_2x) = (rows[0].1.wer(), rows[1].1.wer());
        println!("  K=1 full attention: WER 1x {:.4}, 2x {:.4}", k1_1x, k1_2x);
        ensure(k1_1x <= 0.10, format!("K=1 baseline WER {:.4}", k1_1x))?;
        ensure(
            k1_2x >= k1_1x + 0.10,
            format!("expected >= 10 point collapse, got {:.4} -> {:.4}", k1_1x, k1_2x),
        )
    });
}

#[test]
fn criterion_09_linear_vs_quadratic_cost() {
    check(9, "attention cost: flat per-token for b=2, growing for b=inf", || {
        // 800-chunk base: the first b chunks have smaller windows, and at a
        // 100-chunk base that startup transient alone moves the per-token
        // average by ~1%
        let (c, base_chunks) = (8usize, 800usize);
        let (t, u) = (c * base_chunks, 1600);
        let w1 = attention_cost(t, u, c, Some(2)).map_err(|e| e.to_string())?;
        let w10 = attention_cost(10 * t, 10 * u, c, Some(2)).map_err(|e| e.to_string())?;
        let rel = (w10.per_token - w1.per_token).abs() / w1.per_token;
        ensure(
            rel <= 0.01,
            format!("b=2 per-token moved {:.4}% at 10x", rel * 100.0),
        )?;
        let f1 = attention_cost(t, u, c, None).map_err(|e| e.to_string())?;
        let f10 = attention_cost(10 * t, 10 * u, c, None).map_err(|e| e.to_string())?;
        ensure(
            f10.per_token >= 5.0 * f1.per_token,
            format!("b=inf grew only {:.2}x", f10.per_token / f1.per_token),
        )?;
        println!(
            "  per-token pairs at 1x/10x: b=2 {:.1}/{:.1}, b=inf {:.1}/{:.1}",
            w1.per_token, w10.per_token, f1.per_token, f10.per_token
        );

        // closed form == mask enumeration, exactly
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        for _ in 0..25 {
            let c = rng.gen_range(2..=8usize);
            let t = rng.gen_range(1..=6 * c);
            let u = rng.gen_range(0..=12usize);
            let b = if rng.gen_bool(0.5) { Some(rng.gen_range(0..=3usize)) } else { None };
            let seg = brook::evalbench::spread_tokens(t, u, c).map_err(|e| e.to_string())?;
            let enumerated = attention_pairs_enumerated(t, &seg, c, b).map_err(|e| e.to_string())?;
            let counts: Vec<usize> = seg
                .chunks
                .iter()
                .enumerate()
                .map(|(k, ch)| {
                    let frames = (t - k * c).min(c);
                    frames + ch.len() + 1
                })
                .collect();
            let closed = attention_pairs(&counts, b);
            ensure(
                closed == enumerated,
                format!("t={t} u={u} c={c} b={b:?}: {closed} vs {enumerated}"),
            )?;
        }
        Ok(())
    });
}

#[test]
fn criterion_10_search_invariants() {
    check(10, "beam=1 == greedy; scores equal rescoring; synchrony asserted", || {
        let cfg = small_cfg();
        let m = Model::new(cfg.clone(), 110).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        for i in 0..50 {
            let t_raw = rng.gen_range(2..=8usize) * FRAME_STACK_STRIDE;
            let feats = randn(&mut rng, &[t_raw, cfg.feat_dim], 1.0);
            let stacked = stack_frames(&feats, FRAME_STACK_STRIDE).map_err(|e| e.to_string())?;
            // alignment-synchrony is a hard assert inside the decoder; any
            // violation would panic this test
            let greedy = greedy_decode(&m, &stacked).map_err(|e| e.to_string())?;
            let (beam1, per_chunk, score) =
                decode_traced(&m, &stacked, 1).map_err(|e| e.to_string())?;
            ensure(beam1 == greedy, format!("utt {i}: beam=1 != greedy"))?;
            let re = rescore(&m, &stacked, &per_chunk).map_err(|e| e.to_string())?;
            ensure(
                (score - re).abs() <= 1e-5,
                format!("utt {i}: beam score {score} vs rescore {re}"),
            )?;
            if i < 10 {
                let (_, pc4, s4) = decode_traced(&m, &stacked, 4).map_err(|e| e.to_string())?;
                let re4 = rescore(&m, &stacked, &pc4).map_err(|e| e.to_string())?;
                ensure(
                    (s4 - re4).abs() <= 1e-5,
                    format!("utt {i}: beam=4 score {s4} vs rescore {re4}"),
                )?;
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_11_metric_arithmetic() {
    check(11, "delay/delta and WER worked examples; delta >= |delay|", || {
        ensure(alignment_delay(&[10, 20], &[10, 20]).unwrap() == 0.0, "delay(t,t) != 0")?;
        ensure(alignment_delta(&[10, 20], &[10, 20]).unwrap() == 0.0, "delta(t,t) != 0")?;
        ensure(
            alignment_delay(&[10, 20], &[12, 22]).unwrap() == -2.0,
            "delay([10,20],[12,22]) != -2",
        )?;
        ensure(
            alignment_delta(&[10, 20], &[12, 18]).unwrap() == 2.0,
            "delta([10,20],[12,18]) != 2",
        )?;

        let r = wer(&[0, 1, 2], &[0, 2]);
        ensure(
            r.dels == 1 && r.subs == 0 && r.ins == 0 && (r.wer() - 1.0 / 3.0).abs() < 1e-12,
            "abc vs ac",
        )?;
        let r = wer(&[0], &[1, 2]);
        ensure(r.subs == 1 && r.ins == 1 && r.wer() == 2.0, "a vs bc (WER over 100%)")?;
        let r = wer(&[0, 1], &[1, 0]);
        ensure(r.subs == 2 && r.errors() == 2, "ab vs ba")?;

        let mut rng = ChaCha8Rng::seed_from_u64(111);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=12usize);
            let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..100u32)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.gen_range(0..100u32)).collect();
            let delay = alignment_delay(&a, &b).unwrap();
            let delta = alignment_delta(&a, &b).unwrap();
            ensure(delta >= delay.abs() - 1e-12, format!("delta {delta} < |delay| {delay}"))?;
        }
        Ok(())
    });
}

/// Session-level sanity that the public streaming API stays linear-state:
/// used by criterion 8's long inputs but cheap to assert directly.
#[test]
fn streaming_session_window_bound() {
    let cfg = small_cfg();
    let m = Model::new(cfg.clone(), 112).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let feats = randn(&mut rng, &[40, cfg.feat_dim * FRAME_STACK_STRIDE], 1.0);
    let mut s = StreamingSession::new(&m, 2).unwrap();
    let mut at = 0;
    while at < 40 {
        let n = cfg.chunk_frames.min(40 - at);
        s.push_chunk(&feats.slice_rows(at, n).unwrap()).unwrap();
        at += n;
    }
    s.finalize().unwrap();
    assert!(s.max_retained_chunks() <= cfg.context_chunks.unwrap() + 1);
}

// keep the encoder streaming path exercised from the integration side too
#[test]
fn streaming_encoder_matches_batch() {
    let cfg = small_cfg();
    let m = Model::new(cfg.clone(), 113).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let t = 11;
    let stacked = randn(&mut rng, &[t, cfg.stacked_dim()], 1.0);
    let (batch, _) = m.encoder_forward(&stacked).unwrap();
    let mut state = EncoderState::new(&cfg);
    let mut rows = Vec::new();
    let mut at = 0;
    while at < t {
        let main = cfg.chunk_frames.min(t - at);
        let ext = (main + cfg.lookahead_frames).min(t - at);
        let part = stacked.slice_rows(at, ext).unwrap();
        rows.push(state.encode_chunk(&m, &part, main).unwrap().0);
        at += main;
    }
    let mut row = 0;
    for r in &rows {
        for i in 0..r.rc().0 {
            for j in 0..cfg.width {
                assert_eq!(r.at(i, j).to_bits(), batch.at(row, j).to_bits());
            }
            row += 1;
        }
    }
    assert_eq!(row, t);
}
