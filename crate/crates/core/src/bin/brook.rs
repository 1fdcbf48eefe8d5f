//! Pipeline driver: corpus synthesis, training, alignment, decoding,
//! evaluation, ablation grids, and attention-cost benchmarking.
//!
//! Exit codes: 0 success, 2 config error, 3 data/IO error, 4 numerical
//! failure, 1 anything else. Seconds <-> frames (40 ms per encoder frame)
//! conversion happens only here; core modules are frame-based.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brook::ctcalign::{alignment_delay, alignment_delta, ctc_forced_align};
use brook::data::{load_dataset, save_dataset, synth_generate, stack_frames, Utterance, FRAME_STACK_STRIDE, SECONDS_PER_FRAME};
use brook::evalbench::{ablation_grid, attention_cost, concat_eval, eval_corpus, format_grid};
use brook::model::Model;
use brook::runconfig::RunConfig;
use brook::search::StreamingSession;
use brook::train::{train_loop, AlignSource};
use brook::{Error, Result};

#[derive(Parser)]
#[command(name = "brook", about = "streaming decoder-only speech recognition, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (flat key=value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/dev/test splits of the synthetic corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 480)]
        train: usize,
        #[arg(long, default_value_t = 32)]
        dev: usize,
        #[arg(long, default_value_t = 32)]
        test: usize,
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fixes utterance length to exactly N tokens.
        #[arg(long)]
        tokens: Option<usize>,
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write the dev-WER-best checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory holding train.ds/dev.ds (overrides [paths]).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step log file (also the resume step source).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_parser = parse_align)]
        align_source: Option<AlignSource>,
        /// Continue from this checkpoint; the step counter picks up
        /// after the last step recorded in --log.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream-decode a dataset with beam search.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        chunk_frames: Option<usize>,
        /// Attention window in chunks, or "inf".
        #[arg(long, value_parser = parse_context)]
        context_chunks: Option<Option<usize>>,
        #[arg(long)]
        max_tokens_per_chunk: Option<usize>,
        /// Print per-chunk confirmed/provisional transcript deltas.
        #[arg(long)]
        emit_trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CTC forced alignment vs reference end times.
    Align {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// WER evaluation, optionally on n-fold concatenations.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Comma-separated concatenation multipliers, e.g. 1,2,10.
        #[arg(long, value_delimiter = ',')]
        concat: Vec<usize>,
        /// Silence frames inserted between concatenated copies.
        #[arg(long, default_value_t = 0)]
        gap: usize,
    },
    /// Train/evaluate a (chunk size x context) grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        chunks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,2,inf", value_parser = parse_context)]
        contexts: Vec<Option<usize>>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Attention pairs-per-token curves for windowed vs unbounded context.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// Length multipliers, e.g. 1x..10x or 1,2,5.
        #[arg(long, default_value = "1x..10x")]
        lengths: String,
        /// Base utterance length in seconds (40 ms per frame).
        #[arg(long, default_value_t = 4.0)]
        base_seconds: f64,
        #[arg(long, default_value_t = 10)]
        base_tokens: usize,
    },
}

fn parse_align(s: &str) -> std::result::Result<AlignSource, String> {
    match s {
        "reference" => Ok(AlignSource::Reference),
        "ctc" => Ok(AlignSource::Ctc),
        _ => Err(format!("expected reference|ctc, got {:?}", s)),
    }
}

fn parse_context(s: &str) -> std::result::Result<Option<usize>, String> {
    if s == "inf" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| format!("expected count or inf, got {:?}", s))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data { .. } | Error::Io(_) | Error::Infeasible(_) => 3,
                Error::Numerical(_) => 4,
                _ => 1,
            })
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    load_dataset(&dir.join(format!("{name}.ds")))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { config, out, train, dev, test, seed, tokens, force } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(n) = tokens {
                cfg.synth.len_min = n;
                cfg.synth.len_max = n;
            }
            cfg.synth.validate()?;
            fs::create_dir_all(&out)?;
            for (name, _n) in [("train", train), ("dev", dev), ("test", test)] {
                let path = out.join(format!("{name}.ds"));
                if path.exists() && !force {
                    return Err(Error::Data { offset: 0, detail: format!("{} exists; pass --force", path.display()) });
                }
            }
            // one stream so splits share templates but not utterances
            let all = synth_generate(&cfg.synth, train + dev + test)?;
            let (tr, rest) = all.split_at(train);
            let (dv, te) = rest.split_at(dev);
            for (name, split) in [("train", tr), ("dev", dv), ("test", te)] {
                save_dataset(&out.join(format!("{name}.ds")), split)?;
            }
            fs::write(out.join("synth.conf"), cfg.to_text())?;
            let frames: usize = tr.iter().map(|u| u.features.rc().0).sum();
            println!(
                "wrote {}/{{train,dev,test}}.ds  ({} + {} + {} utts, train audio {:.1}s)",
                out.display(),
                train,
                dev,
                test,
                frames as f64 / FRAME_STACK_STRIDE as f64 * SECONDS_PER_FRAME
            );
            Ok(())
        }
        Cmd::Train { config, data, out, log, align_source, resume, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(a) = align_source {
                cfg.train.align_source = a;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = data
                .or_else(|| cfg.paths.train_set.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))
                .ok_or_else(|| Error::Config("no --data directory or [paths] train_set".into()))?;
            let train_set = load_split(&dir, "train")?;
            let dev_set = load_split(&dir, "dev")?;

            let mut model = match &resume {
                Some(p) => {
                    let m = Model::load(p)?;
                    if let Some(logp) = &log {
                        cfg.train.start_step = last_logged_step(logp)?.map_or(0, |s| s + 1);
                    }
                    m
                }
                None => Model::new(cfg.model.clone(), cfg.train.seed)?,
            };
            let report = train_loop(&mut model, &train_set, &dev_set, &cfg.train)?;
            if report.diverged {
                return Err(Error::Numerical("training diverged; best checkpoint restored".into()));
            }
            model.save(&out)?;
            if let Some(logp) = &log {
                let mut text = String::new();
                for line in cfg.to_text().lines() {
                    text.push_str("# ");
                    text.push_str(line);
                    text.push('\n');
                }
                for s in &report.steps {
                    text.push_str(&format!(
                        "step={} lr={:.6} ce={:.5} ctc={:.5} total={:.5}\n",
                        s.step, s.lr, s.ce, s.ctc, s.total
                    ));
                }
                if resume.is_some() && logp.exists() {
                    let old = fs::read_to_string(logp)?;
                    text = old + &text;
                }
                fs::write(logp, text)?;
            }
            println!(
                "best dev WER {:.4} at epoch {}; wrote {}",
                report.best_dev_wer,
                report.best_epoch,
                out.display()
            );
            for (i, w) in report.dev_wer_by_epoch.iter().enumerate() {
                println!("epoch {:>2}  dev WER {:.4}", i + 1, w);
            }
            Ok(())
        }
        Cmd::Decode {
            config,
            ckpt,
            data,
            beam,
            chunk_frames,
            context_chunks,
            max_tokens_per_chunk,
            emit_trace,
            out,
        } => {
            let mut model = Model::load(&ckpt)?;
            if let Some(arg) = &config.config {
                // weights only fit the architecture they were trained with
                let file_cfg = RunConfig::parse(&fs::read_to_string(arg)?)?;
                let (a, b) = (model.cfg.clone(), file_cfg.model);
                let same = a.feat_dim == b.feat_dim
                    && a.enc_layers == b.enc_layers
                    && a.dec_layers == b.dec_layers
                    && a.width == b.width
                    && a.heads == b.heads
                    && a.ff_mult == b.ff_mult
                    && a.n_text == b.n_text;
                if !same {
                    return Err(Error::Config(format!(
                        "checkpoint/config architecture mismatch: ckpt hash {:016x} vs config hash {:016x}",
                        fnv1a(&format!("{:?}", a)),
                        fnv1a(&format!("{:?}", b)),
                    )));
                }
            }
            if let Some(c) = chunk_frames {
                model.cfg.chunk_frames = c;
            }
            if let Some(b) = context_chunks {
                model.cfg.context_chunks = b;
            }
            if let Some(m) = max_tokens_per_chunk {
                model.cfg.max_tokens_per_chunk = m;
            }
            model.cfg.validate()?;
            let utts = load_dataset(&data)?;
            let mut lines = Vec::new();
            for (i, u) in utts.iter().enumerate() {
                let feats = stack_frames(&u.features, FRAME_STACK_STRIDE)?;
                let mut session = StreamingSession::new(&model, beam)?;
                let c = model.cfg.chunk_frames;
                let t = feats.rc().0;
                let mut at = 0;
                while at < t {
                    let n = c.min(t - at);
                    let part = feats.slice_rows(at, n)?;
                    let delta = session.push_chunk(&part)?;
                    if emit_trace {
                        println!(
                            "utt {} chunk {}: confirmed {:?} provisional {:?}",
                            i,
                            session.chunks_decoded().saturating_sub(1),
                            delta.confirmed,
                            delta.provisional
                        );
                    }
                    at += n;
                }
                let hyp = session.finalize()?;
                let text: Vec<String> = hyp.iter().map(|t| t.to_string()).collect();
                let line = format!("utt {}: {}", i, text.join(" "));
                println!("{line}");
                lines.push(line);
            }
            if let Some(p) = out {
                fs::write(p, lines.join("\n") + "\n")?;
            }
            Ok(())
        }
        Cmd::Align { config, ckpt, data } => {
            let _ = load_config(&config)?;
            let model = Model::load(&ckpt)?;
            let utts = load_dataset(&data)?;
            let (mut delay_sum, mut delta_sum, mut n) = (0.0, 0.0, 0usize);
            for u in &utts {
                let Some(refs) = &u.ref_end_frames else { continue };
                let feats = stack_frames(&u.features, FRAME_STACK_STRIDE)?;
                let lp = model.ctc_logprobs(&feats)?;
                let al = ctc_forced_align(&lp, &u.transcript, model.cfg.n_text)?;
                delay_sum += alignment_delay(&al.end_frames, refs)?;
                delta_sum += alignment_delta(&al.end_frames, refs)?;
                n += 1;
            }
            if n == 0 {
                return Err(Error::Data { offset: 0, detail: "no utterances carry reference alignments".into() });
            }
            let (delay, delta) = (delay_sum / n as f64, delta_sum / n as f64);
            println!(
                "alignment over {} utts: mean delay {:+.2} frames ({:+.0} ms), mean |delta| {:.2} frames ({:.0} ms)",
                n,
                delay,
                delay * SECONDS_PER_FRAME * 1000.0,
                delta,
                delta * SECONDS_PER_FRAME * 1000.0
            );
            Ok(())
        }
        Cmd::Eval { config, ckpt, data, beam, concat, gap } => {
            let cfg = load_config(&config)?;
            let model = Model::load(&ckpt)?;
            let utts = load_dataset(&data)?;
            if concat.is_empty() {
                let r = eval_corpus(&model, &utts, beam)?;
                println!(
                    "overall WER {:.4} (S {} D {} I {} / {})",
                    r.overall.wer(),
                    r.overall.subs,
                    r.overall.dels,
                    r.overall.ins,
                    r.overall.ref_len
                );
                println!(
                    "top-decile length WER {:.4} (D {} / {})",
                    r.top_decile.wer(),
                    r.top_decile.dels,
                    r.top_decile.ref_len
                );
            } else {
                println!("concat  wer     sub  del  ins  ref");
                for (nx, r) in concat_eval(&model, &utts, &concat, beam, gap)? {
                    println!(
                        "{:<7} {:<7.4} {:<4} {:<4} {:<4} {}",
                        format!("{}x", nx),
                        r.wer(),
                        r.subs,
                        r.dels,
                        r.ins,
                        r.ref_len
                    );
                }
            }
            print_provenance(&cfg);
            Ok(())
        }
        Cmd::Ablate { config, data, chunks, contexts, beam } => {
            let cfg = load_config(&config)?;
            let dir = data.ok_or_else(|| Error::Config("ablate needs --data".into()))?;
            let train_set = load_split(&dir, "train")?;
            let dev_set = load_split(&dir, "dev")?;
            let tc = cfg.train.clone();
            let cells = ablation_grid(&cfg.model, &chunks, &contexts, &dev_set, beam, |mc| {
                let mut m = Model::new(mc.clone(), tc.seed)?;
                train_loop(&mut m, &train_set, &dev_set, &tc)?;
                Ok(m)
            })?;
            print!("{}", format_grid(&cells));
            print_provenance(&cfg);
            Ok(())
        }
        Cmd::Bench { config, lengths, base_seconds, base_tokens } => {
            let cfg = load_config(&config)?;
            let base_frames = (base_seconds / SECONDS_PER_FRAME).round() as usize;
            let mults = parse_lengths(&lengths)?;
            let c = cfg.model.chunk_frames;
            println!(
                "pairs per emitted token, c={} frames ({}s audio base)",
                c, base_seconds
            );
            println!("length  b=2        b=inf");
            for n in mults {
                let t = base_frames * n;
                let u = base_tokens * n;
                let win = attention_cost(t, u, c, Some(2))?;
                let full = attention_cost(t, u, c, None)?;
                println!("{:<7} {:<10.1} {:<10.1}", format!("{}x", n), win.per_token, full.per_token);
            }
            Ok(())
        }
    }
}

fn print_provenance(cfg: &RunConfig) {
    println!("--- config ---");
    print!("{}", cfg.to_text());
}

fn last_logged_step(path: &Path) -> Result<Option<u64>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let mut last = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("step=") {
            if let Some(num) = rest.split_whitespace().next() {
                if let Ok(v) = num.parse() {
                    last = Some(v);
                }
            }
        }
    }
    Ok(last)
}

/// "1x..10x" ranges or "1,2,5" lists (multipliers of the base length).
fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let strip = |p: &str| p.trim().trim_end_matches('x').to_string();
    if let Some((a, b)) = s.split_once("..") {
        let (lo, hi): (usize, usize) = (
            strip(a).parse().map_err(|_| Error::Config(format!("bad length {:?}", a)))?,
            strip(b).parse().map_err(|_| Error::Config(format!("bad length {:?}", b)))?,
        );
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad length range {:?}", s)));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|p| strip(p).parse().map_err(|_| Error::Config(format!("bad length {:?}", p))))
        .collect()
}
