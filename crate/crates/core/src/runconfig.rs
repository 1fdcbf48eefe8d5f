//! Flat `[section]` / `key = value` run configuration with full round-trip
//! serialization, so every emitted report can embed the exact config that
//! produced it. Unknown keys are rejected; every key has a default.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::model::ModelConfig;
use crate::train::{AlignSource, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub train_set: Option<PathBuf>,
    pub dev_set: Option<PathBuf>,
    pub test_set: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::desk();
        RunConfig {
            model: ModelConfig::desk(synth.feat_dim, synth.n_text),
            train: TrainConfig::desk(),
            synth,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", ln + 1)))?;
                if !matches!(name, "model" | "train" | "synth" | "paths") {
                    return Err(Error::Config(format!("line {}: unknown section [{}]", ln + 1, name)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(&section, key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", ln + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{}: cannot parse {:?}", key, v)))
        }
        match section {
            "model" => {
                let m = &mut self.model;
                match key {
                    "feat_dim" => m.feat_dim = num(key, value)?,
                    "enc_layers" => m.enc_layers = num(key, value)?,
                    "dec_layers" => m.dec_layers = num(key, value)?,
                    "width" => m.width = num(key, value)?,
                    "heads" => m.heads = num(key, value)?,
                    "ff_mult" => m.ff_mult = num(key, value)?,
                    "chunk_frames" => m.chunk_frames = num(key, value)?,
                    "context_chunks" => {
                        m.context_chunks = if value == "inf" { None } else { Some(num(key, value)?) }
                    }
                    "lookahead_frames" => m.lookahead_frames = num(key, value)?,
                    "n_text" => m.n_text = num(key, value)?,
                    "max_tokens_per_chunk" => m.max_tokens_per_chunk = num(key, value)?,
                    "exclude_prev_eos" => m.exclude_prev_eos = num(key, value)?,
                    "rope_base" => m.rope_base = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key model.{}", key))),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "epochs" => t.epochs = num(key, value)?,
                    "ctc_pretrain_epochs" => t.ctc_pretrain_epochs = num(key, value)?,
                    "batch_size" => t.batch_size = num(key, value)?,
                    "warmup_steps" => t.schedule.warmup_steps = num(key, value)?,
                    "hold_steps" => t.schedule.hold_steps = num(key, value)?,
                    "decay_steps" => t.schedule.decay_steps = num(key, value)?,
                    "peak_lr" => t.schedule.peak_lr = num(key, value)?,
                    "floor_lr" => t.schedule.floor_lr = num(key, value)?,
                    "ctc_weight" => t.ctc_weight = num(key, value)?,
                    "align_source" => {
                        t.align_source = match value {
                            "reference" => AlignSource::Reference,
                            "ctc" => AlignSource::Ctc,
                            _ => {
                                return Err(Error::Config(format!(
                                    "align_source must be reference|ctc, got {:?}",
                                    value
                                )))
                            }
                        }
                    }
                    "seed" => t.seed = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key train.{}", key))),
                }
            }
            "synth" => {
                let s = &mut self.synth;
                match key {
                    "n_text" => s.n_text = num(key, value)?,
                    "feat_dim" => s.feat_dim = num(key, value)?,
                    "dur_min" => s.dur_min = num(key, value)?,
                    "dur_max" => s.dur_max = num(key, value)?,
                    "noise_std" => s.noise_std = num(key, value)?,
                    "len_min" => s.len_min = num(key, value)?,
                    "len_max" => s.len_max = num(key, value)?,
                    "seed" => s.seed = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key synth.{}", key))),
                }
            }
            "paths" => {
                let p = &mut self.paths;
                let v = Some(PathBuf::from(value));
                match key {
                    "train_set" => p.train_set = v,
                    "dev_set" => p.dev_set = v,
                    "test_set" => p.test_set = v,
                    _ => return Err(Error::Config(format!("unknown key paths.{}", key))),
                }
            }
            "" => return Err(Error::Config(format!("key {} before any [section]", key))),
            _ => unreachable!("section validated at parse"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.model.n_text != self.synth.n_text {
            return Err(Error::Config(format!(
                "model.n_text {} != synth.n_text {}",
                self.model.n_text, self.synth.n_text
            )));
        }
        if self.model.feat_dim != self.synth.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} != synth.feat_dim {}",
                self.model.feat_dim, self.synth.feat_dim
            )));
        }
        Ok(())
    }

    /// Complete serialization: parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        writeln!(s, "[model]").unwrap();
        writeln!(s, "feat_dim = {}", m.feat_dim).unwrap();
        writeln!(s, "enc_layers = {}", m.enc_layers).unwrap();
        writeln!(s, "dec_layers = {}", m.dec_layers).unwrap();
        writeln!(s, "width = {}", m.width).unwrap();
        writeln!(s, "heads = {}", m.heads).unwrap();
        writeln!(s, "ff_mult = {}", m.ff_mult).unwrap();
        writeln!(s, "chunk_frames = {}", m.chunk_frames).unwrap();
        match m.context_chunks {
            Some(b) => writeln!(s, "context_chunks = {}", b).unwrap(),
            None => writeln!(s, "context_chunks = inf").unwrap(),
        }
        writeln!(s, "lookahead_frames = {}", m.lookahead_frames).unwrap();
        writeln!(s, "n_text = {}", m.n_text).unwrap();
        writeln!(s, "max_tokens_per_chunk = {}", m.max_tokens_per_chunk).unwrap();
        writeln!(s, "exclude_prev_eos = {}", m.exclude_prev_eos).unwrap();
        writeln!(s, "rope_base = {}", m.rope_base).unwrap();
        let t = &self.train;
        writeln!(s, "\n[train]").unwrap();
        writeln!(s, "epochs = {}", t.epochs).unwrap();
        writeln!(s, "ctc_pretrain_epochs = {}", t.ctc_pretrain_epochs).unwrap();
        writeln!(s, "batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "warmup_steps = {}", t.schedule.warmup_steps).unwrap();
        writeln!(s, "hold_steps = {}", t.schedule.hold_steps).unwrap();
        writeln!(s, "decay_steps = {}", t.schedule.decay_steps).unwrap();
        writeln!(s, "peak_lr = {}", t.schedule.peak_lr).unwrap();
        writeln!(s, "floor_lr = {}", t.schedule.floor_lr).unwrap();
        writeln!(s, "ctc_weight = {}", t.ctc_weight).unwrap();
        let align = match t.align_source {
            AlignSource::Reference => "reference",
            AlignSource::Ctc => "ctc",
        };
        writeln!(s, "align_source = {}", align).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        let y = &self.synth;
        writeln!(s, "\n[synth]").unwrap();
        writeln!(s, "n_text = {}", y.n_text).unwrap();
        writeln!(s, "feat_dim = {}", y.feat_dim).unwrap();
        writeln!(s, "dur_min = {}", y.dur_min).unwrap();
        writeln!(s, "dur_max = {}", y.dur_max).unwrap();
        writeln!(s, "noise_std = {}", y.noise_std).unwrap();
        writeln!(s, "len_min = {}", y.len_min).unwrap();
        writeln!(s, "len_max = {}", y.len_max).unwrap();
        writeln!(s, "seed = {}", y.seed).unwrap();
        writeln!(s, "\n[paths]").unwrap();
        for (k, v) in [
            ("train_set", &self.paths.train_set),
            ("dev_set", &self.paths.dev_set),
            ("test_set", &self.paths.test_set),
        ] {
            if let Some(p) = v {
                writeln!(s, "{} = {}", k, p.display()).unwrap();
            }
        }
        s
    }
}
