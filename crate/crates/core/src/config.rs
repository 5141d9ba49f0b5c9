//! One flat `key = value` namespace over every section's settings.
//!
//! A key may belong to several sections (`d_v` is both a model and a generator
//! key, `seed` seeds training and generation); setting it updates all of them.
//! Unknown keys are errors.

use std::fmt;
use std::path::Path;

use crate::datasets::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::InferConfig;
use crate::model::ModelConfig;
use crate::textbank::TextConfig;
use crate::training::{preset, TrainConfig, PRESET_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Model,
    Train,
    Infer,
    Eval,
    Synth,
    Text,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Model => "model",
            Section::Train => "train",
            Section::Infer => "infer",
            Section::Eval => "eval",
            Section::Synth => "synth",
            Section::Text => "text",
        })
    }
}

pub const SECTIONS: [Section; 6] = [
    Section::Model,
    Section::Train,
    Section::Infer,
    Section::Eval,
    Section::Synth,
    Section::Text,
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub text: TextConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyInfo {
    pub key: &'static str,
    pub sections: Vec<Section>,
    pub default: String,
}

impl Settings {
    pub fn pairs(&self, section: Section) -> Vec<(&'static str, String)> {
        match section {
            Section::Model => self.model.to_pairs(),
            Section::Train => self.train.to_pairs(),
            Section::Infer => self.infer.to_pairs(),
            Section::Eval => self.eval.to_pairs(),
            Section::Synth => self.synth.to_pairs(),
            Section::Text => self.text.to_pairs(),
        }
    }

    fn set_in(&mut self, section: Section, key: &str, value: &str) -> Result<bool> {
        match section {
            Section::Model => self.model.set(key, value),
            Section::Train => self.train.set(key, value),
            Section::Infer => self.infer.set(key, value),
            Section::Eval => self.eval.set(key, value),
            Section::Synth => self.synth.set(key, value),
            Section::Text => self.text.set(key, value),
        }
    }

    /// Sets `key` in every section that owns it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            return self.apply_preset(value.trim());
        }
        let mut hit = false;
        for s in SECTIONS {
            hit |= self.set_in(s, key, value)?;
        }
        if hit {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    /// Replaces the training section and the preset's inference settings.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = preset(name)?;
        let (seed, threads) = (self.train.seed, self.train.threads);
        self.train = TrainConfig { seed, threads, ..p.train };
        self.infer.nms_thresh = p.nms_thresh;
        self.infer.max_seq_len = self.train.max_seq_len;
        Ok(())
    }

    /// Applies pairs in order, except that a `preset` goes first.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k.as_ref() == "preset") {
            self.apply_preset(v.as_ref().trim())?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k.as_ref() != "preset") {
            self.set(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs = parse_pairs(&text).map_err(|(line, msg)| {
            Error::Config(format!("{}:{line}: {msg}", path.display()))
        })?;
        self.apply(&pairs)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        self.text.validate()
    }

    /// Every key with the sections that own it and its value here.
    pub fn keys(&self) -> Vec<KeyInfo> {
        let mut out: Vec<KeyInfo> = Vec::new();
        for s in SECTIONS {
            for (key, value) in self.pairs(s) {
                match out.iter_mut().find(|k| k.key == key) {
                    Some(k) => k.sections.push(s),
                    None => out.push(KeyInfo { key, sections: vec![s], default: value }),
                }
            }
        }
        out
    }

    /// The full configuration as a loadable file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut seen = Vec::new();
        for s in SECTIONS {
            out.push_str(&format!("# {s}\n"));
            for (k, v) in self.pairs(s) {
                if !seen.contains(&k) {
                    seen.push(k);
                    out.push_str(&format!("{k} = {v}\n"));
                }
            }
        }
        out
    }
}

pub fn preset_help() -> String {
    format!("preset: one of {} (applied before other keys)", PRESET_NAMES.join(", "))
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Errors carry the 1-based line number.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<(String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err((i + 1, format!("expected key = value, got {line:?}")));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
