//! Paired datasets: JSONL loading and the bundled synthetic tasks.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::PairedExample;
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub src: String,
    pub trg: String,
}

impl PairRecord {
    pub fn new(src: impl Into<String>, trg: impl Into<String>) -> Self {
        PairRecord {
            src: src.into(),
            trg: trg.into(),
        }
    }

    fn normalized(mut self) -> Option<Self> {
        self.src = self.src.split_whitespace().collect::<Vec<_>>().join(" ");
        self.trg = self.trg.split_whitespace().collect::<Vec<_>>().join(" ");
        (!self.src.is_empty() && !self.trg.is_empty()).then_some(self)
    }
}

/// Parses JSONL pairs. Lines that are not JSON are an error; objects missing a field or with an
/// empty side are skipped with a warning and counted in the second return value.
pub fn parse_pairs(text: &str) -> Result<(Vec<PairRecord>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: malformed JSON: {e}", i + 1)))?;
        match serde_json::from_value::<PairRecord>(value).ok().and_then(PairRecord::normalized) {
            Some(r) => out.push(r),
            None => {
                warn!("line {}: skipping record without nonempty src and trg", i + 1);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (pairs, skipped) = parse_pairs(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })?;
    if skipped > 0 {
        warn!("{}: skipped {skipped} invalid records", path.display());
    }
    Ok(pairs)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tokenizes pairs into fixed-length layouts; pairs that do not fit are skipped with a warning.
pub fn encode_pairs(pairs: &[PairRecord], vocab: &Vocab, seq_len: usize) -> Vec<PairedExample> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        match PairedExample::new(vocab.encode(&p.src), vocab.encode(&p.trg), seq_len) {
            Ok(ex) => out.push(ex),
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} pairs longer than the {seq_len}-position layout");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// Target equals the source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Each source has three valid targets: one of [`ONE_TO_MANY_MARKERS`] followed by a copy of
    /// the source. Every source appears once with each of its targets, so which one to produce
    /// cannot be predicted from the source alone.
    OneToMany,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthTask::Copy),
            "reverse" => Ok(SynthTask::Reverse),
            "one-to-many" => Ok(SynthTask::OneToMany),
            _ => Err(Error::Config(format!(
                "unknown synthetic task {s:?} (expected copy, reverse or one-to-many)"
            ))),
        }
    }
}

/// Words that open the targets of [`SynthTask::OneToMany`]. They are ordinary content words,
/// so their embeddings are also trained where they are unambiguous.
pub const ONE_TO_MANY_MARKERS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub pairs: usize,
    /// Number of distinct content words.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Content words `a`, `b`, … For more than 23 words, `w23`, `w24`, … follow.
pub fn synth_word(i: usize) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvw";
    match LETTERS.get(i) {
        Some(&c) => (c as char).to_string(),
        None => format!("w{i}"),
    }
}

/// Random source sentence drawn like [`generate_synth`] does.
pub fn synth_source<R: Rng + ?Sized>(synth: &SynthConfig, rng: &mut R) -> Vec<String> {
    let len = rng.gen_range(synth.min_len..=synth.max_len);
    (0..len).map(|_| synth_word(rng.gen_range(0..synth.vocab))).collect()
}

/// All valid targets of a source under `task`.
pub fn synth_targets(task: SynthTask, src: &[String]) -> Vec<String> {
    let joined = src.join(" ");
    match task {
        SynthTask::Copy => vec![joined],
        SynthTask::Reverse => {
            let mut r = src.to_vec();
            r.reverse();
            vec![r.join(" ")]
        }
        SynthTask::OneToMany => ONE_TO_MANY_MARKERS
            .iter()
            .map(|m| format!("{m} {joined}"))
            .collect(),
    }
}

pub fn generate_synth(synth: &SynthConfig) -> Result<Vec<PairRecord>> {
    if synth.vocab == 0 || synth.min_len == 0 || synth.min_len > synth.max_len {
        return Err(Error::Config("synthetic task needs vocab ≥ 1 and 1 ≤ min_len ≤ max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let mut out = Vec::with_capacity(synth.pairs);
    while out.len() < synth.pairs {
        let src = synth_source(synth, &mut rng);
        let joined = src.join(" ");
        let targets = synth_targets(synth.task, &src);
        let take = targets.len().min(synth.pairs - out.len());
        out.extend(targets.into_iter().take(take).map(|t| PairRecord::new(joined.clone(), t)));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// One line of `sample` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub src: String,
    pub candidates: Vec<String>,
    pub mbr_choice: usize,
    pub seed: u64,
    pub steps: usize,
}

impl SampleRecord {
    pub fn choice(&self) -> Option<&str> {
        self.candidates.get(self.mbr_choice).map(String::as_str)
    }
}

/// A text read from a hypothesis or reference file, with its candidate set when the file is
/// sampler output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLine {
    pub text: String,
    pub candidates: Vec<String>,
}

/// Reads one text per line from any of: sampler output (the MBR choice), a dataset (`trg`),
/// or plain text. Lines starting with `{` must be valid JSON.
pub fn parse_text_lines(text: &str) -> Result<Vec<TextLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if !trimmed.starts_with('{') {
            out.push(TextLine {
                text: trimmed.split_whitespace().collect::<Vec<_>>().join(" "),
                candidates: Vec::new(),
            });
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::Data(format!("line {}: malformed JSON: {e}", i + 1)))?;
        if v.get("candidates").is_some() {
            let rec: SampleRecord = serde_json::from_value(v)
                .map_err(|e| Error::Data(format!("line {}: bad sample record: {e}", i + 1)))?;
            let text = rec
                .choice()
                .ok_or_else(|| Error::Data(format!("line {}: mbr_choice out of range", i + 1)))?
                .to_string();
            out.push(TextLine {
                text,
                candidates: rec.candidates,
            });
        } else if let Some(trg) = v.get("trg").and_then(|t| t.as_str()) {
            out.push(TextLine {
                text: trg.split_whitespace().collect::<Vec<_>>().join(" "),
                candidates: Vec::new(),
            });
        } else {
            return Err(Error::Data(format!(
                "line {}: JSON line has neither `candidates` nor `trg`",
                i + 1
            )));
        }
    }
    Ok(out)
}

pub fn load_text_lines(path: &Path) -> Result<Vec<TextLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_lines(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Sources for sampling: plain text lines, or JSONL objects with a `src` field.
pub fn parse_sources(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(trimmed)
                .map_err(|e| Error::Data(format!("line {}: malformed JSON: {e}", i + 1)))?;
            let src = v
                .get("src")
                .and_then(|s| s.as_str())
                .ok_or_else(|| Error::Data(format!("line {}: JSON line has no `src`", i + 1)))?;
            out.push(src.split_whitespace().collect::<Vec<_>>().join(" "));
        } else {
            out.push(trimmed.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
    Ok(out)
}
