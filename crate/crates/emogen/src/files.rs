//! Token files, schedule files and MIDI rendering.

use std::fs;
use std::path::{Path, PathBuf};

use emogen_core::generate::{Breakpoint, ConditionSchedule, Interpolation};
use emogen_core::midi::{write_midi, DEFAULT_VELOCITY};
use emogen_core::tokenizer::{decode, Vocab};
use emogen_core::TokenId;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Token { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {reason}")]
    Schedule { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io { path: path.into(), source }
}

/// One token id per line.
pub fn tokens_to_text(tokens: &[TokenId]) -> String {
    let mut s = String::with_capacity(tokens.len() * 5);
    for t in tokens {
        s.push_str(&t.to_string());
        s.push('\n');
    }
    s
}

pub fn write_tokens(path: &Path, tokens: &[TokenId]) -> Result<(), FileError> {
    crate::checkpoint::write_atomic(path, tokens_to_text(tokens).as_bytes()).map_err(io(path))
}

pub fn read_tokens(path: &Path, vocab: Vocab) -> Result<Vec<TokenId>, FileError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| FileError::Token { path: path.into(), line: i + 1, reason };
        let id: TokenId = line.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        if !vocab.contains(id) {
            return Err(bad(format!("id {id} outside a vocabulary of {}", vocab.size())));
        }
        out.push(id);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScheduleFile {
    Full(ConditionSchedule),
    Bare(Vec<Breakpoint>),
}

/// Reads `{"mode": "step"|"linear", "breakpoints": [...]}` or a bare array
/// of breakpoints, which uses step interpolation.
pub fn parse_schedule(text: &str) -> Result<ConditionSchedule, String> {
    let parsed: ScheduleFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let schedule = match parsed {
        ScheduleFile::Full(s) => s,
        ScheduleFile::Bare(breakpoints) => ConditionSchedule { mode: Interpolation::Step, breakpoints },
    };
    schedule.validate().map_err(|e| e.to_string())?;
    Ok(schedule)
}

pub fn read_schedule(path: &Path) -> Result<ConditionSchedule, FileError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_schedule(&text).map_err(|reason| FileError::Schedule { path: path.into(), reason })
}

/// Standard MIDI File bytes for a token sequence.
pub fn render_midi(tokens: &[TokenId]) -> Vec<u8> {
    write_midi(&decode(tokens), DEFAULT_VELOCITY)
}
