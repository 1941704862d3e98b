//! Datasets, vocabulary files and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use skillmix_core::corpus::{Skill, SkillInstance, Vocabulary};
use skillmix_core::corpus::vocab::NUM_SPECIALS;

use crate::error::{AppError, AppResult};

/// Writes to a temporary file in the target directory, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AppError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| AppError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| AppError::io(path, e))?;
    tmp.persist(path).map_err(|e| AppError::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Record {
    input: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skill: Option<String>,
    #[serde(default)]
    task: String,
}

pub fn to_jsonl(instances: &[SkillInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let rec = Record {
            input: inst.input.clone(),
            target: inst.target.clone(),
            skill: inst.skill.map(|s| s.name().to_string()),
            task: inst.task.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records always serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSONL text; `path` only labels errors.
pub fn parse_jsonl(text: &str, path: &Path) -> AppResult<Vec<SkillInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| AppError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let skill = match rec.skill.as_deref() {
            None => None,
            Some(s) => Some(Skill::parse(s).map_err(|e| err(e.to_string()))?),
        };
        let inst = SkillInstance {
            input: rec.input,
            target: rec.target,
            skill,
            task: rec.task,
        };
        inst.validate().map_err(|e| err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[SkillInstance]) -> AppResult<()> {
    atomic_write(path, to_jsonl(instances).as_bytes())
}

pub fn read_jsonl(path: &Path) -> AppResult<Vec<SkillInstance>> {
    parse_jsonl(&read_to_string(path)?, path)
}

/// One non-special token per line; line `n` (from 0) has id `n + NUM_SPECIALS`.
pub fn vocab_to_string(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for t in vocab.regular_tokens() {
        s.push_str(t);
        s.push('\n');
    }
    s
}

pub fn parse_vocab(text: &str, path: &Path) -> AppResult<Vocabulary> {
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tok = line.trim_end_matches('\r');
        if tok.is_empty() || tok.contains(char::is_whitespace) {
            return Err(AppError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("invalid vocabulary token `{tok}`"),
            });
        }
        tokens.push(tok);
    }
    let vocab = Vocabulary::from_tokens(&tokens);
    if vocab.len() != tokens.len() + NUM_SPECIALS {
        return Err(AppError::format(path, "vocabulary has duplicate or reserved tokens"));
    }
    Ok(vocab)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> AppResult<()> {
    atomic_write(path, vocab_to_string(vocab).as_bytes())
}

pub fn read_vocab(path: &Path) -> AppResult<Vocabulary> {
    parse_vocab(&read_to_string(path)?, path)
}
