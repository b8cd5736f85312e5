//! Reader for the Cornell movie-dialog distribution files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::pairs::{name_token, Utterance};
use crate::error::{Error, Result};

pub const SEPARATOR: &str = " +++$+++ ";
pub const LINES_FILE: &str = "movie_lines.txt";
pub const CONVERSATIONS_FILE: &str = "movie_conversations.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CornellLine {
    pub id: String,
    pub character_id: String,
    pub movie_id: String,
    pub character: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CornellConversation {
    pub movie_id: String,
    pub line_ids: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct CornellCorpus {
    pub lines: HashMap<String, CornellLine>,
    pub conversations: Vec<CornellConversation>,
}

/// The distribution is Latin-1 encoded; every byte maps to the code point
/// of the same value.
pub fn decode_latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

fn fields(line: &str, n: usize, file: &str, lineno: usize) -> Result<Vec<String>> {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut parts: Vec<String> = line.splitn(n, SEPARATOR).map(str::to_string).collect();
    // An empty final field leaves the separator without its trailing space.
    if parts.len() == n - 1 {
        if let Some(last) = parts.last_mut() {
            if let Some(stripped) = last.strip_suffix(SEPARATOR.trim_end()) {
                *last = stripped.to_string();
                parts.push(String::new());
            }
        }
    }
    if parts.len() != n {
        return Err(Error::Format(format!(
            "{file}:{lineno}: expected {n} fields, found {}",
            parts.len()
        )));
    }
    Ok(parts)
}

pub fn parse_lines(text: &str) -> Result<HashMap<String, CornellLine>> {
    let mut out = HashMap::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let f = fields(line, 5, LINES_FILE, i + 1)?;
        let entry = CornellLine {
            id: f[0].trim().to_string(),
            character_id: f[1].trim().to_string(),
            movie_id: f[2].trim().to_string(),
            character: f[3].trim().to_string(),
            text: f[4].clone(),
        };
        out.insert(entry.id.clone(), entry);
    }
    Ok(out)
}

pub fn parse_conversations(text: &str) -> Result<Vec<CornellConversation>> {
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let f = fields(line, 4, CONVERSATIONS_FILE, i + 1)?;
        let list = f[3].trim();
        let inner = list
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{CONVERSATIONS_FILE}:{}: malformed id list {list:?}",
                    i + 1
                ))
            })?;
        let line_ids = inner
            .split(',')
            .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
            .filter(|s| !s.is_empty())
            .collect();
        out.push(CornellConversation {
            movie_id: f[2].trim().to_string(),
            line_ids,
        });
    }
    Ok(out)
}

impl CornellCorpus {
    pub fn parse(lines: &str, conversations: &str) -> Result<Self> {
        Ok(Self {
            lines: parse_lines(lines)?,
            conversations: parse_conversations(conversations)?,
        })
    }

    /// Reads `movie_lines.txt` and `movie_conversations.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let lines = decode_latin1(&fs::read(dir.join(LINES_FILE))?);
        let convs = decode_latin1(&fs::read(dir.join(CONVERSATIONS_FILE))?);
        Self::parse(&lines, &convs)
    }

    /// Conversation `index` as utterances, speakers set to name tokens.
    pub fn utterances(&self, index: usize) -> Result<Vec<Utterance>> {
        let conv = &self.conversations[index];
        conv.line_ids
            .iter()
            .map(|id| {
                let line = self.lines.get(id).ok_or_else(|| {
                    Error::Format(format!("conversation {index} references unknown line {id}"))
                })?;
                let speaker = name_token(&line.character, &line.movie_id);
                Ok(Utterance::with_speaker(
                    &line.text,
                    speaker,
                    Some(line.movie_id.clone()),
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINES: &str = "L1 +++$+++ u0 +++$+++ m0 +++$+++ BIANCA +++$+++ They do not!\n\
                         L2 +++$+++ u2 +++$+++ m0 +++$+++ CAMERON +++$+++ They do to!\n\
                         L3 +++$+++ u2 +++$+++ m0 +++$+++ CAMERON +++$+++\n";
    const CONVS: &str = "u0 +++$+++ u2 +++$+++ m0 +++$+++ ['L1', 'L2', 'L3']\n";

    #[test]
    fn parses_fields_and_lists() {
        let c = CornellCorpus::parse(LINES, CONVS).unwrap();
        assert_eq!(c.lines["L2"].text, "They do to!");
        assert_eq!(c.lines["L3"].text, "");
        assert_eq!(c.conversations[0].line_ids, ["L1", "L2", "L3"]);
        let u = c.utterances(0).unwrap();
        assert_eq!(u[0].speaker.as_deref(), Some("BIANCA_m0"));
        assert_eq!(u[1].tokens, ["they", "do", "to", "!"]);
    }

    #[test]
    fn malformed_lines_name_their_position() {
        let err = parse_lines("L1 +++$+++ u0\n").unwrap_err();
        assert!(err.to_string().contains("movie_lines.txt:1"), "{err}");
        assert!(parse_conversations("a +++$+++ b +++$+++ m0 +++$+++ L1\n").is_err());
    }

    #[test]
    fn latin1_bytes_decode_to_code_points() {
        assert_eq!(decode_latin1(&[b'c', 0xe9]), "c\u{e9}");
    }
}
