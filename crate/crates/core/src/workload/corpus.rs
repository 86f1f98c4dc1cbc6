//! Line-delimited chat corpus: one conversation per line,
//! `{"session_id": .., "messages": [{"role": .., "tokens": .., "words": ..}]}`.

use super::{
    words_for, PriorityClass, SessionId, SessionScript, Turn, UserProfile, WorkloadError,
    DEFAULT_MODEL_ID,
};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMessage {
    pub role: String,
    pub tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub session_id: String,
    pub messages: Vec<CorpusMessage>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    User,
    Assistant,
}

fn role(s: &str) -> Option<Role> {
    match s.to_ascii_lowercase().as_str() {
        "user" | "human" => Some(Role::User),
        "assistant" | "gpt" | "chatgpt" | "bard" | "model" => Some(Role::Assistant),
        _ => None,
    }
}

pub fn load_chat_corpus(
    path: &Path,
    max_sessions: usize,
    words_per_token: f64,
) -> Result<Vec<SessionScript>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_chat_corpus(file, max_sessions, words_per_token)
}

/// Parses a corpus stream. Word counts come from the record when given and
/// are otherwise derived from the token count. A trailing user message with
/// no reply is dropped; a record left without any complete turn is skipped.
pub fn parse_chat_corpus(
    reader: impl Read,
    max_sessions: usize,
    words_per_token: f64,
) -> Result<Vec<SessionScript>, WorkloadError> {
    let mut out = Vec::new();
    let mut index = 0usize;
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        if out.len() >= max_sessions {
            break;
        }
        let line = line.map_err(|source| WorkloadError::Io {
            path: "<corpus>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| WorkloadError::MalformedRecord {
            index,
            line: lineno + 1,
            reason,
        };
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if let Some(script) = record_to_script(&record, words_per_token).map_err(malformed)? {
            out.push(script);
        }
        index += 1;
    }
    if out.is_empty() {
        return Err(WorkloadError::EmptyCorpus);
    }
    Ok(out)
}

fn record_to_script(
    record: &CorpusRecord,
    words_per_token: f64,
) -> Result<Option<SessionScript>, String> {
    let words = |m: &CorpusMessage| m.words.unwrap_or_else(|| words_for(m.tokens, words_per_token));
    let mut turns = Vec::new();
    let mut msgs = record.messages.iter().peekable();
    while let Some(user) = msgs.next() {
        match role(&user.role) {
            Some(Role::User) => {}
            Some(Role::Assistant) => {
                return Err(format!("assistant message where a user message was expected"))
            }
            None => return Err(format!("unknown role `{}`", user.role)),
        }
        let Some(reply) = msgs.next() else {
            break;
        };
        match role(&reply.role) {
            Some(Role::Assistant) => {}
            Some(Role::User) => return Err("two consecutive user messages".into()),
            None => return Err(format!("unknown role `{}`", reply.role)),
        }
        if user.tokens == 0 {
            return Err("user message with zero tokens".into());
        }
        if reply.tokens == 0 {
            return Err("assistant message with zero tokens".into());
        }
        turns.push(Turn {
            prompt_tokens: user.tokens,
            response_tokens: reply.tokens,
            prompt_words: words(user),
            response_words: words(reply),
        });
    }
    if turns.is_empty() {
        return Ok(None);
    }
    Ok(Some(SessionScript {
        session_id: SessionId::new(record.session_id.clone()),
        model_id: DEFAULT_MODEL_ID.into(),
        turns,
        user_profile: UserProfile::default(),
        priority_class: PriorityClass::Normal,
    }))
}

/// Writes scripts back out in corpus form.
pub fn write_corpus(scripts: &[SessionScript], mut w: impl Write) -> std::io::Result<()> {
    for s in scripts {
        let mut messages = Vec::with_capacity(s.turns.len() * 2);
        for t in &s.turns {
            messages.push(CorpusMessage {
                role: "user".into(),
                tokens: t.prompt_tokens,
                words: Some(t.prompt_words),
            });
            messages.push(CorpusMessage {
                role: "assistant".into(),
                tokens: t.response_tokens,
                words: Some(t.response_words),
            });
        }
        let rec = CorpusRecord {
            session_id: s.session_id.0.clone(),
            messages,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_turn_record_round_trips() {
        let line = r#"{"session_id":"x","messages":[{"role":"user","tokens":100},{"role":"assistant","tokens":100},{"role":"human","tokens":50},{"role":"gpt","tokens":80},{"role":"user","tokens":30},{"role":"assistant","tokens":60}]}"#;
        let scripts = parse_chat_corpus(line.as_bytes(), 10, 0.75).unwrap();
        assert_eq!(scripts.len(), 1);
        let counts: Vec<_> = scripts[0]
            .turns
            .iter()
            .map(|t| (t.prompt_tokens, t.response_tokens))
            .collect();
        assert_eq!(counts, vec![(100, 100), (50, 80), (30, 60)]);
        assert_eq!(scripts[0].turns[0].prompt_words, 75);
    }

    #[test]
    fn trailing_user_message_dropped() {
        let lines = concat!(
            r#"{"session_id":"a","messages":[{"role":"user","tokens":4},{"role":"assistant","tokens":9},{"role":"user","tokens":3}]}"#,
            "\n",
            r#"{"session_id":"b","messages":[{"role":"user","tokens":4}]}"#,
            "\n"
        );
        let scripts = parse_chat_corpus(lines.as_bytes(), 10, 0.75).unwrap();
        assert_eq!(scripts.len(), 1);
        assert_eq!(scripts[0].turns.len(), 1);
    }

    #[test]
    fn malformed_record_names_index() {
        let lines = concat!(
            r#"{"session_id":"a","messages":[{"role":"user","tokens":4},{"role":"assistant","tokens":9}]}"#,
            "\n",
            r#"{"session_id":"b","messages":[{"role":"user","tokens":4},{"role":"user","tokens":9}]}"#,
            "\n"
        );
        match parse_chat_corpus(lines.as_bytes(), 10, 0.75) {
            Err(WorkloadError::MalformedRecord { index, line, .. }) => {
                assert_eq!((index, line), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_chat_corpus("".as_bytes(), 10, 0.75),
            Err(WorkloadError::EmptyCorpus)
        ));
    }

    #[test]
    fn max_sessions_caps_output() {
        let mut buf = Vec::new();
        for i in 0..5 {
            buf.extend_from_slice(
                format!(r#"{{"session_id":"s{i}","messages":[{{"role":"user","tokens":1}},{{"role":"assistant","tokens":1}}]}}"#)
                    .as_bytes(),
            );
            buf.push(b'\n');
        }
        assert_eq!(parse_chat_corpus(buf.as_slice(), 3, 0.75).unwrap().len(), 3);
    }
}
