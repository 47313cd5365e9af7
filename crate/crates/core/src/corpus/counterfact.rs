//! CounterFact-format record import and export.
//!
//! Accepts a JSON array or line-delimited records. Both the flat form
//! `{prompt, subject, target_true, target_new}` and the upstream nested form
//! `{case_id, requested_rewrite: {...}}` are recognised; targets may be plain
//! strings or `{"str": ...}` objects.

use std::cell::Cell;
use std::fmt;

use serde::de::{DeserializeSeed, SeqAccess, Visitor};
use serde_json::{json, Value};

use super::{EditRequest, FactTriple, TokenKind, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub accepted: Vec<EditRequest>,
    pub rejected: Vec<Rejection>,
}

pub fn import_counterfact(text: &str, vocab: &Vocab) -> Result<ImportReport> {
    let records = parse_records(text)?;
    let mut report = ImportReport::default();
    for (index, record) in records.iter().enumerate() {
        match convert(index, record, vocab)? {
            Ok(req) => report.accepted.push(req),
            Err(reason) => report.rejected.push(Rejection { index, reason }),
        }
    }
    Ok(report)
}

/// Renders requests in the nested upstream layout.
pub fn export_counterfact(requests: &[EditRequest], vocab: &Vocab) -> Vec<Value> {
    requests
        .iter()
        .map(|r| {
            let subject = vocab.decode(&r.fact.subject);
            let relation = vocab.token(r.fact.relation);
            let prompt = r
                .fact
                .prompt_template
                .split_whitespace()
                .map(|w| match w {
                    "{s}" => "{}",
                    "{r}" => relation,
                    other => other,
                })
                .collect::<Vec<_>>()
                .join(" ");
            json!({
                "case_id": r.case_id,
                "requested_rewrite": {
                    "prompt": prompt,
                    "subject": subject,
                    "relation_id": relation,
                    "target_true": { "str": vocab.token(r.fact.object) },
                    "target_new": { "str": vocab.token(r.new_object) },
                }
            })
        })
        .collect()
}

fn parse_records(text: &str) -> Result<Vec<Value>> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        let count = Cell::new(0usize);
        let mut de = serde_json::Deserializer::from_str(trimmed);
        let out = serde::Deserializer::deserialize_seq(&mut de, CountingSeq(&count)).map_err(|e| {
            Error::CounterFactParse {
                index: count.get(),
                message: e.to_string(),
            }
        })?;
        de.end().map_err(|e| Error::CounterFactParse {
            index: out.len(),
            message: e.to_string(),
        })?;
        return Ok(out);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(index, line)| {
            serde_json::from_str(line).map_err(|e| Error::CounterFactParse {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Deserializes a sequence of values while tracking how many were read.
struct CountingSeq<'a>(&'a Cell<usize>);

impl<'de> Visitor<'de> for CountingSeq<'_> {
    type Value = Vec<Value>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an array of CounterFact records")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Vec<Value>, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element_seed(std::marker::PhantomData::<Value>)? {
            out.push(v);
            self.0.set(out.len());
        }
        Ok(out)
    }
}

impl<'de> DeserializeSeed<'de> for CountingSeq<'_> {
    type Value = Vec<Value>;
    fn deserialize<D: serde::Deserializer<'de>>(self, d: D) -> std::result::Result<Vec<Value>, D::Error> {
        d.deserialize_seq(self)
    }
}

fn target_str(v: Option<&Value>) -> Option<&str> {
    match v? {
        Value::String(s) => Some(s),
        Value::Object(o) => o.get("str").and_then(Value::as_str),
        _ => None,
    }
}

/// Outer `Err` is a malformed record; inner `Err` is a rejection reason.
fn convert(index: usize, record: &Value, vocab: &Vocab) -> Result<std::result::Result<EditRequest, String>> {
    let malformed = |m: &str| Error::CounterFactParse {
        index,
        message: m.to_string(),
    };
    let body = record.get("requested_rewrite").unwrap_or(record);
    if !body.is_object() {
        return Err(malformed("record is not a JSON object"));
    }
    let prompt = body
        .get("prompt")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `prompt`"))?;
    let subject = body
        .get("subject")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `subject`"))?;
    let target_true =
        target_str(body.get("target_true")).ok_or_else(|| malformed("missing field `target_true`"))?;
    let target_new =
        target_str(body.get("target_new")).ok_or_else(|| malformed("missing field `target_new`"))?;
    let case_id = record
        .get("case_id")
        .and_then(Value::as_u64)
        .map(|c| c as usize)
        .unwrap_or(index);

    let object = |s: &str| -> std::result::Result<usize, String> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            [] => Err("empty object".into()),
            [w] => {
                let id = vocab.id(w).ok_or_else(|| format!("unknown object token {w:?}"))?;
                if vocab.kind(id) != Some(TokenKind::Object) {
                    return Err(format!("{w:?} is not an object token"));
                }
                Ok(id)
            }
            _ => Err("multi-token object".into()),
        }
    };
    let old = match object(target_true) {
        Ok(o) => o,
        Err(r) => return Ok(Err(r)),
    };
    let new = match object(target_new) {
        Ok(o) => o,
        Err(r) => return Ok(Err(r)),
    };
    if old == new {
        return Ok(Err("target_new equals target_true".into()));
    }

    let mut subject_ids = Vec::new();
    for w in subject.split_whitespace() {
        match vocab.id(w) {
            Some(id) if vocab.kind(id) == Some(TokenKind::Subject) => subject_ids.push(id),
            _ => return Ok(Err(format!("subject token {w:?} not in subject vocabulary"))),
        }
    }
    if subject_ids.is_empty() {
        return Ok(Err("empty subject".into()));
    }

    let mut relation = None;
    let mut template = Vec::new();
    let mut has_slot = false;
    for w in prompt.split_whitespace() {
        if w == "{}" {
            has_slot = true;
            template.push("{s}".to_string());
            continue;
        }
        match vocab.id(w) {
            Some(id) if vocab.kind(id) == Some(TokenKind::Relation) => {
                if relation.replace(id).is_some() {
                    return Ok(Err("prompt has more than one relation token".into()));
                }
                template.push("{r}".to_string());
            }
            Some(_) => template.push(w.to_string()),
            None => return Ok(Err(format!("prompt token {w:?} not in vocabulary"))),
        }
    }
    if !has_slot {
        return Ok(Err("prompt has no `{}` subject slot".into()));
    }
    let Some(relation) = relation else {
        return Ok(Err("prompt has no relation token".into()));
    };

    Ok(Ok(EditRequest {
        case_id,
        fact: FactTriple {
            id: case_id,
            subject: subject_ids,
            relation,
            object: old,
            prompt_template: template.join(" "),
        },
        new_object: new,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(4, 2, 4, 8)
    }

    #[test]
    fn happy_path_flat_record() {
        let text = r#"[{"prompt": "{} r01", "subject": "s001", "target_true": "o000", "target_new": {"str": "o002"}}]"#;
        let rep = import_counterfact(text, &vocab()).unwrap();
        assert_eq!(rep.accepted.len(), 1);
        assert!(rep.rejected.is_empty());
        let r = &rep.accepted[0];
        assert_eq!(r.fact.prompt_template, "{s} {r}");
        assert_eq!(vocab().token(r.new_object), "o002");
    }

    #[test]
    fn multi_token_object_rejected() {
        let text = r#"{"prompt": "{} r01", "subject": "s001", "target_true": "o000 o001", "target_new": "o002"}"#;
        let rep = import_counterfact(text, &vocab()).unwrap();
        assert!(rep.accepted.is_empty());
        assert_eq!(rep.rejected[0].reason, "multi-token object");
    }

    #[test]
    fn empty_stream() {
        let rep = import_counterfact("", &vocab()).unwrap();
        assert_eq!(rep, ImportReport::default());
        let rep = import_counterfact("  \n ", &vocab()).unwrap();
        assert!(rep.accepted.is_empty() && rep.rejected.is_empty());
    }

    #[test]
    fn malformed_json_reports_index() {
        let good = r#"{"prompt": "{} r01", "subject": "s001", "target_true": "o000", "target_new": "o002"}"#;
        let text = format!("{good}\n{good}\n{{not json\n");
        match import_counterfact(&text, &vocab()) {
            Err(Error::CounterFactParse { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("[{good}, {good}, {{\"prompt\": ]");
        match import_counterfact(&text, &vocab()) {
            Err(Error::CounterFactParse { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_then_import_is_lossless() {
        let v = vocab();
        let text = r#"[{"case_id": 7, "requested_rewrite": {"prompt": "f001 {} r00", "subject": "s000 s003", "target_true": {"str": "o001"}, "target_new": {"str": "o003"}}}]"#;
        let first = import_counterfact(text, &v).unwrap().accepted;
        assert_eq!(first.len(), 1);
        let exported = serde_json::to_string(&export_counterfact(&first, &v)).unwrap();
        let second = import_counterfact(&exported, &v).unwrap().accepted;
        assert_eq!(first, second);
        assert_eq!(second[0].case_id, 7);
    }
}
