//! Closed word-level vocabulary with disjoint sub-vocabularies.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Special,
    Subject,
    Relation,
    Object,
    Filler,
}

/// Token ranges of each sub-vocabulary. Ranges are contiguous and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub special: Range<usize>,
    pub subject: Range<usize>,
    pub relation: Range<usize>,
    pub object: Range<usize>,
    pub filler: Range<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    layout: VocabLayout,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    layout: VocabLayout,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_parts(r.tokens, r.layout)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            layout: v.layout,
        }
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.layout == other.layout
    }
}

impl Vocab {
    /// Builds the standard layout: specials, `s###`, `r##`, `o###`, `f###`.
    pub fn build(
        n_subject_tokens: usize,
        n_relations: usize,
        n_objects: usize,
        n_fillers: usize,
    ) -> Self {
        let mut tokens = vec![PAD.to_string(), EOS.to_string()];
        let special = 0..tokens.len();
        let start = tokens.len();
        tokens.extend((0..n_subject_tokens).map(|i| format!("s{i:03}")));
        let subject = start..tokens.len();
        let start = tokens.len();
        tokens.extend((0..n_relations).map(|i| format!("r{i:02}")));
        let relation = start..tokens.len();
        let start = tokens.len();
        tokens.extend((0..n_objects).map(|i| format!("o{i:03}")));
        let object = start..tokens.len();
        let start = tokens.len();
        tokens.extend((0..n_fillers).map(|i| format!("f{i:03}")));
        let filler = start..tokens.len();
        Self::from_parts(
            tokens,
            VocabLayout {
                special,
                subject,
                relation,
                object,
                filler,
            },
        )
    }

    fn from_parts(tokens: Vec<String>, layout: VocabLayout) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            layout,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn kind(&self, id: usize) -> Option<TokenKind> {
        let l = &self.layout;
        [
            (&l.special, TokenKind::Special),
            (&l.subject, TokenKind::Subject),
            (&l.relation, TokenKind::Relation),
            (&l.object, TokenKind::Object),
            (&l.filler, TokenKind::Filler),
        ]
        .into_iter()
        .find(|(r, _)| r.contains(&id))
        .map(|(_, k)| k)
    }

    pub fn objects(&self) -> Range<usize> {
        self.layout.object.clone()
    }

    pub fn relations(&self) -> Range<usize> {
        self.layout.relation.clone()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
