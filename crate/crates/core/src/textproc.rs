//! Tokenization, dictionary entity linking, and document assembly.
//!
//! Documents are the concatenation of a question and one passage. Before
//! every entity mention a marker token is inserted (`<q_ent>` on the
//! question side, `<p_ent>` on the passage side); the marker positions are
//! where graph output is later fused into the encoder, and the span indices
//! say which token rows feed each graph node.
//!
//! Tokenization is deliberately plain: lowercase, split on whitespace, map
//! through a fixed vocabulary with an unknown-word id. Vocabulary files hold
//! one non-reserved token per line; the six reserved tokens always occupy
//! ids 0 through 5.

use crate::kgstore::{EntityId, KnowledgeGraph};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Marker inserted before question-side entity mentions.
pub const Q_ENT: u32 = 4;
/// Marker inserted before passage-side entity mentions.
pub const P_ENT: u32 = 5;

pub const RESERVED_TOKENS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<q_ent>", "<p_ent>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("mentions overlap on the {side} side: ({0}..{1}) and ({2}..{3})", .spans.0.0, .spans.0.1, .spans.1.0, .spans.1.1)]
    OverlappingMentions {
        side: &'static str,
        spans: ((usize, usize), (usize, usize)),
    },
    #[error("mention span {start}..{end} is invalid for a {len}-token sequence")]
    InvalidMention {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("lexicon {path}, line {line}: {msg}")]
    LexiconParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("surface form {surface:?} maps to two different entities")]
    AmbiguousSurface { surface: String },
    #[error("surface form {surface:?} contains out-of-vocabulary words")]
    SurfaceNotTokenizable { surface: String },
    #[error("lexicon {path}, line {line}: entity label {label:?} is not in the knowledge graph")]
    UnknownEntityLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset {path}, line {line}: {msg}")]
    DatasetParse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Token table. Ids 0..5 are reserved; real words get ids from 6 upward in
/// the order supplied. Words are stored lowercased; duplicates collapse to
/// their first id.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || token_to_id.contains_key(&w) {
                continue;
            }
            let id = id_to_token.len() as u32;
            id_to_token.push(w.clone());
            token_to_id.insert(w, id);
        }
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Parse a vocabulary file: one non-reserved token per line.
    pub fn from_text(text: &str) -> Self {
        Self::new(text.lines().map(|l| l.trim()).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_text(&text))
    }

    /// Serialize the non-reserved part, one token per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token[RESERVED_TOKENS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }
}

/// Lowercase, split on whitespace, map through the vocabulary.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| vocab.id_or_unk(w))
        .collect()
}

/// Decode ids back to a space-joined string (answers are compared as text).
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// An entity mention found in a token sequence: `start..end`, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

/// Entity dictionary keyed by token-id sequences, for exact-match linking.
#[derive(Debug, Default, Clone)]
pub struct TokenLexicon {
    map: HashMap<Vec<u32>, EntityId>,
    max_len: usize,
}

impl TokenLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a surface form. One surface maps to one entity; a second
    /// different target is an error, a repeat of the same target is fine.
    pub fn insert(&mut self, surface_tokens: Vec<u32>, entity: EntityId) -> Result<(), TextError> {
        if surface_tokens.is_empty() {
            return Err(TextError::SurfaceNotTokenizable {
                surface: String::new(),
            });
        }
        if surface_tokens.contains(&UNK) {
            return Err(TextError::SurfaceNotTokenizable {
                surface: format!("{surface_tokens:?}"),
            });
        }
        match self.map.get(&surface_tokens) {
            Some(&existing) if existing != entity => {
                return Err(TextError::AmbiguousSurface {
                    surface: format!("{surface_tokens:?}"),
                })
            }
            _ => {}
        }
        self.max_len = self.max_len.max(surface_tokens.len());
        self.map.insert(surface_tokens, entity);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Entity whose surface form is exactly this token sequence.
    pub fn lookup(&self, tokens: &[u32]) -> Option<EntityId> {
        self.map.get(tokens).copied()
    }

    /// Build from (surface form, entity label) pairs, tokenizing surfaces
    /// and resolving labels against the knowledge graph.
    pub fn build(
        entries: &[(String, String)],
        vocab: &Vocab,
        kg: &KnowledgeGraph,
    ) -> Result<Self, TextError> {
        let mut lex = Self::new();
        for (line_no, (surface, label)) in entries.iter().enumerate() {
            let tokens = tokenize(surface, vocab);
            if tokens.is_empty() || tokens.contains(&UNK) {
                return Err(TextError::SurfaceNotTokenizable {
                    surface: surface.clone(),
                });
            }
            let entity = kg
                .lookup_entity(label)
                .ok_or_else(|| TextError::UnknownEntityLabel {
                    path: "lexicon".to_string(),
                    line: line_no + 1,
                    label: label.clone(),
                })?;
            lex.insert(tokens, entity)?;
        }
        Ok(lex)
    }
}

/// Parse a lexicon file: `surface-form<TAB>entity-label` per line, UTF-8,
/// blank lines and `#` comments ignored.
pub fn parse_lexicon(text: &str, source_name: &str) -> Result<Vec<(String, String)>, TextError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(TextError::LexiconParse {
                path: source_name.to_string(),
                line: i + 1,
                msg: "expected surface<TAB>entity-label".to_string(),
            });
        }
        out.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    Ok(out)
}

pub fn load_lexicon(path: &Path) -> Result<Vec<(String, String)>, TextError> {
    let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_lexicon(&text, &path.display().to_string())
}

/// Greedy longest-match scan, left to right, non-overlapping. At each
/// position the longest dictionary hit wins; the scan resumes after it.
pub fn link_mentions(tokens: &[u32], lexicon: &TokenLexicon) -> Vec<Mention> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = false;
        let longest = lexicon.max_len.min(tokens.len() - i);
        for l in (1..=longest).rev() {
            if let Some(&entity) = lexicon.map.get(&tokens[i..i + l]) {
                out.push(Mention {
                    entity,
                    start: i,
                    end: i + l,
                });
                i += l;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Question,
    Passage,
}

/// A mention after marker insertion, in document coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MentionSpan {
    pub entity: EntityId,
    pub side: Side,
    /// First mention token (exclusive of the marker).
    pub start: usize,
    /// One past the last mention token.
    pub end: usize,
    /// Position of the marker token; always `start - 1`.
    pub special_index: usize,
}

/// Question plus passage with entity markers inserted.
#[derive(Debug, Clone)]
pub struct AnnotatedDocument {
    pub tokens: Vec<u32>,
    /// Length of the question section after insertion; the passage section
    /// starts here.
    pub question_len: usize,
    pub spans: Vec<MentionSpan>,
}

impl AnnotatedDocument {
    /// I_s: span start indices, aligned with `spans`.
    pub fn starts(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }

    /// I_e: span end indices (exclusive), aligned with `spans`.
    pub fn ends(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.end).collect()
    }

    /// I_t: marker token indices, aligned with `spans`.
    pub fn special_positions(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.special_index).collect()
    }

    /// Cap the document at `max_len` tokens, dropping spans whose end falls
    /// beyond the cut.
    pub fn truncate(&mut self, max_len: usize) {
        if self.tokens.len() <= max_len {
            return;
        }
        self.tokens.truncate(max_len);
        self.spans.retain(|s| s.end <= max_len);
        self.question_len = self.question_len.min(max_len);
    }
}

fn check_mentions(mentions: &[Mention], len: usize, side: &'static str) -> Result<(), TextError> {
    let mut prev_end = 0;
    let mut prev: Option<&Mention> = None;
    for m in mentions {
        if m.start >= m.end || m.end > len {
            return Err(TextError::InvalidMention {
                start: m.start,
                end: m.end,
                len,
            });
        }
        if m.start < prev_end {
            let p = prev.expect("overlap implies a predecessor");
            return Err(TextError::OverlappingMentions {
                side,
                spans: ((p.start, p.end), (m.start, m.end)),
            });
        }
        prev_end = m.end;
        prev = Some(m);
    }
    Ok(())
}

/// Assemble `question ++ passage` with one marker inserted immediately
/// before each mention occurrence, re-basing all span indices to the
/// post-insertion positions. Mentions must be sorted by start and
/// non-overlapping within their side.
pub fn annotate(
    question_tokens: &[u32],
    passage_tokens: &[u32],
    question_mentions: &[Mention],
    passage_mentions: &[Mention],
) -> Result<AnnotatedDocument, TextError> {
    check_mentions(question_mentions, question_tokens.len(), "question")?;
    check_mentions(passage_mentions, passage_tokens.len(), "passage")?;

    let mut tokens =
        Vec::with_capacity(question_tokens.len() + passage_tokens.len() + question_mentions.len() + passage_mentions.len());
    let mut spans = Vec::with_capacity(question_mentions.len() + passage_mentions.len());

    let emit_side = |raw: &[u32], mentions: &[Mention], side: Side, tokens: &mut Vec<u32>, spans: &mut Vec<MentionSpan>| {
        let marker = match side {
            Side::Question => Q_ENT,
            Side::Passage => P_ENT,
        };
        let mut cursor = 0;
        for m in mentions {
            tokens.extend_from_slice(&raw[cursor..m.start]);
            let special_index = tokens.len();
            tokens.push(marker);
            let start = tokens.len();
            tokens.extend_from_slice(&raw[m.start..m.end]);
            spans.push(MentionSpan {
                entity: m.entity,
                side,
                start,
                end: tokens.len(),
                special_index,
            });
            cursor = m.end;
        }
        tokens.extend_from_slice(&raw[cursor..]);
    };

    emit_side(question_tokens, question_mentions, Side::Question, &mut tokens, &mut spans);
    let question_len = tokens.len();
    emit_side(passage_tokens, passage_mentions, Side::Passage, &mut tokens, &mut spans);

    Ok(AnnotatedDocument {
        tokens,
        question_len,
        spans,
    })
}

/// One QA example as stored in dataset files. The optional flags are
/// generator annotations carried through for reporting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QaExample {
    pub question: String,
    pub answers: Vec<String>,
    pub passages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminative: Option<bool>,
}

/// Read a JSON-lines dataset file.
pub fn read_examples(path: &Path) -> Result<Vec<QaExample>, TextError> {
    let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|e| TextError::DatasetParse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Write a JSON-lines dataset file.
pub fn write_examples(path: &Path, examples: &[QaExample]) -> Result<(), TextError> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}
