//! Structured tables, their linearisation into token sequences, and keyword
//! extraction.

use std::collections::{BTreeSet, HashSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{self, Vocab};
use crate::error::{Error, Result};

/// Punctuation split off as standalone tokens.
const PUNCTUATION: [&str; 5] = ["--", ".", ",", "(", ")"];

/// Built-in stopword list used when no noun lexicon is supplied.
pub const STOPWORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by",
    "from", "as", "is", "was", "were", "are", "be", "been", "being", "he", "she", "it", "his",
    "her", "its", "they", "them", "their", "this", "that", "these", "those", "who", "which",
    "what", "has", "had", "have", "also", "not", "no", "than", "then", "there", "after", "before",
];

/// Lowercased whitespace tokenisation with `--`, `.`, `,`, `(`, `)` split off.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut rest = lower.as_str();
        let mut word = String::new();
        while !rest.is_empty() {
            if let Some(p) = PUNCTUATION.iter().find(|p| rest.starts_with(**p)) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push((*p).to_string());
                rest = &rest[p.len()..];
            } else {
                let ch = rest.chars().next().expect("non-empty");
                word.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn is_punctuation(token: &str) -> bool {
    PUNCTUATION.contains(&token)
}

/// Single marker token for a slot type: `date of birth` becomes `<date_of_birth>`.
pub fn marker_token(slot_type: &str) -> String {
    let joined: Vec<&str> = slot_type.split_whitespace().collect();
    format!("<{}>", joined.join("_"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub slot_type: String,
    pub slot_value: String,
}

impl Record {
    pub fn new(slot_type: impl Into<String>, slot_value: impl Into<String>) -> Self {
        Self {
            slot_type: slot_type.into(),
            slot_value: slot_value.into(),
        }
    }

    pub fn value_tokens(&self) -> Vec<String> {
        tokenize(&self.slot_value)
    }
}

/// Ordered (slot type, slot value) records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    rows: Vec<Record>,
}

impl Table {
    pub fn new(rows: Vec<Record>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("table has no rows".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.slot_type.trim().is_empty() {
                return Err(Error::Invalid(format!("row {i}: empty slot type")));
            }
            if tokenize(&r.slot_value).is_empty() {
                return Err(Error::Invalid(format!("row {i}: empty slot value")));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(t, v)| Record::new(t.as_ref(), v.as_ref()))
                .collect(),
        )
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Marker/value token strings and per-row spans, before vocabulary lookup.
    pub fn linearized_tokens(&self) -> (Vec<String>, Vec<SlotSpan>) {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let type_index = tokens.len();
            tokens.push(marker_token(&r.slot_type));
            let start = tokens.len();
            tokens.extend(r.value_tokens());
            spans.push(SlotSpan {
                type_index,
                values: start..tokens.len(),
            });
        }
        (tokens, spans)
    }

    /// Multiset of value tokens in row order.
    pub fn value_tokens(&self) -> Vec<String> {
        self.rows.iter().flat_map(Record::value_tokens).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub type_index: usize,
    pub values: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearizedTable {
    pub tokens: Vec<usize>,
    pub slot_spans: Vec<SlotSpan>,
}

/// `[<type_1>, v_1 tokens..., <type_2>, v_2 tokens..., ...]` as vocabulary ids.
pub fn linearize(table: &Table, vocab: &Vocab) -> LinearizedTable {
    let (strings, slot_spans) = table.linearized_tokens();
    let mut tokens = Vec::with_capacity(strings.len());
    for (row, span) in table.rows().iter().zip(&slot_spans) {
        tokens.push(vocab.marker_id(&row.slot_type));
        tokens.extend(strings[span.values.clone()].iter().map(|w| vocab.word_id(w)));
    }
    LinearizedTable { tokens, slot_spans }
}

/// Noun lexicon: one lowercase token per line, `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NounLexicon {
    words: HashSet<String>,
}

impl NounLexicon {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        Self {
            words: words.into_iter().map(|w| w.into().to_lowercase()).collect(),
        }
    }

    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().filter_map(|line| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then(|| line.to_string())
        }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Sorted words, for serialisation.
    pub fn sorted(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.words.iter().map(String::as_str).collect();
        w.sort_unstable();
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeywordSource {
    Table,
    Text,
}

/// Keyword positions within one sequence, with their token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeywordSet {
    pub positions: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl KeywordSet {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &p in &self.positions {
            m[p] = true;
        }
        m
    }
}

/// Text-side noun filter on a token string.
pub fn is_text_keyword(token: &str, lexicon: &NounLexicon) -> bool {
    if lexicon.is_empty() {
        !STOPWORDS.contains(&token) && !is_punctuation(token) && !vocab::is_special(token)
    } else {
        lexicon.contains(token)
    }
}

/// Key words of a sequence. Table sources only consider value tokens (never
/// slot-type markers), so `spans` is required for them.
pub fn extract_keywords(
    seq: &[usize],
    source: KeywordSource,
    lexicon: &NounLexicon,
    vocab: &Vocab,
    spans: Option<&[SlotSpan]>,
) -> Result<KeywordSet> {
    let mut set = KeywordSet::default();
    match source {
        KeywordSource::Table => {
            let spans = spans.ok_or_else(|| Error::Invalid("table keyword extraction needs slot spans".into()))?;
            for span in spans {
                for p in span.values.clone() {
                    let id = *seq
                        .get(p)
                        .ok_or_else(|| Error::Invalid(format!("slot span position {p} past sequence end")))?;
                    if lexicon.is_empty() || lexicon.contains(vocab.token(id)) {
                        set.positions.push(p);
                        set.tokens.push(id);
                    }
                }
            }
        }
        KeywordSource::Text => {
            for (p, &id) in seq.iter().enumerate() {
                if is_text_keyword(vocab.token(id), lexicon) {
                    set.positions.push(p);
                    set.tokens.push(id);
                }
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexicalMode {
    #[default]
    ValuesOnly,
    ValuesAndTypes,
}

/// Lowercased lexical items of a table (set semantics).
pub fn lexical_items(table: &Table, mode: LexicalMode) -> BTreeSet<String> {
    let mut items: BTreeSet<String> = table.value_tokens().into_iter().collect();
    if mode == LexicalMode::ValuesAndTypes {
        for r in table.rows() {
            for w in r.slot_type.split(|c: char| c.is_whitespace() || c == '_') {
                if !w.is_empty() {
                    items.insert(w.to_lowercase());
                }
            }
        }
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn willie() -> Table {
        Table::from_pairs(&[("Name_ID", "Willie Burden"), ("date of birth", "July 21 1951")]).unwrap()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("John Smith (born 1951), engineer -- retired."),
            ["john", "smith", "(", "born", "1951", ")", ",", "engineer", "--", "retired", "."]
        );
    }

    #[test]
    fn linearizes_with_one_marker_per_row() {
        let (tokens, spans) = willie().linearized_tokens();
        assert_eq!(
            tokens,
            ["<Name_ID>", "willie", "burden", "<date_of_birth>", "july", "21", "1951"]
        );
        assert_eq!(spans[0], SlotSpan { type_index: 0, values: 1..3 });
        assert_eq!(spans[1], SlotSpan { type_index: 3, values: 4..7 });
    }

    #[test]
    fn single_row_table() {
        let t = Table::from_pairs(&[("occupation", "engineer")]).unwrap();
        assert_eq!(t.linearized_tokens().0, ["<occupation>", "engineer"]);
    }

    #[test]
    fn empty_table_rejected() {
        assert!(Table::new(vec![]).is_err());
        assert!(Table::from_pairs(&[("", "x")]).is_err());
        assert!(Table::from_pairs(&[("a", "  ")]).is_err());
    }

    #[test]
    fn lexical_items_modes() {
        let t = Table::from_pairs(&[("name", "John Smith")]).unwrap();
        let v: Vec<String> = lexical_items(&t, LexicalMode::ValuesOnly).into_iter().collect();
        assert_eq!(v, ["john", "smith"]);
        let vt: Vec<String> = lexical_items(&t, LexicalMode::ValuesAndTypes).into_iter().collect();
        assert_eq!(vt, ["john", "name", "smith"]);
        let dup = Table::from_pairs(&[("a", "x"), ("b", "x")]).unwrap();
        assert_eq!(lexical_items(&dup, LexicalMode::ValuesOnly).len(), 1);
    }

    #[test]
    fn lexicon_parsing_skips_comments() {
        let lex = NounLexicon::parse("# nouns\nseattle\n\nWashington # state\n");
        assert_eq!(lex.sorted(), ["seattle", "washington"]);
    }
}
