use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::example::Example;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::table::{marker_token, tokenize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const UNK_TYPE: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<unk_type>"];

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Words shaped like `<...>` are kept out of the word section so a vocabulary
/// file can be split back into specials, markers and words.
fn looks_like_marker(token: &str) -> bool {
    token.len() > 2 && token.starts_with('<') && token.ends_with('>')
}

/// Dense token ids: specials first, then slot-type markers, then words by rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    n_markers: usize,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, n_markers: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            counts,
            index,
            n_markers,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_markers(&self) -> usize {
        self.n_markers
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_marker(&self, id: usize) -> bool {
        id == UNK_TYPE || (SPECIALS.len()..SPECIALS.len() + self.n_markers).contains(&id)
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn word_id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&id) if !self.is_marker(id) => id,
            _ => UNK,
        }
    }

    pub fn marker_id(&self, slot_type: &str) -> usize {
        self.get(&marker_token(slot_type)).unwrap_or(UNK_TYPE)
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.word_id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Space-joined tokens up to (excluding) the first `<eos>`, skipping `<bos>`/`<pad>`.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// File form: `token<TAB>count` per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            s.push_str(t);
            s.push('\t');
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the file form, used to pair checkpoints with vocabularies.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data { line, msg, .. } => Error::Data {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Data {
            path: "<vocab>".into(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(i + 1, "expected token<TAB>count".into()))?;
            let count = count
                .parse::<u64>()
                .map_err(|e| bad(i + 1, format!("bad count: {e}")))?;
            tokens.push(tok.to_string());
            counts.push(count);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(bad(i + 1, format!("expected special token {s}")));
            }
        }
        let n_markers = tokens[SPECIALS.len()..]
            .iter()
            .take_while(|t| looks_like_marker(t))
            .count();
        Self::from_parts(tokens, counts, n_markers)
    }
}

/// Builds a vocabulary of at most `cap` entries from table values and texts.
pub fn build_vocab(examples: &[Example], cap: usize) -> Result<Vocab> {
    let mut markers: BTreeMap<String, u64> = BTreeMap::new();
    let mut words: HashMap<String, u64> = HashMap::new();
    for ex in examples {
        for row in ex.table.rows() {
            *markers.entry(marker_token(&row.slot_type)).or_default() += 1;
            for w in row.value_tokens() {
                *words.entry(w).or_default() += 1;
            }
        }
        for w in tokenize(&ex.text) {
            *words.entry(w).or_default() += 1;
        }
    }
    let reserved = SPECIALS.len() + markers.len();
    if cap < reserved {
        return Err(Error::Config(format!(
            "vocabulary cap {cap} below {} specials + {} slot-type markers",
            SPECIALS.len(),
            markers.len()
        )));
    }
    let mut ranked: Vec<(String, u64)> = words
        .into_iter()
        .filter(|(w, _)| !looks_like_marker(w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - reserved);

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut counts = vec![0; SPECIALS.len()];
    let n_markers = markers.len();
    for (m, c) in markers {
        tokens.push(m);
        counts.push(c);
    }
    for (w, c) in ranked {
        tokens.push(w);
        counts.push(c);
    }
    Vocab::from_parts(tokens, counts, n_markers)
}
