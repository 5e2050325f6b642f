use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::table::{tokenize, Record, Table};

#[derive(Serialize, Deserialize)]
struct RawRecord {
    #[serde(rename = "type")]
    slot_type: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    table: Vec<RawRecord>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keywords: Option<Vec<String>>,
}

/// Table input for generation: the reference text is optional.
#[derive(Deserialize)]
struct RawTable {
    table: Vec<RawRecord>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub table: Table,
    pub text: String,
    /// Gold nouns, if annotated.
    pub keywords: Option<Vec<String>>,
}

impl Example {
    pub fn new(table: Table, text: impl Into<String>, keywords: Option<Vec<String>>) -> Result<Self> {
        let ex = Self {
            table,
            text: text.into(),
            keywords,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        let text_tokens = tokenize(&self.text);
        if text_tokens.is_empty() {
            return Err(Error::Invalid("empty text".into()));
        }
        if let Some(kws) = &self.keywords {
            let values = self.table.value_tokens();
            for kw in kws {
                let kt = tokenize(kw);
                let found = !kt.is_empty()
                    && (contains_run(&text_tokens, &kt) || contains_run(&values, &kt));
                if !found {
                    return Err(Error::Invalid(format!("keyword {kw:?} not in text or table")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        let raw = RawExample {
            table: raw_rows(&self.table),
            text: self.text.clone(),
            keywords: self.keywords.clone(),
        };
        serde_json::to_string(&raw).expect("plain strings serialise")
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn raw_rows(table: &Table) -> Vec<RawRecord> {
    table
        .rows()
        .iter()
        .map(|r| RawRecord {
            slot_type: r.slot_type.clone(),
            value: r.slot_value.clone(),
        })
        .collect()
}

fn to_table(rows: Vec<RawRecord>) -> Result<Table> {
    Table::new(rows.into_iter().map(|r| Record::new(r.slot_type, r.value)).collect())
}

fn for_each_line<T>(path: &Path, mut parse: impl FnMut(&str) -> Result<T>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One example per line; blank lines are ignored, anything else malformed is an error.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    for_each_line(path, |line| {
        let raw: RawExample = serde_json::from_str(line)?;
        Example::new(to_table(raw.table)?, raw.text, raw.keywords)
    })
}

/// Tables for generation, with their reference text when the line has one.
pub fn load_tables_jsonl(path: &Path) -> Result<Vec<(Table, Option<String>)>> {
    for_each_line(path, |line| {
        let raw: RawTable = serde_json::from_str(line)?;
        Ok((to_table(raw.table)?, raw.text))
    })
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&ex.to_json_line());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}
