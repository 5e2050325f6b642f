use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use super::cost::{cosine_cost, marginal_violation, uniform};
use super::hard::hard_match;
use super::hungarian::hungarian;
use super::ipot::{ipot, IpotParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cost assigned to a padding row or column in rectangular assignment.
pub const PAD_COST: f64 = 2.0;

/// Word vectors keyed by token.
#[derive(Clone, Debug, Default)]
pub struct Embeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("embeddings", format!("vector of length {} in a {}-d table", v.len(), self.dim)));
        }
        self.vectors.insert(token.into(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// One `token v1 ... vD` line per entry, space separated.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut out: Option<Embeddings> = None;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let v = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("bad number {f:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if v.is_empty() {
                return Err(bad("token without a vector".into()));
            }
            let table = out.get_or_insert_with(|| Embeddings::new(v.len()));
            table.insert(token, v).map_err(|e| bad(e.to_string()))?;
        }
        out.ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty embedding table".into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn matrix(&self, tokens: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            let v = self
                .get(t)
                .ok_or_else(|| Error::Invalid(format!("no embedding for token {t:?}")))?;
            data.extend_from_slice(v);
        }
        Tensor::matrix(tokens.len(), self.dim, data)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HardReport {
    pub matched: Vec<String>,
    pub unmatched_table: Vec<String>,
    pub unmatched_text: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssignedPair {
    pub table: Option<String>,
    pub text: Option<String>,
    pub cost: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HungarianReport {
    /// Side of the square problem after padding.
    pub size: usize,
    pub cost: f64,
    pub normalized_cost: f64,
    pub pairs: Vec<AssignedPair>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OtReport {
    pub distance: f64,
    pub marginal_violation: f64,
    pub params: IpotParams,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchReport {
    pub table_keywords: Vec<String>,
    pub text_keywords: Vec<String>,
    pub hard: HardReport,
    pub hungarian: HungarianReport,
    pub ot: OtReport,
}

/// Compares hard matching, padded Hungarian matching and IPOT on one pair of
/// keyword lists, using uniform weights and cosine costs.
pub fn match_report(
    table_keywords: &[String],
    text_keywords: &[String],
    embeddings: &Embeddings,
    params: IpotParams,
) -> Result<MatchReport> {
    if table_keywords.is_empty() || text_keywords.is_empty() {
        return Err(Error::Invalid("both keyword lists must be non-empty".into()));
    }
    let x = embeddings.matrix(table_keywords)?;
    let y = embeddings.matrix(text_keywords)?;
    let c = cosine_cost(&x, &y)?;
    let (n, m) = (table_keywords.len(), text_keywords.len());

    let hm = hard_match(table_keywords, text_keywords);
    let hard = HardReport {
        matched: hm.pairs.iter().map(|&(i, _)| table_keywords[i].clone()).collect(),
        unmatched_table: hm.unmatched_a.iter().map(|&i| table_keywords[i].clone()).collect(),
        unmatched_text: hm.unmatched_b.iter().map(|&j| text_keywords[j].clone()).collect(),
    };

    let k = n.max(m);
    let mut padded = vec![PAD_COST; k * k];
    for i in 0..n {
        for j in 0..m {
            padded[i * k + j] = c.data()[i * m + j];
        }
    }
    let assignment = hungarian(&Tensor::matrix(k, k, padded.clone())?)?;
    let pairs = assignment
        .perm
        .iter()
        .enumerate()
        .map(|(i, &j)| AssignedPair {
            table: table_keywords.get(i).cloned(),
            text: text_keywords.get(j).cloned(),
            cost: padded[i * k + j],
        })
        .collect();
    let hungarian = HungarianReport {
        size: k,
        cost: assignment.cost,
        normalized_cost: assignment.cost / k as f64,
        pairs,
    };

    let (mu, nu) = (uniform(n), uniform(m));
    let t = ipot(&c, &mu, &nu, params)?;
    let ot = OtReport {
        distance: t.distance,
        marginal_violation: marginal_violation(&t.plan, &mu, &nu),
        params,
    };
    Ok(MatchReport {
        table_keywords: table_keywords.to_vec(),
        text_keywords: text_keywords.to_vec(),
        hard,
        hungarian,
        ot,
    })
}
