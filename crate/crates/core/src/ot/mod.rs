//! Matching solvers over keyword embeddings.

mod cost;
mod exact;
mod hard;
mod hungarian;
mod ipot;
mod report;

pub use cost::{cosine_cost, marginal_violation, transport_cost, uniform};
pub use exact::{exact_ot, EXACT_MAX_DIM};
pub use hard::{hard_match, HardMatch};
pub use hungarian::{hungarian, Assignment};
pub use ipot::{ipot, IpotParams, Transport};
pub use report::{match_report, AssignedPair, Embeddings, HardReport, HungarianReport, MatchReport, OtReport, PAD_COST};
