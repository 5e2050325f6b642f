//! Faithfulness and fluency metrics. All text is tokenised with the table tokenizer.

mod bleu;
mod lcs;
mod parent;

pub use bleu::bleu4;
pub use lcs::lcs;
pub use parent::{
    ngram_entailment, parent, parent_instance, parent_t, parent_t_instance, parent_t_precision, parent_t_recall,
    InstanceScore, MetricReport, Precision, MAX_ORDER, PRECISION_FLOOR,
};
