//! Corpus I/O, vocabulary, batching and the synthetic generator.

pub mod batch;
pub mod example;
pub mod synth;
pub mod vocab;

pub use batch::{batch_iterator, encode_examples, plan_batches, Batch, BatchIterator, EncodedExample};
pub use example::{load_jsonl, load_tables_jsonl, write_jsonl, Example};
pub use synth::{synth_generate, synth_lexicon, SynthConfig, SynthCorpus, SynthFiles};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, UNK, UNK_TYPE};
