use faithgen::data::{build_vocab, encode_examples, synth_generate, EncodedExample, SynthConfig, Vocab};
use faithgen::model::ModelConfig;
use faithgen::table::NounLexicon;
use faithgen::train::{train, OtMode, TrainConfig, Trainer};

struct Fixture {
    vocab: Vocab,
    lexicon: NounLexicon,
    examples: Vec<EncodedExample>,
}

fn fixture() -> Fixture {
    let corpus = synth_generate(&SynthConfig::new(40, 11).with_noise(0.3, 0.2)).unwrap();
    let vocab = build_vocab(&corpus.train, 10_000).unwrap();
    let examples = encode_examples(&corpus.train, &vocab, &corpus.lexicon).unwrap();
    Fixture {
        vocab,
        lexicon: corpus.lexicon,
        examples,
    }
}

fn small_model(v: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        factor_dim: 8,
        ff_dim: 32,
        heads: 2,
        ..ModelConfig::desk(v)
    }
}

fn short(steps: u64, ot_start: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        ot_start_step: ot_start,
        token_budget: 160,
        seed: 5,
        ..TrainConfig::desk()
    }
}

#[test]
fn mle_only_logs_only_mle() {
    let f = fixture();
    let r = train(&short(4, 0).mle_only(), &small_model(f.vocab.len()), &f.examples, &f.vocab, &f.lexicon, None).unwrap();
    for rep in &r.log {
        assert!(rep.disagree.is_none() && rep.ot.is_none());
        assert_eq!(rep.total, rep.mle);
    }
}

#[test]
fn loss_reports_add_up() {
    let f = fixture();
    let cfg = short(6, 3);
    let r = train(&cfg, &small_model(f.vocab.len()), &f.examples, &f.vocab, &f.lexicon, None).unwrap();
    for (i, rep) in r.log.iter().enumerate() {
        assert_eq!(rep.step, i as u64);
        assert_eq!(rep.ot.is_some() || rep.ot_degenerate > 0, i >= 3, "step {i}");
        let want = rep.mle + cfg.lambda * rep.disagree.unwrap() + cfg.gamma * rep.ot.unwrap_or(0.0);
        assert!((rep.total - want).abs() <= 1e-12 * want.abs().max(1.0), "step {i}");
        if let Some(ot) = rep.ot {
            assert!(ot >= 0.0);
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let f = fixture();
    let cfg = short(5, 3);
    let m = small_model(f.vocab.len());
    let a = train(&cfg, &m, &f.examples, &f.vocab, &f.lexicon, None).unwrap();
    let b = train(&cfg, &m, &f.examples, &f.vocab, &f.lexicon, None).unwrap();
    assert_eq!(a.params, b.params);
    let bits = |r: &faithgen::train::TrainResult| -> Vec<u64> { r.log.iter().map(|x| x.total.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn forked_run_equals_fresh_run() {
    let f = fixture();
    let m = small_model(f.vocab.len());
    let nouns = short(6, 3);
    let whole = TrainConfig {
        ot_mode: OtMode::Whole,
        ..nouns.clone()
    };
    let mut shared = Trainer::new(&nouns, &m, &f.examples, &f.vocab, &f.lexicon).unwrap();
    shared.run_until(3, None).unwrap();
    assert_eq!(shared.step(), 3);
    let forked = shared.clone().with_config(&whole).unwrap().finish(None).unwrap();
    let fresh = train(&whole, &m, &f.examples, &f.vocab, &f.lexicon, None).unwrap();
    assert_eq!(forked.params, fresh.params);
    assert_eq!(forked.log, fresh.log);
    let rest = shared.finish(None).unwrap();
    assert_eq!(rest.log[..3], fresh.log[..3]);
    assert_ne!(rest.params, fresh.params);
}

#[test]
fn fork_refuses_a_different_seed() {
    let f = fixture();
    let m = small_model(f.vocab.len());
    let cfg = short(4, 2);
    let t = Trainer::new(&cfg, &m, &f.examples, &f.vocab, &f.lexicon).unwrap();
    let other = TrainConfig { seed: 6, ..cfg };
    assert!(t.with_config(&other).is_err());
}
