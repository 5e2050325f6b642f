use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::data::{BOS, EOS};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 16,
        factor_dim: 8,
        ff_dim: 32,
        heads: 2,
        blocks: 2,
        max_len: 24,
        dropout: 0.0,
        label_smoothing: 0.1,
        copy_enabled: true,
        factorized: true,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn equal_ids_share_rows() {
    let p = TransformerParams::init(&tiny(12), 0).unwrap();
    let e = compose_embedding(&p, &[7, 5, 7]).unwrap();
    assert_eq!(e.row(0), e.row(2));
    assert_ne!(e.row(0), e.row(1));
    assert!(compose_embedding(&p, &[12]).is_err());
}

/// Factorised params with `H = D` and `E2 = I` next to unfactorised ones
/// holding `E = E1`.
fn identity_pair() -> (TransformerParams, TransformerParams) {
    let mut c = tiny(12);
    c.factor_dim = c.embed_dim;
    let mut fact = TransformerParams::init(&c, 3).unwrap();
    *fact.get_mut("embed.e2").unwrap() = Tensor::identity(16);
    let mut uc = c.clone();
    uc.factorized = false;
    let named: Vec<(String, Tensor)> = fact
        .names()
        .iter()
        .zip(fact.tensors())
        .filter(|(n, _)| n.as_str() != "embed.e2")
        .map(|(n, t)| (if n == "embed.e1" { "embed.e".to_string() } else { n.clone() }, t.clone()))
        .collect();
    let full = TransformerParams::from_tensors(&uc, named).unwrap();
    (fact, full)
}

#[test]
fn identity_factor_matches_unfactorised() {
    let (fact, full) = identity_pair();
    let ids = [3, 9, 4];
    assert_eq!(compose_embedding(&fact, &ids).unwrap(), compose_embedding(&full, &ids).unwrap());
    let src = [5, 6, 7, 8];
    let mf = encode(&fact, &src).unwrap();
    let mu = encode(&full, &src).unwrap();
    assert_eq!(mf, mu);
    let a = decode_step(&fact, &mf, &[BOS, 4, 9]).unwrap();
    let b = decode_step(&full, &mu, &[BOS, 4, 9]).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn encoder_is_deterministic_and_order_sensitive() {
    let p = TransformerParams::init(&tiny(12), 1).unwrap();
    let a = encode(&p, &[5, 6, 7]).unwrap();
    assert_eq!(a, encode(&p, &[5, 6, 7]).unwrap());
    assert_ne!(a, encode(&p, &[6, 5, 7]).unwrap());
    assert_eq!(encode(&p, &[5]).unwrap().shape(), &[1, 16]);
    let long = vec![5; 25];
    assert!(encode(&p, &long).is_err());
}

#[test]
fn decode_step_contract() {
    let p = TransformerParams::init(&tiny(12), 2).unwrap();
    let m = encode(&p, &[5, 6, 7, 8, 9]).unwrap();
    let s = decode_step(&p, &m, &[BOS, 6]).unwrap();
    assert!((s.p_vocab.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(s.p_att.len(), 5);
    assert!((s.p_att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(s.p_att.iter().all(|&a| a >= 0.0));
    assert!(decode_step(&p, &m, &[6]).is_err());
}

#[test]
fn decoder_is_causal() {
    let p = TransformerParams::init(&tiny(12), 2).unwrap();
    let m = encode(&p, &[5, 6, 7]).unwrap();
    let first = decode_step(&p, &m, &[BOS]).unwrap();
    let mut g = Graph::new();
    let net = Net::bind(&p, &mut g, false).unwrap();
    let enc = net.encode(&mut g, &[vec![5, 6, 7], vec![5, 6, 7]]).unwrap();
    let dec = net
        .decode_teacher(&mut g, &enc, &[vec![BOS, 4, 8], vec![BOS, 10, 8]], false)
        .unwrap();
    let s = net.logits(&mut g, dec.hidden).unwrap();
    let v = g.value(s);
    assert!(close(&v[0..12], &first.logits, 1e-12));
    assert!(close(&v[36..48], &first.logits, 1e-12));
    // Position 2 sees the differing token.
    assert!(!close(&v[24..36], &v[60..72], 1e-9));
}

#[test]
fn copy_mix_scatters_duplicates() {
    let state = DecoderStepState {
        hidden: vec![],
        p_att: vec![0.5, 0.3, 0.2],
        logits: vec![0.0; 6],
        p_vocab: vec![1.0 / 6.0; 6],
        p_gen: Some(0.0),
    };
    let out = copy_mix(&state, &[4, 5, 4], 6).unwrap();
    assert!((out[4] - 0.7).abs() < 1e-15);
    assert!((out[5] - 0.3).abs() < 1e-15);
    assert!(out[..4].iter().all(|&x| x == 0.0));
    let keep = DecoderStepState {
        p_gen: Some(1.0),
        ..state
    };
    assert_eq!(copy_mix(&keep, &[4, 5, 4], 6).unwrap(), keep.p_vocab);
}

#[test]
fn gate_bias_override_recovers_p_vocab() {
    let mut p = TransformerParams::init(&tiny(12), 4).unwrap();
    p.get_mut("copy.b").unwrap().data_mut()[0] = 60.0;
    let src = [5, 6, 5];
    let m = encode(&p, &src).unwrap();
    let s = decode_step(&p, &m, &[BOS, 7]).unwrap();
    let mixed = copy_mix(&s, &src, 12).unwrap();
    assert!(close(&mixed, &s.p_vocab, 1e-12));
    p.get_mut("copy.b").unwrap().data_mut()[0] = -60.0;
    let s = decode_step(&p, &m, &[BOS, 7]).unwrap();
    let mixed = copy_mix(&s, &src, 12).unwrap();
    for (y, &q) in mixed.iter().enumerate() {
        if y != 5 && y != 6 {
            assert!(q < 1e-20);
        }
    }
}

#[test]
fn copy_off_is_plain_softmax() {
    let mut c = tiny(12);
    c.copy_enabled = false;
    let p = TransformerParams::init(&c, 5).unwrap();
    let mut g = Graph::new();
    let net = Net::bind(&p, &mut g, false).unwrap();
    let enc = net.encode(&mut g, &[vec![5, 6]]).unwrap();
    let dec = net.decode_teacher(&mut g, &enc, &[vec![BOS, 5]], false).unwrap();
    assert!(dec.p_att.is_none());
    let out = net.output(&mut g, dec.hidden, None, &enc.source_ids).unwrap();
    let s = net.logits(&mut g, dec.hidden).unwrap();
    let sm = g.softmax(s).unwrap();
    assert_eq!(g.value(out), g.value(sm));
}

#[test]
fn incremental_matches_teacher_forcing() {
    let p = TransformerParams::init(&tiny(12), 6).unwrap();
    let sources = vec![vec![5, 6, 7, 8], vec![9, 10]];
    let targets = vec![vec![BOS, 5, 11, 7], vec![BOS, 10, 10, 4]];
    let mut g = Graph::new();
    let net = Net::bind(&p, &mut g, false).unwrap();
    let enc = net.encode(&mut g, &sources).unwrap();
    let dec = net.decode_teacher(&mut g, &enc, &targets, true).unwrap();
    let teacher_p = net.output(&mut g, dec.hidden, dec.p_att, &enc.source_ids).unwrap();
    let teacher = g.value(teacher_p).to_vec();

    let mut inc = StepDecoder::new(&net, &mut g, &enc, &[0, 1]).unwrap();
    for t in 0..4 {
        let step = inc.step_tokens(&net, &mut g, &[targets[0][t], targets[1][t]]).unwrap();
        let pv = net.output(&mut g, step.hidden, step.p_att, &enc.source_ids).unwrap();
        let got = g.value(pv);
        assert!(close(&got[..12], &teacher[t * 12..(t + 1) * 12], 1e-12), "step {t}");
        assert!(close(&got[12..], &teacher[(4 + t) * 12..(5 + t) * 12], 1e-12), "step {t}");
    }
}

#[test]
fn beam_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let p = TransformerParams::init(&tiny(12), seed).unwrap();
        let src: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(5..12)).collect();
        let g = greedy(&p, &[src.clone()], 10).unwrap().remove(0);
        let b = beam_search(&p, &src, 1, 10).unwrap();
        assert_eq!(g, b.tokens, "seed {seed}");
        assert!(g.last() == Some(&EOS) || g.len() == 10);
        let b5 = beam_search(&p, &src, 5, 10).unwrap();
        assert!(b5.tokens.last() == Some(&EOS) || b5.tokens.len() == 10);
        assert!(b5.score() >= b.score() - 1e-12 || b5.tokens.len() != b.tokens.len());
    }
}

#[test]
fn greedy_batches_agree_with_singletons() {
    let p = TransformerParams::init(&tiny(12), 8).unwrap();
    let sources: Vec<Vec<usize>> = (0..5).map(|i| vec![5 + i, 6, 7 + i % 3]).collect();
    let all = greedy(&p, &sources, 12).unwrap();
    for (s, out) in sources.iter().zip(&all) {
        assert_eq!(&greedy(&p, &[s.clone()], 12).unwrap()[0], out);
    }
}

#[test]
fn soft_argmax_limits() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let emb = g.constant(&Tensor::matrix(5, 3, e.clone()).unwrap());
    let dominant = g.constant(&Tensor::matrix(1, 5, vec![0.0, 50.0, 0.0, 0.0, 0.0]).unwrap());
    let s = soft_argmax(&mut g, dominant, emb, 1.0).unwrap();
    assert!(close(g.value(s), &e[3..6], 1e-9));
    let flat = g.constant(&Tensor::matrix(1, 5, vec![0.3; 5]).unwrap());
    let s = soft_argmax(&mut g, flat, emb, 1.0).unwrap();
    let mean: Vec<f64> = (0..3).map(|j| (0..5).map(|i| e[i * 3 + j]).sum::<f64>() / 5.0).collect();
    assert!(close(g.value(s), &mean, 1e-12));
    assert!(soft_argmax(&mut g, flat, emb, 0.0).is_err());
}

#[test]
fn cold_soft_decode_tracks_greedy() {
    let mut p = TransformerParams::init(&tiny(12), 9).unwrap();
    // A spread-out output bias saturates the next-token distribution.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in p.get_mut("out.bias").unwrap().data_mut() {
        *b = rng.gen_range(-8.0..8.0);
    }
    let src = [5, 6, 7];
    let hard = greedy(&p, &[src.to_vec()], 6).unwrap().remove(0);
    let soft = soft_decode(&p, &src, hard.len(), 1e-4).unwrap();
    let want = compose_embedding(&p, &hard).unwrap();
    assert_eq!(soft.shape(), want.shape());
    assert!(close(soft.data(), want.data(), 1e-6));
}

#[test]
fn checkpoint_round_trip() {
    let p = TransformerParams::init(&tiny(12), 10).unwrap();
    let bytes = encode_checkpoint(&p, "abc", 42).unwrap();
    let c = decode_checkpoint(&bytes).unwrap();
    assert_eq!(c.params, p);
    assert_eq!((c.vocab_hash.as_str(), c.step), ("abc", 42));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_checkpoint(b"{not json\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &p, "abc", 1).unwrap();
    let h = inspect_checkpoint(&path).unwrap();
    assert_eq!(h.param_count(), p.param_count());
    assert_eq!(h.embedding_param_count(), 12 * 8 + 8 * 16);
}

#[test]
fn copy_and_soft_decode_gradients() {
    let p = TransformerParams::init(&tiny(10), 12).unwrap();
    let copy = |net: &Net, g: &mut Graph| {
        let enc = net.encode(g, &[vec![5, 6, 5]])?;
        let dec = net.decode_teacher(g, &enc, &[vec![BOS, 6]], true)?;
        let out = net.output(g, dec.hidden, dec.p_att, &enc.source_ids)?;
        let l = g.log(out)?;
        let w: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 / 5.0).collect();
        let l = g.mul_const(l, w)?;
        g.sum(l)
    };
    for (name, err) in param_grad_check(&p, copy, 1e-5, Some(6)).unwrap() {
        assert!(err <= 1e-4, "copy {name}: {err}");
    }
    let soft = |net: &Net, g: &mut Graph| {
        let enc = net.encode(g, &[vec![5, 6, 7]])?;
        let out = soft_decode_graph(net, g, &enc, &[3], 0.5, false)?;
        g.sum(out.soft)
    };
    for (name, err) in param_grad_check(&p, soft, 1e-5, Some(6)).unwrap() {
        assert!(err <= 1e-4, "soft {name}: {err}");
    }
}
