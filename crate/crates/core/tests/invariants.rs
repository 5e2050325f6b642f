use faithgen::autodiff::{Graph, Tensor};
use faithgen::losses::{disagreement_loss, ot_loss};
use faithgen::metrics::{bleu4, parent_t_instance};
use faithgen::model::{copy_mix, DecoderStepState};
use faithgen::ot::IpotParams;
use faithgen::table::{LexicalMode, Record, Table};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

const WORDS: [&str; 8] = ["john", "smith", "seattle", "engineer", "born", "in", "is", "a"];

fn sentence(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

proptest! {
    #[test]
    fn copy_mix_is_a_distribution(seed in any::<u64>(), v in 2usize..12, s in 1usize..8, gate in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = DecoderStepState {
            hidden: vec![],
            p_att: simplex(&mut rng, s),
            logits: vec![0.0; v],
            p_vocab: simplex(&mut rng, v),
            p_gen: Some(gate),
        };
        let ids: Vec<usize> = (0..s).map(|_| rng.gen_range(0..v)).collect();
        let p = copy_mix(&state, &ids, v).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Tokens absent from the source only receive generation mass.
        for (t, &x) in p.iter().enumerate() {
            if !ids.contains(&t) {
                prop_assert!((x - gate * state.p_vocab[t]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn disagreement_ignores_row_order(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rows(&mut rng, n, 4);
        let b = rows(&mut rng, m, 4);
        let value = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::from_rows(a).unwrap());
            let y = g.leaf(&Tensor::from_rows(b).unwrap());
            let l = disagreement_loss(&mut g, x, &[(0..a.len()).collect()], y, &[(0..b.len()).collect()]).unwrap();
            g.scalar(l)
        };
        let base = value(&a, &b);
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        prop_assert!(base >= 0.0);
        prop_assert!((value(&pa, &pb) - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn ot_loss_ignores_row_order(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rows(&mut rng, n, 5);
        let b = rows(&mut rng, m, 5);
        let value = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::from_rows(a).unwrap());
            let y = g.leaf(&Tensor::from_rows(b).unwrap());
            let l = ot_loss(&mut g, x, y, IpotParams::default()).unwrap();
            g.scalar(l)
        };
        let base = value(&a, &b);
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        prop_assert!((0.0..=2.0).contains(&base));
        prop_assert!((value(&pa, &pb) - base).abs() < 1e-9, "{base}");
    }

    #[test]
    fn parent_t_scores_are_bounded(seed in any::<u64>(), len in 0usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Table::new(vec![
            Record::new("name", "john smith"),
            Record::new("birth_place", "seattle"),
            Record::new("occupation", "engineer"),
        ]).unwrap();
        let text = sentence(&mut rng, len);
        for mode in [LexicalMode::ValuesOnly, LexicalMode::ValuesAndTypes] {
            let s = parent_t_instance(&table, &text, mode);
            for x in [s.precision, s.recall, s.f] {
                prop_assert!((0.0..=1.0).contains(&x), "{s:?}");
            }
            prop_assert!(s.f <= s.precision.max(s.recall) + 1e-12);
            prop_assert!(s.f >= s.precision.min(s.recall) - 1e-12);
        }
    }

    #[test]
    fn bleu_is_bounded_and_exact_on_copies(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs: Vec<Vec<String>> = (0..n).map(|_| { let l = rng.gen_range(4..12); sentence(&mut rng, l) }).collect();
        let cands: Vec<Vec<String>> = (0..n).map(|_| { let l = rng.gen_range(1..12); sentence(&mut rng, l) }).collect();
        let b = bleu4(&cands, &refs).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b), "{b}");
        prop_assert!((bleu4(&refs, &refs).unwrap() - 1.0).abs() < 1e-12);
    }
}
