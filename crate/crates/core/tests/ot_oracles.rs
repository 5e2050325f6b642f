use faithgen::autodiff::Tensor;
use faithgen::ot::{
    cosine_cost, exact_ot, hard_match, hungarian, ipot, marginal_violation, match_report, transport_cost, uniform,
    Embeddings, IpotParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(n, d, data).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    let mut w: Vec<f64> = w.iter().map(|v| v / s).collect();
    // Push rounding residue into the last weight so the sum is 1 to ~1e-16.
    let fix: f64 = 1.0 - w.iter().sum::<f64>();
    *w.last_mut().unwrap() += fix;
    w
}

fn random_cosine_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
    let x = random_unit_rows(rng, n, 6);
    let y = random_unit_rows(rng, m, 6);
    cosine_cost(&x, &y).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_assignment(c: &Tensor) -> f64 {
    let n = c.dims().0;
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| c.data()[i * n + j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// A vertex of the transport polytope: northwest corner over shuffled rows and columns.
fn random_feasible_plan(rng: &mut ChaCha8Rng, mu: &[f64], nu: &[f64]) -> Tensor {
    use rand::seq::SliceRandom;
    let (n, m) = (mu.len(), nu.len());
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..m).collect();
    rows.shuffle(rng);
    cols.shuffle(rng);
    let mut s: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let mut d: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let mut plan = vec![0.0; n * m];
    let (mut a, mut b) = (0, 0);
    while a < n && b < m {
        let x = s[a].min(d[b]);
        plan[rows[a] * m + cols[b]] += x;
        s[a] -= x;
        d[b] -= x;
        if s[a] <= d[b] {
            a += 1;
        } else {
            b += 1;
        }
    }
    Tensor::matrix(n, m, plan).unwrap()
}

#[test]
fn cosine_cost_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let c = cosine_cost(&x, &x).unwrap();
    assert_eq!(c.at(0, 0), 0.0);
    assert!((c.at(0, 1) - 1.0).abs() < 1e-15);
    assert!((c.at(0, 2) - 2.0).abs() < 1e-15);
    let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert!(cosine_cost(&x, &z).is_err());
}

#[test]
fn ipot_trivial_cases() {
    let one = Tensor::matrix(1, 1, vec![0.7]).unwrap();
    let t = ipot(&one, &[1.0], &[1.0], IpotParams::default()).unwrap();
    assert!((t.plan.data()[0] - 1.0).abs() < 1e-12);
    assert!((t.distance - 0.7).abs() < 1e-12);

    let c = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let t = ipot(&c, &uniform(2), &uniform(2), IpotParams::default()).unwrap();
    assert!(t.distance < 1e-6, "{}", t.distance);
    assert!((t.plan.at(0, 0) - 0.5).abs() < 1e-6 && (t.plan.at(1, 1) - 0.5).abs() < 1e-6);
}

#[test]
fn ipot_rejects_bad_parameters() {
    let c = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    for p in [
        IpotParams { beta: 0.0, ..IpotParams::default() },
        IpotParams { outer: 0, ..IpotParams::default() },
        IpotParams { inner: 0, ..IpotParams::default() },
    ] {
        assert!(ipot(&c, &[1.0], &[1.0], p).is_err());
    }
    // Tiny beta on a large cost underflows the kernel.
    let big = Tensor::matrix(1, 2, vec![50.0, 60.0]).unwrap();
    let p = IpotParams { beta: 1e-3, ..IpotParams::default() };
    assert!(ipot(&big, &[1.0], &[0.5, 0.5], p).unwrap_err().is_numeric());
}

#[test]
fn ipot_matches_exact_on_random_4x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..50 {
        let c = random_cosine_instance(&mut rng, 4, 5);
        let mu = random_weights(&mut rng, 4);
        let nu = random_weights(&mut rng, 5);
        let approx = ipot(&c, &mu, &nu, IpotParams::default()).unwrap();
        let exact = exact_ot(&c, &mu, &nu).unwrap();
        assert!((approx.distance - exact.distance).abs() <= 1e-3);
        assert!(exact.distance <= approx.distance + 1e-3);
        assert!(marginal_violation(&approx.plan, &mu, &nu) <= 1e-4);
        assert!(marginal_violation(&exact.plan, &mu, &nu) <= 1e-9);
    }
}

#[test]
fn exact_beats_random_feasible_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (n, m) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let c = random_cosine_instance(&mut rng, n, m);
        let mu = random_weights(&mut rng, n);
        let nu = random_weights(&mut rng, m);
        let exact = exact_ot(&c, &mu, &nu).unwrap();
        for _ in 0..100 {
            let a = random_feasible_plan(&mut rng, &mu, &nu);
            let b = random_feasible_plan(&mut rng, &mu, &nu);
            let w: f64 = rng.gen_range(0.0..=1.0);
            let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
            let plan = Tensor::matrix(n, m, mix).unwrap();
            assert!(transport_cost(&plan, &c) >= exact.distance - 1e-12);
        }
    }
}

#[test]
fn exact_uniform_square_equals_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=7 {
        let c = random_cosine_instance(&mut rng, n, n);
        let e = exact_ot(&c, &uniform(n), &uniform(n)).unwrap();
        let h = hungarian(&c).unwrap();
        assert!((e.distance - h.cost / n as f64).abs() < 1e-12, "n={n}");
    }
}

#[test]
fn exact_scales_linearly_with_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_cosine_instance(&mut rng, 5, 4);
    let mu = random_weights(&mut rng, 5);
    let nu = random_weights(&mut rng, 4);
    let base = exact_ot(&c, &mu, &nu).unwrap();
    let k = 3.5;
    let scaled = Tensor::matrix(5, 4, c.data().iter().map(|v| v * k).collect()).unwrap();
    let s = exact_ot(&scaled, &mu, &nu).unwrap();
    assert!((s.distance - k * base.distance).abs() < 1e-12);
    let support = |t: &Tensor| t.data().iter().map(|&v| v > 1e-12).collect::<Vec<_>>();
    assert_eq!(support(&s.plan), support(&base.plan));
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let c = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap();
        let h = hungarian(&c).unwrap();
        let mut seen = vec![false; n];
        for &j in &h.perm {
            assert!(!seen[j]);
            seen[j] = true;
        }
        assert!((h.cost - brute_force_assignment(&c)).abs() < 1e-9);
    }
}

fn toy_embeddings() -> Embeddings {
    let text = "\
seattle 1 0 0 0
washington 0.9 0.1 0 0
engineer 0 1 0 0
1951 0 0 1 0
paris 0 0 0 1
";
    Embeddings::parse(text, std::path::Path::new("toy")).unwrap()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn match_report_identical_sets() {
    let e = toy_embeddings();
    let k = words("seattle engineer 1951");
    let r = match_report(&k, &k, &e, IpotParams::default()).unwrap();
    assert_eq!(r.hard.matched.len(), 3);
    assert!(r.hard.unmatched_table.is_empty() && r.hard.unmatched_text.is_empty());
    assert!(r.hungarian.cost.abs() < 1e-12);
    assert!(r.ot.distance < 1e-6);
}

#[test]
fn match_report_faithful_text_costs_less() {
    let e = toy_embeddings();
    let table = words("seattle engineer 1951");
    let faithful = words("washington engineer 1951");
    let unfaithful = words("paris engineer");
    let p = IpotParams::default();
    let f = match_report(&table, &faithful, &e, p).unwrap();
    let u = match_report(&table, &unfaithful, &e, p).unwrap();
    assert!(u.ot.distance > f.ot.distance);
    assert_eq!(u.hungarian.size, 3);
    assert!(u.hungarian.pairs.iter().any(|pair| pair.text.is_none() && pair.cost == 2.0));
}

#[test]
fn match_report_uniform_square_agrees_with_assignment() {
    let e = toy_embeddings();
    let r = match_report(&words("seattle engineer 1951"), &words("1951 washington paris"), &e, IpotParams::default()).unwrap();
    assert!((r.ot.distance - r.hungarian.normalized_cost).abs() < 1e-4);
}

#[test]
fn match_report_unknown_token() {
    let e = toy_embeddings();
    assert!(match_report(&words("seattle"), &words("tokyo"), &e, IpotParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ipot_is_symmetric(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_cosine_instance(&mut rng, n, m);
        let mu = random_weights(&mut rng, n);
        let nu = random_weights(&mut rng, m);
        let a = ipot(&c, &mu, &nu, IpotParams::default()).unwrap();
        let b = ipot(&c.transposed(), &nu, &mu, IpotParams::default()).unwrap();
        prop_assert!((a.distance - b.distance).abs() <= 1e-6);
    }

    #[test]
    fn ipot_self_transport_is_free(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_unit_rows(&mut rng, n, 5);
        let c = cosine_cost(&x, &x).unwrap();
        let mu = random_weights(&mut rng, n);
        let t = ipot(&c, &mu, &mu, IpotParams::default()).unwrap();
        prop_assert!(t.distance <= 1e-6);
    }

    #[test]
    fn hard_match_counts_are_order_independent(
        a in proptest::collection::vec(0u8..5, 0..12),
        b in proptest::collection::vec(0u8..5, 0..12),
    ) {
        let m = hard_match(&a, &b);
        let mut ra = a.clone();
        ra.reverse();
        let r = hard_match(&ra, &b);
        prop_assert_eq!(m.pairs.len(), r.pairs.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_a.len(), a.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_b.len(), b.len());
        for &(i, j) in &m.pairs {
            prop_assert_eq!(a[i], b[j]);
        }
    }
}
