//! Property tests for corpus, n-gram, fitting and reservoir invariants.

mod support;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng as _;
use reslm::bench::fit_alpha;
use reslm::corpus::{self, Vocabulary};
use reslm::diffcore::Tensor;
use reslm::evalgen::{ngram_overlap, ngram_overlap_refs};
use reslm::readout::LinearReadout;
use reslm::reservoir::init_reservoir;
use reslm::rng;
use support::oracles;

fn small_text(alphabet: usize, max_len: usize) -> impl Strategy<Value = String> {
    let chars: Vec<char> = "abcde".chars().take(alphabet).collect();
    prop::collection::vec(prop::sample::select(chars), 0..=max_len)
        .prop_map(|v| v.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ngram_matches_brute_force(g in small_text(5, 50), r in small_text(5, 50), n in 1usize..=4) {
        prop_assume!(g.chars().count() >= n);
        let rep = ngram_overlap(&g, &r, n).unwrap();
        prop_assert_eq!(rep.overlap, oracles::ngram_overlap_brute(&g, &r, n));
    }

    #[test]
    fn ngram_bounds(g in small_text(4, 40), r in small_text(4, 40), n in 1usize..=4) {
        prop_assume!(g.chars().count() >= n);
        let rep = ngram_overlap(&g, &r, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.overlap));
        prop_assert!(rep.distinct > 0.0 && rep.distinct <= 1.0);
        prop_assert!(rep.intersection <= rep.g_unique.min(rep.r_unique));
    }

    #[test]
    fn repeating_a_reference_changes_nothing(g in small_text(3, 30), r in small_text(3, 30), n in 1usize..=3) {
        prop_assume!(g.chars().count() >= n);
        let once = ngram_overlap_refs(&g, &[&r], n).unwrap();
        let twice = ngram_overlap_refs(&g, &[&r, &r], n).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn contained_text_scores_one(r in small_text(4, 60), lo in 0usize..60, len in 4usize..30, n in 1usize..=4) {
        let chars: Vec<char> = r.chars().collect();
        prop_assume!(lo + len <= chars.len() && len >= n);
        let g: String = chars[lo..lo + len].iter().collect();
        // Repeating the excerpt changes frequencies, not the set.
        let g2 = format!("{g}{g}");
        prop_assert_eq!(ngram_overlap(&g, &r, n).unwrap().overlap, 1.0);
        prop_assert_eq!(ngram_overlap(&g2, &format!("{r}{g2}"), n).unwrap().overlap, 1.0);
    }

    #[test]
    fn fit_alpha_recovers_exact_slope(alpha in -5.0f64..5.0, ps in prop::collection::vec(1usize..10_000_000, 2..8)) {
        prop_assume!(ps.iter().any(|&p| p > 1));
        let pts: Vec<(usize, f64)> = ps.iter().map(|&p| (p, alpha * (p as f64).log10())).collect();
        let got = fit_alpha(&pts).unwrap();
        prop_assert!((got - alpha).abs() <= 1e-12 * alpha.abs().max(1.0), "{got} vs {alpha}");
        let mut rev = pts.clone();
        rev.reverse();
        prop_assert!((fit_alpha(&rev).unwrap() - got).abs() <= 1e-15 * got.abs().max(1.0));
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,80}") {
        let once = corpus::normalize(&s);
        prop_assert_eq!(corpus::normalize(&once), once);
    }

    #[test]
    fn encode_decode_round_trip(s in "[a-z ,.;']{1,120}") {
        let v = Vocabulary::build(&s).unwrap();
        let enc = v.encode(&s).unwrap();
        prop_assert_eq!(v.decode(&enc), s);
    }

    #[test]
    fn stride_one_windows_cover_each_substring_once(tokens in prop::collection::vec(0u32..4, 33..120)) {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for w in corpus::iter_windows(&tokens, 1).unwrap() {
            let start = w.input.as_ptr() as usize - tokens.as_ptr() as usize;
            let start = start / std::mem::size_of::<u32>();
            let mut joined = w.input.to_vec();
            joined.push(w.target);
            prop_assert_eq!(&joined[..], &tokens[start..start + 33]);
            *seen.entry(start).or_default() += 1;
        }
        prop_assert_eq!(seen.len(), tokens.len() - 32);
        prop_assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn reservoir_contracts_and_stays_bounded(seed in any::<u64>(), n in 4usize..40) {
        let res = init_reservoir::<f64>(n, 16, 7, 0.9, seed).unwrap();
        let mut r = rng::seeded(seed ^ 1);
        let a: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let inputs: Vec<u32> = (0..100).map(|_| r.random_range(0..7)).collect();
        let (g0, g100) = oracles::contraction_gaps(&res, &a, &b, &inputs);
        prop_assert!(g100 <= 0.9f64.powi(100) * g0 * (1.0 + 1e-6));
        let mut s = a.clone();
        for &x in &inputs {
            s = res.step(&s, x).unwrap();
            prop_assert!(s.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn linear_readout_is_affine(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let ro = LinearReadout::<f64>::new(6, 5, seed);
        let mut r = rng::seeded(seed);
        let state: Vec<f64> = (0..6).map(|_| r.random::<f64>() - 0.5).collect();
        let f = |s: Vec<f64>| ro.linear_forward(&Tensor::from_vec(&[1, 6], s).unwrap()).unwrap();
        let f0 = f(vec![0.0; 6]);
        let fr = f(state.clone());
        let fa = f(state.iter().map(|x| alpha * x).collect());
        for i in 0..5 {
            let lhs = fa.data()[i] - f0.data()[i];
            let rhs = alpha * (fr.data()[i] - f0.data()[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-6, "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn lanczos_scale_agrees_with_svd() {
    for (n, seed) in [(10, 1), (50, 2), (120, 3)] {
        let res = init_reservoir::<f64>(n, 16, 5, 0.9, seed).unwrap();
        let sigma = oracles::sigma_max_svd(res.w_res.data(), n);
        assert!((sigma - 0.9).abs() < 1e-9, "n={n}: {sigma}");
    }
}
