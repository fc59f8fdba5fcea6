//! Metric invariants checked against independent brute-force scorers.

use huse_core::evaluator::{hp_at_k, recall_at_k, EmbeddedCorpus, MatchRule, RetrievalReport};
use huse_core::numerics::{cosine_distance, l2_normalize_rows};
use huse_core::{Exec, Modality, RngState, Taxonomy};
use proptest::prelude::*;

/// Two-level tree with `groups` internal nodes of `per_group` leaves each.
fn taxonomy(groups: usize, per_group: usize) -> Taxonomy {
    let mut edges = vec![("root".to_string(), None)];
    let mut names = Vec::new();
    for g in 0..groups {
        edges.push((format!("g{g}"), Some("root".to_string())));
        for l in 0..per_group {
            let name = format!("c{}", g * per_group + l);
            edges.push((name.clone(), Some(format!("g{g}"))));
            names.push(name);
        }
    }
    Taxonomy::from_edges(&edges, &names).unwrap()
}

fn corpus(
    rng: &mut RngState,
    n: usize,
    d: usize,
    k: usize,
    m: Modality,
    prefix: &str,
) -> EmbeddedCorpus {
    let emb = l2_normalize_rows(&rng.standard_normal(n, d), 1e-12)
        .unwrap()
        .0;
    let labels = (0..n)
        .map(|_| ((rng.uniform() * k as f64) as usize).min(k - 1))
        .collect();
    let ids = (0..n).map(|i| format!("{prefix}{i:05}")).collect();
    EmbeddedCorpus::new(emb, labels, ids, m).unwrap()
}

/// Ranks every candidate by an explicit full sort.
fn brute_rank(q: &EmbeddedCorpus, c: &EmbeddedCorpus, i: usize) -> Vec<usize> {
    let same = q.modality() == c.modality();
    let mut all: Vec<(f64, String, usize)> = (0..c.len())
        .filter(|&j| !(same && q.ids()[i] == c.ids()[j]))
        .map(|j| {
            let d = cosine_distance(q.embeddings().row(i), c.embeddings().row(j)).unwrap();
            (d, c.ids()[j].clone(), j)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all.into_iter().map(|t| t.2).collect()
}

fn brute_recall(q: &EmbeddedCorpus, c: &EmbeddedCorpus, k: usize) -> f64 {
    let hits: Vec<f64> = (0..q.len())
        .map(|i| {
            let r = brute_rank(q, c, i);
            if r[..k].iter().any(|&j| c.labels()[j] == q.labels()[i]) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    hits.iter().sum::<f64>() / hits.len() as f64
}

fn brute_hp(q: &EmbeddedCorpus, c: &EmbeddedCorpus, k: usize, t: &Taxonomy) -> f64 {
    let vals: Vec<f64> = (0..q.len())
        .map(|i| {
            // class set by explicit enumeration of tree distances
            let y = q.labels()[i];
            let mut order: Vec<(usize, usize)> = (0..t.num_classes())
                .map(|c| (t.tree_distance(y, c).unwrap(), c))
                .collect();
            order.sort();
            let set: Vec<usize> = order[..k].iter().map(|p| p.1).collect();
            let r = brute_rank(q, c, i);
            r[..k]
                .iter()
                .filter(|&&j| set.contains(&c.labels()[j]))
                .count() as f64
                / k as f64
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn twenty_random_corpora_match_brute_force() {
    let mut rng = RngState::new(2024);
    for trial in 0..20 {
        // class counts between 4 and 10
        let (groups, per) = [(2, 2), (2, 3), (3, 2), (3, 3), (5, 2), (2, 5)][trial % 6];
        let k = groups * per;
        let tax = taxonomy(groups, per);
        let n = 20 + 9 * trial;
        let q = corpus(&mut rng, n, 3 + trial % 4, k, Modality::Image, "a");
        let c = corpus(&mut rng, n, q.embeddings().cols(), k, Modality::Text, "b");
        for (qq, cc) in [(&q, &c), (&q, &q), (&c, &q), (&c, &c)] {
            for kk in [1, 2, 5] {
                assert_eq!(
                    recall_at_k(qq, cc, kk).unwrap(),
                    brute_recall(qq, cc, kk),
                    "trial {trial}"
                );
                if kk <= k {
                    assert_eq!(
                        hp_at_k(qq, cc, kk, &tax).unwrap(),
                        brute_hp(qq, cc, kk, &tax),
                        "trial {trial}"
                    );
                } else {
                    assert!(hp_at_k(qq, cc, kk, &tax).is_err());
                }
            }
            assert_eq!(
                hp_at_k(qq, cc, 1, &tax).unwrap(),
                recall_at_k(qq, cc, 1).unwrap()
            );
        }
    }
}

#[test]
fn permuted_labels_give_chance_recall() {
    // 300 items in 3 balanced classes; labels shuffled independently of
    // geometry, so P(top-1 shares the class) = 99/299 for in-modal queries
    let mut rng = RngState::new(77);
    let n = 300;
    let mut vals = Vec::new();
    for _ in 0..50 {
        let emb = l2_normalize_rows(&rng.standard_normal(n, 6), 1e-12)
            .unwrap()
            .0;
        let mut labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        rng.shuffle(&mut labels);
        let ids = (0..n).map(|i| format!("x{i:04}")).collect();
        let c = EmbeddedCorpus::new(emb, labels, ids, Modality::Image).unwrap();
        vals.push(recall_at_k(&c, &c, 1).unwrap());
    }
    let p = 99.0 / 299.0;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sigma = (p * (1.0 - p) / (n as f64 * 50.0)).sqrt();
    assert!(
        (mean - p).abs() < 3.0 * sigma,
        "mean {mean} vs {p} ± {}",
        3.0 * sigma
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recall_is_monotone_and_bounded(seed in 0u64..10_000, n in 12usize..60, d in 2usize..6) {
        let mut rng = RngState::new(seed);
        let tax = taxonomy(2, 3);
        let a = corpus(&mut rng, n, d, 6, Modality::Image, "a");
        let b = corpus(&mut rng, n, d, 6, Modality::Text, "b");
        let rep = RetrievalReport::compute(&a, &b, &tax, MatchRule::SameClass, Exec::Sequential).unwrap();
        for t in &rep.tasks {
            let r: Vec<f64> = t.recall.iter().map(|v| v.unwrap()).collect();
            prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
            for v in t.recall.iter().chain(&t.hp).flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
        prop_assert_eq!(hp_at_k(&a, &b, 1, &tax).unwrap(), recall_at_k(&a, &b, 1).unwrap());
    }

    #[test]
    fn relabelling_candidates_cannot_lower_recall_below_paired(seed in 0u64..10_000) {
        // cross-modal paired-instance hits are always same-class hits
        let mut rng = RngState::new(seed);
        let a = corpus(&mut rng, 30, 4, 3, Modality::Image, "p");
        let b = EmbeddedCorpus::new(
            l2_normalize_rows(&rng.standard_normal(30, 4), 1e-12).unwrap().0,
            a.labels().to_vec(),
            a.ids().to_vec(),
            Modality::Text,
        ).unwrap();
        for k in [1, 5, 10] {
            let paired = huse_core::evaluator::recall_at_k_with(&a, &b, k, MatchRule::PairedInstance, Exec::Sequential).unwrap();
            prop_assert!(paired <= recall_at_k(&a, &b, k).unwrap());
        }
    }
}
