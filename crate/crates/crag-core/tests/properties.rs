//! Randomized invariant checks over the core data structures: corpus
//! capacity and pruning, gate sparsity and normalization, and the domain
//! weight simplex/KL constraints.

use std::collections::BTreeMap;

use proptest::prelude::*;

use crag_core::corpus::{Corpus, CorpusConfig, KnowledgeEntry};
use crag_core::linalg::Matrix;
use crag_core::moe::{gate, GatingParams};
use crag_core::multilevel::{kl_to_uniform, solve_dro_weights, DroSense};

const DIM: usize = 4;

fn entry(id: u64, raw: [f64; DIM], relevance: f64, tick: u64) -> KnowledgeEntry {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    let mut rel = BTreeMap::new();
    if relevance > 0.0 {
        rel.insert("t".to_string(), relevance);
    }
    KnowledgeEntry {
        id,
        embedding: raw.iter().map(|x| x / norm).collect(),
        text: format!("entry {id}"),
        domain: "d".into(),
        relevance: rel,
        created_at: tick,
        last_validated: tick,
        uncertainty: 0.0,
        source: "prop".into(),
    }
}

proptest! {
    /// The corpus never exceeds its capacity, whatever the ingest order.
    #[test]
    fn corpus_never_exceeds_capacity(
        capacity in 1usize..8,
        raws in proptest::collection::vec(
            (proptest::array::uniform4(-1.0f64..1.0), 0.0f64..1.0),
            1..24,
        ),
    ) {
        let mut corpus = Corpus::new(CorpusConfig {
            dim: DIM,
            half_life: 30.0,
            redundancy_threshold: 0.995,
            relevance_floor: 0.0,
            capacity,
        }).unwrap();
        for (i, (raw, rel)) in raws.into_iter().enumerate() {
            if raw.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                continue;
            }
            corpus.ingest(entry(i as u64, raw, rel, i as u64), i as u64);
            prop_assert!(corpus.len() <= capacity, "len {} > capacity {capacity}", corpus.len());
        }
    }

    /// Pruning removes exactly the entries that are both stale and
    /// irrelevant per the floor rule, and nothing else.
    #[test]
    fn prune_matches_entrywise_rule(
        floor in 0.05f64..0.9,
        raws in proptest::collection::vec(
            (proptest::array::uniform4(-1.0f64..1.0), 0.0f64..1.0, 0u64..40),
            1..16,
        ),
        now in 40u64..140,
    ) {
        let mut corpus = Corpus::new(CorpusConfig {
            dim: DIM,
            half_life: 20.0,
            redundancy_threshold: 0.999_999,
            relevance_floor: floor,
            capacity: 64,
        }).unwrap();
        for (i, (raw, rel, tick)) in raws.into_iter().enumerate() {
            if raw.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                continue;
            }
            corpus.ingest(entry(i as u64, raw, rel, tick), tick);
        }
        let expected: Vec<u64> = corpus
            .entries()
            .filter(|e| {
                corpus.freshness_weight(e, now) < floor && e.max_relevance() < floor
            })
            .map(|e| e.id)
            .collect();
        let mut removed = corpus.prune(now);
        removed.sort_unstable();
        prop_assert_eq!(removed, expected);
    }

    /// The sparse gate keeps exactly min(top_k, n) nonzero weights and they
    /// sum to one.
    #[test]
    fn gate_is_sparse_and_normalized(
        logits in proptest::collection::vec(-5.0f64..5.0, 8),
        x in proptest::array::uniform2(-2.0f64..2.0),
        top_k in 1usize..5,
        n in 2usize..5,
    ) {
        let wg = Matrix::from_rows(
            &(0..n).map(|i| vec![logits[2 * i], logits[2 * i + 1]]).collect::<Vec<_>>(),
        );
        let g = gate(&x, &GatingParams { wg, top_k });
        let nonzero = g.iter().filter(|v| **v > 0.0).count();
        prop_assert_eq!(nonzero, top_k.min(n));
        let sum: f64 = g.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "gate sum {sum}");
        prop_assert!(g.iter().all(|v| *v >= 0.0));
    }

    /// DRO weights always lie on the simplex, respect the KL ball, and under
    /// the worst-case sense never put less than uniform mass on an argmax
    /// domain when a unique maximum exists.
    #[test]
    fn dro_weights_respect_simplex_and_kl(
        losses in proptest::collection::vec(0.0f64..10.0, 2..6),
        epsilon in 0.0f64..1.5,
    ) {
        let m = losses.len();
        let w0 = vec![1.0 / m as f64; m];
        let dw = solve_dro_weights(&losses, &w0, epsilon, DroSense::WorstCase);
        let sum: f64 = dw.w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        prop_assert!(dw.w.iter().all(|w| *w >= 0.0 && *w <= 1.0));
        prop_assert!(kl_to_uniform(&dw.w) <= epsilon + 1e-7);
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        let argmaxes: Vec<usize> = (0..m).filter(|&i| losses[i] == max).collect();
        if argmaxes.len() == 1 {
            prop_assert!(
                dw.w[argmaxes[0]] >= 1.0 / m as f64 - 1e-9,
                "argmax weight {} below uniform",
                dw.w[argmaxes[0]]
            );
        }
    }
}
