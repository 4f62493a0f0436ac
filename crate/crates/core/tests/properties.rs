use std::collections::BTreeSet;

use keci::corpus::{enumerate_spans, kfold_split, span_count, Span};
use keci::encoder::SpanEncoder;
use keci::fusion::sentinel_attention;
use keci::kb::KnowledgeGraph;
use keci::kgnn::Rgcn;
use keci::nn::init_store;
use keci::spangraph::{ordered_pairs, pair_index, BiGcn};
use keci::ModelConfig;
use keci_autodiff::{Tape, Tensor};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn rows_of(values: &[f64], cols: usize, order: &[usize]) -> Vec<f64> {
    order
        .iter()
        .flat_map(|r| values[r * cols..(r + 1) * cols].iter().copied())
        .collect()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spans_are_sorted_bounded_and_counted(n in 0usize..30, max_len in 1usize..12) {
        let spans = enumerate_spans(n, max_len);
        prop_assert_eq!(spans.len(), span_count(n, max_len));
        prop_assert!(spans.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(spans.iter().all(|s| s.start < s.end && s.end <= n && s.len() <= max_len));
    }

    #[test]
    fn kfold_partitions_the_documents(n in 2usize..60, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &folds {
            let train: BTreeSet<usize> = f.train.iter().copied().collect();
            let test: BTreeSet<usize> = f.test.iter().copied().collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), n);
            seen.extend(test);
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(kfold_split(n, k, seed).unwrap(), folds);
    }

    /// A span's vector only reads the tokens inside it.
    #[test]
    fn span_encoding_is_local(
        ids in prop::collection::vec(0usize..8, 2..10),
        replacement in 0usize..8,
        pos in any::<prop::sample::Index>(),
        positions in any::<bool>(),
    ) {
        let config = ModelConfig {
            d: 4, d_tok: 4, d_len: 2, max_span_len: 3, position_encoding: positions,
            ..ModelConfig::default()
        };
        let encoder = SpanEncoder::new(&config, 8);
        let store = init_store::<f64>(&encoder.specs(), 3).unwrap();
        let n = ids.len();
        let changed_at = pos.index(n);
        let mut other = ids.clone();
        other[changed_at] = replacement;
        let spans = enumerate_spans(n, 3);
        let encode = |ids: &[usize]| {
            let tape = Tape::new();
            let x = encoder.embed_tokens(&tape, &store, ids).unwrap();
            encoder.encode_spans(&tape, &store, x, &spans).unwrap().unwrap().value()
        };
        let (a, b) = (encode(&ids), encode(&other));
        for (i, s) in spans.iter().enumerate() {
            if changed_at < s.start || changed_at >= s.end {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    /// Relabelling span nodes relabels the GCN output the same way.
    #[test]
    fn bigcn_is_permutation_equivariant(
        perm in (2usize..6).prop_flat_map(permutation),
        seed in 0u64..1000,
        layers in 1usize..3,
    ) {
        let (k, d, r) = (perm.len(), 3, 3);
        let gcn = BiGcn::new(d, r, layers, None);
        let store = init_store::<f64>(&gcn.specs(), seed).unwrap();
        let h: Vec<f64> = (0..k * d).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        let pairs = ordered_pairs(k);
        let probs: Vec<f64> = (0..pairs.len() * r)
            .map(|i| ((i as f64 * 1.3 + seed as f64).cos() + 1.1).abs())
            .collect();
        let run = |h: Vec<f64>, p: Vec<f64>| {
            let tape = Tape::new();
            let h = tape.constant(Tensor::new(vec![k, d], h).unwrap());
            let p = tape.constant(Tensor::new(vec![pairs.len(), r], p).unwrap()).softmax(1).unwrap();
            gcn.forward(&tape, &store, h, Some(p)).unwrap().to_vec()
        };
        let base = run(h.clone(), probs.clone());
        let permuted_probs: Vec<f64> = pairs
            .iter()
            .flat_map(|(a, b)| {
                let old = pair_index(perm[*a], perm[*b], k);
                probs[old * r..(old + 1) * r].to_vec()
            })
            .collect();
        let moved = run(rows_of(&h, d, &perm), permuted_probs);
        prop_assert!(close(&moved, &rows_of(&base, d, &perm), 1e-10));
    }

    /// Relabelling graph nodes relabels the node states the same way.
    #[test]
    fn rgcn_is_permutation_equivariant(
        perm in (2usize..7).prop_flat_map(permutation),
        edge_seed in any::<u64>(),
        seed in 0u64..1000,
    ) {
        let (n, d, r) = (perm.len(), 3, 2);
        let edges = random_edges(n, r, edge_seed);
        let rgcn = Rgcn { d_v: d, num_relations: r, num_layers: 2 };
        let store = init_store::<f64>(&rgcn.specs(), seed).unwrap();
        let v: Vec<f64> = (0..n * d).map(|i| ((i as f64 + 0.5) * 0.71).sin()).collect();
        let base = run_rgcn(&rgcn, &store, &graph(n, r, edges.clone()), v.clone());
        // new node a is old node perm[a]
        let mut inverse = vec![0; n];
        for (new, old) in perm.iter().enumerate() {
            inverse[*old] = new;
        }
        let relabelled: Vec<_> = edges.iter().map(|(s, k, t)| (inverse[*s], *k, inverse[*t])).collect();
        let moved = run_rgcn(&rgcn, &store, &graph(n, r, relabelled), rows_of(&v, d, &perm));
        prop_assert!(close(&moved, &rows_of(&base, d, &perm), 1e-10));
    }

    /// With zero relation matrices the edges no longer matter.
    #[test]
    fn rgcn_ignores_edges_without_relation_weights(edge_seed in any::<u64>(), n in 1usize..6) {
        let (d, r) = (3, 2);
        let rgcn = Rgcn { d_v: d, num_relations: r, num_layers: 2 };
        let mut store = init_store::<f64>(&rgcn.specs(), 5).unwrap();
        for l in 0..2 {
            for k in 0..r {
                store.get_mut(&Rgcn::relation_weight(l, k)).unwrap().values_mut().fill(0.0);
            }
        }
        let v: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.3).cos()).collect();
        let with = run_rgcn(&rgcn, &store, &graph(n, r, random_edges(n, r, edge_seed)), v.clone());
        let without = run_rgcn(&rgcn, &store, &graph(n, r, vec![]), v);
        prop_assert!(close(&with, &without, 1e-12));
    }

    /// A candidate scored far below the rest gets no weight.
    #[test]
    fn hopeless_candidate_changes_nothing(
        scores in prop::collection::vec(-5.0f64..5.0, 1..6),
        value in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let c = scores.len();
        let values: Vec<f64> = (0..c * 2).map(|i| (i as f64 * 0.9).sin()).collect();
        let owners = vec![0; c];
        let (base, _) = attend(&scores, &values, &owners, 1);
        let mut s2 = scores.clone();
        s2.push(-1e9);
        let mut v2 = values.clone();
        v2.extend(&value);
        let mut o2 = owners.clone();
        o2.push(0);
        let (with, w) = attend(&s2, &v2, &o2, 1);
        prop_assert!(close(&base, &with, 1e-12));
        prop_assert!(w[c] < 1e-300);
    }

    /// Fused vectors do not depend on the order candidates are listed in,
    /// and weights do not move when one span's scores shift together.
    #[test]
    fn attention_ignores_order_and_shift(
        owners in prop::collection::vec(0usize..3, 1..8),
        shift in -20.0f64..20.0,
        seed in 0u64..100,
    ) {
        let c = owners.len();
        let scores: Vec<f64> = (0..c).map(|i| ((i as u64 + seed) as f64 * 1.7).sin() * 3.0).collect();
        let values: Vec<f64> = (0..c * 2).map(|i| ((i as u64 * 3 + seed) as f64).cos()).collect();
        let (base, weights) = attend(&scores, &values, &owners, 3);

        let rev: Vec<usize> = (0..c).rev().collect();
        let (reordered, _) = attend(
            &rev.iter().map(|i| scores[*i]).collect::<Vec<_>>(),
            &rows_of(&values, 2, &rev),
            &rev.iter().map(|i| owners[*i]).collect::<Vec<_>>(),
            3,
        );
        prop_assert!(close(&base, &reordered, 1e-12));

        let shifted: Vec<f64> = scores
            .iter()
            .zip(&owners)
            .map(|(s, o)| if *o == 1 { s + shift } else { *s })
            .collect();
        let (_, w2) = attend(&shifted, &values, &owners, 3);
        prop_assert!(close(&weights, &w2, 1e-12));
    }
}

fn attend(scores: &[f64], values: &[f64], owners: &[usize], k: usize) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::<f64>::new();
    let c = owners.len();
    let s = tape.constant(Tensor::new(vec![c, 1], scores.to_vec()).unwrap());
    let v = tape.constant(Tensor::new(vec![c, values.len() / c], values.to_vec()).unwrap());
    let (fused, weights) = sentinel_attention(&tape, s, v, owners, k).unwrap();
    (fused.to_vec(), weights.to_vec())
}

fn random_edges(n: usize, r: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut state = seed | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let count = (next() % (2 * n as u64 + 1)) as usize;
    let edges: BTreeSet<_> = (0..count)
        .map(|_| {
            let s = (next() % n as u64) as usize;
            let k = (next() % r as u64) as usize;
            let t = (next() % n as u64) as usize;
            (s, k, t)
        })
        .collect();
    edges.into_iter().collect()
}

fn graph(n: usize, r: usize, mut edges: Vec<(usize, usize, usize)>) -> KnowledgeGraph {
    edges.sort_unstable();
    KnowledgeGraph {
        nodes: (0..n).map(keci::kb::KgNode::Entity).collect(),
        edges,
        candidates: vec![],
        num_relations: r,
    }
}

fn run_rgcn(
    rgcn: &Rgcn,
    store: &keci_autodiff::ParameterStore<f64>,
    graph: &KnowledgeGraph,
    v: Vec<f64>,
) -> Vec<f64> {
    let tape = Tape::new();
    let v0 = tape.constant(Tensor::new(vec![graph.len(), rgcn.d_v], v).unwrap());
    rgcn.forward(&tape, store, graph, v0).unwrap().to_vec()
}

#[test]
fn rgcn_messages_travel_one_hop_per_layer() {
    // path 0 -> 1 -> 2 -> 3 with one relation
    let (n, d) = (4, 2);
    let edges = vec![(0, 0, 1), (1, 0, 2), (2, 0, 3)];
    for layers in 1..=3 {
        let rgcn = Rgcn {
            d_v: d,
            num_relations: 1,
            num_layers: layers,
        };
        let store = init_store::<f64>(&rgcn.specs(), 4).unwrap();
        let v: Vec<f64> = vec![0.9, -0.4, 0.2, 0.7, -0.3, 0.5, 0.6, 0.1];
        let mut bumped = v.clone();
        bumped[0] += 5.0;
        bumped[1] -= 5.0;
        let g = graph(n, 1, edges.clone());
        let (a, b) = (
            run_rgcn(&rgcn, &store, &g, v),
            run_rgcn(&rgcn, &store, &g, bumped),
        );
        for node in 1..n {
            let same = a[node * d..(node + 1) * d] == b[node * d..(node + 1) * d];
            // nodes further than `layers` hops cannot see the change
            if node > layers {
                assert!(same, "node {node} changed with {layers} layers");
            }
        }
    }
}

#[test]
fn span_ordering_matches_tuple_order() {
    let spans = enumerate_spans(4, 2);
    assert_eq!(spans[0], Span::new(0, 1));
    assert_eq!(spans[1], Span::new(0, 2));
    assert_eq!(spans.last(), Some(&Span::new(3, 4)));
}
