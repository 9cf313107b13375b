use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;

use nsg_core::graphdata::{Modality, MultimodalGraph};
use nsg_core::nsg::{build_nsg, build_sparse_nsg, expected_edge_count, EdgeVariant, RelationType};
use nsg_core::numerics::Tensor2;
use nsg_core::sparsifier::{
    approx_max_spanning_tree, build_trees, cosine_similarity, exact_max_spanning_tree, MstConfig, MstMode,
};

const VARIANTS: [EdgeVariant; 3] = [EdgeVariant::SelfType, EdgeVariant::CrossType, EdgeVariant::Hybrid];

fn graph(n: usize, m: usize, edges: Vec<(usize, usize)>) -> MultimodalGraph {
    MultimodalGraph {
        num_nodes: n,
        edges,
        modalities: (0..m).map(|t| Modality { name: format!("m{t}"), dim: 1 }).collect(),
        features: (0..m).map(|_| Tensor2::zeros(n, 1)).collect(),
        num_classes: None,
        labels: None,
        splits: None,
        seed: None,
    }
}

/// Simple undirected graphs: a node count and a deduplicated canonical edge set.
fn simple_graph(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_n).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| ((u + 1)..n).map(move |v| (u, v))).collect();
        proptest::sample::subsequence(pairs.clone(), 0..=pairs.len()).prop_map(move |e| (n, e))
    })
}

fn similarity(m: usize) -> impl Strategy<Value = Tensor2> {
    proptest::collection::vec(-1.0f64..1.0, m * m).prop_map(move |v| {
        Tensor2::from_fn(m, m, |i, j| if i == j { 1.0 } else { v[i.min(j) * m + i.max(j)] })
    })
}

/// Max spanning-tree weight by enumerating every `(m-1)`-subset of pairs.
fn brute_force_best(s: &Tensor2) -> f64 {
    let m = s.rows();
    if m < 2 {
        return 0.0;
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j))).collect();
    let mut best = f64::NEG_INFINITY;
    let mut pick = Vec::with_capacity(m - 1);
    fn rec(
        pairs: &[(usize, usize)],
        from: usize,
        pick: &mut Vec<(usize, usize)>,
        m: usize,
        s: &Tensor2,
        best: &mut f64,
    ) {
        if pick.len() == m - 1 {
            let mut comp: Vec<usize> = (0..m).collect();
            fn root(c: &mut [usize], mut x: usize) -> usize {
                while c[x] != x {
                    x = c[x];
                }
                x
            }
            for &(a, b) in pick.iter() {
                let (ra, rb) = (root(&mut comp, a), root(&mut comp, b));
                if ra == rb {
                    return;
                }
                comp[ra] = rb;
            }
            let w: f64 = pick.iter().map(|&(a, b)| s[(a, b)]).sum();
            *best = best.max(w);
            return;
        }
        for k in from..pairs.len() {
            pick.push(pairs[k]);
            rec(pairs, k + 1, pick, m, s, best);
            pick.pop();
        }
    }
    rec(&pairs, 0, &mut pick, m, s, &mut best);
    best
}

fn tree_weight(s: &Tensor2, edges: &[(usize, usize)]) -> f64 {
    edges.iter().map(|&(a, b)| s[(a, b)]).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn edge_count_law_holds_for_every_variant((n, edges) in simple_graph(50), m in 1usize..=5) {
        let g = graph(n, m, edges);
        for v in VARIANTS {
            let nsg = build_nsg(&g, v);
            prop_assert_eq!(nsg.edges.len(), expected_edge_count(n, m, g.edges.len(), v));
            let distinct: HashSet<_> = nsg.edges.iter().map(|&(a, b, _)| (a, b)).collect();
            prop_assert_eq!(distinct.len(), nsg.edges.len(), "{} NSG has a parallel edge", v);
            prop_assert!(nsg.edges.iter().all(|&(a, b, _)| a < b && b < n * m));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Without the intra-node cliques the self-type NSG is `m` disjoint
    /// copies of the input; `(u, t) -> u` is the isomorphism onto copy `t`.
    #[test]
    fn self_type_without_intra_edges_is_disjoint_copies((n, edges) in simple_graph(12), m in 1usize..=5) {
        let g = graph(n, m, edges);
        let nsg = build_nsg(&g, EdgeVariant::SelfType);
        let original: BTreeSet<(usize, usize)> = g.edges.iter().copied().collect();
        let mut copies = vec![BTreeSet::new(); m];
        for &(a, b, r) in &nsg.edges {
            if r == RelationType::IntraNode {
                prop_assert_eq!(nsg.origin(a), nsg.origin(b));
                continue;
            }
            prop_assert_eq!(nsg.node_type(a), nsg.node_type(b), "edge leaves its copy");
            copies[nsg.node_type(a)].insert((nsg.origin(a), nsg.origin(b)));
        }
        for copy in &copies {
            prop_assert_eq!(copy, &original);
        }
    }

    #[test]
    fn relation_types_match_endpoint_modalities((n, edges) in simple_graph(15), m in 1usize..=4) {
        let g = graph(n, m, edges);
        for v in VARIANTS {
            for &(a, b, r) in &build_nsg(&g, v).edges {
                let same_node = a / m == b / m;
                let same_type = a % m == b % m;
                let want = match (same_node, same_type) {
                    (true, false) => RelationType::IntraNode,
                    (false, true) => RelationType::InterSelf,
                    (false, false) => RelationType::InterCross,
                    (true, true) => unreachable!("self-loop"),
                };
                prop_assert_eq!(r, want);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn exact_tree_matches_brute_force(s in (1usize..=6).prop_flat_map(similarity)) {
        let tree = exact_max_spanning_tree(&s);
        prop_assert!(tree.is_spanning_tree(s.rows()));
        let best = brute_force_best(&s);
        prop_assert!((tree_weight(&s, &tree.edges) - best).abs() < 1e-12);
        prop_assert!((tree.total_weight - best).abs() < 1e-12);
    }

    #[test]
    fn approximate_tree_is_exact_when_one_batch_covers_everything(
        m in 2usize..=12,
        c0 in 1usize..=4,
        extra in 0usize..=3,
        seed in any::<u64>(),
        values in proptest::collection::vec(-1.0f64..1.0, 12 * 3),
    ) {
        let features = Tensor2::from_fn(m, 3, |i, j| values[i * 3 + j]);
        let cfg = MstConfig { c0, c1: m + extra, seed, mode: MstMode::Approximate };
        let s = cosine_similarity(&features);
        let approx = approx_max_spanning_tree(&features, &cfg, 0).unwrap();
        let exact = exact_max_spanning_tree(&s);
        prop_assert!(approx.is_spanning_tree(m));
        prop_assert!((tree_weight(&s, &approx.edges) - tree_weight(&s, &exact.edges)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_tree_spans_up_to_64_modalities(
        m in 2usize..=64,
        c0 in 1usize..=6,
        c1 in 1usize..=16,
        approx in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = 3;
        let mut r = nsg_core::rng::stream(seed, "test/span", 0);
        let stacked = nsg_core::hgnn::random_features(n * m, 4, &mut r);
        let cfg = MstConfig {
            c0,
            c1,
            seed,
            mode: if approx { MstMode::Approximate } else { MstMode::Exact },
        };
        let trees = build_trees(&stacked, m, &cfg).unwrap();
        prop_assert_eq!(trees.len(), n);
        for (u, t) in trees.iter().enumerate() {
            prop_assert_eq!(t.node, u);
            prop_assert!(t.is_spanning_tree(m));
        }
        let sparse = build_sparse_nsg(n, m, &[(0, 1), (1, 2)], EdgeVariant::SelfType, &trees).unwrap();
        prop_assert_eq!(sparse.count(RelationType::IntraNode), n * (m - 1));
    }
}
