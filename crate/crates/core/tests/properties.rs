#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use proptest::sample::Index;
use std::collections::BTreeSet;
use std::sync::Arc;

use stepstone::archive::{AgentNode, Archive, DomainScores};
use stepstone::evaluation::{
    numbered_tasks, staged_evaluate, Domain, DomainSpec, EvalContext, GatePolicy, ScriptedEvaluator,
    StagedEvalPolicy,
};
use stepstone::generation::sandbox::SandboxLimits;
use stepstone::metrics::{
    bootstrap_ci, growth_score, improvement_at_k, transfer_select, BootstrapParams, GrowthScoreParams,
};
use stepstone::selection::{selection_distribution, Candidate, SelectionPolicy};
use stepstone::{Exec, Mode};

/// Parent links and scores of a random rooted tree.
#[derive(Debug, Clone)]
struct Tree {
    parents: Vec<Option<usize>>,
    scores: Vec<f64>,
}

fn tree(max: usize) -> impl Strategy<Value = Tree> {
    (1..=max).prop_flat_map(|n| {
        (prop::collection::vec(any::<Index>(), n), prop::collection::vec(0.0..=1.0f64, n)).prop_map(
            move |(idx, scores)| Tree {
                parents: (0..n).map(|i| (i > 0).then(|| idx[i].index(i))).collect(),
                scores,
            },
        )
    })
}

fn build(t: &Tree) -> Archive {
    let node = |i: usize| {
        AgentNode::new(i as u64, t.parents[i].map(|p| p as u64), format!("n{i}"))
            .with_score("d", DomainScores::train_only(t.scores[i]))
    };
    let mut a = Archive::with_root(Mode::Full, "prop", node(0)).unwrap();
    for i in 1..t.parents.len() {
        a.add_node(node(i)).unwrap();
    }
    a
}

/// reach[i][j]: j is reachable from i by one or more child edges.
fn closure(t: &Tree) -> Vec<Vec<bool>> {
    let n = t.parents.len();
    let mut reach = vec![vec![false; n]; n];
    for (j, p) in t.parents.iter().enumerate() {
        if let Some(p) = p {
            reach[*p][j] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Depth of every node by breadth-first search from the root.
fn depths(t: &Tree) -> Vec<u32> {
    let n = t.parents.len();
    let mut depth = vec![u32::MAX; n];
    depth[0] = 0;
    let mut frontier = vec![0usize];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for v in 0..n {
                if t.parents[v] == Some(u) {
                    depth[v] = depth[u] + 1;
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    depth
}

fn growth_oracle(t: &Tree, i: usize, gamma: f64) -> Option<f64> {
    let reach = closure(t);
    let depth = depths(t);
    let ds: Vec<usize> = (0..t.parents.len()).filter(|&j| reach[i][j]).collect();
    if ds.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &j in &ds {
        total += (t.scores[j] - t.scores[i]) * gamma.powi((depth[j] - depth[i]) as i32);
    }
    Some(total / ds.len() as f64)
}

fn candidates(scores: &[f64], children: &[u32]) -> Vec<Candidate> {
    scores
        .iter()
        .zip(children)
        .enumerate()
        .map(|(i, (&score, &compiled_children))| Candidate {
            id: i as u64,
            score,
            compiled_children,
        })
        .collect()
}

fn policy() -> impl Strategy<Value = SelectionPolicy> {
    prop_oneof![
        (0.5..30.0f64, 1usize..6).prop_map(|(lambda, midpoint_pool)| SelectionPolicy::ScoreChildProp {
            lambda,
            midpoint_pool
        }),
        Just(SelectionPolicy::UniformRandom),
        (0.01..5.0f64).prop_map(|temperature| SelectionPolicy::Softmax { temperature }),
        (0.0..3.0f64, any::<bool>()).prop_map(|(exploration_weight, stagnation)| SelectionPolicy::Ucb {
            exploration_weight,
            stagnation
        }),
    ]
}

fn view_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<u32>)> {
    (1usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(0u32..10, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn descendants_match_closure(t in tree(12)) {
        let a = build(&t);
        let reach = closure(&t);
        for i in 0..t.parents.len() {
            let expect: BTreeSet<u64> = (0..t.parents.len()).filter(|&j| reach[i][j]).map(|j| j as u64).collect();
            prop_assert_eq!(a.descendants(i as u64).unwrap(), expect);
        }
    }

    #[test]
    fn distance_matches_depth_difference(t in tree(12)) {
        let a = build(&t);
        let reach = closure(&t);
        let depth = depths(&t);
        for i in 0..t.parents.len() {
            for j in 0..t.parents.len() {
                let got = a.tree_distance(i as u64, j as u64);
                if reach[i][j] {
                    prop_assert_eq!(got.unwrap(), depth[j] - depth[i]);
                } else {
                    prop_assert!(got.is_err());
                }
            }
        }
    }

    #[test]
    fn lineage_matches_parent_walk(t in tree(12)) {
        let a = build(&t);
        for i in 0..t.parents.len() {
            let mut walk = vec![i as u64];
            let mut cur = i;
            while let Some(p) = t.parents[cur] {
                walk.push(p as u64);
                cur = p;
            }
            walk.reverse();
            prop_assert_eq!(a.lineage(i as u64).unwrap(), walk);
        }
    }

    #[test]
    fn child_counts_match_edges(t in tree(12)) {
        let a = build(&t);
        a.validate().unwrap();
        for i in 0..t.parents.len() {
            let count = t.parents.iter().filter(|p| **p == Some(i)).count() as u32;
            prop_assert_eq!(a.get(i as u64).unwrap().compiled_children, count);
        }
    }

    #[test]
    fn growth_and_transfer_match_enumeration(t in tree(12), gamma in 0.05..=1.0f64) {
        let a = build(&t);
        let mut best: Option<(u64, f64)> = None;
        let reach = closure(&t);
        for i in 0..t.parents.len() {
            let oracle = growth_oracle(&t, i, gamma);
            match oracle {
                None => prop_assert!(growth_score(&a, i as u64, gamma).is_err()),
                Some(g) => {
                    prop_assert_eq!(growth_score(&a, i as u64, gamma).unwrap(), g);
                    let n_desc = reach[i].iter().filter(|&&r| r).count();
                    if n_desc >= 3 && best.is_none_or(|(_, b)| g > b) {
                        best = Some((i as u64, g));
                    }
                }
            }
        }
        let params = GrowthScoreParams { gamma, min_descendants: 3 };
        match best {
            None => prop_assert!(transfer_select(&a, &params).is_err()),
            Some(expect) => prop_assert_eq!(transfer_select(&a, &params).unwrap(), expect),
        }
    }

    #[test]
    fn distributions_are_normalized((scores, children) in view_strategy(), policy in policy()) {
        let b = selection_distribution(&candidates(&scores, &children), &policy).unwrap();
        let total: f64 = b.probabilities.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        prop_assert!(b.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
        if let SelectionPolicy::ScoreChildProp { .. } = policy {
            for ((w, s), h) in b.weights.iter().zip(&b.sigmoid).zip(&b.novelty) {
                prop_assert_eq!(*w, s * h);
            }
        }
    }

    #[test]
    fn score_child_prop_monotone(
        (scores, children) in view_strategy(),
        who in any::<Index>(),
        bump in 0.0..0.5f64,
        extra in 1u32..5,
    ) {
        let policy = SelectionPolicy::default();
        let i = who.index(scores.len());
        let base = selection_distribution(&candidates(&scores, &children), &policy).unwrap();

        // raise the score while keeping the top-m membership fixed
        let mut raised = scores.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        let rank = |v: &[f64]| {
            let mut ids: Vec<usize> = (0..v.len()).collect();
            ids.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
            ids.truncate(3);
            ids.sort();
            ids
        };
        if rank(&raised) == rank(&scores) {
            let up = selection_distribution(&candidates(&raised, &children), &policy).unwrap();
            prop_assert!(up.probabilities[i] >= base.probabilities[i] - 1e-15);
        }

        let mut more = children.clone();
        more[i] += extra;
        let crowded = selection_distribution(&candidates(&scores, &more), &policy).unwrap();
        prop_assert!(crowded.probabilities[i] <= base.probabilities[i] + 1e-15);
    }

    #[test]
    fn permutation_equivariance((scores, children) in view_strategy(), policy in policy(), seed in any::<u64>()) {
        let n = scores.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let ps: Vec<f64> = perm.iter().map(|&k| scores[k]).collect();
        let pc: Vec<u32> = perm.iter().map(|&k| children[k]).collect();
        // ids keep their original identity so tie-breaks follow the node
        let view: Vec<Candidate> = perm
            .iter()
            .zip(ps.iter().zip(&pc))
            .map(|(&k, (&score, &compiled_children))| Candidate { id: k as u64, score, compiled_children })
            .collect();
        let base = selection_distribution(&candidates(&scores, &children), &policy).unwrap();
        let permuted = selection_distribution(&view, &policy).unwrap();
        for (pos, &k) in perm.iter().enumerate() {
            prop_assert!((permuted.probabilities[pos] - base.probabilities[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn ucb_argmax_shift_invariant(normalized in prop::collection::vec(0.0..=1.0f64, 1..12), shift in -5.0..5.0f64, w in 0.0..3.0f64) {
        let children: Vec<u32> = (0..normalized.len() as u32).map(|i| i % 4).collect();
        let a = stepstone::selection::ucb_scores(&normalized, &children, w);
        let shifted: Vec<f64> = normalized.iter().map(|v| v + shift).collect();
        let b = stepstone::selection::ucb_scores(&shifted, &children, w);
        let arg = |v: &[f64]| {
            let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v.iter().position(|&x| x >= top - 1e-9).unwrap()
        };
        prop_assert_eq!(arg(&a), arg(&b));
    }

    #[test]
    fn imp_at_k_is_max_minus_initial(initial in 0.0..=1.0f64, generated in prop::collection::vec(0.0..=1.0f64, 0..20), k in 1usize..25) {
        let kept = &generated[..generated.len().min(k)];
        let mut expect = 0.0;
        if !kept.is_empty() {
            let mut best = kept[0];
            for &g in kept {
                if g > best {
                    best = g;
                }
            }
            expect = best - initial;
        }
        prop_assert_eq!(improvement_at_k(initial, &generated, k), expect);
    }

    #[test]
    fn bootstrap_brackets_median(samples in prop::collection::vec(-10.0..10.0f64, 1..30), seed in any::<u64>()) {
        let params = BootstrapParams { resamples: 200, level: 0.95, seed };
        let ci = bootstrap_ci(&samples, &params, Exec::Sequential).unwrap();
        prop_assert!(ci.lower <= ci.median && ci.median <= ci.upper, "{:?}", ci);
    }

    #[test]
    fn aggregate_bounds_under_gating(
        scores in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], 2..20),
        subset in any::<Index>(),
        k in 0usize..5,
    ) {
        let n = scores.len();
        let subset = 1 + subset.index(n);
        let spec = DomainSpec::new(
            "d",
            numbered_tasks("t", n),
            StagedEvalPolicy { subset_size: subset, gate: GatePolicy::MinSuccesses { k }, full_size: n },
        );
        let ctx = EvalContext {
            iteration: 0,
            slot: 0,
            payload_ref: "p".into(),
            payload_dir: "/nonexistent".into(),
            limits: SandboxLimits::default(),
            master_seed: 0,
            exec: Exec::Sequential,
            concurrency: 1,
        };
        let eval = |s: &[f64]| {
            let ev = ScriptedEvaluator::new(s.iter().enumerate().map(|(i, &v)| (format!("t{i}"), v)));
            staged_evaluate(&ctx, &Domain::new(spec.clone(), Arc::new(ev))).train
        };
        let r = eval(&scores);
        if r.gated_out {
            prop_assert!(r.aggregate <= subset as f64 / n as f64 + 1e-12);
        }
        // raising any score never lowers the aggregate
        for i in 0..n {
            let mut up = scores.clone();
            up[i] = 1.0;
            prop_assert!(eval(&up).aggregate >= r.aggregate - 1e-12);
        }
    }
}
