use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use num_rational::Ratio;
use proptest::prelude::*;
use urtf::pairing::{
    deduplicate, exact_matching, greedy_matching, matching_score, pair_corpus, partition_by_class, ClassSet,
    PairingConfig, PairingGraph,
};
use urtf::sel::{linearize_sel, SelRecord, SpotGroup};
use urtf::synth::{gen_corpus, gen_distribution, read_tasks, write_corpus, DistConfig, Instance};

/// Best matching weight by exhaustive search.
fn brute_force(g: &PairingGraph) -> i64 {
    fn go(g: &PairingGraph, used: &mut Vec<bool>) -> i64 {
        let Some(i) = used.iter().position(|u| !u) else {
            return 0;
        };
        used[i] = true;
        let mut best = go(g, used);
        for j in i + 1..g.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(g.weight(i, j) + go(g, used));
                used[j] = false;
            }
        }
        used[i] = false;
        best
    }
    go(g, &mut vec![false; g.len()])
}

fn random_graph(n: usize, weights: &[i64]) -> PairingGraph {
    let mut k = 0;
    let mut table = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            table.insert((i, j), weights[k % weights.len()]);
            k += 1;
        }
    }
    PairingGraph::from_weights((0..n).collect(), |i, j| table[&(i, j)])
}

fn check_valid(g: &PairingGraph, pairs: &[(usize, usize)], leftovers: &[usize]) {
    let mut seen = BTreeSet::new();
    for &(a, b) in pairs {
        assert!(a != b && seen.insert(a) && seen.insert(b));
    }
    for &l in leftovers {
        assert!(seen.insert(l));
    }
    assert_eq!(seen.len(), g.len());
}

fn class_set() -> impl Strategy<Value = ClassSet> {
    prop::collection::btree_set(prop::sample::select(vec!["A", "B", "C", "D", "E", "F"]), 1..5)
        .prop_map(|s| s.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn exact_matches_brute_force(n in 0usize..=8, weights in prop::collection::vec(0i64..50, 28)) {
        let g = random_graph(n, &weights);
        let m = exact_matching(&g);
        check_valid(&g, &m.pairs, &m.leftovers);
        prop_assert_eq!(m.total_weight, brute_force(&g));
    }

    #[test]
    fn greedy_is_half_approximate(n in 0usize..=8, weights in prop::collection::vec(0i64..50, 28)) {
        let g = random_graph(n, &weights);
        let greedy = greedy_matching(&g);
        check_valid(&g, &greedy.pairs, &greedy.leftovers);
        prop_assert!(2 * greedy.total_weight >= exact_matching(&g).total_weight);
    }
}

proptest! {
    #[test]
    fn phi_is_symmetric_and_scaled_exactly(sets in prop::collection::vec(class_set(), 1..12)) {
        let refs: Vec<&ClassSet> = sets.iter().collect();
        let g = PairingGraph::from_class_sets((0..sets.len()).collect(), &refs).unwrap();
        prop_assert!(g.exact);
        for i in 0..sets.len() {
            for j in 0..sets.len() {
                let phi = matching_score(&sets[i], &sets[j]).unwrap();
                prop_assert_eq!(phi, matching_score(&sets[j], &sets[i]).unwrap());
                if i != j {
                    prop_assert_eq!(Ratio::new(g.weight(i, j) as u64, g.scale), phi);
                }
            }
        }
    }

    #[test]
    fn dedup_assigns_each_instance_once(sets in prop::collection::vec(class_set(), 0..30)) {
        let dedup = deduplicate(&partition_by_class(sets.iter().enumerate()));
        let mut owner = BTreeMap::new();
        for (class, ids) in &dedup.classes {
            for id in ids {
                prop_assert!(owner.insert(*id, class.clone()).is_none());
                prop_assert!(sets[*id].contains(class));
            }
        }
        prop_assert_eq!(owner.len(), sets.len());
    }
}

fn instance(id: &str, spots: &[&str]) -> Instance {
    let text = spots.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>().join(" ");
    let record = SelRecord {
        groups: spots.iter().map(|s| SpotGroup::new(*s, s.to_lowercase())).collect(),
    };
    Instance {
        id: id.into(),
        text,
        spots: spots.iter().map(|s| s.to_string()).collect(),
        assos: vec![],
        sel: linearize_sel(&record).unwrap(),
    }
}

#[test]
fn empty_corpus_pairs_to_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "").unwrap();
    let out = dir.path().join("t.jsonl");
    let report = pair_corpus(&corpus, &out, &PairingConfig::default()).unwrap();
    assert_eq!(report.read_passes, 2);
    assert_eq!(report.pairs + report.self_pairs, 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn five_in_one_class() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let insts: Vec<Instance> = (0..5).map(|i| instance(&format!("i{i}"), &["Per"])).collect();
    write_corpus(&insts, &corpus).unwrap();
    let out = dir.path().join("t.jsonl");
    let report = pair_corpus(&corpus, &out, &PairingConfig::default()).unwrap();
    assert_eq!((report.pairs, report.self_pairs, report.read_passes), (2, 1, 2));
    let tasks: Vec<_> = read_tasks(&out).unwrap().map(Result::unwrap).collect();
    assert_eq!(tasks.len(), 3);
    assert_eq!(tasks.iter().filter(|t| t.support == t.query).count(), 1);
}

#[test]
fn malformed_lines_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let good = serde_json::to_string(&instance("a", &["Per"])).unwrap();
    let bad_sel = serde_json::to_string(&Instance {
        sel: "((Per: x".into(),
        ..instance("b", &["Per"])
    })
    .unwrap();
    let empty = serde_json::to_string(&Instance {
        sel: "()".into(),
        ..instance("c", &[])
    })
    .unwrap();
    fs::write(&corpus, format!("{good}\nnot json\n{bad_sel}\n{empty}\n{good}\n")).unwrap();
    let out = dir.path().join("t.jsonl");
    let report = pair_corpus(&corpus, &out, &PairingConfig::default()).unwrap();
    assert_eq!(report.instances, 5);
    assert_eq!(report.skipped, 3);
    assert_eq!(report.pairs, 1);
}

#[test]
fn synthetic_corpus_is_covered_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dist = gen_distribution(&DistConfig::default(), 11).unwrap();
    let insts = gen_corpus(&dist, 600, 12);
    let corpus = dir.path().join("c.jsonl");
    write_corpus(&insts, &corpus).unwrap();

    let config = PairingConfig {
        exact_threshold: 30,
    };
    let out1 = dir.path().join("t1.jsonl");
    let out2 = dir.path().join("t2.jsonl");
    let report = pair_corpus(&corpus, &out1, &config).unwrap();
    pair_corpus(&corpus, &out2, &config).unwrap();
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    assert_eq!(report.read_passes, 2);
    assert_eq!(report.pairs * 2 + report.self_pairs, 600);

    let mut seen = BTreeMap::new();
    for task in read_tasks(&out1).unwrap() {
        let task = task.unwrap();
        let classes = |i: &Instance| urtf::sel::extract_class_set(&i.record().unwrap());
        assert!(classes(&task.support).contains(&task.class));
        assert!(classes(&task.query).contains(&task.class));
        *seen.entry(task.support.id.clone()).or_insert(0) += 1;
        if task.support != task.query {
            *seen.entry(task.query.id.clone()).or_insert(0) += 1;
        }
    }
    assert_eq!(seen.len(), 600);
    assert!(seen.values().all(|n| *n == 1));
}
