//! Support-query pairing.
//!
//! Each simulated IE task is a pair of instances: one support, one
//! query. Pairs are found class by class:
//!
//! 1. partition instances by every class name in their record;
//! 2. deduplicate, smallest class first, so each instance keeps exactly
//!    one class;
//! 3. inside each class, build the complete graph weighted by the
//!    matching score and take a maximum-weight matching.
//!
//! With `F(x)` the class set of `x`, the pairing score is
//! `rho(s, q) = (|F(s) ∩ F(q)| + 1) / |F(s)|` and the matching score is
//! `phi(x, y) = max(rho(x, y), rho(y, x))`. Both are exact rationals.

mod blossom;
pub mod pipeline;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pipeline::{bench_pair, pair_corpus, simulate_episodic, BenchReport, EpisodicConfig, EpisodicReport, PairingConfig, PairingReport};

pub type ClassSet = BTreeSet<String>;
pub type Score = Ratio<u64>;

pub const DEFAULT_EXACT_THRESHOLD: usize = 200;

/// Largest weight scale used when class-set sizes have a huge LCM.
const MAX_SCALE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("instance has an empty class set")]
    EmptyClassSet,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] crate::synth::SynthError),
}

/// Class name -> ordinals of the instances carrying that class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassIndex {
    pub classes: BTreeMap<String, Vec<usize>>,
}

impl ClassIndex {
    pub fn counts(&self) -> BTreeMap<&str, usize> {
        self.classes.iter().map(|(c, ids)| (c.as_str(), ids.len())).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Builds the class index in one pass over `(ordinal, class set)` items.
pub fn partition_by_class<'a, I>(instances: I) -> ClassIndex
where
    I: IntoIterator<Item = (usize, &'a ClassSet)>,
{
    let mut index = ClassIndex::default();
    for (ordinal, classes) in instances {
        for c in classes {
            index.classes.entry(c.clone()).or_default().push(ordinal);
        }
    }
    index
}

/// Keeps each instance only under the smallest class that claims it.
/// Classes are visited by ascending size, ties by name.
pub fn deduplicate(index: &ClassIndex) -> ClassIndex {
    let mut order: Vec<(&String, &Vec<usize>)> = index.classes.iter().collect();
    order.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| a.0.cmp(b.0)));
    let mut claimed = HashSet::new();
    let mut out = ClassIndex::default();
    for (class, ids) in order {
        let kept: Vec<usize> = ids.iter().copied().filter(|id| claimed.insert(*id)).collect();
        out.classes.insert(class.clone(), kept);
    }
    out
}

pub fn pairing_score(support: &ClassSet, query: &ClassSet) -> Result<Score, PairingError> {
    if support.is_empty() {
        return Err(PairingError::EmptyClassSet);
    }
    let overlap = support.intersection(query).count() as u64;
    Ok(Ratio::new(overlap + 1, support.len() as u64))
}

pub fn matching_score(x: &ClassSet, y: &ClassSet) -> Result<Score, PairingError> {
    Ok(pairing_score(x, y)?.max(pairing_score(y, x)?))
}

/// Complete weighted graph over one class subset. Weights are the
/// matching scores multiplied by `scale`, an integer chosen so every
/// score is represented exactly whenever possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingGraph {
    pub nodes: Vec<usize>,
    weights: Vec<i64>,
    pub scale: u64,
    /// False when the scale had to be capped and weights were rounded.
    pub exact: bool,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sorted_overlap(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

impl PairingGraph {
    pub fn from_weights<F: Fn(usize, usize) -> i64>(nodes: Vec<usize>, weight: F) -> Self {
        let n = nodes.len();
        let mut weights = vec![0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let w = weight(i, j);
                weights[i * n + j] = w;
                weights[j * n + i] = w;
            }
        }
        PairingGraph {
            nodes,
            weights,
            scale: 1,
            exact: true,
        }
    }

    /// Graph over `nodes` whose class sets are `sets` (same order).
    /// `weight(i, j) == matching_score(sets[i], sets[j]) * scale` when
    /// `exact` holds; since `phi = (|∩| + 1) / min(|x|, |y|)`, the LCM of
    /// the set sizes is always a valid scale.
    pub fn from_class_sets(nodes: Vec<usize>, sets: &[&ClassSet]) -> Result<Self, PairingError> {
        if sets.iter().any(|s| s.is_empty()) {
            return Err(PairingError::EmptyClassSet);
        }
        let sizes: BTreeSet<u64> = sets.iter().map(|s| s.len() as u64).collect();
        let mut scale = 1u64;
        let mut exact = true;
        for &size in &sizes {
            let next = scale / gcd(scale, size) * size;
            if next > MAX_SCALE {
                exact = false;
                scale = MAX_SCALE;
                break;
            }
            scale = next;
        }
        // Interned, sorted class ids make the intersections cheap.
        let mut names: BTreeMap<&str, u32> = BTreeMap::new();
        for set in sets {
            for c in set.iter() {
                let next = names.len() as u32;
                names.entry(c.as_str()).or_insert(next);
            }
        }
        let ids: Vec<Vec<u32>> = sets
            .iter()
            .map(|set| {
                let mut v: Vec<u32> = set.iter().map(|c| names[c.as_str()]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let weight = |i: usize, j: usize| -> i64 {
            let overlap = sorted_overlap(&ids[i], &ids[j]) as u128 + 1;
            let den = ids[i].len().min(ids[j].len()) as u128;
            let scaled = overlap * scale as u128;
            (if exact { scaled / den } else { (scaled + den / 2) / den }) as i64
        };
        let mut graph = PairingGraph::from_weights(nodes, weight);
        graph.scale = scale;
        graph.exact = exact;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scaled weight between local node indices `i` and `j`.
    pub fn weight(&self, i: usize, j: usize) -> i64 {
        self.weights[i * self.nodes.len() + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    Exact,
    Greedy,
}

/// Matched node pairs (in ascending local-index order) and unmatched
/// leftovers, both given as node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub leftovers: Vec<usize>,
    /// Sum of scaled weights of matched pairs.
    pub total_weight: i64,
    pub matcher: MatcherKind,
}

impl Matching {
    fn from_mates(graph: &PairingGraph, mate: &[Option<usize>], matcher: MatcherKind) -> Self {
        let mut pairs = Vec::new();
        let mut leftovers = Vec::new();
        let mut total_weight = 0;
        for (i, m) in mate.iter().enumerate() {
            match m {
                Some(j) if *j > i => {
                    pairs.push((graph.nodes[i], graph.nodes[*j]));
                    total_weight += graph.weight(i, *j);
                }
                Some(_) => {}
                None => leftovers.push(graph.nodes[i]),
            }
        }
        Matching {
            pairs,
            leftovers,
            total_weight,
            matcher,
        }
    }

    pub fn weight_as_f64(&self, scale: u64) -> f64 {
        self.total_weight as f64 / scale as f64
    }
}

/// Exact maximum-weight matching (blossom algorithm, O(n^3)).
pub fn exact_matching(graph: &PairingGraph) -> Matching {
    let n = graph.len();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j, graph.weight(i, j)));
        }
    }
    let mate = blossom::max_weight_matching(n, &edges);
    Matching::from_mates(graph, &mate, MatcherKind::Exact)
}

/// Greedy matching by descending weight, ties by local index pair.
///
/// Only a 1/2-approximation of the maximum weight; used for classes
/// above the exact threshold.
pub fn greedy_matching(graph: &PairingGraph) -> Matching {
    let n = graph.len();
    let mut edges: Vec<(i64, u32, u32)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let w = graph.weight(i, j);
            if w > 0 {
                edges.push((w, i as u32, j as u32));
            }
        }
    }
    edges.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mate = vec![None; n];
    for (_, i, j) in edges {
        let (i, j) = (i as usize, j as usize);
        if mate[i].is_none() && mate[j].is_none() {
            mate[i] = Some(j);
            mate[j] = Some(i);
        }
    }
    Matching::from_mates(graph, &mate, MatcherKind::Greedy)
}

/// Exact matching up to `exact_threshold` nodes, greedy above.
pub fn max_weight_matching(graph: &PairingGraph, exact_threshold: usize) -> Matching {
    if graph.len() <= exact_threshold {
        exact_matching(graph)
    } else {
        greedy_matching(graph)
    }
}

/// An instance as seen by role assignment.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub ordinal: usize,
    pub id: &'a str,
    pub classes: &'a ClassSet,
}

/// Orders a matched pair as `(support, query)`: the member whose
/// classes cover the other best (larger `rho` toward it) supports; ties
/// go to the smaller instance id.
pub fn assign_roles<'a>(x: Member<'a>, y: Member<'a>) -> (Member<'a>, Member<'a>) {
    let rho = |s: &Member, q: &Member| pairing_score(s.classes, q.classes).ok();
    let by_id = (x.id, x.ordinal).cmp(&(y.id, y.ordinal));
    match rho(&x, &y).cmp(&rho(&y, &x)).then(by_id.reverse()) {
        Ordering::Less => (y, x),
        _ => (x, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[&str]) -> ClassSet {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partition_example() {
        let a = set(&["A"]);
        let ab = set(&["A", "B"]);
        let empty = set(&[]);
        let index = partition_by_class([(1, &a), (2, &ab), (3, &empty)]);
        assert_eq!(index.classes["A"], vec![1, 2]);
        assert_eq!(index.classes["B"], vec![2]);
        assert_eq!(index.classes.len(), 2);
        assert!(partition_by_class(std::iter::empty()).is_empty());
    }

    #[test]
    fn dedup_keeps_smallest_class() {
        let a = set(&["A"]);
        let ab = set(&["A", "B"]);
        let dedup = deduplicate(&partition_by_class([(1, &a), (2, &ab)]));
        assert_eq!(dedup.classes["B"], vec![2]);
        assert_eq!(dedup.classes["A"], vec![1]);

        let index = ClassIndex {
            classes: BTreeMap::from([("A".into(), vec![1]), ("B".into(), vec![2])]),
        };
        assert_eq!(deduplicate(&index), index);

        let all = set(&["A", "B", "C"]);
        let index = partition_by_class([(1, &all), (2, &all), (3, &all)]);
        let dedup = deduplicate(&index);
        // Equal sizes: the lexicographically first class wins.
        assert_eq!(dedup.classes["A"], vec![1, 2, 3]);
        assert!(dedup.classes["B"].is_empty() && dedup.classes["C"].is_empty());
    }

    #[test]
    fn score_table() {
        let a = set(&["A"]);
        let b = set(&["B"]);
        let ab = set(&["A", "B"]);
        assert_eq!(pairing_score(&a, &a).unwrap(), Ratio::from_integer(2));
        assert_eq!(pairing_score(&ab, &a).unwrap(), Ratio::from_integer(1));
        assert_eq!(pairing_score(&a, &b).unwrap(), Ratio::from_integer(1));
        assert_eq!(matching_score(&ab, &a).unwrap(), Ratio::from_integer(2));
        assert_eq!(matching_score(&a, &b).unwrap(), Ratio::from_integer(1));
        let abc = set(&["A", "B", "C"]);
        assert_eq!(matching_score(&abc, &abc).unwrap(), Ratio::new(4, 3));
        assert!(matches!(pairing_score(&set(&[]), &a), Err(PairingError::EmptyClassSet)));
    }

    #[test]
    fn graph_weights_are_exact_multiples() {
        let s1 = set(&["A"]);
        let s2 = set(&["A", "B"]);
        let s3 = set(&["A", "B", "C"]);
        let g = PairingGraph::from_class_sets(vec![10, 11, 12], &[&s1, &s2, &s3]).unwrap();
        assert_eq!(g.scale, 6);
        assert!(g.exact);
        // phi(s2, s3) = max(3/2, 3/3) = 3/2
        assert_eq!(g.weight(1, 2), 9);
        assert_eq!(g.weight(2, 1), 9);
        assert_eq!(g.weight(0, 1), 12);
    }

    #[test]
    fn small_matchings() {
        let g = PairingGraph::from_weights(vec![7, 8], |_, _| 1);
        let m = exact_matching(&g);
        assert_eq!(m.pairs, vec![(7, 8)]);
        assert!(m.leftovers.is_empty());

        let w = |i: usize, j: usize| if (i, j) == (0, 1) || (i, j) == (2, 3) { 3 } else { 2 };
        let g = PairingGraph::from_weights(vec![1, 2, 3, 4], w);
        let m = exact_matching(&g);
        assert_eq!(m.pairs, vec![(1, 2), (3, 4)]);
        assert_eq!(m.total_weight, 6);

        let g = PairingGraph::from_weights(vec![0, 1, 2, 3, 4], |i, j| (i + j) as i64 + 1);
        for m in [exact_matching(&g), greedy_matching(&g)] {
            assert_eq!(m.leftovers.len(), 1);
            assert_eq!(m.pairs.len() * 2 + m.leftovers.len(), 5);
        }
    }

    #[test]
    fn threshold_selects_matcher() {
        let g = PairingGraph::from_weights((0..6).collect(), |_, _| 1);
        assert_eq!(max_weight_matching(&g, 6).matcher, MatcherKind::Exact);
        assert_eq!(max_weight_matching(&g, 5).matcher, MatcherKind::Greedy);
    }

    #[test]
    fn role_assignment() {
        let a = set(&["A"]);
        let ab = set(&["A", "B"]);
        let x = Member { ordinal: 5, id: "x", classes: &a };
        let y = Member { ordinal: 1, id: "y", classes: &ab };
        // rho(x, y) = 2, rho(y, x) = 1
        let (s, q) = assign_roles(x, y);
        assert_eq!((s.id, q.id), ("x", "y"));
        let (s, q) = assign_roles(y, x);
        assert_eq!((s.id, q.id), ("x", "y"));

        let u = Member { ordinal: 0, id: "b", classes: &a };
        let v = Member { ordinal: 1, id: "a", classes: &a };
        assert_eq!(assign_roles(u, v).0.id, "a");
        assert_eq!(assign_roles(v, u).0.id, "a");

        let (s, q) = assign_roles(u, u);
        assert_eq!(s.ordinal, q.ordinal);
    }
}
