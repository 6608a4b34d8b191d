//! Span-based offset micro-F1.
//!
//! Records are grounded back onto the source text by character offsets,
//! turned into task-specific tuples and compared as multisets: a
//! predicted tuple counts only if an identical gold tuple is left to
//! claim it.
//!
//! Sentiment triples are encoded with the target as a spot group and
//! the opinion as an asso group whose name is the polarity, e.g.
//! `((aspect: battery life(positive: great)))`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sel::SelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Ner,
    Rte,
    EvtTrg,
    EvtArg,
    Senti,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Ner,
        TaskKind::Rte,
        TaskKind::EvtTrg,
        TaskKind::EvtArg,
        TaskKind::Senti,
    ];

    pub fn arity(self) -> usize {
        match self {
            TaskKind::Ner | TaskKind::EvtTrg => 1,
            TaskKind::EvtArg => 2,
            TaskKind::Rte | TaskKind::Senti => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ner => "ner",
            TaskKind::Rte => "rte",
            TaskKind::EvtTrg => "evt-trg",
            TaskKind::EvtArg => "evt-arg",
            TaskKind::Senti => "senti",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task kind {s:?}"))
    }
}

/// Character offsets `[start, end)` of a span in the source text.
pub type CharSpan = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Offsets {
    /// The element is a label only (relation type, polarity, ...).
    Absent,
    /// The span was not found in the text.
    Unmatched,
    At(usize, usize),
}

impl From<Option<CharSpan>> for Offsets {
    fn from(span: Option<CharSpan>) -> Self {
        match span {
            Some((s, e)) => Offsets::At(s, e),
            None => Offsets::Unmatched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element {
    pub label: String,
    pub offsets: Offsets,
}

impl Element {
    fn new(label: impl Into<String>, offsets: impl Into<Offsets>) -> Self {
        Element {
            label: label.into(),
            offsets: offsets.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroundedTuple {
    pub task_kind: TaskKind,
    pub elements: Vec<Element>,
}

impl GroundedTuple {
    /// False when any span failed to ground; such tuples never match.
    pub fn is_grounded(&self) -> bool {
        self.elements.iter().all(|e| e.offsets != Offsets::Unmatched)
    }
}

/// Grounded offsets for every span of a record, in record order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordOffsets {
    pub spots: Vec<Option<CharSpan>>,
    /// `assos[g][a]` grounds asso `a` of spot group `g`.
    pub assos: Vec<Vec<Option<CharSpan>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TupleWarning {
    /// An RTE tail span matched no spot group; the tail is left untyped.
    UnresolvableTail { group: usize, asso: usize, span: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tuples {
    pub tuples: Vec<GroundedTuple>,
    pub warnings: Vec<TupleWarning>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfScore {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f1,
        }
    }

    /// JSON object with P/R/F1 printed to 4 decimal places.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"tp\": {}, \"fp\": {}, \"fn\": {}, \"precision\": {:.4}, \"recall\": {:.4}, \"f1\": {:.4}}}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }
}

fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices().nth(char_idx).map_or(text.len(), |(b, _)| b)
}

/// Earliest occurrence of `needle` starting at char index `from` or later.
fn find_from(text: &str, needle: &str, from: usize) -> Option<CharSpan> {
    if needle.is_empty() {
        return None;
    }
    let byte_from = char_to_byte(text, from);
    let b = text[byte_from..].find(needle)? + byte_from;
    let start = text[..b].chars().count();
    Some((start, start + needle.chars().count()))
}

/// Grounds every span of `record` in `text`.
///
/// Spot spans are matched left to right: each one is the earliest
/// occurrence strictly after the previous spot match's start. An asso
/// span is the earliest occurrence at or after its own spot group's
/// start, or failing that the earliest occurrence anywhere; asso spans
/// do not move the cursor. Unfound spans are `None`.
pub fn reconstruct_offsets(record: &SelRecord, text: &str) -> RecordOffsets {
    let mut spots = Vec::with_capacity(record.groups.len());
    let mut assos = Vec::with_capacity(record.groups.len());
    let mut cursor = 0;
    for group in &record.groups {
        let spot = find_from(text, &group.info_span, cursor);
        if let Some((start, _)) = spot {
            cursor = start + 1;
        }
        let anchor = spot.map_or(0, |(s, _)| s);
        assos.push(
            group
                .assos
                .iter()
                .map(|a| find_from(text, &a.info_span, anchor).or_else(|| find_from(text, &a.info_span, 0)))
                .collect(),
        );
        spots.push(spot);
    }
    RecordOffsets { spots, assos }
}

pub fn to_tuples(record: &SelRecord, text: &str, task_kind: TaskKind) -> Tuples {
    let offsets = reconstruct_offsets(record, text);
    let mut out = Tuples::default();
    for (g, group) in record.groups.iter().enumerate() {
        let spot = offsets.spots[g];
        match task_kind {
            TaskKind::Ner | TaskKind::EvtTrg => out.tuples.push(GroundedTuple {
                task_kind,
                elements: vec![Element::new(&group.spot_name, spot)],
            }),
            TaskKind::Rte => {
                for (a, asso) in group.assos.iter().enumerate() {
                    let tail = match record.groups.iter().position(|h| h.info_span == asso.info_span) {
                        Some(h) => Element::new(&record.groups[h].spot_name, offsets.spots[h]),
                        None => {
                            out.warnings.push(TupleWarning::UnresolvableTail {
                                group: g,
                                asso: a,
                                span: asso.info_span.clone(),
                            });
                            Element::new("", offsets.assos[g][a])
                        }
                    };
                    out.tuples.push(GroundedTuple {
                        task_kind,
                        elements: vec![
                            Element::new(&group.spot_name, spot),
                            Element::new(&asso.asso_name, Offsets::Absent),
                            tail,
                        ],
                    });
                }
            }
            TaskKind::EvtArg => {
                for (a, asso) in group.assos.iter().enumerate() {
                    out.tuples.push(GroundedTuple {
                        task_kind,
                        elements: vec![
                            Element::new(&group.spot_name, Offsets::Absent),
                            Element::new(&asso.asso_name, offsets.assos[g][a]),
                        ],
                    });
                }
            }
            TaskKind::Senti => {
                for (a, asso) in group.assos.iter().enumerate() {
                    out.tuples.push(GroundedTuple {
                        task_kind,
                        elements: vec![
                            Element::new("", spot),
                            Element::new("", offsets.assos[g][a]),
                            Element::new(&asso.asso_name, Offsets::Absent),
                        ],
                    });
                }
            }
        }
    }
    out
}

/// Exact-match multiset comparison. Ungrounded tuples never match.
pub fn match_multisets(gold: &[GroundedTuple], pred: &[GroundedTuple]) -> Counts {
    let mut available: HashMap<&GroundedTuple, usize> = HashMap::new();
    for t in gold.iter().filter(|t| t.is_grounded()) {
        *available.entry(t).or_default() += 1;
    }
    let mut tp = 0;
    for t in pred {
        if let Some(n) = available.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Micro-averaged P/R/F1 over per-instance counts.
pub fn micro_f1<I: IntoIterator<Item = Counts>>(counts: I) -> PrfScore {
    PrfScore::from_counts(counts.into_iter().sum())
}

/// One scored instance: gold and predicted records over the same text.
#[derive(Debug, Clone)]
pub struct ScoredInstance<'a> {
    pub text: &'a str,
    pub gold: &'a SelRecord,
    pub pred: &'a SelRecord,
}

impl ScoredInstance<'_> {
    pub fn counts(&self, task_kind: TaskKind) -> Counts {
        let gold = to_tuples(self.gold, self.text, task_kind).tuples;
        let pred = to_tuples(self.pred, self.text, task_kind).tuples;
        match_multisets(&gold, &pred)
    }

    /// Number of gold entities (NER tuples).
    pub fn entity_count(&self) -> usize {
        self.gold.groups.len()
    }
}

/// Entity-count buckets given by ascending lower bounds; the first bound
/// must be 0 so every instance lands in some bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Buckets {
    lower_bounds: Vec<usize>,
}

impl Buckets {
    pub fn new(mut lower_bounds: Vec<usize>) -> Result<Self, String> {
        lower_bounds.sort_unstable();
        lower_bounds.dedup();
        if lower_bounds.first() != Some(&0) {
            return Err("bucket lower bounds must start at 0".into());
        }
        Ok(Buckets { lower_bounds })
    }

    pub fn single() -> Self {
        Buckets { lower_bounds: vec![0] }
    }

    pub fn len(&self) -> usize {
        self.lower_bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_bounds.is_empty()
    }

    pub fn index_of(&self, count: usize) -> usize {
        self.lower_bounds.partition_point(|&b| b <= count) - 1
    }

    pub fn label(&self, index: usize) -> String {
        let lo = self.lower_bounds[index];
        match self.lower_bounds.get(index + 1) {
            Some(&hi) if hi == lo + 1 => lo.to_string(),
            Some(&hi) => format!("{lo}-{}", hi - 1),
            None => format!("{lo}+"),
        }
    }
}

impl Default for Buckets {
    fn default() -> Self {
        Buckets {
            lower_bounds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Micro-F1 computed independently inside each entity-count bucket.
pub fn score_grouped(dataset: &[ScoredInstance<'_>], task_kind: TaskKind, buckets: &Buckets) -> Vec<(String, PrfScore)> {
    let mut per_bucket = vec![Counts::default(); buckets.len()];
    for inst in dataset {
        let b = buckets.index_of(inst.entity_count());
        per_bucket[b] = per_bucket[b] + inst.counts(task_kind);
    }
    per_bucket
        .into_iter()
        .enumerate()
        .map(|(i, c)| (buckets.label(i), PrfScore::from_counts(c)))
        .collect()
}

pub fn score_dataset(dataset: &[ScoredInstance<'_>], task_kind: TaskKind) -> PrfScore {
    micro_f1(dataset.iter().map(|i| i.counts(task_kind)))
}

/// Report printed by the `score` command.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub task_kind: TaskKind,
    pub overall: PrfScore,
    pub buckets: Option<Vec<(String, PrfScore)>>,
}

impl ScoreReport {
    pub fn build(dataset: &[ScoredInstance<'_>], task_kind: TaskKind, buckets: Option<&Buckets>) -> Self {
        ScoreReport {
            task_kind,
            overall: score_dataset(dataset, task_kind),
            buckets: buckets.map(|b| score_grouped(dataset, task_kind, b)),
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = format!("{{\"{}\": {}", self.task_kind, self.overall.to_json());
        if let Some(buckets) = &self.buckets {
            out.push_str(", \"buckets\": {");
            for (i, (label, score)) in buckets.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "\"{label}\": {}", score.to_json());
            }
            out.push('}');
        }
        out.push('}');
        out
    }
}
