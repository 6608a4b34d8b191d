//! Two-pass corpus pairing and the episodic-sampling baseline.
//!
//! Pass 1 streams the corpus and keeps only instance ids and class sets.
//! Pass 2 streams it again and writes each task as soon as its second
//! member has been read. The corpus is therefore read exactly twice.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::IteratorRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    assign_roles, deduplicate, max_weight_matching, partition_by_class, ClassSet, MatcherKind, Member, PairingError,
    PairingGraph, DEFAULT_EXACT_THRESHOLD,
};
use crate::sel::extract_class_set;
use crate::synth::{Instance, JsonlReader, PairedTask, SynthError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingConfig {
    /// Classes with at most this many instances use the exact matcher.
    pub exact_threshold: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub instances: usize,
    pub classes: usize,
    pub pairs: usize,
    pub self_pairs: usize,
    pub skipped: usize,
    pub read_passes: usize,
    pub wall_time_ms: u64,
    pub matcher: BTreeMap<String, MatcherKind>,
}

/// Hands out streaming passes over a corpus file and counts them.
struct CorpusSource<'a> {
    path: &'a Path,
    passes: usize,
}

impl<'a> CorpusSource<'a> {
    fn pass(&mut self) -> Result<JsonlReader<Instance>, PairingError> {
        self.passes += 1;
        Ok(JsonlReader::open(self.path)?)
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Alone { class: usize },
    Paired { partner: usize, support: bool, class: usize },
}

/// Class set of a parsed line, or `None` when the line must be skipped.
fn classes_of(ordinal: usize, item: Result<Instance, SynthError>) -> Result<Option<(String, ClassSet)>, PairingError> {
    let inst = match item {
        Ok(inst) => inst,
        Err(SynthError::Parse { line, message }) => {
            warn!("skipping line {line}: {message}");
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    match inst.record() {
        Ok(record) => {
            let classes = extract_class_set(&record);
            if classes.is_empty() {
                warn!("skipping instance {} (#{ordinal}): empty record", inst.id);
                Ok(None)
            } else {
                Ok(Some((inst.id, classes)))
            }
        }
        Err(e) => {
            warn!("skipping instance {} (#{ordinal}): {e}", inst.id);
            Ok(None)
        }
    }
}

/// Pairs every usable instance of `corpus` and writes the tasks to
/// `output` as JSONL. Output is identical across runs and thread counts.
pub fn pair_corpus(corpus: &Path, output: &Path, config: &PairingConfig) -> Result<PairingReport, PairingError> {
    let start = Instant::now();
    let mut source = CorpusSource {
        path: corpus,
        passes: 0,
    };

    let mut entries: Vec<Option<(String, ClassSet)>> = Vec::new();
    for (ordinal, item) in source.pass()?.enumerate() {
        entries.push(classes_of(ordinal, item)?);
    }
    let skipped = entries.iter().filter(|e| e.is_none()).count();

    let index = partition_by_class(
        entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|(_, c)| (i, c))),
    );
    let dedup = deduplicate(&index);
    let class_names: Vec<&String> = dedup.classes.keys().collect();

    let members: Vec<&Vec<usize>> = dedup.classes.values().collect();
    let matchings = members
        .par_iter()
        .enumerate()
        .filter(|(_, members)| !members.is_empty())
        .map(|(class, members)| {
            let sets: Vec<&ClassSet> = members.iter().map(|&o| &entries[o].as_ref().expect("indexed").1).collect();
            let graph = PairingGraph::from_class_sets(members.to_vec(), &sets)?;
            Ok((class, max_weight_matching(&graph, config.exact_threshold)))
        })
        .collect::<Result<Vec<_>, PairingError>>()?;

    let mut plan: Vec<Option<Slot>> = vec![None; entries.len()];
    let mut matcher = BTreeMap::new();
    let (mut pairs, mut self_pairs) = (0, 0);
    for (class, m) in &matchings {
        matcher.insert(class_names[*class].clone(), m.matcher);
        for &(a, b) in &m.pairs {
            let member = |o: usize| {
                let (id, classes) = entries[o].as_ref().expect("indexed");
                Member {
                    ordinal: o,
                    id,
                    classes,
                }
            };
            let (s, q) = assign_roles(member(a), member(b));
            plan[s.ordinal] = Some(Slot::Paired {
                partner: q.ordinal,
                support: true,
                class: *class,
            });
            plan[q.ordinal] = Some(Slot::Paired {
                partner: s.ordinal,
                support: false,
                class: *class,
            });
            pairs += 1;
        }
        for &o in &m.leftovers {
            plan[o] = Some(Slot::Alone { class: *class });
            self_pairs += 1;
        }
    }
    drop(entries);

    let mut out = BufWriter::new(File::create(output)?);
    let mut emit = |support: Instance, query: Instance, class: usize| -> Result<(), PairingError> {
        let task = PairedTask {
            support,
            query,
            class: class_names[class].clone(),
        };
        serde_json::to_writer(&mut out, &task).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    let mut pending: HashMap<usize, Instance> = HashMap::new();
    for (ordinal, item) in source.pass()?.enumerate() {
        let Some(slot) = plan.get(ordinal).copied().flatten() else {
            continue;
        };
        let inst = item?;
        match slot {
            Slot::Alone { class } => emit(inst.clone(), inst, class)?,
            Slot::Paired {
                partner,
                support,
                class,
            } => match pending.remove(&partner) {
                Some(other) if support => emit(inst, other, class)?,
                Some(other) => emit(other, inst, class)?,
                None => {
                    pending.insert(ordinal, inst);
                }
            },
        }
    }
    drop(emit);
    out.flush()?;
    debug_assert!(pending.is_empty());

    let report = PairingReport {
        instances: plan.len(),
        classes: index.classes.len(),
        pairs,
        self_pairs,
        skipped,
        read_passes: source.passes,
        wall_time_ms: start.elapsed().as_millis() as u64,
        matcher,
    };
    info!(
        "paired {} instances: {} pairs, {} self-pairs, {} skipped",
        report.instances, report.pairs, report.self_pairs, report.skipped
    );
    Ok(report)
}

/// Episodic N-way K-shot sampler over a corpus that is not held in
/// memory. Only class names and counts are kept; each sampled instance
/// is found by seeking to a random byte offset, skipping to the next
/// line start and rejecting lines that lack the wanted class. Every
/// draw therefore costs file accesses, as random sampling from external
/// storage does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodicConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Defaults to enough tasks to draw each instance once on average.
    pub n_tasks: Option<usize>,
    pub seed: u64,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        EpisodicConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 1,
            n_tasks: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodicReport {
    pub tasks: usize,
    /// Instances placed into tasks.
    pub draws: usize,
    /// Random seeks, accepted or rejected.
    pub seeks: usize,
    pub wall_time_ms: u64,
}

pub fn simulate_episodic(corpus: &Path, config: &EpisodicConfig) -> Result<EpisodicReport, PairingError> {
    let start = Instant::now();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut instances = 0;
    for item in JsonlReader::<Instance>::open(corpus)? {
        if let Some((_, classes)) = classes_of(instances, item)? {
            for c in classes {
                *counts.entry(c).or_default() += 1;
            }
        }
        instances += 1;
    }

    let per_class = config.k_shot + config.n_query;
    let eligible: Vec<&String> = counts.iter().filter(|(_, n)| **n >= per_class).map(|(c, _)| c).collect();
    let n_tasks = config
        .n_tasks
        .unwrap_or_else(|| instances.div_ceil((config.n_way * per_class).max(1)));
    let len = std::fs::metadata(corpus)?.len();
    let mut rng = crate::seeded_rng(config.seed);
    let mut report = EpisodicReport {
        tasks: 0,
        draws: 0,
        seeks: 0,
        wall_time_ms: 0,
    };
    if eligible.is_empty() || per_class == 0 || len == 0 {
        report.wall_time_ms = start.elapsed().as_millis() as u64;
        return Ok(report);
    }
    for _ in 0..n_tasks {
        let classes = eligible.iter().choose_multiple(&mut rng, config.n_way);
        let mut task: Vec<Instance> = Vec::with_capacity(config.n_way * per_class);
        for class in classes {
            let mut found = 0;
            while found < per_class {
                report.seeks += 1;
                let Some(inst) = fetch_after(corpus, rng.gen_range(0..len))? else {
                    continue;
                };
                let has_class = inst
                    .record()
                    .map(|r| extract_class_set(&r).contains(class.as_str()))
                    .unwrap_or(false);
                // Sampling without replacement inside a task.
                if has_class && !task.iter().any(|t| t.id == inst.id) {
                    task.push(inst);
                    found += 1;
                }
            }
        }
        report.draws += task.len();
        report.tasks += 1;
    }
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}

/// Reads the first complete line starting after byte `offset`, wrapping
/// to the start of the file. Offsets inside a line pick the next line.
fn fetch_after(corpus: &Path, offset: u64) -> Result<Option<Instance>, PairingError> {
    let mut reader = BufReader::new(File::open(corpus)?);
    let mut line = String::new();
    if offset > 0 {
        reader.seek(SeekFrom::Start(offset - 1))?;
        reader.read_line(&mut line)?;
        line.clear();
    }
    if reader.read_line(&mut line)? == 0 {
        reader.seek(SeekFrom::Start(0))?;
        reader.read_line(&mut line)?;
    }
    Ok(serde_json::from_str(&line).ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub pairing: PairingReport,
    pub episodic: EpisodicReport,
    /// Pairing wall time over episodic wall time.
    pub ratio: f64,
}

/// Times the pairing pipeline against the episodic sampler on the same
/// corpus.
pub fn bench_pair(corpus: &Path, output: &Path, seed: u64) -> Result<BenchReport, PairingError> {
    let pairing = pair_corpus(corpus, output, &PairingConfig::default())?;
    let episodic = simulate_episodic(
        corpus,
        &EpisodicConfig {
            seed,
            ..EpisodicConfig::default()
        },
    )?;
    let ratio = pairing.wall_time_ms.max(1) as f64 / episodic.wall_time_ms.max(1) as f64;
    Ok(BenchReport {
        pairing,
        episodic,
        ratio,
    })
}
