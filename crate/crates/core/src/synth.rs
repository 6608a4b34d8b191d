//! Seeded synthetic IE tasks and the JSONL corpus format.
//!
//! Every corpus line is one instance object with exactly the fields
//! `id`, `text`, `spots`, `assos`, `sel`, in that order. Paired-task
//! files hold `{"support": Instance, "query": Instance, "class": name}`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sel::{extract_class_set, linearize_sel, parse_sel, Schema, SelError, SelRecord, SpotGroup};
use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("pool sizes must be at least 1")]
    EmptyPool,
    #[error("invalid instance {id}: {message}")]
    InvalidInstance { id: String, message: String },
}

/// One corpus instance; `sel` is the canonical linearized record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub spots: Vec<String>,
    pub assos: Vec<String>,
    pub sel: String,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, schema: &Schema, record: &SelRecord) -> Result<Self, SelError> {
        Ok(Instance {
            id: id.into(),
            text: text.into(),
            spots: schema.spots.iter().cloned().collect(),
            assos: schema.assos.iter().cloned().collect(),
            sel: linearize_sel(record)?,
        })
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.spots.iter().cloned(), self.assos.iter().cloned())
    }

    pub fn record(&self) -> Result<SelRecord, SelError> {
        parse_sel(&self.sel)
    }

    pub fn text_tokens(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }

    /// Checks that `sel` parses, every span occurs in the text and the
    /// schema covers the record's names.
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |message: String| SynthError::InvalidInstance {
            id: self.id.clone(),
            message,
        };
        let record = self.record().map_err(|e| invalid(e.to_string()))?;
        for g in &record.groups {
            let spans = std::iter::once(&g.info_span).chain(g.assos.iter().map(|a| &a.info_span));
            for span in spans {
                if !self.text.contains(span.as_str()) {
                    return Err(invalid(format!("span {span:?} not in text")));
                }
            }
        }
        let schema = self.schema();
        let classes = extract_class_set(&record);
        if let Some(c) = classes
            .iter()
            .find(|c| !schema.spots.contains(*c) && !schema.assos.contains(*c))
        {
            return Err(invalid(format!("class {c:?} missing from schema")));
        }
        Ok(())
    }
}

/// One simulated IE task: a support instance and a query instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedTask {
    pub support: Instance,
    pub query: Instance,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistConfig {
    pub n_spots: usize,
    pub n_assos: usize,
    pub n_heldout_spots: usize,
    pub n_heldout_assos: usize,
    pub n_span_tokens: usize,
    pub n_filler_tokens: usize,
    pub templates_per_class: usize,
    /// Exponent of the class-frequency skew (`1 / rank^s`).
    pub zipf_exponent: f64,
    /// Use the held-out class names instead of the training ones.
    pub heldout: bool,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            n_spots: 40,
            n_assos: 10,
            n_heldout_spots: 10,
            n_heldout_assos: 5,
            n_span_tokens: 120,
            n_filler_tokens: 80,
            templates_per_class: 3,
            zipf_exponent: 1.0,
            heldout: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    pub spot_pool: Vec<String>,
    pub asso_pool: Vec<String>,
    /// All surface tokens: span vocabulary followed by filler.
    pub vocab: Vec<String>,
    pub filler: Vec<String>,
    pub rules: BTreeMap<String, Vec<Vec<String>>>,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl TaskDistribution {
    pub fn pool_schema(&self) -> Schema {
        Schema::new(self.spot_pool.iter().cloned(), self.asso_pool.iter().cloned())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Five-letter consonant-vowel word; equal lengths keep substring
/// matches aligned with word boundaries.
fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    (0..5)
        .map(|i| {
            let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            set[rng.gen_range(0..set.len())] as char
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

fn unique_words<R: Rng>(rng: &mut R, n: usize, seen: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn gen_distribution(config: &DistConfig, seed: u64) -> Result<TaskDistribution, SynthError> {
    let pools = [
        config.n_spots,
        config.n_assos,
        config.n_heldout_spots,
        config.n_heldout_assos,
        config.n_span_tokens,
        config.n_filler_tokens,
        config.templates_per_class,
    ];
    if pools.contains(&0) {
        return Err(SynthError::EmptyPool);
    }
    let mut rng = seeded_rng(seed);
    let mut seen = HashSet::new();
    let span_vocab = unique_words(&mut rng, config.n_span_tokens, &mut seen);
    let filler = unique_words(&mut rng, config.n_filler_tokens, &mut seen);

    let mut name_seen = HashSet::new();
    let spot_names: Vec<String> = unique_words(&mut rng, config.n_spots + config.n_heldout_spots, &mut name_seen)
        .iter()
        .map(|w| capitalize(w))
        .collect();
    let asso_names: Vec<String> = unique_words(&mut rng, 2 * (config.n_assos + config.n_heldout_assos), &mut name_seen)
        .chunks(2)
        .map(|p| format!("{}_{}", capitalize(&p[0]), capitalize(&p[1])))
        .collect();

    let mut rules = BTreeMap::new();
    for name in spot_names.iter().chain(&asso_names) {
        let templates = (0..config.templates_per_class)
            .map(|_| {
                let len = rng.gen_range(1..=2);
                (0..len).map(|_| span_vocab.choose(&mut rng).cloned().unwrap_or_default()).collect()
            })
            .collect();
        rules.insert(name.clone(), templates);
    }

    let (spot_pool, asso_pool) = if config.heldout {
        (spot_names[config.n_spots..].to_vec(), asso_names[config.n_assos..].to_vec())
    } else {
        (spot_names[..config.n_spots].to_vec(), asso_names[..config.n_assos].to_vec())
    };
    rules.retain(|k, _| spot_pool.contains(k) || asso_pool.contains(k));

    let mut vocab = span_vocab;
    vocab.extend(filler.iter().cloned());
    Ok(TaskDistribution {
        spot_pool,
        asso_pool,
        vocab,
        filler,
        rules,
        zipf_exponent: config.zipf_exponent,
        seed,
    })
}

fn zipf_index(n: usize, exponent: f64) -> impl Fn(&mut crate::SeededRng) -> usize {
    let weights: Vec<f64> = (1..=n).map(|r| 1.0 / (r as f64).powf(exponent)).collect();
    let dist = WeightedIndex::new(weights).expect("positive weights");
    move |rng: &mut crate::SeededRng| dist.sample(rng)
}

/// Generates one instance with `n_spots` spot groups and up to `n_assos`
/// asso groups (assos need at least one spot group to attach to).
pub fn gen_instance(dist: &TaskDistribution, n_spots: usize, n_assos: usize, seed: u64) -> Instance {
    let mut rng = seeded_rng(seed);
    let pick_spot = zipf_index(dist.spot_pool.len(), dist.zipf_exponent);
    let pick_asso = zipf_index(dist.asso_pool.len(), dist.zipf_exponent);
    let template = |rng: &mut crate::SeededRng, class: &str| -> String {
        dist.rules[class].choose(rng).map(|t| t.join(" ")).unwrap_or_default()
    };

    let mut groups: Vec<SpotGroup> = (0..n_spots)
        .map(|_| {
            let class = &dist.spot_pool[pick_spot(&mut rng)];
            SpotGroup::new(class.clone(), template(&mut rng, class))
        })
        .collect();

    let mut extra_spans = Vec::new();
    if n_spots > 0 {
        for _ in 0..n_assos {
            let head = rng.gen_range(0..n_spots);
            let class = dist.asso_pool[pick_asso(&mut rng)].clone();
            let span = if n_spots > 1 {
                let mut tail = rng.gen_range(0..n_spots - 1);
                if tail >= head {
                    tail += 1;
                }
                groups[tail].info_span.clone()
            } else {
                let span = template(&mut rng, &class);
                extra_spans.push(span.clone());
                span
            };
            groups[head] = groups[head].clone().with_asso(class, span);
        }
    }

    let mut words: Vec<String> = Vec::new();
    let filler = |rng: &mut crate::SeededRng, words: &mut Vec<String>, lo: usize, hi: usize| {
        for _ in 0..rng.gen_range(lo..=hi) {
            words.push(dist.filler.choose(rng).cloned().unwrap_or_default());
        }
    };
    for span in groups.iter().map(|g| g.info_span.clone()).chain(extra_spans) {
        filler(&mut rng, &mut words, 0, 2);
        words.push(span);
    }
    filler(&mut rng, &mut words, 1, 3);

    let record = SelRecord::new(groups);
    let schema = Schema::of_record(&record);
    Instance::new(format!("s{seed:016x}"), words.join(" "), &schema, &record)
        .expect("generated names are valid")
}

/// `n` instances with 1..=4 spot groups and 0..=2 asso groups each,
/// ids `inst-000000`, `inst-000001`, ...
pub fn gen_corpus(dist: &TaskDistribution, n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = seeded_rng(seed);
    let spot_counts = WeightedIndex::new([4.0, 3.0, 2.0, 1.0]).expect("positive weights");
    (0..n)
        .map(|i| {
            let n_spots = spot_counts.sample(&mut rng) + 1;
            let n_assos = rng.gen_range(0..=2);
            let mut inst = gen_instance(dist, n_spots, n_assos, rng.gen());
            inst.id = format!("inst-{i:06}");
            inst
        })
        .collect()
}

/// Streaming JSONL reader yielding one item per non-empty line.
pub struct JsonlReader<T> {
    lines: io::Lines<BufReader<File>>,
    line: usize,
    _item: std::marker::PhantomData<T>,
}

impl<T: serde::de::DeserializeOwned> JsonlReader<T> {
    pub fn open(path: &Path) -> Result<Self, SynthError> {
        Ok(JsonlReader {
            lines: BufReader::new(File::open(path)?).lines(),
            line: 0,
            _item: std::marker::PhantomData,
        })
    }
}

impl<T: serde::de::DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<T, SynthError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(|e| SynthError::Parse {
                line: self.line,
                message: e.to_string(),
            }));
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<JsonlReader<Instance>, SynthError> {
    JsonlReader::open(path)
}

pub fn read_tasks(path: &Path) -> Result<JsonlReader<PairedTask>, SynthError> {
    JsonlReader::open(path)
}

pub fn write_jsonl<'a, T, I>(items: I, path: &Path) -> Result<usize, SynthError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = BufWriter::new(File::create(path)?);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn write_corpus<'a, I: IntoIterator<Item = &'a Instance>>(instances: I, path: &Path) -> Result<usize, SynthError> {
    write_jsonl(instances, path)
}

/// Union of instance schemas.
pub fn corpus_schema<'a, I: IntoIterator<Item = &'a Instance>>(instances: I) -> Schema {
    let mut spots = BTreeSet::new();
    let mut assos = BTreeSet::new();
    for inst in instances {
        spots.extend(inst.spots.iter().cloned());
        assos.extend(inst.assos.iter().cloned());
    }
    Schema { spots, assos }
}
