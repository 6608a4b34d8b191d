//! Bi-level meta-pretraining on a toy sequence model.
//!
//! Each paired task yields four teacher-forced examples:
//!
//! * retrieval, `ssi ++ text -> record`;
//! * extraction, `ssi ++ text ++ record -> record`;
//! * language modelling, `corrupted text -> sentinel spans`;
//! * record generation, `text -> record`.
//!
//! The inner loop takes `J` SGD steps on the support half's retrieval
//! and extraction losses. The outer loss adds the query half's
//! retrieval and extraction losses at the adapted parameters to the
//! language-modelling and record losses at the original parameters.
//!
//! The model scores target position `t` from the concatenation of the
//! mean input embedding and the embeddings of the two previous target
//! tokens: `logits_t = [mean(E[x]) ; E[y_{t-1}] ; E[y_{t-2}]] W + b`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::prompting::{
    assemble_extraction_input, assemble_retrieval_input, build_ssi, corrupt_text, sample_schema_negatives, sentinel,
    NameOrder, PromptError, SsiPrompt, ASSO_MARKER, DEFAULT_CORRUPTION_RATE, DEFAULT_MEAN_SPAN, MAX_SENTINELS,
    SPOT_MARKER, TEXT_MARKER,
};
use crate::sel::{detokenize_record, tokenize_record, Schema, SelError, SelRecord};
use crate::synth::{corpus_schema, Instance, PairedTask};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
const RESERVED_PREFIX: &str = "<unused_";
const CHECKPOINT_MAGIC: &[u8; 5] = b"URTF1";

pub const EMBEDDING: &str = "embedding";
pub const DECODER_WEIGHTS: &str = "decoder_weights";
pub const DECODER_BIAS: &str = "decoder_bias";

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("no tasks to train on")]
    EmptyCorpus,
    #[error("non-finite {loss} loss on task {task}")]
    NonFiniteLoss { loss: &'static str, task: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sel(#[from] SelError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, MetaError>;

/// Token table. Reserved `<unused_i>` slots can later be bound to
/// tokens first seen at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Requires `<bos>` and `<eos>`; tokens must be unique.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(MetaError::Vocab(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(MetaError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        for required in [BOS, EOS] {
            if !index.contains_key(required) {
                return Err(MetaError::Vocab(format!("missing {required}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Specials, SEL punctuation, prompt markers and sentinels, then the
    /// sorted distinct `words`, then `reserved` free slots.
    pub fn standard<I, S>(words: I, reserved: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [BOS, EOS, UNK, "(", ")", ":", SPOT_MARKER, ASSO_MARKER, TEXT_MARKER]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..MAX_SENTINELS).map(sentinel));
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        let known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        tokens.extend(words.into_iter().filter(|w| !known.contains(w)));
        tokens.extend((0..reserved).map(|i| format!("{RESERVED_PREFIX}{i}>")));
        Vocab::new(tokens).expect("standard vocabulary is well formed")
    }

    /// Standard vocabulary over every token the tasks can produce.
    pub fn for_tasks(tasks: &[PairedTask], reserved: usize) -> Result<Self> {
        let mut words = Vec::new();
        for inst in tasks.iter().flat_map(|t| [&t.support, &t.query]) {
            words.extend(instance_tokens(inst)?);
        }
        Ok(Vocab::standard(words, reserved))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| MetaError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn free_slots(&self) -> usize {
        self.tokens.iter().filter(|t| t.starts_with(RESERVED_PREFIX)).count()
    }

    /// Binds every unknown token to a free reserved slot, in order of
    /// first appearance. Returns the number of bound tokens.
    pub fn assign_reserved<I, S>(&mut self, tokens: I) -> Result<usize>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut bound = 0;
        for tok in tokens {
            let tok = tok.as_ref();
            if self.index.contains_key(tok) {
                continue;
            }
            let slot = self
                .tokens
                .iter()
                .position(|t| t.starts_with(RESERVED_PREFIX))
                .ok_or_else(|| MetaError::UnknownToken(tok.to_string()))?;
            self.index.remove(&self.tokens[slot]);
            self.tokens[slot] = tok.to_string();
            self.index.insert(tok.to_string(), slot);
            bound += 1;
        }
        Ok(bound)
    }

    /// Binds every token of `tasks` that is not yet known.
    pub fn assign_tasks(&mut self, tasks: &[PairedTask]) -> Result<usize> {
        let mut bound = 0;
        for inst in tasks.iter().flat_map(|t| [&t.support, &t.query]) {
            bound += self.assign_reserved(instance_tokens(inst)?)?;
        }
        Ok(bound)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens = BufReader::new(File::open(path)?).lines().collect::<io::Result<Vec<_>>>()?;
        Vocab::new(tokens)
    }

    fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Every surface token an instance contributes to any of its examples.
fn instance_tokens(inst: &Instance) -> Result<Vec<String>> {
    let mut out = inst.text_tokens();
    out.extend(inst.spots.iter().cloned());
    out.extend(inst.assos.iter().cloned());
    out.extend(tokenize_record(&inst.record()?));
    Ok(out)
}

/// One teacher-forced sequence pair, as token ids. `target` ends with
/// `<eos>`; `prev1[t]` and `prev2[t]` are the two tokens before
/// `target[t]`, padded with `<bos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub prev1: Vec<usize>,
    pub prev2: Vec<usize>,
}

impl Example {
    pub fn new<S: AsRef<str>, U: AsRef<str>>(vocab: &Vocab, input: &[S], target: &[U]) -> Result<Self> {
        if target.is_empty() {
            return Err(MetaError::EmptyTarget);
        }
        let input = vocab.encode(input)?;
        let mut target = vocab.encode(target)?;
        target.push(vocab.id(EOS)?);
        let bos = vocab.id(BOS)?;
        let prev1 = (0..target.len()).map(|t| if t >= 1 { target[t - 1] } else { bos }).collect();
        let prev2 = (0..target.len()).map(|t| if t >= 2 { target[t - 2] } else { bos }).collect();
        Ok(Example {
            input,
            target,
            prev1,
            prev2,
        })
    }
}

/// Embedding table, decoder weights (`3d x V`) and decoder bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub params: ParamStore,
}

impl ToyModel {
    pub fn new(vocab_size: usize, dim: usize, init_scale: f64, seed: u64) -> Self {
        let mut rng = crate::seeded_rng(seed);
        let mut params = ParamStore::new();
        params.insert(EMBEDDING, Tensor::uniform(&[vocab_size, dim], init_scale, &mut rng));
        params.insert(DECODER_WEIGHTS, Tensor::uniform(&[3 * dim, vocab_size], init_scale, &mut rng));
        params.insert(DECODER_BIAS, Tensor::zeros(&[vocab_size]));
        ToyModel { params }
    }

    /// Checks names and shapes of loaded parameters.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| MetaError::Checkpoint(format!("missing tensor {name}")))
        };
        let (e, w, b) = (shape(EMBEDDING)?, shape(DECODER_WEIGHTS)?, shape(DECODER_BIAS)?);
        let ok = e.len() == 2 && w == vec![3 * e[1], e[0]] && b == vec![e[0]];
        if !ok || params.len() != 3 || params.names().collect::<Vec<_>>() != [EMBEDDING, DECODER_WEIGHTS, DECODER_BIAS] {
            return Err(MetaError::Checkpoint(format!("inconsistent shapes {e:?} {w:?} {b:?}")));
        }
        if !params.is_finite() {
            return Err(MetaError::Checkpoint("non-finite parameters".into()));
        }
        Ok(ToyModel { params })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(DECODER_BIAS).map_or(0, Tensor::len)
    }

    pub fn dim(&self) -> usize {
        self.params.get(EMBEDDING).map_or(0, |e| e.shape()[1])
    }
}

/// Mean cross-entropy of `ex` under parameters `p` (store order:
/// embedding, decoder weights, decoder bias).
pub fn example_loss<'t>(p: &[Var<'t>], ex: &Example) -> Result<Var<'t>> {
    let (emb, w, b) = (p[0], p[1], p[2]);
    let tape = emb.tape();
    let d = emb.shape()[1];
    let v = b.shape()[0];
    let t = ex.target.len();
    let mut row = b.reshape(&[1, v])?;
    if !ex.input.is_empty() {
        let n = ex.input.len();
        let averager = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        let mean = averager.matmul(emb.embedding_lookup(&ex.input)?)?;
        row = row.add(mean.matmul(w.slice_rows(0, d)?)?)?;
    }
    let ones = tape.constant(Tensor::filled(&[t, 1], 1.0));
    let logits = ones
        .matmul(row)?
        .add(emb.embedding_lookup(&ex.prev1)?.matmul(w.slice_rows(d, d)?)?)?
        .add(emb.embedding_lookup(&ex.prev2)?.matmul(w.slice_rows(2 * d, d)?)?)?;
    Ok(logits.cross_entropy(&ex.target)?)
}

/// Teacher-forced mean cross-entropy of `target` given `input`.
pub fn forward_loss<S: AsRef<str>>(params: &ParamStore, vocab: &Vocab, input: &[S], target: &[S]) -> Result<f64> {
    let ex = Example::new(vocab, input, target)?;
    let tape = Tape::new();
    let p = params.load(&tape);
    Ok(example_loss(&p, &ex)?.item())
}

/// Plain SGD on the summed loss of `examples`; returns the loss before
/// each step.
pub fn sgd_fit(params: &mut ParamStore, examples: &[Example], steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let tape = Tape::new();
        let p = params.load(&tape);
        let mut total = example_loss(&p, &examples[0])?;
        for ex in &examples[1..] {
            total = total.add(example_loss(&p, ex)?)?;
        }
        let loss = total.item();
        if !loss.is_finite() {
            return Err(MetaError::NonFiniteLoss {
                loss: "fit",
                task: String::new(),
            });
        }
        losses.push(loss);
        let grads = tape.grad(total, &p, false)?;
        *params = params.with_tensors(
            params
                .tensors()
                .zip(&grads)
                .map(|(t, g)| t.sub_scaled(&g.value(), lr))
                .collect::<std::result::Result<_, _>>()?,
        );
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    SecondOrder,
    FirstOrder,
    Simple,
}

impl MetaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaMode::SecondOrder => "second_order",
            MetaMode::FirstOrder => "first_order",
            MetaMode::Simple => "simple",
        }
    }
}

impl fmt::Display for MetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetaMode {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_order" => Ok(MetaMode::SecondOrder),
            "first_order" => Ok(MetaMode::FirstOrder),
            "simple" => Ok(MetaMode::Simple),
            other => Err(MetaError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Weights of the four outer losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub retrv: f64,
    pub ext: f64,
    pub lm: f64,
    pub record: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            retrv: 1.0,
            ext: 1.0,
            lm: 1.0,
            record: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub mode: MetaMode,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub epochs: usize,
    /// Stops after this many outer steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub dim: usize,
    pub init_scale: f64,
    pub spot_negatives: usize,
    pub asso_negatives: usize,
    pub reserved_tokens: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 1e-4,
            beta: 1e-4,
            inner_steps: 1,
            mode: MetaMode::SecondOrder,
            loss_weights: LossWeights::default(),
            seed: 0,
            epochs: 1,
            max_steps: None,
            batch_size: 4,
            dim: 32,
            init_scale: 0.1,
            spot_negatives: crate::prompting::DEFAULT_SPOT_NEGATIVES,
            asso_negatives: crate::prompting::DEFAULT_ASSO_NEGATIVES,
            reserved_tokens: 32,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(MetaError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("init_scale", self.init_scale)?;
        if self.inner_steps == 0 && self.mode != MetaMode::Simple {
            return Err(MetaError::Config("inner_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.dim == 0 {
            return Err(MetaError::Config("batch_size and dim must be at least 1".into()));
        }
        let w = self.loss_weights;
        if [w.retrv, w.ext, w.lm, w.record].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MetaError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| MetaError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "inner_steps" => self.inner_steps = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = Some(num(key, value)?),
            "batch_size" => self.batch_size = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "init_scale" => self.init_scale = num(key, value)?,
            "spot_negatives" => self.spot_negatives = num(key, value)?,
            "asso_negatives" => self.asso_negatives = num(key, value)?,
            "reserved_tokens" => self.reserved_tokens = num(key, value)?,
            "weight_retrv" => self.loss_weights.retrv = num(key, value)?,
            "weight_ext" => self.loss_weights.ext = num(key, value)?,
            "weight_lm" => self.loss_weights.lm = num(key, value)?,
            "weight_record" => self.loss_weights.record = num(key, value)?,
            _ => return Err(MetaError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MetaError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub retrv: f64,
    pub ext: f64,
    pub lm: f64,
    pub record: f64,
}

impl LossBundle {
    pub fn is_valid(&self) -> bool {
        [self.retrv, self.ext, self.lm, self.record]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    fn accumulate(&mut self, other: &LossBundle, c: f64) {
        self.retrv += c * other.retrv;
        self.ext += c * other.ext;
        self.lm += c * other.lm;
        self.record += c * other.record;
    }
}

/// The losses of a meta-learning problem. `inner_loss` drives
/// adaptation; `query_losses` (retrieval, extraction) are evaluated at
/// the adapted parameters; `base_losses` (LM, record) at the original
/// ones.
pub trait Objective: Sync {
    type Task: Sync;

    fn inner_loss<'t>(&self, p: &[Var<'t>], task: &Self::Task) -> Result<Var<'t>>;
    fn query_losses<'t>(&self, p: &[Var<'t>], task: &Self::Task) -> Result<[Var<'t>; 2]>;
    fn base_losses<'t>(&self, p: &[Var<'t>], task: &Self::Task) -> Result<[Var<'t>; 2]>;

    fn task_id(&self, _task: &Self::Task) -> String {
        String::new()
    }
}

/// A paired task encoded for the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub id: String,
    pub support_retrv: Example,
    pub support_ext: Example,
    pub query_retrv: Example,
    pub query_ext: Example,
    pub lm: Example,
    pub record: Example,
}

/// Encodes a paired task. Negative schema names come from `pool`; the
/// prompt order and the text corruption are drawn from `rng`.
pub fn prepare_task<R: Rng>(
    task: &PairedTask,
    vocab: &Vocab,
    pool: &Schema,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<PreparedTask> {
    let mut half = |inst: &Instance| -> Result<(Example, Example)> {
        let schema = sample_schema_negatives(&inst.schema(), pool, cfg.spot_negatives, cfg.asso_negatives, rng);
        let ssi = build_ssi(&schema, NameOrder::Shuffled(rng.gen()))?;
        let text = inst.text_tokens();
        let record = inst.record()?;
        let target = tokenize_record(&record);
        let retrv = Example::new(vocab, &assemble_retrieval_input(&ssi, &text).tokens, &target)?;
        let ext = Example::new(vocab, &assemble_extraction_input(&ssi, &text, &record)?.tokens, &target)?;
        Ok((retrv, ext))
    };
    let (support_retrv, support_ext) = half(&task.support)?;
    let (query_retrv, query_ext) = half(&task.query)?;
    let text = task.query.text_tokens();
    let corruption = corrupt_text(&text, DEFAULT_CORRUPTION_RATE, DEFAULT_MEAN_SPAN, rng)?;
    let lm = Example::new(vocab, &corruption.corrupted_input, &corruption.target)?;
    let record = Example::new(vocab, &text, &tokenize_record(&task.query.record()?))?;
    Ok(PreparedTask {
        id: format!("{}/{}", task.support.id, task.query.id),
        support_retrv,
        support_ext,
        query_retrv,
        query_ext,
        lm,
        record,
    })
}

/// Task `index` of `epoch` gets its own random stream.
fn task_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = crate::seeded_rng(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Prepares `tasks` with negatives from their own schema union.
pub fn prepare_tasks(tasks: &[PairedTask], vocab: &Vocab, cfg: &MetaConfig, seed: u64) -> Result<Vec<PreparedTask>> {
    let pool = task_pool(tasks);
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| prepare_task(t, vocab, &pool, cfg, &mut task_rng(seed, 0, i)))
        .collect()
}

fn task_pool(tasks: &[PairedTask]) -> Schema {
    corpus_schema(tasks.iter().flat_map(|t| [&t.support, &t.query]))
}

/// The toy model's objective over prepared tasks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyObjective;

impl Objective for ToyObjective {
    type Task = PreparedTask;

    fn inner_loss<'t>(&self, p: &[Var<'t>], task: &PreparedTask) -> Result<Var<'t>> {
        Ok(example_loss(p, &task.support_retrv)?.add(example_loss(p, &task.support_ext)?)?)
    }

    fn query_losses<'t>(&self, p: &[Var<'t>], task: &PreparedTask) -> Result<[Var<'t>; 2]> {
        Ok([example_loss(p, &task.query_retrv)?, example_loss(p, &task.query_ext)?])
    }

    fn base_losses<'t>(&self, p: &[Var<'t>], task: &PreparedTask) -> Result<[Var<'t>; 2]> {
        Ok([example_loss(p, &task.lm)?, example_loss(p, &task.record)?])
    }

    fn task_id(&self, task: &PreparedTask) -> String {
        task.id.clone()
    }
}

fn check_finite(loss: Var<'_>, name: &'static str, task: impl FnOnce() -> String) -> Result<()> {
    if loss.item().is_finite() {
        Ok(())
    } else {
        Err(MetaError::NonFiniteLoss { loss: name, task: task() })
    }
}

/// `J` SGD steps on the inner loss, recorded on the tape of `theta`.
/// Gradients are differentiable when `higher_order` holds.
pub fn adapt_on_tape<'t, O: Objective>(
    obj: &O,
    theta: &[Var<'t>],
    task: &O::Task,
    alpha: f64,
    steps: usize,
    higher_order: bool,
) -> Result<Vec<Var<'t>>> {
    let tape = theta[0].tape();
    let mut cur = theta.to_vec();
    for _ in 0..steps {
        let loss = obj.inner_loss(&cur, task)?;
        check_finite(loss, "inner", || obj.task_id(task))?;
        let grads = tape.grad(loss, &cur, higher_order)?;
        cur = cur
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.sub(g.scale(alpha)))
            .collect::<std::result::Result<_, _>>()?;
    }
    Ok(cur)
}

/// Adapted parameters `theta_J`; `theta` itself is not modified.
pub fn inner_adapt<O: Objective>(obj: &O, params: &ParamStore, task: &O::Task, cfg: &MetaConfig) -> Result<ParamStore> {
    if cfg.mode == MetaMode::Simple {
        return Err(MetaError::Config("inner_adapt is undefined in simple mode".into()));
    }
    let tape = Tape::new();
    let theta = params.load(&tape);
    let adapted = adapt_on_tape(obj, &theta, task, cfg.alpha, cfg.inner_steps, false)?;
    Ok(params.with_values(&adapted))
}

/// The recorded outer loss of one task.
pub struct OuterGraph<'t> {
    pub total: Var<'t>,
    /// Leaves standing in for `theta_J` in first-order mode.
    pub detached: Vec<Var<'t>>,
    pub losses: LossBundle,
}

/// Records the weighted outer loss of `task` at `theta`.
pub fn outer_loss_on_tape<'t, O: Objective>(
    obj: &O,
    theta: &[Var<'t>],
    task: &O::Task,
    cfg: &MetaConfig,
) -> Result<OuterGraph<'t>> {
    let tape = theta[0].tape();
    let mut detached = Vec::new();
    let adapted = match cfg.mode {
        MetaMode::Simple => theta.to_vec(),
        MetaMode::SecondOrder => adapt_on_tape(obj, theta, task, cfg.alpha, cfg.inner_steps, true)?,
        MetaMode::FirstOrder => {
            let a = adapt_on_tape(obj, theta, task, cfg.alpha, cfg.inner_steps, false)?;
            detached = a.iter().map(|v| tape.param((*v.value()).clone())).collect();
            detached.clone()
        }
    };
    let [retrv, ext] = obj.query_losses(&adapted, task)?;
    let [lm, record] = obj.base_losses(theta, task)?;
    for (v, name) in [(retrv, "retrieval"), (ext, "extraction"), (lm, "language-model"), (record, "record")] {
        check_finite(v, name, || obj.task_id(task))?;
    }
    let w = cfg.loss_weights;
    let total = retrv
        .scale(w.retrv)
        .add(ext.scale(w.ext))?
        .add(lm.scale(w.lm))?
        .add(record.scale(w.record))?;
    Ok(OuterGraph {
        total,
        detached,
        losses: LossBundle {
            retrv: retrv.item(),
            ext: ext.item(),
            lm: lm.item(),
            record: record.item(),
        },
    })
}

/// Gradient of the outer loss with respect to `theta`. In first-order
/// mode the query-loss gradient at `theta_J` is added as is.
pub fn meta_gradient<O: Objective>(
    obj: &O,
    params: &ParamStore,
    task: &O::Task,
    cfg: &MetaConfig,
) -> Result<(ParamStore, LossBundle)> {
    let tape = Tape::new();
    let theta = params.load(&tape);
    let graph = outer_loss_on_tape(obj, &theta, task, cfg)?;
    let mut wrt = theta.clone();
    wrt.extend(&graph.detached);
    let grads = tape.grad(graph.total, &wrt, false)?;
    let n = theta.len();
    let mut tensors: Vec<Tensor> = grads[..n].iter().map(|g| (*g.value()).clone()).collect();
    for (t, g) in tensors.iter_mut().zip(&grads[n..]) {
        *t = t.add(&g.value())?;
    }
    Ok((params.with_tensors(tensors), graph.losses))
}

/// One meta-update on a single task: `theta - beta * grad`.
pub fn outer_step<O: Objective>(
    obj: &O,
    params: &ParamStore,
    task: &O::Task,
    cfg: &MetaConfig,
) -> Result<(ParamStore, LossBundle)> {
    let (grad, losses) = meta_gradient(obj, params, task, cfg)?;
    let mut next = params.clone();
    next.add_scaled(&grad, -cfg.beta)?;
    Ok((next, losses))
}

/// One meta-update on a batch: gradients are summed in batch order.
pub fn batch_step<O: Objective>(
    obj: &O,
    params: &ParamStore,
    tasks: &[&O::Task],
    cfg: &MetaConfig,
) -> Result<(ParamStore, LossBundle)> {
    let results: Vec<(ParamStore, LossBundle)> = tasks
        .par_iter()
        .map(|t| meta_gradient(obj, params, t, cfg))
        .collect::<Result<_>>()?;
    let mut next = params.clone();
    let mut mean = LossBundle::default();
    for (grad, losses) in &results {
        next.add_scaled(grad, -cfg.beta)?;
        mean.accumulate(losses, 1.0 / results.len() as f64);
    }
    Ok((next, mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// Meta-pretrains from `init` over `tasks`. Task order is reshuffled
/// every epoch, and negatives and corruption are redrawn, all from
/// `cfg.seed`.
pub fn meta_pretrain(
    init: &ToyModel,
    tasks: &[PairedTask],
    vocab: &Vocab,
    cfg: &MetaConfig,
) -> Result<(ToyModel, Vec<StepLog>)> {
    if tasks.is_empty() {
        return Err(MetaError::EmptyCorpus);
    }
    let pool = task_pool(tasks);
    let mut params = init.params.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut shuffle_rng = crate::seeded_rng(cfg.seed);
    shuffle_rng.set_stream(u64::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| log.len() >= m) {
                break 'epochs;
            }
            let prepared: Vec<PreparedTask> = batch
                .par_iter()
                .map(|&i| prepare_task(&tasks[i], vocab, &pool, cfg, &mut task_rng(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?;
            let refs: Vec<&PreparedTask> = prepared.iter().collect();
            let (next, losses) = batch_step(&ToyObjective, &params, &refs, cfg)?;
            params = next;
            log.push(StepLog {
                step: log.len() + 1,
                epoch,
                losses,
            });
        }
    }
    Ok((ToyModel { params }, log))
}

/// Query loss after `0..=steps` plain SGD steps on each task's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationCurve {
    pub mean: Vec<f64>,
    pub per_task: Vec<Vec<f64>>,
    /// True when the mean never increases.
    pub monotone: bool,
}

pub fn evaluate_fast_adaptation(
    params: &ParamStore,
    tasks: &[PreparedTask],
    steps: usize,
    alpha: f64,
) -> Result<AdaptationCurve> {
    let obj = ToyObjective;
    let per_task: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|task| {
            let mut cur = params.clone();
            let mut curve = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                let tape = Tape::new();
                let p = cur.load(&tape);
                let [retrv, ext] = obj.query_losses(&p, task)?;
                curve.push(retrv.item() + ext.item());
                if k < steps {
                    let adapted = adapt_on_tape(&obj, &p, task, alpha, 1, false)?;
                    cur = cur.with_values(&adapted);
                }
            }
            Ok(curve)
        })
        .collect::<Result<_>>()?;
    let mean: Vec<f64> = (0..=steps)
        .map(|k| per_task.iter().map(|c| c[k]).sum::<f64>() / per_task.len().max(1) as f64)
        .collect();
    let monotone = mean.windows(2).all(|w| w[1] <= w[0]);
    Ok(AdaptationCurve {
        mean,
        per_task,
        monotone,
    })
}

/// Paired sign test of "a below b".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.len().min(b.len()) - wins - losses;
    let n = wins + losses;
    // P(X >= wins) for X ~ Binomial(n, 1/2), summed in log space.
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    let tail = |k: usize| -> f64 {
        (k..=n)
            .map(|i| (ln_choose(i) - n as f64 * std::f64::consts::LN_2).exp())
            .sum::<f64>()
            .min(1.0)
    };
    let p_one_sided = tail(wins);
    let p_two_sided = (2.0 * tail(wins.max(losses))).min(1.0);
    SignTest {
        wins,
        losses,
        ties,
        p_one_sided,
        p_two_sided,
    }
}

/// Output of two-pass inference. Malformed decodes become empty records
/// with the matching flag cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub knowledge: SelRecord,
    pub prediction: SelRecord,
    pub knowledge_parsed: bool,
    pub prediction_parsed: bool,
}

fn greedy_decode(params: &ParamStore, vocab: &Vocab, input: &[String], max_len: usize) -> Vec<String> {
    let (Some(e), Some(w), Some(b)) = (params.get(EMBEDDING), params.get(DECODER_WEIGHTS), params.get(DECODER_BIAS)) else {
        return Vec::new();
    };
    let (d, v) = (e.shape()[1], b.len());
    let ids: Vec<usize> = input
        .iter()
        .filter_map(|t| vocab.id(t).or_else(|_| vocab.id(UNK)).ok())
        .collect();
    let (ed, wd) = (e.data(), w.data());
    let mut base = b.data().to_vec();
    if !ids.is_empty() {
        let mut mean = vec![0.0; d];
        for &i in &ids {
            for (m, x) in mean.iter_mut().zip(&ed[i * d..(i + 1) * d]) {
                *m += x / ids.len() as f64;
            }
        }
        for (k, m) in mean.iter().enumerate() {
            for (o, x) in base.iter_mut().zip(&wd[k * v..(k + 1) * v]) {
                *o += m * x;
            }
        }
    }
    let (Ok(bos), Ok(eos)) = (vocab.id(BOS), vocab.id(EOS)) else {
        return Vec::new();
    };
    let (mut p1, mut p2) = (bos, bos);
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut logits = base.clone();
        for (block, tok) in [(1, p1), (2, p2)] {
            for k in 0..d {
                let x = ed[tok * d + k];
                let row = &wd[(block * d + k) * v..(block * d + k + 1) * v];
                for (o, y) in logits.iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        // First maximum wins, so decoding is deterministic.
        let next = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if *x > logits[best] { i } else { best });
        if next == eos {
            break;
        }
        out.push(vocab.token(next).to_string());
        p2 = p1;
        p1 = next;
    }
    out
}

fn parse_or_empty(tokens: &[String]) -> (SelRecord, bool) {
    match detokenize_record(tokens) {
        Ok(r) => (r, true),
        Err(_) => (SelRecord::default(), false),
    }
}

/// Decodes knowledge from `ssi ++ text`, then the prediction from
/// `ssi ++ text ++ knowledge`, both greedily.
pub fn retrieve_then_extract_inference(
    params: &ParamStore,
    vocab: &Vocab,
    ssi: &SsiPrompt,
    text: &[String],
    max_len: usize,
) -> Inference {
    let first = greedy_decode(params, vocab, &assemble_retrieval_input(ssi, text).tokens, max_len);
    let (knowledge, knowledge_parsed) = parse_or_empty(&first);
    let input = assemble_extraction_input(ssi, text, &knowledge)
        .map(|i| i.tokens)
        .unwrap_or_else(|_| assemble_retrieval_input(ssi, text).tokens);
    let second = greedy_decode(params, vocab, &input, max_len);
    let (prediction, prediction_parsed) = parse_or_empty(&second);
    Inference {
        knowledge,
        prediction,
        knowledge_parsed,
        prediction_parsed,
    }
}

/// Writes `URTF1`, a `u32` tensor count, then per tensor its name
/// (`u32` length + UTF-8), rank (`u32`), dims (`u64` each) and data
/// (`f64` each), all little-endian.
pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(MetaError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(5)? != CHECKPOINT_MAGIC {
        return Err(MetaError::Checkpoint("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| MetaError::Checkpoint("bad name".into()))?;
        let rank = u32_at(take(4)?);
        if rank > 2 {
            return Err(MetaError::Checkpoint(format!("rank {rank} tensor {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| MetaError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !cur.is_empty() {
        return Err(MetaError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

/// Per-step metrics as JSON lines.
pub fn write_metrics_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut out, entry).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Surrogate problem with quadratic losses: `|theta - a|^2` on the
/// support and `|theta - b|^2` on the query. The MAML gradient is known
/// in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub a: Tensor,
    pub b: Tensor,
}

fn squared_distance<'t>(p: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let d = p.sub(p.tape().constant(target.clone()))?;
    Ok(d.mul(d)?.sum())
}

impl Objective for QuadraticObjective {
    type Task = ();

    fn inner_loss<'t>(&self, p: &[Var<'t>], _: &()) -> Result<Var<'t>> {
        squared_distance(p[0], &self.a)
    }

    fn query_losses<'t>(&self, p: &[Var<'t>], _: &()) -> Result<[Var<'t>; 2]> {
        let zero = p[0].tape().constant(Tensor::scalar(0.0));
        Ok([squared_distance(p[0], &self.b)?, zero])
    }

    fn base_losses<'t>(&self, p: &[Var<'t>], _: &()) -> Result<[Var<'t>; 2]> {
        let zero = p[0].tape().constant(Tensor::scalar(0.0));
        Ok([zero, zero])
    }
}

/// Tokens of the shrunken model used by [`maml_checks`]. With `d = 1`
/// the model has `3V + V + V = 50` parameters.
const SHRUNKEN_TOKENS: [&str; 10] = [BOS, EOS, "(", ")", ":", SPOT_MARKER, TEXT_MARKER, "A", "x", "<extra_id_0>"];

/// Finite-difference check of the full second-order outer loss on a
/// 50-parameter model, and the quadratic surrogate against its closed
/// form.
pub fn maml_checks(eps: f64, seed: u64) -> Result<Vec<crate::autodiff::GradCheck>> {
    use crate::autodiff::{finite_diff_check, GradCheck};
    use crate::sel::SpotGroup;

    let vocab = Vocab::new(SHRUNKEN_TOKENS.iter().map(|s| s.to_string()).collect())?;
    let record = SelRecord::new(vec![SpotGroup::new("A", "x")]);
    let schema = Schema::of_record(&record);
    let inst = |id: &str| Instance::new(id, "x", &schema, &record);
    let task = PairedTask {
        support: inst("s")?,
        query: inst("q")?,
        class: "A".into(),
    };
    let cfg = MetaConfig {
        alpha: 0.5,
        mode: MetaMode::SecondOrder,
        spot_negatives: 0,
        asso_negatives: 0,
        ..MetaConfig::default()
    };
    let prepared = prepare_task(&task, &vocab, &schema, &cfg, &mut crate::seeded_rng(seed))?;
    let model = ToyModel::new(vocab.len(), 1, 1.0, seed);
    let outer = finite_diff_check(
        |_, p| Ok::<_, MetaError>(outer_loss_on_tape(&ToyObjective, p, &prepared, &cfg)?.total),
        &model.params,
        eps,
    )?;

    let mut rng = crate::seeded_rng(seed);
    let n = 6;
    let obj = QuadraticObjective {
        a: Tensor::uniform(&[n], 1.0, &mut rng),
        b: Tensor::uniform(&[n], 1.0, &mut rng),
    };
    let mut theta = ParamStore::new();
    theta.insert("theta", Tensor::uniform(&[n], 1.0, &mut rng));
    let cfg = MetaConfig {
        alpha: 0.1,
        beta: 0.2,
        ..MetaConfig::default()
    };
    let (updated, _) = outer_step(&obj, &theta, &(), &cfg)?;
    let (t, a, b) = (theta.tensors().next().expect("theta").data(), obj.a.data(), obj.b.data());
    let closed = (0..n)
        .map(|i| {
            let adapted = t[i] - cfg.alpha * 2.0 * (t[i] - a[i]);
            let grad = (1.0 - 2.0 * cfg.alpha) * 2.0 * (adapted - b[i]);
            (updated.tensors().next().expect("theta").data()[i] - (t[i] - cfg.beta * grad)).abs()
        })
        .fold(0.0, f64::max);
    Ok(vec![
        GradCheck {
            name: "outer_loss_second_order".into(),
            max_rel_error: outer,
        },
        GradCheck {
            name: "quadratic_maml_closed_form".into(),
            max_rel_error: closed,
        },
    ])
}
