//! Schema prompts (SSI), model-input assembly and span corruption.
//!
//! A prompt lists the spot names, then the asso names, then a `[text]`
//! marker:
//!
//! ```text
//! [spot] LOC [spot] PER [asso] Located_In [text]
//! ```
//!
//! Retrieval inputs are `prompt ++ text`; extraction inputs append the
//! tokenized knowledge record as a suffix.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::sel::{linearize_sel, tokenize_record, Schema, SelError, SelRecord};

pub const SPOT_MARKER: &str = "[spot]";
pub const ASSO_MARKER: &str = "[asso]";
pub const TEXT_MARKER: &str = "[text]";
pub const MAX_SENTINELS: usize = 100;

pub const DEFAULT_SPOT_NEGATIVES: usize = 10;
pub const DEFAULT_ASSO_NEGATIVES: usize = 10;
pub const DEFAULT_CORRUPTION_RATE: f64 = 0.15;
pub const DEFAULT_MEAN_SPAN: f64 = 3.0;

/// `<extra_id_{index}>`.
pub fn sentinel(index: usize) -> String {
    format!("<extra_id_{index}>")
}

pub fn is_sentinel(token: &str) -> bool {
    token
        .strip_prefix("<extra_id_")
        .and_then(|rest| rest.strip_suffix('>'))
        .and_then(|n| n.parse::<usize>().ok())
        .is_some_and(|n| n < MAX_SENTINELS)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("schema has neither spot nor asso names")]
    EmptySchema,
    #[error("corruption rate must lie in (0, 1), got {0}")]
    InvalidRate(f64),
    #[error("mean span length must be >= 1, got {0}")]
    InvalidMeanSpan(f64),
    #[error("cannot corrupt an empty text")]
    EmptyText,
    #[error(transparent)]
    Sel(#[from] SelError),
}

/// Order of names inside each marker group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NameOrder {
    #[default]
    Lexicographic,
    /// Lexicographic order shuffled by a seeded generator.
    Shuffled(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsiPrompt {
    pub tokens: Vec<String>,
}

impl SsiPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl std::fmt::Display for SsiPrompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Retrieval,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub kind: InputKind,
    pub tokens: Vec<String>,
}

/// Output of [`corrupt_text`]: the input with spans replaced by
/// sentinels, and the sentinel-delimited removed spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionPair {
    pub corrupted_input: Vec<String>,
    pub target: Vec<String>,
}

impl CorruptionPair {
    pub fn removed_tokens(&self) -> usize {
        self.target.iter().filter(|t| !is_sentinel(t)).count()
    }

    pub fn span_count(&self) -> usize {
        self.target.iter().filter(|t| is_sentinel(t)).count()
    }

    /// Reinserts the removed spans at their sentinels.
    pub fn reconstruct(&self) -> Vec<String> {
        let mut spans: Vec<&[String]> = Vec::new();
        let mut start = None;
        for (i, t) in self.target.iter().enumerate() {
            if is_sentinel(t) {
                if let Some(s) = start {
                    spans.push(&self.target[s..i]);
                }
                start = Some(i + 1);
            }
        }
        if let Some(s) = start {
            spans.push(&self.target[s..]);
        }
        let mut spans = spans.into_iter();
        let mut out = Vec::new();
        for t in &self.corrupted_input {
            if is_sentinel(t) {
                out.extend(spans.next().into_iter().flatten().cloned());
            } else {
                out.push(t.clone());
            }
        }
        out
    }
}

pub fn build_ssi(schema: &Schema, order: NameOrder) -> Result<SsiPrompt, PromptError> {
    if schema.is_empty() {
        return Err(PromptError::EmptySchema);
    }
    let mut spots: Vec<&String> = schema.spots.iter().collect();
    let mut assos: Vec<&String> = schema.assos.iter().collect();
    if let NameOrder::Shuffled(seed) = order {
        let mut rng = crate::seeded_rng(seed);
        spots.shuffle(&mut rng);
        assos.shuffle(&mut rng);
    }
    let mut tokens = Vec::with_capacity(2 * (spots.len() + assos.len()) + 1);
    for name in spots {
        tokens.push(SPOT_MARKER.to_string());
        tokens.push(name.clone());
    }
    for name in assos {
        tokens.push(ASSO_MARKER.to_string());
        tokens.push(name.clone());
    }
    tokens.push(TEXT_MARKER.to_string());
    Ok(SsiPrompt { tokens })
}

/// Adds up to `n_spot` / `n_asso` names drawn uniformly without
/// replacement from `pool` minus the instance's own names.
pub fn sample_schema_negatives<R: Rng + ?Sized>(
    instance_schema: &Schema,
    pool: &Schema,
    n_spot: usize,
    n_asso: usize,
    rng: &mut R,
) -> Schema {
    let mut out = instance_schema.clone();
    let spot_candidates: Vec<&String> = pool.spots.difference(&instance_schema.spots).collect();
    out.spots
        .extend(spot_candidates.choose_multiple(rng, n_spot).map(|s| (*s).clone()));
    let asso_candidates: Vec<&String> = pool.assos.difference(&instance_schema.assos).collect();
    out.assos
        .extend(asso_candidates.choose_multiple(rng, n_asso).map(|s| (*s).clone()));
    out
}

pub fn assemble_retrieval_input<S: AsRef<str>>(ssi: &SsiPrompt, text: &[S]) -> ModelInput {
    let mut tokens = ssi.tokens.clone();
    tokens.extend(text.iter().map(|t| t.as_ref().to_string()));
    ModelInput {
        kind: InputKind::Retrieval,
        tokens,
    }
}

pub fn assemble_extraction_input<S: AsRef<str>>(
    ssi: &SsiPrompt,
    text: &[S],
    knowledge: &SelRecord,
) -> Result<ModelInput, PromptError> {
    linearize_sel(knowledge)?;
    let mut input = assemble_retrieval_input(ssi, text);
    input.tokens.extend(tokenize_record(knowledge));
    input.kind = InputKind::Extraction;
    Ok(input)
}

/// Span corruption for the denoising objective.
///
/// Span lengths are geometric with mean `mean_span`, truncated at the
/// remaining budget of `ceil(rate * len)` tokens. Spans never touch, so
/// each removed span gets its own sentinel.
pub fn corrupt_text<S: AsRef<str>, R: Rng + ?Sized>(
    text: &[S],
    rate: f64,
    mean_span: f64,
    rng: &mut R,
) -> Result<CorruptionPair, PromptError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(PromptError::InvalidRate(rate));
    }
    if !(mean_span >= 1.0) {
        return Err(PromptError::InvalidMeanSpan(mean_span));
    }
    if text.is_empty() {
        return Err(PromptError::EmptyText);
    }
    let n = text.len();
    let budget = ((rate * n as f64).ceil() as usize).clamp(1, n);

    let p = 1.0 / mean_span;
    let mut lengths = Vec::new();
    let mut removed = 0;
    while removed < budget {
        let len = geometric(p, rng).min(budget - removed);
        lengths.push(len);
        removed += len;
    }
    // Spans need a separator token between them and a sentinel each.
    while lengths.len() > 1 && (removed + lengths.len() - 1 > n || lengths.len() > MAX_SENTINELS) {
        let last = lengths.pop().unwrap_or(0);
        *lengths.last_mut().expect("at least one span") += last;
    }
    let spans = lengths.len();

    let kept = n - removed;
    let mut gaps = vec![0usize; spans + 1];
    for g in gaps.iter_mut().take(spans).skip(1) {
        *g = 1;
    }
    for _ in 0..kept - (spans - 1) {
        let slot = rng.gen_range(0..=spans);
        gaps[slot] += 1;
    }

    let mut corrupted_input = Vec::with_capacity(kept + spans);
    let mut target = Vec::with_capacity(removed + spans);
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        corrupted_input.extend(text[pos..pos + gaps[i]].iter().map(|t| t.as_ref().to_string()));
        pos += gaps[i];
        corrupted_input.push(sentinel(i));
        target.push(sentinel(i));
        target.extend(text[pos..pos + len].iter().map(|t| t.as_ref().to_string()));
        pos += len;
    }
    corrupted_input.extend(text[pos..].iter().map(|t| t.as_ref().to_string()));
    Ok(CorruptionPair {
        corrupted_input,
        target,
    })
}

/// Geometric length on {1, 2, ...} with success probability `p`.
fn geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> usize {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    1 + (u.ln() / (1.0 - p).ln()).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sel::{parse_sel, SpotGroup};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn ssi_template() {
        let p = build_ssi(&Schema::new(["LOC"], ["Located_In"]), NameOrder::default()).unwrap();
        assert_eq!(p.to_string(), "[spot] LOC [asso] Located_In [text]");
        let p = build_ssi(&Schema::new(["B", "A"], Vec::<String>::new()), NameOrder::default()).unwrap();
        assert_eq!(p.to_string(), "[spot] A [spot] B [text]");
        assert_eq!(
            build_ssi(&Schema::default(), NameOrder::default()),
            Err(PromptError::EmptySchema)
        );
    }

    #[test]
    fn ssi_is_deterministic() {
        let schema = Schema::new(["A", "B", "C", "D"], ["r", "s"]);
        for order in [NameOrder::Lexicographic, NameOrder::Shuffled(9)] {
            assert_eq!(build_ssi(&schema, order), build_ssi(&schema, order));
        }
    }

    #[test]
    fn negatives_default_and_degenerate() {
        assert_eq!(DEFAULT_SPOT_NEGATIVES, 10);
        assert_eq!(DEFAULT_ASSO_NEGATIVES, 10);
        let schema = Schema::new(["A"], ["r"]);
        let mut rng = crate::seeded_rng(1);
        assert_eq!(sample_schema_negatives(&schema, &schema, 10, 10, &mut rng), schema);
    }

    #[test]
    fn negatives_are_seeded() {
        let pool = Schema::new((0..100).map(|i| format!("S{i}")), (0..100).map(|i| format!("R{i}")));
        let gold = Schema::new(["S1"], ["R1"]);
        let a = sample_schema_negatives(&gold, &pool, 10, 10, &mut crate::seeded_rng(5));
        let b = sample_schema_negatives(&gold, &pool, 10, 10, &mut crate::seeded_rng(5));
        assert_eq!(a, b);
        assert_eq!(a.spots.len(), 11);
        assert_eq!(a.assos.len(), 11);
        assert!(a.contains(&gold));
    }

    #[test]
    fn retrieval_and_extraction_inputs() {
        let ssi = build_ssi(&Schema::new(["A"], Vec::<String>::new()), NameOrder::default()).unwrap();
        assert_eq!(ssi.len(), 3);
        let text = toks("a b c d e");
        let r = assemble_retrieval_input(&ssi, &text);
        assert_eq!(r.kind, InputKind::Retrieval);
        assert_eq!(r.tokens.len(), 8);
        assert_eq!(assemble_retrieval_input::<String>(&ssi, &[]).tokens, ssi.tokens);

        let e = assemble_extraction_input(&ssi, &text, &SelRecord::default()).unwrap();
        assert_eq!(e.kind, InputKind::Extraction);
        assert_eq!(&e.tokens[8..], ["(", ")"]);
        assert_eq!(&e.tokens[..8], &r.tokens[..]);

        let k = parse_sel("((A: b c))").unwrap();
        let e = assemble_extraction_input(&ssi, &text, &k).unwrap();
        assert_eq!(e.tokens.len(), 8 + 8);

        let bad = SelRecord::new(vec![SpotGroup::new("A:B", "x")]);
        assert!(matches!(
            assemble_extraction_input(&ssi, &text, &bad),
            Err(PromptError::Sel(SelError::InvalidName(_)))
        ));
    }

    #[test]
    fn corruption_defaults_and_edges() {
        assert_eq!(DEFAULT_CORRUPTION_RATE, 0.15);
        assert_eq!(DEFAULT_MEAN_SPAN, 3.0);
        let mut rng = crate::seeded_rng(0);
        let one = toks("x");
        let pair = corrupt_text(&one, 0.15, 3.0, &mut rng).unwrap();
        assert!(pair.removed_tokens() <= 1);
        assert_eq!(pair.reconstruct(), one);

        assert!(corrupt_text(&one, 0.0, 3.0, &mut rng).is_err());
        assert!(corrupt_text(&one, 1.0, 3.0, &mut rng).is_err());
        assert!(corrupt_text(&one, 0.5, 0.5, &mut rng).is_err());
        assert!(corrupt_text::<String, _>(&[], 0.5, 3.0, &mut rng).is_err());
    }

    #[test]
    fn corruption_sentinels_in_order() {
        let text: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let pair = corrupt_text(&text, 0.15, 3.0, &mut crate::seeded_rng(3)).unwrap();
        let in_input: Vec<&String> = pair.corrupted_input.iter().filter(|t| is_sentinel(t)).collect();
        let in_target: Vec<&String> = pair.target.iter().filter(|t| is_sentinel(t)).collect();
        assert_eq!(in_input, in_target);
        assert_eq!(pair.removed_tokens(), 9);
        assert_eq!(pair.reconstruct(), text);
    }

    #[test]
    fn sentinel_spelling() {
        assert_eq!(sentinel(0), "<extra_id_0>");
        assert!(is_sentinel("<extra_id_99>"));
        assert!(!is_sentinel("<extra_id_100>"));
        assert!(!is_sentinel("extra_id_1"));
    }
}
