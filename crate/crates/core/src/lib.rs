//! Retrieve-then-extract universal information extraction toolkit.
//!
//! - [`sel`]: the structured extraction language (parse, linearize, validate).
//! - [`prompting`]: schema prompts, model inputs and span corruption.
//! - [`metrics`]: offset reconstruction and span-based micro-F1.
//! - [`pairing`]: support-query pairing by per-class maximum-weight matching.
//! - [`autodiff`]: a small tape-based reverse-mode engine with higher-order gradients.
//! - [`metatrain`]: bi-level meta-pretraining of a toy sequence model.
//! - [`synth`]: synthetic IE tasks and the JSONL corpus format.

pub mod autodiff;
pub mod metatrain;
pub mod metrics;
pub mod pairing;
pub mod prompting;
pub mod sel;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
