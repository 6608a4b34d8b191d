//! Random generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use urtf::sel::{AssoGroup, SelRecord, SpotGroup};

const NAME_CHARS: &[char] = &['a', 'b', 'Q', 'Z', '_', '-', '1', 'é', ' ', '.'];
const SPAN_CHARS: &[char] = &['a', 'b', 'x', ' ', '(', ')', ':', '\\', 'ü', '7', ','];

fn random_string<R: Rng>(rng: &mut R, chars: &[char], max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

/// A non-empty trimmed name without structural characters.
pub fn random_name<R: Rng>(rng: &mut R) -> String {
    loop {
        let s = random_string(rng, NAME_CHARS, 8).trim().to_string();
        if !s.is_empty() {
            return s;
        }
    }
}

/// A trimmed span that may contain parentheses, colons and backslashes.
pub fn random_span<R: Rng>(rng: &mut R) -> String {
    random_string(rng, SPAN_CHARS, 12).trim().to_string()
}

pub fn random_record<R: Rng>(rng: &mut R) -> SelRecord {
    let groups = (0..rng.gen_range(0..5))
        .map(|_| SpotGroup {
            spot_name: random_name(rng),
            info_span: random_span(rng),
            assos: (0..rng.gen_range(0..3))
                .map(|_| AssoGroup {
                    asso_name: random_name(rng),
                    info_span: random_span(rng),
                })
                .collect(),
        })
        .collect();
    SelRecord { groups }
}
