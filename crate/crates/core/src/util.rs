//! Small shared helpers: seed derivation, digests, whitespace tokenization.

use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from a base seed and a list of string parts.
///
/// Every stochastic choice in the pipeline is keyed through this so results
/// do not depend on scheduling order.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Whitespace token count, the length unit used by corpus statistics.
pub fn token_len(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercased alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Spelled-out English number for small counts, digits otherwise.
pub fn number_word(n: usize) -> String {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen", "twenty",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Inverse of [`number_word`] for the spelled range, also accepting digits.
pub fn parse_number_word(word: &str) -> Option<usize> {
    let w = word.trim().to_lowercase();
    if let Ok(n) = w.parse() {
        return Some(n);
    }
    (0..=20).find(|&n| number_word(n) == w)
}
