//! Bracketed region-ID tokens such as `[2]` inside generated text.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::{Captures, Regex};

static BRACKET_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[(\d+)\]").expect("static pattern"));

/// All distinct integers appearing as `[n]` tokens.
///
/// Preceding characters are irrelevant, so `array[2]` counts as a mention of 2.
/// Integers too large for `u32` are ignored.
pub fn extract_id_mentions(text: &str) -> BTreeSet<u32> {
    BRACKET_ID
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

pub fn has_bracket_ids(text: &str) -> bool {
    BRACKET_ID.is_match(text)
}

/// Rewrite every `[old]` token through `mapping` in a single pass.
///
/// Returns the first id found in the text that the mapping does not cover.
pub fn rewrite_mentions(text: &str, mapping: &BTreeMap<u32, u32>) -> Result<String, u32> {
    let mut missing = None;
    let out = BRACKET_ID.replace_all(text, |c: &Captures| {
        let token = &c[1];
        match token.parse::<u32>().ok().and_then(|id| mapping.get(&id).map(|n| (id, *n))) {
            Some((_, new)) => format!("[{new}]"),
            None => {
                if missing.is_none() {
                    missing = Some(token.parse::<u32>().unwrap_or(u32::MAX));
                }
                c[0].to_string()
            }
        }
    });
    match missing {
        Some(id) => Err(id),
        None => Ok(out.into_owned()),
    }
}

/// Text with every bracket token removed.
pub fn strip_mentions(text: &str) -> String {
    BRACKET_ID.replace_all(text, "").into_owned()
}
