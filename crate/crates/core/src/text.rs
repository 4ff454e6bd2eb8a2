//! Shared text normalization helpers.

use unicode_normalization::UnicodeNormalization;

/// NFKC, lowercase, whitespace collapsed to single spaces and trimmed.
///
/// This is the key used for duplicate-query merging and for the hashing
/// embedder, so two strings that differ only in case, compatibility forms
/// or spacing are treated as the same query.
pub fn normalize_query(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    collapse_whitespace(&folded)
}

pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for token in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// Whitespace tokens of the normalized query form.
pub fn query_tokens(text: &str) -> Vec<String> {
    normalize_query(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}
