//! Shared tokenizer for the lexical components (mock embeddings, keyword
//! extraction, overlap scoring).
//!
//! A token is a maximal run of alphanumeric characters; everything else —
//! whitespace and punctuation alike — separates tokens. Output is lowercased,
//! so "Don't Stop!" yields `["don", "t", "stop"]`.

/// Lowercased alphanumeric tokens of `text`, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
