/// Maximum words per indexed passage.
pub const PASSAGE_WORDS: usize = 512;

/// Splits `body` into consecutive, non-overlapping passages of at most
/// `max_words` whitespace-separated words. Words are re-joined with single
/// spaces.
pub fn chunk_words(body: &str, max_words: usize) -> Vec<String> {
    assert!(max_words > 0, "chunk size must be positive");
    let words: Vec<&str> = body.split_whitespace().collect();
    words.chunks(max_words).map(|c| c.join(" ")).collect()
}
