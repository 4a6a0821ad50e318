use textwrap::{Options, WordSplitter};

pub const DEFAULT_WRAP_WIDTH: usize = 90;

/// Whitespace-normalize and wrap to lines of at most `width` characters.
/// Words are only broken when a single word is longer than `width`.
pub fn wrap_text(text: &str, width: usize) -> Vec<String> {
    assert!(width >= 1, "wrap width must be positive");
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if normalized.is_empty() {
        return Vec::new();
    }
    let opts = Options::new(width)
        .break_words(true)
        .word_splitter(WordSplitter::NoHyphenation);
    textwrap::wrap(&normalized, opts)
        .into_iter()
        .map(|l| l.into_owned())
        .collect()
}
