//! Reserved token ids shared by every vocabulary in the engine.

/// Padding.
pub const PAD: usize = 0;
/// End of sequence; also used as the decoder's start symbol.
pub const EOS: usize = 1;
/// CTC blank.
pub const BLANK: usize = 2;
/// First id available for content tokens.
pub const FIRST_CONTENT: usize = 3;

/// Number of content tokens in a vocabulary of `size` ids.
pub fn content_size(size: usize) -> usize {
    size.saturating_sub(FIRST_CONTENT)
}
