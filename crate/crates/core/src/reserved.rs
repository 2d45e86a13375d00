//! Reserved surface strings shared by the augmentation, subword and model layers.
//!
//! These strings are claimed by the toolkit and may not occur in input corpora
//! or terminology files; the loaders reject them so that downstream stages can
//! treat them as unambiguous markers.

/// Opens an annotated region around a matched source term.
pub const TAG_TERM_OPEN: &str = "<S>";
/// Separates the source side of a constraint from its required target side.
pub const TAG_CONSTRAINT: &str = "<C>";
/// Closes an annotated region.
pub const TAG_CONSTRAINT_CLOSE: &str = "</C>";
/// Replaces each source-term token when masking is enabled.
pub const MASK_TOKEN: &str = "MASK";

/// Tokens that must never be split by subword segmentation.
pub const PROTECTED_TOKENS: [&str; 4] =
    [TAG_TERM_OPEN, TAG_CONSTRAINT, TAG_CONSTRAINT_CLOSE, MASK_TOKEN];

/// Marker appended to every non-final subword unit of a segmented token.
pub const BPE_CONTINUATION: &str = "@@";

/// Separates constraints within one line of a sidecar constraint file.
pub const CONSTRAINT_DELIMITER: &str = "|||";

/// True when `text` is one of the inline tag tokens (including `MASK`).
pub fn is_tag(text: &str) -> bool {
    PROTECTED_TOKENS.contains(&text)
}

/// True when a surface string collides with toolkit-reserved markers and must
/// be rejected at load time.
pub fn is_reserved(text: &str) -> bool {
    is_tag(text) || text.contains(BPE_CONTINUATION) || text.contains(CONSTRAINT_DELIMITER)
}
