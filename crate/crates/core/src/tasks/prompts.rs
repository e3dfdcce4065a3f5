//! Instruction templates.

pub const CAPTION: &str = "what does the video describe ?";
pub const IMAGE_CAPTION: &str = "what does the image describe ?";
pub const MATCH_PREFIX: &str = "does the video describe";
pub const FOM_GENERATIVE: &str = "what is the correct frame order in the video ?";
pub const FOM_CONTRASTIVE: &str = "are the frames in the video in the correct order ?";

pub fn matching(caption: &str) -> String {
    format!("{MATCH_PREFIX} {} ?", caption.trim())
}

/// Every fixed word the templates can emit.
pub fn all_template_text() -> Vec<String> {
    [CAPTION, IMAGE_CAPTION, MATCH_PREFIX, FOM_GENERATIVE, FOM_CONTRASTIVE, "?"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
