//! Text tokenization, frame handling, manifests and the synthetic corpus.

pub mod frames_io;
pub mod manifest;
pub mod synth;
pub mod tokenizer;
pub mod video;

pub use frames_io::{load_frames, read_vofr, write_png_dir, write_vofr};
pub use manifest::{build_vocab, load_manifest, DatasetManifest, ManifestRecord, QaPair};
pub use synth::{generate_synthetic_corpus, EventKind, EventScript, Shape, SyntheticCorpus, SyntheticSpec};
pub use tokenizer::{normalize, normalize_answer, TextTokenizer, Tokenizer, BOS, EOS, NO, PAD, UNK, YES};
pub use video::{
    center_crop, linear_indices, patch_pixels, patchify, resize_bilinear, resize_shorter_side, sample_frames_linear,
    PatchGrid, PatchProjection, VideoClip, CHANNELS,
};

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("manifest line {line}: duplicate clip_id `{clip_id}`")]
    DuplicateClip { line: usize, clip_id: String },
    #[error("clip `{0}` has no frames")]
    EmptyClip(String),
    #[error("frame size {height}x{width} is not divisible by patch size {patch}")]
    IndivisiblePatch { height: usize, width: usize, patch: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}
