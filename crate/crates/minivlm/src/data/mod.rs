//! Data plumbing: images, the JSONL corpus format, synthetic scene
//! generation, holdout splits, and the web-corpus domain filter.

pub mod corpus;
pub mod filter;
pub mod image;
pub mod jsonl;
pub mod mask;
pub mod synth;

pub use corpus::{build_vocab, holdout_split, require_grid_alignment, CaptionedImage};
pub use filter::{filter_corpus, train_domain_filter, DomainFilter, FilterReport};
pub use image::Image;
pub use jsonl::{ingest_jsonl, write_jsonl, ImageStorage};
pub use mask::Mask;
pub use synth::{
    class_names, generate_offdomain_images, generate_synthetic_corpus, render_scene,
    ObjectSpec, SceneSpec,
};
