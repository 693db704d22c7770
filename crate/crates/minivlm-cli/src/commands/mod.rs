//! Subcommand implementations. Each one takes the resolved run
//! configuration plus its own operational arguments, echoes the
//! configuration next to its outputs, and writes every artifact under
//! `paths.out_dir` (or, for `gen-data`, the explicit `--out` directory).

mod evals;
mod filter;
mod gen_data;
mod localize;
mod refine;
mod train;

pub use evals::{eval_classify, eval_retrieval};
pub use filter::filter_run;
pub use gen_data::gen_data;
pub use localize::localize;
pub use refine::refine;
pub use train::train;

use minivlm::data::corpus::corpus_classes;
use minivlm::data::{ingest_jsonl, CaptionedImage};
use minivlm::model::checkpoint::load_checkpoint_expecting;
use minivlm::model::{ModelParams, Vocab};
use minivlm::Result;

use crate::config::RunConfig;

/// Checkpoint and vocabulary from the configured paths, with the
/// checkpoint checked against the run's `[model]` section so a run never
/// silently evaluates some other model.
pub(crate) fn load_model(cfg: &RunConfig) -> Result<(ModelParams<f32>, Vocab)> {
    let config = cfg.model_config()?;
    let params = load_checkpoint_expecting(cfg.paths.checkpoint(), &config)?;
    let vocab = Vocab::load(cfg.paths.vocab())?;
    Ok((params, vocab))
}

pub(crate) fn load_target_corpus(cfg: &RunConfig) -> Result<Vec<CaptionedImage>> {
    ingest_jsonl(cfg.paths.corpus()?)
}

/// The configured class list, or every class the corpus names when the
/// config leaves it empty.
pub(crate) fn classes_or_corpus(
    configured: &[String],
    corpus: &[CaptionedImage],
) -> Vec<String> {
    if configured.is_empty() {
        corpus_classes(corpus)
    } else {
        configured.to_vec()
    }
}
