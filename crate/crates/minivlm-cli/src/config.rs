//! Run configuration: one TOML file drives a pipeline run. Every key has
//! a default, unknown keys are rejected, and command-line flags override
//! their keys. After loading, the fully resolved configuration — derived
//! paths filled in, optional sections expanded — is echoed as
//! `effective-config.toml` next to the run's outputs, so a run can be
//! reproduced from its artifact directory alone.
//!
//! The whole file is validated up front regardless of which subcommand
//! runs: a config that trains fine but carries a malformed `[refinement]`
//! section is rejected before any work starts, not on the day the
//! refinement finally runs.

use std::path::{Path, PathBuf};

use minivlm::localize::WindowSpec;
use minivlm::model::train::{default_tri_phase, TrainPhase};
use minivlm::model::ModelConfig;
use minivlm::refine::{FineTuneScope, RefineSettings, ThresholdMode, ThresholdSchedule};
use minivlm::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for sampling and generation. Weight initialization has
    /// its own seed under `model.seed`, so data and init can be varied
    /// independently.
    pub seed: u64,
    /// Cap on data-parallel workers; 0 keeps one worker per core.
    pub threads: usize,
    pub model: ModelSection,
    pub paths: PathsSection,
    /// Training curriculum, in execution order.
    pub phases: Vec<PhaseSection>,
    pub refinement: RefinementSection,
    pub eval: EvalSection,
    pub filter: FilterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            model: ModelSection::default(),
            paths: PathsSection::default(),
            phases: default_phase_sections(),
            refinement: RefinementSection::default(),
            eval: EvalSection::default(),
            filter: FilterSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`, or starts from pure defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Fills derived defaults (checkpoint/vocab paths, refinement window
    /// and scope) and validates every section. Call once, after overrides.
    pub fn resolve(&mut self) -> Result<()> {
        let config = self.model.to_config()?;
        self.paths.resolve();
        self.refinement.resolve(&config);
        for phase in &self.phases {
            phase.to_phase()?;
        }
        self.refinement.validate()?;
        self.eval.validate()?;
        self.filter.validate()?;
        Ok(())
    }

    /// The validated model geometry.
    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.to_config()
    }

    /// Writes the resolved configuration as `effective-config.toml` in
    /// `dir`, creating the directory if needed.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("cannot serialize the effective config: {e}")))?;
        let path = dir.join("effective-config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Command-line overrides shared by every subcommand; each beats its
/// config key when present.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

/// Load → override → resolve, in that order, so a `--out-dir` override
/// also moves the derived checkpoint and vocabulary paths.
pub fn load_run_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(file)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = overrides.threads {
        cfg.threads = threads;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    if let Some(ckpt) = &overrides.checkpoint {
        cfg.paths.checkpoint = Some(ckpt.clone());
    }
    if let Some(corpus) = &overrides.corpus {
        cfg.paths.corpus = Some(corpus.clone());
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// Model geometry, mirrored field-for-field so a config file can override
/// any subset of keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth_vision: usize,
    pub depth_text: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(&ModelConfig::default())
    }
}

impl ModelSection {
    fn from_config(c: &ModelConfig) -> Self {
        Self {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            depth_vision: c.depth_vision,
            depth_text: c.depth_text,
            heads: c.heads,
            proj_dim: c.proj_dim,
            vocab_size: c.vocab_size,
            max_text_len: c.max_text_len,
            seed: c.seed,
        }
    }

    pub fn to_config(&self) -> Result<ModelConfig> {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth_vision: self.depth_vision,
            depth_text: self.depth_text,
            heads: self.heads,
            proj_dim: self.proj_dim,
            vocab_size: self.vocab_size,
            max_text_len: self.max_text_len,
            seed: self.seed,
        }
        .validate()
    }
}

/// Where inputs come from and artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory every artifact of the run lands in.
    pub out_dir: PathBuf,
    /// Training corpora (JSONL); phases reference them by index.
    pub corpora: Vec<PathBuf>,
    /// Evaluation / refinement / filtering target corpus (JSONL).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out_dir>/model.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Tokenizer vocabulary; defaults to `<out_dir>/vocab.txt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            corpora: Vec::new(),
            corpus: None,
            checkpoint: None,
            vocab: None,
        }
    }
}

impl PathsSection {
    fn resolve(&mut self) {
        if self.checkpoint.is_none() {
            self.checkpoint = Some(self.out_dir.join("model.ckpt"));
        }
        if self.vocab.is_none() {
            self.vocab = Some(self.out_dir.join("vocab.txt"));
        }
    }

    pub fn checkpoint(&self) -> &Path {
        self.checkpoint.as_deref().expect("paths are resolved at load time")
    }

    pub fn vocab(&self) -> &Path {
        self.vocab.as_deref().expect("paths are resolved at load time")
    }

    /// The target corpus, which unlike the derived paths has no sane
    /// default: commands that need one fail fast when it is missing.
    pub fn corpus(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or_else(|| {
            Error::Config("no target corpus: set paths.corpus or pass --corpus".into())
        })
    }
}

/// One curriculum phase. The data source is either `corpus` (a single
/// index into `paths.corpora`) or `mix` (weighted indices) — exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub name: String,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<MixEntry>>,
}

fn default_batch_size() -> usize {
    16
}

/// One corpus in a phase's sampling mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub corpus: usize,
    pub weight: f64,
}

impl PhaseSection {
    fn from_phase(p: &TrainPhase) -> Self {
        let single = p.mix.len() == 1 && (p.mix[0].1 - 1.0).abs() < 1e-12;
        Self {
            name: p.name.clone(),
            steps: p.steps,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            corpus: single.then(|| p.mix[0].0),
            mix: (!single).then(|| {
                p.mix
                    .iter()
                    .map(|&(corpus, weight)| MixEntry { corpus, weight })
                    .collect()
            }),
        }
    }

    pub fn to_phase(&self) -> Result<TrainPhase> {
        let mix: Vec<(usize, f64)> = match (self.corpus, &self.mix) {
            (Some(c), None) => vec![(c, 1.0)],
            (None, Some(entries)) if entries.is_empty() => {
                return Err(Error::Config(format!("phase `{}` has an empty mix", self.name)));
            }
            (None, Some(entries)) => entries.iter().map(|e| (e.corpus, e.weight)).collect(),
            _ => {
                return Err(Error::Config(format!(
                    "phase `{}` needs exactly one of `corpus` and `mix`",
                    self.name
                )));
            }
        };
        Ok(TrainPhase {
            name: self.name.clone(),
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            mix,
        })
    }
}

/// The stock curriculum, phrased as config sections: corpus 0 plays the
/// noisy web-style role, corpus 1 the curated one.
fn default_phase_sections() -> Vec<PhaseSection> {
    default_tri_phase(16, 0, 1)
        .iter()
        .map(PhaseSection::from_phase)
        .collect()
}

/// Threshold schedule, loop sizing, and fine-tuning scope for `refine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSection {
    pub mode: ThresholdMode,
    pub start: f64,
    pub increment: f64,
    pub max: f64,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub learning_rate: f64,
    /// Localization queries; empty means every class named in the corpus.
    pub queries: Vec<String>,
    /// Pooling window as `[size, stride]`; omitted means the stock window
    /// for the model's patch grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    /// Parameter-name prefixes allowed to move; empty means the stock
    /// scope (pooling head, image projection, final vision block).
    pub trainable: Vec<String>,
}

impl Default for RefinementSection {
    fn default() -> Self {
        let stock = ThresholdSchedule::default_percentile();
        Self {
            mode: stock.mode,
            start: stock.start,
            increment: stock.increment,
            max: stock.max,
            iterations: 3,
            steps_per_iteration: 20,
            learning_rate: 1e-4,
            queries: Vec::new(),
            window: None,
            trainable: Vec::new(),
        }
    }
}

impl RefinementSection {
    fn resolve(&mut self, config: &ModelConfig) {
        let stock = RefineSettings::defaults(config);
        self.window
            .get_or_insert([stock.window.size, stock.window.stride]);
        if self.trainable.is_empty() {
            self.trainable = stock.scope.trainable_prefixes;
        }
    }

    fn validate(&self) -> Result<()> {
        self.to_schedule()?;
        self.to_settings()?;
        if self.iterations == 0 {
            return Err(Error::Config("refinement.iterations must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "refinement.learning_rate is {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn to_schedule(&self) -> Result<ThresholdSchedule> {
        ThresholdSchedule::new(self.mode, self.start, self.increment, self.max)
    }

    pub fn to_settings(&self) -> Result<RefineSettings> {
        let [size, stride] = self.window.expect("paths are resolved at load time");
        Ok(RefineSettings {
            window: WindowSpec::new(size, stride)?,
            scope: FineTuneScope {
                trainable_prefixes: self.trainable.clone(),
            },
        })
    }
}

/// Retrieval cutoffs and the classification prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Recall cutoffs, strictly ascending.
    pub ks: Vec<usize>,
    /// Classification prompt; `{}` receives the class name.
    pub template: String,
    /// Class vocabulary; empty means every class named in the corpus.
    pub classes: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            template: "an aerial image of a {}".into(),
            classes: Vec::new(),
        }
    }
}

impl EvalSection {
    fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("eval.ks must name at least one cutoff".into()));
        }
        if self.ks[0] == 0 {
            return Err(Error::Config("recall@0 is not defined".into()));
        }
        for pair in self.ks.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "eval.ks must be strictly ascending, got {} before {}",
                    pair[0], pair[1]
                )));
            }
        }
        if !self.template.contains("{}") {
            return Err(Error::Config(format!(
                "eval.template `{}` has no {{}} placeholder",
                self.template
            )));
        }
        Ok(())
    }
}

/// Sizing and cutoff for the domain-filter pipeline. The filter trains
/// and scores on generated imagery, so only counts and the keep
/// threshold are configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Keep-probability cutoff.
    pub threshold: f64,
    /// Training images per side (aerial / non-aerial).
    pub train_each: usize,
    /// Held-out labeled images per side for the accuracy report.
    pub heldout_each: usize,
    /// Images per side in the scored synthetic mix.
    pub mix_each: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            train_each: 64,
            heldout_each: 32,
            mix_each: 100,
        }
    }
}

impl FilterSection {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "filter.threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.train_each == 0 || self.heldout_each == 0 || self.mix_each == 0 {
            return Err(Error::Config(
                "filter image counts must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}
