//! Training: single optimizer steps over image–text batches and the
//! multi-phase curriculum that strings them together.
//!
//! A step builds one small tape per image and per caption (independent
//! forward passes), a shared loss tape over the collected embeddings, and
//! then drives each item tape backward seeded with the loss gradient of
//! its embedding. Gradients fold into one accumulator in schema order, so
//! a step is deterministic regardless of how the forwards were scheduled.
//!
//! Batch composition is stateless: the items of (phase p, step s) come
//! from an RNG derived from (seed, p, s) alone. Resuming from a saved
//! phase/step therefore replays the exact batch sequence the
//! uninterrupted run would have seen — no sampler state to persist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::model::forward::{
    encode_image_on_tape, encode_text_on_tape, patch_matrix, ParamVars,
};
use crate::model::loss::contrastive_loss_on_tape;
use crate::model::optim::AdamState;
use crate::model::params::ModelParams;
use crate::scalar::{fp, Scalar};
use crate::tape::Tape;

/// One training example: an image and its tokenized caption.
#[derive(Debug, Clone)]
pub struct Pair {
    pub image: Image,
    pub token_ids: Vec<u32>,
}

/// One curriculum phase: how many steps, at what learning rate, over
/// which corpora.
#[derive(Debug, Clone)]
pub struct TrainPhase {
    /// Label used in loss-curve output.
    pub name: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `(corpus index, weight)` pairs; weights must sum to 1. A single
    /// entry with weight 1 selects one dataset.
    pub mix: Vec<(usize, f64)>,
}

impl TrainPhase {
    /// Phase over a single corpus.
    pub fn single(name: &str, steps: usize, learning_rate: f64, batch_size: usize, corpus: usize) -> Self {
        Self {
            name: name.to_owned(),
            steps,
            learning_rate,
            batch_size,
            mix: vec![(corpus, 1.0)],
        }
    }

    fn validate(&self, corpora_sizes: &[usize]) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "phase `{}` has batch_size 0",
                self.name
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "phase `{}` has learning rate {}",
                self.name, self.learning_rate
            )));
        }
        if self.mix.is_empty() {
            return Err(Error::Config(format!(
                "phase `{}` selects no dataset",
                self.name
            )));
        }
        let mut total = 0.0;
        for &(corpus, w) in &self.mix {
            if corpus >= corpora_sizes.len() {
                return Err(Error::Config(format!(
                    "phase `{}` references corpus {corpus}, only {} provided",
                    self.name,
                    corpora_sizes.len()
                )));
            }
            if corpora_sizes[corpus] == 0 {
                return Err(Error::Data(format!(
                    "phase `{}` draws from corpus {corpus}, which is empty",
                    self.name
                )));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!(
                    "phase `{}` has mix weight {w} outside [0, 1]",
                    self.name
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "phase `{}` mix weights sum to {total}, expected 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// The desk-scale default curriculum: noisy web-style corpus first, the
/// curated corpus second, then a 0.97/0.03 mix favoring the curated data,
/// at decreasing learning rates.
pub fn default_tri_phase(batch_size: usize, corpus_web: usize, corpus_curated: usize) -> Vec<TrainPhase> {
    vec![
        TrainPhase::single("web", 200, 1e-4, batch_size, corpus_web),
        TrainPhase::single("curated", 200, 5e-5, batch_size, corpus_curated),
        TrainPhase {
            name: "mix".to_owned(),
            steps: 50,
            learning_rate: 1e-5,
            batch_size,
            mix: vec![(corpus_curated, 0.97), (corpus_web, 0.03)],
        },
    ]
}

/// One optimizer update on the contrastive loss over `batch`. Returns the
/// batch loss (pre-update).
pub fn train_step<S: Scalar>(
    params: &mut ModelParams<S>,
    opt: &mut AdamState<S>,
    batch: &[&Pair],
    learning_rate: S,
) -> Result<S> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let cfg = params.config.clone();
    let b = batch.len();
    let d = cfg.proj_dim;

    struct ItemTape<S: Scalar> {
        tape: Tape<S>,
        pv: ParamVars,
        out: crate::tape::Var,
    }

    // Independent forward passes, one tape per item. Tapes stay alive so
    // backward can reuse their stored activations.
    let mut img_tapes = Vec::with_capacity(b);
    let mut txt_tapes = Vec::with_capacity(b);
    for pair in batch {
        let patches = patch_matrix::<S>(&pair.image, &cfg)?;
        let mut tape = Tape::new();
        let pv = ParamVars::register_filtered(
            &mut tape,
            params,
            true,
            &["vision.", "pool.", "img_proj."],
        )?;
        let px = tape.leaf_tensor(&patches)?;
        let fwd = encode_image_on_tape(&mut tape, &cfg, &pv, px)?;
        img_tapes.push(ItemTape {
            tape,
            pv,
            out: fwd.embedding,
        });

        let mut tape = Tape::new();
        let pv =
            ParamVars::register_filtered(&mut tape, params, true, &["text.", "txt_proj."])?;
        let emb = encode_text_on_tape(&mut tape, &cfg, &pv, &pair.token_ids)?;
        txt_tapes.push(ItemTape {
            tape,
            pv,
            out: emb,
        });
    }

    // Loss tape over the collected embeddings plus the two loss scalars.
    let mut img_data = Vec::with_capacity(b * d);
    let mut txt_data = Vec::with_capacity(b * d);
    for it in &img_tapes {
        img_data.extend_from_slice(it.tape.value(it.out));
    }
    for it in &txt_tapes {
        txt_data.extend_from_slice(it.tape.value(it.out));
    }
    let mut ltape = Tape::new();
    let iv = ltape.param(&img_data, b, d)?;
    let tv = ltape.param(&txt_data, b, d)?;
    let log_t = ltape.param(params.get("loss.log_t").data(), 1, 1)?;
    let bias = ltape.param(params.get("loss.b").data(), 1, 1)?;
    let loss_var = contrastive_loss_on_tape(&mut ltape, iv, tv, log_t, bias)?;
    let loss = ltape.value(loss_var)[0];
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    ltape.backward(loss_var)?;

    // Fold gradients into one accumulator in schema order: loss scalars,
    // then image items, then text items.
    let mut grads: Vec<Vec<S>> = params
        .iter()
        .map(|(_, t)| vec![S::zero(); t.numel()])
        .collect();
    let add_into = |dst: &mut [S], src: &[S]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    };
    let pos_log_t = params.position("loss.log_t").expect("schema name");
    let pos_bias = params.position("loss.b").expect("schema name");
    add_into(&mut grads[pos_log_t], ltape.grad(log_t).expect("trainable"));
    add_into(&mut grads[pos_bias], ltape.grad(bias).expect("trainable"));
    let d_img = ltape.grad(iv).expect("trainable").to_vec();
    let d_txt = ltape.grad(tv).expect("trainable").to_vec();
    drop(ltape);

    for (i, mut it) in img_tapes.into_iter().enumerate() {
        it.tape.backward_seeded(it.out, &d_img[i * d..(i + 1) * d])?;
        for (pos, var) in it.pv.registered() {
            if let Some(g) = it.tape.grad(var) {
                add_into(&mut grads[pos], g);
            }
        }
    }
    for (i, mut it) in txt_tapes.into_iter().enumerate() {
        it.tape.backward_seeded(it.out, &d_txt[i * d..(i + 1) * d])?;
        for (pos, var) in it.pv.registered() {
            if let Some(g) = it.tape.grad(var) {
                add_into(&mut grads[pos], g);
            }
        }
    }

    opt.apply(params.tensors_mut(), &grads, learning_rate)?;
    Ok(loss)
}

/// Seed for the batch drawn at (phase, step), derived from the master
/// seed by splitmix chaining.
fn batch_seed(seed: u64, phase: usize, step: usize) -> u64 {
    crate::seeding::derive_seed(seed, &[phase as u64, step as u64])
}

/// Samples the batch for (phase, step): each slot independently picks a
/// corpus by mix weight, then an item uniformly within it. Returns
/// `(corpus, item)` indices.
pub fn batch_indices(
    seed: u64,
    phase_idx: usize,
    step: usize,
    phase: &TrainPhase,
    corpora_sizes: &[usize],
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, phase_idx, step));
    let mut out = Vec::with_capacity(phase.batch_size);
    for _ in 0..phase.batch_size {
        let corpus = if phase.mix.len() == 1 {
            phase.mix[0].0
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = phase.mix[phase.mix.len() - 1].0;
            for &(c, w) in &phase.mix {
                acc += w;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            chosen
        };
        let item = rng.gen_range(0..corpora_sizes[corpus]);
        out.push((corpus, item));
    }
    out
}

/// Where to pick up a curriculum: the next (phase, step within phase) to
/// execute. `ResumePoint::start()` runs everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResumePoint {
    pub phase: usize,
    pub step: usize,
}

impl ResumePoint {
    pub fn start() -> Self {
        Self { phase: 0, step: 0 }
    }
}

/// One row of the training loss curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Global 1-based step counter across all phases.
    pub step: usize,
    pub phase: String,
    pub loss: f64,
}

/// Runs the phases in order, sampling batches with the stateless per-step
/// sampler. `on_phase_end` fires after each completed phase (checkpoint
/// hooks). Returns the loss record of every executed step.
pub fn curriculum_train<S: Scalar>(
    params: &mut ModelParams<S>,
    opt: &mut AdamState<S>,
    phases: &[TrainPhase],
    corpora: &[Vec<Pair>],
    seed: u64,
    resume: ResumePoint,
    mut on_phase_end: impl FnMut(usize, &ModelParams<S>, &AdamState<S>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if phases.is_empty() {
        return Err(Error::Config("curriculum needs at least one phase".into()));
    }
    let sizes: Vec<usize> = corpora.iter().map(Vec::len).collect();
    for phase in phases {
        phase.validate(&sizes)?;
    }
    if resume.phase > phases.len()
        || (resume.phase < phases.len() && resume.step > phases[resume.phase].steps)
    {
        return Err(Error::Config(format!(
            "resume point (phase {}, step {}) is outside the curriculum",
            resume.phase, resume.step
        )));
    }

    let mut records = Vec::new();
    let mut global_step: usize =
        phases[..resume.phase].iter().map(|p| p.steps).sum::<usize>() + resume.step;
    for (pi, phase) in phases.iter().enumerate().skip(resume.phase) {
        let first = if pi == resume.phase { resume.step } else { 0 };
        for step in first..phase.steps {
            let picks = batch_indices(seed, pi, step, phase, &sizes);
            let batch: Vec<&Pair> = picks.iter().map(|&(c, i)| &corpora[c][i]).collect();
            let loss = train_step(params, opt, &batch, fp(phase.learning_rate)).map_err(
                |e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (phase `{}`, step {step})",
                        phase.name
                    )),
                    other => other,
                },
            )?;
            global_step += 1;
            records.push(StepRecord {
                step: global_step,
                phase: phase.name.clone(),
                loss: num_traits::NumCast::from(loss).unwrap_or(f64::NAN),
            });
        }
        on_phase_end(pi, params, opt)?;
    }
    Ok(records)
}
