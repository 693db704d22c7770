//! Self-training on the model's own similarity maps: threshold each map
//! into a pseudo-mask, fine-tune the vision side on a per-patch sigmoid
//! loss against those masks, raise the threshold, repeat. The text tower
//! stays frozen throughout, so query embeddings are computed once and the
//! retrieval space the thresholds are calibrated against cannot drift.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{require_grid_alignment, CaptionedImage};
use crate::data::image::write_pgm;
use crate::data::mask::Mask;
use crate::error::{Error, Result};
use crate::localize::{
    embed_query, map_statistics, smooth_attention_map, QueryEmbedding, SimilarityMap, WindowSpec,
};
use crate::model::forward::{linear, patch_matrix, vision_tokens_on_tape, ParamVars};
use crate::model::{encode_image, AdamState, ModelConfig, ModelParams, Vocab};
use crate::scalar::{fp, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a schedule value is turned into a cutoff on a similarity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// The schedule value is a cosine cutoff applied to every map as-is.
    Absolute,
    /// The schedule value is a percentile rank in 0..=100, resolved
    /// against each map's own values — per-image adaptivity.
    Percentile,
}

/// Non-decreasing threshold sequence: t_i = min(start + i·increment, max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub mode: ThresholdMode,
    pub start: f64,
    pub increment: f64,
    pub max: f64,
}

impl ThresholdSchedule {
    pub fn new(mode: ThresholdMode, start: f64, increment: f64, max: f64) -> Result<Self> {
        if !(start.is_finite() && increment.is_finite() && max.is_finite()) {
            return Err(Error::Config(
                "threshold schedule values must be finite".into(),
            ));
        }
        if increment < 0.0 {
            return Err(Error::Config(format!(
                "threshold increment must be ≥ 0, got {increment}"
            )));
        }
        if max < start {
            return Err(Error::Config(format!(
                "threshold ceiling {max} is below the start value {start}"
            )));
        }
        if mode == ThresholdMode::Percentile && !(0.0..=100.0).contains(&start) {
            return Err(Error::Config(format!(
                "percentile start {start} outside 0..=100"
            )));
        }
        if mode == ThresholdMode::Percentile && !(0.0..=100.0).contains(&max) {
            return Err(Error::Config(format!(
                "percentile ceiling {max} outside 0..=100"
            )));
        }
        Ok(Self {
            mode,
            start,
            increment,
            max,
        })
    }

    /// The stock schedule: percentile mode starting at the 80th, stepping
    /// by 4 points per iteration, capped at the 96th.
    pub fn default_percentile() -> Self {
        Self {
            mode: ThresholdMode::Percentile,
            start: 80.0,
            increment: 4.0,
            max: 96.0,
        }
    }

    /// Schedule value for an iteration; non-decreasing in `iteration`.
    pub fn value_at(&self, iteration: usize) -> f64 {
        (self.start + iteration as f64 * self.increment).min(self.max)
    }
}

/// A boolean per-patch mask cut from one similarity map, carrying enough
/// provenance to say which image, query, and cutoff produced it.
#[derive(Debug, Clone)]
pub struct PseudoMask {
    pub mask: Mask,
    pub query: String,
    /// The resolved cutoff: cell ⇔ map value strictly above this.
    pub threshold_used: f64,
    pub iteration: usize,
    pub image_id: String,
}

impl PseudoMask {
    /// Writes the mask as a binary PGM: 255 inside, 0 outside.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let gray: Vec<u8> = self
            .mask
            .cells()
            .iter()
            .map(|&c| if c { 255 } else { 0 })
            .collect();
        write_pgm(path, self.mask.side(), self.mask.side(), &gray)
    }
}

/// Thresholds a map at the schedule's value for `iteration`. Percentile
/// values resolve against this map's own order statistics; the comparison
/// is strictly greater either way, so a constant map above-thresholded
/// yields an empty mask rather than a full one.
pub fn extract_pseudo_labels<S: Scalar>(
    map: &SimilarityMap<S>,
    schedule: &ThresholdSchedule,
    iteration: usize,
    image_id: &str,
) -> PseudoMask {
    let value = schedule.value_at(iteration);
    let cutoff: S = match schedule.mode {
        ThresholdMode::Absolute => fp(value),
        ThresholdMode::Percentile => map_statistics(map).percentile(value),
    };
    let cells = map.values().iter().map(|&v| v > cutoff).collect();
    let mask = Mask::from_cells(map.side(), cells).expect("map side already validated");
    PseudoMask {
        mask,
        query: map.query().to_owned(),
        threshold_used: cutoff.to_f64().expect("cutoff fits in f64"),
        iteration,
        image_id: image_id.to_owned(),
    }
}

/// Intersection over union of two equally sized masks. Two empty masks
/// agree perfectly, so an empty union scores 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::Data(format!(
            "IoU between masks of different grids: {0}×{0} vs {1}×{1}",
            a.side(),
            b.side()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.cells().iter().zip(b.cells()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Cosine of every patch on its own against the query, as one N×1 column.
///
/// Pooling a single token is attention over one key: the softmax weight is
/// exactly 1, so the pooled vector is just that token through the value and
/// output linears. That lets the per-patch scores of a whole image run as
/// two batched linears instead of N separate pools, bitwise-equal to the
/// 1×1-window similarity map (a test below holds this path to it).
fn per_patch_cosines_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    patch_tokens: Var,
    text_col: Var,
) -> Result<Var> {
    let v = linear(tape, patch_tokens, pv.var("pool.wv"), pv.var("pool.bv"))?;
    let pooled = linear(tape, v, pv.var("pool.wo"), pv.var("pool.bo"))?;
    let projected = tape.matmul(pooled, pv.var("img_proj.w"))?;
    let unit = tape.l2_normalize_rows(projected);
    tape.matmul(unit, text_col)
}

/// Per-patch sigmoid loss on the tape: mean over patches of
/// −log σ(z_p·(t·sim_p + b)), z_p = ±1 from `cells`, reusing the
/// contrastive temperature and bias so patch and image scores share one
/// calibration. `text_col` is the query embedding as a proj_dim×1 column.
pub fn patch_supervision_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    patch_tokens: Var,
    text_col: Var,
    cells: &[bool],
) -> Result<Var> {
    let sims = per_patch_cosines_on_tape(tape, pv, patch_tokens, text_col)?;
    let (n, _) = tape.shape(sims);
    if n != cells.len() {
        return Err(Error::shape(
            "patch_supervision_loss",
            format!("{n} patches but a {}-cell mask", cells.len()),
        ));
    }
    let t = tape.exp(pv.var("loss.log_t"));
    let scaled = tape.scale_by_var(sims, t)?;
    let logits = tape.offset_by_var(scaled, pv.var("loss.b"))?;
    let z: Vec<S> = cells
        .iter()
        .map(|&c| if c { S::one() } else { -S::one() })
        .collect();
    let z = tape.leaf(&z, n, 1)?;
    let signed = tape.mul(z, logits)?;
    let neg = tape.scale(signed, -S::one());
    let sp = tape.softplus(neg);
    Ok(tape.mean_all(sp))
}

/// Evaluates the patch loss for one (image, query, mask) triple without
/// keeping gradient state. `patch_tokens` are final-layer tokens as
/// produced by [`encode_image`], `text_embedding` a 1×proj_dim unit row.
pub fn patch_supervision_loss<S: Scalar>(
    params: &ModelParams<S>,
    patch_tokens: &Tensor<S>,
    text_embedding: &Tensor<S>,
    mask: &PseudoMask,
) -> Result<S> {
    let cfg = &params.config;
    let (n, e) = patch_tokens.dims2();
    if n != cfg.patch_count() || e != cfg.embed_dim {
        return Err(Error::shape(
            "patch_supervision_loss",
            format!(
                "patch tokens are {n}×{e}, model expects {}×{}",
                cfg.patch_count(),
                cfg.embed_dim
            ),
        ));
    }
    if text_embedding.dims2() != (1, cfg.proj_dim) {
        return Err(Error::shape(
            "patch_supervision_loss",
            format!(
                "text embedding is {:?}, expected 1×{}",
                text_embedding.shape(),
                cfg.proj_dim
            ),
        ));
    }
    if mask.mask.side() != cfg.grid_side() {
        return Err(Error::shape(
            "patch_supervision_loss",
            format!(
                "mask grid {0}×{0} does not match the {1}×{1} patch grid",
                mask.mask.side(),
                cfg.grid_side()
            ),
        ));
    }
    let mut tape = Tape::new();
    let pv =
        ParamVars::register_filtered(&mut tape, params, false, &["pool.", "img_proj.", "loss."])?;
    let tokens = tape.leaf_tensor(patch_tokens)?;
    let text_col = tape.leaf(text_embedding.data(), cfg.proj_dim, 1)?;
    let loss = patch_supervision_loss_on_tape(&mut tape, &pv, tokens, text_col, mask.mask.cells())?;
    Ok(tape.value(loss)[0])
}

/// Which parameter tensors move during refinement, by schema-name prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneScope {
    pub trainable_prefixes: Vec<String>,
}

impl FineTuneScope {
    /// The stock scope: pooling head, image projection, and the final
    /// vision block. Earlier blocks and the loss calibration stay put so
    /// the retrieval space localization was calibrated against survives.
    pub fn head_and_final_block(config: &ModelConfig) -> Self {
        Self {
            trainable_prefixes: vec![
                "pool.".into(),
                "img_proj.".into(),
                format!("vision.l{}.", config.depth_vision - 1),
            ],
        }
    }

    /// Rejects scopes that would unfreeze the text tower (query embeddings
    /// are computed once and must stay valid) or that match nothing.
    fn validate<S: Scalar>(&self, params: &ModelParams<S>) -> Result<()> {
        if self.trainable_prefixes.is_empty() {
            return Err(Error::Config("fine-tune scope has no prefixes".into()));
        }
        for prefix in &self.trainable_prefixes {
            if "text.".starts_with(prefix.as_str())
                || prefix.starts_with("text.")
                || "txt_proj.".starts_with(prefix.as_str())
                || prefix.starts_with("txt_proj.")
            {
                return Err(Error::Config(format!(
                    "scope prefix `{prefix}` reaches the text tower, which stays frozen during refinement"
                )));
            }
            if !params.iter().any(|(name, _)| name.starts_with(prefix.as_str())) {
                return Err(Error::Config(format!(
                    "scope prefix `{prefix}` matches no parameter"
                )));
            }
        }
        Ok(())
    }
}

/// Map geometry and fine-tuning scope for a refinement run.
#[derive(Debug, Clone)]
pub struct RefineSettings {
    /// Window the similarity maps are computed with.
    pub window: WindowSpec,
    pub scope: FineTuneScope,
}

impl RefineSettings {
    /// 2×2 windows at stride 1 (clamped on a 1×1 grid) over the stock scope.
    pub fn defaults(config: &ModelConfig) -> Self {
        let size = config.grid_side().min(2);
        Self {
            window: WindowSpec::new(size, 1).expect("stock window geometry is valid"),
            scope: FineTuneScope::head_and_final_block(config),
        }
    }
}

/// One refinement iteration's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// The schedule value driving this iteration: a percentile rank or an
    /// absolute cosine, per the schedule mode. Resolved per-image cutoffs
    /// live on the pseudo-masks themselves.
    pub threshold: f64,
    /// (image, query) pairs the iteration saw.
    pub pairs: usize,
    /// Positive patches across all pseudo-masks.
    pub positive_patches: usize,
    /// Mean patch loss per step, recorded before that step's update.
    pub losses: Vec<f64>,
    /// Mean IoU of pseudo-masks against ground truth, where truth exists.
    pub pseudo_iou: Option<f64>,
    /// Mean IoU of the post-training maps, median-thresholded, against
    /// ground truth. Filled by [`run_refinement`] after the iteration.
    pub map_iou: Option<f64>,
}

/// One pass of the loop: freeze the model and cut pseudo-masks from every
/// (image, query) map at the iteration's threshold, then take `steps`
/// full-batch gradient steps on the patch loss with those masks held
/// fixed. Aborts without training when every mask comes out empty.
pub fn refine_iteration<S: Scalar>(
    params: &mut ModelParams<S>,
    corpus: &[CaptionedImage],
    queries: &[QueryEmbedding<S>],
    schedule: &ThresholdSchedule,
    iteration: usize,
    steps: usize,
    learning_rate: f64,
    settings: &RefineSettings,
) -> Result<IterationRecord> {
    if corpus.is_empty() {
        return Err(Error::Data("refinement corpus is empty".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("refinement needs at least one query".into()));
    }
    let cfg = params.config.clone();
    settings.window.validate_for(cfg.grid_side())?;
    settings.scope.validate(params)?;

    // Frozen phase: maps and masks for every pair, read-only over params,
    // parallel across images.
    let frozen: Vec<Vec<PseudoMask>> = corpus
        .par_iter()
        .map(|item| {
            let enc = encode_image(params, &item.image)?;
            queries
                .iter()
                .map(|q| {
                    let map = smooth_attention_map(params, &enc.patch_tokens, q, settings.window)?;
                    Ok(extract_pseudo_labels(&map, schedule, iteration, &item.id))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let pairs = corpus.len() * queries.len();
    let positive_patches: usize = frozen
        .iter()
        .flatten()
        .map(|m| m.mask.count_true())
        .sum();
    if positive_patches == 0 {
        return Err(Error::Data(format!(
            "threshold too high: all {pairs} pseudo-masks are empty at iteration {iteration} \
             (schedule value {})",
            schedule.value_at(iteration)
        )));
    }

    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for (item, masks) in corpus.iter().zip(&frozen) {
        let Some(truths) = &item.gt_masks else { continue };
        for pm in masks {
            if let Some(truth) = truths.get(&pm.query) {
                iou_sum += mask_iou(&pm.mask, truth)?;
                iou_n += 1;
            }
        }
    }
    let pseudo_iou = (iou_n > 0).then(|| iou_sum / iou_n as f64);

    // Training phase: single-writer, full batch, one tape per pair. Each
    // backward is seeded with 1/pairs, so the folded gradient is exactly
    // the gradient of the mean pair loss.
    let mut losses = Vec::with_capacity(steps);
    if steps > 0 {
        let patches: Vec<Tensor<S>> = corpus
            .iter()
            .map(|item| patch_matrix(&item.image, &cfg))
            .collect::<Result<_>>()?;
        let text_cols: Vec<Tensor<S>> = queries
            .iter()
            .map(|q| Tensor::matrix(cfg.proj_dim, 1, q.embedding.data().to_vec()))
            .collect::<Result<_>>()?;
        let prefixes: Vec<&str> = settings
            .scope
            .trainable_prefixes
            .iter()
            .map(String::as_str)
            .collect();
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        let mut opt = AdamState::new(&sizes);
        let seed = [fp::<S>(1.0 / pairs as f64)];

        for _ in 0..steps {
            let mut grads: Vec<Vec<S>> = params
                .iter()
                .map(|(_, t)| vec![S::zero(); t.numel()])
                .collect();
            let mut total = 0.0;
            for (px, masks) in patches.iter().zip(&frozen) {
                for (tc, pm) in text_cols.iter().zip(masks) {
                    let mut tape = Tape::new();
                    let pv = ParamVars::register_mixed(&mut tape, params, &prefixes)?;
                    let px = tape.leaf_tensor(px)?;
                    let tokens = vision_tokens_on_tape(&mut tape, &cfg, &pv, px)?;
                    let tc = tape.leaf_tensor(tc)?;
                    let loss_var =
                        patch_supervision_loss_on_tape(&mut tape, &pv, tokens, tc, pm.mask.cells())?;
                    let loss = tape.value(loss_var)[0];
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!(
                            "patch loss diverged on `{}` / `{}`",
                            pm.image_id, pm.query
                        )));
                    }
                    total += loss.to_f64().expect("loss fits in f64");
                    tape.backward_seeded(loss_var, &seed)?;
                    for (pos, var) in pv.registered() {
                        if let Some(g) = tape.grad(var) {
                            for (d, &s) in grads[pos].iter_mut().zip(g) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            losses.push(total / pairs as f64);
            opt.apply(params.tensors_mut(), &grads, fp(learning_rate))?;
        }
    }

    Ok(IterationRecord {
        iteration,
        threshold: schedule.value_at(iteration),
        pairs,
        positive_patches,
        losses,
        pseudo_iou,
        map_iou: None,
    })
}

/// Mean IoU of the current model's maps, thresholded at each map's median
/// (strictly greater), against ground truth — the fixed reference metric
/// the moving pseudo-label threshold is judged by. None without any truth.
fn median_map_iou<S: Scalar>(
    params: &ModelParams<S>,
    corpus: &[CaptionedImage],
    queries: &[QueryEmbedding<S>],
    window: WindowSpec,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for item in corpus {
        let Some(truths) = &item.gt_masks else { continue };
        if !queries.iter().any(|q| truths.contains_key(&q.query)) {
            continue;
        }
        let enc = encode_image(params, &item.image)?;
        for q in queries {
            let Some(truth) = truths.get(&q.query) else { continue };
            let map = smooth_attention_map(params, &enc.patch_tokens, q, window)?;
            let cutoff = map_statistics(&map).percentile(50.0);
            let cells = map.values().iter().map(|&v| v > cutoff).collect();
            let mask = Mask::from_cells(map.side(), cells).expect("map side already validated");
            sum += mask_iou(&mask, truth)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Full refinement run: metrics for every iteration, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementReport {
    pub schedule: ThresholdSchedule,
    pub window: WindowSpec,
    pub iterations: Vec<IterationRecord>,
}

impl RefinementReport {
    /// Iterations must be indexed contiguously from 0.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.iterations.iter().enumerate() {
            if rec.iteration != i {
                return Err(Error::Data(format!(
                    "refinement report row {i} is labeled iteration {}",
                    rec.iteration
                )));
            }
        }
        Ok(())
    }

    /// Pretty JSON with the full per-step loss curves.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat per-iteration metrics; the loss curve collapses to its
    /// endpoints, absent metrics to empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,threshold,pairs,positive_patches,steps,first_loss,final_loss,pseudo_iou,map_iou\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for rec in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                rec.iteration,
                rec.threshold,
                rec.pairs,
                rec.positive_patches,
                rec.losses.len(),
                opt(rec.losses.first().copied()),
                opt(rec.losses.last().copied()),
                opt(rec.pseudo_iou),
                opt(rec.map_iou),
            ));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs `n_iters` refinement iterations in sequence, embedding the queries
/// once up front (the text tower is frozen by scope validation). After
/// each iteration the median-threshold map IoU is measured on the updated
/// model, where ground truth exists.
pub fn run_refinement<S: Scalar>(
    params: &mut ModelParams<S>,
    vocab: &Vocab,
    corpus: &[CaptionedImage],
    queries: &[String],
    schedule: &ThresholdSchedule,
    n_iters: usize,
    steps_per_iter: usize,
    learning_rate: f64,
    settings: &RefineSettings,
) -> Result<RefinementReport> {
    if n_iters == 0 {
        return Err(Error::Config("refinement needs at least one iteration".into()));
    }
    require_grid_alignment(corpus, &params.config)?;
    let embedded: Vec<QueryEmbedding<S>> = queries
        .iter()
        .map(|q| embed_query(params, vocab, q))
        .collect::<Result<_>>()?;

    let mut iterations = Vec::with_capacity(n_iters);
    for i in 0..n_iters {
        let mut record = refine_iteration(
            params,
            corpus,
            &embedded,
            schedule,
            i,
            steps_per_iter,
            learning_rate,
            settings,
        )?;
        record.map_iou = median_map_iou(params, corpus, &embedded, settings.window)?;
        iterations.push(record);
    }
    Ok(RefinementReport {
        schedule: *schedule,
        window: settings.window,
        iterations,
    })
}
