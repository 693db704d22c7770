//! Binary in-domain/out-of-domain image classifier and corpus filtering.
//!
//! The classifier is the pipeline's own vision tower at a small
//! configuration with a logistic head on the pooled embedding, trained
//! by the same tape/Adam machinery as the main model. The head starts
//! at zero, which makes label flipping an exact mirror: the flipped run
//! learns the negated head over an identical tower.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::{
    attention_pool_on_tape, patch_matrix, vision_tokens_on_tape, ParamVars,
};
use crate::model::optim::AdamState;
use crate::model::params::{schema, ModelParams};
use crate::scalar::{fp, Scalar};
use crate::seeding::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trained domain classifier: tower parameters plus the logistic head.
#[derive(Debug, Clone)]
pub struct DomainFilter<S: Scalar> {
    config: ModelConfig,
    params: ModelParams<S>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
}

/// Tower shape used by the filter: narrow and one block deep — domain
/// statistics are coarse, and training must stay in the seconds range.
fn filter_config(image_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        image_size,
        patch_size: 8,
        embed_dim: 16,
        depth_vision: 1,
        depth_text: 1,
        heads: 2,
        proj_dim: 8,
        vocab_size: 8,
        max_text_len: 2,
        seed,
    }
}

const TOWER_PREFIXES: [&str; 3] = ["vision.", "pool.", "img_proj."];
const EPOCHS: usize = 40;
const BATCH: usize = 8;
const LEARNING_RATE: f64 = 1e-2;

/// Trains the classifier on `(image, in_domain)` pairs. Both classes
/// must be present; every image must share one size.
pub fn train_domain_filter<S: Scalar>(
    labeled: &[(Image, bool)],
    seed: u64,
) -> Result<DomainFilter<S>> {
    if labeled.is_empty() {
        return Err(Error::Data("no labeled images".into()));
    }
    let positives = labeled.iter().filter(|(_, f)| *f).count();
    if positives == 0 || positives == labeled.len() {
        return Err(Error::Data(
            "domain filter training needs both in-domain and out-of-domain examples".into(),
        ));
    }
    let size = labeled[0].0.width;
    for (img, _) in labeled {
        if img.width != size || img.height != size {
            return Err(Error::Data(format!(
                "all training images must be {size}×{size}, found {}×{}",
                img.width, img.height
            )));
        }
    }

    let config = filter_config(size, derive_seed(seed, &[0xF117E6]))
        .validate()?;
    let mut params = ModelParams::<S>::init(config.clone())?;
    let mut head_w = Tensor::zeros(vec![config.proj_dim, 1]);
    let mut head_b = Tensor::zeros(vec![1, 1]);

    let mut sizes: Vec<usize> = schema(&config).iter().map(|s| s.rows * s.cols).collect();
    sizes.push(config.proj_dim); // head weights
    sizes.push(1); // head bias
    let mut opt = AdamState::<S>::new(&sizes);
    let lr: S = fp(LEARNING_RATE);

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF117E7]));
    for _ in 0..EPOCHS {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let batch: Vec<&(Image, bool)> = chunk.iter().map(|&i| &labeled[i]).collect();
            filter_step(&config, &mut params, &mut head_w, &mut head_b, &mut opt, &batch, lr)?;
        }
    }

    Ok(DomainFilter { config, params, head_w, head_b })
}

/// One Adam step of the per-item logistic loss over a batch.
fn filter_step<S: Scalar>(
    config: &ModelConfig,
    params: &mut ModelParams<S>,
    head_w: &mut Tensor<S>,
    head_b: &mut Tensor<S>,
    opt: &mut AdamState<S>,
    batch: &[&(Image, bool)],
    lr: S,
) -> Result<()> {
    let mut tape = Tape::new();
    let pv = ParamVars::register_filtered(&mut tape, params, true, &TOWER_PREFIXES)?;
    let wv = tape.param_tensor(head_w)?;
    let bv = tape.param_tensor(head_b)?;

    let logits = batch_logits(&mut tape, config, &pv, wv, bv, batch)?;
    let signs: Vec<S> = batch
        .iter()
        .map(|(_, flag)| if *flag { S::one() } else { -S::one() })
        .collect();
    let z = tape.leaf(&signs, batch.len(), 1)?;
    let margins = tape.mul(z, logits)?;
    let neg = tape.scale(margins, -S::one());
    let per_item = tape.softplus(neg);
    let loss = tape.mean_all(per_item);

    tape.backward(loss)?;

    let n_tensors = params.tensors_mut().len();
    let mut grads: Vec<Vec<S>> = Vec::with_capacity(n_tensors + 2);
    for t in params.tensors_mut().iter() {
        grads.push(vec![S::zero(); t.data().len()]);
    }
    for (pos, var) in pv.registered() {
        if let Some(g) = tape.grad(var) {
            grads[pos].copy_from_slice(g);
        }
    }
    grads.push(tape.grad(wv).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); head_w.data().len()]));
    grads.push(tape.grad(bv).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); 1]));

    let mut tensors: Vec<&mut Tensor<S>> = Vec::with_capacity(n_tensors + 2);
    tensors.extend(params.tensors_mut().iter_mut());
    tensors.push(head_w);
    tensors.push(head_b);
    opt.apply_to_refs(&mut tensors, &grads, lr)
}

/// Embeds every batch image and produces the B×1 logit column.
fn batch_logits<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    wv: Var,
    bv: Var,
    batch: &[&(Image, bool)],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for (img, _) in batch {
        let patches = patch_matrix::<S>(img, config)?;
        let patches = tape.leaf_tensor(&patches)?;
        // Unnormalized pooled projection: the feature NORM carries the
        // domain signal (token spread), so skip the unit normalization
        // the retrieval embedding would apply.
        let tokens = vision_tokens_on_tape(tape, config, pv, patches)?;
        let (pooled, _) = attention_pool_on_tape(tape, config, pv, tokens)?;
        rows.push(tape.matmul(pooled, pv.var("img_proj.w"))?);
    }
    let n = rows.len();
    let mut stacked: Option<Var> = None;
    for (i, &row) in rows.iter().enumerate() {
        let mut sel = vec![S::zero(); n];
        sel[i] = S::one();
        let sel = tape.leaf(&sel, n, 1)?;
        let term = tape.matmul(sel, row)?;
        stacked = Some(match stacked {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let emb = stacked.expect("batch is non-empty");
    let raw = tape.matmul(emb, wv)?;
    Ok(tape.offset_by_var(raw, bv)?)
}

impl<S: Scalar> DomainFilter<S> {
    /// p(in-domain) for one image, in [0, 1].
    pub fn predict(&self, image: &Image) -> Result<S> {
        let mut tape = Tape::new();
        let pv = ParamVars::register_filtered(&mut tape, &self.params, false, &TOWER_PREFIXES)?;
        let wv = tape.leaf_tensor(&self.head_w)?;
        let bv = tape.leaf_tensor(&self.head_b)?;
        let item = (image.clone(), true);
        let batch = [&item];
        let logits = batch_logits(&mut tape, &self.config, &pv, wv, bv, &batch)?;
        let p = tape.sigmoid(logits);
        Ok(tape.value(p)[0])
    }

    /// Fraction of `labeled` classified correctly at the 0.5 cut.
    pub fn accuracy(&self, labeled: &[(Image, bool)]) -> Result<f64> {
        if labeled.is_empty() {
            return Err(Error::Data("no labeled images to score".into()));
        }
        let mut correct = 0usize;
        for (img, flag) in labeled {
            let p = self.predict(img)?;
            if (p >= fp(0.5)) == *flag {
                correct += 1;
            }
        }
        Ok(correct as f64 / labeled.len() as f64)
    }
}

/// Outcome of filtering a corpus through the classifier.
#[derive(Debug, Clone)]
pub struct FilterReport<S> {
    /// Indices of kept items, in corpus order.
    pub kept: Vec<usize>,
    /// p(in-domain) per corpus item.
    pub probs: Vec<S>,
    /// Of the kept items, the fraction truly in-domain — only when truth
    /// flags were supplied and something was kept.
    pub precision: Option<f64>,
}

/// Keeps images with p ≥ threshold. When `truth` flags are given, the
/// report includes the kept set's precision.
pub fn filter_corpus<S: Scalar>(
    filter: &DomainFilter<S>,
    images: &[Image],
    threshold: f64,
    truth: Option<&[bool]>,
) -> Result<FilterReport<S>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "filter threshold must be in [0, 1], got {threshold}"
        )));
    }
    if let Some(t) = truth {
        if t.len() != images.len() {
            return Err(Error::Data(format!(
                "{} truth flags for {} images",
                t.len(),
                images.len()
            )));
        }
    }
    let cut: S = fp(threshold);
    let mut kept = Vec::new();
    let mut probs = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = filter.predict(img)?;
        if p >= cut {
            kept.push(i);
        }
        probs.push(p);
    }
    let precision = truth.and_then(|t| {
        if kept.is_empty() {
            None
        } else {
            let hits = kept.iter().filter(|&&i| t[i]).count();
            Some(hits as f64 / kept.len() as f64)
        }
    });
    Ok(FilterReport { kept, probs, precision })
}
