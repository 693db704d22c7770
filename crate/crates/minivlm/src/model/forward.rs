//! Forward passes of the dual encoder.
//!
//! Every pass is expressed once, as tape-building code, and used two ways:
//! training registers parameters as trainable tape variables and runs
//! backward, while the eager wrappers ([`encode_image`], [`encode_text`],
//! [`attention_pool`]) register them as constants on a throwaway tape and
//! return plain tensors. One code path means inference results cannot
//! drift from what training optimized.

use std::collections::HashMap;
use std::sync::Arc;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::scalar::{fp, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layer-norm stabilizer used by both towers.
pub const LN_EPS: f64 = 1e-5;

/// Tape handles for model parameters, keyed by schema name.
///
/// Registration copies parameter values onto a tape. A filtered
/// registration skips tensors a pass will not touch (a text tape has no
/// use for vision weights), and a substituting registration swaps one
/// tensor for an externally provided variable so finite-difference checks
/// can perturb exactly that tensor.
pub struct ParamVars {
    vars: Vec<Option<Var>>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamVars {
    /// Registers every parameter tensor. `trainable` decides whether
    /// backward fills their gradient slots.
    pub fn register<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        trainable: bool,
    ) -> Result<Self> {
        Self::register_inner(tape, params, trainable, None, None)
    }

    /// Registers only tensors whose name starts with one of `prefixes`.
    pub fn register_filtered<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        trainable: bool,
        prefixes: &[&str],
    ) -> Result<Self> {
        Self::register_inner(tape, params, trainable, Some(prefixes), None)
    }

    /// Registers every tensor, but only those whose name starts with one
    /// of `trainable_prefixes` as trainable; the rest become constants on
    /// the same tape. Fine-tuning passes use this to train a slice of the
    /// model inside a full forward graph.
    pub fn register_mixed<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        trainable_prefixes: &[&str],
    ) -> Result<Self> {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (i, (name, tensor)) in params.iter().enumerate() {
            index.insert(name.to_owned(), i);
            let var = if trainable_prefixes.iter().any(|p| name.starts_with(p)) {
                tape.param_tensor(tensor)?
            } else {
                tape.leaf_tensor(tensor)?
            };
            vars.push(Some(var));
        }
        Ok(Self {
            vars,
            index: Arc::new(index),
        })
    }

    /// Registers every tensor as a constant except `name`, which is bound
    /// to `var` (already on the tape, typically the variable under a
    /// gradient check).
    pub fn register_substituting<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        name: &str,
        var: Var,
    ) -> Result<Self> {
        if params.position(name).is_none() {
            return Err(Error::Config(format!("unknown parameter `{name}`")));
        }
        Self::register_inner(tape, params, false, None, Some((name, var)))
    }

    fn register_inner<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        trainable: bool,
        prefixes: Option<&[&str]>,
        substitute: Option<(&str, Var)>,
    ) -> Result<Self> {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (i, (name, tensor)) in params.iter().enumerate() {
            index.insert(name.to_owned(), i);
            if let Some((sub_name, var)) = substitute {
                if name == sub_name {
                    vars.push(Some(var));
                    continue;
                }
            }
            if let Some(prefixes) = prefixes {
                if !prefixes.iter().any(|p| name.starts_with(p)) {
                    vars.push(None);
                    continue;
                }
            }
            let var = if trainable {
                tape.param_tensor(tensor)?
            } else {
                tape.leaf_tensor(tensor)?
            };
            vars.push(Some(var));
        }
        Ok(Self {
            vars,
            index: Arc::new(index),
        })
    }

    /// Variable for a schema name. Panics if the name is unknown or was
    /// filtered out at registration — both are programming errors.
    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[i].unwrap_or_else(|| panic!("parameter `{name}` was not registered"))
    }

    /// Iterates `(schema position, var)` over registered tensors.
    pub fn registered(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (i, var)))
    }
}

/// Flattens an image into the N×(3·patch_size²) patch matrix the vision
/// tower consumes: patches in row-major grid order, each patch's pixels in
/// row-major order with RGB interleaved, values scaled to [0, 1].
pub fn patch_matrix<S: Scalar>(image: &Image, config: &ModelConfig) -> Result<Tensor<S>> {
    if image.width != config.image_size || image.height != config.image_size {
        return Err(Error::shape(
            "patch_matrix",
            format!(
                "image is {}×{}, config expects {}×{}",
                image.width, image.height, config.image_size, config.image_size
            ),
        ));
    }
    let p = config.grid_side();
    let ps = config.patch_size;
    let scale = fp::<S>(1.0 / 255.0);
    let mut data = Vec::with_capacity(config.patch_count() * config.patch_dim());
    for pr in 0..p {
        for pc in 0..p {
            for dy in 0..ps {
                for dx in 0..ps {
                    let [r, g, b] = image.get(pc * ps + dx, pr * ps + dy);
                    data.push(fp::<S>(r as f64) * scale);
                    data.push(fp::<S>(g as f64) * scale);
                    data.push(fp::<S>(b as f64) * scale);
                }
            }
        }
    }
    Tensor::matrix(config.patch_count(), config.patch_dim(), data)
}

/// x·W + b (row-broadcast bias).
pub(crate) fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product attention over already-projected Q, K, V
/// (each T×embed_dim). Returns the concatenated per-head context (before
/// the output projection) and the head-averaged attention weights.
fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (_, e) = tape.shape(q);
    let dh = e / heads;
    let inv_sqrt_dh = fp::<S>(1.0 / (dh as f64).sqrt());
    let mut ctx_parts = Vec::with_capacity(heads);
    let mut weight_sum: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt_dh);
        let attn = tape.softmax_rows(scores);
        weight_sum = Some(match weight_sum {
            Some(acc) => tape.add(acc, attn)?,
            None => attn,
        });
        ctx_parts.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_parts)?;
    let avg = tape.scale(
        weight_sum.expect("heads >= 1"),
        fp(1.0 / heads as f64),
    );
    Ok((ctx, avg))
}

/// One pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
fn transformer_block<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let eps = fp::<S>(LN_EPS);
    let h = tape.layer_norm(
        x,
        pv.var(&format!("{prefix}.ln1.gamma")),
        pv.var(&format!("{prefix}.ln1.beta")),
        eps,
    )?;
    let q = linear(
        tape,
        h,
        pv.var(&format!("{prefix}.attn.wq")),
        pv.var(&format!("{prefix}.attn.bq")),
    )?;
    let k = linear(
        tape,
        h,
        pv.var(&format!("{prefix}.attn.wk")),
        pv.var(&format!("{prefix}.attn.bk")),
    )?;
    let v = linear(
        tape,
        h,
        pv.var(&format!("{prefix}.attn.wv")),
        pv.var(&format!("{prefix}.attn.bv")),
    )?;
    let (ctx, _) = attend(tape, config.heads, q, k, v)?;
    let attn_out = linear(
        tape,
        ctx,
        pv.var(&format!("{prefix}.attn.wo")),
        pv.var(&format!("{prefix}.attn.bo")),
    )?;
    let x = tape.add(x, attn_out)?;

    let h = tape.layer_norm(
        x,
        pv.var(&format!("{prefix}.ln2.gamma")),
        pv.var(&format!("{prefix}.ln2.beta")),
        eps,
    )?;
    let m = linear(
        tape,
        h,
        pv.var(&format!("{prefix}.mlp.w1")),
        pv.var(&format!("{prefix}.mlp.b1")),
    )?;
    let m = tape.gelu(m);
    let m = linear(
        tape,
        m,
        pv.var(&format!("{prefix}.mlp.w2")),
        pv.var(&format!("{prefix}.mlp.b2")),
    )?;
    tape.add(x, m)
}

/// Vision tower: patch embedding, positional embeddings, transformer
/// blocks, final layer norm. Returns the N×embed_dim patch tokens.
pub fn vision_tokens_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    patches: Var,
) -> Result<Var> {
    let mut x = linear(
        tape,
        patches,
        pv.var("vision.patch_embed.w"),
        pv.var("vision.patch_embed.b"),
    )?;
    x = tape.add(x, pv.var("vision.pos_embed"))?;
    for l in 0..config.depth_vision {
        x = transformer_block(tape, config, pv, &format!("vision.l{l}"), x)?;
    }
    tape.layer_norm(
        x,
        pv.var("vision.ln_f.gamma"),
        pv.var("vision.ln_f.beta"),
        fp::<S>(LN_EPS),
    )
}

/// Attention-pooling head: a single learned query attends over the patch
/// tokens. Returns (pooled 1×embed_dim, head-averaged weights 1×N).
pub fn attention_pool_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    tokens: Var,
) -> Result<(Var, Var)> {
    let k = linear(tape, tokens, pv.var("pool.wk"), pv.var("pool.bk"))?;
    let v = linear(tape, tokens, pv.var("pool.wv"), pv.var("pool.bv"))?;
    let (ctx, weights) = attend(tape, config.heads, pv.var("pool.query"), k, v)?;
    let pooled = linear(tape, ctx, pv.var("pool.wo"), pv.var("pool.bo"))?;
    Ok((pooled, weights))
}

/// Tape handles produced by an image forward pass.
pub struct ImageForward {
    /// N×embed_dim final-layer patch tokens.
    pub patch_tokens: Var,
    /// 1×proj_dim unit-norm image embedding.
    pub embedding: Var,
    /// 1×N head-averaged pooling weights.
    pub pool_weights: Var,
}

/// Full image pass: tower, pooling head, projection, normalization.
pub fn encode_image_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    patches: Var,
) -> Result<ImageForward> {
    let patch_tokens = vision_tokens_on_tape(tape, config, pv, patches)?;
    let (pooled, pool_weights) = attention_pool_on_tape(tape, config, pv, patch_tokens)?;
    let projected = tape.matmul(pooled, pv.var("img_proj.w"))?;
    let embedding = tape.l2_normalize_rows(projected);
    Ok(ImageForward {
        patch_tokens,
        embedding,
        pool_weights,
    })
}

/// Full text pass: token + positional embeddings, transformer blocks,
/// final layer norm, pooling at the last (EOS) position, projection,
/// normalization. Returns the 1×proj_dim unit-norm text embedding.
///
/// `ids` longer than `max_text_len` are truncated with a warning on
/// stderr; an empty id sequence is an error (an empty caption still
/// encodes to a lone BOS token).
pub fn encode_text_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    pv: &ParamVars,
    ids: &[u32],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    let ids = if ids.len() > config.max_text_len {
        eprintln!(
            "warning: caption of {} tokens truncated to max_text_len {}",
            ids.len(),
            config.max_text_len
        );
        &ids[..config.max_text_len]
    } else {
        ids
    };
    let t = ids.len();
    // Ids outside the vocabulary fall back to UNK rather than failing.
    let unk = crate::model::tokenizer::UNK_ID;
    let ids: Vec<u32> = ids
        .iter()
        .map(|&i| if (i as usize) < config.vocab_size { i } else { unk })
        .collect();
    let tok = tape.embed_lookup(pv.var("text.tok_embed"), &ids)?;
    let pos = tape.slice_rows(pv.var("text.pos_embed"), 0, t)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..config.depth_text {
        x = transformer_block(tape, config, pv, &format!("text.l{l}"), x)?;
    }
    let x = tape.layer_norm(
        x,
        pv.var("text.ln_f.gamma"),
        pv.var("text.ln_f.beta"),
        fp::<S>(LN_EPS),
    )?;
    let last = tape.slice_rows(x, t - 1, 1)?;
    let projected = tape.matmul(last, pv.var("txt_proj.w"))?;
    Ok(tape.l2_normalize_rows(projected))
}

/// Result of the eager [`encode_image`].
#[derive(Debug, Clone)]
pub struct EncodeOutput<S: Scalar> {
    /// N×embed_dim final-layer patch tokens.
    pub patch_tokens: Tensor<S>,
    /// 1×proj_dim unit-norm image embedding.
    pub embedding: Tensor<S>,
    /// 1×N head-averaged pooling weights.
    pub pool_weights: Tensor<S>,
}

/// Encodes one image without keeping gradient state.
pub fn encode_image<S: Scalar>(
    params: &ModelParams<S>,
    image: &Image,
) -> Result<EncodeOutput<S>> {
    let patches = patch_matrix::<S>(image, &params.config)?;
    let mut tape = Tape::new();
    let pv = ParamVars::register_filtered(
        &mut tape,
        params,
        false,
        &["vision.", "pool.", "img_proj."],
    )?;
    let px = tape.leaf_tensor(&patches)?;
    let fwd = encode_image_on_tape(&mut tape, &params.config, &pv, px)?;
    Ok(EncodeOutput {
        patch_tokens: tape.value_tensor(fwd.patch_tokens),
        embedding: tape.value_tensor(fwd.embedding),
        pool_weights: tape.value_tensor(fwd.pool_weights),
    })
}

/// Encodes one token sequence without keeping gradient state.
pub fn encode_text<S: Scalar>(params: &ModelParams<S>, ids: &[u32]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register_filtered(&mut tape, params, false, &["text.", "txt_proj."])?;
    let emb = encode_text_on_tape(&mut tape, &params.config, &pv, ids)?;
    Ok(tape.value_tensor(emb))
}

/// Runs the pooling head alone over given patch tokens. Returns the pooled
/// 1×embed_dim vector (pre-projection) and the 1×N head-averaged weights.
pub fn attention_pool<S: Scalar>(
    params: &ModelParams<S>,
    patch_tokens: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, e) = patch_tokens.dims2();
    if n < 1 || e != params.config.embed_dim {
        return Err(Error::shape(
            "attention_pool",
            format!(
                "patch tokens are {n}×{e}, expected N×{} with N ≥ 1",
                params.config.embed_dim
            ),
        ));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register_filtered(&mut tape, params, false, &["pool."])?;
    let tok = tape.leaf_tensor(patch_tokens)?;
    let (pooled, weights) = attention_pool_on_tape(&mut tape, &params.config, &pv, tok)?;
    Ok((tape.value_tensor(pooled), tape.value_tensor(weights)))
}
