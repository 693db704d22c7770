//! Model parameters as an ordered, named tensor table.
//!
//! A single schema — derived from [`ModelConfig`] — fixes the name, shape,
//! and order of every parameter tensor. Initialization, the optimizer,
//! checkpoints, and the flattened view used by gradient checks all walk
//! that same schema, so they can never disagree about layout.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::scalar::{fp, Scalar};
use crate::tensor::Tensor;

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Xavier-uniform: U(−a, a) with a = √(6 / (rows + cols)).
    Xavier,
    /// U(−a, a) with the given half-width.
    Uniform(f64),
    /// All ones (layer-norm gains).
    Ones,
    /// All zeros (biases, layer-norm shifts).
    Zeros,
    /// A fixed constant (loss temperature and bias).
    Const(f64),
}

/// Name, shape, and init rule of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: InitKind,
}

fn transformer_block_specs(specs: &mut Vec<ParamSpec>, prefix: &str, e: usize, m: usize) {
    let push = |specs: &mut Vec<ParamSpec>, name: String, rows, cols, init| {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        })
    };
    push(specs, format!("{prefix}.ln1.gamma"), 1, e, InitKind::Ones);
    push(specs, format!("{prefix}.ln1.beta"), 1, e, InitKind::Zeros);
    for proj in ["q", "k", "v", "o"] {
        push(specs, format!("{prefix}.attn.w{proj}"), e, e, InitKind::Xavier);
        push(specs, format!("{prefix}.attn.b{proj}"), 1, e, InitKind::Zeros);
    }
    push(specs, format!("{prefix}.ln2.gamma"), 1, e, InitKind::Ones);
    push(specs, format!("{prefix}.ln2.beta"), 1, e, InitKind::Zeros);
    push(specs, format!("{prefix}.mlp.w1"), e, m, InitKind::Xavier);
    push(specs, format!("{prefix}.mlp.b1"), 1, m, InitKind::Zeros);
    push(specs, format!("{prefix}.mlp.w2"), m, e, InitKind::Xavier);
    push(specs, format!("{prefix}.mlp.b2"), 1, e, InitKind::Zeros);
}

/// The full parameter schema for a config, in canonical order.
pub fn schema(config: &ModelConfig) -> Vec<ParamSpec> {
    let e = config.embed_dim;
    let m = config.mlp_dim();
    let mut specs = Vec::new();
    let push = |specs: &mut Vec<ParamSpec>, name: &str, rows, cols, init| {
        specs.push(ParamSpec {
            name: name.to_owned(),
            rows,
            cols,
            init,
        })
    };

    push(
        &mut specs,
        "vision.patch_embed.w",
        config.patch_dim(),
        e,
        InitKind::Xavier,
    );
    push(&mut specs, "vision.patch_embed.b", 1, e, InitKind::Zeros);
    push(
        &mut specs,
        "vision.pos_embed",
        config.patch_count(),
        e,
        InitKind::Uniform(0.02),
    );
    for l in 0..config.depth_vision {
        transformer_block_specs(&mut specs, &format!("vision.l{l}"), e, m);
    }
    push(&mut specs, "vision.ln_f.gamma", 1, e, InitKind::Ones);
    push(&mut specs, "vision.ln_f.beta", 1, e, InitKind::Zeros);

    let query_scale = 1.0 / (e as f64).sqrt();
    push(&mut specs, "pool.query", 1, e, InitKind::Uniform(query_scale));
    for proj in ["k", "v", "o"] {
        push(&mut specs, &format!("pool.w{proj}"), e, e, InitKind::Xavier);
        push(&mut specs, &format!("pool.b{proj}"), 1, e, InitKind::Zeros);
    }
    push(&mut specs, "img_proj.w", e, config.proj_dim, InitKind::Xavier);

    push(
        &mut specs,
        "text.tok_embed",
        config.vocab_size,
        e,
        InitKind::Xavier,
    );
    push(
        &mut specs,
        "text.pos_embed",
        config.max_text_len,
        e,
        InitKind::Uniform(0.02),
    );
    for l in 0..config.depth_text {
        transformer_block_specs(&mut specs, &format!("text.l{l}"), e, m);
    }
    push(&mut specs, "text.ln_f.gamma", 1, e, InitKind::Ones);
    push(&mut specs, "text.ln_f.beta", 1, e, InitKind::Zeros);
    push(&mut specs, "txt_proj.w", e, config.proj_dim, InitKind::Xavier);

    push(&mut specs, "loss.log_t", 1, 1, InitKind::Const(10.0f64.ln()));
    push(&mut specs, "loss.b", 1, 1, InitKind::Const(-10.0));
    specs
}

/// All learnable state of the model, keyed by schema name.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: Arc<HashMap<String, usize>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Initializes parameters from the config's seed. Random draws happen
    /// in f64 in schema order and are then narrowed to `S`, so the f32 and
    /// f64 instantiations of one config hold identical values up to
    /// rounding.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let config = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = schema(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n = spec.rows * spec.cols;
            let data: Vec<S> = match spec.init {
                InitKind::Xavier => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    (0..n)
                        .map(|_| fp(rng.gen_range(-a..a)))
                        .collect()
                }
                InitKind::Uniform(a) => (0..n)
                    .map(|_| fp(rng.gen_range(-a..a)))
                    .collect(),
                InitKind::Ones => vec![S::one(); n],
                InitKind::Zeros => vec![S::zero(); n],
                InitKind::Const(c) => vec![fp(c); n],
            };
            names.push(spec.name.clone());
            tensors.push(Tensor::matrix(spec.rows, spec.cols, data)?);
        }
        let index = Arc::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        );
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    /// Builds params from a list of named tensors (checkpoint loading).
    /// The tensors must cover the schema exactly; shapes are checked.
    pub fn from_named(config: ModelConfig, mut table: HashMap<String, Tensor<S>>) -> Result<Self> {
        let config = config.validate()?;
        let specs = schema(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let t = table.remove(&spec.name).ok_or_else(|| {
                Error::Format(format!("missing parameter tensor `{}`", spec.name))
            })?;
            if t.shape() != [spec.rows, spec.cols] {
                return Err(Error::shape(
                    "from_named",
                    format!(
                        "`{}` has shape {:?}, expected [{}, {}]",
                        spec.name,
                        t.shape(),
                        spec.rows,
                        spec.cols
                    ),
                ));
            }
            names.push(spec.name.clone());
            tensors.push(t);
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!(
                "unexpected parameter tensor `{extra}`"
            )));
        }
        let index = Arc::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        );
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Tensor by schema name; panics on a name outside the schema, which is
    /// a programming error rather than an input error.
    pub fn get(&self, name: &str) -> &Tensor<S> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.tensors[i]
    }

    /// Mutable tensor access by index, in schema order (optimizer updates).
    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Position of a name in the schema order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Iterates `(name, tensor)` in schema order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// All values concatenated in schema order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds params from a flat value vector laid out as by
    /// [`ModelParams::flatten`].
    pub fn from_flat(config: ModelConfig, flat: &[S]) -> Result<Self> {
        let config = config.validate()?;
        let specs = schema(&config);
        let total: usize = specs.iter().map(|s| s.rows * s.cols).sum();
        if flat.len() != total {
            return Err(Error::shape(
                "from_flat",
                format!("got {} values, schema needs {}", flat.len(), total),
            ));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in &specs {
            let n = spec.rows * spec.cols;
            tensors.push(Tensor::matrix(
                spec.rows,
                spec.cols,
                flat[offset..offset + n].to_vec(),
            )?);
            names.push(spec.name.clone());
            offset += n;
        }
        let index = Arc::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        );
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    /// True when every value in every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Converts every tensor to another scalar type (f32 ↔ f64).
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Current loss temperature t = exp(log t).
    pub fn temperature(&self) -> S {
        self.get("loss.log_t").item().exp()
    }

    /// Current loss bias b.
    pub fn loss_bias(&self) -> S {
        self.get("loss.b").item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth_vision: 2,
            depth_text: 1,
            heads: 2,
            proj_dim: 8,
            vocab_size: 24,
            max_text_len: 8,
            seed: 3,
        }
    }

    #[test]
    fn init_fills_every_schema_slot_finite() {
        let p = ModelParams::<f32>::init(tiny_config()).unwrap();
        assert_eq!(p.len(), schema(&p.config).len());
        assert!(p.all_finite());
        assert_eq!(p.get("pool.query").shape(), [1, 16]);
        assert_eq!(p.get("vision.l1.mlp.w1").shape(), [16, 64]);
        // Temperature starts at 10, bias at −10.
        assert!((p.temperature() - 10.0).abs() < 1e-5);
        assert_eq!(p.loss_bias(), -10.0);
        // Layer-norm gains are exactly one.
        assert!(p.get("text.ln_f.gamma").data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn f32_init_is_the_narrowing_of_f64_init() {
        let p32 = ModelParams::<f32>::init(tiny_config()).unwrap();
        let p64 = ModelParams::<f64>::init(tiny_config()).unwrap();
        for ((_, a), (_, b)) in p32.iter().zip(p64.iter()) {
            for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x, y as f32);
            }
        }
    }

    #[test]
    fn flatten_round_trips() {
        let p = ModelParams::<f32>::init(tiny_config()).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_scalars());
        let q = ModelParams::from_flat(tiny_config(), &flat).unwrap();
        for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn different_seeds_give_different_weights() {
        let a = ModelParams::<f32>::init(tiny_config()).unwrap();
        let b = ModelParams::<f32>::init(ModelConfig {
            seed: 4,
            ..tiny_config()
        })
        .unwrap();
        assert_ne!(
            a.get("vision.patch_embed.w").data(),
            b.get("vision.patch_embed.w").data()
        );
    }
}
