//! Zero-shot evaluation: cross-modal retrieval over a captioned corpus,
//! nearest-neighbor classification through templated class sentences, and
//! side-by-side accuracy tables for several checkpoints on one benchmark.
//! All rankings are cosine rankings over the shared embedding space, with
//! ties broken by ascending id so every metric is reproducible to the bit.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::CaptionedImage;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{encode_image, encode_text, ModelParams, Vocab};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which text rows count as correct for one image row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionGroup {
    pub image_id: String,
    /// Rows of the text matrix holding this image's captions.
    pub caption_rows: Vec<usize>,
}

/// A corpus pushed through both encoders, rows sorted by item id.
#[derive(Debug, Clone)]
pub struct EmbeddedCorpus<S: Scalar> {
    /// One unit row per image, in ascending id order.
    pub image_embs: Tensor<S>,
    /// One unit row per caption, grouped by image in the same order.
    pub text_embs: Tensor<S>,
    /// Parallel to image rows.
    pub groups: Vec<CaptionGroup>,
    /// Parallel to text rows: `"<image id>#<caption index>"`, unique
    /// corpus-wide because image ids are.
    pub caption_ids: Vec<String>,
}

/// Embeds every image and caption. Items are sorted by id first, so any
/// input permutation of the same corpus produces identical matrices.
pub fn embed_corpus<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &Vocab,
    dataset: &[CaptionedImage],
) -> Result<EmbeddedCorpus<S>> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot embed an empty corpus".into()));
    }
    let mut items: Vec<&CaptionedImage> = dataset.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in items.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Data(format!(
                "duplicate item id `{}` in the corpus",
                pair[0].id
            )));
        }
    }
    for item in &items {
        if item.captions.is_empty() {
            return Err(Error::Data(format!("item `{}` has no captions", item.id)));
        }
    }
    let d = params.config.proj_dim;

    let image_rows: Vec<Vec<S>> = items
        .par_iter()
        .map(|item| {
            let out = encode_image(params, &item.image).map_err(|e| {
                Error::Data(format!("while embedding image `{}`: {e}", item.id))
            })?;
            Ok(out.embedding.data().to_vec())
        })
        .collect::<Result<_>>()?;

    let caption_refs: Vec<(&str, usize, &str)> = items
        .iter()
        .flat_map(|item| {
            item.captions
                .iter()
                .enumerate()
                .map(|(j, c)| (item.id.as_str(), j, c.as_str()))
        })
        .collect();
    let text_rows: Vec<Vec<S>> = caption_refs
        .par_iter()
        .map(|(id, _, caption)| {
            let (ids, _) = vocab.encode(caption, params.config.max_text_len);
            let emb = encode_text(params, &ids).map_err(|e| {
                Error::Data(format!("while embedding a caption of `{id}`: {e}"))
            })?;
            Ok(emb.data().to_vec())
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(items.len());
    let mut caption_ids = Vec::with_capacity(caption_refs.len());
    let mut row = 0;
    for item in &items {
        let caption_rows = (row..row + item.captions.len()).collect();
        row += item.captions.len();
        groups.push(CaptionGroup {
            image_id: item.id.clone(),
            caption_rows,
        });
    }
    for (id, j, _) in &caption_refs {
        caption_ids.push(format!("{id}#{j}"));
    }

    Ok(EmbeddedCorpus {
        image_embs: Tensor::matrix(items.len(), d, image_rows.concat())?,
        text_embs: Tensor::matrix(caption_refs.len(), d, text_rows.concat())?,
        groups,
        caption_ids,
    })
}

/// Recall@k for both retrieval directions plus each direction's mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ks: Vec<usize>,
    /// Image-to-text recall per k: any correct caption in the top k.
    pub i2t: Vec<f64>,
    /// Text-to-image recall per k: the caption's own image in the top k.
    pub t2i: Vec<f64>,
    pub i2t_avg: f64,
    pub t2i_avg: f64,
}

/// Rank of the first correct candidate under descending score with ties
/// broken by ascending row index.
fn first_correct_rank<S: Scalar>(scores: &[S], is_correct: impl Fn(usize) -> bool) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .iter()
        .position(|&i| is_correct(i))
        .expect("every query has at least one correct candidate")
}

fn recalls_from_ranks(ranks: &[usize], ks: &[usize], candidates: usize, name: &str) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            let k = if k > candidates {
                eprintln!(
                    "warning: recall@{k} clamped to the {candidates} available {name} candidates"
                );
                candidates
            } else {
                k
            };
            ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
        })
        .collect()
}

/// Scores every query against the full opposite pool and reads recall@k
/// off the rank of the first correct candidate. Ranking uses raw dot
/// products — cosine once rows are unit — so uniformly rescaling either
/// matrix cannot change any metric.
pub fn retrieval_recall<S: Scalar>(
    image_embs: &Tensor<S>,
    text_embs: &Tensor<S>,
    groups: &[CaptionGroup],
    ks: &[usize],
) -> Result<RetrievalResult> {
    let (n_img, d) = image_embs.dims2();
    let (n_cap, d2) = text_embs.dims2();
    if d != d2 {
        return Err(Error::shape(
            "retrieval_recall",
            format!("image rows are {d}-dim but text rows {d2}-dim"),
        ));
    }
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::Config(format!(
            "ks must be positive and strictly ascending, got {ks:?}"
        )));
    }
    if groups.len() != n_img {
        return Err(Error::Data(format!(
            "{n_img} image rows but {} caption groups",
            groups.len()
        )));
    }
    let mut owner = vec![usize::MAX; n_cap];
    for (i, g) in groups.iter().enumerate() {
        if g.caption_rows.is_empty() {
            return Err(Error::Data(format!("image `{}` has no captions", g.image_id)));
        }
        for &r in &g.caption_rows {
            if r >= n_cap {
                return Err(Error::Data(format!(
                    "image `{}` lists caption row {r}, but there are only {n_cap}",
                    g.image_id
                )));
            }
            if owner[r] != usize::MAX {
                return Err(Error::Data(format!("caption row {r} belongs to two images")));
            }
            owner[r] = i;
        }
    }
    if let Some(r) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::Data(format!("caption row {r} belongs to no image")));
    }

    // One n_img × n_cap score matrix serves both directions: row i is
    // image i against every caption, column c is caption c against every
    // image.
    let mut scores = vec![S::zero(); n_img * n_cap];
    kernels::matmul_bt(
        image_embs.data(),
        text_embs.data(),
        n_img,
        d,
        n_cap,
        &mut scores,
    );

    let i2t_ranks: Vec<usize> = (0..n_img)
        .map(|i| {
            let row = &scores[i * n_cap..(i + 1) * n_cap];
            first_correct_rank(row, |c| owner[c] == i)
        })
        .collect();
    let t2i_ranks: Vec<usize> = (0..n_cap)
        .map(|c| {
            let col: Vec<S> = (0..n_img).map(|i| scores[i * n_cap + c]).collect();
            first_correct_rank(&col, |i| i == owner[c])
        })
        .collect();

    let i2t = recalls_from_ranks(&i2t_ranks, ks, n_cap, "caption");
    let t2i = recalls_from_ranks(&t2i_ranks, ks, n_img, "image");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(RetrievalResult {
        ks: ks.to_vec(),
        i2t_avg: mean(&i2t),
        t2i_avg: mean(&t2i),
        i2t,
        t2i,
    })
}

/// Per-class slice of a classification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: String,
    pub total: usize,
    pub correct: usize,
    /// None for classes absent from the benchmark.
    pub accuracy: Option<f64>,
}

/// Top-1 nearest-class accuracy with its per-class and confusion detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub total: usize,
    pub correct: usize,
    /// correct / total, exactly.
    pub accuracy: f64,
    pub per_class: Vec<PerClassRow>,
    /// confusion[true class][predicted class], in class-name order.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax-cosine class per image row, ties to the lowest class index.
pub fn classify_embeddings<S: Scalar>(
    image_embs: &Tensor<S>,
    class_embs: &Tensor<S>,
) -> Result<Vec<usize>> {
    let (n, d) = image_embs.dims2();
    let (c, d2) = class_embs.dims2();
    if d != d2 {
        return Err(Error::shape(
            "classify_embeddings",
            format!("image rows are {d}-dim but class rows {d2}-dim"),
        ));
    }
    if c == 0 {
        return Err(Error::Data("no classes to assign".into()));
    }
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let img = &image_embs.data()[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_score = kernels::dot(img, &class_embs.data()[..d]);
        for j in 1..c {
            let s = kernels::dot(img, &class_embs.data()[j * d..(j + 1) * d]);
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Renders every class name through `template` (its `{}` placeholder),
/// embeds the sentences once, and assigns each image its nearest class.
/// An item's class is its first label.
pub fn zero_shot_classify<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &Vocab,
    items: &[CaptionedImage],
    class_names: &[String],
    template: &str,
) -> Result<ClassificationResult> {
    if class_names.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 classes, got {}",
            class_names.len()
        )));
    }
    if !template.contains("{}") {
        return Err(Error::Config(format!(
            "template `{template}` has no {{}} placeholder for the class name"
        )));
    }
    let mut class_index = HashMap::with_capacity(class_names.len());
    for (j, name) in class_names.iter().enumerate() {
        if class_index.insert(name.as_str(), j).is_some() {
            return Err(Error::Config(format!("duplicate class name `{name}`")));
        }
    }
    if items.is_empty() {
        return Err(Error::Data("cannot classify an empty benchmark".into()));
    }

    let d = params.config.proj_dim;
    let mut class_rows = Vec::with_capacity(class_names.len() * d);
    for name in class_names {
        let sentence = template.replace("{}", name);
        let (ids, _) = vocab.encode(&sentence, params.config.max_text_len);
        class_rows.extend_from_slice(encode_text(params, &ids)?.data());
    }
    let class_embs = Tensor::matrix(class_names.len(), d, class_rows)?;

    let truth: Vec<usize> = items
        .iter()
        .map(|item| {
            let label = item.labels.first().ok_or_else(|| {
                Error::Data(format!("item `{}` has no label to classify against", item.id))
            })?;
            class_index.get(label.as_str()).copied().ok_or_else(|| {
                Error::Data(format!(
                    "label `{label}` of item `{}` is not among the class names",
                    item.id
                ))
            })
        })
        .collect::<Result<_>>()?;

    let image_rows: Vec<Vec<S>> = items
        .par_iter()
        .map(|item| {
            let out = encode_image(params, &item.image).map_err(|e| {
                Error::Data(format!("while embedding image `{}`: {e}", item.id))
            })?;
            Ok(out.embedding.data().to_vec())
        })
        .collect::<Result<_>>()?;
    let image_embs = Tensor::matrix(items.len(), d, image_rows.concat())?;
    let preds = classify_embeddings(&image_embs, &class_embs)?;

    let c = class_names.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in truth.iter().zip(&preds) {
        confusion[t][p] += 1;
    }
    let per_class: Vec<PerClassRow> = class_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let total: usize = confusion[j].iter().sum();
            let correct = confusion[j][j];
            PerClassRow {
                class: name.clone(),
                total,
                correct,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect();
    let correct: usize = (0..c).map(|j| confusion[j][j]).sum();
    Ok(ClassificationResult {
        total: items.len(),
        correct,
        accuracy: correct as f64 / items.len() as f64,
        per_class,
        confusion,
    })
}

/// One model's score on the shared benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy per named model, all on the same benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Classifies the benchmark once per named model. An empty model list is
/// an empty table, not an error.
pub fn holdout_eval<S: Scalar>(
    models: &[(&str, &ModelParams<S>, &Vocab)],
    benchmark: &[CaptionedImage],
    class_names: &[String],
    template: &str,
) -> Result<ComparisonTable> {
    if let Some((first, rest)) = models.split_first() {
        for (name, params, _) in rest {
            if params.config.proj_dim != first.1.config.proj_dim {
                return Err(Error::Config(format!(
                    "model `{name}` projects to {} dims but `{}` to {}; the comparison \
                     needs one shared space",
                    params.config.proj_dim, first.0, first.1.config.proj_dim
                )));
            }
        }
    }
    let rows = models
        .iter()
        .map(|(name, params, vocab)| {
            let res = zero_shot_classify(*params, vocab, benchmark, class_names, template)?;
            Ok(ComparisonRow {
                model: (*name).to_owned(),
                total: res.total,
                correct: res.correct,
                accuracy: res.accuracy,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable { rows })
}

/// On-disk report flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Full precision, round-trippable.
    Json,
    /// Flat metrics, floats at 4 decimal places.
    Csv,
}

/// A result that can serialize itself both ways.
pub trait Report {
    fn to_json(&self) -> String;
    fn to_csv(&self) -> String;
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

impl Report for RetrievalResult {
    fn to_json(&self) -> String {
        pretty_json(self)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("direction");
        for k in &self.ks {
            out.push_str(&format!(",r@{k}"));
        }
        out.push_str(",avg\n");
        for (name, recalls, avg) in [("i2t", &self.i2t, self.i2t_avg), ("t2i", &self.t2i, self.t2i_avg)]
        {
            out.push_str(name);
            for r in recalls {
                out.push_str(&format!(",{r:.4}"));
            }
            out.push_str(&format!(",{avg:.4}\n"));
        }
        out
    }
}

impl Report for ClassificationResult {
    fn to_json(&self) -> String {
        pretty_json(self)
    }

    /// The aggregate row is named `(all)`; the parentheses keep it out of
    /// the class namespace. Confusion counts stay JSON-only.
    fn to_csv(&self) -> String {
        let mut out = String::from("class,total,correct,accuracy\n");
        out.push_str(&format!(
            "(all),{},{},{:.4}\n",
            self.total, self.correct, self.accuracy
        ));
        for row in &self.per_class {
            let acc = row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{acc}\n", row.class, row.total, row.correct));
        }
        out
    }
}

impl Report for ComparisonTable {
    fn to_json(&self) -> String {
        pretty_json(self)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("model,total,correct,accuracy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4}\n",
                row.model, row.total, row.correct, row.accuracy
            ));
        }
        out
    }
}

/// Writes a report to `path` in the chosen format.
pub fn write_report<R: Report>(report: &R, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::Image;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth_vision: 1,
            depth_text: 1,
            heads: 2,
            proj_dim: 8,
            vocab_size: 64,
            max_text_len: 8,
            seed,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        let mut img = Image::filled(size, size, [0, 0, 0]);
        for y in 0..size {
            for x in 0..size {
                img.set(x, y, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        img
    }

    fn item(id: &str, image: Image, captions: &[&str], label: &str) -> CaptionedImage {
        CaptionedImage {
            id: id.to_owned(),
            image,
            captions: captions.iter().map(|c| (*c).to_owned()).collect(),
            labels: vec![label.to_owned()],
            gt_masks: None,
        }
    }

    /// Params, vocab, and a 3-image corpus with 1/2/2 captions, handed
    /// over in deliberately unsorted id order.
    fn corpus_fixture() -> (ModelParams<f32>, Vocab, Vec<CaptionedImage>) {
        let params = ModelParams::<f32>::init(tiny_config(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let corpus = vec![
            item(
                "c",
                random_image(&mut rng, 32),
                &["a runway beside hangars", "planes parked on apron"],
                "airport",
            ),
            item("a", random_image(&mut rng, 32), &["a round storage tank"], "tank"),
            item(
                "b",
                random_image(&mut rng, 32),
                &["ships docked in a harbor", "a crane over the pier"],
                "harbor",
            ),
        ];
        let vocab = Vocab::build(
            corpus
                .iter()
                .flat_map(|i| i.captions.iter().map(String::as_str)),
        );
        (params, vocab, corpus)
    }

    /// Unit rows pointing along distinct axes.
    fn axis_rows(n: usize, d: usize) -> Tensor<f32> {
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            data[i * d + (i % d)] = 1.0;
        }
        Tensor::matrix(n, d, data).unwrap()
    }

    fn one_to_one_groups(n: usize) -> Vec<CaptionGroup> {
        (0..n)
            .map(|i| CaptionGroup {
                image_id: format!("img-{i}"),
                caption_rows: vec![i],
            })
            .collect()
    }

    #[test]
    fn embedding_sorts_groups_and_names_captions() {
        let (params, vocab, corpus) = corpus_fixture();
        let emb = embed_corpus(&params, &vocab, &corpus).unwrap();
        assert_eq!(emb.image_embs.dims2(), (3, 8));
        assert_eq!(emb.text_embs.dims2(), (5, 8));
        let ids: Vec<&str> = emb.groups.iter().map(|g| g.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"], "rows follow ascending item id");
        assert_eq!(emb.groups[0].caption_rows, [0]);
        assert_eq!(emb.groups[1].caption_rows, [1, 2]);
        assert_eq!(emb.groups[2].caption_rows, [3, 4]);
        assert_eq!(emb.caption_ids, ["a#0", "b#0", "b#1", "c#0", "c#1"]);
        for i in 0..3 {
            let row = &emb.image_embs.data()[i * 8..(i + 1) * 8];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "image row {i} norm {norm}");
        }

        // Any input order of the same items embeds identically.
        let mut shuffled = corpus.clone();
        shuffled.swap(0, 2);
        shuffled.swap(1, 2);
        let emb2 = embed_corpus(&params, &vocab, &shuffled).unwrap();
        assert_eq!(emb.image_embs.data(), emb2.image_embs.data());
        assert_eq!(emb.text_embs.data(), emb2.text_embs.data());
        assert_eq!(emb.groups, emb2.groups);
    }

    #[test]
    fn embedding_matches_single_item_encodes_bitwise() {
        let (params, vocab, corpus) = corpus_fixture();
        let emb = embed_corpus(&params, &vocab, &corpus).unwrap();
        let by_id = |id: &str| corpus.iter().find(|i| i.id == id).unwrap();
        for (g, group) in emb.groups.iter().enumerate() {
            let item = by_id(&group.image_id);
            let single = encode_image(&params, &item.image).unwrap().embedding;
            let row = &emb.image_embs.data()[g * 8..(g + 1) * 8];
            for (a, b) in row.iter().zip(single.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (j, &r) in group.caption_rows.iter().enumerate() {
                let (ids, _) = vocab.encode(&item.captions[j], params.config.max_text_len);
                let single = encode_text(&params, &ids).unwrap();
                let row = &emb.text_embs.data()[r * 8..(r + 1) * 8];
                for (a, b) in row.iter().zip(single.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn embedding_failures_name_the_item() {
        let (params, vocab, mut corpus) = corpus_fixture();
        assert!(embed_corpus(&params, &vocab, &[]).is_err(), "empty corpus");

        let dupe = corpus[0].clone();
        corpus.push(dupe);
        let err = embed_corpus(&params, &vocab, &corpus).unwrap_err();
        assert!(err.to_string().contains("duplicate item id `c`"), "{err}");
        corpus.pop();

        // A wrong-size image fails inside the encoder; the error must say
        // which item carried it.
        corpus[1].image = Image::filled(16, 16, [0, 0, 0]);
        let err = embed_corpus(&params, &vocab, &corpus).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn identity_embeddings_retrieve_perfectly() {
        let img = axis_rows(4, 8);
        let txt = axis_rows(4, 8);
        let groups = one_to_one_groups(4);
        let res = retrieval_recall(&img, &txt, &groups, &[1, 2, 3]).unwrap();
        assert_eq!(res.i2t, [1.0, 1.0, 1.0]);
        assert_eq!(res.t2i, [1.0, 1.0, 1.0]);
        assert_eq!(res.i2t_avg, 1.0);
        assert_eq!(res.t2i_avg, 1.0);
    }

    #[test]
    fn ties_resolve_to_the_lower_row() {
        // Two images share one embedding; each caption equals it too. Every
        // T2I ranking is a pure tie, so the lower image row wins: caption 0
        // (image 0) succeeds at k=1, caption 1 (image 1) needs k=2.
        let img = Tensor::matrix(2, 2, vec![1.0f32, 0.0, 1.0, 0.0]).unwrap();
        let txt = Tensor::matrix(2, 2, vec![1.0f32, 0.0, 1.0, 0.0]).unwrap();
        let groups = one_to_one_groups(2);
        let res = retrieval_recall(&img, &txt, &groups, &[1, 2]).unwrap();
        assert_eq!(res.t2i, [0.5, 1.0]);
        // I2T mirrors it: image 1's only correct caption is row 1, hidden
        // behind the tied row 0 at k=1.
        assert_eq!(res.i2t, [0.5, 1.0]);
    }

    #[test]
    fn oversized_k_clamps_to_the_pool() {
        let img = axis_rows(3, 8);
        let txt = axis_rows(3, 8);
        let groups = one_to_one_groups(3);
        let res = retrieval_recall(&img, &txt, &groups, &[1, 999]).unwrap();
        assert_eq!(res.i2t[1], 1.0, "k beyond the pool retrieves everything");
        assert_eq!(res.t2i[1], 1.0);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let img = axis_rows(2, 8);
        let txt = axis_rows(3, 8);
        let mk = |rows: Vec<Vec<usize>>| -> Vec<CaptionGroup> {
            rows.into_iter()
                .enumerate()
                .map(|(i, caption_rows)| CaptionGroup {
                    image_id: format!("img-{i}"),
                    caption_rows,
                })
                .collect()
        };
        let good = mk(vec![vec![0, 2], vec![1]]);
        assert!(retrieval_recall(&img, &txt, &good, &[1]).is_ok());
        // Unsorted, duplicate, or zero ks.
        assert!(retrieval_recall(&img, &txt, &good, &[5, 1]).is_err());
        assert!(retrieval_recall(&img, &txt, &good, &[1, 1]).is_err());
        assert!(retrieval_recall(&img, &txt, &good, &[0, 1]).is_err());
        assert!(retrieval_recall(&img, &txt, &good, &[]).is_err());
        // Group bookkeeping errors.
        assert!(retrieval_recall(&img, &txt, &mk(vec![vec![0]]), &[1]).is_err());
        assert!(retrieval_recall(&img, &txt, &mk(vec![vec![0], vec![]]), &[1]).is_err());
        assert!(retrieval_recall(&img, &txt, &mk(vec![vec![0, 3], vec![1]]), &[1]).is_err());
        assert!(retrieval_recall(&img, &txt, &mk(vec![vec![0, 1], vec![1]]), &[1]).is_err());
        assert!(
            retrieval_recall(&img, &txt, &mk(vec![vec![0], vec![1]]), &[1]).is_err(),
            "caption row 2 is orphaned"
        );
    }

    /// Literal top-k reimplementation: full sort per query, membership
    /// test against the correct set.
    fn oracle_recalls(
        img: &Tensor<f32>,
        txt: &Tensor<f32>,
        groups: &[CaptionGroup],
        ks: &[usize],
    ) -> (Vec<f64>, Vec<f64>) {
        let (n_img, d) = img.dims2();
        let (n_cap, _) = txt.dims2();
        let score = |a: &[f32], b: &[f32]| -> f32 {
            let mut acc = 0.0;
            for i in 0..d {
                acc += a[i] * b[i];
            }
            acc
        };
        let sort_desc = |scores: Vec<f32>| -> Vec<usize> {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order
        };
        let mut i2t = Vec::new();
        let mut t2i = Vec::new();
        for &k in ks {
            let mut hits = 0;
            for (i, g) in groups.iter().enumerate() {
                let a = &img.data()[i * d..(i + 1) * d];
                let scores: Vec<f32> = (0..n_cap)
                    .map(|c| score(a, &txt.data()[c * d..(c + 1) * d]))
                    .collect();
                let top = sort_desc(scores);
                if top[..k.min(n_cap)].iter().any(|c| g.caption_rows.contains(c)) {
                    hits += 1;
                }
            }
            i2t.push(hits as f64 / n_img as f64);
            let mut owner = vec![0usize; n_cap];
            for (i, g) in groups.iter().enumerate() {
                for &r in &g.caption_rows {
                    owner[r] = i;
                }
            }
            let mut hits = 0;
            for c in 0..n_cap {
                let q = &txt.data()[c * d..(c + 1) * d];
                let scores: Vec<f32> = (0..n_img)
                    .map(|i| score(q, &img.data()[i * d..(i + 1) * d]))
                    .collect();
                let top = sort_desc(scores);
                if top[..k.min(n_img)].contains(&owner[c]) {
                    hits += 1;
                }
            }
            t2i.push(hits as f64 / n_cap as f64);
        }
        (i2t, t2i)
    }

    #[test]
    fn recall_matches_a_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let n_img = rng.gen_range(3..=50);
            let d = rng.gen_range(3..=8);
            let mut groups = Vec::new();
            let mut rows = 0usize;
            for i in 0..n_img {
                let caps = rng.gen_range(1..=3);
                groups.push(CaptionGroup {
                    image_id: format!("img-{i}"),
                    caption_rows: (rows..rows + caps).collect(),
                });
                rows += caps;
            }
            // Deliberately unnormalized: the ranking stage must not care.
            let img_data: Vec<f32> = (0..n_img * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let txt_data: Vec<f32> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let img = Tensor::matrix(n_img, d, img_data).unwrap();
            let txt = Tensor::matrix(rows, d, txt_data).unwrap();

            let ks = [1, 5, 10];
            let res = retrieval_recall(&img, &txt, &groups, &ks).unwrap();
            let (i2t, t2i) = oracle_recalls(&img, &txt, &groups, &ks);
            assert_eq!(res.i2t, i2t, "trial {trial}");
            assert_eq!(res.t2i, t2i, "trial {trial}");
            assert!(res.i2t[0] <= res.i2t[1] && res.i2t[1] <= res.i2t[2]);
            assert!(res.t2i[0] <= res.t2i[1] && res.t2i[1] <= res.t2i[2]);
        }
    }

    #[test]
    fn positive_rescaling_changes_no_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, d) = (12, 6);
        let img_data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let txt_data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = Tensor::matrix(n, d, img_data.clone()).unwrap();
        let txt = Tensor::matrix(n, d, txt_data.clone()).unwrap();
        let groups = one_to_one_groups(n);
        let base = retrieval_recall(&img, &txt, &groups, &[1, 5, 10]).unwrap();

        let img_s =
            Tensor::matrix(n, d, img_data.iter().map(|v| v * 3.5).collect()).unwrap();
        let txt_s =
            Tensor::matrix(n, d, txt_data.iter().map(|v| v * 0.125).collect()).unwrap();
        let scaled = retrieval_recall(&img_s, &txt_s, &groups, &[1, 5, 10]).unwrap();
        assert_eq!(base, scaled);
    }

    #[test]
    fn joint_relabeling_leaves_recalls_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let (n, d) = (10, 5);
        let img_rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let txt_rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let img = Tensor::matrix(n, d, img_rows.concat()).unwrap();
        let txt = Tensor::matrix(n, d, txt_rows.concat()).unwrap();
        let base = retrieval_recall(&img, &txt, &one_to_one_groups(n), &[1, 5, 10]).unwrap();

        // One permutation applied to images and captions together — the
        // pairing (and thus every metric) is untouched.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let img2 =
            Tensor::matrix(n, d, perm.iter().flat_map(|&i| img_rows[i].clone()).collect())
                .unwrap();
        let txt2 =
            Tensor::matrix(n, d, perm.iter().flat_map(|&i| txt_rows[i].clone()).collect())
                .unwrap();
        let moved = retrieval_recall(&img2, &txt2, &one_to_one_groups(n), &[1, 5, 10]).unwrap();
        assert_eq!(base.i2t, moved.i2t);
        assert_eq!(base.t2i, moved.t2i);
    }

    #[test]
    fn nearest_class_follows_cosine_and_breaks_ties_low() {
        let classes = Tensor::matrix(3, 4, vec![
            1.0f32, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        ])
        .unwrap();
        let images = Tensor::matrix(4, 4, vec![
            1.0f32, 0.0, 0.0, 0.0, // exactly class 0
            0.1, 0.9, 0.0, 0.0, // nearest class 1
            0.5, 0.0, 0.5, 0.0, // tie between 0 and 2 → 0
            0.0, 0.0, 0.0, 1.0, // orthogonal to all → tie → 0
        ])
        .unwrap();
        let preds = classify_embeddings(&images, &classes).unwrap();
        assert_eq!(preds, [0, 1, 0, 0]);
    }

    /// Benchmark over two classes with known labels; predictions come
    /// from an untrained model, so only the bookkeeping is under test.
    fn classify_fixture() -> (ModelParams<f32>, Vocab, Vec<CaptionedImage>, Vec<String>) {
        let params = ModelParams::<f32>::init(tiny_config(19)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let items: Vec<CaptionedImage> = (0..6)
            .map(|i| {
                let label = if i % 2 == 0 { "airport" } else { "harbor" };
                item(
                    &format!("img-{i}"),
                    random_image(&mut rng, 32),
                    &["unused caption"],
                    label,
                )
            })
            .collect();
        let vocab = Vocab::build(["an aerial image of a airport", "harbor", "unused caption"]);
        let classes = vec!["airport".to_owned(), "harbor".to_owned()];
        (params, vocab, items, classes)
    }

    #[test]
    fn classification_counts_add_up() {
        let (params, vocab, items, classes) = classify_fixture();
        let res =
            zero_shot_classify(&params, &vocab, &items, &classes, "An aerial image of {}.")
                .unwrap();
        assert_eq!(res.total, 6);
        assert_eq!(res.accuracy, res.correct as f64 / 6.0);
        let confusion_total: usize = res.confusion.iter().flatten().sum();
        assert_eq!(confusion_total, 6, "every item lands in one confusion cell");
        for (j, row) in res.per_class.iter().enumerate() {
            assert_eq!(row.total, res.confusion[j].iter().sum::<usize>());
            assert_eq!(row.correct, res.confusion[j][j]);
            assert_eq!(row.total, 3, "fixture balances the two classes");
        }
        // Same inputs, same result — including the embedded sentences.
        let again =
            zero_shot_classify(&params, &vocab, &items, &classes, "An aerial image of {}.")
                .unwrap();
        assert_eq!(res, again);
        // The bare-name template is a legal override.
        zero_shot_classify(&params, &vocab, &items, &classes, "{}").unwrap();
    }

    #[test]
    fn classification_rejects_bad_setups() {
        let (params, vocab, mut items, classes) = classify_fixture();
        let err = zero_shot_classify(&params, &vocab, &items, &classes[..1], "{}").unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
        let err =
            zero_shot_classify(&params, &vocab, &items, &classes, "no placeholder").unwrap_err();
        assert!(err.to_string().contains("placeholder"), "{err}");
        let dupes = vec!["airport".to_owned(), "airport".to_owned()];
        let err = zero_shot_classify(&params, &vocab, &items, &dupes, "{}").unwrap_err();
        assert!(err.to_string().contains("duplicate class"), "{err}");
        items[3].labels = vec!["volcano".to_owned()];
        let err = zero_shot_classify(&params, &vocab, &items, &classes, "{}").unwrap_err();
        assert!(
            err.to_string().contains("volcano") && err.to_string().contains("img-3"),
            "{err}"
        );
    }

    #[test]
    fn holdout_table_is_reproducible_and_optional() {
        let (params, vocab, items, classes) = classify_fixture();
        let table = holdout_eval(
            &[("base", &params, &vocab), ("base again", &params, &vocab)],
            &items,
            &classes,
            "{}",
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].accuracy, table.rows[1].accuracy);
        assert_eq!(table.rows[0].correct, table.rows[1].correct);
        assert_eq!(table.rows[0].model, "base");

        let empty = holdout_eval::<f32>(&[], &items, &classes, "{}").unwrap();
        assert!(empty.rows.is_empty(), "no models, no rows, no error");

        let mut other_cfg = tiny_config(19);
        other_cfg.proj_dim = 4;
        let other = ModelParams::<f32>::init(other_cfg).unwrap();
        let err = holdout_eval(
            &[("base", &params, &vocab), ("narrow", &other, &vocab)],
            &items,
            &classes,
            "{}",
        )
        .unwrap_err();
        assert!(err.to_string().contains("narrow"), "{err}");
    }

    #[test]
    fn reports_print_stable_four_decimal_csv() {
        let res = RetrievalResult {
            ks: vec![1, 5, 10],
            i2t: vec![0.12345, 0.5, 1.0],
            t2i: vec![0.25, 0.75, 0.875],
            i2t_avg: (0.12345 + 0.5 + 1.0) / 3.0,
            t2i_avg: 0.625,
        };
        assert_eq!(
            res.to_csv(),
            "direction,r@1,r@5,r@10,avg\n\
             i2t,0.1235,0.5000,1.0000,0.5412\n\
             t2i,0.2500,0.7500,0.8750,0.6250\n"
        );
        let back: RetrievalResult = serde_json::from_str(&res.to_json()).unwrap();
        assert_eq!(back, res, "JSON keeps full precision");

        let table = ComparisonTable {
            rows: vec![ComparisonRow {
                model: "base".into(),
                total: 128,
                correct: 37,
                accuracy: 37.0 / 128.0,
            }],
        };
        assert_eq!(
            table.to_csv(),
            "model,total,correct,accuracy\nbase,128,37,0.2891\n"
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("retrieval.json");
        write_report(&res, &path, ReportFormat::Json).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), res.to_json());
    }

    #[test]
    fn classification_csv_keeps_the_aggregate_apart() {
        let (params, vocab, items, classes) = classify_fixture();
        let res = zero_shot_classify(&params, &vocab, &items, &classes, "{}").unwrap();
        let csv = res.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,total,correct,accuracy");
        assert!(lines[1].starts_with("(all),6,"));
        assert_eq!(lines.len(), 4, "aggregate plus one row per class");
        let back: ClassificationResult = serde_json::from_str(&res.to_json()).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn full_pipeline_reports_are_byte_identical_across_runs() {
        let (params, vocab, corpus) = corpus_fixture();
        let run = || {
            let emb = embed_corpus(&params, &vocab, &corpus).unwrap();
            let res =
                retrieval_recall(&emb.image_embs, &emb.text_embs, &emb.groups, &[1, 5, 10])
                    .unwrap();
            (res.to_json(), res.to_csv())
        };
        let (j1, c1) = run();
        let (j2, c2) = run();
        assert_eq!(j1, j2);
        assert_eq!(c1, c2);
    }
}
