//! Captioned-image datasets: the common record type, holdout splitting,
//! and corpus-level vocabulary construction.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::image::Image;
use crate::data::mask::Mask;
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::tokenizer::{split_words, Vocab};

/// One dataset record: pixels, at least one caption, the class names
/// present (largest object first), and optional per-class ground-truth
/// patch masks (synthetic data only).
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub id: String,
    pub image: Image,
    pub captions: Vec<String>,
    pub labels: Vec<String>,
    pub gt_masks: Option<BTreeMap<String, Mask>>,
}

impl CaptionedImage {
    /// Basic record well-formedness: at least one caption, and any masks
    /// agree with each other on grid side.
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::Data(format!("item `{}` has no captions", self.id)));
        }
        if let Some(masks) = &self.gt_masks {
            let mut sides = masks.values().map(Mask::side);
            if let Some(first) = sides.next() {
                if sides.any(|s| s != first) {
                    return Err(Error::Data(format!(
                        "item `{}` has masks with mixed grid sides",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rejects any ground-truth mask whose grid does not match the patch
/// grid of `config` — masks are never silently resampled.
pub fn require_grid_alignment(dataset: &[CaptionedImage], config: &ModelConfig) -> Result<()> {
    let p = config.grid_side();
    for item in dataset {
        if let Some(masks) = &item.gt_masks {
            for (class, mask) in masks {
                if mask.side() != p {
                    return Err(Error::Data(format!(
                        "item `{}`: mask for `{class}` has grid side {}, but the model's patch grid is {p}×{p}",
                        item.id,
                        mask.side()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// All distinct class labels in the dataset, sorted.
pub fn corpus_classes(dataset: &[CaptionedImage]) -> Vec<String> {
    let set: BTreeSet<&str> = dataset
        .iter()
        .flat_map(|i| i.labels.iter().map(String::as_str))
        .collect();
    set.into_iter().map(str::to_owned).collect()
}

/// Splits for holdout evaluation: the train set keeps only images that
/// mention no excluded class at all; the benchmark keeps images whose
/// dominant (first-listed, largest) class is excluded, labeled with that
/// class. Images that merely contain an excluded class in the background
/// belong to neither side.
pub fn holdout_split<'a>(
    dataset: &'a [CaptionedImage],
    excluded_classes: &[String],
) -> Result<(Vec<&'a CaptionedImage>, Vec<(&'a CaptionedImage, String)>)> {
    if excluded_classes.is_empty() {
        return Err(Error::Data("no classes to exclude".into()));
    }
    let known = corpus_classes(dataset);
    for class in excluded_classes {
        if !known.iter().any(|k| k == class) {
            return Err(Error::Data(format!(
                "excluded class `{class}` does not occur in the corpus"
            )));
        }
    }
    let excluded: BTreeSet<&str> = excluded_classes.iter().map(String::as_str).collect();

    let mut train = Vec::new();
    let mut benchmark = Vec::new();
    for item in dataset {
        let hits = item.labels.iter().any(|l| excluded.contains(l.as_str()));
        if !hits {
            train.push(item);
        } else if let Some(first) = item.labels.first() {
            if excluded.contains(first.as_str()) {
                benchmark.push((item, first.clone()));
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Data(
            "excluding these classes empties the training set".into(),
        ));
    }
    Ok((train, benchmark))
}

/// Builds the tokenizer vocabulary from every caption in the corpus:
/// words ordered by descending frequency (ties alphabetical), after the
/// reserved control ids.
pub fn build_vocab(dataset: &[CaptionedImage]) -> Result<Vocab> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for item in dataset {
        for caption in &item.captions {
            for word in split_words(caption) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
    }
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_ordered(words.into_iter().map(|(w, _)| w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, labels: &[&str]) -> CaptionedImage {
        CaptionedImage {
            id: id.to_string(),
            image: Image::filled(8, 8, [0, 0, 0]),
            captions: vec![format!("an aerial image of {}", labels.join(" and "))],
            labels: labels.iter().map(|s| s.to_string()).collect(),
            gt_masks: None,
        }
    }

    #[test]
    fn holdout_partitions_by_dominant_class() {
        let data = vec![
            item("a", &["car"]),
            item("b", &["lake", "car"]),
            item("c", &["car", "lake"]),
            item("d", &["lake"]),
        ];
        let (train, bench) = holdout_split(&data, &["car".to_string()]).unwrap();
        let train_ids: Vec<&str> = train.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(train_ids, ["d"]);
        let bench_ids: Vec<(&str, &str)> =
            bench.iter().map(|(i, c)| (i.id.as_str(), c.as_str())).collect();
        // "b" contains car but is dominated by lake: in neither split.
        assert_eq!(bench_ids, [("a", "car"), ("c", "car")]);
        // Single-class corpus splits without loss.
        let singles = vec![item("a", &["car"]), item("d", &["lake"])];
        let (t, b) = holdout_split(&singles, &["car".to_string()]).unwrap();
        assert_eq!(t.len() + b.len(), singles.len());
    }

    #[test]
    fn holdout_rejects_bad_exclusions() {
        let data = vec![item("a", &["car"]), item("b", &["lake"])];
        assert!(holdout_split(&data, &[]).is_err());
        assert!(holdout_split(&data, &["castle".to_string()]).is_err());
        let all = vec!["car".to_string(), "lake".to_string()];
        assert!(holdout_split(&data, &all).is_err());
    }

    #[test]
    fn vocab_orders_by_frequency_then_spelling() {
        let mut it = item("a", &["car"]);
        it.captions = vec!["b a a".to_string()];
        let vocab = build_vocab(&[it]).unwrap();
        let a = vocab.id("a");
        let b = vocab.id("b");
        assert!(a < b, "more frequent word must get the lower id");
        assert_eq!(a, crate::model::tokenizer::RESERVED_TOKENS as u32);
    }

    #[test]
    fn grid_alignment_is_enforced() {
        let cfg = ModelConfig { image_size: 16, patch_size: 8, ..ModelConfig::default() };
        let mut it = item("a", &["car"]);
        let mut masks = BTreeMap::new();
        masks.insert("car".to_string(), Mask::empty(4).unwrap());
        it.gt_masks = Some(masks);
        let data = vec![it];
        let err = require_grid_alignment(&data, &cfg).unwrap_err().to_string();
        assert!(err.contains("grid side 4") && err.contains("2×2"), "{err}");
    }
}
