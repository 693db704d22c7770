//! JSONL dataset interchange: one record per line, images as sidecar
//! PPM files (default) or base64 data URIs (single-file fixtures), masks
//! run-length encoded so files stay reviewable in diffs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::corpus::CaptionedImage;
use crate::data::image::Image;
use crate::data::mask::Mask;
use crate::error::{Error, Result};

const DATA_URI_PREFIX: &str = "data:image/x-portable-pixmap;base64,";

#[derive(Serialize, Deserialize)]
struct RleMask {
    side: usize,
    runs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    captions: Vec<String>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<BTreeMap<String, RleMask>>,
}

/// Where record pixels live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageStorage {
    /// `images/{id}.ppm` next to the JSONL file (the normal layout).
    Sidecar,
    /// Base64 PPM data URI inside the record (single-file fixtures).
    Inline,
}

/// Writes the dataset as JSONL at `path`. Sidecar storage also writes
/// one binary PPM per record under `images/` beside the file.
pub fn write_jsonl(
    dataset: &[CaptionedImage],
    path: &Path,
    storage: ImageStorage,
) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new(""));
    if storage == ImageStorage::Sidecar {
        let dir = parent.join("images");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in dataset {
        item.validate()?;
        if !seen.insert(item.id.as_str()) {
            return Err(Error::Data(format!("duplicate image id `{}`", item.id)));
        }
        let image = match storage {
            ImageStorage::Sidecar => {
                let rel = format!("images/{}.ppm", item.id);
                item.image.write_ppm(&parent.join(&rel))?;
                rel
            }
            ImageStorage::Inline => {
                format!("{DATA_URI_PREFIX}{}", BASE64.encode(item.image.to_ppm_bytes()))
            }
        };
        let masks = item.gt_masks.as_ref().map(|masks| {
            masks
                .iter()
                .map(|(class, m)| {
                    (class.clone(), RleMask { side: m.side(), runs: m.to_runs() })
                })
                .collect()
        });
        let record = Record {
            id: item.id.clone(),
            image,
            captions: item.captions.clone(),
            labels: item.labels.clone(),
            masks,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::Format(format!("cannot serialize `{}`: {e}", item.id)))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL dataset. Every failure names the 1-based line it came
/// from, and nothing is returned unless every line parsed — no partial
/// loads.
pub fn ingest_jsonl(path: &Path) -> Result<Vec<CaptionedImage>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parent = path.parent().unwrap_or_else(|| Path::new(""));

    let mut dataset = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_record(&line, parent)
            .map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::Format(format!(
                "line {line_no}: duplicate image id `{}`",
                item.id
            )));
        }
        dataset.push(item);
    }
    Ok(dataset)
}

fn parse_record(line: &str, parent: &Path) -> Result<CaptionedImage> {
    let record: Record =
        serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;

    let image = if let Some(b64) = record.image.strip_prefix(DATA_URI_PREFIX) {
        let bytes = BASE64
            .decode(b64)
            .map_err(|e| Error::Format(format!("bad base64 image data: {e}")))?;
        Image::from_ppm_bytes(&bytes)?
    } else {
        Image::read_ppm(&parent.join(&record.image))?
    };

    let gt_masks = match record.masks {
        None => None,
        Some(masks) => {
            let mut decoded = BTreeMap::new();
            for (class, rle) in masks {
                let mask = Mask::from_runs(rle.side, &rle.runs).map_err(|e| {
                    Error::Format(format!("mask for `{class}`: {e}"))
                })?;
                decoded.insert(class, mask);
            }
            Some(decoded)
        }
    };

    let item = CaptionedImage {
        id: record.id,
        image,
        captions: record.captions,
        labels: record.labels,
        gt_masks,
    };
    item.validate()?;
    Ok(item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{class_names, generate_synthetic_corpus};
    use crate::model::config::ModelConfig;

    fn sample() -> Vec<CaptionedImage> {
        let classes: Vec<String> = class_names().into_iter().map(str::to_owned).collect();
        generate_synthetic_corpus(3, 6, &classes, &ModelConfig::default()).unwrap()
    }

    fn assert_same(a: &[CaptionedImage], b: &[CaptionedImage]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.captions, y.captions);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.gt_masks, y.gt_masks);
        }
    }

    #[test]
    fn sidecar_round_trip_is_lossless() {
        let data = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_jsonl(&data, &path, ImageStorage::Sidecar).unwrap();
        assert!(dir.path().join("images/img_000000.ppm").exists());
        let back = ingest_jsonl(&path).unwrap();
        assert_same(&data, &back);
    }

    #[test]
    fn inline_round_trip_is_lossless_and_single_file() {
        let data = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        write_jsonl(&data, &path, ImageStorage::Inline).unwrap();
        assert!(!dir.path().join("images").exists());
        let back = ingest_jsonl(&path).unwrap();
        assert_same(&data, &back);
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let data = sample();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_jsonl(&data, &a, ImageStorage::Inline).unwrap();
        write_jsonl(&data, &b, ImageStorage::Inline).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, b"").unwrap();
        assert!(ingest_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_is_reported_by_number() {
        let data = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        write_jsonl(&data, &path, ImageStorage::Inline).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect();
        lines[2] = "{not json".to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = ingest_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected_on_both_sides() {
        let mut data = sample();
        let dup = data[0].clone();
        data.push(dup);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        assert!(write_jsonl(&data, &path, ImageStorage::Inline).is_err());

        data.truncate(2);
        write_jsonl(&data, &path, ImageStorage::Inline).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let first_line = text.lines().next().unwrap().to_owned();
        text.push_str(&first_line);
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let err = ingest_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn bad_masks_are_rejected_with_context() {
        let data = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badmask.jsonl");
        write_jsonl(&data[..1], &path, ImageStorage::Inline).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Corrupt the first run length so the totals no longer match.
        let corrupted = text.replacen("\"runs\":[", "\"runs\":[999,", 1);
        assert_ne!(text, corrupted, "fixture must contain a mask");
        std::fs::write(&path, corrupted).unwrap();
        let err = ingest_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("runs"), "{err}");
    }
}
