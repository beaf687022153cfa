//! Dataset records and the line-delimited corpus file format.
//!
//! One JSON object per line: `image_id`, `width`, `height`,
//! `regions[{bbox, label, feature}]`, `captions[]`. Captions are stored as
//! space-joined strings and tokenized on load.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_REGIONS: usize = 100;

/// A detected object region: pixel bounding box, category label, and the
/// feature vector an upstream detector produced for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub bbox: [f32; 4],
    pub label: String,
    pub feature: Vec<f32>,
}

impl Region {
    pub fn width(&self) -> f32 {
        self.bbox[2] - self.bbox[0]
    }
    pub fn height(&self) -> f32 {
        self.bbox[3] - self.bbox[1]
    }
    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<Region>,
    pub captions: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    image_id: String,
    width: u32,
    height: u32,
    regions: Vec<Region>,
    captions: Vec<String>,
}

fn validate_record(index: usize, rec: &ImageRecord, feature_dim: Option<usize>) -> Result<usize> {
    let err = |field: &'static str, message: String| Error::Corpus { index, field, message };
    if rec.regions.is_empty() || rec.regions.len() > MAX_REGIONS {
        return Err(err(
            "regions",
            format!("expected 1..={MAX_REGIONS} regions, got {}", rec.regions.len()),
        ));
    }
    let mut dim = feature_dim;
    for (ri, r) in rec.regions.iter().enumerate() {
        let [x1, y1, x2, y2] = r.bbox;
        if !(x1 < x2 && y1 < y2) {
            return Err(err("bbox", format!("region {ri}: degenerate box {:?}", r.bbox)));
        }
        if x1 < 0.0 || y1 < 0.0 || x2 > rec.width as f32 || y2 > rec.height as f32 {
            return Err(err(
                "bbox",
                format!("region {ri}: box {:?} outside {}x{} image", r.bbox, rec.width, rec.height),
            ));
        }
        if r.label.is_empty() {
            return Err(err("label", format!("region {ri}: empty label")));
        }
        match dim {
            None => dim = Some(r.feature.len()),
            Some(d) if d != r.feature.len() => {
                return Err(err(
                    "feature",
                    format!("region {ri}: dimension {} but corpus uses {d}", r.feature.len()),
                ));
            }
            _ => {}
        }
    }
    if rec.captions.is_empty() {
        return Err(err("captions", "no captions".to_string()));
    }
    for (ci, c) in rec.captions.iter().enumerate() {
        if c.is_empty() {
            return Err(err("captions", format!("caption {ci} is empty")));
        }
        if let Some(tok) = c.iter().find(|t| t.chars().any(|ch| ch.is_uppercase())) {
            return Err(err("captions", format!("caption {ci}: token {tok:?} is not lowercase")));
        }
    }
    Ok(dim.unwrap())
}

/// Load, validate, and tokenize a corpus file. Record order is the file
/// order; feature dimensionality must be uniform across the whole corpus.
pub fn load_corpus(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::MissingPrerequisite(format!("corpus {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut feature_dim = None;
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            index,
            field: "json",
            message: e.to_string(),
        })?;
        let rec = ImageRecord {
            image_id: raw.image_id,
            width: raw.width,
            height: raw.height,
            regions: raw.regions,
            captions: raw
                .captions
                .iter()
                .map(|c| c.split_whitespace().map(str::to_string).collect())
                .collect(),
        };
        feature_dim = Some(validate_record(index, &rec, feature_dim)?);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Corpus { index: 0, field: "file", message: "empty corpus".to_string() });
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(path)?;
    for rec in records {
        let raw = RawRecord {
            image_id: rec.image_id.clone(),
            width: rec.width,
            height: rec.height,
            regions: rec.regions.clone(),
            captions: rec.captions.iter().map(|c| c.join(" ")).collect(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Feature dimension of a validated corpus.
pub fn feature_dim(corpus: &[ImageRecord]) -> usize {
    corpus[0].regions[0].feature.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(bbox: [f32; 4], label: &str, dim: usize) -> Region {
        Region { bbox, label: label.to_string(), feature: vec![0.5; dim] }
    }

    fn record(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            width: 100,
            height: 100,
            regions: vec![region([0.0, 0.0, 10.0, 10.0], "cup", 4)],
            captions: vec![vec!["a".into(), "cup".into()]],
        }
    }

    #[test]
    fn roundtrip_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &[record("img0"), record("img1")]).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image_id, "img0");
        assert_eq!(loaded[1].captions[0], vec!["a".to_string(), "cup".to_string()]);
    }

    #[test]
    fn rejects_degenerate_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut bad = record("img0");
        bad.regions[0].bbox = [10.0, 0.0, 10.0, 10.0]; // x1 == x2
        write_corpus(&path, &[bad]).unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("bbox"), "{err}");
    }

    #[test]
    fn rejects_mixed_feature_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut a = record("img0");
        a.regions[0].feature = vec![0.0; 32];
        let mut b = record("img1");
        b.regions[0].feature = vec![0.0; 64];
        write_corpus(&path, &[a, b]).unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("feature") && err.contains("32"), "{err}");
    }

    #[test]
    fn rejects_uppercase_caption_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut bad = record("img0");
        bad.captions = vec![vec!["A".into(), "cup".into()]];
        write_corpus(&path, &[bad]).unwrap();
        assert!(load_corpus(&path).is_err());
    }
}
