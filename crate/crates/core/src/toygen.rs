//! Synthetic desk-scale corpus: geometric scenes whose spatial predicates
//! follow from box arithmetic, with per-category prototype features standing
//! in for detector output.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{ImageRecord, Region};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const TOY_CATEGORIES: &[&str] = &["ball", "box", "chair", "cup", "lamp", "plant", "shelf", "table"];
pub const TOY_PREDICATES: &[&str] = &["on", "under", "left of"];

const CANVAS: f32 = 128.0;
/// Vertical gap tolerance for "on"/"under".
const CONTACT_TOL: f32 = 2.0;

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub num_images: usize,
    pub num_categories: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            num_images: 20,
            num_categories: 6,
            num_predicates: 3,
            feature_dim: 32,
            noise_sigma: 0.05,
        }
    }
}

fn overlap_1d(a0: f32, a1: f32, b0: f32, b1: f32) -> f32 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Spatial predicates that hold for the ordered pair (a, b), derived purely
/// from box geometry:
/// - "on": a's bottom edge touches b's top edge with horizontal overlap
/// - "under": the reverse contact
/// - "left of": horizontally disjoint, a entirely before b
pub fn spatial_predicates(a: &[f32; 4], b: &[f32; 4]) -> Vec<&'static str> {
    let mut out = Vec::new();
    let x_overlap = overlap_1d(a[0], a[2], b[0], b[2]);
    if (a[3] - b[1]).abs() <= CONTACT_TOL && x_overlap > 0.0 {
        out.push("on");
    }
    if (b[3] - a[1]).abs() <= CONTACT_TOL && x_overlap > 0.0 {
        out.push("under");
    }
    if a[2] < b[0] {
        out.push("left of");
    }
    out
}

/// True triples of an image under the first `num_predicates` toy predicates,
/// in ordered-pair enumeration order.
pub fn true_triples(regions: &[Region], num_predicates: usize) -> Vec<(usize, &'static str, usize)> {
    let active = &TOY_PREDICATES[..num_predicates];
    let mut triples = Vec::new();
    for i in 0..regions.len() {
        for j in 0..regions.len() {
            if i == j {
                continue;
            }
            for p in spatial_predicates(&regions[i].bbox, &regions[j].bbox) {
                if active.contains(&p) {
                    triples.push((i, p, j));
                }
            }
        }
    }
    triples
}

fn caption_for(regions: &[Region], triples: &[(usize, &'static str, usize)]) -> Vec<String> {
    let mut tokens = Vec::new();
    for (k, (i, p, j)) in triples.iter().enumerate() {
        if k > 0 {
            tokens.push("and".to_string());
        }
        tokens.push("a".to_string());
        tokens.push(regions[*i].label.clone());
        tokens.extend(p.split_whitespace().map(str::to_string));
        tokens.push("a".to_string());
        tokens.push(regions[*j].label.clone());
    }
    tokens
}

struct Boxes(Vec<[f32; 4]>);

/// A stacked pair: `top` resting on `base`.
fn stack(rng: &mut impl Rng) -> Boxes {
    let base_w = rng.gen_range(30..50) as f32;
    let base_x = rng.gen_range(10..(118 - base_w as i32)) as f32;
    let base_y = rng.gen_range(60..85) as f32;
    let base_h = rng.gen_range(20..35) as f32;
    let top_w = rng.gen_range(12..(base_w as i32 - 4).max(13)) as f32;
    let top_x = base_x + rng.gen_range(0..(base_w - top_w) as i32 + 1) as f32;
    let top_h = rng.gen_range(15..30) as f32;
    let base = [base_x, base_y, base_x + base_w, base_y + base_h];
    let top = [top_x, base_y - top_h, top_x + top_w, base_y];
    Boxes(vec![top, base])
}

/// Two horizontally disjoint boxes, left then right.
fn row(rng: &mut impl Rng) -> Boxes {
    let left_w = rng.gen_range(15..30) as f32;
    let left_x = rng.gen_range(5..25) as f32;
    let gap = rng.gen_range(6..20) as f32;
    let right_w = rng.gen_range(15..30) as f32;
    let right_x = left_x + left_w + gap;
    let y = rng.gen_range(40..70) as f32;
    let left_h = rng.gen_range(20..40) as f32;
    let right_h = rng.gen_range(20..40) as f32;
    Boxes(vec![
        [left_x, y, left_x + left_w, y + left_h],
        [right_x, y + 2.0, right_x + right_w, y + 2.0 + right_h],
    ])
}

/// A stack with a third box fully to its left.
fn stack_with_side(rng: &mut impl Rng) -> Boxes {
    let base_w = rng.gen_range(30..45) as f32;
    let base_x = rng.gen_range(55..(123 - base_w as i32)) as f32;
    let base_y = rng.gen_range(60..85) as f32;
    let base_h = rng.gen_range(20..30) as f32;
    let top_w = rng.gen_range(12..(base_w as i32 - 4).max(13)) as f32;
    let top_x = base_x + rng.gen_range(0..(base_w - top_w) as i32 + 1) as f32;
    let top_h = rng.gen_range(15..28) as f32;
    let side_w = rng.gen_range(14..28) as f32;
    let side_x = rng.gen_range(5..(base_x - side_w - 4.0) as i32) as f32;
    let side_y = rng.gen_range(45..75) as f32;
    let side_h = rng.gen_range(18..34) as f32;
    Boxes(vec![
        [top_x, base_y - top_h, top_x + top_w, base_y],
        [base_x, base_y, base_x + base_w, base_y + base_h],
        [side_x, side_y, side_x + side_w, side_y + side_h],
    ])
}

/// Generate a seed-deterministic toy corpus. One template caption per image
/// verbalizes exactly the triples derived from the scene geometry.
pub fn generate_toy_corpus(seed: u64, params: &ToyParams) -> Result<Vec<ImageRecord>> {
    if params.num_categories < 2 || params.num_categories > TOY_CATEGORIES.len() {
        return Err(Error::Config {
            field: "toy_categories".into(),
            message: format!("need 2..={}, got {}", TOY_CATEGORIES.len(), params.num_categories),
        });
    }
    if params.num_predicates < 1 || params.num_predicates > TOY_PREDICATES.len() {
        return Err(Error::Config {
            field: "toy_predicates".into(),
            message: format!("need 1..={}, got {}", TOY_PREDICATES.len(), params.num_predicates),
        });
    }
    if params.num_images == 0 || params.feature_dim == 0 || params.noise_sigma < 0.0 {
        return Err(Error::Config {
            field: "toy_images".into(),
            message: "images, feature_dim must be positive; sigma nonnegative".into(),
        });
    }

    let mut rng = substream(seed, "toygen");
    let categories: Vec<&str> = TOY_CATEGORIES[..params.num_categories].to_vec();
    let prototypes: Vec<Vec<f32>> = categories
        .iter()
        .map(|_| (0..params.feature_dim).map(|_| rng.gen_range(-1.0f32..1.0f32)).collect())
        .collect();
    let noise = Normal::new(0.0f64, params.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let mut records = Vec::with_capacity(params.num_images);
    for idx in 0..params.num_images {
        // Layouts with a third box only make sense once "left of" is active.
        let layout_count = if params.num_predicates >= 3 { 3 } else { 2 };
        let boxes = match idx % layout_count {
            0 => stack(&mut rng),
            1 if params.num_predicates >= 3 => row(&mut rng),
            1 => stack(&mut rng),
            _ => stack_with_side(&mut rng),
        };
        let n = boxes.0.len();
        let mut cat_ids: Vec<usize> = (0..categories.len()).collect();
        cat_ids.shuffle(&mut rng);
        cat_ids.truncate(n);

        let regions: Vec<Region> = boxes
            .0
            .iter()
            .zip(cat_ids.iter())
            .map(|(bbox, &c)| {
                let feature = prototypes[c]
                    .iter()
                    .map(|&p| {
                        let eps = if params.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                        p + eps
                    })
                    .collect();
                Region { bbox: *bbox, label: categories[c].to_string(), feature }
            })
            .collect();

        let triples = true_triples(&regions, params.num_predicates);
        let caption = caption_for(&regions, &triples);
        if caption.is_empty() {
            return Err(Error::CheckFailed(format!(
                "toy image {idx}: layout produced no triples"
            )));
        }
        records.push(ImageRecord {
            image_id: format!("toy{idx:04}"),
            width: CANVAS as u32,
            height: CANVAS as u32,
            regions,
            captions: vec![caption],
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    #[test]
    fn generation_is_seed_deterministic() {
        let params = ToyParams::default();
        let a = generate_toy_corpus(7, &params).unwrap();
        let b = generate_toy_corpus(7, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_corpus(&pa, &a).unwrap();
        write_corpus(&pb, &b).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        let c = generate_toy_corpus(8, &params).unwrap();
        let pc = dir.path().join("c.jsonl");
        write_corpus(&pc, &c).unwrap();
        assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pc).unwrap());
    }

    #[test]
    fn zero_sigma_features_equal_prototypes() {
        let params = ToyParams { noise_sigma: 0.0, num_images: 6, ..Default::default() };
        let corpus = generate_toy_corpus(3, &params).unwrap();
        // Same-label regions across images must carry identical features.
        let mut by_label: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        for img in &corpus {
            for r in &img.regions {
                let e = by_label.entry(r.label.clone()).or_insert_with(|| r.feature.clone());
                assert_eq!(*e, r.feature, "label {}", r.label);
            }
        }
    }

    #[test]
    fn captions_verbalize_derived_triples() {
        let params = ToyParams::default();
        let corpus = generate_toy_corpus(7, &params).unwrap();
        for img in &corpus {
            let triples = true_triples(&img.regions, params.num_predicates);
            assert!(!triples.is_empty(), "{}", img.image_id);
            let caption = &img.captions[0];
            for (i, p, j) in &triples {
                assert!(caption.contains(&img.regions[*i].label), "{}", img.image_id);
                assert!(caption.contains(&img.regions[*j].label), "{}", img.image_id);
                for tok in p.split_whitespace() {
                    assert!(caption.contains(&tok.to_string()), "{}", img.image_id);
                }
            }
        }
    }

    #[test]
    fn stack_layout_produces_on_and_under() {
        let params = ToyParams::default();
        let corpus = generate_toy_corpus(7, &params).unwrap();
        let preds: std::collections::BTreeSet<&str> = corpus
            .iter()
            .flat_map(|img| true_triples(&img.regions, 3))
            .map(|(_, p, _)| p)
            .collect();
        assert!(preds.contains("on") && preds.contains("under") && preds.contains("left of"));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate_toy_corpus(1, &ToyParams { num_categories: 1, ..Default::default() }).is_err());
        assert!(generate_toy_corpus(1, &ToyParams { num_predicates: 0, ..Default::default() }).is_err());
    }
}
