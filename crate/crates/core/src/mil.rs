//! Weakly supervised multi-instance predicate detection over region pairs.
//!
//! Captions supply image-level predicates; which of the n(n-1) ordered
//! region pairs realizes a predicate is unknown. A bag of candidate pairs is
//! scored with noisy-OR over per-pair probabilities and trained with a
//! bag-level cross-entropy loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{ImageRecord, Region};
use crate::error::{Error, Result};
use crate::nn::mlp;
use crate::params::{add_linear, Binder, Parameters};
use crate::rng::substream;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::vocab::{extract_image_triples, Triple, Vocabularies};

pub const GEOMETRY_DIM: usize = 14;
/// Clamp bound keeping every log term in the loss finite.
pub const PROB_EPS: f64 = 1e-7;

/// Geometry block of a pair feature: normalized corners of both boxes and of
/// their union, IoU, and log area ratio.
pub fn pair_geometry(a: &Region, b: &Region, width: f32, height: f32) -> [f64; GEOMETRY_DIM] {
    let (w, h) = (width as f64, height as f64);
    let na = [a.bbox[0] as f64 / w, a.bbox[1] as f64 / h, a.bbox[2] as f64 / w, a.bbox[3] as f64 / h];
    let nb = [b.bbox[0] as f64 / w, b.bbox[1] as f64 / h, b.bbox[2] as f64 / w, b.bbox[3] as f64 / h];
    let union = [na[0].min(nb[0]), na[1].min(nb[1]), na[2].max(nb[2]), na[3].max(nb[3])];
    let ix = (na[2].min(nb[2]) - na[0].max(nb[0])).max(0.0);
    let iy = (na[3].min(nb[3]) - na[1].max(nb[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (na[2] - na[0]) * (na[3] - na[1]);
    let area_b = (nb[2] - nb[0]) * (nb[3] - nb[1]);
    let iou = inter / (area_a + area_b - inter);
    let log_ratio = (area_a / area_b).ln();
    [
        na[0], na[1], na[2], na[3],
        nb[0], nb[1], nb[2], nb[3],
        union[0], union[1], union[2], union[3],
        iou, log_ratio,
    ]
}

/// Full pair feature: concat(feature_i, feature_j, geometry).
pub fn pair_feature<F: Scalar>(a: &Region, b: &Region, width: f32, height: f32) -> Vec<F> {
    let mut out = Vec::with_capacity(a.feature.len() + b.feature.len() + GEOMETRY_DIM);
    out.extend(a.feature.iter().map(|&v| F::from_f64(v as f64)));
    out.extend(b.feature.iter().map(|&v| F::from_f64(v as f64)));
    out.extend(pair_geometry(a, b, width, height).iter().map(|&v| F::from_f64(v)));
    out
}

/// All ordered region pairs of an image, in enumeration order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n.max(1) - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Row-major pair feature matrix `[n(n-1), 2*feature_dim + 14]`.
pub fn pair_feature_matrix<F: Scalar>(image: &ImageRecord) -> (Vec<F>, usize) {
    let pairs = ordered_pairs(image.regions.len());
    let mut data = Vec::new();
    for &(i, j) in &pairs {
        data.extend(pair_feature::<F>(
            &image.regions[i],
            &image.regions[j],
            image.width as f32,
            image.height as f32,
        ));
    }
    (data, pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Serialize)]
pub struct Bag {
    pub predicate_index: usize,
    /// Indices into the image's ordered-pair enumeration.
    pub members: Vec<usize>,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredicateBags {
    pub predicate_index: usize,
    pub positive: Option<Bag>,
    pub negative: Option<Bag>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageBags {
    pub pairs: Vec<(usize, usize)>,
    pub bags: Vec<PredicateBags>,
    pub dropped_triples: usize,
}

/// Build per-predicate positive/negative bags for one image.
///
/// A predicate named by an extracted triple gets a positive bag of every
/// ordered pair whose region labels match the triple's categories, and a
/// negative bag of all remaining pairs (omitted when empty). Predicates
/// absent from the captions get the full pair set as their negative bag.
/// Triples matching no region pair are dropped and counted.
pub fn build_bags(image: &ImageRecord, triples: &[Triple], vocab: &Vocabularies) -> Result<ImageBags> {
    let n = image.regions.len();
    if n < 2 {
        return Err(Error::CheckFailed(format!(
            "build_bags: image {} has {n} region(s), need at least 2",
            image.image_id
        )));
    }
    let pairs = ordered_pairs(n);
    let categories: Vec<String> = image
        .regions
        .iter()
        .map(|r| vocab.category_of(&r.label).unwrap_or(&r.label).to_string())
        .collect();

    let mut dropped = 0usize;
    let mut bags = Vec::with_capacity(vocab.num_predicates());
    for (j, predicate) in vocab.predicates().iter().enumerate() {
        let mut members: Vec<usize> = Vec::new();
        for t in triples.iter().filter(|t| &t.predicate == predicate) {
            let mut hit = false;
            for (idx, &(u, v)) in pairs.iter().enumerate() {
                if categories[u] == t.subject && categories[v] == t.object {
                    if !members.contains(&idx) {
                        members.push(idx);
                    }
                    hit = true;
                }
            }
            if !hit {
                dropped += 1;
            }
        }
        members.sort_unstable();
        let entry = if members.is_empty() {
            PredicateBags {
                predicate_index: j,
                positive: None,
                negative: Some(Bag {
                    predicate_index: j,
                    members: (0..pairs.len()).collect(),
                    polarity: Polarity::Negative,
                }),
            }
        } else {
            let complement: Vec<usize> = (0..pairs.len()).filter(|i| !members.contains(i)).collect();
            PredicateBags {
                predicate_index: j,
                positive: Some(Bag { predicate_index: j, members, polarity: Polarity::Positive }),
                negative: if complement.is_empty() {
                    None
                } else {
                    Some(Bag { predicate_index: j, members: complement, polarity: Polarity::Negative })
                },
            }
        };
        bags.push(entry);
    }
    Ok(ImageBags { pairs, bags, dropped_triples: dropped })
}

/// Probability that at least one instance fires: 1 - prod(1 - p), computed
/// in log space.
pub fn noisy_or(instance_probs: &[f64]) -> Result<f64> {
    if instance_probs.is_empty() {
        return Err(Error::CheckFailed("noisy_or: empty instance list".into()));
    }
    if let Some(&bad) = instance_probs.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::CheckFailed(format!("noisy_or: probability {bad} outside [0, 1]")));
    }
    let log_none: f64 = instance_probs.iter().map(|&p| (-p).ln_1p()).sum();
    Ok(-log_none.exp_m1())
}

/// Per-pair predicate detector: feed-forward with one ReLU hidden layer and
/// independent sigmoid probabilities per predicate.
#[derive(Debug, Clone)]
pub struct MilModel<F: Scalar> {
    pub params: Parameters<F>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_predicates: usize,
}

impl<F: Scalar> MilModel<F> {
    pub fn new(feature_dim: usize, hidden_dim: usize, num_predicates: usize, rng: &mut impl Rng) -> Self {
        let input_dim = 2 * feature_dim + GEOMETRY_DIM;
        let mut params = Parameters::new();
        add_linear(&mut params, rng, "mil/hidden", input_dim, hidden_dim);
        add_linear(&mut params, rng, "mil/out", hidden_dim, num_predicates);
        MilModel { params, input_dim, hidden_dim, num_predicates }
    }

    pub fn from_params(params: Parameters<F>) -> Result<Self> {
        if !params.contains("mil/hidden/w") || !params.contains("mil/out/w") {
            return Err(Error::Checkpoint("not a detector checkpoint (no mil/ parameters)".into()));
        }
        let hidden_shape = params.get("mil/hidden/w").shape.clone();
        let out_shape = params.get("mil/out/w").shape.clone();
        Ok(MilModel {
            input_dim: hidden_shape[0],
            hidden_dim: hidden_shape[1],
            num_predicates: out_shape[1],
            params,
        })
    }

    /// Probability matrix for a batch of pair features `[n, input_dim]`.
    pub fn scores<'t>(&self, binder: &Binder<'t, F>, features: Tensor<'t, F>) -> Result<Tensor<'t, F>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape {
                op: "predicate_scores",
                details: format!("features {shape:?}, model expects [*, {}]", self.input_dim),
            });
        }
        Ok(mlp(binder, "mil", features).sigmoid())
    }

    /// Per-predicate probabilities for a single pair feature, on a throwaway
    /// frozen tape.
    pub fn predicate_probs(&self, feature: &[F]) -> Result<Vec<F>> {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.params);
        let x = tape.leaf(feature.to_vec(), &[1, feature.len()]);
        Ok(self.scores(&binder, x)?.to_vec())
    }
}

/// log(p_bag) and log(1 - p_bag) for one bag, differentiable through the
/// instance probabilities. `log_one_minus_probs` is the flattened
/// `[n_pairs, M]` matrix of log(1 - p) terms.
fn bag_log_terms<'t, F: Scalar>(
    log_one_minus_probs: Tensor<'t, F>,
    members: &[usize],
    predicate_index: usize,
    num_predicates: usize,
) -> (Tensor<'t, F>, Tensor<'t, F>) {
    let idx: Vec<usize> = members.iter().map(|&m| m * num_predicates + predicate_index).collect();
    let log_none = log_one_minus_probs.gather_elements(&idx).sum();
    let eps = F::from_f64(PROB_EPS);
    let log_pos = log_none.exp().one_minus().clamp(eps, F::one()).log();
    (log_pos, log_none)
}

/// Bag-level cross-entropy over all predicates of one image.
pub fn mil_loss<'t, F: Scalar>(
    tape: &'t Tape<F>,
    binder: &Binder<'t, F>,
    model: &MilModel<F>,
    image: &ImageRecord,
    bags: &ImageBags,
) -> Result<Tensor<'t, F>> {
    if model.num_predicates == 0 {
        return Err(Error::CheckFailed("mil_loss: empty predicate lexicon".into()));
    }
    let (features, n_pairs) = pair_feature_matrix::<F>(image);
    if n_pairs == 0 {
        return Err(Error::CheckFailed(format!("mil_loss: image {} has no region pairs", image.image_id)));
    }
    let x = tape.leaf(features, &[n_pairs, model.input_dim]);
    let eps = F::from_f64(PROB_EPS);
    let probs = model.scores(binder, x)?.clamp(eps, F::one() - eps);
    let log_one_minus = probs.one_minus().log();

    let mut total: Option<Tensor<'t, F>> = None;
    let mut add_term = |t: Tensor<'t, F>| {
        total = Some(match total {
            Some(acc) => acc.add(t),
            None => t,
        });
    };
    for entry in &bags.bags {
        match (&entry.positive, &entry.negative) {
            (Some(pos), neg) => {
                let (log_pos, _) =
                    bag_log_terms(log_one_minus, &pos.members, entry.predicate_index, model.num_predicates);
                add_term(log_pos);
                if let Some(neg) = neg {
                    let (_, log_none) = bag_log_terms(
                        log_one_minus,
                        &neg.members,
                        entry.predicate_index,
                        model.num_predicates,
                    );
                    add_term(log_none);
                }
            }
            (None, Some(neg)) => {
                let (_, log_none) = bag_log_terms(
                    log_one_minus,
                    &neg.members,
                    entry.predicate_index,
                    model.num_predicates,
                );
                add_term(log_none);
            }
            (None, None) => unreachable!("predicate with neither bag"),
        }
    }
    Ok(total.expect("at least one predicate").scale(-F::one()))
}

#[derive(Debug, Clone)]
pub struct MilTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        MilTrainConfig { epochs: 30, lr: 1e-2, batch_size: 4, hidden_dim: 64, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MilTrainLog {
    /// Mean per-image loss for each epoch.
    pub epoch_loss: Vec<f64>,
    pub dropped_triples: usize,
}

/// Train the detector on extracted caption triples with Adam.
pub fn train_mil(
    corpus: &[ImageRecord],
    vocab: &Vocabularies,
    cfg: &MilTrainConfig,
) -> Result<(MilModel<f32>, MilTrainLog)> {
    if corpus.is_empty() {
        return Err(Error::CheckFailed("train_mil: empty corpus".into()));
    }
    let feature_dim = crate::corpus::feature_dim(corpus);
    let mut rng = substream(cfg.seed, "mil");
    let mut model = MilModel::<f32>::new(feature_dim, cfg.hidden_dim, vocab.num_predicates(), &mut rng);

    let mut all_bags = Vec::with_capacity(corpus.len());
    let mut dropped = 0usize;
    for image in corpus {
        let triples = extract_image_triples(image, vocab);
        let bags = build_bags(image, &triples, vocab)?;
        dropped += bags.dropped_triples;
        all_bags.push(bags);
    }

    let adam = crate::params::AdamConfig::with_lr(cfg.lr);
    let mut log = MilTrainLog { epoch_loss: Vec::with_capacity(cfg.epochs), dropped_triples: dropped };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &model.params);
            let mut batch_loss: Option<Tensor<'_, f32>> = None;
            for &i in batch {
                let loss = mil_loss(&tape, &binder, &model, &corpus[i], &all_bags[i])?;
                epoch_loss += loss.value() as f64;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(loss),
                    None => loss,
                });
            }
            let batch_loss = batch_loss.expect("non-empty batch");
            tape.backward(batch_loss)?;
            binder.accumulate_grads(&mut model.params)?;
            model.params.adam_step(&adam);
        }
        log.epoch_loss.push(epoch_loss / corpus.len() as f64);
    }
    Ok((model, log))
}

/// Bag-level ranking quality: every bag in the corpus is scored with
/// noisy-OR and labeled by its polarity; returns average precision of the
/// ranking.
pub fn bag_average_precision(
    model: &MilModel<f32>,
    corpus: &[ImageRecord],
    vocab: &Vocabularies,
) -> Result<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for image in corpus {
        let triples = extract_image_triples(image, vocab);
        let bags = build_bags(image, &triples, vocab)?;
        let (features, n_pairs) = pair_feature_matrix::<f32>(image);
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &model.params);
        let x = tape.leaf(features, &[n_pairs, model.input_dim]);
        let probs = model.scores(&binder, x)?.to_vec();
        let bag_prob = |bag: &Bag| -> Result<f64> {
            let ps: Vec<f64> = bag
                .members
                .iter()
                .map(|&m| probs[m * model.num_predicates + bag.predicate_index] as f64)
                .collect();
            noisy_or(&ps)
        };
        for entry in &bags.bags {
            if let Some(pos) = &entry.positive {
                scored.push((bag_prob(pos)?, true));
            }
            if let Some(neg) = &entry.negative {
                scored.push((bag_prob(neg)?, false));
            }
        }
    }
    let positives = scored.iter().filter(|(_, l)| *l).count();
    if positives == 0 {
        return Err(Error::CheckFailed("bag_average_precision: no positive bags".into()));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (rank, (_, label)) in scored.iter().enumerate() {
        if *label {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Structured detector report: drop counts and per-predicate bag statistics.
#[derive(Debug, Clone, Serialize)]
pub struct MilDiagnostics {
    pub dropped_triples: usize,
    pub per_predicate: Vec<PredicateStats>,
    pub bag_average_precision: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredicateStats {
    pub predicate: String,
    pub positive_bags: usize,
    pub negative_bags: usize,
    pub mean_positive_size: f64,
}

pub fn mil_diagnostics(
    model: &MilModel<f32>,
    corpus: &[ImageRecord],
    vocab: &Vocabularies,
) -> Result<MilDiagnostics> {
    let mut dropped = 0usize;
    let mut pos_counts = vec![0usize; vocab.num_predicates()];
    let mut neg_counts = vec![0usize; vocab.num_predicates()];
    let mut pos_sizes = vec![0usize; vocab.num_predicates()];
    for image in corpus {
        let triples = extract_image_triples(image, vocab);
        let bags = build_bags(image, &triples, vocab)?;
        dropped += bags.dropped_triples;
        for entry in &bags.bags {
            if let Some(p) = &entry.positive {
                pos_counts[entry.predicate_index] += 1;
                pos_sizes[entry.predicate_index] += p.members.len();
            }
            if entry.negative.is_some() {
                neg_counts[entry.predicate_index] += 1;
            }
        }
    }
    let per_predicate = vocab
        .predicates()
        .iter()
        .enumerate()
        .map(|(j, p)| PredicateStats {
            predicate: p.clone(),
            positive_bags: pos_counts[j],
            negative_bags: neg_counts[j],
            mean_positive_size: if pos_counts[j] > 0 {
                pos_sizes[j] as f64 / pos_counts[j] as f64
            } else {
                0.0
            },
        })
        .collect();
    Ok(MilDiagnostics {
        dropped_triples: dropped,
        per_predicate,
        bag_average_precision: bag_average_precision(model, corpus, vocab)?,
    })
}
