//! Visual relationship graph: construction from the trained pair detector,
//! and context-aware node encoding.
//!
//! Object nodes are the image regions; a predicate node `(i, r, j)` carries
//! two directed edges `o_i -> r` and `r -> o_j`. Node features fuse a
//! category/predicate text embedding with the region's visual feature, then
//! one graph-convolution pass mixes each object with its incident predicate
//! nodes.

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::mil::{ordered_pairs, pair_feature_matrix, MilModel};
use crate::nn::ff_relu;
use crate::params::Binder;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::vocab::Vocabularies;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectNode {
    pub region_index: usize,
    pub label: String,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateNode {
    /// Object node index of the head (edge o_head -> r).
    pub head: usize,
    pub predicate_index: usize,
    pub predicate: String,
    /// Object node index of the tail (edge r -> o_tail).
    pub tail: usize,
    pub probability: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgvrgGraph {
    pub image_id: String,
    pub objects: Vec<ObjectNode>,
    pub predicates: Vec<PredicateNode>,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphConfig {
    /// Keep a pair only when its best predicate probability reaches this.
    pub threshold: f64,
    /// Keep at most this many predicate nodes per image.
    pub edge_cap: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { threshold: 0.5, edge_cap: 20 }
    }
}

/// Graph construction given per-pair predicate probabilities (row-major
/// `[n_pairs, M]`): argmax predicate per ordered pair, threshold, then keep
/// the highest-probability pairs up to the cap (ties by pair index).
pub fn graph_from_pair_probs(
    image: &ImageRecord,
    vocab: &Vocabularies,
    probs: &[f32],
    num_predicates: usize,
    cfg: &GraphConfig,
) -> CgvrgGraph {
    let n = image.regions.len();
    let pairs = ordered_pairs(n);
    let mut candidates: Vec<(usize, usize, f32)> = Vec::new(); // (pair index, predicate, prob)
    for (pi, _) in pairs.iter().enumerate() {
        let row = &probs[pi * num_predicates..(pi + 1) * num_predicates];
        let mut best = 0usize;
        for j in 1..num_predicates {
            if row[j] > row[best] {
                best = j;
            }
        }
        if (row[best] as f64) >= cfg.threshold {
            candidates.push((pi, best, row[best]));
        }
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    candidates.truncate(cfg.edge_cap);
    candidates.sort_by_key(|c| c.0);

    let objects = image
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| ObjectNode {
            region_index: i,
            label: r.label.clone(),
            category: vocab.category_of(&r.label).unwrap_or(&r.label).to_string(),
        })
        .collect();
    let predicates = candidates
        .into_iter()
        .map(|(pi, j, p)| PredicateNode {
            head: pairs[pi].0,
            predicate_index: j,
            predicate: vocab.predicates()[j].clone(),
            tail: pairs[pi].1,
            probability: p,
        })
        .collect();
    CgvrgGraph { image_id: image.image_id.clone(), objects, predicates }
}

/// Score every ordered region pair with the trained detector and build the
/// graph. Every region becomes an object node even when no edge survives.
pub fn build_graph(
    image: &ImageRecord,
    model: &MilModel<f32>,
    vocab: &Vocabularies,
    cfg: &GraphConfig,
) -> Result<CgvrgGraph> {
    if image.regions.len() < 2 {
        return Ok(graph_from_pair_probs(image, vocab, &[], model.num_predicates, cfg));
    }
    let (features, n_pairs) = pair_feature_matrix::<f32>(image);
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &model.params);
    let x = tape.leaf(features, &[n_pairs, model.input_dim]);
    let probs = model.scores(&binder, x)?.to_vec();
    Ok(graph_from_pair_probs(image, vocab, &probs, model.num_predicates, cfg))
}

pub fn write_graphs(path: &std::path::Path, graphs: &[CgvrgGraph]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::fs::File::create(path)?;
    for g in graphs {
        serde_json::to_writer(&mut out, g)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_graphs(path: &std::path::Path) -> Result<Vec<CgvrgGraph>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingPrerequisite(format!("graphs {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Fused node features g (text embedding + visual feature through one ReLU
/// layer each).
pub struct FusedGraph<'t, F: Scalar> {
    /// `[n, Dg]`
    pub g_objects: Tensor<'t, F>,
    /// `[m, Dg]`, absent when the graph has no predicate nodes.
    pub g_predicates: Option<Tensor<'t, F>>,
    /// Raw predicate text embeddings `[m, Eg]` (decoder initialization).
    pub predicate_embeds: Option<Tensor<'t, F>>,
}

/// Context-aware node features x plus the pooled graph feature.
pub struct EncodedGraph<'t, F: Scalar> {
    /// `[n, Dg]`
    pub x_objects: Tensor<'t, F>,
    /// `[m, Dg]`
    pub x_predicates: Option<Tensor<'t, F>>,
    /// Mean over all object and predicate node features, `[1, Dg]`.
    pub pooled: Tensor<'t, F>,
    /// Raw predicate text embeddings `[m, Eg]`.
    pub predicate_embeds: Option<Tensor<'t, F>>,
}

/// g_o = relu(W [text(label); visual]), g_r = relu(W text(predicate)).
pub fn fuse_node_features<'t, F: Scalar>(
    tape: &'t Tape<F>,
    binder: &Binder<'t, F>,
    vocab: &Vocabularies,
    image: &ImageRecord,
    graph: &CgvrgGraph,
) -> Result<FusedGraph<'t, F>> {
    let n = graph.objects.len();
    let cat_ids: Vec<usize> = graph
        .objects
        .iter()
        .map(|o| {
            vocab.category_id(&o.category).ok_or_else(|| {
                Error::Vocab(format!("label {:?} missing from the category embedding table", o.label))
            })
        })
        .collect::<Result<_>>()?;

    let cat_embed = binder.get("enc/cat_embed").gather_rows(&cat_ids);
    let dv = image.regions[0].feature.len();
    let mut visual = Vec::with_capacity(n * dv);
    for o in &graph.objects {
        visual.extend(image.regions[o.region_index].feature.iter().map(|&v| F::from_f64(v as f64)));
    }
    let visual = tape.leaf(visual, &[n, dv]);
    let g_objects = ff_relu(binder, "enc/phi_o", tape.concat(&[cat_embed, visual]));

    let (g_predicates, predicate_embeds) = if graph.predicates.is_empty() {
        (None, None)
    } else {
        let pred_ids: Vec<usize> = graph.predicates.iter().map(|p| p.predicate_index).collect();
        let embeds = binder.get("enc/pred_embed").gather_rows(&pred_ids);
        (Some(ff_relu(binder, "enc/phi_r", embeds)), Some(embeds))
    };
    Ok(FusedGraph { g_objects, g_predicates, predicate_embeds })
}

/// One graph-convolution pass:
/// x_r = f_r([g_head; g_tail; g_r]);
/// x_o = mean over incident edges of f_out([g_o; g_r]) / f_in([g_o; g_r]),
/// falling back to g_o for isolated objects.
pub fn encode_fused<'t, F: Scalar>(
    tape: &'t Tape<F>,
    binder: &Binder<'t, F>,
    graph: &CgvrgGraph,
    fused: &FusedGraph<'t, F>,
) -> Result<EncodedGraph<'t, F>> {
    let n = graph.objects.len();
    let m = graph.predicates.len();

    let (x_predicates, x_objects) = if m == 0 {
        (None, fused.g_objects)
    } else {
        let g_pred = fused.g_predicates.expect("fused predicate features");
        let heads: Vec<usize> = graph.predicates.iter().map(|p| p.head).collect();
        let tails: Vec<usize> = graph.predicates.iter().map(|p| p.tail).collect();
        let g_heads = fused.g_objects.gather_rows(&heads);
        let g_tails = fused.g_objects.gather_rows(&tails);
        let x_pred = ff_relu(binder, "enc/f_r", tape.concat(&[g_heads, g_tails, g_pred]));

        // Per-edge messages, then aggregation by constant indicator matrices
        // scaled by 1 / N_i; isolated objects pass g_o through unchanged.
        let out_msgs = ff_relu(binder, "enc/f_out", tape.concat(&[g_heads, g_pred]));
        let in_msgs = ff_relu(binder, "enc/f_in", tape.concat(&[g_tails, g_pred]));

        let mut degree = vec![0usize; n];
        for p in &graph.predicates {
            degree[p.head] += 1;
            degree[p.tail] += 1;
        }
        let mut w_out = vec![F::zero(); n * m];
        let mut w_in = vec![F::zero(); n * m];
        let mut iso = vec![F::zero(); n * n];
        for (e, p) in graph.predicates.iter().enumerate() {
            w_out[p.head * m + e] = F::from_f64(1.0 / degree[p.head] as f64);
            w_in[p.tail * m + e] = F::from_f64(1.0 / degree[p.tail] as f64);
        }
        for (i, &d) in degree.iter().enumerate() {
            if d == 0 {
                iso[i * n + i] = F::one();
            }
        }
        let w_out = tape.leaf(w_out, &[n, m]);
        let w_in = tape.leaf(w_in, &[n, m]);
        let iso = tape.leaf(iso, &[n, n]);
        let x_obj = w_out
            .matmul(out_msgs)
            .add(w_in.matmul(in_msgs))
            .add(iso.matmul(fused.g_objects));
        (Some(x_pred), x_obj)
    };

    let total = (n + m) as f64;
    let mut pooled = x_objects.mean_rows().scale(F::from_f64(n as f64 / total));
    if let Some(xp) = x_predicates {
        pooled = pooled.add(xp.mean_rows().scale(F::from_f64(m as f64 / total)));
    }
    let dg = x_objects.shape()[1];
    Ok(EncodedGraph {
        x_objects,
        x_predicates,
        pooled: pooled.reshape(&[1, dg]),
        predicate_embeds: fused.predicate_embeds,
    })
}

/// Fuse and encode in one step.
pub fn encode_graph<'t, F: Scalar>(
    tape: &'t Tape<F>,
    binder: &Binder<'t, F>,
    vocab: &Vocabularies,
    image: &ImageRecord,
    graph: &CgvrgGraph,
) -> Result<EncodedGraph<'t, F>> {
    let fused = fuse_node_features(tape, binder, vocab, image, graph)?;
    encode_fused(tape, binder, graph, &fused)
}
