//! Two-layer LSTM caption generator with soft attention over graph nodes and
//! joint word/tag prediction.
//!
//! The bottom LSTM aligns the language state with the graph; its hidden state
//! queries separate attentions over object and predicate node features; the
//! top LSTM decodes words. Two output blocks are supported: independent word
//! and tag heads (MT-1), or tag-probability-weighted mixing of the hidden
//! state with the attended features before word prediction (MT-2).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::graph::{encode_graph, CgvrgGraph, EncodedGraph};
use crate::nn::{linear, lstm_cell, mlp};
use crate::params::{add_embedding, add_linear, add_lstm, xavier_uniform, Binder, Parameters};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::vocab::{Tag, Vocabularies, BOS_ID, EOS_ID, TAG_COUNT};

/// Multi-task output block selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MtBlock {
    /// Independent word and tag heads reading the top hidden state.
    #[serde(rename = "mt1")]
    Mt1,
    /// Tag probabilities mix the hidden state with attended features before
    /// the word head; the tag head still reads the raw hidden state.
    #[serde(rename = "mt2")]
    Mt2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionerDims {
    pub word_embed: usize,
    pub graph_text_embed: usize,
    pub bottom_hidden: usize,
    pub top_hidden: usize,
    pub graph_dim: usize,
    pub attention_dim: usize,
    pub head_hidden: usize,
}

impl Default for CaptionerDims {
    fn default() -> Self {
        CaptionerDims {
            word_embed: 64,
            graph_text_embed: 32,
            bottom_hidden: 32,
            top_hidden: 64,
            graph_dim: 64,
            attention_dim: 32,
            head_hidden: 64,
        }
    }
}

/// Graph encoder plus decoder parameters and configuration.
#[derive(Debug, Clone)]
pub struct Captioner<F: Scalar> {
    pub params: Parameters<F>,
    pub dims: CaptionerDims,
    pub vocab_size: usize,
    pub block: MtBlock,
}

fn add_attention<F: Scalar>(
    params: &mut Parameters<F>,
    rng: &mut impl Rng,
    prefix: &str,
    query_dim: usize,
    node_dim: usize,
    attn_dim: usize,
) {
    let wq = xavier_uniform(rng, query_dim, attn_dim, query_dim * attn_dim);
    let wx = xavier_uniform(rng, node_dim, attn_dim, node_dim * attn_dim);
    let v = xavier_uniform(rng, attn_dim, 1, attn_dim);
    params.insert(&format!("{prefix}/wq"), &[query_dim, attn_dim], wq);
    params.insert(&format!("{prefix}/wx"), &[node_dim, attn_dim], wx);
    params.insert(&format!("{prefix}/v"), &[attn_dim, 1], v);
}

impl<F: Scalar> Captioner<F> {
    pub fn new(
        dims: CaptionerDims,
        vocab_size: usize,
        num_categories: usize,
        num_predicates: usize,
        visual_dim: usize,
        block: MtBlock,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.top_hidden != dims.graph_dim {
            return Err(Error::Config {
                field: "top_hidden".into(),
                message: format!(
                    "top LSTM dimension {} must equal graph feature dimension {}",
                    dims.top_hidden, dims.graph_dim
                ),
            });
        }
        let (e, eg, db, dt, dg, a, hh) = (
            dims.word_embed,
            dims.graph_text_embed,
            dims.bottom_hidden,
            dims.top_hidden,
            dims.graph_dim,
            dims.attention_dim,
            dims.head_hidden,
        );
        let mut params = Parameters::new();
        add_embedding(&mut params, rng, "enc/cat_embed", num_categories, eg);
        add_embedding(&mut params, rng, "enc/pred_embed", num_predicates.max(1), eg);
        add_linear(&mut params, rng, "enc/phi_o", eg + visual_dim, dg);
        add_linear(&mut params, rng, "enc/phi_r", eg, dg);
        add_linear(&mut params, rng, "enc/f_r", 3 * dg, dg);
        add_linear(&mut params, rng, "enc/f_in", 2 * dg, dg);
        add_linear(&mut params, rng, "enc/f_out", 2 * dg, dg);
        add_embedding(&mut params, rng, "dec/word_embed", vocab_size, e);
        add_lstm(&mut params, rng, "dec/lstm_bottom", dt + dg + e, db);
        add_attention(&mut params, rng, "dec/att_obj", db, dg, a);
        add_attention(&mut params, rng, "dec/att_pred", db, dg, a);
        add_lstm(&mut params, rng, "dec/lstm_top", db + 2 * dg, dt);
        add_linear(&mut params, rng, "dec/h2_init", eg, dt);
        add_linear(&mut params, rng, "dec/f_y/hidden", dt, hh);
        add_linear(&mut params, rng, "dec/f_y/out", hh, vocab_size);
        add_linear(&mut params, rng, "dec/f_z/hidden", dt, hh);
        add_linear(&mut params, rng, "dec/f_z/out", hh, TAG_COUNT);
        Ok(Captioner { params, dims, vocab_size, block })
    }

    /// Rebuild from checkpointed parameters; dimensions come from the stored
    /// shapes, the block choice from configuration.
    pub fn from_params(params: Parameters<F>, block: MtBlock) -> Result<Self> {
        for required in ["dec/word_embed", "dec/lstm_top/w_hh", "enc/phi_r/w"] {
            if !params.contains(required) {
                return Err(Error::Checkpoint(format!(
                    "not a captioner checkpoint: missing {required}"
                )));
            }
        }
        let dims = CaptionerDims {
            word_embed: params.get("dec/word_embed").shape[1],
            graph_text_embed: params.get("enc/cat_embed").shape[1],
            bottom_hidden: params.get("dec/lstm_bottom/w_hh").shape[0],
            top_hidden: params.get("dec/lstm_top/w_hh").shape[0],
            graph_dim: params.get("enc/phi_r/w").shape[1],
            attention_dim: params.get("dec/att_obj/wq").shape[1],
            head_hidden: params.get("dec/f_y/hidden/w").shape[1],
        };
        let vocab_size = params.get("dec/word_embed").shape[0];
        Ok(Captioner { params, dims, vocab_size, block })
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        vocab: &Vocabularies,
        image: &ImageRecord,
        graph: &CgvrgGraph,
    ) -> Result<EncodedGraph<'t, F>> {
        encode_graph(tape, binder, vocab, image, graph)
    }

    /// Fresh decoder state: the top hidden state starts from the mean
    /// projected predicate embedding (zero when the graph has no predicate
    /// nodes), everything else from zeros.
    pub fn init_state<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        enc: &EncodedGraph<'t, F>,
    ) -> DecoderState<'t, F> {
        let (db, dt) = (self.dims.bottom_hidden, self.dims.top_hidden);
        let h2 = match enc.predicate_embeds {
            Some(embeds) => {
                linear(binder, "dec/h2_init", embeds).mean_rows().reshape(&[1, dt])
            }
            None => tape.zeros(&[1, dt]),
        };
        DecoderState {
            h1: tape.zeros(&[1, db]),
            c1: tape.zeros(&[1, db]),
            h2,
            c2: tape.zeros(&[1, dt]),
        }
    }

    /// One decoding step consuming the previous word.
    pub fn step<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        state: &DecoderState<'t, F>,
        prev_word: usize,
        enc: &EncodedGraph<'t, F>,
    ) -> Result<StepOutput<'t, F>> {
        self.step_inner(tape, binder, state, prev_word, enc, None)
    }

    /// Step with the tag distribution replaced by a fixed vector before the
    /// MT-2 mixing (verification hook).
    pub fn step_with_tag_override<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        state: &DecoderState<'t, F>,
        prev_word: usize,
        enc: &EncodedGraph<'t, F>,
        tag_override: [F; TAG_COUNT],
    ) -> Result<StepOutput<'t, F>> {
        self.step_inner(tape, binder, state, prev_word, enc, Some(tag_override))
    }

    fn step_inner<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        state: &DecoderState<'t, F>,
        prev_word: usize,
        enc: &EncodedGraph<'t, F>,
        tag_override: Option<[F; TAG_COUNT]>,
    ) -> Result<StepOutput<'t, F>> {
        if prev_word >= self.vocab_size {
            return Err(Error::Vocab(format!(
                "word index {prev_word} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let dg = self.dims.graph_dim;
        let e_w = binder.get("dec/word_embed").gather_rows(&[prev_word]);
        let bottom_in = tape.concat(&[state.h2, enc.pooled, e_w]);
        let (h1, c1) = lstm_cell(binder, "dec/lstm_bottom", bottom_in, state.h1, state.c1);

        let (xhat_o, att_objects) = attend(binder, "dec/att_obj", h1, Some(enc.x_objects), dg)?;
        let (xhat_r, att_predicates) = attend(binder, "dec/att_pred", h1, enc.x_predicates, dg)?;

        let top_in = tape.concat(&[h1, xhat_o, xhat_r]);
        let (h2, c2) = lstm_cell(binder, "dec/lstm_top", top_in, state.h2, state.c2);

        let tag_dist = mlp(binder, "dec/f_z", h2).reshape(&[TAG_COUNT]).softmax(0);
        let word_dist = match self.block {
            MtBlock::Mt1 => mlp(binder, "dec/f_y", h2).reshape(&[self.vocab_size]).softmax(0),
            MtBlock::Mt2 => {
                let mixing = match tag_override {
                    Some(probs) => tape.leaf(probs.to_vec(), &[TAG_COUNT]),
                    None => tag_dist,
                };
                let p_na = mixing.gather_elements(&[Tag::None.index()]);
                let p_r = mixing.gather_elements(&[Tag::Predicate.index()]);
                let p_o = mixing.gather_elements(&[Tag::Object.index()]);
                let mixed = h2.mul(p_na).add(xhat_r.mul(p_r)).add(xhat_o.mul(p_o));
                mlp(binder, "dec/f_y", mixed).reshape(&[self.vocab_size]).softmax(0)
            }
        };
        Ok(StepOutput {
            state: DecoderState { h1, c1, h2, c2 },
            word_dist,
            tag_dist,
            att_objects,
            att_predicates,
        })
    }

    /// Teacher-forced loss over one caption:
    /// -sum_t [ log p(word_t) + gamma * log p(tag_t) ], with BOS feeding the
    /// first step and EOS (tag `none`) appended to the targets.
    #[allow(clippy::too_many_arguments)]
    pub fn xe_loss<'t>(
        &self,
        tape: &'t Tape<F>,
        binder: &Binder<'t, F>,
        vocab: &Vocabularies,
        enc: &EncodedGraph<'t, F>,
        tokens: &[String],
        tags: &[Tag],
        gamma: f64,
    ) -> Result<Tensor<'t, F>> {
        if tokens.len() != tags.len() {
            return Err(Error::CheckFailed(format!(
                "xe_loss: {} tokens vs {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        let mut targets: Vec<usize> = tokens.iter().map(|t| vocab.word_id(t)).collect();
        targets.push(EOS_ID);
        let mut target_tags: Vec<Tag> = tags.to_vec();
        target_tags.push(Tag::None);

        let gamma_f = F::from_f64(gamma);
        let floor = F::from_f64(1e-12);
        let mut state = self.init_state(tape, binder, enc);
        let mut prev = BOS_ID;
        let mut loss: Option<Tensor<'t, F>> = None;
        for (&target, tag) in targets.iter().zip(target_tags.iter()) {
            let out = self.step(tape, binder, &state, prev, enc)?;
            let lw = out.word_dist.gather_elements(&[target]).clamp(floor, F::one()).log().sum();
            let lt = out
                .tag_dist
                .gather_elements(&[tag.index()])
                .clamp(floor, F::one())
                .log()
                .sum()
                .scale(gamma_f);
            let step_term = lw.add(lt);
            loss = Some(match loss {
                Some(acc) => acc.add(step_term),
                None => step_term,
            });
            state = out.state;
            prev = target;
        }
        Ok(loss.expect("non-empty target sequence").scale(-F::one()))
    }

    /// Length-synchronous beam search. Hypotheses that emit EOS (or reach
    /// `max_len`) are complete; final ranking is by total log-probability
    /// with ties broken toward lower word indices. Returns hypotheses best
    /// first.
    pub fn beam_search(
        &self,
        vocab: &Vocabularies,
        image: &ImageRecord,
        graph: &CgvrgGraph,
        beam_width: usize,
        max_len: usize,
    ) -> Result<Vec<GenerationOutput>> {
        if beam_width == 0 || max_len == 0 {
            return Err(Error::Config {
                field: "beam".into(),
                message: "beam width and max length must be at least 1".into(),
            });
        }
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.params);
        let enc = self.encode(&tape, &binder, vocab, image, graph)?;

        struct Hyp<'t, F: Scalar> {
            state: DecoderState<'t, F>,
            prev: usize,
            log_prob: f64,
            done: bool,
            words: Vec<usize>,
            tags: Vec<Tag>,
            tag_probs: Vec<[f64; TAG_COUNT]>,
            att_objects: Vec<Vec<f64>>,
            att_predicates: Vec<Vec<f64>>,
        }
        impl<F: Scalar> Clone for Hyp<'_, F> {
            fn clone(&self) -> Self {
                Hyp {
                    state: self.state,
                    prev: self.prev,
                    log_prob: self.log_prob,
                    done: self.done,
                    words: self.words.clone(),
                    tags: self.tags.clone(),
                    tag_probs: self.tag_probs.clone(),
                    att_objects: self.att_objects.clone(),
                    att_predicates: self.att_predicates.clone(),
                }
            }
        }

        let mut beams = vec![Hyp {
            state: self.init_state(&tape, &binder, &enc),
            prev: BOS_ID,
            log_prob: 0.0,
            done: false,
            words: Vec::new(),
            tags: Vec::new(),
            tag_probs: Vec::new(),
            att_objects: Vec::new(),
            att_predicates: Vec::new(),
        }];

        for _ in 0..max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut candidates: Vec<Hyp<'_, F>> = Vec::new();
            for hyp in &beams {
                if hyp.done {
                    candidates.push(hyp.clone());
                    continue;
                }
                let out = self.step(&tape, &binder, &hyp.state, hyp.prev, &enc)?;
                let word_probs = out.word_dist.to_vec();
                let tag_probs = out.tag_dist.to_vec();
                let tag_triple = [
                    tag_probs[0].into_f64(),
                    tag_probs[1].into_f64(),
                    tag_probs[2].into_f64(),
                ];
                let tag_argmax = Tag::from_index(argmax_f(&tag_probs));
                for (w, &p) in word_probs.iter().enumerate() {
                    let mut next = hyp.clone();
                    next.state = out.state;
                    next.log_prob += p.into_f64().ln();
                    if w == EOS_ID {
                        next.done = true;
                    } else {
                        next.prev = w;
                        next.words.push(w);
                        next.tags.push(tag_argmax);
                        next.tag_probs.push(tag_triple);
                        next.att_objects.push(out.att_objects.iter().map(|&a| a.into_f64()).collect());
                        next.att_predicates
                            .push(out.att_predicates.iter().map(|&a| a.into_f64()).collect());
                    }
                    candidates.push(next);
                }
            }
            candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
            candidates.truncate(beam_width);
            beams = candidates;
        }

        beams.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
        Ok(beams
            .into_iter()
            .map(|h| GenerationOutput {
                words: h.words.iter().map(|&w| vocab.word(w).to_string()).collect(),
                word_ids: h.words,
                tags: h.tags,
                tag_probs: h.tag_probs,
                attention_objects: h.att_objects,
                attention_predicates: h.att_predicates,
                score: h.log_prob,
            })
            .collect())
    }

    /// Greedy decode: beam of one.
    pub fn greedy(
        &self,
        vocab: &Vocabularies,
        image: &ImageRecord,
        graph: &CgvrgGraph,
        max_len: usize,
    ) -> Result<GenerationOutput> {
        Ok(self.beam_search(vocab, image, graph, 1, max_len)?.remove(0))
    }
}

pub fn argmax_f<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug)]
pub struct DecoderState<'t, F: Scalar> {
    pub h1: Tensor<'t, F>,
    pub c1: Tensor<'t, F>,
    pub h2: Tensor<'t, F>,
    pub c2: Tensor<'t, F>,
}

impl<F: Scalar> Clone for DecoderState<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Scalar> Copy for DecoderState<'_, F> {}

#[derive(Debug)]
pub struct StepOutput<'t, F: Scalar> {
    pub state: DecoderState<'t, F>,
    /// `[vocab_size]`, sums to one.
    pub word_dist: Tensor<'t, F>,
    /// `[3]` over (none, predicate, object), sums to one.
    pub tag_dist: Tensor<'t, F>,
    pub att_objects: Vec<F>,
    pub att_predicates: Vec<F>,
}

/// Additive attention: weights = softmax(v' tanh(Wq q + Wx x_i)), context =
/// weighted sum. An empty node set yields a zero context and empty weights.
pub fn attend<'t, F: Scalar>(
    binder: &Binder<'t, F>,
    prefix: &str,
    query: Tensor<'t, F>,
    nodes: Option<Tensor<'t, F>>,
    node_dim: usize,
) -> Result<(Tensor<'t, F>, Vec<F>)> {
    let Some(nodes) = nodes else {
        let tape = query.tape();
        return Ok((tape.zeros(&[1, node_dim]), Vec::new()));
    };
    let wq = binder.get(&format!("{prefix}/wq"));
    let wx = binder.get(&format!("{prefix}/wx"));
    let v = binder.get(&format!("{prefix}/v"));
    let k = nodes.shape()[0];
    let scores = nodes
        .matmul(wx)
        .add(query.matmul(wq).reshape(&[wq.shape()[1]]))
        .tanh()
        .matmul(v)
        .reshape(&[k]);
    let weights = scores.softmax(0);
    let context = weights.reshape(&[1, k]).matmul(nodes);
    Ok((context, weights.to_vec()))
}

/// One generated caption with its aligned tags, per-step tag probabilities,
/// attention rows, and total log-probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub words: Vec<String>,
    pub word_ids: Vec<usize>,
    pub tags: Vec<Tag>,
    pub tag_probs: Vec<[f64; TAG_COUNT]>,
    pub attention_objects: Vec<Vec<f64>>,
    pub attention_predicates: Vec<Vec<f64>>,
    pub score: f64,
}
