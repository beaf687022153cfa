//! Built-in verification suite: gradient checks for every primitive and for
//! the composite losses, noisy-OR properties, beam search against exhaustive
//! enumeration, and the metric hand cases. The `selfcheck` CLI subcommand and
//! the acceptance tests both run these.

use rand::Rng;

use crate::corpus::{ImageRecord, Region};
use crate::decoder::{Captioner, CaptionerDims, MtBlock};
use crate::graph::EncodedGraph;
use crate::error::Result;
use crate::gradcheck::{check_params, gradient_check};
use crate::graph::{CgvrgGraph, ObjectNode, PredicateNode};
use crate::metrics;
use crate::mil::{self, noisy_or};
use crate::params::Binder;
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use crate::vocab::{label_tags, Vocabularies, BOS_ID, EOS_ID};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, result: Result<String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome { name: name.to_string(), passed: true, detail },
        Err(e) => CheckOutcome { name: name.to_string(), passed: false, detail: e.to_string() },
    }
}

/// Run every check; the list is stable so reports are comparable.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        outcome("primitive-gradients", primitive_gradients(seed)),
        outcome("mil-loss-gradient", mil_loss_gradient(seed)),
        outcome("decoder-gradient-mt1", decoder_gradient(seed, MtBlock::Mt1)),
        outcome("decoder-gradient-mt2", decoder_gradient(seed, MtBlock::Mt2)),
        outcome("noisy-or-properties", noisy_or_properties(seed)),
        outcome("beam-vs-exhaustive", beam_vs_exhaustive(seed)),
        outcome("mt2-degeneracy", mt2_degeneracy(seed)),
        outcome("metric-oracles", metric_oracles()),
    ]
}

/// Gradient of a weighted sum of each primitive's output against central
/// finite differences, relative error below 1e-6.
pub fn primitive_gradients(seed: u64) -> Result<String> {
    let mut rng = substream(seed, "selfcheck-prims");
    let mut worst: f64 = 0.0;
    let mut count = 0usize;

    // Weights decorrelate output coordinates so transposition-style bugs
    // cannot cancel in the sum.
    fn weighted_sum<'t>(tape: &'t Tape<f64>, t: Tensor<'t, f64>, w: &[f64]) -> Tensor<'t, f64> {
        let wt = tape.leaf(w.to_vec(), &t.shape());
        t.mul(wt).sum()
    }

    macro_rules! check {
        ($name:expr, $point:expr, $shape:expr, $f:expr) => {{
            let report = gradient_check($f, &$point, &$shape, 1e-6, 1e-6).map_err(|e| {
                crate::error::Error::CheckFailed(format!("{}: {e}", $name))
            })?;
            worst = worst.max(report.max_rel_err);
            count += 1;
        }};
    }

    let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };

    // matmul: f = sum(w ∘ (X @ B))
    {
        let b = rand_vec(&mut rng, 12, -1.0, 1.0);
        let w = rand_vec(&mut rng, 8, -1.0, 1.0);
        let x = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("matmul", x, [2, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let bt = tape.leaf(b.clone(), &[3, 4]);
            weighted_sum(tape, t.matmul(bt), &w)
        });
    }
    // add (same shape and row broadcast)
    {
        let other = rand_vec(&mut rng, 6, -1.0, 1.0);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        let x = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("add", x, [2, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let o = tape.leaf(other.clone(), &[2, 3]);
            weighted_sum(tape, t.add(o), &w)
        });
        let bias = rand_vec(&mut rng, 3, -1.0, 1.0);
        check!("add-row-broadcast", bias, [3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let a = tape.leaf(vec![0.3, -0.4, 0.9, 1.2, 0.0, -0.7], &[2, 3]);
            let w = tape.leaf(vec![0.2, 0.4, -0.3, 0.8, -0.5, 0.6], &[2, 3]);
            a.add(t).mul(w).sum()
        });
    }
    // elementwise mul, scalar-broadcast mul
    {
        let other = rand_vec(&mut rng, 5, -1.0, 1.0);
        let w = rand_vec(&mut rng, 5, -1.0, 1.0);
        let x = rand_vec(&mut rng, 5, -1.0, 1.0);
        check!("elementwise_mul", x, [5], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let o = tape.leaf(other.clone(), &[5]);
            weighted_sum(tape, t.mul(o), &w)
        });
        let scalar_point = [0.37];
        check!("scalar-mul", scalar_point, [1], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let o = tape.leaf(vec![0.5, -1.5, 2.5], &[3]);
            o.mul(t).sum()
        });
    }
    // concat + slice
    {
        let w = rand_vec(&mut rng, 10, -1.0, 1.0);
        let x = rand_vec(&mut rng, 4, -1.0, 1.0);
        check!("concat_last_axis", x, [2, 2], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            let o = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
            weighted_sum(tape, tape.concat(&[t, o]), &w)
        });
        let y = rand_vec(&mut rng, 8, -1.0, 1.0);
        check!("slice_last_axis", y, [2, 4], |_tape: &Tape<f64>, t: Tensor<'_, f64>| {
            t.slice_last(1, 2).sum()
        });
    }
    // unary activations; relu probed away from the kink
    {
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        let x: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        check!("relu", x, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.relu(), &w)
        });
        let x2 = rand_vec(&mut rng, 6, -2.0, 2.0);
        check!("sigmoid", x2, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.sigmoid(), &w)
        });
        let x3 = rand_vec(&mut rng, 6, -2.0, 2.0);
        check!("tanh", x3, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.tanh(), &w)
        });
        let x4 = rand_vec(&mut rng, 6, 0.2, 3.0);
        check!("log", x4, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.log(), &w)
        });
        let x5 = rand_vec(&mut rng, 6, -1.5, 1.5);
        check!("exp", x5, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.exp(), &w)
        });
    }
    // reductions, scaling, clamp away from its bounds
    {
        let x = rand_vec(&mut rng, 8, -1.0, 1.0);
        let w = rand_vec(&mut rng, 4, -1.0, 1.0);
        check!("mean_over_rows", x, [2, 4], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.mean_rows(), &w)
        });
        let x2 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("sum_all", x2, [6], |_tape: &Tape<f64>, t: Tensor<'_, f64>| t.sum());
        let x3 = rand_vec(&mut rng, 6, -1.0, 1.0);
        let w6 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("scalar_scale", x3, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.scale(-1.7), &w6)
        });
        let x4 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("scalar_offset", x4, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.offset(0.9), &w6)
        });
        let x5 = rand_vec(&mut rng, 6, -0.8, 0.8);
        check!("clamp", x5, [6], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.clamp(-0.95, 0.95), &w6)
        });
    }
    // gathers, softmax, reshape, transpose
    {
        let x = rand_vec(&mut rng, 12, -1.0, 1.0);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("gather_rows", x, [4, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.gather_rows(&[2, 0]), &w)
        });
        let x2 = rand_vec(&mut rng, 8, -1.0, 1.0);
        let w3 = rand_vec(&mut rng, 3, -1.0, 1.0);
        check!("gather_elements", x2, [8], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.gather_elements(&[5, 1, 5]), &w3)
        });
        let x3 = rand_vec(&mut rng, 6, -1.0, 1.0);
        let w6 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("softmax-rows", x3, [2, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.softmax(1), &w6)
        });
        let x4 = rand_vec(&mut rng, 5, -1.0, 1.0);
        let w5 = rand_vec(&mut rng, 5, -1.0, 1.0);
        check!("softmax-vector", x4, [5], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.softmax(0), &w5)
        });
        let x5 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("reshape", x5, [2, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.reshape(&[3, 2]), &w6)
        });
        let x6 = rand_vec(&mut rng, 6, -1.0, 1.0);
        check!("transpose", x6, [2, 3], |tape: &Tape<f64>, t: Tensor<'_, f64>| {
            weighted_sum(tape, t.transpose(), &w6)
        });
    }
    Ok(format!("{count} primitives, max rel err {worst:.3e}"))
}

fn tiny_image() -> ImageRecord {
    ImageRecord {
        image_id: "check".into(),
        width: 40,
        height: 40,
        regions: vec![
            Region { bbox: [4.0, 2.0, 14.0, 12.0], label: "cup".into(), feature: vec![0.4, -0.6] },
            Region { bbox: [2.0, 12.0, 20.0, 24.0], label: "table".into(), feature: vec![-0.2, 0.8] },
        ],
        captions: vec![vec!["a".into(), "cup".into(), "on".into(), "a".into(), "table".into()]],
    }
}

fn tiny_vocab() -> Vocabularies {
    Vocabularies::from_parts(
        vec![
            crate::vocab::PAD.into(),
            crate::vocab::BOS.into(),
            crate::vocab::EOS.into(),
            crate::vocab::UNK.into(),
            "a".into(),
            "cup".into(),
            "on".into(),
            "table".into(),
        ],
        vec!["cup".into(), "table".into()],
        vec!["on".into(), "under".into()],
        Default::default(),
    )
}

fn tiny_graph() -> CgvrgGraph {
    CgvrgGraph {
        image_id: "check".into(),
        objects: vec![
            ObjectNode { region_index: 0, label: "cup".into(), category: "cup".into() },
            ObjectNode { region_index: 1, label: "table".into(), category: "table".into() },
        ],
        predicates: vec![PredicateNode {
            head: 0,
            predicate_index: 0,
            predicate: "on".into(),
            tail: 1,
            probability: 0.9,
        }],
    }
}

/// Full bag loss on a 2-region, 2-predicate instance against finite
/// differences through every detector parameter.
pub fn mil_loss_gradient(seed: u64) -> Result<String> {
    let image = tiny_image();
    let vocab = tiny_vocab();
    let mut rng = substream(seed, "selfcheck-mil");
    let model = mil::MilModel::<f64>::new(2, 5, 2, &mut rng);
    let triples = crate::vocab::extract_image_triples(&image, &vocab);
    let bags = mil::build_bags(&image, &triples, &vocab)?;
    let report = check_params(
        |tape, binder| mil::mil_loss(tape, binder, &model, &image, &bags).unwrap(),
        &model.params,
        1e-6,
        1e-6,
    )?;
    Ok(format!("{} coords, max rel err {:.3e}", report.checked, report.max_rel_err))
}

fn tiny_captioner(seed: u64, block: MtBlock) -> (Vocabularies, ImageRecord, CgvrgGraph, Captioner<f64>) {
    let vocab = tiny_vocab();
    let image = tiny_image();
    let graph = tiny_graph();
    let dims = CaptionerDims {
        word_embed: 4,
        graph_text_embed: 3,
        bottom_hidden: 4,
        top_hidden: 5,
        graph_dim: 5,
        attention_dim: 3,
        head_hidden: 4,
    };
    let mut rng = substream(seed, "selfcheck-dec");
    let captioner = Captioner::<f64>::new(
        dims,
        vocab.num_words(),
        vocab.num_categories(),
        vocab.num_predicates(),
        2,
        block,
        &mut rng,
    )
    .unwrap();
    (vocab, image, graph, captioner)
}

/// Teacher-forced loss on a three-word caption through the full encoder and
/// decoder stack against finite differences, both output blocks.
pub fn decoder_gradient(seed: u64, block: MtBlock) -> Result<String> {
    let (vocab, image, graph, captioner) = tiny_captioner(seed, block);
    let tokens: Vec<String> = vec!["cup".into(), "on".into(), "table".into()];
    let tags = label_tags(&tokens, &vocab);
    let report = check_params(
        |tape, binder| {
            let enc = captioner.encode(tape, binder, &vocab, &image, &graph).unwrap();
            captioner
                .xe_loss(tape, binder, &vocab, &enc, &tokens, &tags, 0.15)
                .unwrap()
        },
        &captioner.params,
        1e-5,
        1e-4,
    )?;
    Ok(format!("{} coords, max rel err {:.3e}", report.checked, report.max_rel_err))
}

/// Bounds, monotonicity, permutation invariance, and the exact 0.75 case,
/// over 1000 randomized instance lists.
pub fn noisy_or_properties(seed: u64) -> Result<String> {
    let mut rng = substream(seed, "selfcheck-noisyor");
    let exact = noisy_or(&[0.5, 0.5])?;
    if exact != 0.75 {
        return Err(crate::error::Error::CheckFailed(format!(
            "noisy_or([0.5, 0.5]) = {exact}, expected exactly 0.75"
        )));
    }
    for case in 0..1000 {
        let n = rng.gen_range(1..=8);
        let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = noisy_or(&probs)?;
        let max_p = probs.iter().cloned().fold(0.0f64, f64::max);
        if !(max_p - 1e-12..=1.0 + 1e-12).contains(&out) {
            return Err(crate::error::Error::CheckFailed(format!(
                "case {case}: bounds violated: max {max_p}, out {out}"
            )));
        }
        // Monotone under adding an instance.
        let extra: f64 = rng.gen_range(0.0..1.0);
        let mut bigger = probs.clone();
        bigger.push(extra);
        if noisy_or(&bigger)? < out - 1e-12 {
            return Err(crate::error::Error::CheckFailed(format!(
                "case {case}: adding an instance decreased the bag probability"
            )));
        }
        // Permutation invariance.
        let forward = out;
        probs.reverse();
        let backward = noisy_or(&probs)?;
        if (forward - backward).abs() > 1e-12 {
            return Err(crate::error::Error::CheckFailed(format!(
                "case {case}: permutation changed result: {forward} vs {backward}"
            )));
        }
    }
    Ok("1000 randomized cases".into())
}

/// Exhaustive enumeration over all complete sequences (shared-prefix DFS).
pub fn enumerate_best(
    captioner: &Captioner<f64>,
    vocab: &Vocabularies,
    image: &ImageRecord,
    graph: &CgvrgGraph,
    max_len: usize,
) -> (Vec<usize>, f64) {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &captioner.params);
    let enc = captioner.encode(&tape, &binder, vocab, image, graph).unwrap();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
    #[allow(clippy::too_many_arguments)]
    fn dfs<'t>(
        captioner: &Captioner<f64>,
        tape: &'t Tape<f64>,
        binder: &Binder<'t, f64>,
        enc: &EncodedGraph<'t, f64>,
        state: crate::decoder::DecoderState<'t, f64>,
        prev: usize,
        prefix: &mut Vec<usize>,
        logp: f64,
        remaining: usize,
        best: &mut (Vec<usize>, f64),
    ) {
        if remaining == 0 {
            if logp > best.1 {
                *best = (prefix.clone(), logp);
            }
            return;
        }
        let out = captioner.step(tape, binder, &state, prev, enc).unwrap();
        let probs = out.word_dist.to_vec();
        for (w, &p) in probs.iter().enumerate() {
            let lp = logp + p.ln();
            if w == EOS_ID {
                if lp > best.1 {
                    *best = (prefix.clone(), lp);
                }
            } else {
                prefix.push(w);
                dfs(captioner, tape, binder, enc, out.state, w, prefix, lp, remaining - 1, best);
                prefix.pop();
            }
        }
    }
    let state = captioner.init_state(&tape, &binder, &enc);
    let mut prefix = Vec::new();
    dfs(captioner, &tape, &binder, &enc, state, BOS_ID, &mut prefix, 0.0, max_len, &mut best);
    best
}

/// Beam search with width |V|^T against exhaustive enumeration, plus beam
/// width 1 against a manual greedy loop, over many random models.
pub fn beam_vs_exhaustive(seed: u64) -> Result<String> {
    let mut checked = 0;
    for s in 0..50u64 {
        let block = if s % 2 == 0 { MtBlock::Mt1 } else { MtBlock::Mt2 };
        let (vocab_full, image, graph, _) = tiny_captioner(seed.wrapping_add(s), block);
        // Restrict to the 4 special tokens so |V| = 4.
        let vocab = Vocabularies::from_parts(
            vocab_full.words()[..4].to_vec(),
            vocab_full.categories().to_vec(),
            vocab_full.predicates().to_vec(),
            Default::default(),
        );
        let dims = CaptionerDims {
            word_embed: 4,
            graph_text_embed: 3,
            bottom_hidden: 3,
            top_hidden: 4,
            graph_dim: 4,
            attention_dim: 2,
            head_hidden: 3,
        };
        let mut rng = substream(seed.wrapping_add(s), "selfcheck-beam");
        let captioner =
            Captioner::<f64>::new(dims, 4, vocab.num_categories(), vocab.num_predicates(), 2, block, &mut rng)
                .unwrap();
        let t = if s % 3 == 0 { 4 } else { 3 };
        let width = 4usize.pow(t as u32);
        let beams = captioner.beam_search(&vocab, &image, &graph, width, t)?;
        let (best_words, best_lp) = enumerate_best(&captioner, &vocab, &image, &graph, t);
        if beams[0].word_ids != best_words || (beams[0].score - best_lp).abs() > 1e-9 {
            return Err(crate::error::Error::CheckFailed(format!(
                "seed {s}: beam {:?} ({}) vs exhaustive {:?} ({})",
                beams[0].word_ids, beams[0].score, best_words, best_lp
            )));
        }
        // Beam of one equals greedy argmax decoding.
        let b1 = captioner.beam_search(&vocab, &image, &graph, 1, t)?;
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &captioner.params);
        let enc = captioner.encode(&tape, &binder, &vocab, &image, &graph)?;
        let mut state = captioner.init_state(&tape, &binder, &enc);
        let mut prev = BOS_ID;
        let mut greedy = Vec::new();
        for _ in 0..t {
            let out = captioner.step(&tape, &binder, &state, prev, &enc)?;
            let w = crate::decoder::argmax_f(&out.word_dist.to_vec());
            if w == EOS_ID {
                break;
            }
            greedy.push(w);
            state = out.state;
            prev = w;
        }
        if b1[0].word_ids != greedy {
            return Err(crate::error::Error::CheckFailed(format!(
                "seed {s}: beam width 1 {:?} differs from greedy {:?}",
                b1[0].word_ids, greedy
            )));
        }
        checked += 1;
    }
    Ok(format!("{checked} random models"))
}

/// Hard one-hot "none" tag makes the MT-2 word head read the raw hidden
/// state; all attention and tag rows stay normalized.
pub fn mt2_degeneracy(seed: u64) -> Result<String> {
    let (vocab, image, graph, captioner) = tiny_captioner(seed, MtBlock::Mt2);
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &captioner.params);
    let enc = captioner.encode(&tape, &binder, &vocab, &image, &graph)?;
    let mut state = captioner.init_state(&tape, &binder, &enc);
    let mut prev = BOS_ID;
    for step in 0..4 {
        let forced = captioner.step_with_tag_override(&tape, &binder, &state, prev, &enc, [1.0, 0.0, 0.0])?;
        let plain = crate::nn::mlp(&binder, "dec/f_y", forced.state.h2)
            .reshape(&[vocab.num_words()])
            .softmax(0)
            .to_vec();
        for (a, b) in forced.word_dist.to_vec().iter().zip(plain.iter()) {
            if (a - b).abs() > 1e-7 {
                return Err(crate::error::Error::CheckFailed(format!(
                    "step {step}: mixed {a} vs plain {b}"
                )));
            }
        }
        let out = captioner.step(&tape, &binder, &state, prev, &enc)?;
        let sums = [
            out.word_dist.to_vec().iter().sum::<f64>(),
            out.tag_dist.to_vec().iter().sum::<f64>(),
            out.att_objects.iter().sum::<f64>(),
            out.att_predicates.iter().sum::<f64>(),
        ];
        for (i, s) in sums.iter().enumerate() {
            if (s - 1.0).abs() > 1e-6 {
                return Err(crate::error::Error::CheckFailed(format!(
                    "step {step}: distribution {i} sums to {s}"
                )));
            }
        }
        state = out.state;
        prev = (step % vocab.num_words()).max(1);
    }
    Ok("4 steps, both checks".into())
}

/// The hand-derived metric values, asserted to four decimal places.
pub fn metric_oracles() -> Result<String> {
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    let fail = |what: &str, got: f64, want: f64| {
        Err(crate::error::Error::CheckFailed(format!("{what}: got {got}, want {want}")))
    };

    // CIDEr-D of an identical candidate/reference pair is exactly 10.
    let corpus = vec![
        vec![toks("a red ball on a box")],
        vec![toks("a lamp left of a chair")],
    ];
    let idf = metrics::build_idf(&corpus)?;
    let ten = metrics::cider_d_sentence(&toks("a red ball on a box"), &corpus[0], &idf)?;
    if (ten - 10.0).abs() > 1e-6 {
        return fail("cider identical", ten, 10.0);
    }
    // No overlap scores zero.
    let zero = metrics::cider_d_sentence(&toks("entirely different words"), &corpus[0], &idf)?;
    if zero != 0.0 {
        return fail("cider disjoint", zero, 0.0);
    }
    // Gaussian length penalty at delta 6, sigma 6.
    let penalty = (-36.0f64 / 72.0).exp();
    if (penalty - 0.6065).abs() > 5e-5 {
        return fail("length penalty", penalty, 0.6065);
    }

    // BLEU: identical = 1; clipping hand case = exp(-1/2).
    let b = metrics::bleu(&[toks("a cat on a mat")], &[vec![toks("a cat on a mat")]], 4)?;
    if (b[3] - 1.0).abs() > 1e-9 {
        return fail("bleu identical", b[3], 1.0);
    }
    let b1 = metrics::bleu(&[toks("the cat")], &[vec![toks("the the cat")]], 1)?;
    if (b1[0] - 0.6065).abs() > 5e-5 {
        return fail("bleu brevity", b1[0], 0.6065);
    }

    // ROUGE-L hand case: P = 3/4, R = 1, beta = 1.2.
    let r = metrics::rouge_l_sentence(&toks("a b c d"), &[toks("a c d")]);
    if (r - 0.8798).abs() > 5e-5 {
        return fail("rouge hand case", r, 0.8798);
    }

    // Noisy-OR hand case.
    let no = noisy_or(&[0.1, 0.2, 0.3])?;
    if (no - 0.496).abs() > 5e-5 {
        return fail("noisy-or hand case", no, 0.496);
    }
    Ok("cider, bleu, rouge, noisy-or".into())
}
