//! Captioner training: teacher-forced cross-entropy, then self-critical
//! fine-tuning where the greedy decode's reward is the baseline for a
//! sampled rollout.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::corpus::ImageRecord;
use crate::decoder::{argmax_f, Captioner};
use crate::error::{Error, Result};
use crate::graph::CgvrgGraph;
use crate::metrics::{cider_d_sentence, IdfStats};
use crate::params::{AdamConfig, Binder};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use crate::vocab::{label_tags, Tag, Vocabularies, BOS_ID, EOS_ID};

/// Training phase selection; the self-critical phase requires a checkpoint
/// produced by the cross-entropy phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Scst,
}

#[derive(Debug, Clone)]
pub struct XeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for XeTrainConfig {
    fn default() -> Self {
        XeTrainConfig { epochs: 200, lr: 5e-3, lr_decay: 0.98, batch_size: 4, gamma: 0.15, seed: 7 }
    }
}

fn check_alignment(corpus: &[ImageRecord], graphs: &[CgvrgGraph]) -> Result<()> {
    if corpus.len() != graphs.len() {
        return Err(Error::MissingPrerequisite(format!(
            "graphs cover {} images, corpus has {}",
            graphs.len(),
            corpus.len()
        )));
    }
    for (img, g) in corpus.iter().zip(graphs.iter()) {
        if img.image_id != g.image_id {
            return Err(Error::MissingPrerequisite(format!(
                "no graph for image {} (found {})",
                img.image_id, g.image_id
            )));
        }
    }
    Ok(())
}

/// Minibatch Adam on the mean teacher-forced loss. Calls `on_epoch` with
/// (epoch index, mean loss) after each epoch; per-epoch checkpointing hangs
/// off that hook.
pub fn train_xe(
    captioner: &mut Captioner<f32>,
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
    cfg: &XeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &Captioner<f32>) -> Result<()>,
) -> Result<Vec<f64>> {
    check_alignment(corpus, graphs)?;
    // One training instance per (image, caption); tags are computed from the
    // surface tokens before any UNK mapping.
    struct Instance {
        image: usize,
        caption: usize,
        tags: Vec<Tag>,
    }
    let mut instances = Vec::new();
    for (i, img) in corpus.iter().enumerate() {
        for (c, tokens) in img.captions.iter().enumerate() {
            instances.push(Instance { image: i, caption: c, tags: label_tags(tokens, vocab) });
        }
    }
    let mut rng = substream(cfg.seed, "captioner");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 0..cfg.epochs {
        let adam = AdamConfig::with_lr(cfg.lr * cfg.lr_decay.powi(epoch as i32));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &captioner.params);
            let mut batch_loss: Option<Tensor<'_, f32>> = None;
            for &k in batch {
                let inst = &instances[k];
                let img = &corpus[inst.image];
                let enc = captioner.encode(&tape, &binder, vocab, img, &graphs[inst.image])?;
                let loss = captioner.xe_loss(
                    &tape,
                    &binder,
                    vocab,
                    &enc,
                    &img.captions[inst.caption],
                    &inst.tags,
                    cfg.gamma,
                )?;
                epoch_loss += loss.value() as f64;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(loss),
                    None => loss,
                });
            }
            let scale = 1.0 / batch.len() as f32;
            let batch_loss = batch_loss.expect("non-empty batch").scale(scale);
            if cfg.lr > 0.0 {
                tape.backward(batch_loss)?;
                binder.accumulate_grads(&mut captioner.params)?;
                captioner.params.adam_step(&adam);
            }
        }
        let mean = epoch_loss / instances.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean, captioner)?;
    }
    Ok(history)
}

/// Ancestral sampling from the word distribution until EOS or `max_len`.
/// Returns the sampled words (EOS excluded) and the log-probability of every
/// sampled choice including the terminating EOS.
pub fn sample_sequence(
    captioner: &Captioner<f32>,
    vocab: &Vocabularies,
    image: &ImageRecord,
    graph: &CgvrgGraph,
    rng: &mut impl Rng,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &captioner.params);
    let enc = captioner.encode(&tape, &binder, vocab, image, graph)?;
    let mut state = captioner.init_state(&tape, &binder, &enc);
    let mut prev = BOS_ID;
    let mut words = Vec::new();
    let mut logps = Vec::new();
    for _ in 0..max_len {
        let out = captioner.step(&tape, &binder, &state, prev, &enc)?;
        let probs = out.word_dist.to_vec();
        let choice = sample_index(&probs, rng);
        logps.push((probs[choice] as f64).ln());
        if choice == EOS_ID {
            break;
        }
        words.push(choice);
        state = out.state;
        prev = choice;
    }
    Ok((words, logps))
}

/// Inverse-CDF draw from a probability vector.
fn sample_index(probs: &[f32], rng: &mut impl Rng) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone)]
pub struct ScstConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ScstConfig {
    fn default() -> Self {
        ScstConfig { steps: 200, lr: 5e-5, batch_size: 10, max_len: 28, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScstDiag {
    pub step: usize,
    pub mean_sample_reward: f64,
    pub mean_greedy_reward: f64,
    pub surrogate_loss: f64,
    /// Sum of |g| over all parameters before the update.
    pub grad_abs_sum: f64,
}

/// Accumulate self-critical gradients for one batch into the parameter
/// store, without applying an optimizer update. For each image the surrogate
/// is -(r_sample - r_greedy) * sum of sampled log-probabilities, averaged
/// over the batch. The tag head takes no part in this objective.
#[allow(clippy::too_many_arguments)]
pub fn scst_grads(
    captioner: &mut Captioner<f32>,
    batch: &[usize],
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
    idf: &IdfStats,
    rng: &mut impl Rng,
    max_len: usize,
) -> Result<ScstDiag> {
    let tape = Tape::new();
    let binder = Binder::trainable(&tape, &captioner.params);
    let mut total_loss: Option<Tensor<'_, f32>> = None;
    let mut sample_reward_sum = 0.0;
    let mut greedy_reward_sum = 0.0;

    for &i in batch {
        let image = &corpus[i];
        let graph = &graphs[i];
        if image.captions.is_empty() {
            return Err(Error::CheckFailed(format!("image {} has no references", image.image_id)));
        }
        let refs = &image.captions;

        // Baseline: greedy decode reward, no gradients.
        let greedy = captioner.greedy(vocab, image, graph, max_len)?;
        let r_greedy = cider_d_sentence(&greedy.words, refs, idf)?;

        // Sampled rollout recorded on the gradient tape.
        let enc = captioner.encode(&tape, &binder, vocab, image, graph)?;
        let mut state = captioner.init_state(&tape, &binder, &enc);
        let mut prev = BOS_ID;
        let mut words: Vec<String> = Vec::new();
        let mut sum_logp: Option<Tensor<'_, f32>> = None;
        for _ in 0..max_len {
            let out = captioner.step(&tape, &binder, &state, prev, &enc)?;
            let probs = out.word_dist.to_vec();
            let choice = sample_index(&probs, rng);
            let lp = out
                .word_dist
                .gather_elements(&[choice])
                .clamp(1e-12, 1.0)
                .log()
                .sum();
            sum_logp = Some(match sum_logp {
                Some(acc) => acc.add(lp),
                None => lp,
            });
            if choice == EOS_ID {
                break;
            }
            words.push(vocab.word(choice).to_string());
            state = out.state;
            prev = choice;
        }
        let r_sample = cider_d_sentence(&words, refs, idf)?;
        sample_reward_sum += r_sample;
        greedy_reward_sum += r_greedy;

        let advantage = (r_sample - r_greedy) as f32;
        let image_loss = sum_logp.expect("at least one step").scale(-advantage);
        total_loss = Some(match total_loss {
            Some(acc) => acc.add(image_loss),
            None => image_loss,
        });
    }

    let loss = total_loss.expect("non-empty batch").scale(1.0 / batch.len() as f32);
    tape.backward(loss)?;
    binder.accumulate_grads(&mut captioner.params)?;
    Ok(ScstDiag {
        step: 0,
        mean_sample_reward: sample_reward_sum / batch.len() as f64,
        mean_greedy_reward: greedy_reward_sum / batch.len() as f64,
        surrogate_loss: loss.value() as f64,
        grad_abs_sum: captioner.params.grad_abs_sum(),
    })
}

/// One self-critical step: gradients plus an Adam update.
#[allow(clippy::too_many_arguments)]
pub fn scst_step(
    captioner: &mut Captioner<f32>,
    batch: &[usize],
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
    idf: &IdfStats,
    rng: &mut impl Rng,
    max_len: usize,
    adam: &AdamConfig,
) -> Result<ScstDiag> {
    let diag = scst_grads(captioner, batch, corpus, graphs, vocab, idf, rng, max_len)?;
    captioner.params.adam_step(adam);
    Ok(diag)
}

/// Self-critical fine-tuning loop over minibatches of images.
pub fn train_scst(
    captioner: &mut Captioner<f32>,
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
    idf: &IdfStats,
    cfg: &ScstConfig,
    mut on_step: impl FnMut(&ScstDiag) -> Result<()>,
) -> Result<Vec<ScstDiag>> {
    check_alignment(corpus, graphs)?;
    let mut rng = substream(cfg.seed, "scst");
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut diags = Vec::with_capacity(cfg.steps);
    let mut step = 0usize;
    'outer: loop {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            if step >= cfg.steps {
                break 'outer;
            }
            let mut diag =
                scst_step(captioner, batch, corpus, graphs, vocab, idf, &mut rng, cfg.max_len, &adam)?;
            diag.step = step;
            on_step(&diag)?;
            diags.push(diag);
            step += 1;
        }
        if cfg.steps == 0 {
            break;
        }
    }
    Ok(diags)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TeacherAccuracy {
    pub word_accuracy: f64,
    pub tag_accuracy: f64,
    pub steps: usize,
}

/// Teacher-forced next-token and tag accuracy over a corpus (EOS step
/// included).
pub fn teacher_forced_accuracy(
    captioner: &Captioner<f32>,
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
) -> Result<TeacherAccuracy> {
    check_alignment(corpus, graphs)?;
    let mut word_hits = 0usize;
    let mut tag_hits = 0usize;
    let mut steps = 0usize;
    for (img, graph) in corpus.iter().zip(graphs.iter()) {
        for tokens in &img.captions {
            let tape = Tape::new();
            let binder = Binder::frozen(&tape, &captioner.params);
            let enc = captioner.encode(&tape, &binder, vocab, img, graph)?;
            let mut targets: Vec<usize> = tokens.iter().map(|t| vocab.word_id(t)).collect();
            targets.push(EOS_ID);
            let mut target_tags = label_tags(tokens, vocab);
            target_tags.push(Tag::None);
            let mut state = captioner.init_state(&tape, &binder, &enc);
            let mut prev = BOS_ID;
            for (&target, tag) in targets.iter().zip(target_tags.iter()) {
                let out = captioner.step(&tape, &binder, &state, prev, &enc)?;
                if argmax_f(&out.word_dist.to_vec()) == target {
                    word_hits += 1;
                }
                if argmax_f(&out.tag_dist.to_vec()) == tag.index() {
                    tag_hits += 1;
                }
                steps += 1;
                state = out.state;
                prev = target;
            }
        }
    }
    Ok(TeacherAccuracy {
        word_accuracy: word_hits as f64 / steps as f64,
        tag_accuracy: tag_hits as f64 / steps as f64,
        steps,
    })
}

/// Mean greedy-decode CIDEr-D over a corpus.
pub fn corpus_greedy_cider(
    captioner: &Captioner<f32>,
    corpus: &[ImageRecord],
    graphs: &[CgvrgGraph],
    vocab: &Vocabularies,
    idf: &IdfStats,
    max_len: usize,
) -> Result<f64> {
    check_alignment(corpus, graphs)?;
    let mut sum = 0.0;
    for (img, graph) in corpus.iter().zip(graphs.iter()) {
        let out = captioner.greedy(vocab, img, graph, max_len)?;
        sum += cider_d_sentence(&out.words, &img.captions, idf)?;
    }
    Ok(sum / corpus.len() as f64)
}

/// Means of consecutive disjoint windows never increase by more than `tol`.
pub fn trailing_windows_non_increasing(series: &[f64], window: usize, tol: f64) -> bool {
    if series.len() < 2 * window {
        return true;
    }
    let means: Vec<f64> = series.chunks(window).filter(|c| c.len() == window).map(|c| c.iter().sum::<f64>() / window as f64).collect();
    means.windows(2).all(|w| w[1] <= w[0] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{CaptionerDims, MtBlock};
    use crate::metrics::build_idf;
    use crate::rng::substream as sub;

    fn world() -> (Vocabularies, Vec<ImageRecord>, Vec<CgvrgGraph>, Captioner<f32>) {
        use crate::corpus::Region;
        use crate::graph::{ObjectNode, PredicateNode};
        let vocab = Vocabularies::from_parts(
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
            vec!["on".into()],
            Default::default(),
        );
        let image = ImageRecord {
            image_id: "i0".into(),
            width: 50,
            height: 50,
            regions: vec![
                Region { bbox: [10.0, 5.0, 20.0, 15.0], label: "cup".into(), feature: vec![0.4, -0.6] },
                Region { bbox: [5.0, 15.0, 30.0, 30.0], label: "table".into(), feature: vec![-0.2, 0.8] },
            ],
            captions: vec![vec!["a".into(), "cup".into(), "on".into(), "a".into(), "table".into()]],
        };
        let graph = CgvrgGraph {
            image_id: "i0".into(),
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
        };
        let dims = CaptionerDims {
            word_embed: 8,
            graph_text_embed: 6,
            bottom_hidden: 6,
            top_hidden: 8,
            graph_dim: 8,
            attention_dim: 4,
            head_hidden: 8,
        };
        let mut rng = sub(40, "train-test");
        let captioner =
            Captioner::<f32>::new(dims, vocab.num_words(), 2, 1, 2, MtBlock::Mt1, &mut rng).unwrap();
        (vocab, vec![image], vec![graph], captioner)
    }

    #[test]
    fn zero_lr_epoch_leaves_parameters_unchanged() {
        let (vocab, corpus, graphs, mut captioner) = world();
        let before = captioner.params.clone();
        let cfg = XeTrainConfig { epochs: 1, lr: 0.0, ..Default::default() };
        train_xe(&mut captioner, &corpus, &graphs, &vocab, &cfg, |_, _, _| Ok(())).unwrap();
        for (name, p) in before.iter() {
            assert_eq!(p.data, captioner.params.get(name).data, "{name}");
        }
    }

    #[test]
    fn xe_training_reduces_loss() {
        let (vocab, corpus, graphs, mut captioner) = world();
        let cfg = XeTrainConfig { epochs: 40, lr: 5e-3, lr_decay: 0.98, batch_size: 4, gamma: 0.15, seed: 7 };
        let history =
            train_xe(&mut captioner, &corpus, &graphs, &vocab, &cfg, |_, _, _| Ok(())).unwrap();
        assert!(history.last().unwrap() < &history[0], "{history:?}");
    }

    #[test]
    fn missing_graph_is_reported() {
        let (vocab, corpus, _graphs, mut captioner) = world();
        let err = train_xe(
            &mut captioner,
            &corpus,
            &[],
            &vocab,
            &XeTrainConfig::default(),
            |_, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (vocab, corpus, graphs, captioner) = world();
        let mut r1 = sub(9, "s");
        let mut r2 = sub(9, "s");
        let a = sample_sequence(&captioner, &vocab, &corpus[0], &graphs[0], &mut r1, 10).unwrap();
        let b = sample_sequence(&captioner, &vocab, &corpus[0], &graphs[0], &mut r2, 10).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn sample_frequencies_match_first_step_distribution() {
        let (vocab, corpus, graphs, captioner) = world();
        // First-step distribution.
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &captioner.params);
        let enc = captioner.encode(&tape, &binder, &vocab, &corpus[0], &graphs[0]).unwrap();
        let state = captioner.init_state(&tape, &binder, &enc);
        let probs = captioner.step(&tape, &binder, &state, BOS_ID, &enc).unwrap().word_dist.to_vec();

        let mut rng = sub(11, "freq");
        let draws = 10_000usize;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..draws {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / draws as f64;
            assert!(
                (freq - p as f64).abs() < 0.02,
                "token {i}: freq {freq} vs prob {p}"
            );
        }
    }

    #[test]
    fn zero_advantage_produces_exactly_zero_gradients() {
        let (vocab, mut corpus, graphs, mut captioner) = world();
        // Make every reward identical by giving the image a reference that
        // can never overlap sampled output: reward 0 for both rollouts.
        corpus[0].captions = vec![vec!["qqq".into(), "zzz".into()]];
        let idf = build_idf(&[corpus[0].captions.clone(), vec![vec!["other".into()]]]).unwrap();
        captioner.params.zero_grads();
        let mut rng = sub(3, "scst-test");
        let diag = scst_grads(
            &mut captioner,
            &[0],
            &corpus,
            &graphs,
            &vocab,
            &idf,
            &mut rng,
            8,
        )
        .unwrap();
        assert_eq!(diag.grad_abs_sum, 0.0, "gradient buffers must be exactly zero");
        assert_eq!(diag.mean_sample_reward, diag.mean_greedy_reward);

        // A fresh-optimizer Adam step on zero grads leaves parameters alone.
        let before = captioner.params.clone();
        captioner.params.adam_step(&AdamConfig::with_lr(1e-3));
        for (name, p) in before.iter() {
            assert_eq!(p.data, captioner.params.get(name).data, "{name}");
        }
    }

    #[test]
    fn surrogate_gradient_sign_matches_advantage() {
        // Hand-built check on the surrogate: d/dtheta of
        // -(adv) * log p(sampled) ascends sampled-word probability when
        // adv > 0. Run one scst_grads call with a crafted reference equal to
        // the sampled sentence only when sampling diverges from greedy; here
        // just verify the surrogate loss sign convention on the diagnostics.
        let (vocab, corpus, graphs, mut captioner) = world();
        let idf = build_idf(&[corpus[0].captions.clone(), vec![vec!["pad".into()]]]).unwrap();
        let mut rng = sub(5, "scst-sign");
        captioner.params.zero_grads();
        let diag = scst_grads(
            &mut captioner,
            &[0],
            &corpus,
            &graphs,
            &vocab,
            &idf,
            &mut rng,
            8,
        )
        .unwrap();
        let adv = diag.mean_sample_reward - diag.mean_greedy_reward;
        if adv == 0.0 {
            assert_eq!(diag.grad_abs_sum, 0.0);
        } else {
            assert!(diag.grad_abs_sum > 0.0);
            // loss = -(adv) * sum_logp, and sum_logp < 0 always.
            assert_eq!(diag.surrogate_loss > 0.0, adv > 0.0, "{diag:?}");
        }
    }

    #[test]
    fn surrogate_gradient_is_advantage_times_logprob_gradient() {
        // Replay the sampled rollout with a cloned rng and differentiate
        // sum log p directly; the scst buffers must equal that gradient
        // scaled by -(r_sample - r_greedy).
        let (vocab, corpus, graphs, mut captioner) = world();
        let idf = build_idf(&[corpus[0].captions.clone(), vec![vec!["pad".into()]]]).unwrap();
        captioner.params.zero_grads();
        let mut rng = sub(17, "scst-analytic");
        let mut replay_rng = rng.clone();
        let diag =
            scst_grads(&mut captioner, &[0], &corpus, &graphs, &vocab, &idf, &mut rng, 8).unwrap();
        let advantage = diag.mean_sample_reward - diag.mean_greedy_reward;
        if advantage == 0.0 {
            assert_eq!(diag.grad_abs_sum, 0.0);
            return;
        }

        // Direct gradient of sum log p over the identical rollout.
        let mut reference = captioner.params.clone();
        reference.zero_grads();
        {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &reference);
            let enc = captioner.encode(&tape, &binder, &vocab, &corpus[0], &graphs[0]).unwrap();
            let mut state = captioner.init_state(&tape, &binder, &enc);
            let mut prev = BOS_ID;
            let mut sum_logp: Option<crate::tensor::Tensor<'_, f32>> = None;
            for _ in 0..8 {
                let out = captioner.step(&tape, &binder, &state, prev, &enc).unwrap();
                let probs = out.word_dist.to_vec();
                let u: f32 = rand::Rng::gen(&mut replay_rng);
                let mut acc = 0.0f32;
                let mut choice = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        choice = i;
                        break;
                    }
                }
                let lp = out.word_dist.gather_elements(&[choice]).clamp(1e-12, 1.0).log().sum();
                sum_logp = Some(match sum_logp {
                    Some(a) => a.add(lp),
                    None => lp,
                });
                if choice == EOS_ID {
                    break;
                }
                state = out.state;
                prev = choice;
            }
            tape.backward(sum_logp.unwrap()).unwrap();
            binder.accumulate_grads(&mut reference).unwrap();
        }
        for (name, p) in captioner.params.iter() {
            let expected = &reference.get(name).grad;
            for (got, want) in p.grad.iter().zip(expected.iter()) {
                let scaled = -(advantage as f32) * want;
                assert!(
                    (got - scaled).abs() <= 1e-6 * scaled.abs().max(1.0),
                    "{name}: {got} vs {scaled}"
                );
            }
        }
    }

    #[test]
    fn trailing_window_helper() {
        assert!(trailing_windows_non_increasing(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], 2, 1e-9));
        assert!(!trailing_windows_non_increasing(&[1.0, 1.0, 5.0, 5.0], 2, 1e-9));
        assert!(trailing_windows_non_increasing(&[1.0], 10, 0.0), "short series passes");
    }
}
