//! End-to-end pipeline stages and their artifacts.
//!
//! Every stage writes its outputs under the configured output directory,
//! together with a manifest recording the config hash, the seed, and the
//! content hashes of the inputs it consumed. Stages that consume an artifact
//! verify both that the artifact is unmodified and that the inputs it was
//! built from still match the files on disk, so editing an upstream artifact
//! invalidates everything downstream.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{sha256_file, PipelineConfig};
use crate::corpus::{load_corpus, write_corpus};
use crate::decoder::{Captioner, GenerationOutput};
use crate::error::{Error, Result};
use crate::graph::{build_graph, load_graphs, write_graphs};
use crate::metrics::{bleu, build_idf, cider_d, rouge_l};
use crate::mil::{mil_diagnostics, train_mil, MilModel};
use crate::selfcheck::{run_all, CheckOutcome};
use crate::toygen::generate_toy_corpus;
use crate::train::{train_scst, train_xe, Phase};
use crate::vocab::{build_vocabularies, Vocabularies};

pub const CORPUS: &str = "corpus.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const MIL_CKPT: &str = "mil.ckpt";
pub const MIL_DIAG: &str = "mil_diagnostics.json";
pub const MIL_LOG: &str = "mil_log.jsonl";
pub const GRAPHS: &str = "graphs.jsonl";
pub const XE_CKPT: &str = "captioner_xe.ckpt";
pub const XE_LATEST: &str = "captioner_xe_latest.ckpt";
pub const XE_LOG: &str = "xe_log.jsonl";
pub const SCST_CKPT: &str = "captioner_scst.ckpt";
pub const SCST_LOG: &str = "scst_log.jsonl";
pub const IDF: &str = "idf.json";
pub const GENERATIONS: &str = "generations.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const EVALUATION: &str = "evaluation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenToy,
    BuildVocab,
    TrainMil,
    BuildGraphs,
    TrainCaptioner(Phase),
    Generate,
    Evaluate,
    Selfcheck,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock stamp; excluded from reproducibility comparisons.
    pub created_unix_ms: u128,
    /// Input artifact name -> content hash at production time.
    pub inputs: BTreeMap<String, String>,
    pub output_hash: String,
}

/// Line of the training metrics log.
#[derive(Debug, Serialize, Deserialize)]
pub struct LogLine {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_reward: Option<f64>,
}

/// One trace record per image: the generated words with aligned tags, the
/// three tag probabilities per step, and the attention rows.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub output: GenerationOutput,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub image_id: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub per_image_cider_d: Vec<(String, f64)>,
    /// Metrics this artifact does not produce.
    pub absent_metrics: Vec<String>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    out: PathBuf,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl Pipeline {
    /// The `CGVRG_OUT_DIR` environment variable overrides the configured
    /// output directory (and nothing else).
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = match std::env::var("CGVRG_OUT_DIR") {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&config.out_dir),
        };
        Ok(Pipeline { config, out })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.out.join(artifact)
    }

    fn manifest_path(&self, artifact: &str) -> PathBuf {
        self.out.join(format!("{artifact}.manifest.json"))
    }

    fn write_manifest(&self, artifact: &str, stage: &str, inputs: &[&str]) -> Result<()> {
        let mut input_hashes = BTreeMap::new();
        for name in inputs {
            input_hashes.insert(name.to_string(), sha256_file(&self.path(name))?);
        }
        let manifest = Manifest {
            stage: stage.to_string(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            created_unix_ms: now_ms(),
            inputs: input_hashes,
            output_hash: sha256_file(&self.path(artifact))?,
        };
        std::fs::write(self.manifest_path(artifact), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Assert an artifact exists, is unmodified since production, and that
    /// everything it was built from still matches the files on disk.
    pub fn require(&self, artifact: &str) -> Result<PathBuf> {
        let path = self.path(artifact);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.display().to_string()));
        }
        let mpath = self.manifest_path(artifact);
        if mpath.exists() {
            let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
            if manifest.output_hash != sha256_file(&path)? {
                return Err(Error::Stale(format!(
                    "{artifact} was modified after its manifest was written"
                )));
            }
            for (input, recorded) in &manifest.inputs {
                let current = self.path(input);
                if !current.exists() {
                    return Err(Error::Stale(format!(
                        "{artifact} was built from {input}, which no longer exists"
                    )));
                }
                if &sha256_file(&current)? != recorded {
                    return Err(Error::Stale(format!(
                        "{artifact} was built from an older {input}; rebuild it"
                    )));
                }
            }
        }
        Ok(path)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenToy => self.gen_toy(),
            Stage::BuildVocab => self.build_vocab(),
            Stage::TrainMil => self.train_mil(),
            Stage::BuildGraphs => self.build_graphs(),
            Stage::TrainCaptioner(phase) => self.train_captioner(phase),
            Stage::Generate => self.generate(None),
            Stage::Evaluate => self.evaluate(),
            Stage::Selfcheck => {
                let outcomes = self.selfcheck();
                for o in &outcomes {
                    println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                }
                if outcomes.iter().any(|o| !o.passed) {
                    return Err(Error::CheckFailed("selfcheck found failures".into()));
                }
                Ok(())
            }
        }
    }

    pub fn gen_toy(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let corpus = generate_toy_corpus(self.config.seed, &self.config.toy_params())?;
        write_corpus(&self.path(CORPUS), &corpus)?;
        self.write_manifest(CORPUS, "gen-toy", &[])
    }

    pub fn build_vocab(&self) -> Result<()> {
        let corpus = load_corpus(&self.require(CORPUS)?)?;
        let vocab = build_vocabularies(&corpus, &self.config.vocab_config())?;
        vocab.save(&self.path(VOCAB))?;
        self.write_manifest(VOCAB, "build-vocab", &[CORPUS])
    }

    fn load_vocab_and_corpus(&self) -> Result<(Vec<crate::corpus::ImageRecord>, Vocabularies)> {
        let corpus = load_corpus(&self.require(CORPUS)?)?;
        let vocab = Vocabularies::load(&self.require(VOCAB)?)?;
        Ok((corpus, vocab))
    }

    pub fn train_mil(&self) -> Result<()> {
        let (corpus, vocab) = self.load_vocab_and_corpus()?;
        let (model, log) = train_mil(&corpus, &vocab, &self.config.mil_config())?;
        checkpoint::save(&self.path(MIL_CKPT), &model.params)?;
        self.write_manifest(MIL_CKPT, "train-mil", &[CORPUS, VOCAB])?;

        let mut log_file = std::fs::File::create(self.path(MIL_LOG))?;
        for (epoch, loss) in log.epoch_loss.iter().enumerate() {
            let line = LogLine {
                phase: "mil".into(),
                step: epoch,
                loss: *loss,
                mean_reward: None,
                baseline_reward: None,
            };
            serde_json::to_writer(&mut log_file, &line)?;
            log_file.write_all(b"\n")?;
        }
        drop(log_file);
        self.write_manifest(MIL_LOG, "train-mil", &[CORPUS, VOCAB])?;

        let diag = mil_diagnostics(&model, &corpus, &vocab)?;
        std::fs::write(self.path(MIL_DIAG), serde_json::to_string_pretty(&diag)?)?;
        self.write_manifest(MIL_DIAG, "train-mil", &[CORPUS, VOCAB, MIL_CKPT])
    }

    pub fn build_graphs(&self) -> Result<()> {
        let (corpus, vocab) = self.load_vocab_and_corpus()?;
        let model = MilModel::from_params(checkpoint::load(&self.require(MIL_CKPT)?)?)?;
        let cfg = self.config.graph_config();
        let graphs: Result<Vec<_>> =
            corpus.iter().map(|img| build_graph(img, &model, &vocab, &cfg)).collect();
        write_graphs(&self.path(GRAPHS), &graphs?)?;
        self.write_manifest(GRAPHS, "build-graphs", &[CORPUS, VOCAB, MIL_CKPT])
    }

    pub fn train_captioner(&self, phase: Phase) -> Result<()> {
        let (corpus, vocab) = self.load_vocab_and_corpus()?;
        let graphs = load_graphs(&self.require(GRAPHS)?)?;
        match phase {
            Phase::Xe => {
                let mut rng = crate::rng::substream(self.config.seed, "captioner-init");
                let mut captioner = Captioner::<f32>::new(
                    self.config.captioner_dims(),
                    vocab.num_words(),
                    vocab.num_categories(),
                    vocab.num_predicates(),
                    crate::corpus::feature_dim(&corpus),
                    self.config.block,
                    &mut rng,
                )?;
                let mut log_lines = Vec::new();
                let latest = self.path(XE_LATEST);
                train_xe(
                    &mut captioner,
                    &corpus,
                    &graphs,
                    &vocab,
                    &self.config.xe_config(),
                    |epoch, loss, model| {
                        checkpoint::save(&latest, &model.params)?;
                        log_lines.push(LogLine {
                            phase: "xe".into(),
                            step: epoch,
                            loss,
                            mean_reward: None,
                            baseline_reward: None,
                        });
                        Ok(())
                    },
                )?;
                checkpoint::save(&self.path(XE_CKPT), &captioner.params)?;
                self.write_manifest(XE_CKPT, "train-captioner-xe", &[CORPUS, VOCAB, GRAPHS])?;
                self.write_log(XE_LOG, &log_lines)?;
                self.write_manifest(XE_LOG, "train-captioner-xe", &[CORPUS, VOCAB, GRAPHS])
            }
            Phase::Scst => {
                let params = checkpoint::load(&self.require(XE_CKPT)?)?;
                let mut captioner = Captioner::from_params(params, self.config.block)?;
                // Reward IDF comes from the training references, frozen
                // before any update.
                let refs: Vec<_> = corpus.iter().map(|img| img.captions.clone()).collect();
                let idf = build_idf(&refs)?;
                std::fs::write(self.path(IDF), serde_json::to_string(&idf)?)?;
                self.write_manifest(IDF, "train-captioner-scst", &[CORPUS])?;

                let mut log_lines = Vec::new();
                train_scst(
                    &mut captioner,
                    &corpus,
                    &graphs,
                    &vocab,
                    &idf,
                    &self.config.scst_config(),
                    |diag| {
                        log_lines.push(LogLine {
                            phase: "scst".into(),
                            step: diag.step,
                            loss: diag.surrogate_loss,
                            mean_reward: Some(diag.mean_sample_reward),
                            baseline_reward: Some(diag.mean_greedy_reward),
                        });
                        Ok(())
                    },
                )?;
                checkpoint::save(&self.path(SCST_CKPT), &captioner.params)?;
                self.write_manifest(SCST_CKPT, "train-captioner-scst", &[CORPUS, VOCAB, GRAPHS, XE_CKPT])?;
                self.write_log(SCST_LOG, &log_lines)?;
                self.write_manifest(SCST_LOG, "train-captioner-scst", &[CORPUS, VOCAB, GRAPHS, XE_CKPT])
            }
        }
    }

    fn write_log(&self, artifact: &str, lines: &[LogLine]) -> Result<()> {
        let mut file = std::fs::File::create(self.path(artifact))?;
        for line in lines {
            serde_json::to_writer(&mut file, line)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Decode every image with beam search using the newest captioner
    /// checkpoint (self-critical if present, else cross-entropy).
    pub fn generate(&self, beam_override: Option<usize>) -> Result<()> {
        let (corpus, vocab) = self.load_vocab_and_corpus()?;
        let graphs = load_graphs(&self.require(GRAPHS)?)?;
        let ckpt = if self.path(SCST_CKPT).exists() {
            self.require(SCST_CKPT)?
        } else {
            self.require(XE_CKPT)?
        };
        let ckpt_name = ckpt.file_name().unwrap().to_string_lossy().to_string();
        let captioner = Captioner::from_params(checkpoint::load(&ckpt)?, self.config.block)?;
        let beam = beam_override.unwrap_or(self.config.beam_width);

        let mut outputs = Vec::with_capacity(corpus.len());
        for (img, graph) in corpus.iter().zip(graphs.iter()) {
            let mut hyps = captioner.beam_search(&vocab, img, graph, beam, self.config.max_len)?;
            outputs.push((img.image_id.clone(), hyps.remove(0)));
        }

        let mut gen_file = std::fs::File::create(self.path(GENERATIONS))?;
        for (image_id, out) in &outputs {
            let rec = GenerationRecord {
                image_id: image_id.clone(),
                caption: out.words.join(" "),
                score: out.score,
            };
            serde_json::to_writer(&mut gen_file, &rec)?;
            gen_file.write_all(b"\n")?;
        }
        drop(gen_file);
        emit_traces(&outputs, &self.out)?;
        self.write_manifest(GENERATIONS, "generate", &[CORPUS, VOCAB, GRAPHS, &ckpt_name])?;
        self.write_manifest(TRACES, "generate", &[CORPUS, VOCAB, GRAPHS, &ckpt_name])
    }

    pub fn evaluate(&self) -> Result<()> {
        let corpus = load_corpus(&self.require(CORPUS)?)?;
        let gen_path = self.require(GENERATIONS)?;
        let mut candidates = Vec::new();
        let mut ids = Vec::new();
        for line in std::fs::read_to_string(&gen_path)?.lines().filter(|l| !l.trim().is_empty()) {
            let rec: GenerationRecord = serde_json::from_str(line)?;
            candidates.push(rec.caption.split_whitespace().map(str::to_string).collect::<Vec<_>>());
            ids.push(rec.image_id);
        }
        let by_id: BTreeMap<&str, &crate::corpus::ImageRecord> =
            corpus.iter().map(|img| (img.image_id.as_str(), img)).collect();
        let mut reference_sets = Vec::with_capacity(ids.len());
        for id in &ids {
            let img = by_id.get(id.as_str()).ok_or_else(|| {
                Error::MissingPrerequisite(format!("generation for unknown image {id}"))
            })?;
            reference_sets.push(img.captions.clone());
        }
        let idf = build_idf(&reference_sets)?;
        let (per_image, mean_cider) = cider_d(&candidates, &reference_sets, &idf)?;
        let report = EvaluationReport {
            bleu: bleu(&candidates, &reference_sets, 4)?,
            rouge_l: rouge_l(&candidates, &reference_sets)?,
            cider_d: mean_cider,
            per_image_cider_d: ids.into_iter().zip(per_image).collect(),
            absent_metrics: vec!["METEOR".into(), "SPICE".into()],
        };
        std::fs::write(self.path(EVALUATION), serde_json::to_string_pretty(&report)?)?;
        self.write_manifest(EVALUATION, "evaluate", &[CORPUS, GENERATIONS])
    }

    pub fn selfcheck(&self) -> Vec<CheckOutcome> {
        run_all(self.config.seed)
    }
}

/// Write one structured trace record per image; the record carries the
/// generated words, their tags, the three tag probabilities per step, and
/// the attention rows over object and predicate nodes.
pub fn emit_traces(outputs: &[(String, GenerationOutput)], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(TRACES);
    let mut file = std::fs::File::create(&path)?;
    for (image_id, output) in outputs {
        let rec = TraceRecord { image_id: image_id.clone(), output: output.clone() };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(dir: &Path) -> PipelineConfig {
        PipelineConfig {
            out_dir: dir.display().to_string(),
            toy_images: 6,
            xe_epochs: 3,
            scst_steps: 2,
            mil_epochs: 3,
            max_len: 26,
            ..Default::default()
        }
    }

    #[test]
    fn missing_prerequisite_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(quick_config(dir.path())).unwrap();
        let err = pipeline.build_vocab().unwrap_err();
        match err {
            Error::MissingPrerequisite(msg) => assert!(msg.contains("corpus.jsonl"), "{msg}"),
            other => panic!("expected missing prerequisite, got {other}"),
        }
    }

    #[test]
    fn stale_input_invalidates_downstream_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(quick_config(dir.path())).unwrap();
        pipeline.gen_toy().unwrap();
        pipeline.build_vocab().unwrap();
        pipeline.train_mil().unwrap();

        // Rewrite the vocabulary: the detector checkpoint must now be
        // rejected as stale.
        pipeline.build_vocab().unwrap();
        let corpus = load_corpus(&pipeline.path(CORPUS)).unwrap();
        let cfg = crate::vocab::VocabConfig { predicate_cap: 1, ..Default::default() };
        let small = build_vocabularies(&corpus, &cfg).unwrap();
        small.save(&pipeline.path(VOCAB)).unwrap();

        let err = pipeline.require(MIL_CKPT).unwrap_err();
        assert!(matches!(err, Error::Stale(_)), "{err}");
    }

    #[test]
    fn tampered_artifact_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(quick_config(dir.path())).unwrap();
        pipeline.gen_toy().unwrap();
        let path = pipeline.path(CORPUS);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(b'\n');
        std::fs::write(&path, bytes).unwrap();
        let err = pipeline.require(CORPUS).unwrap_err();
        assert!(matches!(err, Error::Stale(_)));
    }

    #[test]
    fn full_pipeline_runs_on_a_small_config() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(quick_config(dir.path())).unwrap();
        pipeline.gen_toy().unwrap();
        pipeline.build_vocab().unwrap();
        pipeline.train_mil().unwrap();
        pipeline.build_graphs().unwrap();
        pipeline.train_captioner(Phase::Xe).unwrap();
        pipeline.train_captioner(Phase::Scst).unwrap();
        pipeline.generate(Some(2)).unwrap();
        pipeline.evaluate().unwrap();

        for artifact in [
            CORPUS, VOCAB, MIL_CKPT, MIL_DIAG, GRAPHS, XE_CKPT, SCST_CKPT, GENERATIONS, TRACES,
            EVALUATION,
        ] {
            assert!(pipeline.path(artifact).exists(), "{artifact}");
        }
        let report: EvaluationReport =
            serde_json::from_str(&std::fs::read_to_string(pipeline.path(EVALUATION)).unwrap()).unwrap();
        assert_eq!(report.bleu.len(), 4);
        assert_eq!(report.per_image_cider_d.len(), 6);
        assert!(report.absent_metrics.contains(&"METEOR".to_string()));

        // Trace records parse and are internally consistent.
        let traces = std::fs::read_to_string(pipeline.path(TRACES)).unwrap();
        for line in traces.lines() {
            let rec: TraceRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.output.words.len(), rec.output.tag_probs.len());
        }
    }
}
