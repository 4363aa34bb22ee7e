//! End-to-end commands and the run directory layout.
//!
//! A run directory holds:
//!
//! ```text
//! config.json        resolved run configuration
//! split_plan.json    known classes
//! vocab.json         token list, id = position
//! encoder.ckpt       stage-1 encoder
//! stage1_trace.csv   epoch,loss,intra_class_cos,inter_class_cos
//! boundary.json      centers and radii
//! radius_trace.csv   radii per epoch
//! report.json        test metrics
//! sweep.csv          macro F1 per boundary ratio
//! distances.csv      nearest-center distances of test instances
//! run_meta.json      validation protocol and closed-set validation accuracy
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{self, BoundaryModel, Stage2Config};
use crate::data::{self, DatasetFiles, RawCorpus, SplitData, SplitPlan, Vocabulary};
use crate::encoder::{self, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, SweepRow};
use crate::losses::Stage1Config;
use crate::stage1;

pub const OUTPUT_DIR_ENV: &str = "OPENINTENT_OUTPUT_DIR";

pub const CONFIG_FILE: &str = "config.json";
pub const PLAN_FILE: &str = "split_plan.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const STAGE1_TRACE_FILE: &str = "stage1_trace.csv";
pub const BOUNDARY_FILE: &str = "boundary.json";
pub const RADIUS_TRACE_FILE: &str = "radius_trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const META_FILE: &str = "run_meta.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub proportion: f64,
    /// Seed of the known-class split, kept apart from training seeds.
    pub split_seed: u64,
    pub min_freq: usize,
    pub max_len: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
    /// Externally computed train/test vectors, keyed by corpus line index.
    /// When both are set the encoder is bypassed.
    pub precomputed_train: Option<PathBuf>,
    pub precomputed_test: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            proportion: 1.0,
            split_seed: 0,
            min_freq: 1,
            max_len: data::DEFAULT_MAX_LEN,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seeds: vec![0],
            ratios: eval::default_ratios(),
            precomputed_train: None,
            precomputed_test: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "proportion {} outside (0, 1]",
                self.proportion
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.ratios.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::InvalidConfig("sweep ratios must be > 0".into()));
        }
        if self.precomputed_train.is_some() != self.precomputed_test.is_some() {
            return Err(Error::InvalidConfig(
                "precomputed embeddings need both train and test files".into(),
            ));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Copy with both training stages seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.stage1.seed = seed;
        c.stage2.seed = seed;
        c
    }

    fn uses_precomputed(&self) -> bool {
        self.precomputed_train.is_some()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("missing {}", path.display())))
    }
}

/// Writes the split plan for a dataset directory.
pub fn cmd_prepare(dataset_dir: &Path, proportion: f64, seed: u64, out_dir: &Path) -> Result<SplitPlan> {
    let train = data::load_corpus(&dataset_dir.join(data::Split::Train.file_name()), data::Split::Train)?;
    let plan = data::make_split_plan(&train.label_names(), proportion, seed)?;
    ensure_dir(out_dir)?;
    plan.save(&out_dir.join(PLAN_FILE))?;
    Ok(plan)
}

fn load_or_prepare_plan(config: &RunConfig, run_dir: &Path) -> Result<SplitPlan> {
    let path = run_dir.join(PLAN_FILE);
    if path.exists() {
        SplitPlan::load(&path)
    } else {
        cmd_prepare(&config.dataset_dir, config.proportion, config.split_seed, run_dir)
    }
}

fn known_train_corpus(files: &DatasetFiles, plan: &SplitPlan) -> RawCorpus {
    RawCorpus {
        records: files
            .train
            .records
            .iter()
            .filter(|r| plan.known_labels.contains(&r.label))
            .cloned()
            .collect(),
        split: files.train.split,
    }
}

/// Stage 1: builds the vocabulary from known-class training text and trains
/// the encoder.
pub fn cmd_train_encoder(config: &RunConfig, run_dir: &Path) -> Result<stage1::Stage1Result> {
    config.validate()?;
    ensure_dir(run_dir)?;
    config.save(&run_dir.join(CONFIG_FILE))?;
    let plan = load_or_prepare_plan(config, run_dir)?;
    let files = data::load_dataset_dir(&config.dataset_dir)?;
    let vocab = data::build_vocabulary(&known_train_corpus(&files, &plan), config.min_freq);
    let train = data::apply_split(&files.train, &plan, &vocab, config.max_len)?;
    let result = stage1::train_stage1(&train.instances, plan.num_known(), vocab.size(), &config.stage1)?;
    write_json(&run_dir.join(VOCAB_FILE), &vocab)?;
    encoder::save_checkpoint(&result.encoder, &run_dir.join(ENCODER_FILE))?;
    stage1::write_trace(&result.trace, &run_dir.join(STAGE1_TRACE_FILE))?;
    Ok(result)
}

/// Frozen embeddings of one split, from the checkpointed encoder or from
/// precomputed vectors.
struct Embedder {
    source: EmbedSource,
}

enum EmbedSource {
    Encoder { model: EncoderModel, vocab: Vocabulary },
    Precomputed { train: encoder::PrecomputedEmbeddings, test: encoder::PrecomputedEmbeddings },
}

impl Embedder {
    fn open(config: &RunConfig, run_dir: &Path) -> Result<Self> {
        if let (Some(train), Some(test)) = (&config.precomputed_train, &config.precomputed_test) {
            let train = encoder::load_precomputed(train, None)?;
            let test = encoder::load_precomputed(test, Some(train.dim()))?;
            return Ok(Embedder { source: EmbedSource::Precomputed { train, test } });
        }
        let ckpt = run_dir.join(ENCODER_FILE);
        let vocab_path = run_dir.join(VOCAB_FILE);
        require(&ckpt)?;
        require(&vocab_path)?;
        let model = encoder::load_checkpoint(&ckpt)?;
        let vocab: Vocabulary = serde_json::from_str(
            &fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?,
        )?;
        if model.hidden() != config.stage1.hidden {
            return Err(Error::Checkpoint(format!(
                "encoder H = {} but config expects {}",
                model.hidden(),
                config.stage1.hidden
            )));
        }
        if model.vocab_size() != vocab.size() {
            return Err(Error::Checkpoint(format!(
                "encoder vocabulary {} != vocab.json size {}",
                model.vocab_size(),
                vocab.size()
            )));
        }
        Ok(Embedder { source: EmbedSource::Encoder { model, vocab } })
    }

    fn max_len_vocab(&self) -> Option<&Vocabulary> {
        match &self.source {
            EmbedSource::Encoder { vocab, .. } => Some(vocab),
            EmbedSource::Precomputed { .. } => None,
        }
    }

    fn embed(&self, corpus: &RawCorpus, plan: &SplitPlan, max_len: usize) -> Result<(SplitData, Array2<f64>)> {
        let empty = Vocabulary::from(vec!["<pad>".to_string(), "<unk>".to_string()]);
        let vocab = self.max_len_vocab().unwrap_or(&empty);
        let split = data::apply_split(corpus, plan, vocab, max_len)?;
        let z = match &self.source {
            EmbedSource::Encoder { model, .. } => encoder::embed_all(model, &split.instances)?,
            EmbedSource::Precomputed { train, test } => {
                let table = if corpus.split == data::Split::Test { test } else { train };
                table.rows(&split.source_index)?
            }
        };
        Ok((split, z))
    }
}

/// Stage 2: learns radii over the frozen training embeddings.
pub fn cmd_train_boundary(config: &RunConfig, run_dir: &Path) -> Result<boundary::BoundaryResult> {
    config.validate()?;
    ensure_dir(run_dir)?;
    let plan = load_or_prepare_plan(config, run_dir)?;
    let embedder = Embedder::open(config, run_dir)?;
    let files = data::load_dataset_dir(&config.dataset_dir)?;
    let (train, z) = embedder.embed(&files.train, &plan, config.max_len)?;
    let result = boundary::train_boundary(&z, &train.labels(), plan.known_labels.clone(), &config.stage2)?;
    result.model.save(&run_dir.join(BOUNDARY_FILE))?;
    write_text(
        &run_dir.join(RADIUS_TRACE_FILE),
        &boundary::radius_trace_csv(&result.radius_trace),
    )?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub validation: String,
    pub valid_instances: usize,
    /// Fraction of known-class validation instances assigned their own class.
    pub valid_known_accuracy: Option<f64>,
    pub best_sweep_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub sweep: Vec<SweepRow>,
    pub meta: RunMeta,
}

pub fn cmd_evaluate(config: &RunConfig, run_dir: &Path) -> Result<Evaluation> {
    config.validate()?;
    let plan_path = run_dir.join(PLAN_FILE);
    let boundary_path = run_dir.join(BOUNDARY_FILE);
    require(&plan_path)?;
    require(&boundary_path)?;
    let plan = SplitPlan::load(&plan_path)?;
    let model = BoundaryModel::load(&boundary_path)?;
    if model.labels != plan.known_labels {
        return Err(Error::Checkpoint("boundary labels differ from split plan".into()));
    }
    let embedder = Embedder::open(config, run_dir)?;
    if let EmbedSource::Encoder { model: enc, .. } = &embedder.source {
        if enc.hidden() != model.hidden {
            return Err(Error::Checkpoint(format!(
                "boundary H = {} but encoder H = {}",
                model.hidden,
                enc.hidden()
            )));
        }
    }
    let files = data::load_dataset_dir(&config.dataset_dir)?;
    let (test, z) = embedder.embed(&files.test, &plan, config.max_len)?;
    if z.ncols() != model.hidden {
        return Err(Error::Checkpoint(format!(
            "boundary H = {} but embeddings have {} dimensions",
            model.hidden,
            z.ncols()
        )));
    }
    let truth = test.labels();
    let report = eval::evaluate(&model, &z, &truth)?;
    let sweep = eval::boundary_sweep(&model, &z, &truth, &config.ratios)?;
    eval::export_distances(&model, &z, &truth, &test.source_index, &run_dir.join(DISTANCES_FILE))?;

    let (valid_instances, valid_known_accuracy) = match &files.valid {
        Some(valid) if !config.uses_precomputed() => {
            let (v, zv) = embedder.embed(valid, &plan, config.max_len)?;
            let predicted = eval::predict_all(&model, &zv, 1.0);
            let hits = predicted.iter().zip(v.labels()).filter(|(p, t)| **p == *t).count();
            let acc = (!predicted.is_empty()).then(|| hits as f64 / predicted.len() as f64);
            (predicted.len(), acc)
        }
        _ => (0, None),
    };
    let meta = RunMeta {
        validation: "known-only".to_string(),
        valid_instances,
        valid_known_accuracy,
        best_sweep_ratio: eval::best_ratio(&sweep),
    };
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    write_text(&run_dir.join(SWEEP_FILE), &eval::sweep_csv(&sweep))?;
    write_json(&run_dir.join(META_FILE), &meta)?;
    Ok(Evaluation { report, sweep, meta })
}

/// All stages for a single seed in `run_dir`.
pub fn run_pipeline(config: &RunConfig, run_dir: &Path) -> Result<Evaluation> {
    ensure_dir(run_dir)?;
    config.save(&run_dir.join(CONFIG_FILE))?;
    cmd_prepare(&config.dataset_dir, config.proportion, config.split_seed, run_dir)?;
    if !config.uses_precomputed() {
        cmd_train_encoder(config, run_dir)?;
    }
    cmd_train_boundary(config, run_dir)?;
    cmd_evaluate(config, run_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub runs: Vec<String>,
    pub loss: String,
    pub mode: boundary::BoundaryMode,
    pub accuracy: MetricSummary,
    pub macro_f1_all: MetricSummary,
    pub macro_f1_known: MetricSummary,
    pub f1_unknown: MetricSummary,
}

pub fn run_dir_name(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Runs the pipeline once per seed (in parallel) and writes mean/std of
/// every metric to `aggregate.json`.
pub fn cmd_experiment(config: &RunConfig) -> Result<Aggregate> {
    config.validate()?;
    ensure_dir(&config.output_dir)?;
    config.save(&config.output_dir.join(CONFIG_FILE))?;
    let results: Vec<EvalReport> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = config.with_seed(seed);
            run_pipeline(&run, &config.output_dir.join(run_dir_name(seed))).map(|e| e.report)
        })
        .collect::<Result<_>>()?;
    let metric = |f: fn(&EvalReport) -> f64| MetricSummary::from_values(results.iter().map(f).collect());
    let aggregate = Aggregate {
        seeds: config.seeds.clone(),
        runs: config.seeds.iter().map(|&s| run_dir_name(s)).collect(),
        loss: config.stage1.loss.name().to_string(),
        mode: config.stage2.mode,
        accuracy: metric(|r| r.accuracy),
        macro_f1_all: metric(|r| r.macro_f1_all),
        macro_f1_known: metric(|r| r.macro_f1_known),
        f1_unknown: metric(|r| r.f1_unknown),
    };
    write_json(&config.output_dir.join(AGGREGATE_FILE), &aggregate)?;
    Ok(aggregate)
}
