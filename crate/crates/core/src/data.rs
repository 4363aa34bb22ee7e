//! Corpus loading, vocabulary, tokenization and the known-class split.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const DEFAULT_MAX_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorpus {
    pub records: Vec<Record>,
    pub split: Split,
}

impl RawCorpus {
    /// Sorted distinct labels.
    pub fn label_names(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Reads a `text<TAB>label` file. Blank lines are skipped, order is kept.
pub fn load_corpus(path: &Path, split: Split) -> Result<RawCorpus> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&content, path, split)
}

fn parse_corpus(content: &str, path: &Path, split: Split) -> Result<RawCorpus> {
    let malformed = |line: usize, reason: &str| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| malformed(i + 1, "expected text<TAB>label"))?;
        let (text, label) = (text.trim(), label.trim());
        if text.is_empty() {
            return Err(malformed(i + 1, "empty text"));
        }
        if label.is_empty() {
            return Err(malformed(i + 1, "empty label"));
        }
        records.push(Record {
            text: text.to_string(),
            label: label.to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(RawCorpus { records, split })
}

/// Train, validation and test corpora of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub train: RawCorpus,
    pub valid: Option<RawCorpus>,
    pub test: RawCorpus,
}

/// Loads `train.tsv`, `test.tsv` and, when present, `valid.tsv`.
pub fn load_dataset_dir(dir: &Path) -> Result<DatasetFiles> {
    let path = |s: Split| -> PathBuf { dir.join(s.file_name()) };
    let valid_path = path(Split::Valid);
    Ok(DatasetFiles {
        train: load_corpus(&path(Split::Train), Split::Train)?,
        valid: if valid_path.exists() {
            Some(load_corpus(&valid_path, Split::Valid)?)
        } else {
            None
        },
        test: load_corpus(&path(Split::Test), Split::Test)?,
    })
}

/// Lowercased whitespace tokens with non-alphanumeric characters removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`, truncated to the first `max_len`. A text with no
    /// surviving tokens encodes as a single UNK.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .take(max_len.max(1))
            .map(|t| self.id(t))
            .collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }
}

/// Tokens with frequency >= `min_freq`, ordered by (frequency desc, token).
pub fn build_vocabulary(corpus: &RawCorpus, min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for record in &corpus.records {
        for token in tokenize(&record.text) {
            *counts.entry(token).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocabulary::from(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub token_ids: Vec<usize>,
    pub label: usize,
}

/// Persisted description of which classes are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub proportion: f64,
    pub seed: u64,
    /// Known labels in id order: the i-th entry receives id i.
    pub known_labels: Vec<String>,
}

impl SplitPlan {
    pub fn num_known(&self) -> usize {
        self.known_labels.len()
    }

    /// Id given to every unknown-class test instance.
    pub fn open_id(&self) -> usize {
        self.known_labels.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Samples `round(proportion * num_classes)` class ids uniformly without
/// replacement, returned sorted.
pub fn sample_known_classes(num_classes: usize, proportion: f64, seed: u64) -> Result<Vec<usize>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::InvalidSplit(format!(
            "proportion {proportion} outside (0, 1]"
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidSplit(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let k = (proportion * num_classes as f64).round() as usize;
    if k == 0 {
        return Err(Error::InvalidSplit(format!(
            "proportion {proportion} of {num_classes} classes leaves no known class"
        )));
    }
    let mut rng = rng::stream(seed, "split");
    let mut ids = index::sample(&mut rng, num_classes, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Split plan over the sorted label names of a training corpus.
pub fn make_split_plan(labels: &[String], proportion: f64, seed: u64) -> Result<SplitPlan> {
    let ids = sample_known_classes(labels.len(), proportion, seed)?;
    Ok(SplitPlan {
        proportion,
        seed,
        known_labels: ids.into_iter().map(|i| labels[i].clone()).collect(),
    })
}

/// Instances of one split after applying a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub instances: Vec<LabeledInstance>,
    /// Record index in the source corpus for each instance.
    pub source_index: Vec<usize>,
    pub num_known: usize,
}

impl SplitData {
    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn open_id(&self) -> usize {
        self.num_known
    }
}

/// Filters train/valid to known classes; relabels unknown test instances as open.
pub fn apply_split(
    corpus: &RawCorpus,
    plan: &SplitPlan,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SplitData> {
    let remap: HashMap<&str, usize> = plan
        .known_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let open = plan.open_id();
    let mut instances = Vec::new();
    let mut source_index = Vec::new();
    for (i, record) in corpus.records.iter().enumerate() {
        let label = match (remap.get(record.label.as_str()), corpus.split) {
            (Some(&id), _) => id,
            (None, Split::Test) => open,
            (None, _) => continue,
        };
        instances.push(LabeledInstance {
            token_ids: vocab.encode(&record.text, max_len),
            label,
        });
        source_index.push(i);
    }
    if corpus.split == Split::Train {
        let mut seen = vec![false; plan.num_known()];
        for inst in &instances {
            seen[inst.label] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidSplit(format!(
                "known class {:?} has no training instances",
                plan.known_labels[k]
            )));
        }
    }
    Ok(SplitData {
        instances,
        source_index,
        num_known: plan.num_known(),
    })
}
