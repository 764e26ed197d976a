//! Dataset ingestion, splitting, negative-emotion filtering, and the
//! synthetic corpus generator used for desk-scale experiments.
//!
//! On-disk format is JSON lines: `{"text": "...", "label": "..."}` for
//! single-label tasks, `{"text": "...", "labels": ["...", ...]}` for
//! multi-label tasks. Label maps are JSON objects mapping names to ids.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::TaskKind;
use crate::rng::{substream, RngStream};

/// One text with its label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub labels: Vec<usize>,
}

/// An in-memory dataset with a fixed label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub task: TaskKind,
    /// Index is the label id.
    pub label_names: Vec<String>,
    pub examples: Vec<Example>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        task: TaskKind,
        label_names: Vec<String>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            name: name.into(),
            task,
            label_names,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.label_names.len();
        for ex in &self.examples {
            if self.task == TaskKind::Single && ex.labels.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "single-label example carries {} labels",
                    ex.labels.len()
                )));
            }
            if let Some(&bad) = ex.labels.iter().find(|&&l| l >= n) {
                return Err(Error::LabelOutOfRange {
                    id: bad,
                    num_labels: n,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == name)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct SingleRecord {
    text: String,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct MultiRecord {
    text: String,
    labels: Vec<String>,
}

/// Loads a JSONL dataset. With a fixed `label_map`, unknown labels are
/// errors; otherwise the map is inferred from the sorted set of names seen.
pub fn load_dataset(
    path: &Path,
    task: TaskKind,
    label_map: Option<&BTreeMap<String, usize>>,
) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (text, names) = match task {
            TaskKind::Single => {
                let rec: SingleRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Malformed {
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                (rec.text, vec![rec.label])
            }
            TaskKind::Multi => {
                let rec: MultiRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Malformed {
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                (rec.text, rec.labels)
            }
        };
        rows.push((text, names));
    }

    let label_names: Vec<String> = match label_map {
        Some(map) => {
            let mut names = vec![String::new(); map.len()];
            for (name, &id) in map {
                if id >= names.len() || !names[id].is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "label map is not a bijection onto 0..{}",
                        map.len()
                    )));
                }
                names[id] = name.clone();
            }
            names
        }
        None => {
            let mut set: Vec<String> = rows
                .iter()
                .flat_map(|(_, names)| names.iter().cloned())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            set.sort();
            set
        }
    };

    let index: BTreeMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut examples = Vec::with_capacity(rows.len());
    for (text, names) in rows {
        let mut labels = Vec::with_capacity(names.len());
        for name in names {
            match index.get(name.as_str()) {
                Some(&id) => labels.push(id),
                None => {
                    return Err(Error::UnknownLabel {
                        label: name,
                        known: label_names.clone(),
                    })
                }
            }
        }
        examples.push(Example { text, labels });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    LabeledDataset::new(name, task, label_names, examples)
}

/// Writes a dataset back to JSONL in canonical form.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for ex in &ds.examples {
        let line = match ds.task {
            TaskKind::Single => serde_json::to_string(&SingleRecord {
                text: ex.text.clone(),
                label: ds.label_names[ex.labels[0]].clone(),
            })?,
            TaskKind::Multi => serde_json::to_string(&MultiRecord {
                text: ex.text.clone(),
                labels: ex.labels.iter().map(|&l| ds.label_names[l].clone()).collect(),
            })?,
        };
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Writes a label map as a JSON object name → id.
pub fn save_label_map(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let map: BTreeMap<&str, usize> = ds
        .label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

pub fn load_label_map(path: &Path) -> Result<BTreeMap<String, usize>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// The datasets one experiment plan resolves to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub hmc: LabeledDataset,
    pub emotion: Option<LabeledDataset>,
    pub source_hmc: Option<LabeledDataset>,
}

impl DatasetBundle {
    pub fn hmc_only(hmc: LabeledDataset) -> Self {
        DatasetBundle {
            hmc,
            emotion: None,
            source_hmc: None,
        }
    }
}

/// Train / validation / test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// The index partition behind a split, for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Computes the shuffled 80/10/10 index partition: round(0.8·N) train,
/// round(0.1·N) validation, remainder test.
pub fn split_indices(n: usize, seed: u64) -> Result<SplitManifest> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset of {n} examples is too small to split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    substream(seed, "split").shuffle(&mut order);
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    Ok(SplitManifest {
        seed,
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

fn take(ds: &LabeledDataset, indices: &[usize]) -> LabeledDataset {
    LabeledDataset {
        name: ds.name.clone(),
        task: ds.task,
        label_names: ds.label_names.clone(),
        examples: indices.iter().map(|&i| ds.examples[i].clone()).collect(),
    }
}

/// Random 80/10/10 split, deterministic per seed.
pub fn split_dataset(ds: &LabeledDataset, seed: u64) -> Result<SplitDataset> {
    let manifest = split_indices(ds.len(), seed)?;
    Ok(SplitDataset {
        train: take(ds, &manifest.train),
        validation: take(ds, &manifest.validation),
        test: take(ds, &manifest.test),
    })
}

/// Optional stratified variant (single-label only): the 80/10/10 rule is
/// applied inside every class. Off by default everywhere.
pub fn split_dataset_stratified(ds: &LabeledDataset, seed: u64) -> Result<SplitDataset> {
    if ds.task != TaskKind::Single {
        return Err(Error::InvalidArgument(
            "stratified splitting requires a single-label dataset".into(),
        ));
    }
    if ds.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} examples is too small to split",
            ds.len()
        )));
    }
    let mut rng = substream(seed, "split-stratified");
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.num_labels() {
        let mut members: Vec<usize> = ds
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.labels[0] == class)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut members);
        let n_train = (0.8 * members.len() as f64).round() as usize;
        let n_val = (0.1 * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..n_train]);
        validation.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    Ok(SplitDataset {
        train: take(ds, &train),
        validation: take(ds, &validation),
        test: take(ds, &test),
    })
}

pub const GE_NEGATIVE: [&str; 5] = ["anger", "disgust", "fear", "sadness", "neutral"];
pub const SE_NEGATIVE: [&str; 5] = ["anger", "disgust", "fear", "pessimism", "sadness"];

/// Label subset used for negative-emotion experiments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionSubset {
    GeNegative,
    SeNegative,
    Custom(Vec<String>),
}

impl EmotionSubset {
    pub fn label_names(&self) -> Vec<String> {
        match self {
            EmotionSubset::GeNegative => GE_NEGATIVE.iter().map(|s| s.to_string()).collect(),
            EmotionSubset::SeNegative => SE_NEGATIVE.iter().map(|s| s.to_string()).collect(),
            EmotionSubset::Custom(names) => names.clone(),
        }
    }
}

/// Restricts an emotion dataset to the given label subset: keeps examples
/// with at least one allowed label, strips disallowed labels, and relabels
/// against the reduced map (original id order preserved).
pub fn filter_negative_emotions(
    ds: &LabeledDataset,
    subset: &EmotionSubset,
) -> Result<LabeledDataset> {
    let allowed_names = subset.label_names();
    for name in &allowed_names {
        if ds.label_id(name).is_none() {
            return Err(Error::UnknownLabel {
                label: name.clone(),
                known: ds.label_names.clone(),
            });
        }
    }
    let allowed: HashSet<usize> = allowed_names
        .iter()
        .map(|n| ds.label_id(n).expect("checked above"))
        .collect();

    let kept_names: Vec<String> = ds
        .label_names
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed.contains(i))
        .map(|(_, n)| n.clone())
        .collect();
    let remap: BTreeMap<usize, usize> = ds
        .label_names
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed.contains(i))
        .enumerate()
        .map(|(new, (old, _))| (old, new))
        .collect();

    let examples: Vec<Example> = ds
        .examples
        .iter()
        .filter_map(|ex| {
            let labels: Vec<usize> = ex
                .labels
                .iter()
                .filter_map(|l| remap.get(l).copied())
                .collect();
            if labels.is_empty() {
                None
            } else {
                Some(Example {
                    text: ex.text.clone(),
                    labels,
                })
            }
        })
        .collect();

    LabeledDataset::new(
        format!("{}-neg", ds.name),
        ds.task,
        kept_names,
        examples,
    )
}

/// Parameters of the synthetic paired-corpus generator.
///
/// Texts are filler words plus one theme word and one emotion word. The
/// theme word is drawn from the gold label's pool with probability
/// `1 − theme_noise` (otherwise from a shared, uninformative pool); the
/// emotion word is drawn from the emotions consistent with the gold label
/// with probability `correlation` (otherwise uniformly from all emotions).
/// The paired emotion dataset labels texts with exactly the emotions whose
/// marker words they contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub num_hmc_labels: usize,
    pub emotion_labels: Vec<String>,
    /// ρ: probability that the injected emotion word is consistent with
    /// the HMC label.
    pub correlation: f64,
    /// Theme vocabulary size per HMC label (and for the shared pool).
    pub theme_words_per_label: usize,
    /// Probability that the theme word carries no label information.
    pub theme_noise: f64,
    pub emotion_words_per_label: usize,
    pub seed: u64,
    /// When set, example generation draws from this seed while the word
    /// pools still derive from `seed`: two specs sharing `seed` share a
    /// vocabulary but produce disjoint corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 2000,
            num_hmc_labels: 2,
            emotion_labels: [
                "anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            correlation: 0.8,
            theme_words_per_label: 12,
            theme_noise: 0.0,
            emotion_words_per_label: 24,
            seed: 7,
            data_seed: None,
        }
    }
}

const FILLERS: [&str; 20] = [
    "the", "a", "i", "my", "we", "today", "was", "is", "and", "then", "very", "some", "with",
    "about", "it", "this", "that", "on", "at", "for",
];

const SYLLABLES: [&str; 20] = [
    "ba", "co", "di", "fu", "ga", "hi", "jo", "ka", "lu", "me", "ni", "po", "qua", "ri", "su",
    "ta", "vo", "wi", "ya", "zu",
];

const NEGATIVE_EMOTION_NAMES: [&str; 5] = ["anger", "disgust", "fear", "pessimism", "sadness"];

/// Marker-word pools behind one [`SynthSpec`]; deterministic per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLexicon {
    /// One pool per HMC label.
    pub theme: Vec<Vec<String>>,
    /// Shared pool carrying no label signal.
    pub shared_theme: Vec<String>,
    /// One pool per emotion label.
    pub emotion: Vec<Vec<String>>,
}

impl SyntheticLexicon {
    /// Which emotion's pool a word belongs to, if any.
    pub fn emotion_of(&self, word: &str) -> Option<usize> {
        self.emotion
            .iter()
            .position(|pool| pool.iter().any(|w| w == word))
    }
}

fn pseudo_word(rng: &mut RngStream, taken: &mut HashSet<String>) -> String {
    loop {
        let syllable_count = 2 + rng.below(2);
        let word: String = (0..syllable_count)
            .map(|_| *rng.choose(&SYLLABLES))
            .collect();
        if !FILLERS.contains(&word.as_str()) && taken.insert(word.clone()) {
            return word;
        }
    }
}

/// Builds the word pools for a spec, independent of `n`.
///
/// Emotion pools are drawn before theme pools, so specs that share a seed
/// and emotion schema share the emotion vocabulary even when their HMC
/// label counts differ.
pub fn synthetic_lexicon(spec: &SynthSpec) -> SyntheticLexicon {
    let mut rng = substream(spec.seed, "synthetic-lexicon");
    let mut taken = HashSet::new();
    let emotion = (0..spec.emotion_labels.len())
        .map(|_| {
            (0..spec.emotion_words_per_label)
                .map(|_| pseudo_word(&mut rng, &mut taken))
                .collect()
        })
        .collect();
    let shared_theme = (0..spec.theme_words_per_label)
        .map(|_| pseudo_word(&mut rng, &mut taken))
        .collect();
    let theme = (0..spec.num_hmc_labels)
        .map(|_| {
            (0..spec.theme_words_per_label)
                .map(|_| pseudo_word(&mut rng, &mut taken))
                .collect()
        })
        .collect();
    SyntheticLexicon {
        theme,
        shared_theme,
        emotion,
    }
}

/// Emotion ids considered consistent with one HMC label.
///
/// For two HMC labels the split follows the premise that health mentions
/// carry negative emotions: label 1 gets the negative emotions, label 0
/// the rest. With more labels (or a degenerate split) emotions are dealt
/// round-robin.
pub fn consistent_emotions(spec: &SynthSpec, hmc_label: usize) -> Vec<usize> {
    if spec.num_hmc_labels == 2 {
        let negatives: Vec<usize> = spec
            .emotion_labels
            .iter()
            .enumerate()
            .filter(|(_, n)| NEGATIVE_EMOTION_NAMES.contains(&n.as_str()))
            .map(|(i, _)| i)
            .collect();
        let others: Vec<usize> = (0..spec.emotion_labels.len())
            .filter(|i| !negatives.contains(i))
            .collect();
        if !negatives.is_empty() && !others.is_empty() {
            return if hmc_label == 1 { negatives } else { others };
        }
    }
    (0..spec.emotion_labels.len())
        .filter(|i| i % spec.num_hmc_labels == hmc_label)
        .collect()
}

fn hmc_label_names(k: usize) -> Vec<String> {
    if k == 2 {
        vec!["non_health".into(), "health_mention".into()]
    } else {
        (0..k).map(|i| format!("hmc_class_{i}")).collect()
    }
}

/// Paired synthetic corpora sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub hmc: LabeledDataset,
    pub emotion: LabeledDataset,
}

/// Generates the paired HMC and emotion datasets; fully deterministic per
/// seed.
pub fn make_synthetic(spec: &SynthSpec) -> Result<SyntheticPair> {
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(Error::InvalidArgument(format!(
            "correlation must lie in [0, 1], got {}",
            spec.correlation
        )));
    }
    if !(0.0..=1.0).contains(&spec.theme_noise) {
        return Err(Error::InvalidArgument(format!(
            "theme_noise must lie in [0, 1], got {}",
            spec.theme_noise
        )));
    }
    if spec.num_hmc_labels < 2 || spec.emotion_labels.is_empty() || spec.n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic spec needs n > 0, at least 2 HMC labels and 1 emotion".into(),
        ));
    }
    let lexicon = synthetic_lexicon(spec);
    let num_emotions = spec.emotion_labels.len();
    let mut rng = substream(spec.data_seed.unwrap_or(spec.seed), "synthetic-data");

    // HMC corpus.
    let mut hmc_examples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let gold = rng.below(spec.num_hmc_labels);
        let theme_word = if rng.bernoulli(spec.theme_noise) {
            rng.choose(&lexicon.shared_theme).clone()
        } else {
            rng.choose(&lexicon.theme[gold]).clone()
        };
        let emotion_id = if rng.bernoulli(spec.correlation) {
            *rng.choose(&consistent_emotions(spec, gold))
        } else {
            rng.below(num_emotions)
        };
        let emotion_word = rng.choose(&lexicon.emotion[emotion_id]).clone();

        let mut words: Vec<String> = (0..4 + rng.below(6))
            .map(|_| rng.choose(&FILLERS).to_string())
            .collect();
        words.push(theme_word);
        words.push(emotion_word);
        rng.shuffle(&mut words);
        hmc_examples.push(Example {
            text: words.join(" "),
            labels: vec![gold],
        });
    }
    let hmc = LabeledDataset::new(
        "synthetic-hmc",
        TaskKind::Single,
        hmc_label_names(spec.num_hmc_labels),
        hmc_examples,
    )?;

    // Paired emotion corpus over the same vocabulary.
    let mut emotion_examples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let count = 1 + rng.below(2.min(num_emotions));
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < count {
            let e = rng.below(num_emotions);
            if !chosen.contains(&e) {
                chosen.push(e);
            }
        }
        chosen.sort_unstable();

        let mut words: Vec<String> = (0..4 + rng.below(6))
            .map(|_| rng.choose(&FILLERS).to_string())
            .collect();
        for &e in &chosen {
            for _ in 0..1 + rng.below(2) {
                words.push(rng.choose(&lexicon.emotion[e]).clone());
            }
        }
        rng.shuffle(&mut words);
        emotion_examples.push(Example {
            text: words.join(" "),
            labels: chosen,
        });
    }
    let emotion = LabeledDataset::new(
        "synthetic-emotion",
        TaskKind::Multi,
        spec.emotion_labels.clone(),
        emotion_examples,
    )?;

    Ok(SyntheticPair { hmc, emotion })
}
