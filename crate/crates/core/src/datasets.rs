//! Task datasets: synthetic grouped tasks with known ground truth, labelled
//! review text with bag-of-words features, and the ten-fold split.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The fourteen review domains, in task-id order.
pub const REVIEW_DOMAINS: [&str; 14] = [
    "apparel",
    "baby",
    "books",
    "camera",
    "dvd",
    "electronic",
    "health",
    "kitchen",
    "magazines",
    "music",
    "software",
    "sports",
    "toys",
    "video",
];

pub const DEFAULT_VOCAB_SIZE: usize = 2000;
pub const NUM_FOLDS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub features: Vec<T>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset<T> {
    pub task_id: usize,
    pub name: String,
    pub examples: Vec<Example<T>>,
    pub num_classes: usize,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Feature dimension, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dim) = self.dim() {
            if let Some(e) = self.examples.iter().find(|e| e.features.len() != dim) {
                return Err(Error::dim(format!("task {} features", self.task_id), dim, e.features.len()));
            }
        }
        if let Some(e) = self.examples.iter().find(|e| e.label >= self.num_classes) {
            return Err(Error::Argument(format!(
                "task {} label {} outside [0, {})",
                self.task_id, e.label, self.num_classes
            )));
        }
        Ok(())
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            task_id: self.task_id,
            name: self.name.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Parameters of the grouped synthetic task generator.
///
/// Each group owns a linear classifier; each task perturbs its group's
/// classifier and labels standard-normal features by the sign of the score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub num_groups: usize,
    pub input_dim: usize,
    pub examples_per_task: usize,
    /// Minimum pairwise distance between group classifiers, in units of `within_group_noise`.
    pub group_separation: f64,
    /// Expected norm of a task's perturbation around its group classifier.
    pub within_group_noise: f64,
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tasks: 12,
            num_groups: 3,
            input_dim: 16,
            examples_per_task: 200,
            group_separation: 10.0,
            within_group_noise: 1.0,
            label_noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_tasks == 0 {
            bad.push("data.num_tasks must be positive".to_string());
        }
        if self.num_groups == 0 || self.num_groups > self.num_tasks {
            bad.push(format!("data.num_groups must lie in [1, {}]", self.num_tasks));
        }
        if self.input_dim == 0 {
            bad.push("data.input_dim must be positive".to_string());
        }
        if !(self.group_separation > 0.0 && self.group_separation.is_finite()) {
            bad.push("data.group_separation must be positive".to_string());
        }
        if !(self.within_group_noise >= 0.0 && self.within_group_noise.is_finite()) {
            bad.push("data.within_group_noise must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            bad.push("data.label_noise_rate must lie in [0, 1]".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

/// Generated tasks plus the true group of each task.
#[derive(Clone, Debug)]
pub struct SyntheticTasks<T> {
    pub tasks: Vec<TaskDataset<T>>,
    pub groups: Vec<usize>,
    /// True linear classifier of every task.
    pub classifiers: Vec<Vec<f64>>,
}

const GROUP_DRAW_ATTEMPTS: usize = 10_000;

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws grouped tasks. Tasks are assigned to groups round-robin
/// (`task j -> group j mod G`).
pub fn generate_synthetic_tasks<T: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticTasks<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    // With zero noise the separation is measured in unit lengths.
    let unit = if spec.within_group_noise > 0.0 { spec.within_group_noise } else { 1.0 };
    let min_dist = spec.group_separation * unit;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_groups);
    for g in 0..spec.num_groups {
        let mut accepted = None;
        for _ in 0..GROUP_DRAW_ATTEMPTS {
            let mut v = gaussian_vec(&mut rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x *= min_dist / n);
            let far_enough = centers.iter().all(|c| {
                c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if far_enough {
                accepted = Some(v);
                break;
            }
        }
        let v = accepted.ok_or_else(|| {
            Error::Argument(format!(
                "cannot place group {g} at separation {} in dimension {d}",
                spec.group_separation
            ))
        })?;
        centers.push(v);
    }

    let per_coord = spec.within_group_noise / (d as f64).sqrt();
    let groups: Vec<usize> = (0..spec.num_tasks).map(|j| j % spec.num_groups).collect();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut classifiers = Vec::with_capacity(spec.num_tasks);
    for (j, &g) in groups.iter().enumerate() {
        let w: Vec<f64> = centers[g]
            .iter()
            .zip(gaussian_vec(&mut rng, d, per_coord))
            .map(|(c, e)| c + e)
            .collect();
        let examples = (0..spec.examples_per_task)
            .map(|_| {
                let x = gaussian_vec(&mut rng, d, 1.0);
                let score: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let mut label = usize::from(score >= 0.0);
                if rng.random::<f64>() < spec.label_noise_rate {
                    label = 1 - label;
                }
                Example {
                    features: x.into_iter().map(T::lit).collect(),
                    label,
                }
            })
            .collect();
        tasks.push(TaskDataset {
            task_id: j,
            name: format!("task{j:02}"),
            examples,
            num_classes: 2,
        });
        classifiers.push(w);
    }
    Ok(SyntheticTasks {
        tasks,
        groups,
        classifiers,
    })
}

/// Logistic-regression weights (no bias) fitted to a binary task by
/// full-batch gradient descent on the mean log loss plus `l2 * ||w||^2 / 2`.
pub fn linear_probe<T: Scalar>(dataset: &TaskDataset<T>, iterations: usize, learning_rate: f64, l2: f64) -> Result<Vec<f64>> {
    dataset.validate()?;
    let d = dataset
        .dim()
        .ok_or_else(|| Error::Argument(format!("task {} has no examples", dataset.name)))?;
    if dataset.num_classes != 2 {
        return Err(Error::Argument(format!("linear probe needs 2 classes, task {} has {}", dataset.name, dataset.num_classes)));
    }
    let xs: Vec<Vec<f64>> = dataset.examples.iter().map(|e| e.features.iter().map(|v| v.as_f64()).collect()).collect();
    let ys: Vec<f64> = dataset.examples.iter().map(|e| e.label as f64).collect();
    let n = xs.len() as f64;
    let mut w = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for _ in 0..iterations {
        grad.iter_mut().zip(&w).for_each(|(g, wi)| *g = l2 * wi);
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let r = (1.0 / (1.0 + (-z).exp()) - y) / n;
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
        }
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= learning_rate * g);
    }
    Ok(w)
}

/// One labelled document, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn parse_label(s: &str) -> Option<usize> {
    match s.trim() {
        "positive" => Some(1),
        "negative" => Some(0),
        _ => None,
    }
}

/// Parses `<label>\t<text>` lines. Blank lines are skipped.
pub fn parse_documents(content: &str, path: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `<label>\\t<text>`".into()))?;
        let label = parse_label(label).ok_or_else(|| parse_err(format!("unknown label `{}`", label.trim())))?;
        docs.push(Document {
            label,
            tokens: tokenize(text),
        });
    }
    Ok(docs)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_documents(&content, path)
}

/// The most frequent tokens of a corpus, by descending count then token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>, size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for tok in &doc.tokens {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(size);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Raw token counts in a vector of length `dim` (at least the vocabulary size).
    pub fn count_vector<T: Scalar>(&self, tokens: &[String], dim: usize) -> Vec<T> {
        let mut v = vec![T::zero(); dim.max(self.len())];
        for tok in tokens {
            if let Some(&i) = self.index.get(tok) {
                v[i] += T::one();
            }
        }
        v
    }

    /// L2-normalized counts. Documents sharing no token with the vocabulary map to zero.
    pub fn featurize<T: Scalar>(&self, tokens: &[String], dim: usize) -> Vec<T> {
        let mut v = self.count_vector::<T>(tokens, dim);
        let n = crate::scalar::norm(&v);
        if n > T::zero() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

/// Featurizes documents with a vocabulary; features have length `dim`.
pub fn featurize_documents<T: Scalar>(
    task_id: usize,
    name: &str,
    docs: &[Document],
    vocab: &Vocabulary,
    dim: usize,
) -> TaskDataset<T> {
    TaskDataset {
        task_id,
        name: name.to_string(),
        examples: docs
            .iter()
            .map(|d| Example {
                features: vocab.featurize(&d.tokens, dim),
                label: d.label,
            })
            .collect(),
        num_classes: 2,
    }
}

/// Loads one labelled text file, with a vocabulary built from the whole file.
pub fn load_text_dataset<T: Scalar>(path: &Path, vocab_size: usize) -> Result<TaskDataset<T>> {
    let docs = read_documents(path)?;
    let vocab = Vocabulary::build(&docs, vocab_size);
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(featurize_documents(0, &name, &docs, &vocab, vocab_size))
}

/// Lists the `*.txt` task files in `dir`: known review domains first in
/// their canonical order, then any other files alphabetically.
pub fn task_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            files.push((name, path));
        }
    }
    let rank = |name: &str| REVIEW_DOMAINS.iter().position(|d| *d == name).unwrap_or(usize::MAX);
    files.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
    if files.is_empty() {
        return Err(Error::Argument(format!("no .txt task files in {}", dir.display())));
    }
    Ok(files)
}

/// Loads every task file of a directory (see [`task_files`]); task ids follow file order.
pub fn load_task_dir<T: Scalar>(dir: &Path, vocab_size: usize) -> Result<Vec<TaskDataset<T>>> {
    task_files(dir)?
        .into_iter()
        .enumerate()
        .map(|(id, (_, path))| {
            let mut ds = load_text_dataset(&path, vocab_size)?;
            ds.task_id = id;
            Ok(ds)
        })
        .collect()
}

/// Indices of the train and test parts of `fold` after a seeded shuffle of
/// `0..n` into ten contiguous, near-equal parts.
pub fn ten_fold_indices(n: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= NUM_FOLDS {
        return Err(Error::Argument(format!("fold {fold} outside [0, {NUM_FOLDS})")));
    }
    if n < NUM_FOLDS {
        return Err(Error::Argument(format!("{n} examples cannot be split into {NUM_FOLDS} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let start = fold * n / NUM_FOLDS;
    let end = (fold + 1) * n / NUM_FOLDS;
    let test = order[start..end].to_vec();
    let train = order[..start].iter().chain(&order[end..]).copied().collect();
    Ok((train, test))
}

pub fn split_ten_fold<T: Scalar>(
    dataset: &TaskDataset<T>,
    fold: usize,
    seed: u64,
) -> Result<(TaskDataset<T>, TaskDataset<T>)> {
    let (train, test) = ten_fold_indices(dataset.len(), fold, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_of_words_counts() {
        let docs = parse_documents("positive\tgood good bad\nnegative\tbad movie\n", Path::new("x")).unwrap();
        let vocab = Vocabulary::build(&docs, 10);
        let counts = vocab.count_vector::<f64>(&docs[0].tokens, 10);
        let good = vocab.tokens().iter().position(|t| t == "good").unwrap();
        let bad = vocab.tokens().iter().position(|t| t == "bad").unwrap();
        assert_eq!(counts[good], 2.0);
        assert_eq!(counts[bad], 1.0);
        let f = vocab.featurize::<f64>(&docs[0].tokens, 10);
        assert!((crate::scalar::norm(&f) - 1.0).abs() < 1e-12);
        assert_eq!(f.len(), 10);
        // "bad" (3 occurrences) outranks "good" (2), then "movie".
        assert_eq!(vocab.tokens(), &["bad", "good", "movie"]);
    }

    #[test]
    fn no_overlap_gives_zero_vector() {
        let vocab = Vocabulary::from_tokens(vec!["a".into()]);
        let f = vocab.featurize::<f64>(&tokenize("Zebra QUAGGA"), 3);
        assert_eq!(f, vec![0.0; 3]);
    }

    #[test]
    fn tokenizer_lowercases() {
        assert_eq!(tokenize("  Good\tBAD  "), vec!["good", "bad"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_documents("positive\tok\n\nneutral\tmeh\n", Path::new("f.txt")).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("neutral"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_documents("no tab here\n", Path::new("f.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn fold_sizes() {
        let (train, test) = ten_fold_indices(100, 3, 1).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        let (train, test) = ten_fold_indices(10, 9, 1).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert!(ten_fold_indices(9, 0, 1).is_err());
        assert!(ten_fold_indices(100, 10, 1).is_err());
    }

    #[test]
    fn folds_partition_the_data() {
        let n = 37;
        let mut seen = vec![0usize; n];
        for fold in 0..NUM_FOLDS {
            let (train, test) = ten_fold_indices(n, fold, 42).unwrap();
            assert_eq!(train.len() + test.len(), n);
            assert!((3..=4).contains(&test.len()));
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for &i in &test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { seed: 9, examples_per_task: 20, ..Default::default() };
        let a = generate_synthetic_tasks::<f64>(&spec).unwrap();
        let b = generate_synthetic_tasks::<f64>(&spec).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.groups, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn zero_noise_gives_identical_group_classifiers() {
        let spec = SyntheticSpec { within_group_noise: 0.0, examples_per_task: 5, ..Default::default() };
        let s = generate_synthetic_tasks::<f64>(&spec).unwrap();
        for j in 0..spec.num_tasks {
            for i in 0..spec.num_tasks {
                if s.groups[i] == s.groups[j] {
                    assert_eq!(s.classifiers[i], s.classifiers[j]);
                }
            }
        }
    }

    #[test]
    fn single_group_shares_a_classifier_family() {
        let spec = SyntheticSpec { num_groups: 1, examples_per_task: 5, ..Default::default() };
        let s = generate_synthetic_tasks::<f64>(&spec).unwrap();
        assert!(s.groups.iter().all(|&g| g == 0));
    }

    #[test]
    fn infeasible_separation_is_rejected() {
        let spec = SyntheticSpec { num_groups: 3, input_dim: 1, examples_per_task: 5, ..Default::default() };
        assert!(matches!(generate_synthetic_tasks::<f64>(&spec), Err(Error::Argument(_))));
    }

    #[test]
    fn labels_are_balanced() {
        let spec = SyntheticSpec { examples_per_task: 1000, seed: 4, ..Default::default() };
        let s = generate_synthetic_tasks::<f64>(&spec).unwrap();
        for t in &s.tasks {
            let pos = t.examples.iter().filter(|e| e.label == 1).count() as f64 / t.len() as f64;
            assert!((pos - 0.5).abs() <= 0.05, "task {} positive rate {pos}", t.task_id);
        }
    }

    #[test]
    fn task_dir_order_follows_domains() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["video", "apparel", "zzz", "books"] {
            fs::write(dir.path().join(format!("{name}.txt")), "positive\tfine\nnegative\tbad\n").unwrap();
        }
        let files: Vec<String> = task_files(dir.path()).unwrap().into_iter().map(|f| f.0).collect();
        assert_eq!(files, vec!["apparel", "books", "video", "zzz"]);
        let tasks = load_task_dir::<f64>(dir.path(), 5).unwrap();
        assert_eq!(tasks.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(tasks[0].dim(), Some(5));
    }
}
