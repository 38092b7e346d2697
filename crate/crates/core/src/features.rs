//! Feature extraction, mutual-information selection, vectorization and
//! dataset splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{BehaviorLog, MALWARE};
use crate::error::{Error, Result};
use crate::scalar::{fmt_exact, parse_exact};
use crate::seed::rng;

/// Split proportions of the reference corpus (1,523,978 / 268,937 / 580,756 files).
pub const DEFAULT_SPLIT: [f64; 3] = [0.642, 0.113, 0.245];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureFamily {
    String,
    ApiParam,
    ApiTrigram,
}

impl FeatureFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureFamily::String => "STRING",
            FeatureFamily::ApiParam => "API_PARAM",
            FeatureFamily::ApiTrigram => "API_TRIGRAM",
        }
    }
}

impl FromStr for FeatureFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "STRING" => Ok(FeatureFamily::String),
            "API_PARAM" => Ok(FeatureFamily::ApiParam),
            "API_TRIGRAM" => Ok(FeatureFamily::ApiTrigram),
            other => Err(format!("unknown feature family `{other}`")),
        }
    }
}

/// A candidate binary feature. Ordering is family first, then text, which is
/// the tie-break order for equal mutual information.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureToken {
    pub family: FeatureFamily,
    pub text: String,
}

impl FeatureToken {
    pub fn string(s: &str) -> Self {
        Self {
            family: FeatureFamily::String,
            text: s.to_string(),
        }
    }

    pub fn api_param(api: &str, position: u8, value: &str) -> Self {
        Self {
            family: FeatureFamily::ApiParam,
            text: format!("{api}#{position}={value}"),
        }
    }

    pub fn api_trigram(a: &str, b: &str, c: &str) -> Self {
        Self {
            family: FeatureFamily::ApiTrigram,
            text: format!("{a}>{b}>{c}"),
        }
    }
}

impl fmt::Display for FeatureToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family.as_str(), self.text)
    }
}

/// All three feature families present in one log. Empty strings are skipped.
pub fn extract_features(log: &BehaviorLog) -> BTreeSet<FeatureToken> {
    let mut out = BTreeSet::new();
    for s in log.strings.iter().filter(|s| !s.is_empty()) {
        out.insert(FeatureToken::string(s));
    }
    for ev in &log.api {
        for (pos, value) in &ev.params {
            out.insert(FeatureToken::api_param(&ev.name, *pos, value));
        }
    }
    for w in log.api.windows(3) {
        out.insert(FeatureToken::api_trigram(&w[0].name, &w[1].name, &w[2].name));
    }
    out
}

/// Plug-in mutual information, in bits, from the 2x2 contingency table.
/// `n_fl` counts samples with feature value `f` and label `l`.
pub fn mi_from_counts(n11: u64, n10: u64, n01: u64, n00: u64) -> f64 {
    let n = (n11 + n10 + n01 + n00) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let px1 = (n11 + n10) as f64 / n;
    let px0 = (n01 + n00) as f64 / n;
    let py1 = (n11 + n01) as f64 / n;
    let py0 = (n10 + n00) as f64 / n;
    let cells = [(n11, px1, py1), (n10, px1, py0), (n01, px0, py1), (n00, px0, py0)];
    let mut mi = 0.0;
    for (count, px, py) in cells {
        if count > 0 {
            let pxy = count as f64 / n;
            mi += pxy * (pxy / (px * py)).log2();
        }
    }
    mi.clamp(0.0, 1.0)
}

pub fn mutual_information(presence: &[bool], labels: &[u8]) -> Result<f64> {
    if presence.len() != labels.len() {
        return Err(Error::contract(format!(
            "feature column has {} rows but label column has {}",
            presence.len(),
            labels.len()
        )));
    }
    if presence.is_empty() {
        return Err(Error::contract("mutual information needs at least one row"));
    }
    let mut counts = [[0u64; 2]; 2];
    for (&x, &y) in presence.iter().zip(labels) {
        counts[x as usize][(y == MALWARE) as usize] += 1;
    }
    Ok(mi_from_counts(counts[1][1], counts[1][0], counts[0][1], counts[0][0]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub token: FeatureToken,
    pub mi: f64,
}

/// Selected features; an entry's position is its column index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<FeatureToken, usize>,
}

impl FeatureVocabulary {
    pub fn from_entries(entries: Vec<VocabEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.token.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn column(&self, token: &FeatureToken) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{i}\t{}\t{}\t{}",
                e.token.family.as_str(),
                escape(&e.token.text),
                fmt_exact(e.mi)
            )
            .map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = |msg: String| Error::parse(path, n + 1, msg);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let index: usize = fields[0].parse().map_err(|_| bad("bad index".into()))?;
            if index != entries.len() {
                return Err(bad(format!("index {index} out of sequence")));
            }
            let family = fields[1].parse().map_err(bad)?;
            let mi = parse_exact(fields[3]).ok_or_else(|| bad("bad mi_score".into()))?;
            entries.push(VocabEntry {
                token: FeatureToken {
                    family,
                    text: unescape(fields[2]),
                },
                mi,
            });
        }
        Ok(Self::from_entries(entries))
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Ranks candidate tokens by mutual information with the label and keeps the
/// best `k`. Each sample is a set of tokens with its label.
pub fn select_from_token_sets<'a, I>(samples: I, k: usize) -> Result<FeatureVocabulary>
where
    I: IntoIterator<Item = (&'a BTreeSet<FeatureToken>, u8)>,
{
    if k == 0 {
        return Err(Error::contract("k must be >= 1"));
    }
    let mut counts: HashMap<&FeatureToken, [u64; 2]> = HashMap::new();
    let mut class_totals = [0u64; 2];
    for (tokens, label) in samples {
        let y = (label == MALWARE) as usize;
        class_totals[y] += 1;
        for t in tokens {
            counts.entry(t).or_default()[y] += 1;
        }
    }
    if class_totals[0] + class_totals[1] == 0 {
        return Err(Error::contract("cannot select features from an empty corpus"));
    }
    let mut scored: Vec<VocabEntry> = counts
        .into_iter()
        .map(|(token, [benign, malware])| VocabEntry {
            token: token.clone(),
            mi: mi_from_counts(malware, benign, class_totals[1] - malware, class_totals[0] - benign),
        })
        .collect();
    scored.sort_by(|a, b| b.mi.total_cmp(&a.mi).then_with(|| a.token.cmp(&b.token)));
    scored.truncate(k);
    Ok(FeatureVocabulary::from_entries(scored))
}

/// Top-`k` selection over a set of (training) logs.
pub fn select_top_k(logs: &[BehaviorLog], k: usize) -> Result<FeatureVocabulary> {
    let sets: Vec<BTreeSet<FeatureToken>> = logs.iter().map(extract_features).collect();
    select_from_token_sets(sets.iter().zip(logs.iter().map(|l| l.label)), k)
}

/// Indices of enabled features in a `dim`-dimensional binary space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseBinaryVector {
    dim: usize,
    on: Vec<u32>,
}

impl SparseBinaryVector {
    /// Builds a vector from arbitrary indices; duplicates are merged.
    pub fn new(dim: usize, mut on: Vec<u32>) -> Result<Self> {
        on.sort_unstable();
        on.dedup();
        if let Some(&last) = on.last() {
            if last as usize >= dim {
                return Err(Error::contract(format!("index {last} out of range for dim {dim}")));
            }
        }
        Ok(Self { dim, on })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, on: Vec::new() }
    }

    pub fn from_dense(bits: &[bool]) -> Self {
        let on = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u32)
            .collect();
        Self { dim: bits.len(), on }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn on_indices(&self) -> &[u32] {
        &self.on
    }

    pub fn nnz(&self) -> usize {
        self.on.len()
    }

    pub fn get(&self, i: usize) -> bool {
        self.on.binary_search(&(i as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut bits = vec![false; self.dim];
        for &i in &self.on {
            bits[i as usize] = true;
        }
        bits
    }

    pub fn hamming(&self, other: &Self) -> usize {
        let a: HashSet<_> = self.on.iter().collect();
        let b: HashSet<_> = other.on.iter().collect();
        a.symmetric_difference(&b).count()
    }
}

pub fn vectorize(log: &BehaviorLog, vocab: &FeatureVocabulary) -> SparseBinaryVector {
    vectorize_tokens(&extract_features(log), vocab)
}

pub fn vectorize_tokens(tokens: &BTreeSet<FeatureToken>, vocab: &FeatureVocabulary) -> SparseBinaryVector {
    let on = tokens
        .iter()
        .filter_map(|t| vocab.column(t))
        .map(|i| i as u32)
        .collect();
    SparseBinaryVector::new(vocab.len(), on).expect("vocabulary columns are in range")
}

/// Positions into the deduplicated input, per split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Keeps the first occurrence of each distinct item, then partitions the
/// survivors at random into train/valid/test with the given proportions.
pub fn dedup_and_split_indices<T: Hash + Eq>(
    items: &[T],
    labels: &[u8],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitIndices> {
    if items.len() != labels.len() {
        return Err(Error::contract("items and labels differ in length"));
    }
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut first: HashMap<&T, usize> = HashMap::new();
    let mut kept = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match first.get(item) {
            Some(&j) => {
                if labels[j] != labels[i] {
                    log::warn!(
                        "duplicate input {i} has label {} but first instance {j} has {}",
                        labels[i],
                        labels[j]
                    );
                }
            }
            None => {
                first.insert(item, i);
                kept.push(i);
            }
        }
    }
    let n = kept.len();
    if n < 3 {
        return Err(Error::contract(format!(
            "{n} distinct items remain after dedup, need >= 3"
        )));
    }
    kept.shuffle(&mut rng(seed));
    let mut n_train = ((ratios[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((ratios[1] * n as f64).round() as usize).clamp(1, n - 1 - n_train);
    if n_train + n_valid >= n {
        n_train = n - n_valid - 1;
    }
    let test = kept.split_off(n_train + n_valid);
    let valid = kept.split_off(n_train);
    Ok(SplitIndices {
        train: kept,
        valid,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub vectors: Vec<SparseBinaryVector>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dim: usize, vectors: Vec<SparseBinaryVector>, labels: Vec<u8>) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::contract("vectors and labels differ in length"));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::contract(format!(
                "vector of dim {} in dataset of dim {dim}",
                v.dim()
            )));
        }
        Ok(Self { dim, vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            vectors: idx.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Malware samples only, with their positions in this dataset.
    pub fn malware(&self) -> Vec<(usize, &SparseBinaryVector)> {
        self.vectors
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(_, (_, &l))| l == MALWARE)
            .map(|(i, (v, _))| (i, v))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "dim={}", self.dim).map_err(io)?;
        for (v, label) in self.vectors.iter().zip(&self.labels) {
            let idx: Vec<String> = v.on_indices().iter().map(u32::to_string).collect();
            writeln!(w, "{label}\t{}", idx.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::parse(path, 1, "missing `dim=` header"))?;
        let dim: usize = header
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, 1, format!("bad header `{header}`")))?;
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let (label, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected `label<TAB>indices`"))?;
            let label: u8 = match label {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::parse(path, lineno, format!("bad label `{other}`"))),
            };
            let on = if idx.is_empty() {
                Vec::new()
            } else {
                idx.split(',')
                    .map(|s| s.parse::<u32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(path, lineno, e.to_string()))?
            };
            let v = SparseBinaryVector::new(dim, on).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            vectors.push(v);
            labels.push(label);
        }
        Ok(Self { dim, vectors, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub const FILES: [&'static str; 3] = ["train.tsv", "valid.tsv", "test.tsv"];

    pub fn dim(&self) -> usize {
        self.train.dim
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write(&dir.join(Self::FILES[0]))?;
        self.valid.write(&dir.join(Self::FILES[1]))?;
        self.test.write(&dir.join(Self::FILES[2]))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::read(&dir.join(Self::FILES[0]))?,
            valid: Dataset::read(&dir.join(Self::FILES[1]))?,
            test: Dataset::read(&dir.join(Self::FILES[2]))?,
        })
    }
}

/// Vector-space dedup and split of an already vectorized dataset.
pub fn dedup_and_split(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    let idx = dedup_and_split_indices(&data.vectors, &data.labels, ratios, seed)?;
    Ok(SplitDataset {
        train: data.subset(&idx.train),
        valid: data.subset(&idx.valid),
        test: data.subset(&idx.test),
    })
}

/// Full feature stage over raw logs.
///
/// Logs are split first (deduplicated on their extracted token sets), features
/// are selected on the training logs only, and every log is then vectorized.
/// Vectors that collide after projection onto the vocabulary are dropped,
/// keeping the first occurrence in corpus order, so no vector appears twice
/// across the three splits.
pub fn build_datasets(
    logs: &[BehaviorLog],
    k: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(FeatureVocabulary, SplitDataset)> {
    if logs.is_empty() {
        return Err(Error::contract("cannot build datasets from an empty corpus"));
    }
    let token_sets: Vec<BTreeSet<FeatureToken>> = logs.iter().map(extract_features).collect();
    let labels: Vec<u8> = logs.iter().map(|l| l.label).collect();
    let split = dedup_and_split_indices(&token_sets, &labels, ratios, seed)?;

    let vocab = select_from_token_sets(split.train.iter().map(|&i| (&token_sets[i], labels[i])), k)?;

    let mut which = vec![None; logs.len()];
    for (s, idx) in [&split.train, &split.valid, &split.test].into_iter().enumerate() {
        for &i in idx {
            which[i] = Some(s);
        }
    }
    let mut seen = HashSet::new();
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let vectors: Vec<SparseBinaryVector> = token_sets.iter().map(|t| vectorize_tokens(t, &vocab)).collect();
    for (i, v) in vectors.iter().enumerate() {
        if let Some(s) = which[i] {
            if seen.insert(v) {
                parts[s].push(i);
            }
        }
    }
    // Restore the randomized within-split order of the first partition.
    let mut rank = vec![0; logs.len()];
    for idx in [&split.train, &split.valid, &split.test] {
        for (r, &i) in idx.iter().enumerate() {
            rank[i] = r;
        }
    }
    for p in parts.iter_mut() {
        p.sort_by_key(|&i| rank[i]);
    }
    let full = Dataset::new(vocab.len(), vectors, labels)?;
    let out = SplitDataset {
        train: full.subset(&parts[0]),
        valid: full.subset(&parts[1]),
        test: full.subset(&parts[2]),
    };
    for (name, d) in [("train", &out.train), ("valid", &out.valid), ("test", &out.test)] {
        if d.is_empty() {
            return Err(Error::contract(format!("{name} split is empty after vector dedup")));
        }
    }
    Ok((vocab, out))
}
