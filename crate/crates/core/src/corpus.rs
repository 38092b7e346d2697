//! Synthetic behavior-log corpus.
//!
//! Each log mimics the output of an emulating scanner: a bag of unpacked strings
//! and an ordered trace of API calls with positional parameters. Both classes
//! share a background Markov chain over API names; class identity is carried by
//! designated tokens (strings, parameter values and spliced call trigrams).
//!
//! A log of the owning class emits designated token `j` with probability
//! `background + s * f_j * (informative - background)`, where the log strength
//! `s ~ U(min_strength, 1)` and the token prevalence `f_j ~ U(min_prevalence, 1)`.
//! Any other log emits it with `background_rate`. Weak logs of either class are
//! therefore hard to tell apart, which keeps test error and attack success
//! away from the trivial ends.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derived_rng, Rng};

pub const MALWARE: u8 = 1;
pub const BENIGN: u8 = 0;

const FORMAT_TAG: &str = "advgauntlet-corpus";
const FORMAT_VERSION: u32 = 1;

/// Successors per API in the shared transition structure.
const CHAIN_FANOUT: usize = 3;
/// Probability that the chain follows a listed successor instead of jumping.
const CHAIN_FOLLOW: f64 = 0.8;
/// Typical parameter values observed per API in background events.
const VALUES_PER_API: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiEvent {
    pub name: String,
    /// `(position, value)` pairs.
    pub params: Vec<(u8, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorLog {
    pub id: u64,
    pub label: u8,
    pub strings: Vec<String>,
    pub api: Vec<ApiEvent>,
}

impl BehaviorLog {
    pub fn is_malware(&self) -> bool {
        self.label == MALWARE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_malware: usize,
    pub n_benign: usize,
    pub string_vocab: usize,
    pub api_vocab: usize,
    pub param_value_vocab: usize,
    /// Designated tokens per class per family.
    pub n_informative: usize,
    pub informative_rate: f64,
    pub background_rate: f64,
    pub min_strength: f64,
    pub min_prevalence: f64,
    /// Probability that a slot repeats an earlier log of the same class.
    pub duplicate_rate: f64,
    pub min_api_len: usize,
    pub max_api_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_malware: 10_000,
            n_benign: 10_000,
            string_vocab: 3_000,
            api_vocab: 150,
            param_value_vocab: 200,
            n_informative: 40,
            informative_rate: 0.9,
            background_rate: 0.05,
            min_strength: 0.2,
            min_prevalence: 0.25,
            duplicate_rate: 0.01,
            min_api_len: 50,
            max_api_len: 200,
            seed: 42,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_malware", self.n_malware),
            ("n_benign", self.n_benign),
            ("string_vocab", self.string_vocab),
            ("api_vocab", self.api_vocab),
            ("param_value_vocab", self.param_value_vocab),
            ("n_informative", self.n_informative),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        for (field, v) in [
            ("informative_rate", self.informative_rate),
            ("background_rate", self.background_rate),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, format!("must lie in (0, 1), got {v}")));
            }
        }
        if self.informative_rate <= self.background_rate {
            return Err(Error::config("informative_rate", "must exceed background_rate"));
        }
        for (field, v) in [
            ("min_strength", self.min_strength),
            ("min_prevalence", self.min_prevalence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.duplicate_rate) {
            return Err(Error::config("duplicate_rate", "must lie in [0, 1)"));
        }
        if 2 * self.n_informative > self.string_vocab {
            return Err(Error::config(
                "string_vocab",
                "must hold the designated strings of both classes",
            ));
        }
        if self.api_vocab < CHAIN_FANOUT + 1 {
            return Err(Error::config("api_vocab", "must exceed the chain fanout"));
        }
        if self.min_api_len < 3 || self.min_api_len > self.max_api_len {
            return Err(Error::config("min_api_len", "must be >= 3 and <= max_api_len"));
        }
        Ok(())
    }

    /// Reads and validates a JSON spec; absent fields take their defaults.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::config("spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.n_malware + self.n_benign
    }
}

/// Token pools and per-class designated tokens.
struct Pools {
    strings: Vec<String>,
    /// Indices into `strings`, per class.
    designated_strings: [Vec<usize>; 2],
    apis: Vec<String>,
    successors: Vec<[usize; CHAIN_FANOUT]>,
    typical_values: Vec<[usize; VALUES_PER_API]>,
    values: Vec<String>,
    /// `(api, position, value)` per class.
    designated_params: [Vec<(usize, u8, usize)>; 2],
    designated_motifs: [Vec<[usize; 3]>; 2],
    /// Prevalence factor per string index (1 for non-designated strings).
    string_prevalence: Vec<f64>,
    param_prevalence: [Vec<f64>; 2],
    motif_prevalence: [Vec<f64>; 2],
}

impl Pools {
    fn build(spec: &CorpusSpec) -> Self {
        let mut rng = derived_rng(spec.seed, "corpus/pools");
        let strings: Vec<String> = (0..spec.string_vocab).map(|i| format!("str_{i:05}")).collect();
        let apis: Vec<String> = (0..spec.api_vocab).map(|i| format!("Api{i:03}")).collect();
        let values: Vec<String> = (0..spec.param_value_vocab).map(|i| format!("v{i:04}")).collect();

        let mut order: Vec<usize> = (0..spec.string_vocab).collect();
        order.shuffle(&mut rng);
        let n = spec.n_informative;
        let designated_strings = [order[n..2 * n].to_vec(), order[..n].to_vec()];

        let successors = (0..spec.api_vocab)
            .map(|a| {
                let mut s = [0; CHAIN_FANOUT];
                for slot in s.iter_mut() {
                    loop {
                        let b = rng.gen_range(0..spec.api_vocab);
                        if b != a {
                            *slot = b;
                            break;
                        }
                    }
                }
                s
            })
            .collect();
        let typical_values = (0..spec.api_vocab)
            .map(|_| {
                let mut v = [0; VALUES_PER_API];
                for slot in v.iter_mut() {
                    *slot = rng.gen_range(0..spec.param_value_vocab);
                }
                v
            })
            .collect();

        let mut seen_params = std::collections::HashSet::new();
        let mut designated_params: [Vec<(usize, u8, usize)>; 2] = [Vec::new(), Vec::new()];
        for class in [MALWARE, BENIGN] {
            while designated_params[class as usize].len() < n {
                // Position 0 is reserved for background values, so designated
                // triples never collide with chain noise.
                let t = (
                    rng.gen_range(0..spec.api_vocab),
                    rng.gen_range(1..4u8),
                    rng.gen_range(0..spec.param_value_vocab),
                );
                if seen_params.insert(t) {
                    designated_params[class as usize].push(t);
                }
            }
        }
        let mut seen_motifs = std::collections::HashSet::new();
        let mut designated_motifs: [Vec<[usize; 3]>; 2] = [Vec::new(), Vec::new()];
        for class in [MALWARE, BENIGN] {
            while designated_motifs[class as usize].len() < n {
                let m = [
                    rng.gen_range(0..spec.api_vocab),
                    rng.gen_range(0..spec.api_vocab),
                    rng.gen_range(0..spec.api_vocab),
                ];
                if seen_motifs.insert(m) {
                    designated_motifs[class as usize].push(m);
                }
            }
        }

        let lo = spec.min_prevalence;
        let mut prevalence = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if lo < 1.0 { rng.gen_range(lo..=1.0) } else { 1.0 })
                .collect()
        };
        let mut string_prevalence = vec![1.0; spec.string_vocab];
        for class in [MALWARE, BENIGN] {
            for (&s, f) in designated_strings[class as usize].iter().zip(prevalence(n)) {
                string_prevalence[s] = f;
            }
        }
        let param_prevalence = [prevalence(n), prevalence(n)];
        let motif_prevalence = [prevalence(n), prevalence(n)];

        Self {
            string_prevalence,
            param_prevalence,
            motif_prevalence,
            strings,
            designated_strings,
            apis,
            successors,
            typical_values,
            values,
            designated_params,
            designated_motifs,
        }
    }

    fn background_event(&self, api: usize, rng: &mut Rng) -> ApiEvent {
        let value = self.typical_values[api][rng.gen_range(0..VALUES_PER_API)];
        ApiEvent {
            name: self.apis[api].clone(),
            params: vec![(0, self.values[value].clone())],
        }
    }

    fn sample_log(&self, spec: &CorpusSpec, id: u64, label: u8, rng: &mut Rng) -> BehaviorLog {
        let own = label as usize;
        let other = 1 - own;
        let strength = if spec.min_strength < 1.0 {
            rng.gen_range(spec.min_strength..=1.0)
        } else {
            1.0
        };
        let rate = |class: usize, prevalence: f64| {
            if class == own {
                spec.background_rate + strength * prevalence * (spec.informative_rate - spec.background_rate)
            } else {
                spec.background_rate
            }
        };

        let mut string_class = vec![None; self.strings.len()];
        for class in [0, 1] {
            for &s in &self.designated_strings[class] {
                string_class[s] = Some(class);
            }
        }
        let strings = self
            .strings
            .iter()
            .zip(&string_class)
            .zip(&self.string_prevalence)
            .filter(|((_, class), &f)| {
                let p = class.map_or(spec.background_rate, |c| rate(c, f));
                rng.gen_bool(p)
            })
            .map(|((s, _), _)| s.clone())
            .collect();

        let len = rng.gen_range(spec.min_api_len..=spec.max_api_len);
        let mut api = Vec::with_capacity(len + 16);
        let mut cur = rng.gen_range(0..self.apis.len());
        for _ in 0..len {
            api.push(self.background_event(cur, rng));
            cur = if rng.gen_bool(CHAIN_FOLLOW) {
                self.successors[cur][rng.gen_range(0..CHAIN_FANOUT)]
            } else {
                rng.gen_range(0..self.apis.len())
            };
        }

        for class in [own, other] {
            for (motif, &f) in self.designated_motifs[class].iter().zip(&self.motif_prevalence[class]) {
                if rng.gen_bool(rate(class, f)) {
                    let at = rng.gen_range(0..=api.len());
                    let events: Vec<ApiEvent> = motif.iter().map(|&a| self.background_event(a, rng)).collect();
                    api.splice(at..at, events);
                }
            }
            for (&(a, pos, value), &f) in self.designated_params[class].iter().zip(&self.param_prevalence[class]) {
                if rng.gen_bool(rate(class, f)) {
                    let at = rng.gen_range(0..=api.len());
                    api.insert(
                        at,
                        ApiEvent {
                            name: self.apis[a].clone(),
                            params: vec![(pos, self.values[value].clone())],
                        },
                    );
                }
            }
        }

        BehaviorLog {
            id,
            label,
            strings,
            api,
        }
    }
}

/// Generates `n_malware + n_benign` logs. Output is a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<BehaviorLog>> {
    spec.validate()?;
    let pools = Pools::build(spec);

    let mut labels: Vec<u8> = std::iter::repeat(MALWARE)
        .take(spec.n_malware)
        .chain(std::iter::repeat(BENIGN).take(spec.n_benign))
        .collect();
    labels.shuffle(&mut derived_rng(spec.seed, "corpus/labels"));

    let mut logs: Vec<BehaviorLog> = Vec::with_capacity(labels.len());
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = derived_rng(spec.seed, &format!("corpus/log/{i}"));
        let earlier = &by_class[label as usize];
        let log = if !earlier.is_empty() && rng.gen_bool(spec.duplicate_rate) {
            let src = &logs[earlier[rng.gen_range(0..earlier.len())]];
            BehaviorLog {
                id: i as u64,
                ..src.clone()
            }
        } else {
            pools.sample_log(spec, i as u64, label, &mut rng)
        };
        by_class[label as usize].push(i);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_logs(logs: &[BehaviorLog], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
    };
    let mut emit = |value: String| writeln!(w, "{value}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header).expect("header serializes"))?;
    for log in logs {
        emit(serde_json::to_string(log).expect("log serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_logs(path: &Path) -> Result<Vec<BehaviorLog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut logs = Vec::new();
    let mut seen_header = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if !seen_header {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, lineno, format!("bad corpus header: {e}")))?;
            if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
                return Err(Error::Version(format!(
                    "{} v{} (expected {FORMAT_TAG} v{FORMAT_VERSION})",
                    header.format, header.version
                )));
            }
            seen_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let log: BehaviorLog = serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if log.label > 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("label {} not in {{0,1}}", log.label),
            ));
        }
        logs.push(log);
    }
    if !seen_header {
        return Err(Error::parse(path, 1, "missing corpus header"));
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_malware: 30,
            n_benign: 20,
            string_vocab: 200,
            api_vocab: 30,
            param_value_vocab: 40,
            n_informative: 10,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_unique_ids() {
        let logs = generate_corpus(&small()).unwrap();
        assert_eq!(logs.len(), 50);
        assert_eq!(logs.iter().filter(|l| l.is_malware()).count(), 30);
        let ids: HashSet<u64> = logs.iter().map(|l| l.id).collect();
        assert_eq!(ids.len(), 50);
        for log in &logs {
            assert!(log.api.len() >= 50);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_corpus(&CorpusSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_invalid_specs() {
        let err = generate_corpus(&CorpusSpec {
            n_malware: 0,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config { field: "n_malware", .. }));
        let err = generate_corpus(&CorpusSpec {
            informative_rate: 0.01,
            background_rate: 0.05,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Config {
                field: "informative_rate",
                ..
            }
        ));
        let err = generate_corpus(&CorpusSpec {
            background_rate: 1.0,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Config {
                field: "background_rate",
                ..
            }
        ));
    }

    #[test]
    fn designated_strings_follow_class_rates() {
        let spec = CorpusSpec {
            n_malware: 400,
            n_benign: 400,
            duplicate_rate: 0.0,
            min_strength: 1.0,
            min_prevalence: 1.0,
            ..small()
        };
        let pools = Pools::build(&spec);
        let logs = generate_corpus(&spec).unwrap();
        let probe = &pools.strings[pools.designated_strings[MALWARE as usize][0]];
        let freq = |label: u8| {
            let class: Vec<_> = logs.iter().filter(|l| l.label == label).collect();
            class.iter().filter(|l| l.strings.contains(probe)).count() as f64 / class.len() as f64
        };
        // 400 Bernoulli draws: 4 standard errors is below 0.07 for both rates.
        assert!((freq(MALWARE) - 0.9).abs() < 0.07, "{}", freq(MALWARE));
        assert!((freq(BENIGN) - 0.05).abs() < 0.05, "{}", freq(BENIGN));
    }

    #[test]
    fn duplicates_are_injected_within_class() {
        let spec = CorpusSpec {
            duplicate_rate: 0.3,
            ..small()
        };
        let logs = generate_corpus(&spec).unwrap();
        let mut dupes = 0;
        for (i, log) in logs.iter().enumerate() {
            if logs[..i].iter().any(|o| o.strings == log.strings && o.api == log.api) {
                dupes += 1;
                let src = logs[..i].iter().find(|o| o.api == log.api).unwrap();
                assert_eq!(src.label, log.label);
            }
        }
        assert!(dupes > 0);
    }

    #[test]
    fn round_trip_empty_and_single() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_logs(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert!(read_logs(&path).unwrap().is_empty());

        let one = generate_corpus(&CorpusSpec {
            n_malware: 1,
            n_benign: 1,
            ..small()
        })
        .unwrap();
        write_logs(&one[..1], &path).unwrap();
        assert_eq!(read_logs(&path).unwrap(), one[..1].to_vec());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let logs = generate_corpus(&small()).unwrap();
        write_logs(&logs[..2], &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\": 9, \"label\": \n");
        std::fs::write(&path, text).unwrap();
        match read_logs(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
    }
}
