//! Declarative experiment runner: corpus, features, models, attacks,
//! evaluation and report, with content-hash stage skipping.
//!
//! Every stage records a key (hash of its inputs and settings) and the SHA-256
//! of each output in `manifest.json`. A stage is skipped when its key matches,
//! its outputs are present with the recorded hashes, and nothing it depends on
//! was recomputed during the same run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{run_campaign, Strategy, SuccessTable};
use crate::classifier::Classifier;
use crate::corpus::{generate_corpus, read_logs, write_logs, CorpusSpec};
use crate::error::{Error, Result};
use crate::eval::{
    emit, roc, score_dataset, summary_csv, test_error, Format, RocCurve, RocOverlay, SummaryRow, TARGET_FPR,
};
use crate::features::{build_datasets, Dataset, SplitDataset, DEFAULT_SPLIT};
use crate::model::{read_ensemble, write_ensemble, write_model, Arch, MlpModel};
use crate::scalar::{fmt_exact, parse_exact};
use crate::seed::derive_seed;
use crate::train::{train_baseline, train_distilled, train_ensemble, training_log_csv, TrainConfig};

pub const DEFAULT_SEED: u64 = 42;
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.json";

/// A defense applied on top of the baseline architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Defense {
    None,
    Distill { temperature: f64 },
    Decay { coefficient: f64 },
    Ensemble { members: usize },
}

impl Defense {
    /// Grid evaluated by default: two temperatures, four decay rates, two
    /// ensemble sizes.
    pub fn default_grid() -> Vec<Defense> {
        let mut out = vec![Defense::None];
        out.extend([2.0, 10.0].map(|temperature| Defense::Distill { temperature }));
        out.extend([0.0001, 0.0005, 0.001, 0.01].map(|coefficient| Defense::Decay { coefficient }));
        out.extend([3, 5].map(|members| Defense::Ensemble { members }));
        out
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::None => Ok(()),
            Defense::Distill { temperature } if temperature >= 1.0 && temperature.is_finite() => Ok(()),
            Defense::Distill { .. } => Err(Error::config(
                "defenses",
                "distillation temperature must be finite and >= 1",
            )),
            Defense::Decay { coefficient } if coefficient > 0.0 && coefficient.is_finite() => Ok(()),
            Defense::Decay { .. } => Err(Error::config("defenses", "decay coefficient must be finite and > 0")),
            Defense::Ensemble { members } if members >= 3 && members % 2 == 1 => Ok(()),
            Defense::Ensemble { members } => Err(Error::config(
                "defenses",
                format!("ensemble size must be odd and >= 3, got {members}"),
            )),
        }
    }

    /// File-name friendly stem, e.g. `distill_T10`.
    pub fn stem(&self) -> String {
        match self {
            Defense::None => "baseline".to_string(),
            Defense::Distill { temperature } => format!("distill_T{temperature}"),
            Defense::Decay { coefficient } => format!("decay_D{coefficient}"),
            Defense::Ensemble { members } => format!("ensemble_E{members}"),
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::None => write!(f, "none"),
            Defense::Distill { temperature } => write!(f, "distill:T={temperature}"),
            Defense::Decay { coefficient } => write!(f, "decay:D={coefficient}"),
            Defense::Ensemble { members } => write!(f, "ensemble:E={members}"),
        }
    }
}

impl FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("defenses", format!("cannot parse defense `{s}`"));
        let d = if s == "none" {
            Defense::None
        } else if let Some(v) = s.strip_prefix("distill:T=") {
            Defense::Distill {
                temperature: v.parse().map_err(|_| bad())?,
            }
        } else if let Some(v) = s.strip_prefix("decay:D=") {
            Defense::Decay {
                coefficient: v.parse().map_err(|_| bad())?,
            }
        } else if let Some(v) = s.strip_prefix("ensemble:E=") {
            Defense::Ensemble {
                members: v.parse().map_err(|_| bad())?,
            }
        } else {
            return Err(bad());
        };
        d.validate()?;
        Ok(d)
    }
}

impl TryFrom<String> for Defense {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Defense> for String {
    fn from(d: Defense) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The corpus seed is replaced by one derived from `seed`.
    pub corpus: CorpusSpec,
    pub feature_count: usize,
    pub split: [f64; 3],
    pub hidden_counts: Vec<usize>,
    pub hidden_dim: usize,
    /// Depth of ensemble members; defaults to the first entry of `hidden_counts`.
    pub ensemble_hidden_count: Option<usize>,
    /// Temperature, weight decay and seed are set per model from the defense.
    pub train: TrainConfig,
    pub defenses: Vec<Defense>,
    pub budget: usize,
    /// At most this many detected malware test samples are attacked per model.
    pub attack_samples: usize,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            feature_count: 2000,
            split: DEFAULT_SPLIT,
            hidden_counts: vec![1, 2, 3, 4],
            hidden_dim: 128,
            ensemble_hidden_count: None,
            train: TrainConfig::default(),
            defenses: Defense::default_grid(),
            budget: 20,
            attack_samples: 500,
            strategies: Strategy::ALL.to_vec(),
            seed: DEFAULT_SEED,
            output_dir: PathBuf::from("experiment"),
        }
    }
}

/// One trained artifact in the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub name: String,
    pub defense: Defense,
    pub hidden_count: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.feature_count == 0 {
            return Err(Error::config("feature_count", "must be >= 1"));
        }
        if self.hidden_counts.is_empty() || self.hidden_counts.contains(&0) {
            return Err(Error::config("hidden_counts", "need at least one depth, all >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        if self.ensemble_hidden_count == Some(0) {
            return Err(Error::config("ensemble_hidden_count", "must be >= 1"));
        }
        if self.defenses.is_empty() {
            return Err(Error::config("defenses", "need at least one entry"));
        }
        for d in &self.defenses {
            d.validate()?;
        }
        if self.budget == 0 {
            return Err(Error::config("budget", "must be >= 1"));
        }
        if self.attack_samples == 0 {
            return Err(Error::config("attack_samples", "must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "need at least one strategy"));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "ratios must be positive and sum to 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every model the grid trains, in training order. Ensembles are trained
    /// once, at `ensemble_hidden_count`; other defenses at every depth.
    pub fn grid(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &h in &self.hidden_counts {
            for d in &self.defenses {
                if !matches!(d, Defense::Ensemble { .. }) {
                    cells.push(GridCell {
                        name: format!("{}_h{h}", d.stem()),
                        defense: *d,
                        hidden_count: h,
                    });
                }
            }
        }
        let h = self.ensemble_hidden_count.unwrap_or(self.hidden_counts[0]);
        for d in &self.defenses {
            if matches!(d, Defense::Ensemble { .. }) {
                cells.push(GridCell {
                    name: format!("{}_h{h}", d.stem()),
                    defense: *d,
                    hidden_count: h,
                });
            }
        }
        cells
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: derive_seed(self.seed, "corpus"),
            ..self.corpus.clone()
        }
    }
}

/// Models ready for training: all members of one grid cell plus their logs.
pub struct TrainedCell {
    pub members: Vec<MlpModel<f64>>,
    /// One training log per member (teacher then student for distillation).
    pub logs: Vec<String>,
}

/// Trains one grid cell.
pub fn train_cell(
    data: &SplitDataset,
    defense: Defense,
    arch: Arch,
    base: &TrainConfig,
    seed: u64,
) -> Result<TrainedCell> {
    let mut cell = train_cell_inner(data, defense, arch, base, seed)?;
    for m in cell.members.iter_mut() {
        m.training.defense = defense.to_string();
    }
    Ok(cell)
}

fn train_cell_inner(
    data: &SplitDataset,
    defense: Defense,
    arch: Arch,
    base: &TrainConfig,
    seed: u64,
) -> Result<TrainedCell> {
    defense.validate()?;
    let config = TrainConfig {
        seed,
        temperature: 1.0,
        weight_decay: 0.0,
        ..base.clone()
    };
    match defense {
        Defense::None => {
            let t = train_baseline(data, arch, &config)?;
            Ok(TrainedCell {
                logs: vec![training_log_csv(&t.log)],
                members: vec![t.model],
            })
        }
        Defense::Decay { coefficient } => {
            let t = train_baseline(
                data,
                arch,
                &TrainConfig {
                    weight_decay: coefficient,
                    ..config
                },
            )?;
            Ok(TrainedCell {
                logs: vec![training_log_csv(&t.log)],
                members: vec![t.model],
            })
        }
        Defense::Distill { temperature } => {
            let d = train_distilled(data, arch, &TrainConfig { temperature, ..config })?;
            Ok(TrainedCell {
                logs: vec![training_log_csv(&d.teacher.log), training_log_csv(&d.student.log)],
                members: vec![d.student.model],
            })
        }
        Defense::Ensemble { members } => {
            let ts = train_ensemble(data, arch, &config, members)?;
            Ok(TrainedCell {
                logs: ts.iter().map(|t| training_log_csv(&t.log)).collect(),
                members: ts.into_iter().map(|t| t.model).collect(),
            })
        }
    }
}

/// Malware test samples the target detects, in split order, at most `cap`.
pub fn attack_pool<'d>(
    target: &Classifier<'_, f64>,
    test: &'d Dataset,
    cap: usize,
) -> Result<Vec<(u64, &'d SparseVec)>> {
    let mut out = Vec::new();
    for (i, x) in test.malware() {
        if out.len() == cap {
            break;
        }
        if target.decide(x)?.malware {
            out.push((i as u64, x));
        }
    }
    Ok(out)
}

type SparseVec = crate::features::SparseBinaryVector;

/// Status of a stage in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub status: StageStatus,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub file_versions: BTreeMap<String, u32>,
    pub master_seed: u64,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn new(config: &ExperimentConfig) -> Self {
        let file_versions = [("corpus", 1), ("dataset", 1), ("model", 1), ("manifest", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            format: "advgauntlet-manifest".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            file_versions,
            master_seed: config.seed,
            config_sha256: sha256_hex(config.to_json().as_bytes()),
            seeds: BTreeMap::new(),
            stages: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Which stages ran and which were skipped in one invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    dir: &'a Path,
    previous: Option<Manifest>,
    manifest: Manifest,
    report: RunReport,
}

impl Runner<'_> {
    fn output_hashes(&self, outputs: &[String]) -> Result<BTreeMap<String, String>> {
        outputs
            .iter()
            .map(|rel| Ok((rel.clone(), file_hash(&self.dir.join(rel))?)))
            .collect()
    }

    fn can_skip(&self, name: &str, key: &str, outputs: &[String], upstream_ran: bool) -> bool {
        if upstream_ran {
            return false;
        }
        let Some(rec) = self.previous.as_ref().and_then(|m| m.stages.get(name)) else {
            return false;
        };
        if rec.status != StageStatus::Valid || rec.key != key || rec.outputs.len() != outputs.len() {
            return false;
        }
        outputs.iter().all(|rel| {
            rec.outputs
                .get(rel)
                .is_some_and(|h| file_hash(&self.dir.join(rel)).ok().as_deref() == Some(h.as_str()))
        })
    }

    /// Runs or skips a stage. Returns whether it ran.
    fn stage(
        &mut self,
        name: &str,
        key: String,
        outputs: Vec<String>,
        upstream_ran: bool,
        body: impl FnOnce() -> Result<()>,
    ) -> Result<bool> {
        if self.can_skip(name, &key, &outputs, upstream_ran) {
            log::info!("stage {name}: up to date");
            let rec = self.previous.as_ref().expect("checked").stages[name].clone();
            self.manifest.stages.insert(name.to_string(), rec);
            self.report.skipped.push(name.to_string());
            return Ok(false);
        }
        log::info!("stage {name}: running");
        let result = body().and_then(|()| self.output_hashes(&outputs));
        match result {
            Ok(hashes) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageRecord {
                        key,
                        status: StageStatus::Valid,
                        outputs: hashes,
                        error: None,
                    },
                );
                self.report.executed.push(name.to_string());
                Ok(true)
            }
            Err(e) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageRecord {
                        key,
                        status: StageStatus::Invalid,
                        outputs: BTreeMap::new(),
                        error: Some(e.to_string()),
                    },
                );
                self.manifest.write(&self.dir.join(MANIFEST))?;
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn recorded(&self, name: &str) -> &BTreeMap<String, String> {
        &self.manifest.stages[name].outputs
    }
}

fn key_of(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}").as_bytes())
}

fn mkdirs(dir: &Path, subdirs: &[&str]) -> Result<()> {
    for s in subdirs {
        let p = dir.join(s);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the whole grid into `dir` and returns which stages executed.
pub fn run_pipeline(config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    config.validate()?;
    mkdirs(
        dir,
        &["data", "models", "logs", "traces", "success", "roc", "eval", "report"],
    )?;
    let previous = Manifest::read(&dir.join(MANIFEST)).ok();
    let mut run = Runner {
        dir,
        previous,
        manifest: Manifest::new(config),
        report: RunReport::default(),
    };
    write_text(&dir.join(CONFIG_COPY), &config.to_json())?;

    let spec = config.corpus_spec();
    let split_seed = derive_seed(config.seed, "split");
    run.manifest.seeds.insert("corpus".into(), spec.seed);
    run.manifest.seeds.insert("split".into(), split_seed);

    let corpus_json = serde_json::to_string(&spec).expect("spec serializes");
    let corpus_ran = run.stage(
        "corpus",
        key_of(&["corpus", &corpus_json]),
        vec!["corpus.jsonl".into()],
        false,
        || write_logs(&generate_corpus(&spec)?, &dir.join("corpus.jsonl")),
    )?;

    let data_files: Vec<String> = SplitDataset::FILES.iter().map(|f| format!("data/{f}")).collect();
    let mut feature_outputs = vec!["vocab.tsv".to_string()];
    feature_outputs.extend(data_files.iter().cloned());
    let features_key = key_of(&[
        "features",
        &run.recorded("corpus")["corpus.jsonl"],
        &config.feature_count.to_string(),
        &format!("{:?}", config.split),
        &split_seed.to_string(),
    ]);
    let features_ran = run.stage("features", features_key, feature_outputs, corpus_ran, || {
        let logs = read_logs(&dir.join("corpus.jsonl"))?;
        let (vocab, data) = build_datasets(&logs, config.feature_count, config.split, split_seed)?;
        vocab.write(&dir.join("vocab.tsv"))?;
        data.write_dir(&dir.join("data"))
    })?;
    let data_hash = data_files
        .iter()
        .map(|f| run.recorded("features")[f].clone())
        .collect::<Vec<_>>()
        .join(",");
    let data = SplitDataset::read_dir(&dir.join("data"))?;

    let train_json = serde_json::to_string(&config.train).expect("train config serializes");
    let strategies_text = config.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
    let mut summary = Vec::new();
    let mut any_model_ran = false;
    let cells = config.grid();
    for cell in &cells {
        let model_seed = derive_seed(config.seed, &format!("train/{}", cell.name));
        let attack_seed = derive_seed(config.seed, &format!("attack/{}", cell.name));
        run.manifest.seeds.insert(format!("train/{}", cell.name), model_seed);
        run.manifest.seeds.insert(format!("attack/{}", cell.name), attack_seed);
        let arch = Arch::new(cell.hidden_count, config.hidden_dim);

        let model_file = format!("models/{}.model", cell.name);
        let log_file = format!("logs/{}.csv", cell.name);
        let train_stage = format!("train/{}", cell.name);
        let train_key = key_of(&[
            "train",
            &data_hash,
            &cell.defense.to_string(),
            &format!("{arch:?}"),
            &train_json,
            &model_seed.to_string(),
        ]);
        let model_ran = run.stage(
            &train_stage,
            train_key,
            vec![model_file.clone(), log_file.clone()],
            features_ran,
            || {
                let trained = train_cell(&data, cell.defense, arch, &config.train, model_seed)?;
                let path = dir.join(&model_file);
                if trained.members.len() == 1 {
                    write_model(&trained.members[0], &path)?;
                } else {
                    write_ensemble(&trained.members, &path)?;
                }
                write_text(&dir.join(&log_file), &join_logs(&trained.logs))
            },
        )?;
        any_model_ran |= model_ran;
        let model_hash = run.recorded(&train_stage)[&model_file].clone();
        let models: Vec<MlpModel<f64>> = read_ensemble(&dir.join(&model_file))?;
        let target = Classifier::new(&models)?;

        let trace_file = format!("traces/{}.jsonl", cell.name);
        let success_file = format!("success/{}.csv", cell.name);
        let success_svg = format!("success/{}.svg", cell.name);
        let attack_key = key_of(&[
            "attack",
            &model_hash,
            &data_hash,
            &config.budget.to_string(),
            &config.attack_samples.to_string(),
            &strategies_text,
            &attack_seed.to_string(),
        ]);
        run.stage(
            &format!("attack/{}", cell.name),
            attack_key,
            vec![trace_file.clone(), success_file.clone(), success_svg.clone()],
            model_ran,
            || {
                let pool = attack_pool(&target, &data.test, config.attack_samples)?;
                let campaign = run_campaign(&target, &pool, &config.strategies, config.budget, attack_seed)?;
                write_text(&dir.join(&trace_file), &campaign.traces_jsonl())?;
                emit(&campaign.table, Format::Csv, &dir.join(&success_file))?;
                emit(&campaign.table, Format::Svg, &dir.join(&success_svg))
            },
        )?;

        let roc_file = format!("roc/{}.csv", cell.name);
        let roc_svg = format!("roc/{}.svg", cell.name);
        let eval_file = format!("eval/{}.csv", cell.name);
        let eval_key = key_of(&["eval", &model_hash, &data_hash, &cell.defense.to_string()]);
        run.stage(
            &format!("eval/{}", cell.name),
            eval_key,
            vec![roc_file.clone(), roc_svg.clone(), eval_file.clone()],
            model_ran,
            || {
                let curve = roc(&score_dataset(&target, &data.test)?)?;
                emit(&curve, Format::Csv, &dir.join(&roc_file))?;
                emit(&curve, Format::Svg, &dir.join(&roc_svg))?;
                let row = SummaryRow {
                    model: cell.name.clone(),
                    defense: cell.defense.to_string(),
                    hidden_count: cell.hidden_count,
                    test_error_pct: test_error(&target, &data.test)?,
                    tpr_at_target: curve.tpr_at_fpr(TARGET_FPR)?.0,
                };
                write_text(&dir.join(&eval_file), &summary_csv(&[row]))
            },
        )?;
        summary.push(cell.name.clone());
    }

    let mut report_inputs = vec!["report".to_string()];
    for name in &summary {
        for stage in [format!("attack/{name}"), format!("eval/{name}")] {
            report_inputs.extend(run.recorded(&stage).values().cloned());
        }
    }
    let report_outputs = report_files(&cells, config);
    run.stage(
        "report",
        key_of(&report_inputs.iter().map(String::as_str).collect::<Vec<_>>()),
        report_outputs,
        any_model_ran,
        || write_report(dir, &cells).map(|_| ()),
    )?;

    run.manifest.write(&dir.join(MANIFEST))?;
    Ok(run.report)
}

fn join_logs(logs: &[String]) -> String {
    if logs.len() == 1 {
        return logs[0].clone();
    }
    let mut out = String::new();
    for (i, l) in logs.iter().enumerate() {
        out.push_str(&format!("# member {i}\n{l}"));
    }
    out
}

fn report_files(cells: &[GridCell], _config: &ExperimentConfig) -> Vec<String> {
    let mut out = vec![
        "summary.csv".to_string(),
        "report/success_at_budget.csv".to_string(),
        "report/success_by_iteration.csv".to_string(),
    ];
    let mut depths: Vec<usize> = cells.iter().map(|c| c.hidden_count).collect();
    depths.sort_unstable();
    depths.dedup();
    for h in depths {
        out.push(format!("report/roc_h{h}.csv"));
        out.push(format!("report/roc_h{h}.svg"));
    }
    out
}

/// Parses a single-row or multi-row summary CSV.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::parse(path, i + 1, m.to_string());
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        rows.push(SummaryRow {
            model: f[0].to_string(),
            defense: f[1].to_string(),
            hidden_count: f[2].parse().map_err(|_| bad("bad H"))?,
            test_error_pct: parse_exact(f[3]).ok_or_else(|| bad("bad error"))?,
            tpr_at_target: parse_exact(f[4]).ok_or_else(|| bad("bad tpr"))?,
        });
    }
    Ok(rows)
}

/// Parses a success CSV back into a table.
pub fn read_success(path: &Path) -> Result<SuccessTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(Strategy, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::parse(path, i + 1, m.to_string());
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let st: Strategy = f[0].parse().map_err(|_| bad("unknown strategy"))?;
        let rate: f64 = parse_exact(f[2]).ok_or_else(|| bad("bad rate"))?;
        match rows.last_mut() {
            Some((s, rates)) if *s == st => rates.push(rate),
            _ => rows.push((st, vec![rate])),
        }
    }
    let budget = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.1.len() != budget) {
        return Err(Error::parse(path, 0, "ragged success table".to_string()));
    }
    Ok(SuccessTable { budget, rows })
}

/// Aggregates per-model evaluation and attack outputs of a finished grid.
/// Returns the summary rows.
pub fn write_report(dir: &Path, cells: &[GridCell]) -> Result<Vec<SummaryRow>> {
    mkdirs(dir, &["report"])?;
    let mut rows = Vec::new();
    let mut at_budget = String::from("model,defense,H,strategy,success_rate\n");
    let mut by_iter = String::from("model,strategy,iteration,success_rate\n");
    for cell in cells {
        rows.extend(read_summary(&dir.join(format!("eval/{}.csv", cell.name)))?);
        let table = read_success(&dir.join(format!("success/{}.csv", cell.name)))?;
        for (st, rates) in &table.rows {
            at_budget.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.name,
                cell.defense,
                cell.hidden_count,
                st,
                fmt_exact(*rates.last().expect("budget >= 1"))
            ));
            for (k, r) in rates.iter().enumerate() {
                by_iter.push_str(&format!("{},{},{},{}\n", cell.name, st, k + 1, fmt_exact(*r)));
            }
        }
    }
    write_text(&dir.join("summary.csv"), &summary_csv(&rows))?;
    write_text(&dir.join("report/success_at_budget.csv"), &at_budget)?;
    write_text(&dir.join("report/success_by_iteration.csv"), &by_iter)?;

    let mut depths: Vec<usize> = cells.iter().map(|c| c.hidden_count).collect();
    depths.sort_unstable();
    depths.dedup();
    for h in depths {
        let mut curves = Vec::new();
        for cell in cells.iter().filter(|c| c.hidden_count == h) {
            curves.push((
                cell.name.clone(),
                read_roc(&dir.join(format!("roc/{}.csv", cell.name)))?,
            ));
        }
        let overlay = RocOverlay {
            title: format!("ROC, {h} hidden layer(s)"),
            curves: curves.iter().map(|(n, c)| (n.clone(), c)).collect(),
        };
        emit(&overlay, Format::Csv, &dir.join(format!("report/roc_h{h}.csv")))?;
        emit(&overlay, Format::Svg, &dir.join(format!("report/roc_h{h}.svg")))?;
    }
    Ok(rows)
}

/// Parses a ROC CSV written by the eval stage.
pub fn read_roc(path: &Path) -> Result<RocCurve<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::parse(path, i + 1, "expected threshold,fpr,tpr".to_string());
        let f: Vec<f64> = line
            .split(',')
            .map(parse_exact)
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        if f.len() != 3 {
            return Err(bad());
        }
        points.push(crate::eval::RocPoint {
            threshold: f[0],
            fpr: f[1],
            tpr: f[2],
        });
    }
    Ok(RocCurve { points })
}

/// Reconstructs the grid of a finished experiment from its saved config.
pub fn grid_of(dir: &Path) -> Result<Vec<GridCell>> {
    Ok(ExperimentConfig::read(&dir.join(CONFIG_COPY))?.grid())
}
