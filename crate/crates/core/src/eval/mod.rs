//! ROC analysis at low false-positive rates, test error, and CSV/SVG output.

mod svg;

pub use svg::{render_svg, Series, LOG_X_FLOOR};

use std::path::Path;

use crate::attack::SuccessTable;
use crate::classifier::Classifier;
use crate::corpus::MALWARE;
use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::scalar::{fmt_exact, Scalar};

/// Operating point used throughout: FPR = 0.01%.
pub const TARGET_FPR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint<F> {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples scoring `>= threshold` are called malware. `+inf` for the origin.
    pub threshold: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve<F> {
    pub points: Vec<RocPoint<F>>,
}

/// Exact ROC from sweeping every distinct score as a threshold.
pub fn roc<F: Scalar>(scores: &[(F, u8)]) -> Result<RocCurve<F>> {
    let positives = scores.iter().filter(|(_, l)| *l == MALWARE).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::contract("ROC needs both malware and benign samples"));
    }
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::contract("ROC scores must not be NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.partial_cmp(&scores[a].0).expect("no NaN"));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: F::infinity(),
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]].0;
        while i < order.len() && scores[order[i]].0 == threshold {
            if scores[order[i]].1 == MALWARE {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

impl<F: Scalar> RocCurve<F> {
    /// Highest TPR among points with `fpr <= target_fpr`, with its threshold.
    /// The origin always qualifies, so an unreachable target yields `(0, +inf)`.
    pub fn tpr_at_fpr(&self, target_fpr: f64) -> Result<(f64, F)> {
        if !(0.0..=1.0).contains(&target_fpr) {
            return Err(Error::contract(format!("target FPR {target_fpr} outside [0, 1]")));
        }
        let mut best = (0.0, F::infinity());
        for p in self.points.iter().filter(|p| p.fpr <= target_fpr) {
            if p.tpr > best.0 {
                best = (p.tpr, p.threshold);
            }
        }
        Ok(best)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_exact(p.threshold),
                fmt_exact(p.fpr),
                fmt_exact(p.tpr)
            ));
        }
        out
    }

    pub fn series(&self, name: &str) -> Series {
        Series {
            name: name.to_string(),
            points: self.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
        }
    }
}

/// Scores of every sample in a dataset, paired with labels.
pub fn score_dataset<F: Scalar>(target: &Classifier<'_, F>, data: &Dataset) -> Result<Vec<(F, u8)>> {
    data.vectors
        .iter()
        .zip(&data.labels)
        .map(|(x, &l)| Ok((target.score(x)?, l)))
        .collect()
}

/// Misclassification percentage with malware iff `p_M >= 0.5` (majority vote
/// for ensembles).
pub fn test_error<F: Scalar>(target: &Classifier<'_, F>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("test error of an empty split"));
    }
    let mut wrong = 0usize;
    for (x, &l) in data.vectors.iter().zip(&data.labels) {
        if target.decide(x)?.malware != (l == MALWARE) {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub defense: String,
    pub hidden_count: usize,
    pub test_error_pct: f64,
    pub tpr_at_target: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("model,defense,H,test_error_pct,tpr_at_1e-4\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model,
            r.defense,
            r.hidden_count,
            fmt_exact(r.test_error_pct),
            fmt_exact(r.tpr_at_target)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Svg,
}

/// Something that renders to both a loss-free CSV and a line plot.
pub trait Emit {
    fn csv(&self) -> Result<String>;
    fn svg(&self) -> Result<String>;
}

impl<F: Scalar> Emit for RocCurve<F> {
    fn csv(&self) -> Result<String> {
        if self.points.is_empty() {
            return Err(Error::contract("empty ROC curve"));
        }
        Ok(self.to_csv())
    }

    fn svg(&self) -> Result<String> {
        render_svg(
            "ROC",
            "false positive rate",
            "true positive rate",
            &[self.series("roc")],
            true,
        )
    }
}

/// Several labelled ROC curves drawn on one low-FPR plot.
pub struct RocOverlay<'a, F> {
    pub title: String,
    pub curves: Vec<(String, &'a RocCurve<F>)>,
}

impl<F: Scalar> Emit for RocOverlay<'_, F> {
    fn csv(&self) -> Result<String> {
        if self.curves.is_empty() {
            return Err(Error::contract("no curves to emit"));
        }
        let mut out = String::from("curve,threshold,fpr,tpr\n");
        for (name, c) in &self.curves {
            for line in c.to_csv().lines().skip(1) {
                out.push_str(&format!("{name},{line}\n"));
            }
        }
        Ok(out)
    }

    fn svg(&self) -> Result<String> {
        let series: Vec<Series> = self.curves.iter().map(|(n, c)| c.series(n)).collect();
        render_svg(&self.title, "false positive rate", "true positive rate", &series, true)
    }
}

impl Emit for SuccessTable {
    fn csv(&self) -> Result<String> {
        if self.rows.is_empty() || self.budget == 0 {
            return Err(Error::contract("empty success table"));
        }
        Ok(self.to_csv())
    }

    fn svg(&self) -> Result<String> {
        let series: Vec<Series> = self
            .rows
            .iter()
            .map(|(st, rates)| Series {
                name: st.name().to_string(),
                points: rates.iter().enumerate().map(|(k, &r)| ((k + 1) as f64, r)).collect(),
            })
            .collect();
        render_svg("attack success", "iteration", "success rate", &series, false)
    }
}

pub fn emit<T: Emit + ?Sized>(item: &T, format: Format, path: &Path) -> Result<()> {
    let body = match format {
        Format::Csv => item.csv()?,
        Format::Svg => item.svg()?,
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
