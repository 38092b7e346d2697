//! Iterative feature-flipping attacks on binary inputs.
//!
//! Every iteration recomputes the Jacobian of the target's output with respect
//! to the original features at the current sample, picks one feature according
//! to the strategy, flips it and re-queries the target. No feature is flipped
//! twice.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::corpus::{BENIGN, MALWARE};
use crate::error::{Error, Result};
use crate::features::SparseBinaryVector;
use crate::scalar::{fmt_exact, Scalar};
use crate::seed::{derived_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "dec_pos")]
    DecPos,
    #[serde(rename = "inc_neg")]
    IncNeg,
    #[serde(rename = "dec_pos+inc_neg")]
    DecPosIncNeg,
    #[serde(rename = "rand_dec_pos")]
    RandDecPos,
    #[serde(rename = "rand_inc_neg")]
    RandIncNeg,
    #[serde(rename = "rand_dec_pos+inc_neg")]
    RandDecPosIncNeg,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::DecPos,
        Strategy::IncNeg,
        Strategy::DecPosIncNeg,
        Strategy::RandDecPos,
        Strategy::RandIncNeg,
        Strategy::RandDecPosIncNeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DecPos => "dec_pos",
            Strategy::IncNeg => "inc_neg",
            Strategy::DecPosIncNeg => "dec_pos+inc_neg",
            Strategy::RandDecPos => "rand_dec_pos",
            Strategy::RandIncNeg => "rand_inc_neg",
            Strategy::RandDecPosIncNeg => "rand_dec_pos+inc_neg",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(
            self,
            Strategy::RandDecPos | Strategy::RandIncNeg | Strategy::RandDecPosIncNeg
        )
    }

    /// The Jacobian-ranked strategy a randomized one mirrors, and vice versa.
    pub fn counterpart(self) -> Strategy {
        match self {
            Strategy::DecPos => Strategy::RandDecPos,
            Strategy::IncNeg => Strategy::RandIncNeg,
            Strategy::DecPosIncNeg => Strategy::RandDecPosIncNeg,
            Strategy::RandDecPos => Strategy::DecPos,
            Strategy::RandIncNeg => Strategy::IncNeg,
            Strategy::RandDecPosIncNeg => Strategy::DecPosIncNeg,
        }
    }

    /// Rule tried first at `iteration` (0-based) and its fallback.
    fn rules(self, iteration: usize) -> (Rule, Option<Rule>) {
        match self {
            Strategy::DecPos | Strategy::RandDecPos => (Rule::DecPos, None),
            Strategy::IncNeg | Strategy::RandIncNeg => (Rule::IncNeg, None),
            Strategy::DecPosIncNeg | Strategy::RandDecPosIncNeg => {
                if iteration % 2 == 0 {
                    (Rule::DecPos, Some(Rule::IncNeg))
                } else {
                    (Rule::IncNeg, Some(Rule::DecPos))
                }
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    DecPos,
    IncNeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1->0")]
    Disable,
    #[serde(rename = "0->1")]
    Enable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flip {
    pub feature: usize,
    pub direction: Direction,
}

/// Per-feature derivatives at one point and the resulting sign classes.
#[derive(Debug, Clone)]
pub struct FeatureSigns<F> {
    /// `dp_malware / dx_j`.
    pub d_malware: Vec<F>,
    /// `dp_benign / dx_j`.
    pub d_benign: Vec<F>,
    /// Features with `dp_malware / dx_j > 0`, ascending.
    pub positive: Vec<usize>,
    /// Features with `dp_benign / dx_j > 0`, ascending.
    pub negative: Vec<usize>,
}

pub fn classify_feature_signs<F: Scalar>(
    target: &Classifier<'_, F>,
    x: &SparseBinaryVector,
) -> Result<FeatureSigns<F>> {
    let jac = target.jacobian_original(x)?;
    let d_malware = jac.row(MALWARE as usize).to_vec();
    let d_benign = jac.row(BENIGN as usize).to_vec();
    let strictly_positive = |d: &[F]| {
        d.iter()
            .enumerate()
            .filter(|(_, &v)| v > F::zero())
            .map(|(j, _)| j)
            .collect()
    };
    Ok(FeatureSigns {
        positive: strictly_positive(&d_malware),
        negative: strictly_positive(&d_benign),
        d_malware,
        d_benign,
    })
}

/// Mutable attack state: the current bits and which features were flipped.
#[derive(Debug, Clone)]
pub struct AttackState {
    pub current: Vec<bool>,
    pub touched: Vec<bool>,
}

impl AttackState {
    pub fn new(x: &SparseBinaryVector) -> Self {
        Self {
            current: x.to_dense(),
            touched: vec![false; x.dim()],
        }
    }

    fn apply(&mut self, flip: Flip) {
        self.current[flip.feature] = flip.direction == Direction::Enable;
        self.touched[flip.feature] = true;
    }

    pub fn vector(&self) -> SparseBinaryVector {
        SparseBinaryVector::from_dense(&self.current)
    }
}

fn pick<F: Scalar>(
    rule: Rule,
    randomized: bool,
    state: &AttackState,
    signs: &FeatureSigns<F>,
    rng: &mut Rng,
) -> Option<Flip> {
    let (candidates, score, want_on, direction) = match rule {
        Rule::DecPos => (&signs.positive, &signs.d_malware, true, Direction::Disable),
        Rule::IncNeg => (&signs.negative, &signs.d_benign, false, Direction::Enable),
    };
    let pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&j| state.current[j] == want_on && !state.touched[j])
        .collect();
    if pool.is_empty() {
        return None;
    }
    let feature = if randomized {
        pool[rng.gen_range(0..pool.len())]
    } else {
        // Largest derivative; lowest index on ties.
        let mut best = pool[0];
        for &j in &pool[1..] {
            if score[j] > score[best] {
                best = j;
            }
        }
        best
    };
    Some(Flip { feature, direction })
}

/// Chooses the feature to flip at `iteration`, or `None` when every
/// applicable pool is empty.
pub fn select_flip<F: Scalar>(
    strategy: Strategy,
    iteration: usize,
    state: &AttackState,
    signs: &FeatureSigns<F>,
    rng: &mut Rng,
) -> Option<Flip> {
    let (first, fallback) = strategy.rules(iteration);
    let randomized = strategy.is_randomized();
    pick(first, randomized, state, signs, rng).or_else(|| fallback.and_then(|r| pick(r, randomized, state, signs, rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStep {
    /// 1-based: the number of flips applied so far.
    pub iteration: usize,
    pub feature: usize,
    pub direction: Direction,
    /// Rendered with 17 significant digits.
    pub p_malware: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub malware_votes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub sample_id: u64,
    pub strategy: Strategy,
    pub budget: usize,
    pub steps: Vec<AttackStep>,
    /// Flips needed to obtain a benign decision; 0 if the sample already evaded.
    pub success_iteration: Option<usize>,
}

impl AttackTrace {
    /// Replays the trace on its origin sample.
    pub fn crafted(&self, origin: &SparseBinaryVector) -> SparseBinaryVector {
        let mut state = AttackState::new(origin);
        for s in &self.steps {
            state.apply(Flip {
                feature: s.feature,
                direction: s.direction,
            });
        }
        state.vector()
    }

    pub fn succeeded_by(&self, iteration: usize) -> bool {
        self.success_iteration.is_some_and(|k| k <= iteration)
    }
}

pub fn attack_rng(seed: u64, sample_id: u64, strategy: Strategy) -> Rng {
    derived_rng(seed, &format!("attack/{sample_id}/{}", strategy.name()))
}

/// Crafts an adversarial variant of a malware sample, flipping at most
/// `budget` features and stopping at the first benign decision.
pub fn craft<F: Scalar>(
    target: &Classifier<'_, F>,
    sample_id: u64,
    x0: &SparseBinaryVector,
    strategy: Strategy,
    budget: usize,
    seed: u64,
) -> Result<AttackTrace> {
    if budget < 1 {
        return Err(Error::contract("attack budget must be >= 1"));
    }
    let mut trace = AttackTrace {
        sample_id,
        strategy,
        budget,
        steps: Vec::new(),
        success_iteration: None,
    };
    if !target.decide(x0)?.malware {
        trace.success_iteration = Some(0);
        return Ok(trace);
    }
    let mut rng = attack_rng(seed, sample_id, strategy);
    let mut state = AttackState::new(x0);
    for iteration in 0..budget {
        let x = state.vector();
        let signs = classify_feature_signs(target, &x)?;
        let Some(flip) = select_flip(strategy, iteration, &state, &signs, &mut rng) else {
            break;
        };
        state.apply(flip);
        let decision = target.decide(&state.vector())?;
        trace.steps.push(AttackStep {
            iteration: iteration + 1,
            feature: flip.feature,
            direction: flip.direction,
            p_malware: fmt_exact(decision.p_malware),
            malware_votes: decision.votes,
        });
        if !decision.malware {
            trace.success_iteration = Some(iteration + 1);
            break;
        }
    }
    Ok(trace)
}

/// Cumulative success rate per strategy for iterations `1..=budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessTable {
    pub budget: usize,
    pub rows: Vec<(Strategy, Vec<f64>)>,
}

impl SuccessTable {
    pub fn from_traces(traces: &[AttackTrace], strategies: &[Strategy], budget: usize) -> Self {
        let rows = strategies
            .iter()
            .map(|&st| {
                let mine: Vec<&AttackTrace> = traces.iter().filter(|t| t.strategy == st).collect();
                let rates = (1..=budget)
                    .map(|k| {
                        if mine.is_empty() {
                            0.0
                        } else {
                            mine.iter().filter(|t| t.succeeded_by(k)).count() as f64 / mine.len() as f64
                        }
                    })
                    .collect();
                (st, rates)
            })
            .collect();
        Self { budget, rows }
    }

    pub fn rate(&self, strategy: Strategy, iteration: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|(s, _)| *s == strategy)
            .and_then(|(_, r)| r.get(iteration.checked_sub(1)?).copied())
    }

    /// Success at the final iteration.
    pub fn final_rate(&self, strategy: Strategy) -> Option<f64> {
        self.rate(strategy, self.budget)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,iteration,success_rate\n");
        for (st, rates) in &self.rows {
            for (k, r) in rates.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", st.name(), k + 1, fmt_exact(*r)));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub traces: Vec<AttackTrace>,
    pub table: SuccessTable,
}

impl Campaign {
    /// One JSON document per trace.
    pub fn traces_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.traces {
            out.push_str(&serde_json::to_string(t).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Runs every strategy on every sample.
pub fn run_campaign<F: Scalar>(
    target: &Classifier<'_, F>,
    samples: &[(u64, &SparseBinaryVector)],
    strategies: &[Strategy],
    budget: usize,
    seed: u64,
) -> Result<Campaign> {
    if samples.is_empty() {
        return Err(Error::contract("campaign needs at least one malware sample"));
    }
    let mut traces = Vec::with_capacity(samples.len() * strategies.len());
    for &st in strategies {
        for &(id, x) in samples {
            traces.push(craft(target, id, x, st, budget, seed)?);
        }
    }
    let table = SuccessTable::from_traces(&traces, strategies, budget);
    Ok(Campaign { traces, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dense, MlpModel, Normalizer, ProjectionMatrix};
    use ndarray::{arr1, Array1, Array2};

    /// Identity projection, one always-active ReLU unit per input (`x_j + 1`)
    /// and an output layer putting `w_j` into the malware logit, so that
    /// `p_M = sigmoid(bias + sum_j w_j x_j)`.
    fn linear_model(weights: &[f64], bias: f64) -> MlpModel<f64> {
        let d = weights.len();
        let hidden = Dense {
            weight: Array2::eye(d),
            bias: Array1::ones(d),
        };
        let mut out_w = Array2::zeros((2, d));
        for (j, &w) in weights.iter().enumerate() {
            out_w[[1, j]] = w;
        }
        let out = Dense {
            weight: out_w,
            bias: arr1(&[0.0, bias - weights.iter().sum::<f64>()]),
        };
        MlpModel::from_parts(
            ProjectionMatrix::identity(d),
            Normalizer::identity(d),
            vec![hidden, out],
            1.0,
        )
        .unwrap()
    }

    fn signs_of(model: &MlpModel<f64>, on: &[u32]) -> (FeatureSigns<f64>, AttackState) {
        let x = SparseBinaryVector::new(model.original_dim(), on.to_vec()).unwrap();
        let signs = classify_feature_signs(&Classifier::Single(model), &x).unwrap();
        (signs, AttackState::new(&x))
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(st.name().parse::<Strategy>().unwrap(), st);
            assert_eq!(st.counterpart().counterpart(), st);
            assert_ne!(st.is_randomized(), st.counterpart().is_randomized());
        }
        assert!("dec-pos".parse::<Strategy>().is_err());
    }

    #[test]
    fn negative_set_mirrors_malware_gradient() {
        let m = linear_model(&[2.0, -1.0, 0.0, 0.5], -0.5);
        let (signs, _) = signs_of(&m, &[0, 2]);
        assert_eq!(signs.positive, vec![0, 3]);
        assert_eq!(signs.negative, vec![1]);
        let mirrored: Vec<usize> = (0..4).filter(|&j| signs.d_malware[j] < 0.0).collect();
        assert_eq!(signs.negative, mirrored);
        // Feature 2 has exactly zero derivative and belongs to neither set.
        assert_eq!(signs.d_malware[2], 0.0);
    }

    #[test]
    fn dec_pos_takes_largest_derivative() {
        let m = linear_model(&[3.0, 1.0], -1.0);
        let (signs, state) = signs_of(&m, &[0, 1]);
        let flip = select_flip(Strategy::DecPos, 0, &state, &signs, &mut crate::seed::rng(0)).unwrap();
        assert_eq!(
            flip,
            Flip {
                feature: 0,
                direction: Direction::Disable
            }
        );
        // Brute force: disabling feature 0 lowers p_M the most.
        let p = |on: Vec<u32>| m.forward(&SparseBinaryVector::new(2, on).unwrap()).unwrap().p_malware();
        assert!(p(vec![1]) < p(vec![0]));
    }

    #[test]
    fn empty_pool_yields_none() {
        let m = linear_model(&[3.0, 1.0, -2.0], 0.0);
        let x = SparseBinaryVector::new(3, vec![2]).unwrap();
        let signs = FeatureSigns {
            d_malware: vec![0.3, 0.1, -0.2],
            d_benign: vec![-0.3, -0.1, 0.2],
            positive: vec![0, 1],
            negative: vec![2],
        };
        let state = AttackState::new(&x);
        let mut rng = crate::seed::rng(0);
        assert_eq!(select_flip(Strategy::DecPos, 0, &state, &signs, &mut rng), None);
        assert_eq!(select_flip(Strategy::IncNeg, 0, &state, &signs, &mut rng), None);
        assert!(m.forward(&x).is_ok());
    }

    #[test]
    fn alternation_starts_with_dec_pos_and_falls_back() {
        let signs = FeatureSigns {
            d_malware: vec![0.3, -0.1, 0.2],
            d_benign: vec![-0.3, 0.1, -0.2],
            positive: vec![0, 2],
            negative: vec![1],
        };
        let state = AttackState::new(&SparseBinaryVector::new(3, vec![0, 2]).unwrap());
        let mut rng = crate::seed::rng(0);
        let f0 = select_flip(Strategy::DecPosIncNeg, 0, &state, &signs, &mut rng).unwrap();
        assert_eq!(
            f0,
            Flip {
                feature: 0,
                direction: Direction::Disable
            }
        );
        let f1 = select_flip(Strategy::DecPosIncNeg, 1, &state, &signs, &mut rng).unwrap();
        assert_eq!(
            f1,
            Flip {
                feature: 1,
                direction: Direction::Enable
            }
        );
        let mut no_neg = state.clone();
        no_neg.touched[1] = true;
        let f1 = select_flip(Strategy::DecPosIncNeg, 1, &no_neg, &signs, &mut rng).unwrap();
        assert_eq!(f1.direction, Direction::Disable);
    }

    #[test]
    fn random_choice_is_reproducible() {
        let mut d = vec![0.0; 10];
        for j in [2, 5, 9] {
            d[j] = 0.1 * j as f64;
        }
        let signs = FeatureSigns {
            d_benign: d.iter().map(|v| -v).collect(),
            d_malware: d,
            positive: vec![2, 5, 9],
            negative: vec![],
        };
        let state = AttackState::new(&SparseBinaryVector::new(10, vec![2, 5, 9]).unwrap());
        let pick = |seed| {
            let mut rng = attack_rng(seed, 17, Strategy::RandDecPos);
            (0..8)
                .map(|i| {
                    select_flip(Strategy::RandDecPos, i, &state, &signs, &mut rng)
                        .unwrap()
                        .feature
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(1), pick(1));
        assert!(pick(1).iter().all(|f| [2, 5, 9].contains(f)));
    }

    #[test]
    fn single_flip_success() {
        // Logit +0.2 with both features on; removing the weight-0.6 feature
        // moves it to -0.4.
        let m = linear_model(&[0.6, 0.3], -0.7);
        let x = SparseBinaryVector::new(2, vec![0, 1]).unwrap();
        let z = |x: &SparseBinaryVector| {
            let p = m.forward(x).unwrap();
            p.logits[1] - p.logits[0]
        };
        assert!((z(&x) - 0.2).abs() < 1e-12);
        assert!((z(&SparseBinaryVector::new(2, vec![1]).unwrap()) + 0.4).abs() < 1e-12);
        let trace = craft(&Classifier::Single(&m), 0, &x, Strategy::DecPos, 20, 1).unwrap();
        assert_eq!(trace.success_iteration, Some(1));
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].feature, 0);
    }

    #[test]
    fn already_benign_succeeds_at_zero() {
        let m = linear_model(&[0.6, 0.3], -5.0);
        let x = SparseBinaryVector::new(2, vec![0, 1]).unwrap();
        let trace = craft(&Classifier::Single(&m), 0, &x, Strategy::IncNeg, 20, 1).unwrap();
        assert_eq!(trace.success_iteration, Some(0));
        assert!(trace.steps.is_empty());
        assert!(craft(&Classifier::Single(&m), 0, &x, Strategy::IncNeg, 0, 1).is_err());
    }

    #[test]
    fn success_table_shape_and_csv() {
        let m = linear_model(&[0.6, 0.3, 0.2, -0.4], -0.2);
        let xs: Vec<SparseBinaryVector> = [vec![0, 1, 2], vec![0, 1], vec![1, 2, 3]]
            .into_iter()
            .map(|on| SparseBinaryVector::new(4, on).unwrap())
            .collect();
        let samples: Vec<(u64, &SparseBinaryVector)> = xs.iter().enumerate().map(|(i, x)| (i as u64, x)).collect();
        let c = run_campaign(&Classifier::Single(&m), &samples, &Strategy::ALL, 20, 3).unwrap();
        assert_eq!(c.traces.len(), 18);
        for (_, rates) in &c.table.rows {
            assert_eq!(rates.len(), 20);
            assert!(rates.windows(2).all(|w| w[0] <= w[1]));
        }
        let csv = c.table.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 * 20);
        assert!(csv.starts_with("strategy,iteration,success_rate\ndec_pos,1,"));
        assert!(run_campaign(&Classifier::Single(&m), &[], &Strategy::ALL, 20, 3).is_err());
        let line = c.traces_jsonl().lines().next().unwrap().to_string();
        let back: AttackTrace = serde_json::from_str(&line).unwrap();
        assert_eq!(back, c.traces[0]);
    }
}
