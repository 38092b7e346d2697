//! A deployed detector: one model, or an odd-sized majority-vote ensemble.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::SparseBinaryVector;
use crate::model::MlpModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision<F> {
    pub malware: bool,
    /// `p_M` of a single model; mean member `p_M` for an ensemble.
    pub p_malware: F,
    /// Members voting malware, when the target is an ensemble.
    pub votes: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a, F> {
    Single(&'a MlpModel<F>),
    Ensemble(&'a [MlpModel<F>]),
}

/// Outcome of majority voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub malware: bool,
    pub malware_votes: usize,
    pub members: usize,
}

/// Each member votes malware iff its `p_M >= 0.5`; malware iff votes > E/2.
pub fn predict_ensemble<F: Scalar>(models: &[MlpModel<F>], x: &SparseBinaryVector) -> Result<Vote> {
    if models.is_empty() {
        return Err(Error::contract("ensemble has no members"));
    }
    if models.len() % 2 == 0 {
        return Err(Error::contract(format!("ensemble size {} is even", models.len())));
    }
    let mut malware_votes = 0;
    for m in models {
        if m.forward(x)?.is_malware() {
            malware_votes += 1;
        }
    }
    Ok(Vote {
        malware: 2 * malware_votes > models.len(),
        malware_votes,
        members: models.len(),
    })
}

impl<'a, F: Scalar> Classifier<'a, F> {
    /// A one-element slice is treated as a single model.
    pub fn new(models: &'a [MlpModel<F>]) -> Result<Self> {
        match models.len() {
            0 => Err(Error::contract("classifier has no models")),
            1 => Ok(Classifier::Single(&models[0])),
            n if n % 2 == 0 => Err(Error::contract(format!("ensemble size {n} is even"))),
            _ => Ok(Classifier::Ensemble(models)),
        }
    }

    pub fn members(&self) -> &'a [MlpModel<F>] {
        match *self {
            Classifier::Single(m) => std::slice::from_ref(m),
            Classifier::Ensemble(ms) => ms,
        }
    }

    pub fn is_ensemble(&self) -> bool {
        matches!(self, Classifier::Ensemble(_))
    }

    pub fn original_dim(&self) -> usize {
        self.members()[0].original_dim()
    }

    pub fn decide(&self, x: &SparseBinaryVector) -> Result<Decision<F>> {
        match *self {
            Classifier::Single(m) => {
                let p = m.forward(x)?;
                Ok(Decision {
                    malware: p.is_malware(),
                    p_malware: p.p_malware(),
                    votes: None,
                })
            }
            Classifier::Ensemble(ms) => {
                let mut votes = 0;
                let mut total = F::zero();
                for m in ms {
                    let p = m.forward(x)?;
                    total += p.p_malware();
                    votes += p.is_malware() as usize;
                }
                Ok(Decision {
                    malware: 2 * votes > ms.len(),
                    p_malware: total / F::of(ms.len() as f64),
                    votes: Some(votes),
                })
            }
        }
    }

    /// Score used for ROC sweeps.
    pub fn score(&self, x: &SparseBinaryVector) -> Result<F> {
        Ok(self.decide(x)?.p_malware)
    }

    /// `c x D` Jacobian of the output probabilities with respect to the
    /// original features; the unweighted member mean for an ensemble.
    pub fn jacobian_original(&self, x: &SparseBinaryVector) -> Result<Array2<F>> {
        let members = self.members();
        let mut acc = members[0].jacobian_original(x)?;
        for m in &members[1..] {
            acc += &m.jacobian_original(x)?;
        }
        if members.len() > 1 {
            acc.mapv_inplace(|v| v / F::of(members.len() as f64));
        }
        Ok(acc)
    }
}
