use rand::Rng as _;

use crate::error::{Error, Result};
use crate::features::SparseBinaryVector;
use crate::scalar::Scalar;
use crate::seed::rng;

/// Fixed `D x P` sparse random projection with entries in {-1, 0, +1}.
///
/// Each entry is +1 and -1 with probability `1 / (2 sqrt(D))` each, so the
/// expected fraction of nonzeros is `1 / sqrt(D)`. Stored by original feature:
/// row `j` lists the projected columns feature `j` contributes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionMatrix {
    original_dim: usize,
    projected_dim: usize,
    seed: u64,
    rows: Vec<Vec<(u32, i8)>>,
}

/// Probability of each of +1 and -1 for an original dimension `d`.
pub fn sign_probability(d: usize) -> f64 {
    1.0 / (2.0 * (d as f64).sqrt())
}

impl ProjectionMatrix {
    pub fn new(original_dim: usize, projected_dim: usize, seed: u64) -> Result<Self> {
        if original_dim == 0 || projected_dim == 0 {
            return Err(Error::contract("projection dimensions must be >= 1"));
        }
        let p = sign_probability(original_dim);
        let mut rng = rng(seed);
        let rows = (0..original_dim)
            .map(|_| {
                (0..projected_dim as u32)
                    .filter_map(|col| {
                        let u: f64 = rng.gen();
                        if u < p {
                            Some((col, 1))
                        } else if u < 2.0 * p {
                            Some((col, -1))
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            original_dim,
            projected_dim,
            seed,
            rows,
        })
    }

    /// Builds a projection from explicit rows of `(column, sign)` pairs.
    pub fn from_rows(projected_dim: usize, seed: u64, rows: Vec<Vec<(u32, i8)>>) -> Result<Self> {
        for row in &rows {
            for &(col, sign) in row {
                if col as usize >= projected_dim || !(sign == 1 || sign == -1) {
                    return Err(Error::contract(format!("bad projection entry ({col}, {sign})")));
                }
            }
        }
        Ok(Self {
            original_dim: rows.len(),
            projected_dim,
            seed,
            rows,
        })
    }

    /// `D = P` identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            original_dim: dim,
            projected_dim: dim,
            seed: 0,
            rows: (0..dim as u32).map(|j| vec![(j, 1)]).collect(),
        }
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn projected_dim(&self) -> usize {
        self.projected_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, j: usize) -> &[(u32, i8)] {
        &self.rows[j]
    }

    pub fn entry(&self, j: usize, col: usize) -> i8 {
        self.rows[j]
            .iter()
            .find(|(c, _)| *c as usize == col)
            .map_or(0, |&(_, s)| s)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `x R` for a binary `x`.
    pub fn apply_sparse<F: Scalar>(&self, x: &SparseBinaryVector, out: &mut [F]) {
        out.iter_mut().for_each(|o| *o = F::zero());
        for &j in x.on_indices() {
            for &(col, sign) in &self.rows[j as usize] {
                let o = &mut out[col as usize];
                if sign > 0 {
                    *o += F::one();
                } else {
                    *o -= F::one();
                }
            }
        }
    }

    /// `x R` for a real-valued `x` of length `D`.
    pub fn apply_dense<F: Scalar>(&self, x: &[F], out: &mut [F]) {
        out.iter_mut().for_each(|o| *o = F::zero());
        for (row, &xj) in self.rows.iter().zip(x) {
            if xj == F::zero() {
                continue;
            }
            for &(col, sign) in row {
                let o = &mut out[col as usize];
                if sign > 0 {
                    *o += xj;
                } else {
                    *o -= xj;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_probabilities() {
        assert_eq!(sign_probability(4), 0.25);
        assert!((sign_probability(50_000) - 0.002236).abs() < 1e-6);
    }

    #[test]
    fn empirical_fraction_small_d() {
        // D = 4: nonzero with probability 1/2 per entry.
        let r = ProjectionMatrix::new(4, 10_000, 5).unwrap();
        let frac = r.nnz() as f64 / 40_000.0;
        // 40,000 draws, 4 standard errors = 0.01.
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        let plus = r.rows.iter().flatten().filter(|(_, s)| *s == 1).count() as f64 / 40_000.0;
        assert!((plus - 0.25).abs() < 0.01, "{plus}");
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(
            ProjectionMatrix::new(50, 20, 1).unwrap(),
            ProjectionMatrix::new(50, 20, 1).unwrap()
        );
        assert_ne!(
            ProjectionMatrix::new(50, 20, 1).unwrap(),
            ProjectionMatrix::new(50, 20, 2).unwrap()
        );
        assert!(ProjectionMatrix::new(0, 3, 1).is_err());
    }

    #[test]
    fn sparse_and_dense_application_agree() {
        let r = ProjectionMatrix::new(30, 8, 3).unwrap();
        let x = SparseBinaryVector::new(30, vec![1, 4, 29]).unwrap();
        let dense: Vec<f64> = x.to_dense().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        r.apply_sparse(&x, &mut a);
        r.apply_dense(&dense, &mut b);
        assert_eq!(a, b);
        for col in 0..8 {
            let expect: i32 = [1, 4, 29].iter().map(|&j| r.entry(j, col) as i32).sum();
            assert_eq!(a[col], expect as f64);
        }
    }
}
