use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::{AssignmentMode, AssignmentStack};

/// Pairwise matchings `X_ij` for `m` graphs, indexed by ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatchings {
    m: usize,
    blocks: Vec<Option<DenseMatrix>>,
}

impl PairwiseMatchings {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            blocks: vec![None; m * m],
        }
    }

    pub fn graph_count(&self) -> usize {
        self.m
    }

    pub fn insert(&mut self, i: usize, j: usize, x: DenseMatrix) {
        self.blocks[i * self.m + j] = Some(x);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&DenseMatrix> {
        self.blocks.get(i * self.m + j).and_then(Option::as_ref)
    }

    fn require(&self, i: usize, j: usize) -> Result<&DenseMatrix> {
        self.get(i, j).ok_or(Error::IncompleteSet(i, j))
    }

    /// All stored `(i, j, X_ij)` in row-major pair order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &DenseMatrix)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(move |(k, b)| b.as_ref().map(|x| (k / self.m, k % self.m, x)))
    }
}

/// `X_ij = U_i U_j^T` for every ordered pair, including `i == j`.
pub fn expand_matchings(stack: &AssignmentStack) -> Result<PairwiseMatchings> {
    if stack.mode != AssignmentMode::Binary {
        return Err(Error::Mode { expected: "binary" });
    }
    let m = stack.len();
    let mut out = PairwiseMatchings::new(m);
    for i in 0..m {
        for j in 0..m {
            out.insert(i, j, stack.blocks[i].matmul_t(&stack.blocks[j])?);
        }
    }
    Ok(out)
}

/// Number of entries with `(X_ik X_kj)_ab > (X_ij)_ab`, over all triples of
/// distinct graphs. Zero means the set is cycle-consistent.
pub fn cycle_violations(x: &PairwiseMatchings) -> Result<usize> {
    let m = x.graph_count();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                x.require(i, j)?;
            }
        }
    }
    let mut count = 0;
    for i in 0..m {
        for k in 0..m {
            for j in 0..m {
                if i == k || k == j || i == j {
                    continue;
                }
                let through = x.require(i, k)?.matmul(x.require(k, j)?)?;
                let direct = x.require(i, j)?;
                if through.shape() != direct.shape() {
                    return Err(Error::Dimension(format!(
                        "X_{i}{k} X_{k}{j} and X_{i}{j} differ in shape"
                    )));
                }
                count += through
                    .as_slice()
                    .iter()
                    .zip(direct.as_slice())
                    .filter(|(t, d)| *t > *d)
                    .count();
            }
        }
    }
    Ok(count)
}
