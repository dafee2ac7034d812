//! Universe embeddings and universe matchings.
//!
//! Each graph `i` gets an `n_i x d` matching `U_i` into a shared universe of
//! `d` slots. Stacking the blocks gives `U`, and all pairwise matchings
//! follow as `X_ij = U_i U_j^T`.

mod cycle;
mod fit;
mod hippi;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

pub use cycle::{cycle_violations, expand_matchings, PairwiseMatchings};
pub use fit::{fit_embeddings, FitConfig, FitOutcome};
pub use hippi::{hippi, HippiOutcome};

use crate::assignment::{discretize, is_universe_matching};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::{frobenius_inner, DenseMatrix};
use crate::sinkhorn::{sinkhorn, SinkhornParams};

/// Learnable `d x h` universe embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UniverseEmbedding {
    pub matrix: DenseMatrix,
}

impl UniverseEmbedding {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        matrix.ensure_finite("universe embedding")?;
        Ok(Self { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Writes the matrix fixture to `path` and a `<path>.meta` sidecar with
    /// one `key=value` line per entry of `meta` after `d` and `h`.
    pub fn save(&self, path: &Path, meta: &[(&str, String)]) -> Result<()> {
        self.matrix.write_fixture(path)?;
        let mut text = format!("d={}\nh={}\n", self.size(), self.feature_dim());
        for (k, v) in meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        let meta_path = meta_path(path);
        std::fs::write(&meta_path, text).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(DenseMatrix::read_fixture(path)?)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    name.into()
}

/// Every entry `1/d + 1e-3 z` with `z ~ N(0, 1)`.
pub fn init_universe<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> Result<UniverseEmbedding> {
    if d == 0 || h == 0 {
        return Err(Error::Parameter(format!(
            "universe needs d >= 1 and h >= 1, got d={d}, h={h}"
        )));
    }
    let base = 1.0 / d as f64;
    let matrix = DenseMatrix::from_fn(d, h, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        base + 1e-3 * z
    });
    Ok(UniverseEmbedding { matrix })
}

/// Universe size rule `d = round(100 (classes + 1) / step)`.
pub fn universe_size(classes: usize, step: usize) -> Result<usize> {
    if step == 0 {
        return Err(Error::Parameter("sampling step must be at least 1".into()));
    }
    Ok((100.0 * (classes as f64 + 1.0) / step as f64).round() as usize)
}

/// Relaxed matching of a graph's nodes into the universe: `sinkhorn(V U^T)`.
pub fn universe_match(
    features: &DenseMatrix,
    universe: &UniverseEmbedding,
    p: &SinkhornParams,
) -> Result<DenseMatrix> {
    let (n, h) = features.shape();
    let d = universe.size();
    if h != universe.feature_dim() {
        return Err(Error::Dimension(format!(
            "features have {h} columns, universe has {}",
            universe.feature_dim()
        )));
    }
    if n > d {
        return Err(Error::Dimension(format!(
            "graph with {n} nodes does not fit a universe of {d}"
        )));
    }
    Ok(sinkhorn(&features.matmul_t(&universe.matrix)?, p)?.matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMode {
    Relaxed,
    Binary,
}

/// Per-graph universe matchings `U_1, ..., U_m`, all with `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentStack {
    pub blocks: Vec<DenseMatrix>,
    pub mode: AssignmentMode,
}

impl AssignmentStack {
    pub fn new(blocks: Vec<DenseMatrix>, mode: AssignmentMode) -> Result<Self> {
        if let Some(first) = blocks.first() {
            let d = first.cols();
            if let Some(i) = blocks.iter().position(|b| b.cols() != d) {
                return Err(Error::Dimension(format!(
                    "block {i} has {} universe columns, expected {d}",
                    blocks[i].cols()
                )));
            }
        }
        for b in &blocks {
            b.ensure_finite("assignment block")?;
        }
        Ok(Self { blocks, mode })
    }

    pub fn relaxed(blocks: Vec<DenseMatrix>) -> Result<Self> {
        Self::new(blocks, AssignmentMode::Relaxed)
    }

    /// Binary stack; every block must be a universe matching.
    pub fn binary(blocks: Vec<DenseMatrix>) -> Result<Self> {
        if let Some(i) = blocks.iter().position(|b| !is_universe_matching(b)) {
            return Err(Error::Parameter(format!(
                "block {i} is not a partial permutation with unit rows"
            )));
        }
        Self::new(blocks, AssignmentMode::Binary)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn universe_size(&self) -> usize {
        self.blocks.first().map_or(0, DenseMatrix::cols)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(DenseMatrix::rows).collect()
    }

    /// The blocks stacked into one `sum n_i x d` matrix.
    pub fn stacked(&self) -> DenseMatrix {
        DenseMatrix::vstack(&self.blocks).expect("blocks share a column count")
    }

    pub fn from_stacked(u: &DenseMatrix, sizes: &[usize], mode: AssignmentMode) -> Self {
        let mut blocks = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            blocks.push(u.row_block(start, n));
            start += n;
        }
        Self { blocks, mode }
    }

    /// Rounds every block with [`discretize`].
    pub fn discretized(&self) -> Result<Self> {
        let blocks = self.blocks.iter().map(discretize).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            mode: AssignmentMode::Binary,
        })
    }

    /// Checks the relaxed invariants: entries in `[0, 1]`, rows summing to
    /// one and columns to at most one, all within `tol`.
    pub fn satisfies_relaxed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| {
            b.as_slice().iter().all(|&v| (-tol..=1.0 + tol).contains(&v))
                && b.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
                && b.col_sums().iter().all(|&s| s <= 1.0 + tol)
        })
    }
}

/// Class-aware coupling `W^T A W`, with `A = diag(A_1, ..., A_m)` and
/// `W_ab = 1` exactly when nodes `a` and `b` share a class.
///
/// `W = Y Y^T` for the stacked one-hot label matrix `Y`, so the product is
/// evaluated as `Y (Y^T A Y) Y^T`: entry `(a, b)` is the total adjacency
/// weight running from class `y_a` to class `y_b`, summed over all graphs.
pub fn class_coupling(graphs: &[Graph], classes: usize) -> Result<DenseMatrix> {
    let mut labels = Vec::new();
    for g in graphs {
        for &label in &g.labels {
            if label == 0 || label > classes {
                return Err(Error::Label {
                    node: labels.len(),
                    label,
                    classes,
                });
            }
            labels.push(label - 1);
        }
    }
    let mut class_sums = DenseMatrix::zeros(classes, classes);
    let mut offset = 0;
    for g in graphs {
        let n = g.node_count();
        for r in 0..n {
            for c in 0..n {
                class_sums[(labels[offset + r], labels[offset + c])] += g.adjacency[(r, c)];
            }
        }
        offset += n;
    }
    let total = labels.len();
    Ok(DenseMatrix::from_fn(total, total, |a, b| {
        class_sums[(labels[a], labels[b])]
    }))
}

/// `sum_{i,j} <U_i^T A_i U_i, U_j^T A_j U_j>`, evaluated pair by pair.
pub fn multimatch_objective(stack: &AssignmentStack, adjacencies: &[DenseMatrix]) -> Result<f64> {
    let reordered = reordered_adjacencies(stack, adjacencies)?;
    let mut total = 0.0;
    for si in &reordered {
        for sj in &reordered {
            total += frobenius_inner(si, sj)?;
        }
    }
    Ok(total)
}

/// `tr(U^T A U U^T A U)` on the stacked matching and block-diagonal
/// adjacency. Equals [`multimatch_objective`] when every `A_i` is symmetric.
pub fn multimatch_objective_stacked(
    stack: &AssignmentStack,
    adjacencies: &[DenseMatrix],
) -> Result<f64> {
    check_adjacencies(stack, adjacencies)?;
    let u = stack.stacked();
    let a = DenseMatrix::block_diag(adjacencies);
    let s = u.t_matmul(&a.matmul(&u)?)?;
    Ok(s.matmul(&s)?.trace())
}

fn check_adjacencies(stack: &AssignmentStack, adjacencies: &[DenseMatrix]) -> Result<()> {
    if stack.len() != adjacencies.len() {
        return Err(Error::Dimension(format!(
            "{} assignment blocks for {} adjacencies",
            stack.len(),
            adjacencies.len()
        )));
    }
    for (i, (u, a)) in stack.blocks.iter().zip(adjacencies).enumerate() {
        a.ensure_shape(u.rows(), u.rows(), &format!("adjacency {i}"))?;
    }
    Ok(())
}

fn reordered_adjacencies(stack: &AssignmentStack, adjacencies: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    check_adjacencies(stack, adjacencies)?;
    stack
        .blocks
        .iter()
        .zip(adjacencies)
        .map(|(u, a)| u.t_matmul(&a.matmul(u)?))
        .collect()
}

/// Loss `sum_i ||T_i - V_i U^T||_F^2 + alpha ||U||_F^2` and its gradient
/// with respect to the universe embedding.
pub fn embed_loss_grad(
    universe: &UniverseEmbedding,
    targets: &AssignmentStack,
    features: &[DenseMatrix],
    alpha: f64,
) -> Result<(f64, DenseMatrix)> {
    if targets.len() != features.len() {
        return Err(Error::Dimension(format!(
            "{} targets for {} feature matrices",
            targets.len(),
            features.len()
        )));
    }
    let u = &universe.matrix;
    let mut loss = alpha * u.frobenius_norm_sq();
    let mut grad = u.scale(2.0 * alpha);
    for (t, v) in targets.blocks.iter().zip(features) {
        let predicted = v.matmul_t(u)?;
        let residual = t.sub(&predicted)?;
        loss += residual.frobenius_norm_sq();
        grad.add_assign(&residual.t_matmul(v)?.scale(-2.0))?;
    }
    Ok((loss, grad))
}
