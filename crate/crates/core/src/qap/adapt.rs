use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, AdjacencyParams, Graph};
use crate::matrix::DenseMatrix;
use crate::sinkhorn::{sinkhorn, SinkhornParams};
use crate::universe::{AssignmentStack, UniverseEmbedding};

use super::{solve_multimatch, AffinityParams, AffinitySet, SolverParams};

/// Square map applied to every node-feature matrix, `V_i <- V_i P`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub p: DenseMatrix,
}

impl Adapter {
    pub fn identity(h: usize) -> Self {
        Self { p: DenseMatrix::identity(h) }
    }

    pub fn new(p: DenseMatrix) -> Result<Self> {
        p.ensure_shape(p.rows(), p.rows(), "adapter")?;
        p.ensure_finite("adapter")?;
        Ok(Self { p })
    }
}

/// Graphs with adapted features and adjacency rebuilt from them
/// (identity projections, no edge dropping).
pub fn apply_adapter(graphs: &[Graph], adapter: &Adapter) -> Result<Vec<Graph>> {
    let h = adapter.p.rows();
    let params = AdjacencyParams { drop_rate: 0.0, ..AdjacencyParams::identity(h) };
    // inference-mode adjacency never draws from the generator
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    graphs
        .iter()
        .map(|g| {
            let features = g.features.matmul(&adapter.p)?;
            let adjacency = build_adjacency(&features, &params, &mut unused)?;
            Graph::new(features, adjacency, g.labels.clone())
        })
        .collect()
}

/// `sinkhorn(M, tau)`, balanced along the transpose when `M` is tall.
pub fn normalized_affinity(m: &DenseMatrix, p: &SinkhornParams) -> Result<DenseMatrix> {
    if m.rows() <= m.cols() {
        Ok(sinkhorn(m, p)?.matrix)
    } else {
        Ok(sinkhorn(&m.transpose(), p)?.matrix.transpose())
    }
}

/// Focal cross-entropy between normalized affinities and the factored
/// matchings `U_i U_j^T`, summed over ordered pairs `i != j`.
pub fn matching_loss(stack: &AssignmentStack, affinities: &AffinitySet, p: &SolverParams) -> Result<f64> {
    p.validate()?;
    let m = stack.len();
    if affinities.graph_count() != m {
        return Err(Error::Dimension(format!(
            "{m} blocks for {} affinity rows",
            affinities.graph_count()
        )));
    }
    let (lo, hi) = (p.clamp_eps, 1.0 - p.clamp_eps);
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let x = stack.blocks[i].matmul_t(&stack.blocks[j])?;
            let target = normalized_affinity(affinities.get(i, j), &p.sinkhorn)?;
            for (&xv, &mv) in x.as_slice().iter().zip(target.as_slice()) {
                let pv = xv.clamp(lo, hi);
                // rounding can leave Sinkhorn entries a hair outside [0, 1]
                let mv = mv.clamp(0.0, 1.0);
                total -= mv.powf(p.gamma) * (1.0 - pv) * pv.ln();
                total -= (1.0 - mv).powf(p.gamma) * pv * (1.0 - pv).ln();
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("matching loss".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub adapter: Adapter,
    /// Loss before each step, then the loss of the returned adapter.
    pub losses: Vec<f64>,
}

fn pipeline_loss(
    graphs: &[Graph],
    universe: &UniverseEmbedding,
    adapter: &Adapter,
    aff: &AffinityParams,
    p: &SolverParams,
) -> Result<f64> {
    let adapted = apply_adapter(graphs, adapter)?;
    let out = solve_multimatch(&adapted, universe, aff, p)?;
    matching_loss(&out.stack, &out.affinities, p)
}

fn probe(
    graphs: &[Graph],
    universe: &UniverseEmbedding,
    adapter: &Adapter,
    aff: &AffinityParams,
    p: &SolverParams,
    k: usize,
) -> Result<f64> {
    let value = adapter.p.as_slice()[k];
    let step = 1e-4 * value.abs().max(1.0);
    let mut shifted = adapter.clone();
    shifted.p.as_mut_slice()[k] = value + step;
    let up = pipeline_loss(graphs, universe, &shifted, aff, p)?;
    shifted.p.as_mut_slice()[k] = value - step;
    let down = pipeline_loss(graphs, universe, &shifted, aff, p)?;
    Ok((up - down) / (2.0 * step))
}

fn numeric_gradient(
    graphs: &[Graph],
    universe: &UniverseEmbedding,
    adapter: &Adapter,
    aff: &AffinityParams,
    p: &SolverParams,
) -> Result<Vec<f64>> {
    let count = adapter.p.as_slice().len();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|k| probe(graphs, universe, adapter, aff, p, k))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(|k| probe(graphs, universe, adapter, aff, p, k)).collect()
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) | Error::Numeric { .. } => Error::Numeric { stage: "adapt", iteration: step },
        other => other,
    }
}

/// Gradient descent on the adapter, with the matching loss differentiated
/// through the whole solve by central differences.
pub fn adapt(
    graphs: &[Graph],
    universe: &UniverseEmbedding,
    adapter: &Adapter,
    aff: &AffinityParams,
    p: &SolverParams,
    lr: f64,
    steps: usize,
) -> Result<AdaptOutcome> {
    if adapter.p.rows() != universe.feature_dim() {
        return Err(Error::Dimension(format!(
            "adapter of size {} for features of width {}",
            adapter.p.rows(),
            universe.feature_dim()
        )));
    }
    let mut current = adapter.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        losses.push(pipeline_loss(graphs, universe, &current, aff, p).map_err(|e| at_step(e, step))?);
        if lr == 0.0 {
            continue;
        }
        let grad = numeric_gradient(graphs, universe, &current, aff, p).map_err(|e| at_step(e, step))?;
        for (w, g) in current.p.as_mut_slice().iter_mut().zip(grad) {
            *w -= lr * g;
        }
        if !current.p.is_finite() {
            return Err(at_step(Error::NonFinite("adapter".into()), step));
        }
    }
    losses.push(pipeline_loss(graphs, universe, &current, aff, p).map_err(|e| at_step(e, steps))?);
    Ok(AdaptOutcome { adapter: current, losses })
}
