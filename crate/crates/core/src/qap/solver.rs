use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;
use crate::sinkhorn::{sinkhorn_warm, Potentials};
use crate::universe::{universe_match, AssignmentStack, UniverseEmbedding};

use super::{AffinityParams, AffinitySet, SolverParams};

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub stack: AssignmentStack,
    /// Relaxed universe matchings before the first Taylor step.
    pub initial: AssignmentStack,
    pub affinities: AffinitySet,
    pub iterations: usize,
    pub converged: bool,
}

/// `V_i = sum_j (lambda A_i U_i U_j^T A_j U_j + M_ij U_j)`, the gradient of
/// the summed pair objective with respect to `U_i`.
pub fn taylor_gradient(
    i: usize,
    stack: &AssignmentStack,
    adjacencies: &[DenseMatrix],
    affinities: &AffinitySet,
    p: &SolverParams,
) -> Result<DenseMatrix> {
    let m = stack.len();
    if i >= m || adjacencies.len() != m || affinities.graph_count() != m {
        return Err(Error::Dimension(format!(
            "graph {i} of {m} blocks, {} adjacencies, {} affinity rows",
            adjacencies.len(),
            affinities.graph_count()
        )));
    }
    let ui = &stack.blocks[i];
    let (ni, d) = ui.shape();
    let mut coupled = DenseMatrix::zeros(d, d);
    let mut linear = DenseMatrix::zeros(ni, d);
    for j in 0..m {
        if j == i && !p.include_self {
            continue;
        }
        let uj = &stack.blocks[j];
        let nj = uj.rows();
        adjacencies[j].ensure_shape(nj, nj, &format!("A_{j} (pair {i},{j})"))?;
        let mij = affinities.get(i, j);
        mij.ensure_shape(ni, nj, &format!("M_{i}{j}"))?;
        if p.lambda != 0.0 {
            coupled.add_assign(&uj.t_matmul(&adjacencies[j].matmul(uj)?)?)?;
        }
        linear.add_assign(&mij.matmul(uj)?)?;
    }
    if p.lambda == 0.0 {
        return Ok(linear);
    }
    adjacencies[i].ensure_shape(ni, ni, &format!("A_{i}"))?;
    let quad = adjacencies[i].matmul(ui)?.matmul(&coupled)?.scale(p.lambda);
    quad.add(&linear)
}

/// Jacobi Taylor iterations from a relaxed initialization: every block's
/// gradient is taken at the same iterate, added to its running sum (or
/// used alone when `running_sum` is off) and projected with Sinkhorn.
pub fn taylor_iterations(
    init: AssignmentStack,
    adjacencies: &[DenseMatrix],
    affinities: &AffinitySet,
    p: &SolverParams,
) -> Result<(AssignmentStack, usize, bool)> {
    p.validate()?;
    let mut stack = init;
    let mut sums: Vec<DenseMatrix> = stack
        .blocks
        .iter()
        .map(|u| DenseMatrix::zeros(u.rows(), u.cols()))
        .collect();
    let mut warm: Vec<Option<Potentials>> = vec![None; stack.len()];
    for iteration in 1..=p.max_iters {
        let grads = (0..stack.len())
            .map(|i| taylor_gradient(i, &stack, adjacencies, affinities, p))
            .collect::<Result<Vec<_>>>()?;
        let mut change: f64 = 0.0;
        let mut next = Vec::with_capacity(stack.len());
        for (((sum, grad), old), warm) in sums.iter_mut().zip(grads).zip(&stack.blocks).zip(&mut warm) {
            let before = sum.max_abs();
            if p.running_sum {
                sum.add_assign(&grad)?;
            } else {
                *sum = grad;
            }
            if !sum.is_finite() {
                return Err(Error::Numeric {
                    stage: "solve_multimatch",
                    iteration,
                });
            }
            if let Some(w) = warm.as_mut() {
                let ratio = sum.max_abs() / before;
                if ratio.is_finite() && ratio > 0.0 {
                    w.rows.iter_mut().chain(w.cols.iter_mut()).for_each(|v| *v *= ratio);
                }
            }
            let u = sinkhorn_warm(sum, &p.sinkhorn, warm.as_ref()).map_err(|_| Error::Numeric {
                stage: "solve_multimatch",
                iteration,
            })?;
            *warm = Some(u.potentials);
            change = change.max(u.matrix.sub(old)?.frobenius_norm());
            next.push(u.matrix);
        }
        stack = AssignmentStack::relaxed(next)?;
        if change < p.tol {
            return Ok((stack, iteration, true));
        }
    }
    Ok((stack, p.max_iters, false))
}

/// Universe matching against the frozen embedding followed by Taylor
/// iterations on the learned affinities.
pub fn solve_multimatch(
    graphs: &[Graph],
    universe: &UniverseEmbedding,
    aff: &AffinityParams,
    p: &SolverParams,
) -> Result<SolveOutcome> {
    p.validate()?;
    let features: Vec<DenseMatrix> = graphs.iter().map(|g| g.features.clone()).collect();
    let adjacencies: Vec<DenseMatrix> = graphs.iter().map(|g| g.adjacency.clone()).collect();
    let affinities = AffinitySet::compute(&features, aff)?;
    let blocks = features
        .iter()
        .map(|v| universe_match(v, universe, &p.sinkhorn))
        .collect::<Result<Vec<_>>>()?;
    let initial = AssignmentStack::relaxed(blocks)?;
    let (stack, iterations, converged) =
        taylor_iterations(initial.clone(), &adjacencies, &affinities, p)?;
    Ok(SolveOutcome {
        stack,
        initial,
        affinities,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qap::{pair_kbqap_objective, AffinityParams};
    use crate::sinkhorn::SinkhornParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn symmetric(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let a = random(n, n, rng);
        a.add(&a.transpose()).unwrap()
    }

    /// Affinities with `M_ji = M_ij^T`, the setting in which the Taylor
    /// gradient is the exact gradient of the summed objective.
    fn transposed_affinities(sizes: &[usize], rng: &mut ChaCha8Rng) -> AffinitySet {
        let m = sizes.len();
        let mut blocks = vec![DenseMatrix::zeros(0, 0); m * m];
        for i in 0..m {
            for j in i..m {
                let b = if i == j { symmetric(sizes[i], rng) } else { random(sizes[i], sizes[j], rng) };
                blocks[j * m + i] = b.transpose();
                blocks[i * m + j] = b;
            }
        }
        AffinitySet::from_blocks(m, blocks).unwrap()
    }

    /// `1/2 sum_{i,j} [lambda/2 tr(X^T A_i X A_j) + tr(X^T M_ij)]`, `X = U_i U_j^T`.
    fn objective(blocks: &[DenseMatrix], adj: &[DenseMatrix], aff: &AffinitySet, p: &SolverParams) -> f64 {
        let mut total = 0.0;
        for i in 0..blocks.len() {
            for j in 0..blocks.len() {
                if i == j && !p.include_self {
                    continue;
                }
                let x = blocks[i].matmul_t(&blocks[j]).unwrap();
                let quad = pair_kbqap_objective(&x, &adj[i], &adj[j], &DenseMatrix::zeros(x.rows(), x.cols()), 1.0).unwrap();
                let lin = pair_kbqap_objective(&x, &adj[i], &adj[j], aff.get(i, j), 0.0).unwrap();
                total += 0.5 * (0.5 * p.lambda * quad + lin);
            }
        }
        total
    }

    fn max_rel_error(seed: u64, sizes: &[usize], d: usize, p: &SolverParams) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<_> = sizes.iter().map(|&n| random(n, d, &mut rng)).collect();
        let adj: Vec<_> = sizes.iter().map(|&n| symmetric(n, &mut rng)).collect();
        let aff = transposed_affinities(sizes, &mut rng);
        let stack = AssignmentStack::relaxed(blocks.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..sizes.len() {
            let g = taylor_gradient(i, &stack, &adj, &aff, p).unwrap();
            for r in 0..sizes[i] {
                for c in 0..d {
                    let step = 1e-5;
                    let mut plus = blocks.clone();
                    plus[i].as_mut_slice()[r * d + c] += step;
                    let mut minus = blocks.clone();
                    minus[i].as_mut_slice()[r * d + c] -= step;
                    let fd = (objective(&plus, &adj, &aff, p) - objective(&minus, &adj, &aff, p)) / (2.0 * step);
                    let err = (g[(r, c)] - fd).abs() / fd.abs().max(1.0);
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = SolverParams::default();
        assert!(max_rel_error(1, &[3, 3], 4, &p) < 1e-4);
        assert!(max_rel_error(2, &[2, 4, 3], 5, &p) < 1e-4);
        let no_self = SolverParams { include_self: false, lambda: 0.7, ..p };
        assert!(max_rel_error(3, &[3, 2, 4], 4, &no_self) < 1e-4);
    }

    #[test]
    fn zero_inputs_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = AssignmentStack::relaxed(vec![random(3, 4, &mut rng), random(2, 4, &mut rng)]).unwrap();
        let adj = vec![DenseMatrix::zeros(3, 3), DenseMatrix::zeros(2, 2)];
        let blocks = [(3, 3), (3, 2), (2, 3), (2, 2)].map(|(r, c)| DenseMatrix::zeros(r, c)).to_vec();
        let aff = AffinitySet::from_blocks(2, blocks).unwrap();
        let g = taylor_gradient(0, &stack, &adj, &aff, &SolverParams::default()).unwrap();
        assert_eq!(g, DenseMatrix::zeros(3, 4));
    }

    #[test]
    fn lambda_zero_is_linear_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sizes = [3, 2];
        let blocks: Vec<_> = sizes.iter().map(|&n| random(n, 4, &mut rng)).collect();
        let adj: Vec<_> = sizes.iter().map(|&n| symmetric(n, &mut rng)).collect();
        let aff = transposed_affinities(&sizes, &mut rng);
        let stack = AssignmentStack::relaxed(blocks.clone()).unwrap();
        let p = SolverParams { lambda: 0.0, ..Default::default() };
        let g = taylor_gradient(0, &stack, &adj, &aff, &p).unwrap();
        let expect = aff.get(0, 0).matmul(&blocks[0]).unwrap().add(&aff.get(0, 1).matmul(&blocks[1]).unwrap()).unwrap();
        assert!(g.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = AssignmentStack::relaxed(vec![random(3, 4, &mut rng), random(2, 4, &mut rng)]).unwrap();
        let adj = vec![DenseMatrix::zeros(3, 3), DenseMatrix::zeros(3, 3)];
        let aff = transposed_affinities(&[3, 2], &mut rng);
        let err = taylor_gradient(0, &stack, &adj, &aff, &SolverParams::default()).unwrap_err();
        assert!(err.to_string().contains("pair 0,1"), "{err}");
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = crate::graph::SyntheticSpec { m: 3, n: 4, h: 5, noise_sigma: 0.1, outliers: 0, classes: 2 };
        let inst = crate::graph::make_synthetic(&spec, &mut rng).unwrap();
        let u = crate::universe::init_universe(6, 5, &mut rng).unwrap();
        let p = SolverParams { max_iters: 0, ..Default::default() };
        let out = solve_multimatch(&inst.graphs, &u, &AffinityParams::rectifier(5), &p).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(!out.converged);
        for (b, v) in out.stack.blocks.iter().zip(&inst.graphs) {
            assert_eq!(b, &universe_match(&v.features, &u, &p.sinkhorn).unwrap());
        }
    }

    #[test]
    fn outputs_stay_relaxed_and_consistent() {
        use crate::universe::{cycle_violations, expand_matchings};
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = crate::graph::SyntheticSpec { m: 3, n: 4, h: 6, noise_sigma: 0.3, outliers: 1, classes: 2 };
            let inst = crate::graph::make_synthetic(&spec, &mut rng).unwrap();
            let u = crate::universe::init_universe(7, 6, &mut rng).unwrap();
            let out = solve_multimatch(&inst.graphs, &u, &AffinityParams::rectifier(6), &SolverParams { sinkhorn: SinkhornParams { max_iters: 200, ..Default::default() }, ..Default::default() }).unwrap();
            assert!(out.stack.satisfies_relaxed(1e-5), "seed {seed} {:?} {:?}", out.stack.blocks[0].row_sums(), out.stack.blocks.iter().map(|b| b.col_sums()).collect::<Vec<_>>());
            let x = expand_matchings(&out.stack.discretized().unwrap()).unwrap();
            assert_eq!(cycle_violations(&x).unwrap(), 0);
        }
    }

    #[test]
    fn blow_up_is_reported_with_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = AssignmentStack::relaxed(vec![random(2, 3, &mut rng).map(f64::abs), random(2, 3, &mut rng).map(f64::abs)]).unwrap();
        let adj = vec![DenseMatrix::filled(2, 2, 1e300), DenseMatrix::filled(2, 2, 1e300)];
        let aff = transposed_affinities(&[2, 2], &mut rng);
        let err = taylor_iterations(stack, &adj, &aff, &SolverParams::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { stage: "solve_multimatch", iteration: 1 }), "{err:?}");
    }
}
