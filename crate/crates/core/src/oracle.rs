//! Exhaustive reference solvers and evaluation metrics for small instances.

use crate::error::{Error, Result};
use crate::graph::GroundTruth;
use crate::matrix::DenseMatrix;
use crate::qap::{pair_kbqap_objective, AffinitySet};
use crate::universe::{expand_matchings, AssignmentStack, PairwiseMatchings};

/// Largest graph `brute_force_pair` will enumerate.
pub const PAIR_LIMIT: usize = 8;
/// Bounds for `brute_force_multi`: universe size, nodes per graph, graphs.
pub const MULTI_LIMITS: (usize, usize, usize) = (6, 4, 3);

/// Per-run evaluation numbers surfaced in reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Solver objective divided by the oracle objective.
    pub objective_ratio: f64,
    pub cycle_violations: usize,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.accuracy) && self.wall_time_s >= 0.0
    }
}

/// Every injective map `[n] -> [k]`, in lexicographic order of the image
/// tuple (so the identity-like map comes first).
pub fn injections(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                extend(prefix, used, n, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    if n <= k {
        extend(&mut Vec::with_capacity(n), &mut vec![false; k], n, &mut out);
    }
    out
}

fn one_hot(map: &[usize], cols: usize) -> DenseMatrix {
    let mut x = DenseMatrix::zeros(map.len(), cols);
    for (r, &c) in map.iter().enumerate() {
        x[(r, c)] = 1.0;
    }
    x
}

/// `a` after `b` in lexicographic order of the flattened entries.
fn lex_greater(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x > y;
        }
    }
    false
}

/// Exhaustive maximizer of the pair objective over full partial
/// permutations (`min(n_i, n_j)` matches). Ties go to the lexicographically
/// greatest flattened `X`, which is also the first one enumerated.
pub fn brute_force_pair(
    ai: &DenseMatrix,
    aj: &DenseMatrix,
    mij: &DenseMatrix,
    lambda: f64,
) -> Result<(DenseMatrix, f64)> {
    let (ni, nj) = mij.shape();
    if ni > PAIR_LIMIT || nj > PAIR_LIMIT {
        return Err(Error::OracleSize(format!(
            "pair oracle enumerates at most {PAIR_LIMIT} nodes per graph, got {ni} and {nj}"
        )));
    }
    let candidates: Vec<DenseMatrix> = if ni <= nj {
        injections(ni, nj).iter().map(|map| one_hot(map, nj)).collect()
    } else {
        injections(nj, ni).iter().map(|map| one_hot(map, ni).transpose()).collect()
    };
    let mut best: Option<(DenseMatrix, f64)> = None;
    for x in candidates {
        let value = pair_kbqap_objective(&x, ai, aj, mij, lambda)?;
        let better = match &best {
            None => true,
            Some((bx, bv)) => value > *bv || (value == *bv && lex_greater(x.as_slice(), bx.as_slice())),
        };
        if better {
            best = Some((x, value));
        }
    }
    best.ok_or_else(|| Error::OracleSize("empty pair".into()))
}

/// Exhaustive search over universe assignments: every graph picks an
/// injective slot map into `[d]`, the implied `X_ij = U_i U_j^T` are scored
/// with the pair objective over ordered pairs `i != j`. The first stack in
/// enumeration order wins ties.
pub fn brute_force_multi(
    adjacencies: &[DenseMatrix],
    affinities: &AffinitySet,
    lambda: f64,
    d: usize,
) -> Result<(AssignmentStack, f64)> {
    let m = adjacencies.len();
    let (max_d, max_n, max_m) = MULTI_LIMITS;
    let sizes: Vec<usize> = adjacencies.iter().map(DenseMatrix::rows).collect();
    if d > max_d || m > max_m || sizes.iter().any(|&n| n > max_n) {
        return Err(Error::OracleSize(format!(
            "multi oracle needs d <= {max_d}, n_i <= {max_n}, m <= {max_m}; got d={d}, sizes={sizes:?}"
        )));
    }
    if m == 0 || affinities.graph_count() != m {
        return Err(Error::Dimension(format!(
            "{m} adjacencies for {} affinity rows",
            affinities.graph_count()
        )));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n > d) {
        return Err(Error::Dimension(format!("graph of {n} nodes does not fit a universe of {d}")));
    }
    let maps: Vec<Vec<DenseMatrix>> = sizes
        .iter()
        .map(|&n| injections(n, d).iter().map(|map| one_hot(map, d)).collect())
        .collect();

    // tables[i][j][a * |maps_j| + b]: both ordered pairs between graphs i < j
    let mut tables = vec![vec![Vec::new(); m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let mut t = Vec::with_capacity(maps[i].len() * maps[j].len());
            for ui in &maps[i] {
                for uj in &maps[j] {
                    let x = ui.matmul_t(uj)?;
                    let forward = pair_kbqap_objective(&x, &adjacencies[i], &adjacencies[j], affinities.get(i, j), lambda)?;
                    let backward = pair_kbqap_objective(
                        &x.transpose(),
                        &adjacencies[j],
                        &adjacencies[i],
                        affinities.get(j, i),
                        lambda,
                    )?;
                    t.push(forward + backward);
                }
            }
            tables[i][j] = t;
        }
    }

    let counts: Vec<usize> = maps.iter().map(Vec::len).collect();
    let mut choice = vec![0usize; m];
    let mut best_choice = choice.clone();
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut value = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                value += tables[i][j][choice[i] * counts[j] + choice[j]];
            }
        }
        if value > best {
            best = value;
            best_choice.clone_from(&choice);
        }
        // odometer, last graph fastest
        let mut g = m;
        loop {
            if g == 0 {
                let blocks = best_choice.iter().zip(&maps).map(|(&c, ms)| ms[c].clone()).collect();
                return Ok((AssignmentStack::binary(blocks)?, best));
            }
            g -= 1;
            choice[g] += 1;
            if choice[g] < counts[g] {
                break;
            }
            choice[g] = 0;
        }
    }
}

/// Fraction of ground-truth correspondences (same prototype, ordered pairs
/// of distinct graphs) reproduced by `pred`. Outlier nodes are not counted;
/// an instance without any correspondence scores 1.
pub fn matching_accuracy(pred: &PairwiseMatchings, gt: Option<&GroundTruth>) -> Result<f64> {
    let gt = gt.ok_or(Error::MissingGroundTruth)?;
    let m = gt.len();
    if pred.graph_count() != m {
        return Err(Error::Dimension(format!(
            "{} predicted graphs for {m} ground-truth graphs",
            pred.graph_count()
        )));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let x = pred.get(i, j).ok_or(Error::IncompleteSet(i, j))?;
            x.ensure_shape(gt[i].len(), gt[j].len(), &format!("X_{i}{j}"))?;
            for (a, sa) in gt[i].iter().enumerate() {
                let Some(sa) = sa else { continue };
                for (b, sb) in gt[j].iter().enumerate() {
                    if sb.as_ref() == Some(sa) {
                        total += 1;
                        if x[(a, b)] > 0.5 {
                            hit += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// [`matching_accuracy`] of the matchings expanded from a binary stack.
pub fn stack_accuracy(stack: &AssignmentStack, gt: Option<&GroundTruth>) -> Result<f64> {
    matching_accuracy(&expand_matchings(stack)?, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::discretize;
    use crate::qap::multimatch_kbqap;
    use crate::sinkhorn::{sinkhorn, SinkhornParams};
    use crate::universe::cycle_violations;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
    }

    fn full_set(sizes: &[usize], rng: &mut ChaCha8Rng) -> AffinitySet {
        let blocks = sizes
            .iter()
            .flat_map(|&a| sizes.iter().map(move |&b| (a, b)))
            .map(|(a, b)| random(a, b, rng))
            .collect();
        AffinitySet::from_blocks(sizes.len(), blocks).unwrap()
    }

    #[test]
    fn injection_counts_and_order() {
        assert_eq!(injections(3, 5).len(), 60);
        assert_eq!(injections(4, 6).len(), 360);
        assert_eq!(injections(2, 3)[0], vec![0, 1]);
        assert!(injections(3, 2).is_empty());
    }

    #[test]
    fn dominant_diagonal_gives_identity() {
        let m = DenseMatrix::from_fn(4, 4, |r, c| if r == c { 10.0 } else { 0.0 });
        let z = DenseMatrix::zeros(4, 4);
        let (x, v) = brute_force_pair(&z, &z, &m, 0.0).unwrap();
        assert_eq!(x, DenseMatrix::identity(4));
        assert_eq!(v, 40.0);
    }

    #[test]
    fn two_node_swap() {
        let m = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let z = DenseMatrix::zeros(2, 2);
        let (x, v) = brute_force_pair(&z, &z, &m, 0.0).unwrap();
        assert_eq!(x, m);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn pair_ties_take_first_enumeration() {
        let z = DenseMatrix::zeros(3, 3);
        let (x, v) = brute_force_pair(&z, &z, &z, 1.0).unwrap();
        assert_eq!(x, DenseMatrix::identity(3));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pair_rejects_large_graphs() {
        let z = DenseMatrix::zeros(9, 9);
        assert!(matches!(brute_force_pair(&z, &z, &z, 1.0), Err(Error::OracleSize(_))));
    }

    #[test]
    fn agrees_with_rounded_sinkhorn_on_dominant_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let perm = injections(5, 5)[rng.random_range(0..120)].clone();
            let m = DenseMatrix::from_fn(5, 5, |r, c| if perm[r] == c { 2.0 } else { 0.0 } + rng.random_range(0.0..0.5));
            let z = DenseMatrix::zeros(5, 5);
            let (x, _) = brute_force_pair(&z, &z, &m, 0.0).unwrap();
            let s = sinkhorn(&m, &SinkhornParams { tau: 0.01, ..Default::default() }).unwrap().matrix;
            assert_eq!(discretize(&s).unwrap(), x);
        }
    }

    #[test]
    fn pair_beats_sampled_feasible_matchings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ni, nj) in [(3, 5), (5, 3), (4, 4)] {
            let ai = random(ni, ni, &mut rng);
            let aj = random(nj, nj, &mut rng);
            let m = random(ni, nj, &mut rng);
            let (_, best) = brute_force_pair(&ai, &aj, &m, 1.0).unwrap();
            for _ in 0..100 {
                // random partial permutation, possibly with fewer matches
                let mut cols: Vec<usize> = (0..nj).collect();
                for k in (1..nj).rev() {
                    cols.swap(k, rng.random_range(0..=k));
                }
                let x = DenseMatrix::from_fn(ni, nj, |r, c| {
                    if r < nj && cols[r] == c && rng.random_bool(0.8) { 1.0 } else { 0.0 }
                });
                assert!(pair_kbqap_objective(&x, &ai, &aj, &m, 1.0).unwrap() <= best + 1e-12);
            }
        }
    }

    #[test]
    fn unequal_sizes_choose_subsets() {
        // the best column subset is {1, 3}
        let m = DenseMatrix::from_rows(&[[0.0, 5.0, 0.0, 1.0], [0.0, 1.0, 0.0, 5.0]]).unwrap();
        let (x, v) = brute_force_pair(&DenseMatrix::zeros(2, 2), &DenseMatrix::zeros(4, 4), &m, 0.0).unwrap();
        assert_eq!(v, 10.0);
        assert_eq!(x[(0, 1)] + x[(1, 3)], 2.0);
    }

    #[test]
    fn multi_with_two_graphs_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let adj = vec![random(3, 3, &mut rng), random(3, 3, &mut rng)];
            let mut set = full_set(&[3, 3], &mut rng);
            // make the reverse affinity the transpose so one pair term covers both directions
            let m01 = set.get(0, 1).clone();
            set = AffinitySet::from_blocks(2, vec![set.get(0, 0).clone(), m01.clone(), m01.transpose(), set.get(1, 1).clone()]).unwrap();
            let (stack, multi) = brute_force_multi(&adj, &set, 1.0, 5).unwrap();
            let (_, pair_fwd) = brute_force_pair(&adj[0], &adj[1], &m01, 1.0).unwrap();
            // the reverse term tr(X A_j X^T A_i) equals the forward quadratic term
            // only for symmetric adjacency, so compare against a direct evaluation
            let direct = multimatch_kbqap(&stack, &adj, &set, 1.0).unwrap();
            assert!((direct - multi).abs() < 1e-9);
            let sym: Vec<_> = adj.iter().map(|a| a.add(&a.transpose()).unwrap()).collect();
            let (_, multi_sym) = brute_force_multi(&sym, &set, 1.0, 5).unwrap();
            let (_, pair_sym) = brute_force_pair(&sym[0], &sym[1], &m01, 1.0).unwrap();
            assert!((multi_sym - 2.0 * pair_sym).abs() < 1e-9, "{multi_sym} vs {pair_sym}");
            assert!(pair_fwd.is_finite());
        }
    }

    #[test]
    fn multi_output_is_consistent_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = vec![random(3, 3, &mut rng), random(2, 2, &mut rng), random(3, 3, &mut rng)];
        let set = full_set(&[3, 2, 3], &mut rng);
        let (a, va) = brute_force_multi(&adj, &set, 1.0, 4).unwrap();
        let (b, vb) = brute_force_multi(&adj, &set, 1.0, 4).unwrap();
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(va, vb);
        assert_eq!(cycle_violations(&expand_matchings(&a).unwrap()).unwrap(), 0);
    }

    #[test]
    fn multi_zero_inputs_return_first_enumeration() {
        let adj = vec![DenseMatrix::zeros(2, 2); 3];
        let set = AffinitySet::from_blocks(3, vec![DenseMatrix::zeros(2, 2); 9]).unwrap();
        let (stack, v) = brute_force_multi(&adj, &set, 1.0, 3).unwrap();
        assert_eq!(v, 0.0);
        for b in &stack.blocks {
            assert_eq!(b, &DenseMatrix::eye(2, 3));
        }
    }

    #[test]
    fn multi_identical_graphs_recover_ground_truth() {
        let feats = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let perm = [2, 0, 1];
        let permuted = DenseMatrix::from_fn(3, 3, |r, c| feats[(perm[r], c)]);
        let vs = [feats.clone(), permuted, feats];
        let blocks = vs.iter().flat_map(|a| vs.iter().map(move |b| a.matmul_t(b).unwrap())).collect();
        let set = AffinitySet::from_blocks(3, blocks).unwrap();
        let adj = vec![DenseMatrix::zeros(3, 3); 3];
        let (stack, _) = brute_force_multi(&adj, &set, 0.0, 4).unwrap();
        let gt: GroundTruth = vec![vec![Some(0), Some(1), Some(2)], perm.iter().map(|&p| Some(p)).collect(), vec![Some(0), Some(1), Some(2)]];
        assert_eq!(stack_accuracy(&stack, Some(&gt)).unwrap(), 1.0);
    }

    #[test]
    fn multi_rejects_oversized_problems() {
        let adj = vec![DenseMatrix::zeros(5, 5); 2];
        let set = AffinitySet::from_blocks(2, vec![DenseMatrix::zeros(5, 5); 4]).unwrap();
        assert!(matches!(brute_force_multi(&adj, &set, 1.0, 6), Err(Error::OracleSize(_))));
        let adj = vec![DenseMatrix::zeros(2, 2); 2];
        let set = AffinitySet::from_blocks(2, vec![DenseMatrix::zeros(2, 2); 4]).unwrap();
        assert!(matches!(brute_force_multi(&adj, &set, 1.0, 7), Err(Error::OracleSize(_))));
    }

    fn identity_matchings(n: usize, m: usize) -> PairwiseMatchings {
        let stack = AssignmentStack::binary(vec![DenseMatrix::identity(n); m]).unwrap();
        expand_matchings(&stack).unwrap()
    }

    #[test]
    fn accuracy_extremes() {
        let gt: GroundTruth = vec![vec![Some(0), Some(1), None]; 3];
        assert_eq!(matching_accuracy(&identity_matchings(3, 3), Some(&gt)).unwrap(), 1.0);
        let mut zero = PairwiseMatchings::new(3);
        for i in 0..3 {
            for j in 0..3 {
                zero.insert(i, j, DenseMatrix::zeros(3, 3));
            }
        }
        assert_eq!(matching_accuracy(&zero, Some(&gt)).unwrap(), 0.0);
        assert!(matches!(matching_accuracy(&zero, None), Err(Error::MissingGroundTruth)));
    }

    #[test]
    fn accuracy_half_correct() {
        // four nodes per graph; X_01 gets nodes 0,1 right and swaps 2,3
        let gt: GroundTruth = vec![(0..4).map(Some).collect(); 2];
        let mut x = PairwiseMatchings::new(2);
        let half = DenseMatrix::from_rows(&[
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        x.insert(0, 1, half.clone());
        x.insert(1, 0, half.transpose());
        assert_eq!(matching_accuracy(&x, Some(&gt)).unwrap(), 0.5);
    }

    #[test]
    fn report_validity() {
        let ok = EvalReport { accuracy: 0.5, objective_ratio: 1.0, cycle_violations: 0, wall_time_s: 0.0 };
        assert!(ok.is_valid());
        assert!(!EvalReport { accuracy: 1.5, ..ok }.is_valid());
    }
}
