//! Rounding relaxed assignments to partial permutation matrices.

use crate::error::Result;
use crate::matrix::DenseMatrix;

/// Rounds a relaxed assignment to the binary partial permutation that
/// maximizes `sum_ab S_ab X_ab`. Every row is assigned when `rows <= cols`,
/// every column otherwise.
pub fn discretize(s: &DenseMatrix) -> Result<DenseMatrix> {
    s.ensure_finite("relaxed assignment")?;
    let (n, k) = s.shape();
    let mut out = DenseMatrix::zeros(n, k);
    if n == 0 || k == 0 {
        return Ok(out);
    }
    if n <= k {
        for (r, c) in max_weight_assignment(s).into_iter().enumerate() {
            out[(r, c)] = 1.0;
        }
    } else {
        for (c, r) in max_weight_assignment(&s.transpose()).into_iter().enumerate() {
            out[(r, c)] = 1.0;
        }
    }
    Ok(out)
}

/// Column chosen for each row of a `rows <= cols` weight matrix, maximizing
/// the total weight (Hungarian method with potentials, O(rows^2 cols)).
pub fn max_weight_assignment(w: &DenseMatrix) -> Vec<usize> {
    let (n, m) = w.shape();
    assert!(n <= m, "max_weight_assignment needs rows <= cols");
    // 1-based shortest augmenting path formulation on cost = -weight
    let cost = |i: usize, j: usize| -w[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Membership in the set of partial permutation matrices: binary entries,
/// row and column sums at most one.
pub fn is_partial_permutation(x: &DenseMatrix) -> bool {
    x.as_slice().iter().all(|&v| v == 0.0 || v == 1.0)
        && x.row_sums().iter().all(|&s| s <= 1.0)
        && x.col_sums().iter().all(|&s| s <= 1.0)
}

/// Partial permutation with every row assigned (a universe matching).
pub fn is_universe_matching(x: &DenseMatrix) -> bool {
    is_partial_permutation(x) && x.row_sums().iter().all(|&s| s == 1.0)
}

/// Column index of the single one in each row, `None` for empty rows.
pub fn row_assignment(x: &DenseMatrix) -> Vec<Option<usize>> {
    (0..x.rows())
        .map(|r| x.row(r).iter().position(|&v| v > 0.5))
        .collect()
}
