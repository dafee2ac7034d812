use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::sinkhorn::{sinkhorn, SinkhornParams};

use super::{AssignmentMode, AssignmentStack};

#[derive(Debug, Clone)]
pub struct HippiOutcome {
    pub stack: AssignmentStack,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the coupling matrix was not symmetric; iteration still ran.
    pub asymmetric: bool,
}

/// Higher-order projected power iteration.
///
/// Repeats `V = W U U^T W U` and projects each graph's block of `V` with
/// Sinkhorn until every block moves less than `theta` in Frobenius norm,
/// or `max_iters` is reached.
pub fn hippi(
    coupling: &DenseMatrix,
    init: &AssignmentStack,
    theta: f64,
    max_iters: usize,
    p: &SinkhornParams,
) -> Result<HippiOutcome> {
    let n: usize = init.sizes().iter().sum();
    coupling.ensure_shape(n, n, "coupling matrix")?;
    coupling.ensure_finite("coupling matrix")?;
    let asymmetric = !coupling.is_symmetric(1e-12 * coupling.max_abs().max(1.0));
    let sizes = init.sizes();

    let mut current = init.clone();
    current.mode = AssignmentMode::Relaxed;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let u = current.stacked();
        let wu = coupling.matmul(&u)?;
        let gram = u.t_matmul(&wu)?;
        let v = wu.matmul(&gram)?;
        if !v.is_finite() {
            return Err(Error::Numeric {
                stage: "hippi",
                iteration: iterations,
            });
        }
        let raw = AssignmentStack::from_stacked(&v, &sizes, AssignmentMode::Relaxed);
        let mut next = Vec::with_capacity(sizes.len());
        for block in &raw.blocks {
            next.push(sinkhorn(block, p)?.matrix);
        }
        let change = next
            .iter()
            .zip(&current.blocks)
            .map(|(a, b)| a.sub(b).map(|d| d.frobenius_norm()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        current.blocks = next;
        if change < theta {
            converged = true;
            break;
        }
    }
    Ok(HippiOutcome {
        stack: current,
        iterations,
        converged,
        asymmetric,
    })
}
