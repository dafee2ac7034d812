//! Test-time multi-matching: learned affinities, Taylor iterations on the
//! summed Koopmans-Beckmann objective, the focal matching loss and the
//! adapter fine-tune loop.

mod adapt;
mod solver;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{frobenius_inner, DenseMatrix};
use crate::sinkhorn::SinkhornParams;
use crate::universe::AssignmentStack;

pub use adapt::{adapt, apply_adapter, matching_loss, normalized_affinity, AdaptOutcome, Adapter};
pub use solver::{solve_multimatch, taylor_gradient, taylor_iterations, SolveOutcome};

/// Test-time projections plus a scalar-to-scalar MLP
/// `f(x) = sum_k w2_k max(0, w1_k x + b1_k) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityParams {
    pub wx: DenseMatrix,
    pub wy: DenseMatrix,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl AffinityParams {
    pub fn new(
        wx: DenseMatrix,
        wy: DenseMatrix,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        let p = Self { wx, wy, w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    /// Identity projections and `f(x) = x` (hidden width 2).
    pub fn linear(h: usize) -> Self {
        Self {
            wx: DenseMatrix::identity(h),
            wy: DenseMatrix::identity(h),
            w1: vec![1.0, -1.0],
            b1: vec![0.0, 0.0],
            w2: vec![1.0, -1.0],
            b2: 0.0,
        }
    }

    /// Identity projections and `f(x) = max(0, x) / h`. Nonnegative and
    /// scaled so that Sinkhorn-normalized affinities stay away from
    /// saturation for unit-variance features.
    pub fn rectifier(h: usize) -> Self {
        Self {
            wx: DenseMatrix::identity(h),
            wy: DenseMatrix::identity(h),
            w1: vec![1.0],
            b1: vec![0.0],
            w2: vec![1.0 / h.max(1) as f64],
            b2: 0.0,
        }
    }

    /// Projections `I + 0.1 Z` and a Gaussian MLP of the given hidden width.
    pub fn random<R: Rng + ?Sized>(h: usize, hidden: usize, rng: &mut R) -> Self {
        let proj = |rng: &mut R| {
            DenseMatrix::from_fn(h, h, |r, c| {
                let z: f64 = rng.sample(StandardNormal);
                if r == c { 1.0 + 0.1 * z } else { 0.1 * z }
            })
        };
        let wx = proj(rng);
        let wy = proj(rng);
        let mut draw = |k: usize, s: f64| (0..k).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let w1 = draw(hidden, 1.0);
        let b1 = draw(hidden, 0.1);
        let w2 = draw(hidden, 1.0 / (hidden.max(1) as f64 * h.max(1) as f64));
        Self { wx, wy, w1, b1, w2, b2: 0.0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.wx.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.wx.rows();
        self.wx.ensure_shape(h, h, "affinity projection Wx")?;
        self.wy.ensure_shape(h, h, "affinity projection Wy")?;
        let k = self.w1.len();
        if self.b1.len() != k || self.w2.len() != k {
            return Err(Error::Dimension(format!(
                "MLP layers do not compose: w1 {k}, b1 {}, w2 {}",
                self.b1.len(),
                self.w2.len()
            )));
        }
        self.wx.ensure_finite("Wx")?;
        self.wy.ensure_finite("Wy")?;
        if !self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite()) || !self.b2.is_finite() {
            return Err(Error::NonFinite("MLP weights".into()));
        }
        Ok(())
    }

    /// The scalar MLP applied to one raw similarity.
    pub fn mlp(&self, x: f64) -> f64 {
        let hidden: f64 = self
            .w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((w1, b1), w2)| w2 * (w1 * x + b1).max(0.0))
            .sum();
        hidden + self.b2
    }
}

/// `M_ij = f((V_i Wx)(V_j Wy)^T)` with `f` applied entrywise.
pub fn affinity(vi: &DenseMatrix, vj: &DenseMatrix, p: &AffinityParams) -> Result<DenseMatrix> {
    p.validate()?;
    let h = p.feature_dim();
    if vi.cols() != h || vj.cols() != h {
        return Err(Error::Dimension(format!(
            "features with {} and {} columns for {h}x{h} projections",
            vi.cols(),
            vj.cols()
        )));
    }
    let raw = vi.matmul(&p.wx)?.matmul_t(&vj.matmul(&p.wy)?)?;
    let out = raw.map(|x| p.mlp(x));
    out.ensure_finite("affinity")?;
    Ok(out)
}

/// Affinities for every ordered pair of graphs, including `i == j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinitySet {
    m: usize,
    blocks: Vec<DenseMatrix>,
}

impl AffinitySet {
    pub fn compute(features: &[DenseMatrix], p: &AffinityParams) -> Result<Self> {
        let m = features.len();
        let mut blocks = Vec::with_capacity(m * m);
        for vi in features {
            for vj in features {
                blocks.push(affinity(vi, vj, p)?);
            }
        }
        Ok(Self { m, blocks })
    }

    /// Builds a set from row-major `m x m` blocks.
    pub fn from_blocks(m: usize, blocks: Vec<DenseMatrix>) -> Result<Self> {
        if blocks.len() != m * m {
            return Err(Error::Dimension(format!(
                "{} affinity blocks for {m} graphs",
                blocks.len()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let b = &blocks[i * m + j];
                b.ensure_shape(b.rows(), blocks[j * m + j].rows(), &format!("affinity ({i},{j})"))?;
                b.ensure_shape(blocks[i * m + i].rows(), b.cols(), &format!("affinity ({i},{j})"))?;
            }
        }
        Ok(Self { m, blocks })
    }

    pub fn graph_count(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> &DenseMatrix {
        &self.blocks[i * self.m + j]
    }
}

/// `lambda tr(X^T A_i X A_j) + tr(X^T M_ij)`.
pub fn pair_kbqap_objective(
    x: &DenseMatrix,
    ai: &DenseMatrix,
    aj: &DenseMatrix,
    m: &DenseMatrix,
    lambda: f64,
) -> Result<f64> {
    let (ni, nj) = x.shape();
    ai.ensure_shape(ni, ni, "A_i")?;
    aj.ensure_shape(nj, nj, "A_j")?;
    m.ensure_shape(ni, nj, "M_ij")?;
    let quadratic = if lambda == 0.0 {
        0.0
    } else {
        frobenius_inner(x, &ai.matmul(x)?.matmul(aj)?)?
    };
    Ok(lambda * quadratic + frobenius_inner(x, m)?)
}

/// Pair objective of `X_ij = U_i U_j^T` summed over ordered pairs `i != j`.
pub fn multimatch_kbqap(
    stack: &AssignmentStack,
    adjacencies: &[DenseMatrix],
    affinities: &AffinitySet,
    lambda: f64,
) -> Result<f64> {
    let m = stack.len();
    if adjacencies.len() != m || affinities.graph_count() != m {
        return Err(Error::Dimension(format!(
            "{m} blocks, {} adjacencies, {} affinity rows",
            adjacencies.len(),
            affinities.graph_count()
        )));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let x = stack.blocks[i].matmul_t(&stack.blocks[j])?;
                total += pair_kbqap_objective(&x, &adjacencies[i], &adjacencies[j], affinities.get(i, j), lambda)?;
            }
        }
    }
    Ok(total)
}

/// Iteration settings for the Taylor solver and the matching loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub lambda: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub sinkhorn: SinkhornParams,
    pub clamp_eps: f64,
    /// Stop once every block moves less than this in Frobenius norm.
    pub tol: f64,
    /// Keep the `j == i` term of the gradient sum.
    pub include_self: bool,
    /// Accumulate gradients across iterations instead of using the latest one.
    pub running_sum: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 2.0,
            max_iters: 50,
            sinkhorn: SinkhornParams::default(),
            clamp_eps: 1e-7,
            tol: 1e-5,
            include_self: true,
            running_sum: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Parameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Parameter(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Parameter(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_mlp_on_orthonormal_rows_gives_squared_norms() {
        let v = DenseMatrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        let m = affinity(&v, &v, &AffinityParams::linear(3)).unwrap();
        assert_eq!(m, DenseMatrix::from_rows(&[[4.0, 0.0], [0.0, 9.0]]).unwrap());
    }

    #[test]
    fn zero_output_layer_gives_zero_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = AffinityParams::random(5, 3, &mut rng);
        p.w2 = vec![0.0; 3];
        let m = affinity(&random(3, 5, &mut rng), &random(4, 5, &mut rng), &p).unwrap();
        assert_eq!(m, DenseMatrix::zeros(3, 4));
    }

    #[test]
    fn affinity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AffinityParams::random(5, 4, &mut rng);
        let vi = random(3, 5, &mut rng);
        let vj = random(4, 5, &mut rng);
        let m = affinity(&vi, &vj, &p).unwrap();
        for a in 0..3 {
            for b in 0..4 {
                let mut raw = 0.0;
                for k in 0..5 {
                    let mut x = 0.0;
                    let mut y = 0.0;
                    for l in 0..5 {
                        x += vi[(a, l)] * p.wx[(l, k)];
                        y += vj[(b, l)] * p.wy[(l, k)];
                    }
                    raw += x * y;
                }
                let mut out = p.b2;
                for u in 0..4 {
                    out += p.w2[u] * f64::max(0.0, p.w1[u] * raw + p.b1[u]);
                }
                assert!((m[(a, b)] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_rejects_mismatched_features() {
        let p = AffinityParams::rectifier(4);
        assert!(matches!(
            affinity(&DenseMatrix::zeros(2, 4), &DenseMatrix::zeros(2, 3), &p),
            Err(Error::Dimension(_))
        ));
        let bad = AffinityParams { b1: vec![], ..AffinityParams::rectifier(4) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pair_objective_identity_reduces_to_trace_of_square() {
        let a = DenseMatrix::from_rows(&[[0.0, 2.0, 1.0], [2.0, 0.0, 3.0], [1.0, 3.0, 0.0]]).unwrap();
        let x = DenseMatrix::identity(3);
        let got = pair_kbqap_objective(&x, &a, &a, &DenseMatrix::zeros(3, 3), 0.5).unwrap();
        assert_eq!(got, 0.5 * a.matmul(&a).unwrap().trace());
        let z = DenseMatrix::zeros(3, 3);
        assert_eq!(pair_kbqap_objective(&z, &z, &z, &z, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn pair_objective_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut int = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-3i32..4) as f64);
        let (x, ai, aj, m) = (int(3, 3), int(3, 3), int(3, 3), int(3, 3));
        let mut expect = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                expect += x[(a, b)] * m[(a, b)];
                for c in 0..3 {
                    for e in 0..3 {
                        // tr(X^T A_i X A_j) = sum X_ab A_i[a,c] X_ce A_j[e,b]
                        expect += 2.0 * x[(a, b)] * ai[(a, c)] * x[(c, e)] * aj[(e, b)];
                    }
                }
            }
        }
        assert_eq!(pair_kbqap_objective(&x, &ai, &aj, &m, 2.0).unwrap(), expect);
        assert!(pair_kbqap_objective(&x, &ai, &DenseMatrix::zeros(2, 2), &m, 1.0).is_err());
    }

    #[test]
    fn solver_params_validation() {
        assert!(SolverParams::default().validate().is_ok());
        for bad in [
            SolverParams { clamp_eps: 0.5, ..Default::default() },
            SolverParams { clamp_eps: 0.0, ..Default::default() },
            SolverParams { lambda: -1.0, ..Default::default() },
            SolverParams { gamma: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
