//! Entropic projection onto (partial) doubly-stochastic matrices.
//!
//! Everything runs on log-potentials: the scaled scores `X / tau` are never
//! exponentiated without first subtracting the row or column maximum, so
//! scores in the thousands stay finite.
//!
//! A wide `n x k` input (`n < k`) is balanced against one aggregated slack
//! row that carries the missing `k - n` units of row mass. This is the same
//! as appending `k - n` identical uniform rows to get a square problem, but
//! the Newton systems stay `(n + 1) x (n + 1)` however large `k` is.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// How the scaling potentials are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Balancing {
    /// Classic alternating row/column normalization.
    Alternating,
    /// Two alternating sweeps, then damped Newton steps on the dual
    /// potentials. Same fixed point, quadratic local convergence.
    #[default]
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub balancing: Balancing,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            max_iters: 20,
            tol: 1e-6,
            balancing: Balancing::default(),
        }
    }
}

impl SinkhornParams {
    pub fn new(tau: f64, max_iters: usize, tol: f64) -> Result<Self> {
        let p = Self {
            tau,
            max_iters,
            tol,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_balancing(mut self, balancing: Balancing) -> Self {
        self.balancing = balancing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(Error::Parameter("sinkhorn max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Result of a projection. A run that hits `max_iters` is still returned,
/// with `converged == false` and the deviation it reached.
#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: DenseMatrix,
    pub iterations: usize,
    /// Max over rows and columns of `|marginal - target|` after the last iteration.
    pub deviation: f64,
    pub converged: bool,
    /// Deviation after each iteration.
    pub history: Vec<f64>,
    /// Final log-potentials, usable as a warm start for a nearby input.
    pub potentials: Potentials,
}

/// Row (including the slack row of a wide input) and column log-potentials.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Potentials {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

/// Projects `x` (`n x k`, `n <= k`) to a matrix with unit row sums and
/// column sums at most one; square inputs become doubly stochastic.
pub fn sinkhorn(x: &DenseMatrix, p: &SinkhornParams) -> Result<Projection> {
    sinkhorn_warm(x, p, None)
}

/// [`sinkhorn`] started from the potentials of an earlier projection. A
/// warm start skips the alternating warmup and the annealing stages; it is
/// ignored when its shape does not fit `x` or in alternating mode.
pub fn sinkhorn_warm(x: &DenseMatrix, p: &SinkhornParams, start: Option<&Potentials>) -> Result<Projection> {
    p.validate()?;
    let (n, k) = x.shape();
    if n == 0 || k == 0 {
        return Err(Error::Dimension("sinkhorn input must be non-empty".into()));
    }
    if n > k {
        return Err(Error::Dimension(format!(
            "sinkhorn needs rows <= cols, got {n}x{k}"
        )));
    }
    x.ensure_finite("sinkhorn input")?;

    let mut problem = Balancer::new(x, p.tau);
    let mut history = Vec::new();
    let mut converged = false;
    let warm = match (p.balancing, start) {
        (Balancing::Newton, Some(s)) if s.rows.len() == problem.rows && s.cols.len() == problem.cols => {
            problem.f.clone_from(&s.rows);
            problem.g.clone_from(&s.cols);
            true
        }
        _ => false,
    };
    let stages = match p.balancing {
        Balancing::Newton if !warm => anneal_schedule(problem.spread()),
        _ => vec![1.0],
    };
    let last = stages.len() - 1;
    'stages: for (stage, &scale) in stages.iter().enumerate() {
        problem.rescale(scale);
        let target = if stage == last { p.tol } else { STAGE_TOL };
        let mut local = 0;
        while history.len() < p.max_iters {
            match p.balancing {
                Balancing::Newton if warm || stage > 0 || local >= NEWTON_WARMUP => {
                    problem.newton_step();
                    problem.scaled_sweep();
                }
                _ => problem.sweep(),
            }
            local += 1;
            let dev = problem.deviation();
            if !dev.is_finite() {
                return Err(Error::Numeric {
                    stage: "sinkhorn",
                    iteration: history.len() + 1,
                });
            }
            history.push(dev);
            if dev < target {
                if stage == last {
                    converged = true;
                }
                continue 'stages;
            }
        }
        break;
    }

    let matrix = problem.real_rows();
    // potentials are reported at full scale
    problem.rescale(1.0);
    Ok(Projection {
        matrix,
        iterations: history.len(),
        deviation: *history.last().unwrap_or(&f64::INFINITY),
        converged,
        history,
        potentials: Potentials {
            rows: problem.f,
            cols: problem.g,
        },
    })
}

const NEWTON_WARMUP: usize = 2;

/// Largest logit spread solved directly. Beyond it the exponentially small
/// plan entries make the Newton system nearly singular, so the logits are
/// first shrunk and then scaled back up by factors of 4.
const ANNEAL_SPREAD: f64 = 64.0;
const STAGE_TOL: f64 = 1e-2;

fn anneal_schedule(spread: f64) -> Vec<f64> {
    let mut scales = vec![1.0];
    while spread * scales[scales.len() - 1] > ANNEAL_SPREAD {
        let next = scales[scales.len() - 1] / 4.0;
        scales.push(next);
    }
    scales.reverse();
    scales
}

struct Balancer {
    // real rows, then the slack row when n < k
    base: Vec<f64>,
    logits: Vec<f64>,
    scale: f64,
    rows: usize,
    real_rows: usize,
    cols: usize,
    row_target: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    // exp(logits + f + g), kept in step with the potentials when available
    plan: Option<Vec<f64>>,
}

impl Balancer {
    fn new(x: &DenseMatrix, tau: f64) -> Self {
        let (n, k) = x.shape();
        let mut logits: Vec<f64> = x.as_slice().iter().map(|v| v / tau).collect();
        let mut row_target = vec![1.0; n];
        if n < k {
            logits.extend(std::iter::repeat_n(0.0, k));
            row_target.push((k - n) as f64);
        }
        let rows = row_target.len();
        Self {
            base: logits.clone(),
            logits,
            scale: 1.0,
            rows,
            real_rows: n,
            cols: k,
            row_target,
            f: vec![0.0; rows],
            g: vec![0.0; k],
            plan: None,
        }
    }

    /// Largest difference between logits in one row or one column.
    fn spread(&self) -> f64 {
        let mut spread: f64 = 0.0;
        for r in 0..self.rows {
            let row = &self.base[r * self.cols..(r + 1) * self.cols];
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            spread = spread.max(hi - lo);
        }
        for c in 0..self.cols {
            let col = (0..self.rows).map(|r| self.base[r * self.cols + c]);
            let hi = col.clone().fold(f64::NEG_INFINITY, f64::max);
            let lo = col.fold(f64::INFINITY, f64::min);
            spread = spread.max(hi - lo);
        }
        spread
    }

    /// Switches to logits `scale * base`, carrying the potentials along.
    fn rescale(&mut self, scale: f64) {
        if scale == self.scale {
            return;
        }
        let ratio = scale / self.scale;
        for (l, b) in self.logits.iter_mut().zip(&self.base) {
            *l = b * scale;
        }
        for v in self.f.iter_mut().chain(self.g.iter_mut()) {
            *v *= ratio;
        }
        self.scale = scale;
        self.plan = None;
    }

    #[inline]
    fn log_entry(&self, r: usize, c: usize, f: &[f64], g: &[f64]) -> f64 {
        self.logits[r * self.cols + c] + f[r] + g[c]
    }

    /// Exact row then column normalization in the log domain.
    fn sweep(&mut self) {
        let mut buf = vec![0.0; self.rows.max(self.cols)];
        for r in 0..self.rows {
            for c in 0..self.cols {
                buf[c] = self.logits[r * self.cols + c] + self.g[c];
            }
            self.f[r] = self.row_target[r].ln() - log_sum_exp(&buf[..self.cols]);
        }
        for c in 0..self.cols {
            for r in 0..self.rows {
                buf[r] = self.logits[r * self.cols + c] + self.f[r];
            }
            self.g[c] = -log_sum_exp(&buf[..self.rows]);
        }
        self.plan = None;
    }

    /// The same normalization applied multiplicatively to the cached plan;
    /// falls back to [`Self::sweep`] when a marginal has under- or overflowed.
    fn scaled_sweep(&mut self) {
        let Some(mut plan) = self.plan.take() else {
            self.sweep();
            return;
        };
        let (m, k) = (self.rows, self.cols);
        for r in 0..m {
            let row = &mut plan[r * k..(r + 1) * k];
            let s: f64 = row.iter().sum();
            if !(s > 1e-290 && s.is_finite()) {
                self.sweep();
                return;
            }
            let factor = self.row_target[r] / s;
            self.f[r] += factor.ln();
            row.iter_mut().for_each(|v| *v *= factor);
        }
        let mut cs = vec![0.0; k];
        for r in 0..m {
            for (acc, v) in cs.iter_mut().zip(&plan[r * k..(r + 1) * k]) {
                *acc += v;
            }
        }
        if !cs.iter().all(|s| *s > 1e-290 && s.is_finite()) {
            self.sweep();
            return;
        }
        for (g, s) in self.g.iter_mut().zip(&cs) {
            *g -= s.ln();
        }
        for r in 0..m {
            for (v, s) in plan[r * k..(r + 1) * k].iter_mut().zip(&cs) {
                *v /= s;
            }
        }
        self.plan = Some(plan);
    }

    fn plan_at(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.log_entry(r, c, f, g).exp());
            }
        }
        out
    }

    fn current_plan(&mut self) -> &[f64] {
        if self.plan.is_none() {
            self.plan = Some(self.plan_at(&self.f, &self.g));
        }
        self.plan.as_deref().unwrap_or_default()
    }

    fn marginals(&self, plan: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rs = vec![0.0; self.rows];
        let mut cs = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = plan[r * self.cols + c];
                rs[r] += v;
                cs[c] += v;
            }
        }
        (rs, cs)
    }

    fn deviation(&mut self) -> f64 {
        self.current_plan();
        let plan = self.plan.as_deref().unwrap_or_default();
        let (rs, cs) = self.marginals(plan);
        let rows = rs
            .iter()
            .zip(&self.row_target)
            .map(|(s, t)| (s - t).abs() / t);
        let cols = cs.iter().map(|s| (s - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    /// Convex dual objective `sum P - <a, f> - <b, g>` together with the
    /// plan, or `None` once the plan overflows.
    fn dual_at(&self, f: &[f64], g: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut plan = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let l = self.log_entry(r, c, f, g);
                if l > 700.0 {
                    return None;
                }
                plan.push(l.exp());
            }
        }
        Some((self.dual_of(&plan, f, g), plan))
    }

    fn dual_of(&self, plan: &[f64], f: &[f64], g: &[f64]) -> f64 {
        let lin_f: f64 = f.iter().zip(&self.row_target).map(|(a, b)| a * b).sum();
        let lin_g: f64 = g.iter().sum();
        plan.iter().sum::<f64>() - lin_f - lin_g
    }

    /// One damped Newton step; `false` if no acceptable step was found.
    ///
    /// The column block of the Hessian is diagonal, so the system is reduced
    /// to the row potentials through its Schur complement
    /// `S = D_r - P D_c^-1 P^T`, which is only `rows x rows`.
    fn newton_step(&mut self) -> bool {
        let (m, k) = (self.rows, self.cols);
        self.current_plan();
        let plan = self.plan.as_deref().unwrap_or_default();
        let (rs, cs) = self.marginals(plan);
        let row_res: Vec<f64> = rs.iter().zip(&self.row_target).map(|(s, t)| s - t).collect();
        let col_res: Vec<f64> = cs.iter().map(|s| s - 1.0).collect();
        let col_diag: Vec<f64> = cs.iter().map(|s| s + 1e-12).collect();

        let mut schur = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for a in 0..m {
            let pa = &plan[a * k..(a + 1) * k];
            schur[(a, a)] += rs[a] + 1e-12;
            let mut acc = -row_res[a];
            for c in 0..k {
                acc += pa[c] * col_res[c] / col_diag[c];
            }
            rhs[a] = acc;
            for b in a..m {
                let pb = &plan[b * k..(b + 1) * k];
                let mut s = 0.0;
                for c in 0..k {
                    s += pa[c] * pb[c] / col_diag[c];
                }
                schur[(a, b)] -= s;
                if a != b {
                    schur[(b, a)] -= s;
                }
            }
        }
        // potentials are defined up to (f + s, g - s); pin the last row potential
        let pin = m - 1;
        for i in 0..m {
            schur[(pin, i)] = 0.0;
            schur[(i, pin)] = 0.0;
        }
        schur[(pin, pin)] = 1.0;
        rhs[pin] = 0.0;

        let Some(df) = schur.lu().solve(&rhs) else {
            return false;
        };
        let mut dg = vec![0.0; k];
        for c in 0..k {
            let mut acc = -col_res[c];
            for r in 0..m {
                acc -= plan[r * k + c] * df[r];
            }
            dg[c] = acc / col_diag[c];
        }
        if !df.iter().chain(&dg).all(|v| v.is_finite()) {
            return false;
        }
        let slope: f64 = df.iter().zip(&row_res).map(|(a, b)| a * b).sum::<f64>()
            + dg.iter().zip(&col_res).map(|(a, b)| a * b).sum::<f64>();
        if !(slope < 0.0) {
            return false;
        }

        let base = self.dual_of(plan, &self.f, &self.g);
        let trial = |t: f64| {
            let f: Vec<f64> = self.f.iter().zip(df.iter()).map(|(a, d)| a + t * d).collect();
            let g: Vec<f64> = self.g.iter().zip(&dg).map(|(a, d)| a + t * d).collect();
            self.dual_at(&f, &g).map(|(value, plan)| (value, f, g, plan))
        };
        let mut t = 1.0;
        let mut best = loop {
            match trial(t) {
                Some(found) if found.0 <= base + 1e-4 * t * slope => break found,
                _ => {}
            }
            t *= 0.5;
            if t < 1e-10 {
                return false;
            }
        };
        // Far from the optimum the exponential terms make full Newton steps
        // too short (potentials move by about one per step); keep doubling
        // while the dual still decreases.
        let long = df.iter().chain(&dg).any(|d| d.abs() >= 0.5);
        if t == 1.0 && long {
            while t < 1e6 {
                match trial(2.0 * t) {
                    Some(next) if next.0 < best.0 => {
                        best = next;
                        t *= 2.0;
                    }
                    _ => break,
                }
            }
        }
        let (_, f, g, plan) = best;
        self.f = f;
        self.g = g;
        self.plan = Some(plan);
        true
    }

    fn real_rows(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.real_rows, self.cols, |r, c| {
            self.log_entry(r, c, &self.f, &self.g).exp()
        })
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
