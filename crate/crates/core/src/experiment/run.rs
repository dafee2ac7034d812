use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{draw_prototypes, instance_from_prototypes, GroundTruth, Instance, SyntheticSpec};
use crate::matrix::DenseMatrix;
use crate::oracle::{brute_force_multi, matching_accuracy};
use crate::qap::{adapt, apply_adapter, multimatch_kbqap, solve_multimatch, Adapter, AffinityParams, SolveOutcome, SolverParams};
use crate::sinkhorn::SinkhornParams;
use crate::universe::{cycle_violations, expand_matchings, fit_embeddings, init_universe, AssignmentStack, FitConfig, UniverseEmbedding};

use super::config::{ExperimentConfig, Mode};
use super::report::{RunReport, RunRow, SolverReport};

/// Settings that come from the command line rather than the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Mixed into every per-seed child seed.
    pub seed: u64,
    /// Zero every timing so output files are byte-stable.
    pub reproducible: bool,
    /// Worker threads for sweep points; `None` lets the pool decide.
    pub workers: Option<usize>,
}

/// Stream of the target-domain generator; the source uses stream 0.
const TARGET_STREAM: u64 = 1;

pub fn embedding_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("universe_{seed}.mat"))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    mode: Mode,
    opts: RunOptions,
    solver: SolverParams,
    aff: AffinityParams,
}

impl Ctx<'_> {
    fn spec(&self, noise_sigma: f64) -> SyntheticSpec {
        let c = self.cfg;
        SyntheticSpec { m: c.m, n: c.n, h: c.h, noise_sigma, outliers: c.outliers, classes: c.classes }
    }

    fn fit_config(&self) -> FitConfig {
        let c = self.cfg;
        FitConfig {
            d: c.d,
            alpha: c.alpha,
            lr: c.lr,
            steps: c.fit_steps,
            sinkhorn: self.solver.sinkhorn,
            theta: c.theta,
            ..FitConfig::default()
        }
    }

    fn seconds(&self, start: Instant) -> f64 {
        if self.opts.reproducible {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        }
    }

    /// Prototypes, source instance and the generator positioned after them.
    fn source(&self, child: u64) -> Result<(DenseMatrix, Instance, ChaCha8Rng)> {
        let mut rng = ChaCha8Rng::seed_from_u64(child);
        let protos = draw_prototypes(self.cfg.n, self.cfg.h, &mut rng);
        let mut inst = instance_from_prototypes(&protos, &self.spec(self.cfg.source_sigma), &mut rng)?;
        inst.meta.seed = child;
        Ok((protos, inst, rng))
    }

    /// Target instance at `noise_sigma`; every noise level of a seed shares
    /// node orders and noise directions.
    fn target(&self, child: u64, protos: &DenseMatrix, noise_sigma: f64) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(child);
        rng.set_stream(TARGET_STREAM);
        let mut inst = instance_from_prototypes(protos, &self.spec(noise_sigma), &mut rng)?;
        inst.meta.seed = child;
        if self.cfg.symmetric_adjacency {
            for g in &mut inst.graphs {
                g.adjacency = g.adjacency.add(&g.adjacency.transpose())?.scale(0.5);
            }
        }
        Ok(inst)
    }

    fn universe_for(&self, source: &Instance, rng: &mut ChaCha8Rng) -> Result<(UniverseEmbedding, Vec<f64>)> {
        if self.cfg.fit_steps == 0 {
            return Ok((init_universe(self.cfg.d, self.cfg.h, rng)?, Vec::new()));
        }
        let fit = fit_embeddings(source, &self.fit_config(), rng)?;
        Ok((fit.embedding, fit.losses))
    }
}

/// Binary stack placing prototype `p` in slot `p` and each graph's outliers
/// in the slots after the prototypes.
pub fn ground_truth_stack(gt: &GroundTruth, n: usize, d: usize) -> Result<AssignmentStack> {
    let blocks = gt
        .iter()
        .map(|slots| {
            let mut next = n;
            let mut u = DenseMatrix::zeros(slots.len(), d);
            for (node, slot) in slots.iter().enumerate() {
                let col = slot.unwrap_or_else(|| {
                    next += 1;
                    next - 1
                });
                if col >= d {
                    return Err(Error::Dimension(format!("slot {col} outside a universe of {d}")));
                }
                u[(node, col)] = 1.0;
            }
            Ok(u)
        })
        .collect::<Result<Vec<_>>>()?;
    AssignmentStack::binary(blocks)
}

fn ratio(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 { 1.0 } else { f64::INFINITY }
    } else {
        value / reference
    }
}

struct Scored {
    objective: f64,
    accuracy: f64,
    cycle_violations: usize,
}

fn score(out: &SolveOutcome, inst: &Instance, lambda: f64) -> Result<Scored> {
    let binary = out.stack.discretized()?;
    let adj: Vec<_> = inst.graphs.iter().map(|g| g.adjacency.clone()).collect();
    let objective = multimatch_kbqap(&binary, &adj, &out.affinities, lambda)?;
    let matchings = expand_matchings(&binary)?;
    Ok(Scored {
        accuracy: matching_accuracy(&matchings, inst.gt.as_ref())?,
        cycle_violations: cycle_violations(&matchings)?,
        objective,
    })
}

type Point = (RunRow, SolverReport);

fn point(ctx: &Ctx, seed: u64, noise_sigma: f64, s: &Scored, reference: f64, out: &SolveOutcome, start: Instant) -> Point {
    let wall_time_s = ctx.seconds(start);
    let row = RunRow {
        seed,
        noise_sigma,
        accuracy: s.accuracy,
        objective_ratio: ratio(s.objective, reference),
        cycle_violations: s.cycle_violations,
        iterations: out.iterations,
        wall_time_s,
    };
    let report = SolverReport {
        mode: ctx.mode.to_string(),
        seed,
        noise_sigma,
        accuracy: s.accuracy,
        accuracy_before: None,
        objective: s.objective,
        reference_objective: reference,
        iterations: out.iterations,
        converged: out.converged,
        losses: Vec::new(),
        wall_time_s,
    };
    (row, report)
}

fn gt_objective(ctx: &Ctx, inst: &Instance, out: &SolveOutcome) -> Result<f64> {
    let gt = inst.gt.as_ref().ok_or(Error::MissingGroundTruth)?;
    let stack = ground_truth_stack(gt, ctx.cfg.n, ctx.cfg.d)?;
    let adj: Vec<_> = inst.graphs.iter().map(|g| g.adjacency.clone()).collect();
    multimatch_kbqap(&stack, &adj, &out.affinities, ctx.solver.lambda)
}

fn fit_universe_seed(ctx: &Ctx, seed: u64) -> Result<Vec<Point>> {
    let start = Instant::now();
    let child = ctx.opts.seed ^ seed;
    let (_, source, mut rng) = ctx.source(child)?;
    let fit = fit_embeddings(&source, &ctx.fit_config(), &mut rng)?;
    let path = embedding_path(&ctx.cfg.out_dir, seed);
    fit.embedding.save(&path, &[("seed", seed.to_string()), ("source_sigma", ctx.cfg.source_sigma.to_string())])?;
    let loss_path = ctx.cfg.out_dir.join(format!("fit_loss_{seed}.csv"));
    std::fs::write(&loss_path, fit.loss_csv()).map_err(|e| Error::io(loss_path, e))?;

    let out = solve_multimatch(&source.graphs, &fit.embedding, &ctx.aff, &ctx.solver)?;
    let s = score(&out, &source, ctx.solver.lambda)?;
    let reference = gt_objective(ctx, &source, &out)?;
    let (row, mut report) = point(ctx, seed, ctx.cfg.source_sigma, &s, reference, &out, start);
    report.losses = fit.losses;
    Ok(vec![(row, report)])
}

fn sweep_seed(ctx: &Ctx, seed: u64) -> Result<Vec<Point>> {
    let child = ctx.opts.seed ^ seed;
    let (protos, source, mut rng) = ctx.source(child)?;
    let (universe, losses) = ctx.universe_for(&source, &mut rng)?;
    ctx.cfg
        .noise_sigma
        .iter()
        .map(|&sigma| {
            let start = Instant::now();
            let target = ctx.target(child, &protos, sigma)?;
            let out = solve_multimatch(&target.graphs, &universe, &ctx.aff, &ctx.solver)?;
            let s = score(&out, &target, ctx.solver.lambda)?;
            let reference = gt_objective(ctx, &target, &out)?;
            let (row, mut report) = point(ctx, seed, sigma, &s, reference, &out, start);
            report.losses.clone_from(&losses);
            Ok((row, report))
        })
        .collect()
}

fn oracle_seed(ctx: &Ctx, seed: u64) -> Result<Vec<Point>> {
    let child = ctx.opts.seed ^ seed;
    let (protos, source, mut rng) = ctx.source(child)?;
    let (universe, _) = ctx.universe_for(&source, &mut rng)?;
    ctx.cfg
        .noise_sigma
        .iter()
        .map(|&sigma| {
            let start = Instant::now();
            let target = ctx.target(child, &protos, sigma)?;
            let out = solve_multimatch(&target.graphs, &universe, &ctx.aff, &ctx.solver)?;
            let s = score(&out, &target, ctx.solver.lambda)?;
            let adj: Vec<_> = target.graphs.iter().map(|g| g.adjacency.clone()).collect();
            let (_, best) = brute_force_multi(&adj, &out.affinities, ctx.solver.lambda, ctx.cfg.d)?;
            Ok(point(ctx, seed, sigma, &s, best, &out, start))
        })
        .collect()
}

fn tta_seed(ctx: &Ctx, seed: u64) -> Result<Vec<Point>> {
    let dir = ctx.cfg.embedding_dir.as_ref().unwrap_or(&ctx.cfg.out_dir);
    let universe = UniverseEmbedding::load(&embedding_path(dir, seed))?;
    if universe.size() != ctx.cfg.d || universe.feature_dim() != ctx.cfg.h {
        return Err(Error::Dimension(format!(
            "stored embedding is {}x{}, config asks for d={} h={}",
            universe.size(),
            universe.feature_dim(),
            ctx.cfg.d,
            ctx.cfg.h
        )));
    }
    let child = ctx.opts.seed ^ seed;
    let (protos, _, _) = ctx.source(child)?;
    ctx.cfg
        .noise_sigma
        .iter()
        .map(|&sigma| {
            let start = Instant::now();
            let target = ctx.target(child, &protos, sigma)?;
            let before = solve_multimatch(&target.graphs, &universe, &ctx.aff, &ctx.solver)?;
            let before = score(&before, &target, ctx.solver.lambda)?.accuracy;
            let adapted = adapt(
                &target.graphs,
                &universe,
                &Adapter::identity(ctx.cfg.h),
                &ctx.aff,
                &ctx.solver,
                ctx.cfg.lr,
                ctx.cfg.adapt_steps,
            )?;
            let graphs = apply_adapter(&target.graphs, &adapted.adapter)?;
            let adapted_inst = Instance { graphs, gt: target.gt.clone(), meta: target.meta };
            let out = solve_multimatch(&adapted_inst.graphs, &universe, &ctx.aff, &ctx.solver)?;
            let s = score(&out, &adapted_inst, ctx.solver.lambda)?;
            let reference = gt_objective(ctx, &adapted_inst, &out)?;
            let (row, mut report) = point(ctx, seed, sigma, &s, reference, &out, start);
            report.accuracy_before = Some(before);
            report.losses = adapted.losses;
            Ok((row, report))
        })
        .collect()
}

fn run_seeds(ctx: &Ctx, f: fn(&Ctx, u64) -> Result<Vec<Point>>) -> Result<Vec<Point>> {
    let seeds = &ctx.cfg.seeds;
    #[cfg(feature = "parallel")]
    let per_seed: Vec<Result<Vec<Point>>> = {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = ctx.opts.workers {
            builder = builder.num_threads(w);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(|&s| f(ctx, s)).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let per_seed: Vec<Result<Vec<Point>>> = seeds.iter().map(|&s| f(ctx, s)).collect();
    let mut points = Vec::new();
    for r in per_seed {
        points.extend(r?);
    }
    Ok(points)
}

/// Runs every `(seed, noise)` point of `mode` and collects the report.
/// Rows come back sorted, so the worker count never changes the output.
pub fn run(cfg: &ExperimentConfig, mode: Mode, opts: &RunOptions) -> Result<RunReport> {
    cfg.check().map_err(|(_, m)| Error::Parameter(m))?;
    let sinkhorn = SinkhornParams::new(cfg.tau, cfg.sinkhorn_iters, SinkhornParams::default().tol)?;
    let solver = SolverParams {
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        max_iters: cfg.miter,
        sinkhorn,
        tol: cfg.theta,
        ..SolverParams::default()
    };
    let ctx = Ctx { cfg, mode, opts: *opts, solver, aff: AffinityParams::rectifier(cfg.h) };
    if mode == Mode::FitUniverse {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    }
    let f = match mode {
        Mode::FitUniverse => fit_universe_seed,
        Mode::Tta => tta_seed,
        Mode::OracleCompare => oracle_seed,
        Mode::Sweep => sweep_seed,
    };
    let (rows, reports) = run_seeds(&ctx, f)?.into_iter().unzip();
    Ok(RunReport::new(rows, reports))
}
