//! wasm-bindgen bindings behind `www/index.html`.

use graphsync::graph::{draw_prototypes, instance_from_prototypes, SyntheticSpec};
use graphsync::oracle::stack_accuracy;
use graphsync::qap::{solve_multimatch, AffinityParams, SolverParams};
use graphsync::universe::{cycle_violations, expand_matchings, fit_embeddings, FitConfig};
use graphsync::{sinkhorn, DenseMatrix, SinkhornParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: graphsync::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `n x n` Sinkhorn output for a seeded random score matrix.
pub fn heatmap(n: usize, tau: f64, seed: u64) -> graphsync::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = SinkhornParams::new(tau, 100, 1e-6)?;
    Ok(sinkhorn(&scores, &p)?.matrix.into_vec())
}

#[wasm_bindgen]
pub fn sinkhorn_heatmap(n: usize, tau: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    heatmap(n, tau, seed).map_err(js_err)
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSummary {
    pub accuracy: f64,
    pub cycle_violations: usize,
    pub iterations: usize,
}

/// Fits a universe on noiseless copies of random prototypes, then matches
/// a second set of copies carrying `sigma` feature noise.
pub fn match_under_noise(sigma: f64, graphs: usize, nodes: usize, seed: u64) -> graphsync::Result<MatchSummary> {
    let h = 8;
    let d = 2 * nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = draw_prototypes(nodes, h, &mut rng);
    let spec = SyntheticSpec { m: graphs, n: nodes, h, noise_sigma: 0.0, outliers: 0, classes: 2 };
    let source = instance_from_prototypes(&protos, &spec, &mut rng)?;
    let fit = fit_embeddings(&source, &FitConfig { d, steps: 40, ..FitConfig::default() }, &mut rng)?;
    let target = instance_from_prototypes(&protos, &SyntheticSpec { noise_sigma: sigma, ..spec }, &mut rng)?;
    let out = solve_multimatch(&target.graphs, &fit.embedding, &AffinityParams::rectifier(h), &SolverParams::default())?;
    let binary = out.stack.discretized()?;
    Ok(MatchSummary {
        accuracy: stack_accuracy(&binary, target.gt.as_ref())?,
        cycle_violations: cycle_violations(&expand_matchings(&binary)?)?,
        iterations: out.iterations,
    })
}

#[wasm_bindgen]
pub fn multimatch_at_noise(sigma: f64, graphs: usize, nodes: usize, seed: u64) -> Result<MatchSummary, JsError> {
    match_under_noise(sigma, graphs, nodes, seed).map_err(js_err)
}

#[wasm_bindgen]
pub fn universe_size(classes: usize, step: usize) -> Result<usize, JsError> {
    graphsync::universe::universe_size(classes, step).map_err(js_err)
}
