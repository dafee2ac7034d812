use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Instance;
use crate::sinkhorn::SinkhornParams;

use super::{
    class_coupling, embed_loss_grad, hippi, init_universe, universe_match, AssignmentStack,
    UniverseEmbedding,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub d: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub sinkhorn: SinkhornParams,
    pub theta: f64,
    pub hippi_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            d: 120,
            alpha: 1e-3,
            lr: 1e-3,
            steps: 200,
            sinkhorn: SinkhornParams::default(),
            theta: 1e-5,
            hippi_iters: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub embedding: UniverseEmbedding,
    /// Loss before each gradient step, then the loss of the returned embedding.
    pub losses: Vec<f64>,
}

impl FitOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in self.losses.iter().enumerate() {
            out.push_str(&format!("{step},{loss}\n"));
        }
        out
    }
}

/// Source-phase fitting of the universe embedding.
///
/// Each step matches every graph into the current universe, synchronizes
/// the matchings with HiPPI on the class-aware coupling, rounds the result
/// to binary targets and takes one gradient step on the embedding loss.
pub fn fit_embeddings<R: Rng + ?Sized>(
    instance: &Instance,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<FitOutcome> {
    let h = instance
        .graphs
        .first()
        .map(|g| g.feature_dim())
        .ok_or_else(|| Error::Parameter("instance has no graphs".into()))?;
    if cfg.d < instance.max_nodes() {
        return Err(Error::Dimension(format!(
            "universe of {} is smaller than a graph of {} nodes",
            cfg.d,
            instance.max_nodes()
        )));
    }
    let mut universe = init_universe(cfg.d, h, rng)?;
    let features: Vec<_> = instance.graphs.iter().map(|g| g.features.clone()).collect();
    let coupling = class_coupling(&instance.graphs, instance.meta.classes)?;

    let targets_for = |u: &UniverseEmbedding| -> Result<AssignmentStack> {
        let blocks = features
            .iter()
            .map(|v| universe_match(v, u, &cfg.sinkhorn))
            .collect::<Result<Vec<_>>>()?;
        let init = AssignmentStack::relaxed(blocks)?;
        hippi(&coupling, &init, cfg.theta, cfg.hippi_iters, &cfg.sinkhorn)?.stack.discretized()
    };

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let targets = targets_for(&universe)?;
        let (loss, grad) = embed_loss_grad(&universe, &targets, &features, cfg.alpha)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                stage: "fit_embeddings",
                iteration: step,
            });
        }
        losses.push(loss);
        universe.matrix = universe.matrix.sub(&grad.scale(cfg.lr))?;
    }
    let targets = targets_for(&universe)?;
    losses.push(embed_loss_grad(&universe, &targets, &features, cfg.alpha)?.0);
    Ok(FitOutcome {
        embedding: universe,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_synthetic, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            m: 4,
            n: 6,
            h: 8,
            noise_sigma: 0.0,
            outliers: 0,
            classes: 2,
        }
    }

    fn cfg(steps: usize) -> FitConfig {
        FitConfig {
            d: 12,
            steps,
            ..FitConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let inst = make_synthetic(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = fit_embeddings(&inst, &cfg(0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let init = init_universe(12, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.embedding, init);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn undersized_universe_is_rejected() {
        let inst = make_synthetic(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bad = FitConfig { d: 5, ..cfg(1) };
        assert!(fit_embeddings(&inst, &bad, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn noiseless_fit_reduces_loss() {
        let inst = make_synthetic(&spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let out = fit_embeddings(&inst, &cfg(200), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out.losses.len(), 201);
        assert!(out.losses[200] < out.losses[0], "{:?}", (out.losses[0], out.losses[200]));
    }

    #[test]
    fn loss_csv_layout() {
        let out = FitOutcome {
            embedding: UniverseEmbedding::new(crate::matrix::DenseMatrix::zeros(1, 1)).unwrap(),
            losses: vec![2.5, 1.25],
        };
        assert_eq!(out.loss_csv(), "step,loss\n0,2.5\n1,1.25\n");
    }
}
