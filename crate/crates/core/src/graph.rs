//! Graph construction: node sampling, the feature-driven adjacency rule,
//! synthetic multi-graph instances and their on-disk layout.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

/// Node features `V` (`n x h`), weighted adjacency `A` (`n x n`, zero
/// diagonal, nonnegative) and class labels in `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub features: DenseMatrix,
    pub adjacency: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Graph {
    pub fn new(features: DenseMatrix, adjacency: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        adjacency.ensure_shape(n, n, "adjacency")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        features.ensure_finite("node features")?;
        adjacency.ensure_finite("adjacency")?;
        if (0..n).any(|i| adjacency[(i, i)] != 0.0) {
            return Err(Error::Parameter("adjacency diagonal must be zero".into()));
        }
        if adjacency.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter("adjacency entries must be nonnegative".into()));
        }
        Ok(Self {
            features,
            adjacency,
            labels,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Generator settings recorded alongside an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceMeta {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub noise_sigma: f64,
    pub outliers: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Ground truth: for each graph, the universe slot of every node
/// (`None` for outliers).
pub type GroundTruth = Vec<Vec<Option<usize>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub graphs: Vec<Graph>,
    pub gt: Option<GroundTruth>,
    pub meta: InstanceMeta,
}

/// Parameters of the adjacency rule. Edge dropping only happens when
/// `training_mode` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyParams {
    pub wx: DenseMatrix,
    pub wy: DenseMatrix,
    pub drop_rate: f64,
    pub epsilon: f64,
    pub training_mode: bool,
}

impl AdjacencyParams {
    pub fn identity(h: usize) -> Self {
        Self {
            wx: DenseMatrix::identity(h),
            wy: DenseMatrix::identity(h),
            drop_rate: 0.1,
            epsilon: 1e-6,
            training_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Parameter(format!(
                "drop_rate must lie in [0, 1], got {}",
                self.drop_rate
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `D_ab = 1 - cos(v_a, v_b)`, symmetric with zero diagonal, clamped to `[0, 2]`.
pub fn cosine_distance(v: &DenseMatrix) -> Result<DenseMatrix> {
    let n = v.rows();
    let norms: Vec<f64> = (0..n).map(|r| dot(v.row(r), v.row(r)).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::DegenerateFeature { row });
    }
    let mut d = DenseMatrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let cos = dot(v.row(a), v.row(b)) / (norms[a] * norms[b]);
            let dist = (1.0 - cos).clamp(0.0, 2.0);
            d[(a, b)] = dist;
            d[(b, a)] = dist;
        }
    }
    Ok(d)
}

/// Weighted adjacency: row-wise softmax of `(V Wx)(V Wy)^T`, multiplied
/// elementwise by `1 / (D + epsilon)`, diagonal zeroed, then (in training
/// mode) each off-diagonal entry dropped with probability `drop_rate`.
pub fn build_adjacency<R: Rng + ?Sized>(
    v: &DenseMatrix,
    p: &AdjacencyParams,
    rng: &mut R,
) -> Result<DenseMatrix> {
    p.validate()?;
    let h = v.cols();
    p.wx.ensure_shape(h, h, "Wx")?;
    p.wy.ensure_shape(h, h, "Wy")?;
    let dist = cosine_distance(v)?;
    let scores = v.matmul(&p.wx)?.matmul_t(&v.matmul(&p.wy)?)?;
    let n = v.rows();
    let mut a = row_softmax(&scores);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] = if r == c {
                0.0
            } else {
                a[(r, c)] / (dist[(r, c)] + p.epsilon)
            };
        }
    }
    if p.training_mode && p.drop_rate > 0.0 {
        for r in 0..n {
            for c in 0..n {
                if r != c && rng.random::<f64>() < p.drop_rate {
                    a[(r, c)] = 0.0;
                }
            }
        }
    }
    a.ensure_finite("adjacency")?;
    Ok(a)
}

pub(crate) fn row_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Spatially uniform node sampling on an `height x width` feature grid:
/// visits `(r, c)` with `r % step == 0 && c % step == 0` in row-major order
/// and keeps the foreground cells (label >= 1).
pub fn sample_nodes(
    grid: &DenseMatrix,
    height: usize,
    width: usize,
    mask: &[usize],
    step: usize,
) -> Result<(DenseMatrix, Vec<usize>)> {
    if step == 0 {
        return Err(Error::Parameter("sampling step must be at least 1".into()));
    }
    if grid.rows() != height * width || mask.len() != height * width {
        return Err(Error::Dimension(format!(
            "grid of {} rows and mask of {} cells for a {height}x{width} grid",
            grid.rows(),
            mask.len()
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in (0..height).step_by(step) {
        for c in (0..width).step_by(step) {
            let cell = r * width + c;
            if mask[cell] >= 1 {
                rows.push(grid.row(cell).to_vec());
                labels.push(mask[cell]);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((DenseMatrix::from_rows(&rows)?, labels))
}

/// Settings for [`make_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub noise_sigma: f64,
    pub outliers: usize,
    pub classes: usize,
}

/// `n x h` standard normal prototype features.
pub fn draw_prototypes<R: Rng + ?Sized>(n: usize, h: usize, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(n, h, |_, _| rng.sample(StandardNormal))
}

/// Permuted noisy copies of random prototypes plus outliers.
pub fn make_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Instance> {
    let prototypes = draw_prototypes(spec.n, spec.h, rng);
    instance_from_prototypes(&prototypes, spec, rng)
}

/// Builds `spec.m` graphs that each hold every prototype (with Gaussian
/// noise) and `spec.outliers` fresh random nodes, in a uniformly random
/// node order. Prototype `p` has label `p % classes + 1`.
pub fn instance_from_prototypes<R: Rng + ?Sized>(
    prototypes: &DenseMatrix,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<Instance> {
    let (n, h) = prototypes.shape();
    if n < 2 || h < 2 {
        return Err(Error::Parameter(format!(
            "synthetic instances need n >= 2 and h >= 2, got n={n}, h={h}"
        )));
    }
    if spec.classes == 0 {
        return Err(Error::Parameter("need at least one class".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Parameter("noise_sigma must be nonnegative".into()));
    }
    let adj = AdjacencyParams {
        drop_rate: 0.0,
        ..AdjacencyParams::identity(h)
    };
    let total = n + spec.outliers;
    let mut graphs = Vec::with_capacity(spec.m);
    let mut gt = Vec::with_capacity(spec.m);
    for _ in 0..spec.m {
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(rng);
        let mut features = DenseMatrix::zeros(total, h);
        let mut labels = Vec::with_capacity(total);
        let mut slots = Vec::with_capacity(total);
        for (node, &src) in order.iter().enumerate() {
            let row = features.row_mut(node);
            if src < n {
                for (dst, &p) in row.iter_mut().zip(prototypes.row(src)) {
                    let z: f64 = rng.sample(StandardNormal);
                    *dst = p + spec.noise_sigma * z;
                }
                slots.push(Some(src));
            } else {
                for dst in row.iter_mut() {
                    *dst = rng.sample(StandardNormal);
                }
                slots.push(None);
            }
            labels.push(src % spec.classes + 1);
        }
        let adjacency = build_adjacency(&features, &adj, rng)?;
        graphs.push(Graph::new(features, adjacency, labels)?);
        gt.push(slots);
    }
    Ok(Instance {
        graphs,
        gt: Some(gt),
        meta: InstanceMeta {
            m: spec.m,
            n,
            h,
            noise_sigma: spec.noise_sigma,
            outliers: spec.outliers,
            classes: spec.classes,
            seed: 0,
        },
    })
}

impl Instance {
    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::node_count).max().unwrap_or(0)
    }

    /// Writes `meta`, `V_<i>.mat`, `A_<i>.mat`, `Y_<i>.txt` and `gt_<i>.txt`.
    /// Graph, node and slot indices are zero-based.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = &self.meta;
        let meta = format!(
            "m={}\nn={}\nh={}\nnoise_sigma={}\noutliers={}\nclasses={}\nseed={}\n",
            m.m, m.n, m.h, m.noise_sigma, m.outliers, m.classes, m.seed
        );
        write(dir.join("meta"), &meta)?;
        for (i, g) in self.graphs.iter().enumerate() {
            g.features.write_fixture(&dir.join(format!("V_{i}.mat")))?;
            g.adjacency.write_fixture(&dir.join(format!("A_{i}.mat")))?;
            let labels: String = g.labels.iter().map(|l| format!("{l}\n")).collect();
            write(dir.join(format!("Y_{i}.txt")), &labels)?;
            if let Some(gt) = &self.gt {
                let mut text = String::new();
                for (node, slot) in gt[i].iter().enumerate() {
                    if let Some(s) = slot {
                        let _ = writeln!(text, "{node} {s}");
                    }
                }
                write(dir.join(format!("gt_{i}.txt")), &text)?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut meta = InstanceMeta {
            m: 0,
            n: 0,
            h: 0,
            noise_sigma: 0.0,
            outliers: 0,
            classes: 1,
            seed: 0,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected key=value"))?;
            let bad = || Error::parse(i + 1, format!("bad value for {key}"));
            match key.trim() {
                "m" => meta.m = value.trim().parse().map_err(|_| bad())?,
                "n" => meta.n = value.trim().parse().map_err(|_| bad())?,
                "h" => meta.h = value.trim().parse().map_err(|_| bad())?,
                "noise_sigma" => meta.noise_sigma = value.trim().parse().map_err(|_| bad())?,
                "outliers" => meta.outliers = value.trim().parse().map_err(|_| bad())?,
                "classes" => meta.classes = value.trim().parse().map_err(|_| bad())?,
                "seed" => meta.seed = value.trim().parse().map_err(|_| bad())?,
                other => return Err(Error::parse(i + 1, format!("unknown key `{other}`"))),
            }
        }
        let mut graphs = Vec::with_capacity(meta.m);
        let mut gt = Vec::with_capacity(meta.m);
        let mut have_gt = true;
        for i in 0..meta.m {
            let features = DenseMatrix::read_fixture(&dir.join(format!("V_{i}.mat")))?;
            let adjacency = DenseMatrix::read_fixture(&dir.join(format!("A_{i}.mat")))?;
            let labels = read_lines(&dir.join(format!("Y_{i}.txt")), |l| l.parse().ok())?;
            let n_i = features.rows();
            graphs.push(Graph::new(features, adjacency, labels)?);
            let gt_path = dir.join(format!("gt_{i}.txt"));
            if !gt_path.exists() {
                have_gt = false;
                continue;
            }
            let mut slots = vec![None; n_i];
            for (node, slot) in read_lines(&gt_path, |l| {
                let (a, b) = l.split_once(char::is_whitespace)?;
                Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?))
            })? {
                if node >= n_i {
                    return Err(Error::Dimension(format!("gt node {node} outside graph {i}")));
                }
                slots[node] = Some(slot);
            }
            gt.push(slots);
        }
        Ok(Self {
            graphs,
            gt: have_gt.then_some(gt),
            meta,
        })
    }
}

fn write(path: std::path::PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse(l.trim()).ok_or_else(|| Error::parse(i + 1, format!("bad line `{l}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let v = DenseMatrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(cosine_distance(&v).unwrap()[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn orthogonal_rows_have_unit_distance() {
        let v = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(cosine_distance(&v).unwrap()[(0, 1)], 1.0);
    }

    #[test]
    fn cosine_distance_matches_pairwise_loop() {
        let v = draw_prototypes(4, 3, &mut rng(5));
        let d = cosine_distance(&v).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for k in 0..3 {
                    ab += v[(a, k)] * v[(b, k)];
                    aa += v[(a, k)] * v[(a, k)];
                    bb += v[(b, k)] * v[(b, k)];
                }
                let expected = if a == b { 0.0 } else { 1.0 - ab / (aa.sqrt() * bb.sqrt()) };
                assert!((d[(a, b)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let v = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_distance(&v), Err(Error::DegenerateFeature { row: 1 })));
    }

    #[test]
    fn full_drop_rate_empties_adjacency() {
        let v = draw_prototypes(5, 3, &mut rng(1));
        let p = AdjacencyParams {
            drop_rate: 1.0,
            training_mode: true,
            ..AdjacencyParams::identity(3)
        };
        let a = build_adjacency(&v, &p, &mut rng(2)).unwrap();
        assert!(a.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drop_rate_is_ignored_outside_training() {
        let v = draw_prototypes(5, 3, &mut rng(1));
        let p = AdjacencyParams {
            drop_rate: 1.0,
            ..AdjacencyParams::identity(3)
        };
        let a = build_adjacency(&v, &p, &mut rng(2)).unwrap();
        assert!(a.as_slice().iter().filter(|&&x| x > 0.0).count() == 20);
    }

    #[test]
    fn adjacency_matches_scalar_reference() {
        let v = DenseMatrix::from_rows(&[[1.0, 0.5], [-0.3, 2.0], [0.8, -1.1]]).unwrap();
        let p = AdjacencyParams {
            drop_rate: 0.0,
            epsilon: 1e-6,
            ..AdjacencyParams::identity(2)
        };
        let a = build_adjacency(&v, &p, &mut rng(0)).unwrap();
        let row = |i: usize| [v[(i, 0)], v[(i, 1)]];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| row(i)[0] * row(j)[0] + row(i)[1] * row(j)[1])
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                let expected = if i == j {
                    0.0
                } else {
                    let ni = (row(i)[0].powi(2) + row(i)[1].powi(2)).sqrt();
                    let nj = (row(j)[0].powi(2) + row(j)[1].powi(2)).sqrt();
                    let dist = 1.0 - s[j] / (ni * nj);
                    (s[j].exp() / z) / (dist + 1e-6)
                };
                assert!((a[(i, j)] - expected).abs() < 1e-12 * expected.max(1.0));
            }
        }
    }

    #[test]
    fn sample_full_grid_in_row_major_order() {
        let grid = DenseMatrix::from_fn(4, 2, |r, c| (r * 10 + c) as f64);
        let (v, y) = sample_nodes(&grid, 2, 2, &[1, 2, 1, 2], 1).unwrap();
        assert_eq!(v, grid);
        assert_eq!(y, vec![1, 2, 1, 2]);
    }

    #[test]
    fn background_only_mask_fails() {
        let grid = DenseMatrix::zeros(4, 2);
        assert!(matches!(sample_nodes(&grid, 2, 2, &[0; 4], 1), Err(Error::EmptyMask)));
    }

    #[test]
    fn checkerboard_sampling_count() {
        let (h, w, step) = (4, 4, 2);
        let grid = DenseMatrix::from_fn(h * w, 3, |r, c| (r + c) as f64);
        let mask: Vec<usize> = (0..h * w).map(|i| ((i / w + i % w) % 2 == 0) as usize).collect();
        let mut expected = 0;
        for r in 0..h {
            for c in 0..w {
                if r % step == 0 && c % step == 0 && mask[r * w + c] >= 1 {
                    expected += 1;
                }
            }
        }
        let (v, y) = sample_nodes(&grid, h, w, &mask, step).unwrap();
        assert_eq!(v.rows(), expected);
        assert_eq!(y.len(), expected);
    }

    fn spec(noise: f64, outliers: usize) -> SyntheticSpec {
        SyntheticSpec {
            m: 3,
            n: 5,
            h: 4,
            noise_sigma: noise,
            outliers,
            classes: 2,
        }
    }

    #[test]
    fn noiseless_copies_are_exact_permutations() {
        let mut r = rng(3);
        let protos = draw_prototypes(5, 4, &mut r);
        let inst = instance_from_prototypes(&protos, &spec(0.0, 0), &mut r).unwrap();
        let gt = inst.gt.as_ref().unwrap();
        for (g, slots) in inst.graphs.iter().zip(gt) {
            for (node, slot) in slots.iter().enumerate() {
                assert_eq!(g.features.row(node), protos.row(slot.unwrap()));
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = make_synthetic(&spec(0.1, 1), &mut rng(9)).unwrap();
        let b = make_synthetic(&spec(0.1, 1), &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outliers_carry_no_slot() {
        let inst = make_synthetic(&spec(0.0, 2), &mut rng(4)).unwrap();
        for (g, slots) in inst.graphs.iter().zip(inst.gt.as_ref().unwrap()) {
            assert_eq!(g.node_count(), 7);
            assert_eq!(slots.iter().filter(|s| s.is_some()).count(), 5);
        }
    }

    #[test]
    fn instance_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut inst = make_synthetic(&spec(0.2, 1), &mut rng(8)).unwrap();
        inst.meta.seed = 8;
        inst.write_dir(dir.path()).unwrap();
        assert_eq!(Instance::read_dir(dir.path()).unwrap(), inst);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn adjacency_has_zero_diagonal_and_no_negatives(
                n in 2usize..8, h in 2usize..6, drop in 0.0f64..1.0, seed in any::<u64>()
            ) {
                let v = draw_prototypes(n, h, &mut rng(seed));
                let p = AdjacencyParams { drop_rate: drop, training_mode: true, ..AdjacencyParams::identity(h) };
                let a = build_adjacency(&v, &p, &mut rng(seed ^ 1)).unwrap();
                for i in 0..n {
                    prop_assert_eq!(a[(i, i)], 0.0);
                }
                prop_assert!(a.as_slice().iter().all(|&x| x >= 0.0 && x.is_finite()));
            }

            #[test]
            fn adjacency_without_drop_is_deterministic(n in 2usize..8, seed in any::<u64>()) {
                let v = draw_prototypes(n, 3, &mut rng(seed));
                let p = AdjacencyParams { drop_rate: 0.0, training_mode: true, ..AdjacencyParams::identity(3) };
                let a = build_adjacency(&v, &p, &mut rng(1)).unwrap();
                let b = build_adjacency(&v, &p, &mut rng(2)).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn sample_count_non_increasing_along_step_multiples(
                h in 1usize..9, w in 1usize..9, step in 1usize..4, mult in 2usize..4, seed in any::<u64>()
            ) {
                // the coarse lattice is a subset of the fine one
                let mut r = rng(seed);
                let mut mask: Vec<usize> = (0..h * w).map(|_| rand::Rng::random_range(&mut r, 0..3)).collect();
                mask[0] = 1;
                let grid = DenseMatrix::zeros(h * w, 2);
                let count = |s| sample_nodes(&grid, h, w, &mask, s).unwrap().1.len();
                prop_assert!(count(step * mult) <= count(step));
            }

            #[test]
            fn sample_count_non_increasing_on_full_masks(h in 1usize..12, w in 1usize..12, step in 1usize..6) {
                let mask = vec![1; h * w];
                let grid = DenseMatrix::zeros(h * w, 2);
                let count = |s| sample_nodes(&grid, h, w, &mask, s).unwrap().1.len();
                prop_assert!(count(step + 1) <= count(step));
            }
        }
    }
}
