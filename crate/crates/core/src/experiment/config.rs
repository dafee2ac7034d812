use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::universe::universe_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    FitUniverse,
    Tta,
    OracleCompare,
    Sweep,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::FitUniverse, Mode::Tta, Mode::OracleCompare, Mode::Sweep];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FitUniverse => "fit-universe",
            Mode::Tta => "tta",
            Mode::OracleCompare => "oracle-compare",
            Mode::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected fit-universe, tta, oracle-compare or sweep)"))
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub classes: usize,
    pub step: usize,
    pub d: usize,
    /// Target-domain noise levels.
    pub noise_sigma: Vec<f64>,
    /// Noise of the source instance the universe is fitted on.
    pub source_sigma: f64,
    pub outliers: usize,
    /// Replace each target adjacency by `(A + A^T) / 2`.
    pub symmetric_adjacency: bool,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub sinkhorn_iters: usize,
    pub theta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub fit_steps: usize,
    pub adapt_steps: usize,
    pub miter: usize,
    pub drop_rate: f64,
    pub out_dir: PathBuf,
    /// Where `tta` looks for fitted embeddings; defaults to `out_dir`.
    pub embedding_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            m: 4,
            n: 10,
            h: 256,
            classes: 2,
            step: 10,
            d: 120,
            noise_sigma: vec![0.0],
            source_sigma: 0.0,
            outliers: 0,
            symmetric_adjacency: false,
            seeds: vec![0],
            tau: 0.05,
            sinkhorn_iters: 20,
            theta: 1e-5,
            lambda: 1.0,
            gamma: 2.0,
            alpha: 1e-3,
            lr: 1e-3,
            fit_steps: 200,
            adapt_steps: 50,
            miter: 50,
            drop_rate: 0.1,
            out_dir: PathBuf::from("out"),
            embedding_dir: None,
        }
    }
}

/// Defaults that have no published counterpart; `--help` marks them.
pub const INVENTED_DEFAULTS: &[&str] = &[
    "lambda", "gamma", "alpha", "drop_rate", "n", "classes", "step", "source_sigma", "fit_steps",
    "adapt_steps", "miter", "symmetric_adjacency",
];

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse `{}`", s.trim())))
        .collect()
}

fn parse_seeds(value: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = value.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
        if a >= b {
            return Err(format!("empty seed range {a}..{b}"));
        }
        return Ok((a..b).collect());
    }
    parse_list(value)
}

fn scalar<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn fmt_list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// `key=value` lines that parse back to the same config.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        if let Some(mode) = self.mode {
            lines.push(format!("mode={mode}"));
        }
        let seeds = match self.seeds.as_slice() {
            [first, .., last] if self.seeds.windows(2).all(|w| w[1] == w[0] + 1) => {
                format!("{first}..{}", last + 1)
            }
            _ => fmt_list(&self.seeds),
        };
        lines.extend([
            format!("m={}", self.m),
            format!("n={}", self.n),
            format!("h={}", self.h),
            format!("classes={}", self.classes),
            format!("step={}", self.step),
            format!("d={}", self.d),
            format!("noise_sigma={}", fmt_list(&self.noise_sigma)),
            format!("source_sigma={}", self.source_sigma),
            format!("outliers={}", self.outliers),
            format!("symmetric_adjacency={}", self.symmetric_adjacency),
            format!("seeds={seeds}"),
            format!("tau={}", self.tau),
            format!("sinkhorn_iters={}", self.sinkhorn_iters),
            format!("theta={}", self.theta),
            format!("lambda={}", self.lambda),
            format!("gamma={}", self.gamma),
            format!("alpha={}", self.alpha),
            format!("lr={}", self.lr),
            format!("fit_steps={}", self.fit_steps),
            format!("adapt_steps={}", self.adapt_steps),
            format!("miter={}", self.miter),
            format!("drop_rate={}", self.drop_rate),
            format!("out_dir={}", self.out_dir.display()),
        ]);
        if let Some(dir) = &self.embedding_dir {
            lines.push(format!("embedding_dir={}", dir.display()));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Checks cross-field invariants; the error names the offending key.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |key: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("{key} must be positive, got {v}")))
            }
        };
        let nonneg = |key: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("{key} must be nonnegative, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        nonneg("theta", self.theta)?;
        nonneg("lambda", self.lambda)?;
        nonneg("gamma", self.gamma)?;
        nonneg("alpha", self.alpha)?;
        nonneg("lr", self.lr)?;
        nonneg("source_sigma", self.source_sigma)?;
        for &s in &self.noise_sigma {
            nonneg("noise_sigma", s)?;
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(("drop_rate", format!("drop_rate must lie in [0, 1], got {}", self.drop_rate)));
        }
        for (key, v, min) in [("m", self.m, 1), ("n", self.n, 2), ("h", self.h, 2), ("classes", self.classes, 1), ("step", self.step, 1), ("sinkhorn_iters", self.sinkhorn_iters, 1)] {
            if v < min {
                return Err((key, format!("{key} must be at least {min}, got {v}")));
            }
        }
        if self.noise_sigma.is_empty() {
            return Err(("noise_sigma", "noise_sigma needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "seeds needs at least one value".into()));
        }
        if self.d < self.n + self.outliers {
            return Err((
                "d",
                format!("d={} is smaller than n + outliers = {}", self.d, self.n + self.outliers),
            ));
        }
        Ok(())
    }
}

/// Parses `key=value` lines; `#` starts a comment. Keys left out keep their
/// defaults and `d=auto` becomes `universe_size(classes, step)`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut d_auto: Option<usize> = None;
    let mut lines_of: Vec<(&'static str, usize)> = Vec::new();
    let err = |line: usize, message: String| Error::Parse { line, message };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let set = (|| -> std::result::Result<&'static str, String> {
            Ok(match key {
                "mode" => {
                    cfg.mode = Some(value.parse()?);
                    "mode"
                }
                "m" => { cfg.m = scalar(value)?; "m" }
                "n" => { cfg.n = scalar(value)?; "n" }
                "h" => { cfg.h = scalar(value)?; "h" }
                "classes" => { cfg.classes = scalar(value)?; "classes" }
                "step" => { cfg.step = scalar(value)?; "step" }
                "d" => {
                    if value == "auto" {
                        d_auto = Some(line);
                    } else {
                        d_auto = None;
                        cfg.d = scalar(value)?;
                    }
                    "d"
                }
                "noise_sigma" => { cfg.noise_sigma = parse_list(value)?; "noise_sigma" }
                "source_sigma" => { cfg.source_sigma = scalar(value)?; "source_sigma" }
                "outliers" => { cfg.outliers = scalar(value)?; "outliers" }
                "symmetric_adjacency" => { cfg.symmetric_adjacency = scalar(value)?; "symmetric_adjacency" }
                "seeds" => { cfg.seeds = parse_seeds(value)?; "seeds" }
                "tau" => { cfg.tau = scalar(value)?; "tau" }
                "sinkhorn_iters" => { cfg.sinkhorn_iters = scalar(value)?; "sinkhorn_iters" }
                "theta" => { cfg.theta = scalar(value)?; "theta" }
                "lambda" => { cfg.lambda = scalar(value)?; "lambda" }
                "gamma" => { cfg.gamma = scalar(value)?; "gamma" }
                "alpha" => { cfg.alpha = scalar(value)?; "alpha" }
                "lr" => { cfg.lr = scalar(value)?; "lr" }
                "fit_steps" => { cfg.fit_steps = scalar(value)?; "fit_steps" }
                "adapt_steps" => { cfg.adapt_steps = scalar(value)?; "adapt_steps" }
                "miter" => { cfg.miter = scalar(value)?; "miter" }
                "drop_rate" => { cfg.drop_rate = scalar(value)?; "drop_rate" }
                "out_dir" => { cfg.out_dir = PathBuf::from(value); "out_dir" }
                "embedding_dir" => { cfg.embedding_dir = Some(PathBuf::from(value)); "embedding_dir" }
                _ => return Err(format!("unknown key `{key}`")),
            })
        })()
        .map_err(|m| err(line, m))?;
        lines_of.push((set, line));
    }
    let line_of = |key: &str| {
        lines_of.iter().rev().find(|(k, _)| *k == key).map_or(0, |&(_, l)| l)
    };
    if let Some(line) = d_auto {
        cfg.d = universe_size(cfg.classes, cfg.step).map_err(|e| err(line, e.to_string()))?;
    }
    cfg.check().map_err(|(key, message)| {
        // a cross-field violation points at the last line touching any key involved
        let line = if key == "d" {
            ["d", "n", "outliers"].iter().map(|k| line_of(k)).max().unwrap_or(0)
        } else {
            line_of(key)
        };
        err(line, message)
    })?;
    Ok(cfg)
}
