//! Semivariogram estimation and Gaussian-model fitting.
//!
//! Distances between embedding vectors are rescaled to `[0, 1]`, binned at a
//! fixed lag size, and summarized as semivariances `γ(h)`. A Gaussian model
//! `f(h) = n + s·(1 − exp(−h²/(r/2)²))` is fitted by weighted least squares;
//! the fitted range `r` is the influence range used to keep or drop bins.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VariogramError {
    #[error("degenerate embeddings: all points identical, lags cannot be rescaled")]
    DegenerateEmbeddings,
    #[error("insufficient bins: {got} populated, need at least {need}")]
    InsufficientBins { got: usize, need: usize },
    #[error("variogram fit diverged: {0}")]
    FitDiverged(String),
    #[error("invalid variogram input: {0}")]
    Invalid(String),
}

/// Point count above which pair enumeration switches to a seeded uniform
/// subsample, and the pair budget used then.
pub const SUBSAMPLE_POINT_LIMIT: usize = 2_000;
pub const SUBSAMPLE_MAX_PAIRS: usize = 2_000_000;

/// Pairwise embedding distances rescaled to `[0, 1]`.
///
/// Stores the condensed upper triangle (`i < j`); ordered pairs `(i, j)` and
/// `(j, i)` share one entry.
#[derive(Debug, Clone)]
pub struct PairwiseLags {
    n: usize,
    lags: Vec<f64>,
    max_raw: f64,
}

impl PairwiseLags {
    pub fn n_points(&self) -> usize {
        self.n
    }

    /// Largest raw (unscaled) pairwise distance of the batch.
    pub fn max_raw(&self) -> f64 {
        self.max_raw
    }

    /// Rescaled lag between two distinct points.
    pub fn lag(&self, i: usize, j: usize) -> f64 {
        debug_assert_ne!(i, j);
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.lags[condensed_index(self.n, i, j)]
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            ((i + 1)..self.n).map(move |j| (i, j, self.lags[condensed_index(self.n, i, j)]))
        })
    }
}

fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Euclidean distances between embedding vectors, divided by the batch
/// maximum so the lag axis is `[0, 1]`.
pub fn pairwise_lags(points: &[Vec<f64>]) -> Result<PairwiseLags, VariogramError> {
    let denom = max_pairwise_distance(points)?;
    if denom == 0.0 {
        return Err(VariogramError::DegenerateEmbeddings);
    }
    pairwise_lags_with_denominator(points, denom)
}

/// As [`pairwise_lags`] but with an externally fixed rescale denominator
/// (e.g. the labeled-pair maximum reused for prediction pairs); rescaled
/// lags are clamped to 1.
pub fn pairwise_lags_with_denominator(
    points: &[Vec<f64>],
    denom: f64,
) -> Result<PairwiseLags, VariogramError> {
    if points.len() < 2 {
        return Err(VariogramError::Invalid(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if !(denom > 0.0) {
        return Err(VariogramError::DegenerateEmbeddings);
    }
    let n = points.len();
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(VariogramError::Invalid("embedding lengths differ".into()));
    }
    let mut lags = Vec::with_capacity(n * (n - 1) / 2);
    let mut max_raw: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&points[i], &points[j]);
            max_raw = max_raw.max(d);
            lags.push((d / denom).min(1.0));
        }
    }
    Ok(PairwiseLags { n, lags, max_raw })
}

/// Largest pairwise Euclidean distance of a batch.
pub fn max_pairwise_distance(points: &[Vec<f64>]) -> Result<f64, VariogramError> {
    if points.len() < 2 {
        return Err(VariogramError::Invalid(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let mut max = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            max = max.max(euclidean(&points[i], &points[j]));
        }
    }
    Ok(max)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One lag bin of the empirical semivariogram. `gamma` is `None` while the
/// bin is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub center: f64,
    /// Ordered pair count N(h).
    pub count: u64,
    pub gamma: Option<f64>,
}

/// Empirical semivariogram over `[0, 1]` at a fixed lag size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramBins {
    pub lag_size: f64,
    pub bins: Vec<VariogramBin>,
}

impl VariogramBins {
    pub fn populated(&self) -> impl Iterator<Item = &VariogramBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }
}

fn bin_index(lag: f64, lag_size: f64, n_bins: usize) -> usize {
    ((lag / lag_size).floor() as usize).min(n_bins - 1)
}

/// Which (unordered) pairs enter the binning: everything, or a seeded uniform
/// subsample once the point count passes [`SUBSAMPLE_POINT_LIMIT`].
fn pair_subsample(n: usize, seed: u64) -> Option<Vec<(u32, u32)>> {
    if n <= SUBSAMPLE_POINT_LIMIT {
        return None;
    }
    let budget = SUBSAMPLE_MAX_PAIRS / 2; // unordered pairs, counted twice later
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(budget);
    while pairs.len() < budget {
        let i = rng.gen_range(0..n as u32);
        let j = rng.gen_range(0..n as u32);
        if i < j {
            pairs.push((i, j));
        }
    }
    Some(pairs)
}

/// Bins ordered pair squared differences into semivariances:
/// `γ(h) = (1/N(h))·Σᵢ Σ_{j≠i} (Yᵢ − Yⱼ)²` over pairs whose lag falls in
/// the bin (no ½ factor).
pub fn empirical_semivariogram(
    lags: &PairwiseLags,
    values: &[f64],
    lag_size: f64,
) -> Result<VariogramBins, VariogramError> {
    empirical_semivariogram_seeded(lags, values, lag_size, 0)
}

/// [`empirical_semivariogram`] with an explicit seed for the pair subsample
/// applied beyond [`SUBSAMPLE_POINT_LIMIT`] points.
pub fn empirical_semivariogram_seeded(
    lags: &PairwiseLags,
    values: &[f64],
    lag_size: f64,
    seed: u64,
) -> Result<VariogramBins, VariogramError> {
    if values.len() != lags.n_points() {
        return Err(VariogramError::Invalid(format!(
            "{} values for {} points",
            values.len(),
            lags.n_points()
        )));
    }
    if !(lag_size > 0.0 && lag_size <= 1.0) {
        return Err(VariogramError::Invalid(format!(
            "lag_size must be in (0, 1], got {lag_size}"
        )));
    }
    let n_bins = (1.0 / lag_size).ceil() as usize;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0u64; n_bins];
    let mut tally = |i: usize, j: usize, lag: f64| {
        let d = values[i] - values[j];
        let b = bin_index(lag, lag_size, n_bins);
        sums[b] += 2.0 * d * d; // ordered pairs (i,j) and (j,i)
        counts[b] += 2;
    };
    match pair_subsample(lags.n_points(), seed) {
        Some(pairs) => {
            for (i, j) in pairs {
                let (i, j) = (i as usize, j as usize);
                tally(i, j, lags.lag(i, j));
            }
        }
        None => {
            for (i, j, lag) in lags.iter() {
                tally(i, j, lag);
            }
        }
    }
    let bins = (0..n_bins)
        .map(|b| VariogramBin {
            center: (b as f64 + 0.5) * lag_size,
            count: counts[b],
            gamma: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect();
    Ok(VariogramBins { lag_size, bins })
}

/// Fitted Gaussian semivariogram model `f(h) = n + s·(1 − exp(−h²/(r/2)²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn evaluate(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-(h * h) / (self.range / 2.0).powi(2)).exp())
    }
}

/// Fit result: the model plus diagnostics for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub model: VariogramModel,
    /// Weighted sum of squared residuals at the fitted parameters.
    pub residual: f64,
    /// True when the range was pinned at the lower search bound (flat
    /// semivariogram plateau).
    pub range_pinned_low: bool,
}

const RANGE_MIN: f64 = 0.01;

/// Weighted least-squares fit of the Gaussian model to populated bins.
///
/// Bin weights are the pair counts N(h). The sill (and nugget, when free)
/// are solved in closed form for each candidate range; the range itself is
/// found by shrinking-step descent from the three starts 0.2 / 0.5 / 0.8,
/// which is deterministic and needs no random restarts.
pub fn fit_gaussian_model(
    bins: &VariogramBins,
    fix_nugget_zero: bool,
) -> Result<VariogramFit, VariogramError> {
    let pts: Vec<(f64, f64, f64)> = bins
        .populated()
        .map(|b| (b.center, b.gamma.expect("populated bin has gamma"), b.count as f64))
        .collect();
    let need = if fix_nugget_zero { 2 } else { 3 };
    if pts.len() < need {
        return Err(VariogramError::InsufficientBins {
            got: pts.len(),
            need,
        });
    }

    // Degenerate fallback sill: keeps s > 0 while the curve is effectively
    // flat (fitting data with no increasing structure).
    const SILL_FLOOR: f64 = 1e-12;

    // Closed-form weighted LS for the linear parameters at fixed range,
    // constrained to n ≥ 0 and s > 0.
    let solve_linear = |r: f64| -> (f64, f64) {
        let basis = |h: f64| 1.0 - (-(h * h) / (r / 2.0).powi(2)).exp();
        let sill_only = || {
            let (mut num, mut den) = (0.0, 0.0);
            for &(h, g, w) in &pts {
                let b = basis(h);
                num += w * g * b;
                den += w * b * b;
            }
            if den > 0.0 {
                (num / den).max(SILL_FLOOR)
            } else {
                SILL_FLOOR
            }
        };
        if fix_nugget_zero {
            return (0.0, sill_only());
        }
        // normal equations for γ ≈ n·1 + s·b
        let (mut sw, mut sb, mut sbb, mut sg, mut sgb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(h, g, w) in &pts {
            let b = basis(h);
            sw += w;
            sb += w * b;
            sbb += w * b * b;
            sg += w * g;
            sgb += w * g * b;
        }
        let det = sw * sbb - sb * sb;
        if det.abs() < 1e-30 {
            return (0.0, sill_only());
        }
        let n = (sbb * sg - sb * sgb) / det;
        let s = (sw * sgb - sb * sg) / det;
        if n < 0.0 {
            (0.0, sill_only())
        } else if s <= 0.0 {
            // decreasing data: best admissible fit is a flat curve at the mean
            ((sg / sw).max(0.0), SILL_FLOOR)
        } else {
            (n, s)
        }
    };

    let objective = |r: f64| -> (f64, f64, f64) {
        let (n, s) = solve_linear(r);
        let model = VariogramModel {
            nugget: n,
            sill: s,
            range: r,
        };
        let j: f64 = pts
            .iter()
            .map(|&(h, g, w)| {
                let e = g - model.evaluate(h);
                w * e * e
            })
            .sum();
        (j, n, s)
    };

    let mut best: Option<(f64, f64, f64, f64)> = None; // (J, r, n, s)
    for start in [0.2, 0.5, 0.8] {
        let mut r = start;
        let mut cur = objective(r);
        let mut step = 0.1;
        while step > 1e-12 {
            let mut moved = false;
            for cand in [r - step, r + step] {
                let cand = cand.clamp(RANGE_MIN, 1.0);
                if cand == r {
                    continue;
                }
                let trial = objective(cand);
                if trial.0 < cur.0 {
                    cur = trial;
                    r = cand;
                    moved = true;
                }
            }
            if !moved {
                step /= 2.0;
            }
        }
        let (j, n, s) = cur;
        if best.as_ref().map_or(true, |b| j < b.0) {
            best = Some((j, r, n, s));
        }
    }

    let (residual, range, nugget, sill) =
        best.ok_or_else(|| VariogramError::FitDiverged("no fit candidates".into()))?;
    if !residual.is_finite() {
        return Err(VariogramError::FitDiverged(format!(
            "non-finite residual {residual}"
        )));
    }
    Ok(VariogramFit {
        model: VariogramModel {
            nugget,
            sill,
            range,
        },
        residual,
        range_pinned_low: range <= RANGE_MIN,
    })
}

/// Gaussian summary of the squared pair differences inside one lag bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinDistribution {
    pub bin: usize,
    pub center: f64,
    /// Mean of squared pair differences.
    pub mu: f64,
    /// Population standard deviation of squared pair differences.
    pub sigma: f64,
    /// Ordered pair count.
    pub count: u64,
    /// Bin center within the fitted range and count at least `min_pairs`.
    pub valid: bool,
}

/// Per-bin Gaussian statistics of squared value differences, keeping only
/// bins whose center lies within the fitted influence range and that hold at
/// least `min_pairs` ordered pairs.
pub fn bin_distributions(
    lags: &PairwiseLags,
    values: &[f64],
    model: &VariogramModel,
    lag_size: f64,
    min_pairs: u64,
) -> Result<Vec<BinDistribution>, VariogramError> {
    bin_distributions_seeded(lags, values, model, lag_size, min_pairs, 0)
}

pub fn bin_distributions_seeded(
    lags: &PairwiseLags,
    values: &[f64],
    model: &VariogramModel,
    lag_size: f64,
    min_pairs: u64,
    seed: u64,
) -> Result<Vec<BinDistribution>, VariogramError> {
    if values.len() != lags.n_points() {
        return Err(VariogramError::Invalid(format!(
            "{} values for {} points",
            values.len(),
            lags.n_points()
        )));
    }
    let n_bins = (1.0 / lag_size).ceil() as usize;
    let mut sq_diffs: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    let mut tally = |i: usize, j: usize, lag: f64| {
        let d = values[i] - values[j];
        sq_diffs[bin_index(lag, lag_size, n_bins)].push(d * d);
    };
    match pair_subsample(lags.n_points(), seed) {
        Some(pairs) => {
            for (i, j) in pairs {
                let (i, j) = (i as usize, j as usize);
                tally(i, j, lags.lag(i, j));
            }
        }
        None => {
            for (i, j, lag) in lags.iter() {
                tally(i, j, lag);
            }
        }
    }
    Ok(sq_diffs
        .into_iter()
        .enumerate()
        .map(|(b, diffs)| {
            let center = (b as f64 + 0.5) * lag_size;
            let count = 2 * diffs.len() as u64; // ordered pairs
            let (mu, sigma) = if diffs.is_empty() {
                (0.0, 0.0)
            } else {
                let mu = diffs.iter().sum::<f64>() / diffs.len() as f64;
                let var = diffs.iter().map(|z| (z - mu) * (z - mu)).sum::<f64>() / diffs.len() as f64;
                (mu, var.sqrt())
            };
            BinDistribution {
                bin: b,
                center,
                mu,
                sigma,
                count,
                valid: center <= model.range && count >= min_pairs,
            }
        })
        .collect())
}

/// Pair index lists per bin (ordered-pair count alongside), for callers that
/// need the raw pairs (the training loss differentiates through them).
pub fn bin_pair_indices(
    lags: &PairwiseLags,
    lag_size: f64,
    seed: u64,
) -> Vec<Vec<(u32, u32)>> {
    let n_bins = (1.0 / lag_size).ceil() as usize;
    let mut out: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_bins];
    match pair_subsample(lags.n_points(), seed) {
        Some(pairs) => {
            for (i, j) in pairs {
                let lag = lags.lag(i as usize, j as usize);
                out[bin_index(lag, lag_size, n_bins)].push((i, j));
            }
        }
        None => {
            for (i, j, lag) in lags.iter() {
                out[bin_index(lag, lag_size, n_bins)].push((i as u32, j as u32));
            }
        }
    }
    out
}
