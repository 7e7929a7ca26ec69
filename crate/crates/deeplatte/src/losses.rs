//! The five loss terms and their weighted combination.
//!
//! `L = L_pred + α·L_sp + β·L_ae + λ·L_stc + η·L_ac` with
//! `L_sp` the L1 norm of the sparse-layer weights, `L_ae` the autoencoder
//! reconstruction MSE, `L_stc` the spatiotemporal representation constraint,
//! and `L_ac` the semivariogram-guided KL divergence between label-pair and
//! prediction-pair Gaussians per lag bin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError, Var};
use crate::variogram::BinDistribution;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty label set: the mask selects no cells")]
    EmptyLabelSet,
    #[error("non-finite loss term {term}: {value}")]
    NonFinite { term: &'static str, value: f64 },
}

/// Added in quadrature to both σ values before any KL evaluation, so bins of
/// near-identical values cannot divide by ~0.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Hyper-parameters of the total loss. `lambda1`/`lambda2` weight the spatial
/// and temporal halves inside the representation constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 5.0,
            lambda: 5.0,
            eta: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::NonFinite { term: name, value: v });
            }
        }
        Ok(())
    }
}

/// Neighborhood extents for the representation constraint: Chebyshev rings
/// `1..=k_s` in space, `±1..=k_t` steps in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodSpec {
    pub k_s: usize,
    pub k_t: usize,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec { k_s: 1, k_t: 1 }
    }
}

/// L1 penalty over the sparse-layer weights: `Σ_p |w_p|`.
pub fn loss_sp<'t>(weights: Var<'t>) -> Var<'t> {
    weights.abs().sum()
}

/// Autoencoder reconstruction loss: MSE over all entries.
pub fn loss_ae<'t>(x_sp: Var<'t>, x_hat: Var<'t>) -> Result<Var<'t>, LossError> {
    Ok(x_hat.sub(x_sp)?.square().mean())
}

/// Representation constraint over embeddings `[T,H,W,C]`: ordered neighbor
/// pairs, spatial rings weighted `λ₁/k`, temporal lags weighted `λ₂/k`, each
/// pair contributing the channel-mean squared difference.
pub fn loss_stc<'t>(
    embeddings: Var<'t>,
    spec: &NeighborhoodSpec,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var<'t>, LossError> {
    let spatial = embeddings.stc_spatial(spec.k_s)?.scale(lambda1);
    let temporal = embeddings.stc_temporal(spec.k_t)?.scale(lambda2);
    Ok(spatial.add(temporal)?)
}

/// Supervised loss on labeled cells: `(1/m)·Σ_mask (y − ŷ)²`.
///
/// `predictions` may have any shape; `labels` and `mask` are flat and of the
/// same total length.
pub fn loss_pred<'t>(
    predictions: Var<'t>,
    labels: &Tensor,
    mask: &[bool],
) -> Result<Var<'t>, LossError> {
    let n = predictions.value().len();
    if labels.len() != n || mask.len() != n {
        return Err(TensorError::Shape(format!(
            "predictions ({n}), labels ({}) and mask ({}) lengths differ",
            labels.len(),
            mask.len()
        ))
        .into());
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(LossError::EmptyLabelSet);
    }
    let selected: Vec<f64> = idx.iter().map(|&i| labels.data()[i]).collect();
    let y = predictions
        .tape
        .constant(Tensor::from_vec_unchecked(&[idx.len()], selected));
    let flat = predictions.reshape(&[n])?;
    Ok(flat.gather_rows(&idx)?.sub(y)?.square().mean())
}

/// KL divergence between two Gaussians,
/// `½·(log(σ̂²/σ²) − 1 + (σ² + (μ−μ̂)²)/σ̂²)`, labels first.
pub fn kl_gaussian(mu_y: f64, sigma_y: f64, mu_hat: f64, sigma_hat: f64) -> Result<f64, LossError> {
    for (term, v) in [
        ("mu_y", mu_y),
        ("sigma_y", sigma_y),
        ("mu_hat", mu_hat),
        ("sigma_hat", sigma_hat),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { term, value: v });
        }
    }
    if sigma_y <= 0.0 || sigma_hat <= 0.0 {
        return Err(LossError::NonFinite {
            term: "sigma",
            value: sigma_y.min(sigma_hat),
        });
    }
    let (sy2, sh2) = (sigma_y * sigma_y, sigma_hat * sigma_hat);
    Ok(0.5 * ((sh2 / sy2).ln() - 1.0 + (sy2 + (mu_y - mu_hat).powi(2)) / sh2))
}

/// Tape form of [`kl_gaussian`] with the label side held constant, so
/// gradients flow only through the prediction statistics.
pub fn kl_gaussian_var<'t>(
    mu_y: f64,
    sigma_y: f64,
    mu_hat: Var<'t>,
    sigma_hat: Var<'t>,
) -> Result<Var<'t>, LossError> {
    let sy2 = sigma_y * sigma_y;
    let sh2 = sigma_hat.square();
    let log_ratio = sh2.ln()?.add_scalar(-sy2.ln());
    let num = mu_hat.add_scalar(-mu_y).square().add_scalar(sy2);
    let frac = num.mul(sh2.recip()?)?;
    Ok(log_ratio.add_scalar(-1.0).add(frac)?.scale(0.5))
}

/// One lag bin's Gaussian summaries on the label and prediction sides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinPair {
    pub label: BinDistribution,
    pub prediction: BinDistribution,
}

impl BinPair {
    /// Valid when both sides pass the population and range cuts.
    pub fn valid(&self) -> bool {
        self.label.valid && self.prediction.valid
    }
}

/// Autocorrelation loss: sum of per-bin KL divergences over valid bins, with
/// both σ values floored in quadrature by [`SIGMA_FLOOR`]. Returns the loss
/// and a warning flag that is set when no bin was valid.
pub fn loss_ac(bins: &[BinPair]) -> Result<(f64, bool), LossError> {
    let mut total = 0.0;
    let mut any = false;
    for pair in bins.iter().filter(|p| p.valid()) {
        any = true;
        total += kl_gaussian(
            pair.label.mu,
            sigma_floored(pair.label.sigma),
            pair.prediction.mu,
            sigma_floored(pair.prediction.sigma),
        )?;
    }
    Ok((total, !any))
}

/// σ with the floor added in quadrature.
pub fn sigma_floored(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_FLOOR * SIGMA_FLOOR).sqrt()
}

/// Differentiable Gaussian statistics (mean, floored σ) of squared pair
/// differences of `values` at the given index pairs.
pub fn gaussian_stats_of_pairs<'t>(
    values: Var<'t>,
    pairs: &[(u32, u32)],
) -> Result<(Var<'t>, Var<'t>), LossError> {
    let z = values.pair_sq_diff(pairs)?;
    let mu = z.mean();
    let variance = z.sub(mu)?.square().mean();
    let sigma = variance.add_scalar(SIGMA_FLOOR * SIGMA_FLOOR).sqrt()?;
    Ok((mu, sigma))
}

/// The recorded value of each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pred: f64,
    pub sp: f64,
    pub ae: f64,
    pub stc: f64,
    pub ac: f64,
}

/// Weighted total `L_pred + α·L_sp + β·L_ae + λ·L_stc + η·L_ac`.
pub fn loss_total(parts: &LossParts, weights: &LossWeights) -> Result<f64, LossError> {
    for (term, v) in [
        ("pred", parts.pred),
        ("sp", parts.sp),
        ("ae", parts.ae),
        ("stc", parts.stc),
        ("ac", parts.ac),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { term, value: v });
        }
    }
    Ok(parts.pred
        + weights.alpha * parts.sp
        + weights.beta * parts.ae
        + weights.lambda * parts.stc
        + weights.eta * parts.ac)
}
