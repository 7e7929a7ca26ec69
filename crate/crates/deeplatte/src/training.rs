//! Training orchestration: autoencoder pretraining, joint optimization of the
//! full loss, per-epoch variogram refitting, early stopping, and fine-tuning
//! on later periods with split-exclusivity checks.


use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::grid::{FeatureGrid, GridError, LabelGrid, Splits};
use crate::losses::{
    gaussian_stats_of_pairs, kl_gaussian_var, loss_ae, loss_pred, loss_sp, loss_stc,
    sigma_floored, LossError, LossParts, LossWeights, NeighborhoodSpec,
};
use crate::network::Model;
use crate::variogram::{
    bin_distributions_seeded, bin_pair_indices, empirical_semivariogram_seeded, fit_gaussian_model,
    max_pairwise_distance, pairwise_lags_with_denominator, VariogramFit,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: loss term {term} became {value}")]
    Divergence { term: String, value: f64 },
    #[error("split leak: {0} new test cells were train cells of an earlier period")]
    SplitLeak(usize),
    #[error("no labeled training cells")]
    EmptyLabelSet,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Optimization settings. Defaults follow the reference setup: learning rate
/// 0.001, early stopping with patience 10, lag size 0.1, at least 5 pairs per
/// valid bin, variogram refit every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    /// Refit the embedding-space variogram every this many epochs; the fitted
    /// range is frozen in between.
    pub variogram_refit_every: usize,
    pub lag_size: f64,
    pub min_pairs: u64,
    /// Autoencoder pretraining epochs run by the pipeline before joint training.
    pub pretrain_epochs: usize,
    /// Full-batch learning rate used during pretraining.
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr: 0.001,
            max_epochs: 50,
            patience: 10,
            batch: 1,
            variogram_refit_every: 1,
            lag_size: 0.1,
            min_pairs: 5,
            pretrain_epochs: 200,
            pretrain_lr: 0.005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0) || self.patience == 0 || self.batch == 0 || self.variogram_refit_every == 0
        {
            return Err(TrainError::Divergence {
                term: "config".into(),
                value: self.lr,
            });
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// One epoch's record: mean loss parts over optimizer steps, validation RMSE,
/// the variogram parameters in effect, and the live feature count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_pred: f64,
    pub loss_sp: f64,
    pub loss_ae: f64,
    pub loss_stc: f64,
    pub loss_ac: f64,
    pub loss_total: f64,
    pub val_rmse: f64,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
    pub selected_features: usize,
    /// Set when the autocorrelation loss found no valid bin in some step.
    pub ac_warning: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    /// One entry per successful variogram refit, in epoch order.
    pub refits: Vec<EpochRefit>,
}

/// Empirical bins and fitted model of one refit epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRefit {
    pub epoch: usize,
    pub bins: crate::variogram::VariogramBins,
    pub fit: VariogramFit,
}

/// RMSE and R² over masked entries. R² is undefined (None) for
/// zero-variance labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub r2: Option<f64>,
}

/// `rmse = √(mean (y−ŷ)²)`, `r2 = 1 − SS_res/SS_tot` about the masked mean.
pub fn evaluate(predictions: &[f64], labels: &[f64], mask: &[bool]) -> Result<Metrics, TrainError> {
    if predictions.len() != labels.len() || labels.len() != mask.len() {
        return Err(TensorError::Shape(format!(
            "evaluate length mismatch: {} / {} / {}",
            predictions.len(),
            labels.len(),
            mask.len()
        ))
        .into());
    }
    let mut m = 0usize;
    let (mut ss_res, mut mean) = (0.0, 0.0);
    for i in 0..labels.len() {
        if mask[i] {
            m += 1;
            mean += labels[i];
            ss_res += (labels[i] - predictions[i]).powi(2);
        }
    }
    if m == 0 {
        return Err(TrainError::EmptyLabelSet);
    }
    mean /= m as f64;
    let mut ss_tot = 0.0;
    for i in 0..labels.len() {
        if mask[i] {
            ss_tot += (labels[i] - mean).powi(2);
        }
    }
    let rmse = (ss_res / m as f64).sqrt();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Metrics { rmse, r2 })
}

/// Adaptive-moment gradient descent with bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(model: &Model, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (_, param)) in model.params_mut().into_iter().enumerate() {
            let g = grads[slot].data();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = param.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales the gradient set so its global L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

const GRAD_CLIP_NORM: f64 = 5.0;

/// Per-time combined feature frames for cheap window assembly.
struct FrameCache {
    frames: Vec<Tensor>, // each [H·W, P]
    h: usize,
    w: usize,
    p: usize,
}

impl FrameCache {
    fn new(features: &FeatureGrid) -> Self {
        FrameCache {
            frames: (0..features.time_steps).map(|t| features.frame(t)).collect(),
            h: features.spec.height,
            w: features.spec.width,
            p: features.channels(),
        }
    }

    /// Window `[T', H, W, P]` ending at time `t_final` (inclusive).
    fn window(&self, t_final: usize, t_prime: usize) -> Tensor {
        let cells = self.h * self.w;
        let mut data = Vec::with_capacity(t_prime * cells * self.p);
        for t in (t_final + 1 - t_prime)..=t_final {
            data.extend_from_slice(self.frames[t].data());
        }
        Tensor::from_vec_unchecked(&[t_prime, self.h, self.w, self.p], data)
    }

    /// All rows `[T·H·W, P]` stacked, for scaler fitting and pretraining.
    fn all_rows(&self) -> Tensor {
        let cells = self.h * self.w;
        let mut data = Vec::with_capacity(self.frames.len() * cells * self.p);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Tensor::from_vec_unchecked(&[self.frames.len() * cells, self.p], data)
    }
}

/// Pretrains encoder and decoder on the reconstruction loss alone; the sparse
/// layer and every other block stay untouched. Returns the per-epoch loss.
pub fn pretrain_autoencoder(
    model: &mut Model,
    features: &FeatureGrid,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>, TrainError> {
    let cache = FrameCache::new(features);
    if model.prior_train_cells.is_empty() {
        model.scaler = crate::network::FeatureScaler::fit(&cache.all_rows());
    }
    let rows = cache.all_rows();
    let ae_slots: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter_map(|(i, (name, _))| name.starts_with("ae.").then_some(i))
        .collect();
    let mut adam = Adam::new(model, lr);
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let tape = Tape::new();
        let vars = model.register(&tape);
        let x = tape.constant(rows.clone());
        let mean = tape.constant(model.scaler.mean.clone());
        let inv_std = tape.constant(model.scaler.inv_std.clone());
        let x_norm = x.sub(mean)?.mul(inv_std)?;
        let x_sp = vars.sparse_forward(x_norm)?;
        let e = vars.encode(x_sp)?;
        let x_hat = vars.decode(e)?;
        let loss = loss_ae(x_sp, x_hat)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(TrainError::Divergence {
                term: "ae".into(),
                value,
            });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let ordered = vars.ordered();
        let mut grad_tensors: Vec<Tensor> = ordered
            .iter()
            .enumerate()
            .map(|(i, var)| {
                if ae_slots.contains(&i) {
                    grads.get(*var)
                } else {
                    Tensor::zeros(&var.shape())
                }
            })
            .collect();
        clip_global_norm(&mut grad_tensors, GRAD_CLIP_NORM);
        adam.step(model, &grad_tensors);
    }
    Ok(curve)
}

/// The variogram state frozen between refits.
#[derive(Debug, Clone)]
struct FrozenVariogram {
    fit: Option<VariogramFit>,
}

/// Embeddings and labels of train cells at every window's final time,
/// collected during the evaluation pass and consumed by the next refit.
struct RefitSample {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
}

/// Trains the full pipeline on one period. Returns the history; the model is
/// left at the best-validation checkpoint.
pub fn train(
    model: &mut Model,
    features: &FeatureGrid,
    labels: &LabelGrid,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptyLabelSet);
    }
    let history = run_training(model, features, labels, splits, cfg)?;
    model.prior_train_cells.extend(splits.train.iter().copied());
    Ok(history)
}

fn run_training(
    model: &mut Model,
    features: &FeatureGrid,
    labels: &LabelGrid,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let t_prime = model.config.window;
    let (h, w) = (features.spec.height, features.spec.width);
    let cells = h * w;
    if features.time_steps < t_prime {
        return Err(TensorError::Shape(format!(
            "{} time steps cannot host windows of length {t_prime}",
            features.time_steps
        ))
        .into());
    }
    let windows: Vec<usize> = (t_prime - 1..features.time_steps).collect();
    let cache = FrameCache::new(features);
    if model.prior_train_cells.is_empty() && model.scaler.mean.iter().all(|v| *v == 0.0) {
        model.scaler = crate::network::FeatureScaler::fit(&cache.all_rows());
    }

    let train_cells: Vec<usize> = splits.train.iter().map(|&(r, c)| r * w + c).collect();
    let val_cells: Vec<usize> = splits.val.iter().map(|&(r, c)| r * w + c).collect();
    let neighborhood = NeighborhoodSpec {
        k_s: model.config.k_s,
        k_t: model.config.k_t,
    };
    // normalizers that make λ grid-size-free: ordered pair counts of the two
    // smoothness sums
    let stc_norm = stc_pair_counts(t_prime, h, w, &neighborhood);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.lr);
    let mut frozen = FrozenVariogram { fit: None };
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stale_epochs = 0usize;

    // initial pass: validation baseline state and the first variogram sample
    let (initial_val, mut refit_sample) =
        eval_pass(model, &cache, labels, &windows, &train_cells, &val_cells, t_prime)?;
    if !model.prior_train_cells.is_empty() && initial_val.is_finite() {
        // fine-tuning: the carried-in parameters are a candidate checkpoint,
        // so a continuation that never improves returns them unchanged
        best = Some((
            initial_val,
            0,
            model.params().into_iter().map(|(_, t)| t.clone()).collect(),
        ));
    }

    for epoch in 0..cfg.max_epochs {
        if epoch % cfg.variogram_refit_every == 0 {
            if let Some((bins, fit)) = refit_variogram(&refit_sample, cfg) {
                history.refits.push(EpochRefit {
                    epoch,
                    bins,
                    fit: fit.clone(),
                });
                frozen.fit = Some(fit);
            }
        }

        let mut order = windows.clone();
        shuffle(&mut order, &mut rng);
        let mut part_sums = LossParts {
            pred: 0.0,
            sp: 0.0,
            ae: 0.0,
            stc: 0.0,
            ac: 0.0,
        };
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        let mut ac_warning = false;

        let mut batch_grads: Option<Vec<Tensor>> = None;
        let mut batch_count = 0usize;
        for (widx, &t_final) in order.iter().enumerate() {
            let tape = Tape::new();
            let vars = model.register(&tape);
            let window = cache.window(t_final, t_prime);
            let out = model.forward_window(&vars, &tape, &window)?;

            // supervised term on train cells labeled at the window's final time
            let label_frame = &labels.values.data()[t_final * cells..(t_final + 1) * cells];
            let mask_frame = &labels.mask[t_final * cells..(t_final + 1) * cells];
            let labeled_train: Vec<usize> = train_cells
                .iter()
                .copied()
                .filter(|&c| mask_frame[c])
                .collect();
            let pred_term = if labeled_train.is_empty() {
                tape.constant(Tensor::scalar(0.0))
            } else {
                let mut mask = vec![false; cells];
                for &c in &labeled_train {
                    mask[c] = true;
                }
                let frame = Tensor::from_vec_unchecked(&[cells], label_frame.to_vec());
                loss_pred(out.prediction, &frame, &mask)?
            };

            let mut total = pred_term;
            let mut parts = LossParts {
                pred: total.item()?,
                sp: 0.0,
                ae: 0.0,
                stc: 0.0,
                ac: 0.0,
            };
            if cfg.weights.alpha > 0.0 {
                let sp = loss_sp(vars.sparse_weights);
                parts.sp = sp.item()?;
                total = total.add(sp.scale(cfg.weights.alpha))?;
            }
            if cfg.weights.beta > 0.0 {
                let ae = loss_ae(out.x_sp, out.x_hat)?;
                parts.ae = ae.item()?;
                total = total.add(ae.scale(cfg.weights.beta))?;
            }
            if cfg.weights.lambda > 0.0 {
                let stc = loss_stc(
                    out.embeddings,
                    &neighborhood,
                    cfg.weights.lambda1 / stc_norm.0,
                    cfg.weights.lambda2 / stc_norm.1,
                )?;
                parts.stc = stc.item()?;
                total = total.add(stc.scale(cfg.weights.lambda))?;
            }
            if cfg.weights.eta > 0.0 {
                let subsample_seed = cfg.seed ^ ((epoch as u64) << 32) ^ widx as u64;
                match ac_term(
                    &out,
                    labels,
                    t_final,
                    &labeled_train,
                    cells,
                    model.config.embedding_channels(),
                    t_prime,
                    &frozen,
                    cfg,
                    subsample_seed,
                )? {
                    Some(ac) => {
                        parts.ac = ac.item()?;
                        total = total.add(ac.scale(cfg.weights.eta))?;
                    }
                    None => ac_warning = true,
                }
            }

            let total_value = total.item()?;
            if !total_value.is_finite() {
                let term = worst_term(&parts);
                return Err(TrainError::Divergence {
                    term: term.into(),
                    value: total_value,
                });
            }
            part_sums.pred += parts.pred;
            part_sums.sp += parts.sp;
            part_sums.ae += parts.ae;
            part_sums.stc += parts.stc;
            part_sums.ac += parts.ac;
            total_sum += total_value;
            steps += 1;

            let grads = tape.backward(total)?;
            let window_grads: Vec<Tensor> = vars
                .ordered()
                .iter()
                .map(|v| grads.get(*v))
                .collect();
            match &mut batch_grads {
                None => batch_grads = Some(window_grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&window_grads) {
                        a.add_assign(g);
                    }
                }
            }
            batch_count += 1;

            let last = widx + 1 == order.len();
            if batch_count == cfg.batch || last {
                let mut grads = batch_grads.take().expect("batch has gradients");
                if batch_count > 1 {
                    let inv = 1.0 / batch_count as f64;
                    for g in &mut grads {
                        for v in g.data_mut() {
                            *v *= inv;
                        }
                    }
                }
                clip_global_norm(&mut grads, GRAD_CLIP_NORM);
                adam.step(model, &grads);
                batch_count = 0;
            }
        }

        let (val_rmse, sample) = eval_pass(model, &cache, labels, &windows, &train_cells, &val_cells, t_prime)?;
        refit_sample = sample;

        let inv = 1.0 / steps.max(1) as f64;
        let fit = frozen.fit.as_ref();
        history.epochs.push(EpochRecord {
            epoch,
            loss_pred: part_sums.pred * inv,
            loss_sp: part_sums.sp * inv,
            loss_ae: part_sums.ae * inv,
            loss_stc: part_sums.stc * inv,
            loss_ac: part_sums.ac * inv,
            loss_total: total_sum * inv,
            val_rmse,
            nugget: fit.map_or(f64::NAN, |f| f.model.nugget),
            sill: fit.map_or(f64::NAN, |f| f.model.sill),
            range: fit.map_or(f64::NAN, |f| f.model.range),
            selected_features: model.sparse.selected_count(),
            ac_warning,
        });

        let improved = best.as_ref().map_or(true, |(b, ..)| val_rmse < *b);
        if improved {
            best = Some((
                val_rmse,
                epoch,
                model.params().into_iter().map(|(_, t)| t.clone()).collect(),
            ));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    if let Some((val, epoch, snapshot)) = best {
        for ((_, param), saved) in model.params_mut().into_iter().zip(snapshot) {
            *param = saved;
        }
        history.best_epoch = epoch;
        history.best_val_rmse = val;
    }
    Ok(history)
}

fn worst_term(parts: &LossParts) -> &'static str {
    for (name, v) in [
        ("pred", parts.pred),
        ("sp", parts.sp),
        ("ae", parts.ae),
        ("stc", parts.stc),
        ("ac", parts.ac),
    ] {
        if !v.is_finite() {
            return name;
        }
    }
    "total"
}

/// Ordered pair counts of the spatial and temporal smoothness sums, used to
/// keep λ scale-free across grid sizes.
fn stc_pair_counts(t: usize, h: usize, w: usize, spec: &NeighborhoodSpec) -> (f64, f64) {
    let mut spatial = 0usize;
    for r in 0..h as isize {
        for c in 0..w as isize {
            for k in 1..=spec.k_s as isize {
                for dr in -k..=k {
                    for dc in -k..=k {
                        if dr.abs().max(dc.abs()) != k {
                            continue;
                        }
                        let (nr, nc) = (r + dr, c + dc);
                        if nr >= 0 && nr < h as isize && nc >= 0 && nc < w as isize {
                            spatial += 1;
                        }
                    }
                }
            }
        }
    }
    let spatial_total = spatial * t;
    let mut temporal = 0usize;
    for k in 1..=spec.k_t {
        if k < t {
            temporal += 2 * (t - k) * h * w;
        }
    }
    (spatial_total.max(1) as f64, temporal.max(1) as f64)
}

/// Builds the differentiable autocorrelation term for one window, or `None`
/// when no valid bin exists (degenerate embeddings, too few labeled cells, or
/// no usable variogram fit yet).
#[allow(clippy::too_many_arguments)]
fn ac_term<'t>(
    out: &crate::network::WindowOutput<'t>,
    labels: &LabelGrid,
    t_final: usize,
    labeled_train: &[usize],
    cells: usize,
    emb_channels: usize,
    t_prime: usize,
    frozen: &FrozenVariogram,
    cfg: &TrainConfig,
    subsample_seed: u64,
) -> Result<Option<Var<'t>>, TrainError> {
    let Some(fit) = frozen.fit.as_ref() else {
        return Ok(None);
    };
    if labeled_train.len() < 2 {
        return Ok(None);
    }
    // embeddings of the window's final frame, detached: bin membership and
    // label statistics are constants within a step
    let emb = out.embeddings.value();
    let frame_off = (t_prime - 1) * cells * emb_channels;
    let emb_rows = |cell: usize| -> Vec<f64> {
        emb.data()[frame_off + cell * emb_channels..frame_off + (cell + 1) * emb_channels].to_vec()
    };
    let label_points: Vec<Vec<f64>> = labeled_train.iter().map(|&c| emb_rows(c)).collect();
    let label_values: Vec<f64> = labeled_train
        .iter()
        .map(|&c| labels.values.data()[t_final * cells + c])
        .collect();
    let denom = match max_pairwise_distance(&label_points) {
        Ok(d) if d > 0.0 => d,
        _ => return Ok(None),
    };
    let Ok(label_lags) = pairwise_lags_with_denominator(&label_points, denom) else {
        return Ok(None);
    };
    let Ok(label_dists) = bin_distributions_seeded(
        &label_lags,
        &label_values,
        &fit.model,
        cfg.lag_size,
        cfg.min_pairs,
        subsample_seed,
    ) else {
        return Ok(None);
    };

    let all_points: Vec<Vec<f64>> = (0..cells).map(emb_rows).collect();
    let pred_lags = match pairwise_lags_with_denominator(&all_points, denom) {
        Ok(l) => l,
        Err(_) => return Ok(None),
    };
    let pred_pairs = bin_pair_indices(&pred_lags, cfg.lag_size, subsample_seed);

    let flat_pred = out.prediction.reshape(&[cells])?;
    let mut total: Option<Var<'t>> = None;
    for label_bin in &label_dists {
        if !label_bin.valid {
            continue;
        }
        let pairs = &pred_pairs[label_bin.bin];
        if (2 * pairs.len() as u64) < cfg.min_pairs {
            continue;
        }
        let (mu_hat, sigma_hat) = gaussian_stats_of_pairs(flat_pred, pairs)?;
        let kl = kl_gaussian_var(
            label_bin.mu,
            sigma_floored(label_bin.sigma),
            mu_hat,
            sigma_hat,
        )?;
        total = Some(match total {
            None => kl,
            Some(acc) => acc.add(kl)?,
        });
    }
    Ok(total)
}

/// Forward pass over all windows without parameter updates: returns the
/// validation RMSE and the refit sample (train-cell embeddings and labels at
/// every window's final time).
fn eval_pass(
    model: &Model,
    cache: &FrameCache,
    labels: &LabelGrid,
    windows: &[usize],
    train_cells: &[usize],
    val_cells: &[usize],
    t_prime: usize,
) -> Result<(f64, RefitSample), TrainError> {
    let cells = cache.h * cache.w;
    let emb_channels = model.config.embedding_channels();
    let mut sample = RefitSample {
        points: Vec::new(),
        values: Vec::new(),
    };
    let (mut ss, mut n) = (0.0, 0usize);
    for &t_final in windows {
        let tape = Tape::new();
        let vars = model.register(&tape);
        let out = model.forward_window(&vars, &tape, &cache.window(t_final, t_prime))?;
        let pred = out.prediction.value();
        let emb = out.embeddings.value();
        let frame_off = (t_prime - 1) * cells * emb_channels;
        for &cell in train_cells {
            if labels.mask[t_final * cells + cell] {
                sample.points.push(
                    emb.data()[frame_off + cell * emb_channels..frame_off + (cell + 1) * emb_channels]
                        .to_vec(),
                );
                sample.values.push(labels.values.data()[t_final * cells + cell]);
            }
        }
        for &cell in val_cells {
            if labels.mask[t_final * cells + cell] {
                let err = labels.values.data()[t_final * cells + cell] - pred.data()[cell];
                ss += err * err;
                n += 1;
            }
        }
    }
    let val_rmse = if n > 0 { (ss / n as f64).sqrt() } else { f64::NAN };
    Ok((val_rmse, sample))
}

/// Fits the embedding-space variogram on the collected labeled sample;
/// returns `None` (keeping the previous fit) when the sample is degenerate.
fn refit_variogram(
    sample: &RefitSample,
    cfg: &TrainConfig,
) -> Option<(crate::variogram::VariogramBins, VariogramFit)> {
    if sample.points.len() < 2 {
        return None;
    }
    let denom = max_pairwise_distance(&sample.points).ok().filter(|d| *d > 0.0)?;
    let lags = pairwise_lags_with_denominator(&sample.points, denom).ok()?;
    let bins = empirical_semivariogram_seeded(&lags, &sample.values, cfg.lag_size, cfg.seed).ok()?;
    let fit = fit_gaussian_model(&bins, true).ok()?;
    Some((bins, fit))
}

/// Continues optimization on a new period. New test locations must not have
/// been train locations of any earlier period. The incoming parameters count
/// as a candidate checkpoint, so a continuation that never beats them on
/// validation returns them unchanged.
pub fn fine_tune(
    model: &mut Model,
    features: &FeatureGrid,
    labels: &LabelGrid,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let leaked = splits
        .test
        .intersection(&model.prior_train_cells)
        .count();
    if leaked > 0 {
        return Err(TrainError::SplitLeak(leaked));
    }
    let history = run_training(model, features, labels, splits, cfg)?;
    model.prior_train_cells.extend(splits.train.iter().copied());
    Ok(history)
}

/// Model predictions `[n, H, W]` for every window whose final time lies in
/// `t_range` (end exclusive); times before `T'−1` are not predictable.
pub fn predict_model(
    model: &Model,
    features: &FeatureGrid,
    t_range: std::ops::Range<usize>,
) -> Result<(Vec<usize>, Tensor), TrainError> {
    let t_prime = model.config.window;
    let cache = FrameCache::new(features);
    let (h, w) = (cache.h, cache.w);
    let times: Vec<usize> = t_range
        .filter(|t| *t + 1 >= t_prime && *t < features.time_steps)
        .collect();
    let mut data = Vec::with_capacity(times.len() * h * w);
    for &t in &times {
        let tape = Tape::new();
        let vars = model.register(&tape);
        let out = model.forward_window(&vars, &tape, &cache.window(t, t_prime))?;
        data.extend_from_slice(out.prediction.value().data());
    }
    let n = times.len();
    Ok((times, Tensor::from_vec_unchecked(&[n, h, w], data)))
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
