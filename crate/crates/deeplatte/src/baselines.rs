//! Spatial interpolation baselines: inverse distance weighting and ordinary
//! kriging with a Gaussian variogram.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::variogram::{
    empirical_semivariogram, fit_gaussian_model, pairwise_lags, VariogramError, VariogramModel,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("observation set is empty")]
    EmptyObservations,
    #[error("ordinary kriging needs at least {need} distinct observations, got {got}")]
    TooFewObservations { got: usize, need: usize },
    #[error("singular kriging system: {0}")]
    SingularKrigingSystem(String),
    #[error("invalid observation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Variogram(#[from] VariogramError),
}

/// Point observations of one time step: (easting, northing, value).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    obs: Vec<(f64, f64, f64)>,
}

impl ObservationSet {
    pub fn new(obs: Vec<(f64, f64, f64)>) -> Result<Self, BaselineError> {
        if obs.is_empty() {
            return Err(BaselineError::EmptyObservations);
        }
        if obs
            .iter()
            .any(|(x, y, v)| !x.is_finite() || !y.is_finite() || !v.is_finite())
        {
            return Err(BaselineError::Invalid("non-finite observation".into()));
        }
        Ok(ObservationSet { obs })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64, f64)] {
        &self.obs
    }

    /// Observations with coordinates closer than `eps` merged into one point
    /// holding their mean value.
    fn deduplicated(&self, eps: f64) -> Vec<(f64, f64, f64)> {
        let mut merged: Vec<(f64, f64, f64, u64)> = Vec::new();
        for &(x, y, v) in &self.obs {
            match merged
                .iter_mut()
                .find(|(mx, my, ..)| dist(*mx, *my, x, y) < eps)
            {
                Some(slot) => {
                    slot.2 += v;
                    slot.3 += 1;
                }
                None => merged.push((x, y, v, 1)),
            }
        }
        merged
            .into_iter()
            .map(|(x, y, sum, n)| (x, y, sum / n as f64))
            .collect()
    }
}

fn dist(x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
}

/// Distance below which a target is considered coincident with an observation.
pub const COINCIDENCE_EPS: f64 = 1e-9;

/// Inverse distance weighting: `ŷ(x) = Σ d⁻ᵖ·yᵢ / Σ d⁻ᵖ`; a target closer
/// than [`COINCIDENCE_EPS`] to an observation returns that value exactly.
pub fn idw_predict(obs: &ObservationSet, targets: &[(f64, f64)], power: f64) -> Vec<f64> {
    targets
        .iter()
        .map(|&(tx, ty)| {
            let mut nearest = (f64::INFINITY, 0.0);
            let (mut num, mut den) = (0.0, 0.0);
            for &(x, y, v) in obs.points() {
                let d = dist(x, y, tx, ty);
                if d < nearest.0 {
                    nearest = (d, v);
                }
                let w = d.powf(-power);
                num += w * v;
                den += w;
            }
            if nearest.0 < COINCIDENCE_EPS {
                nearest.1
            } else {
                num / den
            }
        })
        .collect()
}

/// Ordinary kriging: fits a zero-nugget Gaussian variogram on the observation
/// coordinates (10 equal-width lag bins up to the maximum pairwise distance)
/// and solves the constrained system per target.
pub fn ok_predict(
    obs: &ObservationSet,
    targets: &[(f64, f64)],
    n_bins: usize,
) -> Result<Vec<f64>, BaselineError> {
    let points = obs.deduplicated(COINCIDENCE_EPS);
    if points.len() < 3 {
        return Err(BaselineError::TooFewObservations {
            got: points.len(),
            need: 3,
        });
    }
    let coords: Vec<Vec<f64>> = points.iter().map(|&(x, y, _)| vec![x, y]).collect();
    let values: Vec<f64> = points.iter().map(|&(.., v)| v).collect();
    let spread = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if spread.1 - spread.0 == 0.0 {
        // constant field: any unit-sum weights reproduce it
        return Ok(vec![values[0]; targets.len()]);
    }
    let lags = pairwise_lags(&coords)?;
    let bins = empirical_semivariogram(&lags, &values, 1.0 / n_bins as f64)?;
    let fit = fit_gaussian_model(&bins, true)?;
    let deduped = ObservationSet { obs: points };
    ok_predict_with_model(&deduped, targets, &fit.model, lags.max_raw())
}

/// Ordinary kriging with an externally fitted variogram model. `dist_scale`
/// maps raw distances onto the model's lag axis (the maximum pairwise
/// observation distance when the model was fitted on rescaled lags).
pub fn ok_predict_with_model(
    obs: &ObservationSet,
    targets: &[(f64, f64)],
    model: &VariogramModel,
    dist_scale: f64,
) -> Result<Vec<f64>, BaselineError> {
    let points = obs.deduplicated(COINCIDENCE_EPS);
    let n = points.len();
    if n < 2 {
        return Err(BaselineError::TooFewObservations { got: n, need: 2 });
    }
    if !(dist_scale > 0.0) {
        return Err(BaselineError::Invalid(format!(
            "non-positive distance scale {dist_scale}"
        )));
    }
    // Zero-nugget Gaussian variograms make kriging oscillate wildly when
    // extrapolating; a small stabilizing nugget on strictly positive
    // distances damps that. Exactness at observed locations is unaffected:
    // w = eᵢ still solves the system exactly since matrix row and right-hand
    // side receive the same offset.
    let nugget = STABILIZING_NUGGET_REL * model.sill;
    let gamma = |d: f64| {
        if d > 0.0 {
            model.evaluate(d / dist_scale) + nugget
        } else {
            0.0
        }
    };

    // [γ(dᵢⱼ), 1; 1ᵀ, 0]·[w; μ_L] = [γ(dᵢ*); 1]
    let dim = n + 1;
    let mut a = vec![0.0; dim * dim];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * dim + j] = gamma(dist(points[i].0, points[i].1, points[j].0, points[j].1));
            }
        }
        a[i * dim + n] = 1.0;
        a[n * dim + i] = 1.0;
    }
    let lu = LuFactors::factor(a.clone(), dim)?;

    let rhs_for = |tx: f64, ty: f64| {
        let mut rhs = vec![0.0; dim];
        for (i, &(x, y, _)) in points.iter().enumerate() {
            rhs[i] = gamma(dist(x, y, tx, ty));
        }
        rhs[n] = 1.0;
        rhs
    };
    let predict = |sol: &[f64]| {
        points
            .iter()
            .zip(sol)
            .map(|(&(.., v), w)| w * v)
            .sum::<f64>()
    };

    let mut out = Vec::with_capacity(targets.len());
    let mut wild = false;
    for &(tx, ty) in targets {
        let sol = lu.solve(&rhs_for(tx, ty));
        wild |= sol[..n].iter().map(|w| w.abs()).sum::<f64>() > WEIGHT_SANITY_LIMIT;
        out.push(predict(&sol));
    }
    if wild {
        // near-singular system (zero-nugget Gaussian variograms on clustered
        // points): redo every target with the minimum-norm pseudo-inverse
        let svd = PseudoInverse::new(&a, dim)?;
        out.clear();
        for &(tx, ty) in targets {
            out.push(predict(&svd.solve(&rhs_for(tx, ty))));
        }
    }
    Ok(out)
}

/// Total absolute kriging weight beyond which the plain solve is treated as
/// numerically degenerate.
const WEIGHT_SANITY_LIMIT: f64 = 10.0;

/// Stabilizing nugget added to the kriging system, relative to the sill.
const STABILIZING_NUGGET_REL: f64 = 1e-3;

/// Truncated-SVD pseudo-inverse for near-singular kriging systems.
struct PseudoInverse {
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dim: usize,
}

impl PseudoInverse {
    fn new(a: &[f64], dim: usize) -> Result<Self, BaselineError> {
        let m = nalgebra::DMatrix::from_row_slice(dim, dim, a);
        let svd = m.svd(true, true);
        Ok(PseudoInverse { svd, dim })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = nalgebra::DVector::from_column_slice(rhs);
        let x = self
            .svd
            .solve(&b, 1e-10)
            .expect("svd computed with singular vectors");
        (0..self.dim).map(|i| x[i]).collect()
    }
}

/// Kriging weights (and Lagrange multiplier) for a single target; exposed for
/// the weight-sum diagnostics.
pub fn ok_weights(
    obs: &ObservationSet,
    target: (f64, f64),
    model: &VariogramModel,
    dist_scale: f64,
) -> Result<Vec<f64>, BaselineError> {
    let points = obs.deduplicated(COINCIDENCE_EPS);
    let n = points.len();
    let nugget = STABILIZING_NUGGET_REL * model.sill;
    let gamma = |d: f64| {
        if d > 0.0 {
            model.evaluate(d / dist_scale) + nugget
        } else {
            0.0
        }
    };
    let dim = n + 1;
    let mut a = vec![0.0; dim * dim];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * dim + j] = gamma(dist(points[i].0, points[i].1, points[j].0, points[j].1));
            }
        }
        a[i * dim + n] = 1.0;
        a[n * dim + i] = 1.0;
    }
    let lu = LuFactors::factor(a, dim)?;
    let mut rhs = vec![0.0; dim];
    for (i, &(x, y, _)) in points.iter().enumerate() {
        rhs[i] = gamma(dist(x, y, target.0, target.1));
    }
    rhs[n] = 1.0;
    Ok(lu.solve(&rhs))
}

/// Dense LU factorization with partial pivoting (row-major, square).
struct LuFactors {
    lu: Vec<f64>,
    perm: Vec<usize>,
    dim: usize,
}

impl LuFactors {
    fn factor(mut a: Vec<f64>, dim: usize) -> Result<Self, BaselineError> {
        let mut perm: Vec<usize> = (0..dim).collect();
        for col in 0..dim {
            let mut pivot = col;
            let mut best = a[perm[col] * dim + col].abs();
            for row in (col + 1)..dim {
                let v = a[perm[row] * dim + col].abs();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best < 1e-300 {
                return Err(BaselineError::SingularKrigingSystem(format!(
                    "zero pivot in column {col} (duplicate observation locations?)"
                )));
            }
            perm.swap(col, pivot);
            let prow = perm[col];
            let pval = a[prow * dim + col];
            for row in (col + 1)..dim {
                let r = perm[row];
                let factor = a[r * dim + col] / pval;
                a[r * dim + col] = factor;
                for k in (col + 1)..dim {
                    a[r * dim + k] -= factor * a[prow * dim + k];
                }
            }
        }
        Ok(LuFactors { lu: a, perm, dim })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let mut y = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = b[self.perm[i]];
            for j in 0..i {
                acc -= self.lu[self.perm[i] * dim + j] * y[j];
            }
            y[i] = acc;
        }
        let mut x = vec![0.0; dim];
        for i in (0..dim).rev() {
            let mut acc = y[i];
            for j in (i + 1)..dim {
                acc -= self.lu[self.perm[i] * dim + j] * x[j];
            }
            x[i] = acc / self.lu[self.perm[i] * dim + i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(points: &[(f64, f64, f64)]) -> ObservationSet {
        ObservationSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn idw_single_observation_is_constant_everywhere() {
        let o = obs(&[(3.0, 4.0, 7.5)]);
        let preds = idw_predict(&o, &[(0.0, 0.0), (10.0, -5.0), (3.0, 4.0)], 2.0);
        assert!(preds.iter().all(|p| (p - 7.5).abs() < 1e-12));
    }

    #[test]
    fn idw_equidistant_pair_averages() {
        let o = obs(&[(-1.0, 0.0, 0.0), (1.0, 0.0, 10.0)]);
        let preds = idw_predict(&o, &[(0.0, 5.0)], 2.0);
        assert!((preds[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn idw_weighted_sum_example() {
        // distances 1 and 2, values 0 and 9, p=2 → (0·1 + 9·0.25)/1.25 = 1.8
        let o = obs(&[(1.0, 0.0, 0.0), (2.0, 0.0, 9.0)]);
        let preds = idw_predict(&o, &[(0.0, 0.0)], 2.0);
        assert!((preds[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn kriging_midpoint_of_symmetric_layout_is_the_mean() {
        let o = obs(&[(-1.0, 0.0, 2.0), (1.0, 0.0, 6.0)]);
        let model = VariogramModel { nugget: 0.0, sill: 1.0, range: 0.7 };
        let preds = ok_predict_with_model(&o, &[(0.0, 0.0)], &model, 2.0).unwrap();
        assert!((preds[0] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn kriging_reproduces_observed_values_at_their_locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let points: Vec<(f64, f64, f64)> = (0..7)
            .map(|_| {
                (
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let o = obs(&points);
        let targets: Vec<(f64, f64)> = points.iter().map(|&(x, y, _)| (x, y)).collect();
        let preds = ok_predict(&o, &targets, 10).unwrap();
        for (p, &(.., v)) in preds.iter().zip(&points) {
            assert!((p - v).abs() < 1e-6, "{p} vs {v}");
        }
    }

    #[test]
    fn kriging_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let points: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..10.0),
                    )
                })
                .collect();
            let o = obs(&points);
            let model = VariogramModel { nugget: 0.0, sill: 2.0, range: 0.5 };
            let w = ok_weights(&o, (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)), &model, 60.0).unwrap();
            let sum: f64 = w[..points.len()].iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "weight sum {sum}");
        }
    }

    #[test]
    fn kriging_matches_independent_dense_solve() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let points: Vec<(f64, f64, f64)> = (0..5)
            .map(|_| {
                (
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(-2.0..2.0),
                )
            })
            .collect();
        let o = obs(&points);
        let model = VariogramModel { nugget: 0.0, sill: 1.5, range: 0.6 };
        let scale = 12.0;
        let target = (4.2, 6.1);
        let got = ok_predict_with_model(&o, &[target], &model, scale).unwrap()[0];

        // oracle: same system assembled independently, solved by nalgebra
        let n = points.len();
        let nugget = STABILIZING_NUGGET_REL * model.sill;
        let gamma = |d: f64| {
            if d > 0.0 {
                model.evaluate(d / scale) + nugget
            } else {
                0.0
            }
        };
        let mut a = DMatrix::zeros(n + 1, n + 1);
        let mut b = DVector::zeros(n + 1);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = super::dist(points[i].0, points[i].1, points[j].0, points[j].1);
                    a[(i, j)] = gamma(d);
                }
            }
            a[(i, n)] = 1.0;
            a[(n, i)] = 1.0;
            b[i] = gamma(super::dist(points[i].0, points[i].1, target.0, target.1));
        }
        b[n] = 1.0;
        let sol = a.lu().solve(&b).unwrap();
        let want: f64 = (0..n).map(|i| sol[i] * points[i].2).sum();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn duplicate_coordinates_are_averaged_not_singular() {
        let o = obs(&[
            (0.0, 0.0, 2.0),
            (0.0, 0.0, 4.0), // duplicate of the first
            (5.0, 0.0, 1.0),
            (0.0, 5.0, 3.0),
            (5.0, 5.0, 2.0),
        ]);
        let preds = ok_predict(&o, &[(0.0, 0.0)], 10).unwrap();
        assert!((preds[0] - 3.0).abs() < 1e-6); // mean of 2 and 4
    }

    #[test]
    fn too_few_observations_is_an_error() {
        let o = obs(&[(0.0, 0.0, 1.0), (1.0, 1.0, 2.0)]);
        assert!(matches!(
            ok_predict(&o, &[(0.5, 0.5)], 10),
            Err(BaselineError::TooFewObservations { .. })
        ));
    }

    proptest! {
        #[test]
        fn idw_stays_within_observation_hull(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<(f64, f64, f64)> = (0..5)
                .map(|_| (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let o = ObservationSet::new(points.clone()).unwrap();
            let lo = points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
            let preds = idw_predict(&o, &[(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0))], 2.0);
            prop_assert!(preds[0] >= lo - 1e-9 && preds[0] <= hi + 1e-9);
        }

        #[test]
        fn both_predictors_are_translation_equivariant(seed in 0u64..100, shift in -10.0..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let points: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let shifted: Vec<(f64, f64, f64)> = points.iter().map(|&(x, y, v)| (x, y, v + shift)).collect();
            let target = [(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0))];
            let o0 = ObservationSet::new(points).unwrap();
            let o1 = ObservationSet::new(shifted).unwrap();

            let idw0 = idw_predict(&o0, &target, 2.0);
            let idw1 = idw_predict(&o1, &target, 2.0);
            prop_assert!((idw1[0] - idw0[0] - shift).abs() < 1e-9);

            let model = VariogramModel { nugget: 0.0, sill: 1.0, range: 0.5 };
            let ok0 = ok_predict_with_model(&o0, &target, &model, 25.0).unwrap();
            let ok1 = ok_predict_with_model(&o1, &target, &model, 25.0).unwrap();
            prop_assert!((ok1[0] - ok0[0] - shift).abs() < 1e-9);
        }
    }
}
