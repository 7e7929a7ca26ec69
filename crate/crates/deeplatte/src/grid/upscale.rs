//! Cubic up-scaling of coarse uniform fields onto the target grid.

use super::{GridError, GridSpec};
use crate::autodiff::Tensor;

/// Keys cubic convolution kernel (a = -1/2), the common "textbook" bicubic.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Resamples a coarse `[Hc, Wc]` field onto the target grid's cell centers by
/// separable cubic convolution. Samples sit at coarse cell centers; the 4×4
/// stencil is clamped at the field border (replicated edge samples).
///
/// Interpolation is exact at coincident sample points and reproduces
/// polynomials up to degree two away from the clamped border.
pub fn upscale_cubic(
    coarse: &Tensor,
    coarse_spec: &GridSpec,
    target: &GridSpec,
) -> Result<Tensor, GridError> {
    let shape = coarse.shape();
    if shape.len() != 2 || shape[0] != coarse_spec.height || shape[1] != coarse_spec.width {
        return Err(GridError::Invalid(format!(
            "coarse field shape {:?} does not match its grid spec {}x{}",
            shape, coarse_spec.height, coarse_spec.width
        )));
    }
    let (hc, wc) = (coarse_spec.height, coarse_spec.width);
    if hc < 4 || wc < 4 {
        return Err(GridError::InsufficientSamples(format!(
            "cubic interpolation needs at least 4x4 coarse samples, got {hc}x{wc}"
        )));
    }
    let (cx0, cy0, cx1, cy1) = coarse_spec.extent();
    let (tx0, ty0, tx1, ty1) = target.extent();
    if tx0 < cx0 || ty0 < cy0 || tx1 > cx1 || ty1 > cy1 {
        return Err(GridError::InsufficientSamples(
            "coarse grid does not cover the target extent".into(),
        ));
    }

    let data = coarse.data();
    let clamp = |i: isize, max: usize| i.clamp(0, max as isize - 1) as usize;
    let mut out = vec![0.0; target.cells()];
    for r in 0..target.height {
        for c in 0..target.width {
            let (x, y) = target.cell_center(r, c);
            // fractional sample coordinates (samples at coarse cell centers)
            let u = (x - coarse_spec.origin.0) / coarse_spec.cell_size - 0.5;
            let v = (y - coarse_spec.origin.1) / coarse_spec.cell_size - 0.5;
            let (i0, j0) = (v.floor() as isize, u.floor() as isize);
            let (fv, fu) = (v - i0 as f64, u - j0 as f64);
            // rows first, then the column pass
            let mut acc = 0.0;
            for di in -1..=2isize {
                let row = clamp(i0 + di, hc);
                let wy = keys(fv - di as f64);
                if wy == 0.0 {
                    continue;
                }
                let mut row_val = 0.0;
                for dj in -1..=2isize {
                    let col = clamp(j0 + dj, wc);
                    row_val += keys(fu - dj as f64) * data[row * wc + col];
                }
                acc += wy * row_val;
            }
            out[r * target.width + c] = acc;
        }
    }
    Tensor::from_vec(&[target.height, target.width], out).map_err(|e| GridError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_upscales_to_the_same_constant() {
        let cspec = GridSpec::new((0.0, 0.0), 4.0, 5, 5).unwrap();
        let tspec = GridSpec::new((2.0, 2.0), 1.0, 16, 16).unwrap();
        let coarse = Tensor::filled(&[5, 5], 3.25);
        let fine = upscale_cubic(&coarse, &cspec, &tspec).unwrap();
        for v in fine.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_exactly() {
        // f(x, y) = x + y sampled coarsely; cubic reproduces degree-1 exactly
        // away from the clamped border, so the target sits inside with margin.
        let cspec = GridSpec::new((0.0, 0.0), 4.0, 8, 8).unwrap();
        let mut coarse = vec![0.0; 64];
        for i in 0..8 {
            for j in 0..8 {
                let (x, y) = cspec.cell_center(i, j);
                coarse[i * 8 + j] = x + y;
            }
        }
        let coarse = Tensor::from_vec(&[8, 8], coarse).unwrap();
        let tspec = GridSpec::new((8.0, 8.0), 1.0, 16, 16).unwrap();
        let fine = upscale_cubic(&coarse, &cspec, &tspec).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let (x, y) = tspec.cell_center(r, c);
                assert!((fine.data()[r * 16 + c] - (x + y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_at_coincident_sample_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cspec = GridSpec::new((0.0, 0.0), 3.0, 6, 6).unwrap();
        let coarse = Tensor::from_vec(
            &[6, 6],
            (0..36).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        // target cells of size 3 aligned with the coarse ones: centers coincide
        let tspec = GridSpec::new((3.0, 3.0), 3.0, 4, 4).unwrap();
        let fine = upscale_cubic(&coarse, &cspec, &tspec).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = coarse.data()[(r + 1) * 6 + (c + 1)];
                assert!((fine.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn off_sample_value_matches_direct_kernel_sum() {
        // independent oracle: the unfactored 16-term kernel product sum
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cspec = GridSpec::new((0.0, 0.0), 2.0, 5, 5).unwrap();
        let coarse = Tensor::from_vec(
            &[5, 5],
            (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let tspec = GridSpec::new((3.1, 2.7), 0.9, 3, 3).unwrap();
        let fine = upscale_cubic(&coarse, &cspec, &tspec).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let (x, y) = tspec.cell_center(r, c);
                let u = (x - 0.0) / 2.0 - 0.5;
                let v = (y - 0.0) / 2.0 - 0.5;
                let (i0, j0) = (v.floor() as isize, u.floor() as isize);
                let mut want = 0.0;
                for di in -1..=2isize {
                    for dj in -1..=2isize {
                        let i = (i0 + di).clamp(0, 4) as usize;
                        let j = (j0 + dj).clamp(0, 4) as usize;
                        want += coarse.data()[i * 5 + j]
                            * keys(v - (i0 + di) as f64)
                            * keys(u - (j0 + dj) as f64);
                    }
                }
                assert!((fine.data()[r * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let cspec = GridSpec::new((0.0, 0.0), 4.0, 3, 5).unwrap();
        let tspec = GridSpec::new((4.0, 4.0), 1.0, 2, 2).unwrap();
        let err = upscale_cubic(&Tensor::zeros(&[3, 5]), &cspec, &tspec).unwrap_err();
        assert!(matches!(err, GridError::InsufficientSamples(_)));
    }
}
