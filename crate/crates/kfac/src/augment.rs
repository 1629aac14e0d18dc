//! Input pipeline augmentations: running mixup (virtual batches blended
//! across steps) and random erasing with zero fill.

use crate::linalg::DenseMatrix;
use crate::tensor::TensorBuffer;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("beta parameters must be positive, got ({0}, {1})")]
    NonPositiveBeta(f64, f64),
    #[error("mixup shape mismatch")]
    ShapeMismatch,
}

/// Carries the previous virtual batch for running mixup.
///
/// The first batch seeds the state and passes through unmixed; there is
/// no virtual batch before step one.
#[derive(Debug, Clone, Default)]
pub struct MixupState {
    prev: Option<(TensorBuffer, DenseMatrix)>,
}

impl MixupState {
    pub fn new() -> Self {
        MixupState { prev: None }
    }

    pub fn is_seeded(&self) -> bool {
        self.prev.is_some()
    }

    pub fn snapshot(&self) -> Option<&(TensorBuffer, DenseMatrix)> {
        self.prev.as_ref()
    }

    pub fn restore(&mut self, prev: Option<(TensorBuffer, DenseMatrix)>) {
        self.prev = prev;
    }
}

/// Draw from Beta(alpha, beta); deterministic under a seeded rng.
pub fn sample_beta<R: Rng>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64, AugmentError> {
    let dist = Beta::new(alpha, beta).map_err(|_| AugmentError::NonPositiveBeta(alpha, beta))?;
    Ok(dist.sample(rng))
}

/// Blend the raw batch with the previous virtual batch:
/// `x~ = lambda * x + (1 - lambda) * x~_prev`, same for labels.
/// The state is updated to the new virtual batch.
pub fn running_mixup(
    state: &mut MixupState,
    inputs: &TensorBuffer,
    labels: &DenseMatrix,
    lambda: f64,
) -> Result<(TensorBuffer, DenseMatrix), AugmentError> {
    let (vx, vy) = match &state.prev {
        None => (inputs.clone(), labels.clone()),
        Some((px, py)) => {
            if px.shape() != inputs.shape()
                || py.rows() != labels.rows()
                || py.cols() != labels.cols()
            {
                return Err(AugmentError::ShapeMismatch);
            }
            let mut vx = inputs.clone();
            for (v, p) in vx.data_mut().iter_mut().zip(px.data()) {
                *v = lambda * *v + (1.0 - lambda) * p;
            }
            let mut vy = labels.clone();
            for (v, p) in vy.values_mut().iter_mut().zip(py.values()) {
                *v = lambda * *v + (1.0 - lambda) * p;
            }
            (vx, vy)
        }
    };
    state.prev = Some((vx.clone(), vy.clone()));
    Ok((vx, vy))
}

/// Random-erasing parameters: erase probability, area-ratio range, and
/// aspect-ratio range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseConfig {
    pub p: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        EraseConfig {
            p: 0.5,
            s_min: 0.02,
            s_max: 0.25,
            r_min: 0.3,
            r_max: 1.0,
        }
    }
}

/// Zero out a random rectangle of one `(C, H, W)` image in place.
///
/// The region size comes from a uniform area ratio and aspect ratio, with
/// the orientation coin-flipped. Sizes whose rounded pixel area leaves the
/// configured ratio range, or that do not fit, are resampled up to ten
/// times before the erase is skipped. Returns whether a region was erased.
pub fn random_erase<R: Rng>(
    image: &mut [f64],
    channels: usize,
    height: usize,
    width: usize,
    cfg: &EraseConfig,
    rng: &mut R,
) -> bool {
    assert!(height >= 2 && width >= 2, "image too small to erase");
    assert_eq!(image.len(), channels * height * width);
    if !rng.random_bool(cfg.p) {
        return false;
    }
    let total = (height * width) as f64;
    for _ in 0..10 {
        let s: f64 = rng.random_range(cfg.s_min..=cfg.s_max);
        let r: f64 = rng.random_range(cfg.r_min..=cfg.r_max);
        let area = s * total;
        let mut eh = (area * r).sqrt().round() as usize;
        let mut ew = (area / r).sqrt().round() as usize;
        if rng.random_bool(0.5) {
            std::mem::swap(&mut eh, &mut ew);
        }
        if eh == 0 || ew == 0 || eh > height || ew > width {
            continue;
        }
        let ratio = (eh * ew) as f64 / total;
        if ratio < cfg.s_min || ratio > cfg.s_max {
            continue;
        }
        let top = rng.random_range(0..=height - eh);
        let left = rng.random_range(0..=width - ew);
        for c in 0..channels {
            for y in top..top + eh {
                let base = c * height * width + y * width;
                image[base + left..base + left + ew].fill(0.0);
            }
        }
        return true;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn beta_uniform_when_alpha_one() {
        let mut rng = stream(&[1]);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_beta(1.0, 1.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn beta_moments_alpha_0p4() {
        let mut rng = stream(&[2]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_beta(0.4, 0.4, &mut rng).unwrap())
            .collect();
        assert!(draws.iter().all(|d| (0.0..=1.0).contains(d)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let expect = 1.0 / (4.0 * (2.0 * 0.4 + 1.0));
        assert!((var - expect).abs() < 0.1 * expect);
    }

    #[test]
    fn beta_rejects_bad_params() {
        let mut rng = stream(&[3]);
        assert!(sample_beta(0.0, 1.0, &mut rng).is_err());
        assert!(sample_beta(1.0, -2.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_first_batch_passes_through() {
        let mut state = MixupState::new();
        let x = TensorBuffer::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (vx, vy) = running_mixup(&mut state, &x, &y, 0.3).unwrap();
        assert_eq!(vx.data(), x.data());
        assert_eq!(vy.values(), y.values());
        assert!(state.is_seeded());
    }

    #[test]
    fn mixup_lambda_extremes() {
        let mut state = MixupState::new();
        let x0 = TensorBuffer::from_vec(&[1, 2], vec![0.0, 0.0]);
        let y0 = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        running_mixup(&mut state, &x0, &y0, 0.5).unwrap();

        let x1 = TensorBuffer::from_vec(&[1, 2], vec![1.0, 1.0]);
        let y1 = DenseMatrix::from_rows(&[&[0.0, 1.0]]);
        let (vx, _) = running_mixup(&mut state, &x1, &y1, 1.0).unwrap();
        assert_eq!(vx.data(), x1.data());

        // state now holds x1; lambda = 0 returns it unchanged
        let x2 = TensorBuffer::from_vec(&[1, 2], vec![9.0, 9.0]);
        let y2 = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        let (vx, _) = running_mixup(&mut state, &x2, &y2, 0.0).unwrap();
        assert_eq!(vx.data(), x1.data());
    }

    #[test]
    fn mixup_half_blend() {
        let mut state = MixupState::new();
        let zeros = TensorBuffer::zeros(&[1, 4]);
        let y0 = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        running_mixup(&mut state, &zeros, &y0, 0.7).unwrap();

        let ones = TensorBuffer::from_vec(&[1, 4], vec![1.0; 4]);
        let y1 = DenseMatrix::from_rows(&[&[0.0, 1.0]]);
        let (vx, vy) = running_mixup(&mut state, &ones, &y1, 0.5).unwrap();
        assert!(vx.data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert_relative_eq!(vy.row(0).iter().sum::<f64>(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn mixup_shape_mismatch() {
        let mut state = MixupState::new();
        let x0 = TensorBuffer::zeros(&[2, 2]);
        let y0 = DenseMatrix::zeros(2, 2);
        running_mixup(&mut state, &x0, &y0, 0.5).unwrap();
        let bad = TensorBuffer::zeros(&[3, 2]);
        let y1 = DenseMatrix::zeros(3, 2);
        assert_eq!(
            running_mixup(&mut state, &bad, &y1, 0.5),
            Err(AugmentError::ShapeMismatch)
        );
    }

    #[test]
    fn erase_disabled_is_identity() {
        let mut rng = stream(&[4]);
        let mut img = vec![1.0; 3 * 8 * 8];
        let cfg = EraseConfig {
            p: 0.0,
            ..EraseConfig::default()
        };
        assert!(!random_erase(&mut img, 3, 8, 8, &cfg, &mut rng));
        assert!(img.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn erase_fraction_in_configured_range() {
        let mut rng = stream(&[5]);
        let cfg = EraseConfig {
            p: 1.0,
            ..EraseConfig::default()
        };
        for _ in 0..200 {
            let mut img = vec![1.0; 32 * 32];
            assert!(random_erase(&mut img, 1, 32, 32, &cfg, &mut rng));
            let zeros = img.iter().filter(|v| **v == 0.0).count() as f64 / 1024.0;
            assert!(
                (0.02..=0.25).contains(&zeros),
                "erased fraction {zeros} out of range"
            );
        }
    }

    #[test]
    fn erase_frequency_matches_probability() {
        let mut rng = stream(&[6]);
        let cfg = EraseConfig::default();
        let trials = 10_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut img = vec![1.0; 16 * 16];
            if random_erase(&mut img, 1, 16, 16, &cfg, &mut rng) {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.02, "erase frequency {freq}");
    }

    #[test]
    fn erase_touches_only_one_rectangle() {
        let mut rng = stream(&[7]);
        let cfg = EraseConfig {
            p: 1.0,
            ..EraseConfig::default()
        };
        let h = 16;
        let w = 16;
        let mut img: Vec<f64> = (0..h * w).map(|i| 1.0 + i as f64).collect();
        let orig = img.clone();
        random_erase(&mut img, 1, h, w, &cfg, &mut rng);
        // zeroed pixels must form an axis-aligned rectangle; others untouched
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if img[y * w + x] == 0.0 {
                    rows.push(y);
                    cols.push(x);
                } else {
                    assert_eq!(img[y * w + x], orig[y * w + x]);
                }
            }
        }
        let (rmin, rmax) = (rows.iter().min().unwrap(), rows.iter().max().unwrap());
        let (cmin, cmax) = (cols.iter().min().unwrap(), cols.iter().max().unwrap());
        assert_eq!(rows.len(), (rmax - rmin + 1) * (cmax - cmin + 1));
    }

    proptest! {
        #[test]
        fn prop_mixup_preserves_label_simplex(lambda in 0.0f64..=1.0, seed in 0u64..200) {
            let mut rng = stream(&[seed]);
            let mut state = MixupState::new();
            for _ in 0..3 {
                let x = TensorBuffer::from_vec(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
                let mut y = DenseMatrix::zeros(2, 4);
                for i in 0..2 {
                    let c = rng.random_range(0..4);
                    y.set(i, c, 1.0);
                }
                let (_, vy) = running_mixup(&mut state, &x, &y, lambda).unwrap();
                for i in 0..2 {
                    let row = vy.row(i);
                    prop_assert!(row.iter().all(|v| *v >= -1e-15));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
