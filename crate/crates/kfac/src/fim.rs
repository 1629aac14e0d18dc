//! Kronecker-factored Fisher information: builds the input-side factor A
//! and output-side factor G from captured statistics, applies factored
//! Tikhonov damping, inverts, and preconditions gradients. Batch-norm
//! layers keep an unfactored Fisher block over their (scale, shift)
//! parameters, optionally approximated by its diagonal.

use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::model::{Layer, LayerKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FimError {
    #[error("no captured rows to build a factor from")]
    EmptyCapture,
    #[error("damping must be positive, got {0}")]
    NonPositiveDamping(f64),
    #[error("inverses are stale and were never computed")]
    StaleInverses,
    #[error("expected a batch_norm layer")]
    NotBatchNorm,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Kronecker factors and cached damped inverses for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KroneckerPair {
    pub a_factor: DenseMatrix,
    pub g_factor: DenseMatrix,
    pub a_inv: Option<DenseMatrix>,
    pub g_inv: Option<DenseMatrix>,
    pub last_refresh: Option<u64>,
}

impl KroneckerPair {
    pub fn new(a_factor: DenseMatrix, g_factor: DenseMatrix) -> Self {
        KroneckerPair {
            a_factor,
            g_factor,
            a_inv: None,
            g_inv: None,
            last_refresh: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnFimMode {
    Full,
    Diagonal,
}

/// Fisher block over the 2C-dimensional (scale, shift) parameter vector
/// of a batch-norm layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BnFisherData {
    Full(DenseMatrix),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnFisherBlock {
    pub data: BnFisherData,
    pub last_refresh: Option<u64>,
}

impl BnFisherBlock {
    pub fn mode(&self) -> BnFimMode {
        match self.data {
            BnFisherData::Full(_) => BnFimMode::Full,
            BnFisherData::Diagonal(_) => BnFimMode::Diagonal,
        }
    }
}

/// Mean of the row outer products: `X^T X / rows`.
fn second_moment(rows: &DenseMatrix) -> Result<DenseMatrix, FimError> {
    if rows.rows() == 0 {
        return Err(FimError::EmptyCapture);
    }
    let d = rows.cols();
    let n = rows.rows() as f64;
    let mut out = DenseMatrix::zeros(d, d);
    for r in 0..rows.rows() {
        let row = rows.row(r);
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                let v = out.get(i, j) + ri * row[j];
                out.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = out.get(i, j) / n;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Input-side factor: mean over captured rows of `a a^T`.
pub fn compute_a_factor(captured_input: &DenseMatrix) -> Result<DenseMatrix, FimError> {
    second_moment(captured_input)
}

/// Output-side factor: mean over captured per-sample-loss gradient rows
/// of `g g^T`; the outer-product mean supplies the 1/M of the empirical
/// Fisher estimate.
pub fn compute_g_factor(captured_output_grad: &DenseMatrix) -> Result<DenseMatrix, FimError> {
    second_moment(captured_output_grad)
}

/// Factored Tikhonov damping: splits `sqrt(gamma)` across the two factors
/// using the trace ratio `pi = sqrt((tr A / dim A) / (tr G / dim G))`, so
/// that `kron(G + sqrt(gamma)/pi I, A + pi sqrt(gamma) I)` dominates
/// `kron(G, A) + gamma I`. A zero trace on either side sets `pi = 1`.
pub fn damp_factors(
    a: &DenseMatrix,
    g: &DenseMatrix,
    gamma: f64,
) -> Result<(DenseMatrix, DenseMatrix), FimError> {
    if gamma <= 0.0 {
        return Err(FimError::NonPositiveDamping(gamma));
    }
    let ta = a.trace() / a.rows().max(1) as f64;
    let tg = g.trace() / g.rows().max(1) as f64;
    let pi = if ta <= 0.0 || tg <= 0.0 {
        1.0
    } else {
        (ta / tg).sqrt()
    };
    let sq = gamma.sqrt();
    Ok((
        a.add_scaled_identity(pi * sq),
        g.add_scaled_identity(sq / pi),
    ))
}

/// Preconditioned gradient for a Kronecker-factored layer.
///
/// On refresh: damp the stored factors with the current `gamma`, invert,
/// cache the inverses, and stamp `last_refresh`. Otherwise reuse the
/// cached inverses (the stale path is pure).
pub fn precondition(
    pair: &mut KroneckerPair,
    grad: &DenseMatrix,
    gamma: f64,
    refresh: bool,
    iteration: u64,
) -> Result<DenseMatrix, FimError> {
    if refresh {
        let (a_damped, g_damped) = damp_factors(&pair.a_factor, &pair.g_factor, gamma)?;
        pair.a_inv = Some(linalg::invert_spd(&a_damped)?);
        pair.g_inv = Some(linalg::invert_spd(&g_damped)?);
        pair.last_refresh = Some(iteration);
    }
    let (a_inv, g_inv) = match (&pair.a_inv, &pair.g_inv) {
        (Some(a), Some(g)) => (a, g),
        _ => return Err(FimError::StaleInverses),
    };
    Ok(linalg::kron_matvec(g_inv, a_inv, grad)?)
}

/// Per-sample (scale, shift) gradient rows of a batch-norm layer,
/// reduced over spatial positions: row n is
/// `[sum_s g.xhat per channel | sum_s g per channel]`.
pub fn bn_param_grad_rows(
    xhat_rows: &DenseMatrix,
    grad_rows: &DenseMatrix,
    channels: usize,
) -> Result<DenseMatrix, FimError> {
    if xhat_rows.rows() != grad_rows.rows() || xhat_rows.cols() != grad_rows.cols() {
        return Err(FimError::Dimension(
            "batch-norm capture shapes differ".into(),
        ));
    }
    if xhat_rows.cols() % channels != 0 {
        return Err(FimError::Dimension(format!(
            "capture width {} not divisible by {channels} channels",
            xhat_rows.cols()
        )));
    }
    let spatial = xhat_rows.cols() / channels;
    let m = xhat_rows.rows();
    let mut out = DenseMatrix::zeros(m, 2 * channels);
    for n in 0..m {
        let xh = xhat_rows.row(n);
        let g = grad_rows.row(n);
        for c in 0..channels {
            let mut dscale = 0.0;
            let mut dshift = 0.0;
            for s in 0..spatial {
                let k = c * spatial + s;
                dscale += g[k] * xh[k];
                dshift += g[k];
            }
            out.set(n, c, dscale);
            out.set(n, channels + c, dshift);
        }
    }
    Ok(out)
}

/// Fisher block from per-sample parameter-gradient rows: the full mode is
/// the mean outer product, the diagonal mode its diagonal (mean of
/// squared entries).
pub fn compute_bn_block(
    param_grad_rows: &DenseMatrix,
    mode: BnFimMode,
) -> Result<BnFisherBlock, FimError> {
    if param_grad_rows.rows() == 0 {
        return Err(FimError::EmptyCapture);
    }
    let data = match mode {
        BnFimMode::Full => BnFisherData::Full(second_moment(param_grad_rows)?),
        BnFimMode::Diagonal => {
            let d = param_grad_rows.cols();
            let n = param_grad_rows.rows() as f64;
            let mut diag = vec![0.0; d];
            for r in 0..param_grad_rows.rows() {
                for (acc, v) in diag.iter_mut().zip(param_grad_rows.row(r)) {
                    *acc += v * v;
                }
            }
            diag.iter_mut().for_each(|v| *v /= n);
            BnFisherData::Diagonal(diag)
        }
    };
    Ok(BnFisherBlock {
        data,
        last_refresh: None,
    })
}

/// Fisher block straight from a layer's captures; errors on non-BN layers.
pub fn compute_bn_block_for_layer(
    layer: &Layer,
    mode: BnFimMode,
) -> Result<BnFisherBlock, FimError> {
    let channels = match layer.spec.kind {
        LayerKind::BatchNorm { channels } => channels,
        _ => return Err(FimError::NotBatchNorm),
    };
    let xhat = layer
        .record
        .captured_input
        .as_ref()
        .ok_or(FimError::EmptyCapture)?;
    let grads = layer
        .record
        .captured_output_grad
        .as_ref()
        .ok_or(FimError::EmptyCapture)?;
    let rows = bn_param_grad_rows(xhat, grads, channels)?;
    compute_bn_block(&rows, mode)
}

/// Precondition a batch-norm gradient vector with the damped Fisher
/// block: `(F + gamma_bn I)^-1 grad` in full mode, elementwise
/// `grad_i / (diag_i + gamma_bn)` in diagonal mode.
pub fn precondition_bn(
    block: &BnFisherBlock,
    grad: &[f64],
    gamma_bn: f64,
) -> Result<Vec<f64>, FimError> {
    if gamma_bn <= 0.0 {
        return Err(FimError::NonPositiveDamping(gamma_bn));
    }
    match &block.data {
        BnFisherData::Full(f) => {
            if f.rows() != grad.len() {
                return Err(FimError::Dimension(format!(
                    "block dim {} vs gradient length {}",
                    f.rows(),
                    grad.len()
                )));
            }
            let damped = f.add_scaled_identity(gamma_bn);
            let inv = linalg::invert_spd(&damped)?;
            Ok(inv.matvec(grad))
        }
        BnFisherData::Diagonal(d) => {
            if d.len() != grad.len() {
                return Err(FimError::Dimension(format!(
                    "block dim {} vs gradient length {}",
                    d.len(),
                    grad.len()
                )));
            }
            Ok(grad
                .iter()
                .zip(d.iter())
                .map(|(g, di)| g / (di + gamma_bn))
                .collect())
        }
    }
}

/// Blend a freshly computed factor with its predecessor:
/// `(1 - ema) * new + ema * prev`. `ema = 0` keeps the single-batch
/// estimate.
pub fn blend_ema(new: DenseMatrix, prev: Option<&DenseMatrix>, ema: f64) -> DenseMatrix {
    match prev {
        Some(p) if ema > 0.0 => {
            let mut out = new.scaled(1.0 - ema);
            for (o, pv) in out.values_mut().iter_mut().zip(p.values()) {
                *o += ema * pv;
            }
            out
        }
        _ => new,
    }
}

/// One row of the curvature-memory report.
#[derive(Debug, Clone, PartialEq)]
pub struct FimMemoryRow {
    pub layer_index: usize,
    pub layer_kind: &'static str,
    pub a_bytes: u64,
    pub g_bytes: u64,
    pub f_bn_bytes: u64,
    pub mode: BnFimMode,
}

const REAL_BYTES: u64 = 8;

/// Per-layer curvature storage at the configured precision: dense factor
/// matrices for Kronecker layers, full or diagonal blocks for batch norm.
pub fn fim_memory_report(
    specs: &[crate::model::LayerSpec],
    mode: BnFimMode,
) -> Vec<FimMemoryRow> {
    specs
        .iter()
        .enumerate()
        .map(|(idx, spec)| match spec.kind {
            LayerKind::BatchNorm { channels } => {
                let d = 2 * channels as u64;
                let f_bn_bytes = match mode {
                    BnFimMode::Full => d * d * REAL_BYTES,
                    BnFimMode::Diagonal => d * REAL_BYTES,
                };
                FimMemoryRow {
                    layer_index: idx,
                    layer_kind: spec.kind_name(),
                    a_bytes: 0,
                    g_bytes: 0,
                    f_bn_bytes,
                    mode,
                }
            }
            _ => {
                let da = spec.input_cols().unwrap() as u64;
                let dg = spec.d_out() as u64;
                FimMemoryRow {
                    layer_index: idx,
                    layer_kind: spec.kind_name(),
                    a_bytes: da * da * REAL_BYTES,
                    g_bytes: dg * dg * REAL_BYTES,
                    f_bn_bytes: 0,
                    mode,
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_norm, invert_spd, kron};
    use crate::model::LayerSpec;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_rows(r: usize, c: usize, seed: u64) -> DenseMatrix {
        let mut rng = crate::rng::stream(&[seed]);
        let mut m = DenseMatrix::zeros(r, c);
        for v in m.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn a_factor_rank_one() {
        let rows = DenseMatrix::from_rows(&[&[1.0, 2.0]]);
        let a = compute_a_factor(&rows).unwrap();
        assert_eq!(a.values(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn a_factor_orthonormal_rows() {
        let rows = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = compute_a_factor(&rows).unwrap();
        assert_eq!(a.values(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn a_factor_bias_coordinate_survives_zero_activations() {
        let rows = DenseMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let a = compute_a_factor(&rows).unwrap();
        assert_eq!(a.values(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn g_factor_cases() {
        let single = DenseMatrix::from_rows(&[&[3.0]]);
        assert_eq!(compute_g_factor(&single).unwrap().values(), &[9.0]);
        let zero = DenseMatrix::zeros(4, 3);
        assert!(compute_g_factor(&zero)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(
            compute_g_factor(&DenseMatrix::zeros(0, 3)),
            Err(FimError::EmptyCapture)
        );
    }

    #[test]
    fn factors_are_psd() {
        for seed in 0..20 {
            let a = compute_a_factor(&random_rows(6, 4, seed)).unwrap();
            // min eigenvalue >= -1e-10 ||A||_F certified by a shifted Cholesky
            let shift = 1e-10 * frobenius_norm(&a) + 1e-300;
            assert!(invert_spd(&a.add_scaled_identity(shift)).is_ok());
        }
    }

    #[test]
    fn damp_identity_factors() {
        let a = DenseMatrix::identity(3);
        let g = DenseMatrix::identity(5);
        let (ad, gd) = damp_factors(&a, &g, 0.01).unwrap();
        for i in 0..3 {
            assert_relative_eq!(ad.get(i, i), 1.1, max_relative = 1e-14);
        }
        for i in 0..5 {
            assert_relative_eq!(gd.get(i, i), 1.1, max_relative = 1e-14);
        }
    }

    #[test]
    fn damp_trace_ratio_hand_case() {
        // tr(A)/dim = 4, tr(G)/dim = 1, gamma = 0.04 -> pi = 2
        let a = DenseMatrix::identity(2).scaled(4.0);
        let g = DenseMatrix::identity(3);
        let (ad, gd) = damp_factors(&a, &g, 0.04).unwrap();
        assert_relative_eq!(ad.get(0, 0), 4.4, max_relative = 1e-14);
        assert_relative_eq!(gd.get(0, 0), 1.1, max_relative = 1e-14);
    }

    #[test]
    fn damp_zero_trace_uses_unit_pi() {
        let a = DenseMatrix::zeros(2, 2);
        let g = DenseMatrix::identity(2);
        let (ad, _) = damp_factors(&a, &g, 0.04).unwrap();
        assert_relative_eq!(ad.get(0, 0), 0.2, max_relative = 1e-14);
    }

    #[test]
    fn damp_rejects_non_positive_gamma() {
        let i = DenseMatrix::identity(2);
        assert!(matches!(
            damp_factors(&i, &i, 0.0),
            Err(FimError::NonPositiveDamping(_))
        ));
    }

    #[test]
    fn damped_kron_dominates_gamma_shift() {
        // kron(g_d, a_d) - kron(G, A) - gamma I must be PSD
        for seed in 0..10 {
            let a_rows = random_rows(5, 2, seed * 2 + 1);
            let g_rows = random_rows(5, 2, seed * 2 + 2);
            let a = compute_a_factor(&a_rows).unwrap();
            let g = compute_g_factor(&g_rows).unwrap();
            let gamma = 0.3;
            let (ad, gd) = damp_factors(&a, &g, gamma).unwrap();
            let lhs = kron(&gd, &ad);
            let rhs = kron(&g, &a).add_scaled_identity(gamma);
            let mut diff = lhs.clone();
            for (d, r) in diff.values_mut().iter_mut().zip(rhs.values()) {
                *d -= r;
            }
            let shift = 1e-10 * frobenius_norm(&diff).max(1.0);
            assert!(invert_spd(&diff.add_scaled_identity(shift)).is_ok());
        }
    }

    #[test]
    fn precondition_identity_factors() {
        let mut pair = KroneckerPair::new(DenseMatrix::identity(2), DenseMatrix::identity(2));
        let grad = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = precondition(&mut pair, &grad, 0.01, true, 0).unwrap();
        for (o, g) in out.values().iter().zip(grad.values()) {
            assert_relative_eq!(*o, g / (1.1 * 1.1), max_relative = 1e-12);
        }
        assert_eq!(pair.last_refresh, Some(0));
    }

    #[test]
    fn precondition_matches_dense_kron_inverse() {
        let a = compute_a_factor(&random_rows(8, 3, 41)).unwrap();
        let g = compute_g_factor(&random_rows(8, 2, 42)).unwrap();
        let grad = random_rows(2, 3, 43);
        let gamma = 0.05;

        let mut pair = KroneckerPair::new(a.clone(), g.clone());
        let fast = precondition(&mut pair, &grad, gamma, true, 3).unwrap();

        let (ad, gd) = damp_factors(&a, &g, gamma).unwrap();
        let dense_inv = invert_spd(&kron(&gd, &ad)).unwrap();
        let expect = dense_inv.matvec(grad.values());
        for (e, o) in expect.iter().zip(fast.values()) {
            let denom = e.abs().max(o.abs()).max(1e-30);
            assert!((e - o).abs() / denom <= 1e-10);
        }
    }

    #[test]
    fn stale_path_is_pure() {
        let a = compute_a_factor(&random_rows(6, 3, 51)).unwrap();
        let g = compute_g_factor(&random_rows(6, 2, 52)).unwrap();
        let grad = random_rows(2, 3, 53);
        let mut pair = KroneckerPair::new(a, g);
        precondition(&mut pair, &grad, 0.1, true, 1).unwrap();
        let s1 = precondition(&mut pair, &grad, 0.2, false, 2).unwrap();
        let s2 = precondition(&mut pair, &grad, 0.3, false, 3).unwrap();
        assert_eq!(s1.values(), s2.values());
        assert_eq!(pair.last_refresh, Some(1));
    }

    #[test]
    fn never_refreshed_pair_errors() {
        let mut pair = KroneckerPair::new(DenseMatrix::identity(2), DenseMatrix::identity(2));
        let grad = DenseMatrix::zeros(2, 2);
        assert_eq!(
            precondition(&mut pair, &grad, 0.1, false, 0),
            Err(FimError::StaleInverses)
        );
    }

    #[test]
    fn large_damping_recovers_scaled_gradient() {
        // with gamma -> inf, gamma * precond -> grad on unit-scale factors
        let a = DenseMatrix::identity(3);
        let g = DenseMatrix::identity(2);
        let grad = random_rows(2, 3, 61);
        let gamma = 1e6;
        let mut pair = KroneckerPair::new(a, g);
        let out = precondition(&mut pair, &grad, gamma, true, 0).unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (o, gv) in out.values().iter().zip(grad.values()) {
            diff += (gamma * o - gv) * (gamma * o - gv);
            norm += gv * gv;
        }
        assert!((diff / norm).sqrt() <= 0.01);
    }

    #[test]
    fn bn_block_hand_case() {
        let rows = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let full = compute_bn_block(&rows, BnFimMode::Full).unwrap();
        match &full.data {
            BnFisherData::Full(f) => {
                assert_eq!(f.values(), &[5.0, 7.0, 7.0, 10.0]);
            }
            _ => panic!("expected full block"),
        }
        let diag = compute_bn_block(&rows, BnFimMode::Diagonal).unwrap();
        match &diag.data {
            BnFisherData::Diagonal(d) => assert_eq!(d.as_slice(), &[5.0, 10.0]),
            _ => panic!("expected diagonal block"),
        }
    }

    #[test]
    fn bn_diag_equals_full_diagonal() {
        let rows = random_rows(7, 6, 71);
        let full = compute_bn_block(&rows, BnFimMode::Full).unwrap();
        let diag = compute_bn_block(&rows, BnFimMode::Diagonal).unwrap();
        match (&full.data, &diag.data) {
            (BnFisherData::Full(f), BnFisherData::Diagonal(d)) => {
                for (i, dv) in d.iter().enumerate() {
                    assert_eq!(f.get(i, i), *dv);
                }
            }
            _ => panic!("mode mismatch"),
        }
    }

    #[test]
    fn bn_zero_grads_zero_block() {
        let rows = DenseMatrix::zeros(4, 2);
        let b = compute_bn_block(&rows, BnFimMode::Full).unwrap();
        match &b.data {
            BnFisherData::Full(f) => assert!(f.values().iter().all(|v| *v == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn precondition_bn_cases() {
        // F = 0 -> grad / gamma
        let zero = compute_bn_block(&DenseMatrix::zeros(2, 2), BnFimMode::Full).unwrap();
        let out = precondition_bn(&zero, &[1.0, 2.0], 0.5).unwrap();
        assert_relative_eq!(out[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(out[1], 4.0, max_relative = 1e-12);

        // diagonal [5, 10], gamma 1, grad [6, 22] -> [1, 2]
        let diag = BnFisherBlock {
            data: BnFisherData::Diagonal(vec![5.0, 10.0]),
            last_refresh: None,
        };
        let out = precondition_bn(&diag, &[6.0, 22.0], 1.0).unwrap();
        assert_relative_eq!(out[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(out[1], 2.0, max_relative = 1e-12);

        // full and diagonal agree on a truly diagonal F
        let f = DenseMatrix::from_rows(&[&[5.0, 0.0], &[0.0, 10.0]]);
        let full = BnFisherBlock {
            data: BnFisherData::Full(f),
            last_refresh: None,
        };
        let a = precondition_bn(&full, &[6.0, 22.0], 1.0).unwrap();
        let b = precondition_bn(&diag, &[6.0, 22.0], 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn precondition_bn_dimension_error() {
        let diag = BnFisherBlock {
            data: BnFisherData::Diagonal(vec![1.0, 2.0]),
            last_refresh: None,
        };
        assert!(matches!(
            precondition_bn(&diag, &[1.0], 1.0),
            Err(FimError::Dimension(_))
        ));
    }

    #[test]
    fn memory_report_cases() {
        use crate::model::LayerKind::*;
        let specs = vec![
            LayerSpec {
                kind: FullyConnected {
                    in_features: 10,
                    out_features: 10,
                },
                has_bias: true,
            },
            LayerSpec {
                kind: BatchNorm { channels: 64 },
                has_bias: true,
            },
        ];
        let full = fim_memory_report(&specs, BnFimMode::Full);
        assert_eq!(full[0].a_bytes, 11 * 11 * 8);
        assert_eq!(full[0].g_bytes, 10 * 10 * 8);
        assert_eq!(full[1].f_bn_bytes, 128 * 128 * 8);
        let diag = fim_memory_report(&specs, BnFimMode::Diagonal);
        assert_eq!(diag[1].f_bn_bytes, 128 * 8);
        assert!(fim_memory_report(&[], BnFimMode::Full).is_empty());
    }

    #[test]
    fn ema_blend() {
        let new = DenseMatrix::identity(2);
        let prev = DenseMatrix::identity(2).scaled(3.0);
        let out = blend_ema(new.clone(), Some(&prev), 0.5);
        assert_relative_eq!(out.get(0, 0), 2.0, max_relative = 1e-15);
        let off = blend_ema(new.clone(), Some(&prev), 0.0);
        assert_eq!(off.values(), new.values());
        let seedless = blend_ema(new.clone(), None, 0.9);
        assert_eq!(seedless.values(), new.values());
    }
}
