//! Masked-LM cross-entropy and KL regularization as pure numeric functions.
//!
//! Everything operates on plain f64 matrices and returns values in nats.
//! The KL term treats each hidden-state row as a distribution via softmax
//! over the hidden dimension and averages KL(model || reference) over
//! positions. Analytic gradients are provided for both terms so a small
//! gradient-descent loop can run without an autodiff system.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("all positions are ignore-marked; the loss is undefined")]
    AllPositionsIgnored,
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("targets length {targets} does not match {rows} logit rows")]
    TargetLengthMismatch { targets: usize, rows: usize },
    #[error("target {target} at position {position} exceeds vocabulary size {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: u32,
        vocab: usize,
    },
    #[error("input contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("mask probability must be in (0, 1), got {0}")]
    BadMaskProb(f64),
    #[error("beta must be non-negative and finite, got {0}")]
    BadBeta(f64),
    #[error("cannot mask an empty sequence")]
    EmptySequence,
    #[error("no position selected after resampling once")]
    NoPositionSelected,
}

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows
            .iter()
            .inspect(|r| assert_eq!(r.len(), cols, "ragged rows"))
            .flatten()
            .copied()
            .collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check_finite(&self) -> Result<(), ObjectiveError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite {
                    row: i / self.cols.max(1),
                    col: i % self.cols.max(1),
                });
            }
        }
        Ok(())
    }
}

/// Inputs to the combined adaptation objective.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub mlm_logits: Matrix,
    /// Per-position target id, `None` for ignored positions.
    pub mlm_targets: Vec<Option<u32>>,
    pub h_model: Matrix,
    pub h_ref: Matrix,
    pub beta: f64,
    pub mask_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mlm: f64,
    pub kl: f64,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn validate_targets(logits: &Matrix, targets: &[Option<u32>]) -> Result<usize, ObjectiveError> {
    if targets.len() != logits.rows() {
        return Err(ObjectiveError::TargetLengthMismatch {
            targets: targets.len(),
            rows: logits.rows(),
        });
    }
    logits.check_finite()?;
    let mut valid = 0usize;
    for (position, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            if *t as usize >= logits.cols() {
                return Err(ObjectiveError::TargetOutOfRange {
                    position,
                    target: *t,
                    vocab: logits.cols(),
                });
            }
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(ObjectiveError::AllPositionsIgnored);
    }
    Ok(valid)
}

/// Mean cross-entropy (nats) over non-ignored positions, computed with a
/// numerically stable log-sum-exp.
pub fn mlm_loss(logits: &Matrix, targets: &[Option<u32>]) -> Result<f64, ObjectiveError> {
    let valid = validate_targets(logits, targets)?;
    let mut total = 0.0;
    for (r, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            let row = logits.row(r);
            total += log_sum_exp(row) - row[*t as usize];
        }
    }
    Ok(total / valid as f64)
}

/// Loss plus gradient with respect to the logits.
pub fn mlm_loss_grad(
    logits: &Matrix,
    targets: &[Option<u32>],
) -> Result<(f64, Matrix), ObjectiveError> {
    let valid = validate_targets(logits, targets)? as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = target else { continue };
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        total += lse - row[*t as usize];
        let out = grad.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            out[c] = (v - lse).exp() / valid;
        }
        out[*t as usize] -= 1.0 / valid;
    }
    Ok((total / valid, grad))
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<(), ObjectiveError> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(ObjectiveError::ShapeMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    a.check_finite()?;
    b.check_finite()
}

/// Mean over positions of KL(softmax(model row) || softmax(reference row)),
/// in nats. Zero exactly when the rows induce identical distributions.
pub fn kl_regularizer(h_model: &Matrix, h_ref: &Matrix) -> Result<f64, ObjectiveError> {
    check_same_shape(h_model, h_ref)?;
    let mut total = 0.0;
    for r in 0..h_model.rows() {
        total += kl_row(h_model.row(r), h_ref.row(r)).0;
    }
    Ok(total / h_model.rows() as f64)
}

/// KL plus gradient with respect to the model hidden states.
pub fn kl_regularizer_grad(
    h_model: &Matrix,
    h_ref: &Matrix,
) -> Result<(f64, Matrix), ObjectiveError> {
    check_same_shape(h_model, h_ref)?;
    let rows = h_model.rows() as f64;
    let mut grad = Matrix::zeros(h_model.rows(), h_model.cols());
    let mut total = 0.0;
    for r in 0..h_model.rows() {
        let (kl, log_p, log_q) = kl_row(h_model.row(r), h_ref.row(r));
        total += kl;
        let out = grad.row_mut(r);
        for c in 0..log_p.len() {
            let p = log_p[c].exp();
            out[c] = p * ((log_p[c] - log_q[c]) - kl) / rows;
        }
    }
    Ok((total / rows, grad))
}

fn kl_row(model: &[f64], reference: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let lse_m = log_sum_exp(model);
    let lse_r = log_sum_exp(reference);
    let log_p: Vec<f64> = model.iter().map(|v| v - lse_m).collect();
    let log_q: Vec<f64> = reference.iter().map(|v| v - lse_r).collect();
    let kl = log_p
        .iter()
        .zip(&log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum();
    (kl, log_p, log_q)
}

/// `total = mlm + beta * kl`, with the components for logging.
pub fn combined_loss(inputs: &LossInputs) -> Result<LossBreakdown, ObjectiveError> {
    if inputs.beta < 0.0 || !inputs.beta.is_finite() {
        return Err(ObjectiveError::BadBeta(inputs.beta));
    }
    if !(inputs.mask_prob > 0.0 && inputs.mask_prob < 1.0) {
        return Err(ObjectiveError::BadMaskProb(inputs.mask_prob));
    }
    let mlm = mlm_loss(&inputs.mlm_logits, &inputs.mlm_targets)?;
    let kl = kl_regularizer(&inputs.h_model, &inputs.h_ref)?;
    Ok(LossBreakdown {
        total: mlm + inputs.beta * kl,
        mlm,
        kl,
    })
}

/// Masking policy for [`mask_sample_with_policy`].
#[derive(Debug, Clone, Copy)]
pub enum MaskPolicy {
    /// Every selected position becomes the mask token.
    Pure,
    /// BERT-style 80/10/10 split: mask / random token / keep. Random
    /// replacements draw uniformly from `[0, vocab_size)`.
    Split801010 { vocab_size: u32 },
}

/// Select positions independently with probability `mask_prob`, replace them
/// with `mask_id`, and record the originals as targets. If no position is
/// selected, resamples once before giving up.
pub fn mask_sample(
    ids: &[u32],
    mask_prob: f64,
    mask_id: u32,
    seed: u64,
) -> Result<(Vec<u32>, Vec<Option<u32>>), ObjectiveError> {
    mask_sample_with_policy(ids, mask_prob, mask_id, seed, MaskPolicy::Pure)
}

pub fn mask_sample_with_policy(
    ids: &[u32],
    mask_prob: f64,
    mask_id: u32,
    seed: u64,
    policy: MaskPolicy,
) -> Result<(Vec<u32>, Vec<Option<u32>>), ObjectiveError> {
    if ids.is_empty() {
        return Err(ObjectiveError::EmptySequence);
    }
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(ObjectiveError::BadMaskProb(mask_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..2 {
        let mut masked = ids.to_vec();
        let mut targets: Vec<Option<u32>> = vec![None; ids.len()];
        let mut any = false;
        for (pos, &id) in ids.iter().enumerate() {
            if !rng.gen_bool(mask_prob) {
                continue;
            }
            any = true;
            targets[pos] = Some(id);
            masked[pos] = match policy {
                MaskPolicy::Pure => mask_id,
                MaskPolicy::Split801010 { vocab_size } => {
                    let roll: f64 = rng.gen_range(0.0..1.0);
                    if roll < 0.8 {
                        mask_id
                    } else if roll < 0.9 {
                        rng.gen_range(0..vocab_size)
                    } else {
                        id
                    }
                }
            };
        }
        if any {
            return Ok((masked, targets));
        }
    }
    Err(ObjectiveError::NoPositionSelected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_v() {
        for v in [2usize, 7, 100] {
            let logits = Matrix::from_vec(1, v, vec![0.3; v]);
            let loss = mlm_loss(&logits, &[Some(0)]).unwrap();
            assert!((loss - (v as f64).ln()).abs() < 1e-6, "v={v}");
        }
    }

    #[test]
    fn peaked_logits_cost_nothing() {
        let logits = Matrix::from_vec(2, 3, vec![500.0, 0.0, 0.0, 0.0, 500.0, 0.0]);
        let loss = mlm_loss(&logits, &[Some(0), Some(1)]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]);
        let loss = mlm_loss(&logits, &[Some(0)]).unwrap();
        let expected = -(2.0f64 / 3.0).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.4055).abs() < 1e-4);
    }

    #[test]
    fn ignored_positions_are_skipped() {
        let logits = Matrix::from_vec(2, 2, vec![2.0f64.ln(), 0.0, -55.0, 55.0]);
        let loss = mlm_loss(&logits, &[Some(0), None]).unwrap();
        assert!((loss - -(2.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            mlm_loss(&logits, &[None]),
            Err(ObjectiveError::AllPositionsIgnored)
        ));
    }

    #[test]
    fn kl_of_identical_rows_is_exactly_zero() {
        let h = Matrix::from_vec(3, 4, vec![0.3, -1.0, 2.0, 0.0, 5.0, 5.0, 5.0, 5.0, -2.0, 0.1, 0.2, 0.3]);
        let kl = kl_regularizer(&h, &h.clone()).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // softmax([ln 2, 0]) = (2/3, 1/3); softmax([0, 0]) = (1/2, 1/2)
        let model = Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]);
        let reference = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let kl = kl_regularizer(&model, &reference).unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.056633).abs() < 1e-4);
    }

    #[test]
    fn kl_is_shift_invariant_per_row() {
        let model = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let shifted = Matrix::from_vec(1, 3, vec![7.5, 6.0, 9.0]);
        let reference = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        let a = kl_regularizer(&model, &reference).unwrap();
        let b = kl_regularizer(&shifted, &reference).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_detects_perturbation() {
        let model = Matrix::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let mut reference = model.clone();
        reference.row_mut(0)[2] += 0.25;
        let kl = kl_regularizer(&model, &reference).unwrap();
        assert!(kl > 0.0);
    }

    #[test]
    fn beta_zero_reduces_to_mlm() {
        let inputs = LossInputs {
            mlm_logits: Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]),
            mlm_targets: vec![Some(0)],
            h_model: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
            h_ref: Matrix::from_vec(1, 2, vec![0.0, 1.0]),
            beta: 0.0,
            mask_prob: 0.15,
        };
        let out = combined_loss(&inputs).unwrap();
        assert_eq!(out.total, out.mlm);
        assert!(out.kl > 0.0);
    }

    #[test]
    fn combined_is_monotone_in_beta() {
        let mut inputs = LossInputs {
            mlm_logits: Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]),
            mlm_targets: vec![Some(0)],
            h_model: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
            h_ref: Matrix::from_vec(1, 2, vec![0.0, 1.0]),
            beta: 0.0,
            mask_prob: 0.15,
        };
        let mut last = combined_loss(&inputs).unwrap().total;
        for beta in [0.25, 0.5, 1.0, 2.0] {
            inputs.beta = beta;
            let now = combined_loss(&inputs).unwrap().total;
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn joint_minimum_is_zero() {
        let h = Matrix::from_vec(1, 2, vec![0.25, 0.75]);
        let inputs = LossInputs {
            mlm_logits: Matrix::from_vec(1, 2, vec![800.0, 0.0]),
            mlm_targets: vec![Some(0)],
            h_model: h.clone(),
            h_ref: h,
            beta: 1.0,
            mask_prob: 0.15,
        };
        let out = combined_loss(&inputs).unwrap();
        assert!(out.total < 1e-9);
    }

    #[test]
    fn mlm_gradient_matches_central_differences() {
        let logits = Matrix::from_vec(2, 3, vec![0.5, -0.25, 1.5, 0.0, 2.0, -1.0]);
        let targets = vec![Some(2), Some(0)];
        let (_, grad) = mlm_loss_grad(&logits, &targets).unwrap();
        let numeric = unibridge_testkit::central_difference_grad(
            |x| {
                let m = Matrix::from_vec(2, 3, x.to_vec());
                mlm_loss(&m, &targets).unwrap()
            },
            logits.data(),
            1e-6,
        );
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn kl_gradient_matches_central_differences() {
        let model = Matrix::from_vec(2, 3, vec![0.5, -0.25, 1.5, 0.0, 2.0, -1.0]);
        let reference = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.5, -0.5, 0.25, 0.75]);
        let (_, grad) = kl_regularizer_grad(&model, &reference).unwrap();
        let numeric = unibridge_testkit::central_difference_grad(
            |x| {
                let m = Matrix::from_vec(2, 3, x.to_vec());
                kl_regularizer(&m, &reference).unwrap()
            },
            model.data(),
            1e-6,
        );
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        assert!(matches!(
            kl_regularizer(&a, &b),
            Err(ObjectiveError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_rate_is_near_requested() {
        let ids: Vec<u32> = (0..10_000).map(|i| 10 + (i % 50)).collect();
        let (masked, targets) = mask_sample(&ids, 0.15, 4, 97).unwrap();
        let selected = targets.iter().filter(|t| t.is_some()).count();
        let fraction = selected as f64 / ids.len() as f64;
        assert!((0.13..=0.17).contains(&fraction), "fraction = {fraction}");
        for (pos, target) in targets.iter().enumerate() {
            match target {
                Some(original) => {
                    assert_eq!(masked[pos], 4);
                    assert_eq!(*original, ids[pos]);
                }
                None => assert_eq!(masked[pos], ids[pos]),
            }
        }
    }

    #[test]
    fn masking_is_deterministic() {
        let ids: Vec<u32> = (0..100).collect();
        let a = mask_sample(&ids, 0.15, 4, 5).unwrap();
        let b = mask_sample(&ids, 0.15, 4, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_draw_errors_after_one_resample() {
        let ids = vec![1, 2, 3];
        let err = mask_sample(&ids, 1e-12, 4, 0).unwrap_err();
        assert!(matches!(err, ObjectiveError::NoPositionSelected));
    }

    #[test]
    fn split_policy_keeps_targets_for_every_selection() {
        let ids: Vec<u32> = (0..5000).map(|i| i % 40).collect();
        let (masked, targets) = mask_sample_with_policy(
            &ids,
            0.3,
            4,
            11,
            MaskPolicy::Split801010 { vocab_size: 40 },
        )
        .unwrap();
        let mut kept = 0;
        let mut switched = 0;
        let mut masked_count = 0;
        for (pos, target) in targets.iter().enumerate() {
            if target.is_some() {
                if masked[pos] == 4 {
                    masked_count += 1;
                } else if masked[pos] == ids[pos] {
                    kept += 1;
                } else {
                    switched += 1;
                }
            }
        }
        assert!(masked_count > 0 && kept > 0 && switched > 0);
    }
}
