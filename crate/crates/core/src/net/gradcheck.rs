//! Finite-difference verification of the analytic gradients.

use super::layers::{Matrix, Network};
use super::train::{contrastive_batch, cross_entropy_batch};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn numeric_gradient(params: &mut [f64], mut loss: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let up = loss(params)?;
        params[i] = orig - FD_STEP;
        let down = loss(params)?;
        params[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Gradient check of the cross-entropy objective over encoder and head
/// parameters. Returns the largest relative error.
pub fn backprop_check(encoder: &Network, head: &Network, inputs: &[Matrix], labels: &[bool]) -> Result<f64> {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let (_, enc_grads, head_grads) = cross_entropy_batch(encoder, head, &refs, labels, None)?;

    let mut enc = encoder.clone();
    let mut params = enc.params.clone();
    let enc_numeric = numeric_gradient(&mut params, |p| {
        enc.params.copy_from_slice(p);
        cross_entropy_batch(&enc, head, &refs, labels, None).map(|r| r.0)
    })?;

    let mut hd = head.clone();
    let mut params = hd.params.clone();
    let head_numeric = numeric_gradient(&mut params, |p| {
        hd.params.copy_from_slice(p);
        cross_entropy_batch(encoder, &hd, &refs, labels, None).map(|r| r.0)
    })?;

    Ok(max_error(&enc_grads, &enc_numeric).max(max_error(&head_grads, &head_numeric)))
}

/// Gradient check of the contrastive objective over encoder parameters.
pub fn contrastive_check(encoder: &Network, inputs: &[Matrix], labels: &[bool], margin: f64) -> Result<f64> {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let (_, grads) = contrastive_batch(encoder, &refs, labels, margin)?;
    let mut enc = encoder.clone();
    let mut params = enc.params.clone();
    let numeric = numeric_gradient(&mut params, |p| {
        enc.params.copy_from_slice(p);
        contrastive_batch(&enc, &refs, labels, margin).map(|r| r.0)
    })?;
    Ok(max_error(&grads, &numeric))
}

/// Analytic parameter gradients of the cross-entropy objective, for tests
/// that inspect individual layers.
pub fn cross_entropy_gradients(encoder: &Network, head: &Network, inputs: &[Matrix], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let (_, e, h) = cross_entropy_batch(encoder, head, &refs, labels, None)?;
    Ok((e, h))
}
