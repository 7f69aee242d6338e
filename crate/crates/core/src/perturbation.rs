//! Adversarial perturbation of a token's final hidden state.
//!
//! The loss of an observed token `t` is `-log softmax(W h + b)[t]`. Because
//! the head is linear its gradient has the closed form
//! `W^T (softmax(Z) - onehot(t))`. The state is then pushed along the unit
//! gradient in `S` equal steps up to `eps_max`, and every perturbed state is
//! projected back to logits.
//!
//! Stored values are f32; all arithmetic here runs in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe_data::LmHead;

/// Gradient norms below this are treated as an exactly-zero direction.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub eps_max: f64,
    pub steps: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            eps_max: 20.0,
            steps: 5,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_max.is_finite() && self.eps_max > 0.0) {
            return Err(Error::invalid("eps_max", "must be a positive finite number"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Magnitude of step `s` (1-based): `s * eps_max / S`.
    pub fn epsilon(&self, s: usize) -> f64 {
        s as f64 * (self.eps_max / self.steps as f64)
    }

    pub fn schedule(&self) -> Vec<f64> {
        (1..=self.steps).map(|s| self.epsilon(s)).collect()
    }

    /// Value reported as epsilon-to-flip when no step changes the argmax.
    pub fn no_flip_sentinel(&self) -> f64 {
        self.eps_max * (self.steps + 1) as f64 / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbStep {
    pub epsilon: f64,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Original state, gradient, and the perturbed states of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrajectory {
    pub token: usize,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// `-log P(token | hidden)`.
    pub loss: f64,
    pub jacobian: Vec<f64>,
    /// Unit gradient direction, or all zeros when the gradient vanishes.
    pub direction: Vec<f64>,
    pub steps: Vec<PerturbStep>,
    pub config: PerturbationConfig,
}

impl TokenTrajectory {
    pub fn is_degenerate(&self) -> bool {
        self.direction.iter().all(|&x| x == 0.0)
    }
}

/// `Z[v] = W[v] . h + b[v]`.
pub fn compute_logits(head: &LmHead, hidden: &[f32]) -> Result<Vec<f64>> {
    if hidden.len() != head.hidden_dim() {
        return Err(Error::Dimension {
            expected: head.hidden_dim(),
            got: hidden.len(),
        });
    }
    let h: Vec<f64> = hidden.iter().map(|&x| x as f64).collect();
    Ok(logits_f64(head, &h))
}

pub(crate) fn logits_f64(head: &LmHead, h: &[f64]) -> Vec<f64> {
    let bias = head.bias();
    (0..head.vocab_size())
        .map(|v| {
            let dot: f64 = head.row(v).iter().zip(h).map(|(&w, &x)| w as f64 * x).sum();
            dot + bias.map_or(0.0, |b| b[v] as f64)
        })
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Loss `-log P(token | h)` and its gradient with respect to `h`.
pub fn compute_jacobian(head: &LmHead, hidden: &[f32], token: usize) -> Result<(f64, Vec<f64>)> {
    let logits = compute_logits(head, hidden)?;
    jacobian_from_logits(head, &logits, token)
}

fn jacobian_from_logits(head: &LmHead, logits: &[f64], token: usize) -> Result<(f64, Vec<f64>)> {
    if token >= head.vocab_size() {
        return Err(Error::TokenOutOfRange {
            token: token as u32,
            vocab: head.vocab_size(),
        });
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[token];
    let mut grad = vec![0.0; head.hidden_dim()];
    for (v, &z) in logits.iter().enumerate() {
        let mut coeff = (z - lse).exp();
        if v == token {
            coeff -= 1.0;
        }
        if coeff == 0.0 {
            continue;
        }
        for (g, &w) in grad.iter_mut().zip(head.row(v)) {
            *g += coeff * w as f64;
        }
    }
    Ok((loss, grad))
}

pub fn perturb(head: &LmHead, hidden: &[f32], token: usize, config: &PerturbationConfig) -> Result<TokenTrajectory> {
    config.validate()?;
    let logits = compute_logits(head, hidden)?;
    let (loss, jacobian) = jacobian_from_logits(head, &logits, token)?;
    let h0: Vec<f64> = hidden.iter().map(|&x| x as f64).collect();

    let norm = l2_norm(&jacobian);
    let direction: Vec<f64> = if norm < ZERO_GRADIENT_NORM {
        vec![0.0; jacobian.len()]
    } else {
        jacobian.iter().map(|g| g / norm).collect()
    };
    let degenerate = norm < ZERO_GRADIENT_NORM;

    let steps = (1..=config.steps)
        .map(|s| {
            let epsilon = config.epsilon(s);
            if degenerate {
                return PerturbStep {
                    epsilon,
                    hidden: h0.clone(),
                    logits: logits.clone(),
                };
            }
            let h: Vec<f64> = h0.iter().zip(&direction).map(|(x, d)| x + epsilon * d).collect();
            let z = logits_f64(head, &h);
            PerturbStep {
                epsilon,
                hidden: h,
                logits: z,
            }
        })
        .collect();

    Ok(TokenTrajectory {
        token,
        hidden: h0,
        logits,
        loss,
        jacobian,
        direction,
        steps,
        config: *config,
    })
}
