//! Per-token stability features computed from a perturbation trajectory.
//!
//! Layout of the 75 values:
//!
//! | range  | group |
//! |--------|-------|
//! | 0..12  | original-state features |
//! | 12..15 | jacobian norm, epsilon-to-flip, PEI |
//! | 15..47 | 8 perturbed-state metrics x (min, max, mean, std) |
//! | 47..75 | 7 original-vs-perturbed metrics x (min, max, mean, std) |
//!
//! Logs are natural. Probabilities are floored at `1e-12` inside entropy and
//! divergence logs. Standard deviations are population (divide by `S`).

use crate::error::{Error, Result};
use crate::perturbation::{argmax, l2_norm, log_softmax, perturb, PerturbationConfig, TokenTrajectory};
use crate::probe_data::{AnswerFormat, AnswerRecord, LmHead};

pub const FEATURE_DIM: usize = 75;
pub const ORIGINAL_FEATURES: usize = 12;
pub const OVERALL_FEATURES: usize = 3;
pub const PERTURBED_FEATURES: usize = 32;
pub const COMPARISON_FEATURES: usize = 28;

pub const PROB_FLOOR: f64 = 1e-12;

const ORIGINAL_NAMES: [&str; ORIGINAL_FEATURES] = [
    "original_log_prob_actual",
    "original_prob_actual",
    "original_logit_actual",
    "original_prob_argmax",
    "original_logit_argmax",
    "original_entropy",
    "original_margin_logit_top1_top2",
    "original_margin_prob_top1_top2",
    "original_norm_logits_L2",
    "original_std_logits",
    "original_norm_hidden_state_L2",
    "is_actual_token_original_argmax",
];

const OVERALL_NAMES: [&str; OVERALL_FEATURES] = ["jacobian_norm_token", "epsilon_to_flip_token", "pei_value_token"];

const PERTURBED_METRICS: [&str; 8] = [
    "perturbed_log_prob_actual",
    "perturbed_prob_actual",
    "perturbed_logit_actual",
    "perturbed_prob_argmax",
    "perturbed_logit_argmax",
    "perturbed_entropy",
    "perturbed_margin_logit_top1_top2",
    "perturbed_norm_logits_L2",
];

const COMPARISON_METRICS: [&str; 7] = [
    "delta_log_prob_actual_from_original",
    "did_argmax_change_from_original",
    "kl_div_perturbed_from_original",
    "js_div_perturbed_from_original",
    "cosine_sim_logits_perturbed_to_original",
    "cosine_sim_hidden_perturbed_to_original",
    "l2_dist_hidden_perturbed_from_original",
];

const STATISTICS: [&str; 4] = ["min", "max", "mean", "std"];

/// Canonical name of every feature index.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ORIGINAL_NAMES.iter().chain(&OVERALL_NAMES).map(|s| s.to_string()).collect();
    for metric in PERTURBED_METRICS.iter().chain(&COMPARISON_METRICS) {
        for stat in STATISTICS {
            names.push(format!("{metric}_{stat}"));
        }
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub token_index: usize,
    pub values: [f64; FEATURE_DIM],
}

/// Feature rows of every token of one answer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub answer_id: String,
    pub label: bool,
    pub format: AnswerFormat,
    pub rows: Vec<FeatureVector>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Summary of the output distribution at one state.
struct DistStats {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
    top: usize,
    log_prob_actual: f64,
    prob_actual: f64,
    logit_actual: f64,
    prob_max: f64,
    logit_max: f64,
    entropy: f64,
    logit_margin: f64,
    prob_margin: f64,
    logit_norm: f64,
}

impl DistStats {
    fn new(logits: &[f64], token: usize) -> Self {
        let log_probs = log_softmax(logits);
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let top = argmax(logits);
        let (l1, l2) = top_two(logits);
        let (p1, p2) = top_two(&probs);
        Self {
            top,
            log_prob_actual: log_probs[token],
            prob_actual: probs[token],
            logit_actual: logits[token],
            prob_max: p1,
            logit_max: l1,
            entropy: entropy(&probs),
            logit_margin: l1 - l2,
            prob_margin: p1 - p2,
            logit_norm: l2_norm(logits),
            log_probs,
            probs,
        }
    }
}

/// Largest and second largest entries; the second is the first when there is
/// only one value.
fn top_two(values: &[f64]) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        second = first;
    }
    (first, second)
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * floored_ln(p)).sum::<f64>()
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (floored_ln(pi) - floored_ln(qi)) })
        .sum()
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    let js = 0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m);
    js.clamp(0.0, std::f64::consts::LN_2)
}

/// Cosine similarity; 0 when either vector has norm below `1e-12`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Population standard deviation of the values around their mean.
fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// (min, max, mean, std); a constant sequence yields exactly (c, c, c, 0).
pub fn summarize(values: &[f64]) -> [f64; 4] {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return [min, max, min, 0.0];
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    [min, max, mean, population_std(values)]
}

pub fn original_features(traj: &TokenTrajectory) -> [f64; ORIGINAL_FEATURES] {
    let d = DistStats::new(&traj.logits, traj.token);
    [
        d.log_prob_actual,
        d.prob_actual,
        d.logit_actual,
        d.prob_max,
        d.logit_max,
        d.entropy,
        d.logit_margin,
        d.prob_margin,
        d.logit_norm,
        summarize(&traj.logits)[3],
        l2_norm(&traj.hidden),
        (d.top == traj.token) as u8 as f64,
    ]
}

pub fn overall_features(traj: &TokenTrajectory) -> [f64; OVERALL_FEATURES] {
    let original_top = argmax(&traj.logits);
    let flip = traj
        .steps
        .iter()
        .find(|s| argmax(&s.logits) != original_top)
        .map_or(traj.config.no_flip_sentinel(), |s| s.epsilon);

    let lp0 = log_softmax(&traj.logits)[traj.token];
    let drops: f64 = traj.steps.iter().map(|s| lp0 - log_softmax(&s.logits)[traj.token]).sum();
    let pei = drops / traj.steps.len() as f64;

    [l2_norm(&traj.jacobian), flip, pei]
}

pub fn perturbed_features(traj: &TokenTrajectory) -> [f64; PERTURBED_FEATURES] {
    let mut per_metric: [Vec<f64>; 8] = Default::default();
    for step in &traj.steps {
        let d = DistStats::new(&step.logits, traj.token);
        let metrics = [
            d.log_prob_actual,
            d.prob_actual,
            d.logit_actual,
            d.prob_max,
            d.logit_max,
            d.entropy,
            d.logit_margin,
            d.logit_norm,
        ];
        for (acc, m) in per_metric.iter_mut().zip(metrics) {
            acc.push(m);
        }
    }
    flatten_summaries(&per_metric)
}

pub fn comparison_features(traj: &TokenTrajectory) -> [f64; COMPARISON_FEATURES] {
    let original = DistStats::new(&traj.logits, traj.token);
    let mut per_metric: [Vec<f64>; 7] = Default::default();
    for step in &traj.steps {
        let d = DistStats::new(&step.logits, traj.token);
        let dist: f64 = step
            .hidden
            .iter()
            .zip(&traj.hidden)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let metrics = [
            original.log_probs[traj.token] - d.log_probs[traj.token],
            (d.top != original.top) as u8 as f64,
            kl_divergence(&original.probs, &d.probs),
            js_divergence(&original.probs, &d.probs),
            cosine_similarity(&traj.logits, &step.logits),
            cosine_similarity(&traj.hidden, &step.hidden),
            dist,
        ];
        for (acc, m) in per_metric.iter_mut().zip(metrics) {
            acc.push(m);
        }
    }
    flatten_summaries(&per_metric)
}

fn flatten_summaries<const N: usize>(per_metric: &[Vec<f64>]) -> [f64; N] {
    let mut out = [0.0; N];
    for (chunk, values) in out.chunks_exact_mut(4).zip(per_metric) {
        chunk.copy_from_slice(&summarize(values));
    }
    out
}

/// All 75 features of one trajectory in canonical order.
pub fn token_features(traj: &TokenTrajectory) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    out[..12].copy_from_slice(&original_features(traj));
    out[12..15].copy_from_slice(&overall_features(traj));
    out[15..47].copy_from_slice(&perturbed_features(traj));
    out[47..].copy_from_slice(&comparison_features(traj));
    out
}

pub fn extract(record: &AnswerRecord, head: &LmHead, config: &PerturbationConfig) -> Result<FeatureMatrix> {
    record.validate(head.hidden_dim(), head.vocab_size(), record.format)?;
    let rows = record
        .token_ids
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let traj = perturb(head, record.hidden_state(i), t as usize, config)?;
            let values = token_features(&traj);
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "features",
                    format!("answer {} token {i}: feature {k} is not finite", record.answer_id),
                ));
            }
            Ok(FeatureVector { token_index: i, values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        answer_id: record.answer_id.clone(),
        label: record.label,
        format: record.format,
        rows,
    })
}

/// Extracts every record on `threads` workers (0 = rayon default). Output
/// order always matches input order.
pub fn extract_all(
    records: &[AnswerRecord],
    head: &LmHead,
    config: &PerturbationConfig,
    threads: usize,
) -> Result<Vec<FeatureMatrix>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("thread pool", e.to_string()))?;
    pool.install(|| records.par_iter().map(|r| extract(r, head, config)).collect())
}
