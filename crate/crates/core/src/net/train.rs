//! Two-stage training: contrastive pre-training of the encoder, then joint
//! cross-entropy fine-tuning of encoder and head.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use super::layers::{Matrix, Network};
use super::loss::{contrastive, cross_entropy};
use super::model::{encoder_spec, head_spec, ConfidenceModel, Standardizer};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::probe_data::AnswerFormat;

const INIT_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Contrastive margin.
    pub margin: f64,
    pub seed: u64,
    /// Cross-entropy weights for (incorrect, correct); unweighted when unset.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.1,
            batch_size: 32,
            pretrain_steps: 5_000,
            finetune_steps: 5_000,
            margin: 1.0,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::invalid("margin", "must be positive"));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid("class_weights", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Per-step training loss of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,loss\n");
        for (step, loss) in self.losses.iter().enumerate() {
            out.push_str(&format!("{step},{loss}\n"));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Shuffled mini-batches; reshuffles whenever fewer than a full batch remain.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

/// Standardized inputs and labels, checked for both classes.
pub struct TrainingSet {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<bool>,
}

impl TrainingSet {
    pub fn new(features: &[FeatureMatrix], standardizer: &Standardizer, format: AnswerFormat) -> Result<Self> {
        for m in features {
            if m.format != format || !format.accepts_len(m.len()) {
                return Err(Error::invalid(
                    "training features",
                    format!("answer {} ({} rows, {}) in a {} training set", m.answer_id, m.len(), m.format, format),
                ));
            }
        }
        let labels: Vec<bool> = features.iter().map(|m| m.label).collect();
        if !labels.iter().any(|&l| l) || !labels.iter().any(|&l| !l) {
            return Err(Error::invalid(
                "training features",
                "need at least one correct and one incorrect answer",
            ));
        }
        Ok(Self {
            inputs: features.iter().map(|m| standardizer.apply(m)).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean contrastive loss of a batch and its parameter gradient.
pub fn contrastive_batch(encoder: &Network, inputs: &[&Matrix], labels: &[bool], margin: f64) -> Result<(f64, Vec<f64>)> {
    let mut caches = Vec::with_capacity(inputs.len());
    let mut embeddings = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (e, cache) = encoder.forward_cached(x)?;
        embeddings.push(e.data);
        caches.push(cache);
    }
    let (loss, grad_e) = contrastive(&embeddings, labels, margin);
    let mut grads = vec![0.0; encoder.param_count()];
    for ((cache, g), e) in caches.iter().zip(grad_e).zip(&embeddings) {
        encoder.backward(cache, Matrix::from_rows(1, e.len(), g), &mut grads);
    }
    Ok((loss, grads))
}

/// Mean (optionally class-weighted) cross-entropy of a batch with gradients
/// for encoder and head.
pub fn cross_entropy_batch(
    encoder: &Network,
    head: &Network,
    inputs: &[&Matrix],
    labels: &[bool],
    class_weights: Option<[f64; 2]>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let weight = |label: bool| class_weights.map_or(1.0, |w| w[label as usize]);
    let total_weight: f64 = labels.iter().map(|&l| weight(l)).sum();
    let mut enc_grads = vec![0.0; encoder.param_count()];
    let mut head_grads = vec![0.0; head.param_count()];
    let mut loss = 0.0;
    for (x, &label) in inputs.iter().zip(labels) {
        let (e, enc_cache) = encoder.forward_cached(x)?;
        let (z, head_cache) = head.forward_cached(&e)?;
        let (l, g) = cross_entropy(&z.data, label);
        let scale = weight(label) / total_weight;
        loss += scale * l;
        let g = Matrix::from_rows(1, g.len(), g.into_iter().map(|v| v * scale).collect());
        let ge = head.backward(&head_cache, g, &mut head_grads);
        encoder.backward(&enc_cache, ge, &mut enc_grads);
    }
    Ok((loss, enc_grads, head_grads))
}

/// Runs `config.pretrain_steps` AdamW steps of the contrastive objective.
pub fn contrastive_pretrain(encoder: &mut Network, data: &TrainingSet, config: &TrainConfig) -> Result<LossCurve> {
    config.validate()?;
    let optimizer = config.optimizer();
    let mut state = AdamWState::new(encoder.param_count());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.rng(PRETRAIN_STREAM));
    let mut curve = LossCurve::default();
    for _ in 0..config.pretrain_steps {
        let batch = sampler.next_batch();
        let inputs: Vec<&Matrix> = batch.iter().map(|&i| &data.inputs[i]).collect();
        let labels: Vec<bool> = batch.iter().map(|&i| data.labels[i]).collect();
        let (loss, grads) = contrastive_batch(encoder, &inputs, &labels, config.margin)?;
        curve.losses.push(loss);
        adamw_step(&mut encoder.params, &grads, &mut state, &optimizer);
    }
    Ok(curve)
}

/// Runs `config.finetune_steps` AdamW steps of cross-entropy on encoder and
/// head together, then packages the model with parameters rounded to f32.
pub fn joint_finetune(
    format: AnswerFormat,
    mut encoder: Network,
    mut head: Network,
    standardizer: Standardizer,
    data: &TrainingSet,
    config: &TrainConfig,
) -> Result<(ConfidenceModel, LossCurve)> {
    config.validate()?;
    let optimizer = config.optimizer();
    let mut enc_state = AdamWState::new(encoder.param_count());
    let mut head_state = AdamWState::new(head.param_count());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.rng(FINETUNE_STREAM));
    let mut curve = LossCurve::default();
    for _ in 0..config.finetune_steps {
        let batch = sampler.next_batch();
        let inputs: Vec<&Matrix> = batch.iter().map(|&i| &data.inputs[i]).collect();
        let labels: Vec<bool> = batch.iter().map(|&i| data.labels[i]).collect();
        let (loss, enc_grads, head_grads) = cross_entropy_batch(&encoder, &head, &inputs, &labels, config.class_weights)?;
        curve.losses.push(loss);
        adamw_step(&mut encoder.params, &enc_grads, &mut enc_state, &optimizer);
        adamw_step(&mut head.params, &head_grads, &mut head_state, &optimizer);
    }
    let mut model = ConfidenceModel {
        format,
        encoder,
        head,
        standardizer,
        config: config.clone(),
    };
    model.round_to_f32();
    Ok((model, curve))
}

fn round_params(net: &mut Network) {
    for p in &mut net.params {
        *p = *p as f32 as f64;
    }
}

/// Freshly initialised encoder and head for `format`.
pub fn init_networks(format: AnswerFormat, config: &TrainConfig) -> (Network, Network) {
    let mut rng = config.rng(INIT_STREAM);
    let encoder = Network::init(encoder_spec(format), &mut rng);
    let head = Network::init(head_spec(format), &mut rng);
    (encoder, head)
}

pub struct TrainOutcome {
    pub model: ConfidenceModel,
    pub pretrain_curve: LossCurve,
    pub finetune_curve: LossCurve,
}

/// Full pipeline: fit the standardizer on the training rows, pre-train the
/// encoder contrastively, then fine-tune encoder and head jointly.
pub fn train(format: AnswerFormat, features: &[FeatureMatrix], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let standardizer = Standardizer::fit(features)?;
    let data = TrainingSet::new(features, &standardizer, format)?;
    let (mut encoder, mut head) = init_networks(format, config);
    let pretrain_curve = contrastive_pretrain(&mut encoder, &data, config)?;
    // Parameters pass through f32 between the stages, as in a pre-trained model file.
    round_params(&mut encoder);
    round_params(&mut head);
    let (model, finetune_curve) = joint_finetune(format, encoder, head, standardizer, &data, config)?;
    Ok(TrainOutcome {
        model,
        pretrain_curve,
        finetune_curve,
    })
}

/// Fine-tunes a model whose encoder was pre-trained separately, keeping its
/// standardizer and starting from its encoder and head weights.
pub fn finetune_from(start: &ConfidenceModel, features: &[FeatureMatrix], config: &TrainConfig) -> Result<(ConfidenceModel, LossCurve)> {
    config.validate()?;
    let data = TrainingSet::new(features, &start.standardizer, start.format)?;
    joint_finetune(
        start.format,
        start.encoder.clone(),
        start.head.clone(),
        start.standardizer.clone(),
        &data,
        config,
    )
}

/// Pre-training stage alone; the returned model carries the pre-trained
/// encoder and a freshly initialised head.
pub fn pretrain_only(format: AnswerFormat, features: &[FeatureMatrix], config: &TrainConfig) -> Result<(ConfidenceModel, LossCurve)> {
    config.validate()?;
    let standardizer = Standardizer::fit(features)?;
    let data = TrainingSet::new(features, &standardizer, format)?;
    let (mut encoder, head) = init_networks(format, config);
    let curve = contrastive_pretrain(&mut encoder, &data, config)?;
    let mut model = ConfidenceModel {
        format,
        encoder,
        head,
        standardizer,
        config: config.clone(),
    };
    model.round_to_f32();
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_visits_everything_each_epoch() {
        let mut s = BatchSampler::new(10, 5, ChaCha8Rng::seed_from_u64(0));
        let mut seen: Vec<usize> = s.next_batch().to_vec();
        seen.extend_from_slice(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch().len(), 5);
    }

    #[test]
    fn sampler_caps_batch_at_dataset_size() {
        let mut s = BatchSampler::new(3, 32, ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.next_batch().len(), 3);
        assert_eq!(s.next_batch().len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { class_weights: Some([1.0, -1.0]), ..Default::default() }.validate().is_err());
    }
}
