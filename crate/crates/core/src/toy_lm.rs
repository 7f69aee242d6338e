//! Deterministic synthetic "language model" and graded-answer generator.
//!
//! The LM head is a Gaussian matrix scaled by `1/sqrt(d_h)`. Every answer
//! token is produced from a hidden state `h = scale * w_k + noise`, where
//! `w_k` is the unit-normalised head row of a randomly chosen target token.
//! Correct answers use a larger scale than incorrect ones, and the gap
//! between the two class means grows linearly with `separability`. The
//! emitted token is always the argmax of the head's logits for the stored
//! (f32) state.
//!
//! Randomness comes from ChaCha20 keyed by the little-endian seed (zero
//! padded to 32 bytes). Stream 0 draws the head; record `n` (counting from
//! `first_record`) draws from stream `n + 1`, so records can be generated in
//! any order or in parallel. Normals use the Box-Muller cosine branch over
//! 53-bit uniforms.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::{argmax, compute_logits};
use crate::probe_data::{AnswerFormat, AnswerRecord, LmHead, ProbeManifest, MAX_OE_TOKENS};

/// Hidden-state scale shared by both classes.
const BASE_SCALE: f64 = 3.0;
/// Half the class-mean gap at `separability = 1`.
const CLASS_OFFSET: f64 = 2.0;
/// Isotropic noise standard deviation.
const NOISE_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub d_h: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub n_records: usize,
    pub format: AnswerFormat,
    /// Longest open-ended answer; ignored for MC.
    pub max_len: usize,
    pub separability: f64,
    /// Global index of the first generated record. Splits that share a seed
    /// share the LM head; give them disjoint record ranges.
    pub first_record: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            d_h: 16,
            vocab_size: 32,
            seed: 0,
            n_records: 1000,
            format: AnswerFormat::Mc,
            max_len: 10,
            separability: 1.0,
            first_record: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::invalid("d_h", "must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size", "must be at least 2"));
        }
        if self.format == AnswerFormat::Oe && !(1..=MAX_OE_TOKENS).contains(&self.max_len) {
            return Err(Error::invalid("max_len", format!("must be in 1..={MAX_OE_TOKENS}")));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::invalid("separability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// ChaCha20 stream with the uniform and normal samplers used by the generator.
pub struct ToyRng {
    inner: ChaCha20Rng,
}

impl ToyRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

pub fn generate(config: &ToyLmConfig) -> Result<(ProbeManifest, LmHead, Vec<AnswerRecord>)> {
    config.validate()?;
    let head = generate_head(config)?;
    let records = (0..config.n_records)
        .map(|i| generate_record(config, &head, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = ProbeManifest::new(
        config.d_h,
        config.vocab_size,
        records.len() as u64,
        config.format,
        format!(
            "toy_lm seed={} separability={} first_record={}",
            config.seed, config.separability, config.first_record
        ),
    );
    Ok((manifest, head, records))
}

pub fn generate_head(config: &ToyLmConfig) -> Result<LmHead> {
    let mut rng = ToyRng::new(config.seed, 0);
    let scale = 1.0 / (config.d_h as f64).sqrt();
    let weights = (0..config.vocab_size * config.d_h)
        .map(|_| (rng.normal() * scale) as f32)
        .collect();
    LmHead::new(config.vocab_size, config.d_h, weights, None)
}

/// Record `index` of the split (its global position is `first_record + index`).
pub fn generate_record(config: &ToyLmConfig, head: &LmHead, index: usize) -> Result<AnswerRecord> {
    let global = config.first_record + index as u64;
    let mut rng = ToyRng::new(config.seed, global + 1);
    let label = rng.uniform() < 0.5;
    let len = match config.format {
        AnswerFormat::Mc => 1,
        AnswerFormat::Oe => 1 + rng.below(config.max_len),
    };
    let sign = if label { 1.0 } else { -1.0 };
    let scale = BASE_SCALE + sign * config.separability * CLASS_OFFSET;

    let d = config.d_h;
    let mut token_ids = Vec::with_capacity(len);
    let mut hidden_states = Vec::with_capacity(len * d);
    for _ in 0..len {
        let target = rng.below(config.vocab_size);
        let row = head.row(target);
        let norm = row.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        let state: Vec<f32> = row
            .iter()
            .map(|&w| (scale * w as f64 / norm + NOISE_STD * rng.normal()) as f32)
            .collect();
        let logits = compute_logits(head, &state)?;
        token_ids.push(argmax(&logits) as u32);
        hidden_states.extend_from_slice(&state);
    }

    Ok(AnswerRecord {
        answer_id: index.to_string(),
        token_ids,
        hidden_states,
        label,
        format: config.format,
    })
}
