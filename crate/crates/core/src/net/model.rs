//! Confidence model architectures, feature standardization and the model file.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "CCPM" u32 version u32 format-tag
//! u32 feature-dim
//! u32 encoder-layer-count, per layer u32 kind u32 inputs u32 outputs u32 kernel
//! u32 head-layer-count,    per layer (same)
//! feature-dim f64 means, feature-dim f64 standard deviations
//! u32 config-json-length, config JSON bytes
//! u32 encoder-param-count, f32 parameters
//! u32 head-param-count, f32 parameters
//! ```
//!
//! Layer kinds: 0 dense, 1 conv1d, 2 ELU, 3 ReLU, 4 global max pool.

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::layers::{LayerSpec, Matrix, Network};
use super::loss::positive_probability;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_DIM};
use crate::probe_data::AnswerFormat;

pub const MODEL_MAGIC: &[u8; 4] = b"CCPM";
pub const MODEL_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

/// 75 -> 64 -> 32 -> 16 -> 8 with ELU between layers.
pub fn mc_encoder_spec(input: usize) -> Vec<LayerSpec> {
    dense_stack(&[input, 64, 32, 16, 8], LayerSpec::Elu, false)
}

/// 8 -> 48 -> 24 -> 12 -> 2 with ELU after each hidden layer.
pub fn mc_head_spec() -> Vec<LayerSpec> {
    dense_stack(&[8, 48, 24, 12, 2], LayerSpec::Elu, false)
}

/// Two kernel-3 convolutions (to 64 then 32 channels) with ReLU, global max
/// pooling over tokens, and a linear projection to 16.
pub fn oe_encoder_spec(input: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d { inputs: input, outputs: 64, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Conv1d { inputs: 64, outputs: 32, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::GlobalMaxPool,
        LayerSpec::Dense { inputs: 32, outputs: 16 },
    ]
}

/// 16 -> 32 (ReLU) -> 2.
pub fn oe_head_spec() -> Vec<LayerSpec> {
    dense_stack(&[16, 32, 2], LayerSpec::Relu, false)
}

fn dense_stack(widths: &[usize], activation: LayerSpec, activate_last: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        layers.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
        if activate_last || i + 2 < widths.len() {
            layers.push(activation);
        }
    }
    layers
}

pub fn encoder_spec(format: AnswerFormat) -> Vec<LayerSpec> {
    match format {
        AnswerFormat::Mc => mc_encoder_spec(FEATURE_DIM),
        AnswerFormat::Oe => oe_encoder_spec(FEATURE_DIM),
    }
}

pub fn head_spec(format: AnswerFormat) -> Vec<LayerSpec> {
    match format {
        AnswerFormat::Mc => mc_head_spec(),
        AnswerFormat::Oe => oe_head_spec(),
    }
}

/// Per-feature z-score statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over every token row; deviations are floored at
    /// `STD_FLOOR`.
    pub fn fit(features: &[FeatureMatrix]) -> Result<Self> {
        let rows: Vec<&[f64; FEATURE_DIM]> = features.iter().flat_map(|m| m.rows.iter().map(|r| &r.values)).collect();
        if rows.is_empty() {
            return Err(Error::invalid("training features", "no feature rows"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; FEATURE_DIM];
        for r in &rows {
            for k in 0..FEATURE_DIM {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Matrix {
        let mut data = Vec::with_capacity(matrix.len() * FEATURE_DIM);
        for row in &matrix.rows {
            data.extend(row.values.iter().enumerate().map(|(k, v)| (v - self.mean[k]) / self.std[k]));
        }
        Matrix::from_rows(matrix.len(), FEATURE_DIM, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceModel {
    pub format: AnswerFormat,
    pub encoder: Network,
    pub head: Network,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
}

impl ConfidenceModel {
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    /// Rounds every parameter to f32, the precision of the model file.
    pub fn round_to_f32(&mut self) {
        for p in self.encoder.params.iter_mut().chain(self.head.params.iter_mut()) {
            *p = *p as f32 as f64;
        }
    }

    pub fn check_input(&self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.format != self.format {
            return Err(Error::invalid(
                "features",
                format!("{} features given to a {} model", matrix.format, self.format),
            ));
        }
        if matrix.rows.is_empty() {
            return Err(Error::invalid("features", "answer has no token rows"));
        }
        if self.format == AnswerFormat::Mc && matrix.len() != 1 {
            return Err(Error::invalid("features", format!("MC answer with {} rows", matrix.len())));
        }
        Ok(())
    }

    /// Embedding and confidence `P(correct)` for one answer.
    pub fn forward(&self, matrix: &FeatureMatrix) -> Result<(Vec<f64>, f64)> {
        self.check_input(matrix)?;
        let x = self.standardizer.apply(matrix);
        let embedding = self.encoder.forward(&x)?;
        let logits = self.head.forward(&embedding)?;
        Ok((embedding.data, positive_probability(&logits.data)))
    }

    pub fn predict(&self, matrix: &FeatureMatrix) -> Result<f64> {
        self.forward(matrix).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.format.tag())?;
        w.write_u32::<LittleEndian>(self.standardizer.mean.len() as u32)?;
        for net in [&self.encoder, &self.head] {
            w.write_u32::<LittleEndian>(net.layers().len() as u32)?;
            for layer in net.layers() {
                for field in encode_layer(layer) {
                    w.write_u32::<LittleEndian>(field)?;
                }
            }
        }
        for v in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        let config = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(&config)?;
        for net in [&self.encoder, &self.head] {
            w.write_u32::<LittleEndian>(net.params.len() as u32)?;
            for p in &net.params {
                w.write_f32::<LittleEndian>(*p as f32)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let corrupt = |r: &[u8], reason: String| Error::Corrupt {
            file: "model file".to_owned(),
            offset: (bytes.len() - r.len()) as u64,
            record: None,
            reason,
        };
        let io = |r: &[u8], e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                corrupt(r, "truncated".to_owned())
            } else {
                corrupt(r, e.to_string())
            }
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| io(r, e))?;
        if &magic != MODEL_MAGIC {
            return Err(corrupt(r, "bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))?;
        if version != MODEL_VERSION {
            return Err(corrupt(r, format!("unsupported version {version}")));
        }
        let tag = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))?;
        let format = AnswerFormat::from_tag(tag).ok_or_else(|| corrupt(r, format!("unknown format tag {tag}")))?;
        let dim = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
        if dim != FEATURE_DIM {
            return Err(corrupt(r, format!("feature dimension {dim}")));
        }

        let mut specs = Vec::new();
        for _ in 0..2 {
            let count = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
            if count > 64 {
                return Err(corrupt(r, format!("implausible layer count {count}")));
            }
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let mut fields = [0u32; 4];
                for f in &mut fields {
                    *f = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))?;
                }
                layers.push(decode_layer(fields).ok_or_else(|| corrupt(r, format!("unknown layer {fields:?}")))?);
            }
            specs.push(layers);
        }

        let mut stats = vec![0.0; 2 * dim];
        for v in &mut stats {
            *v = r.read_f64::<LittleEndian>().map_err(|e| io(r, e))?;
        }
        let std = stats.split_off(dim);
        let standardizer = Standardizer { mean: stats, std };

        let config_len = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
        if config_len > r.len() {
            return Err(corrupt(r, "truncated".into()));
        }
        let (config_bytes, rest) = r.split_at(config_len);
        let config: TrainConfig = serde_json::from_slice(config_bytes)?;
        r = rest;

        let mut nets = Vec::new();
        for layers in specs {
            let count = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
            if count * 4 > r.len() {
                return Err(corrupt(r, "truncated".into()));
            }
            let mut params = Vec::with_capacity(count);
            for _ in 0..count {
                params.push(r.read_f32::<LittleEndian>().map_err(|e| io(r, e))? as f64);
            }
            nets.push(Network::with_params(layers, params)?);
        }
        if !r.is_empty() {
            return Err(corrupt(r, "trailing bytes".into()));
        }
        let head = nets.pop().expect("two networks");
        let encoder = nets.pop().expect("two networks");
        Ok(Self {
            format,
            encoder,
            head,
            standardizer,
            config,
        })
    }
}

fn encode_layer(layer: &LayerSpec) -> [u32; 4] {
    match *layer {
        LayerSpec::Dense { inputs, outputs } => [0, inputs as u32, outputs as u32, 0],
        LayerSpec::Conv1d { inputs, outputs, kernel } => [1, inputs as u32, outputs as u32, kernel as u32],
        LayerSpec::Elu => [2, 0, 0, 0],
        LayerSpec::Relu => [3, 0, 0, 0],
        LayerSpec::GlobalMaxPool => [4, 0, 0, 0],
    }
}

fn decode_layer(fields: [u32; 4]) -> Option<LayerSpec> {
    let [kind, a, b, c] = fields.map(|v| v as usize);
    Some(match kind {
        0 => LayerSpec::Dense { inputs: a, outputs: b },
        1 if c % 2 == 1 => LayerSpec::Conv1d {
            inputs: a,
            outputs: b,
            kernel: c,
        },
        2 => LayerSpec::Elu,
        3 => LayerSpec::Relu,
        4 => LayerSpec::GlobalMaxPool,
        _ => return None,
    })
}
