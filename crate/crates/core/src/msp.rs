//! Training-free reference scorer: the geometric mean of the answer tokens'
//! original probabilities.

use crate::error::Result;
use crate::perturbation::{compute_logits, log_softmax};
use crate::probe_data::{AnswerRecord, LmHead};

pub fn msp_confidence(record: &AnswerRecord, head: &LmHead) -> Result<f64> {
    record.validate(head.hidden_dim(), head.vocab_size(), record.format)?;
    let mut total = 0.0;
    for (i, &t) in record.token_ids.iter().enumerate() {
        let logits = compute_logits(head, record.hidden_state(i))?;
        total += log_softmax(&logits)[t as usize];
    }
    Ok((total / record.len() as f64).exp())
}
