//! Training objectives.

/// Two-class softmax cross-entropy. Returns the loss and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], label: bool) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let target = label as usize;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, z)| (z - lse).exp() - (k == target) as u8 as f64)
        .collect();
    (lse - logits[target], grad)
}

/// Probability of class 1 from two logits.
pub fn positive_probability(logits: &[f64]) -> f64 {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    e1 / (e0 + e1)
}

/// Loss of one embedding pair: `D^2` for a same-class pair and
/// `max(0, margin - D)^2` for a cross-class pair.
pub fn pair_loss(a: &[f64], b: &[f64], same_class: bool, margin: f64) -> f64 {
    let d = distance(a, b);
    if same_class {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pair loss over every unordered pair in the batch, with the gradient
/// for each embedding. A batch of one embedding has zero loss.
pub fn contrastive(embeddings: &[Vec<f64>], labels: &[bool], margin: f64) -> (f64, Vec<Vec<f64>>) {
    let n = embeddings.len();
    let mut grads: Vec<Vec<f64>> = embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
    let pairs = n * n.saturating_sub(1) / 2;
    if pairs == 0 {
        return (0.0, grads);
    }
    let scale = 1.0 / pairs as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            let d = distance(a, b);
            // d(loss)/d(a) = coeff * (a - b)
            let coeff = if labels[i] == labels[j] {
                total += d * d;
                2.0
            } else if d < margin {
                total += (margin - d).powi(2);
                if d > 0.0 {
                    -2.0 * (margin - d) / d
                } else {
                    0.0
                }
            } else {
                0.0
            };
            if coeff != 0.0 {
                for k in 0..a.len() {
                    let g = scale * coeff * (a[k] - b[k]);
                    grads[i][k] += g;
                    grads[j][k] -= g;
                }
            }
        }
    }
    (total * scale, grads)
}
