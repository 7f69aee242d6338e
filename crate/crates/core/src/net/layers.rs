//! Layers and sequential networks with hand-written backpropagation.
//!
//! Activations flow as `Matrix` values with one row per token. Dense layers
//! and activations act row-wise, `Conv1d` mixes neighbouring rows, and
//! `GlobalMaxPool` collapses all rows into one.
//!
//! Parameters of a network live in one flat vector, layer by layer. Dense
//! weights are `(out, in)` row-major followed by `out` biases; convolution
//! weights are `(out, in, kernel)` followed by `out` biases.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Stride 1 with `kernel / 2` edge-replicated rows on each side.
    Conv1d { inputs: usize, outputs: usize, kernel: usize },
    Elu,
    Relu,
    GlobalMaxPool,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv1d { inputs, outputs, kernel } => inputs * outputs * kernel + outputs,
            _ => 0,
        }
    }

    /// Fan-in and fan-out used by the uniform initialiser.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv1d { inputs, outputs, kernel } => Some((inputs * kernel, outputs * kernel)),
            _ => None,
        }
    }

    fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } | LayerSpec::Conv1d { outputs, .. } => self.param_count() - outputs,
            _ => 0,
        }
    }

    fn output_cols(&self, cols: usize) -> Result<usize> {
        match *self {
            LayerSpec::Dense { inputs, outputs } | LayerSpec::Conv1d { inputs, outputs, .. } => {
                if cols != inputs {
                    return Err(Error::Dimension { expected: inputs, got: cols });
                }
                Ok(outputs)
            }
            _ => Ok(cols),
        }
    }

    fn forward(&self, params: &[f64], x: &Matrix) -> Matrix {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = params.split_at(inputs * outputs);
                let mut y = Matrix::zeros(x.rows, outputs);
                for r in 0..x.rows {
                    let xr = x.row(r);
                    for (o, out) in y.row_mut(r).iter_mut().enumerate() {
                        *out = b[o] + dot(&w[o * inputs..(o + 1) * inputs], xr);
                    }
                }
                y
            }
            LayerSpec::Conv1d { inputs, outputs, kernel } => {
                let span = inputs * kernel;
                let (w, b) = params.split_at(outputs * span);
                let mut y = Matrix::zeros(x.rows, outputs);
                let mut window = vec![0.0; span];
                for t in 0..x.rows {
                    unfold(x, t, kernel, &mut window);
                    for (o, out) in y.row_mut(t).iter_mut().enumerate() {
                        *out = b[o] + dot(&w[o * span..(o + 1) * span], &window);
                    }
                }
                y
            }
            LayerSpec::Elu => map(x, |v| if v > 0.0 { v } else { v.exp_m1() }),
            LayerSpec::Relu => map(x, |v| v.max(0.0)),
            LayerSpec::GlobalMaxPool => {
                let mut y = Matrix::zeros(1, x.cols);
                for c in 0..x.cols {
                    y.data[c] = x.data[pool_argmax(x, c) * x.cols + c];
                }
                y
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input `x`.
    fn backward(&self, params: &[f64], x: &Matrix, grad_out: &Matrix, grads: &mut [f64]) -> Matrix {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, _) = params.split_at(inputs * outputs);
                let (gw, gb) = grads.split_at_mut(inputs * outputs);
                let mut gx = Matrix::zeros(x.rows, inputs);
                for r in 0..x.rows {
                    let xr = x.row(r);
                    let gr = grad_out.row(r);
                    let gxr = gx.row_mut(r);
                    for o in 0..outputs {
                        let g = gr[o];
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        axpy(g, xr, &mut gw[o * inputs..(o + 1) * inputs]);
                        axpy(g, &w[o * inputs..(o + 1) * inputs], gxr);
                    }
                }
                gx
            }
            LayerSpec::Conv1d { inputs, outputs, kernel } => {
                let span = inputs * kernel;
                let (w, _) = params.split_at(outputs * span);
                let (gw, gb) = grads.split_at_mut(outputs * span);
                let mut gx = Matrix::zeros(x.rows, inputs);
                let mut window = vec![0.0; span];
                let mut gwindow = vec![0.0; span];
                for t in 0..x.rows {
                    unfold(x, t, kernel, &mut window);
                    gwindow.iter_mut().for_each(|v| *v = 0.0);
                    let gr = grad_out.row(t);
                    for o in 0..outputs {
                        let g = gr[o];
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        axpy(g, &window, &mut gw[o * span..(o + 1) * span]);
                        axpy(g, &w[o * span..(o + 1) * span], &mut gwindow);
                    }
                    let pad = kernel / 2;
                    for c in 0..inputs {
                        for k in 0..kernel {
                            let src = source_row(t, k, pad, x.rows);
                            gx.data[src * inputs + c] += gwindow[c * kernel + k];
                        }
                    }
                }
                gx
            }
            LayerSpec::Elu => zip_map(x, grad_out, |v, g| if v > 0.0 { g } else { g * v.exp() }),
            LayerSpec::Relu => zip_map(x, grad_out, |v, g| if v > 0.0 { g } else { 0.0 }),
            LayerSpec::GlobalMaxPool => {
                let mut gx = Matrix::zeros(x.rows, x.cols);
                for c in 0..x.cols {
                    gx.data[pool_argmax(x, c) * x.cols + c] = grad_out.data[c];
                }
                gx
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_rows(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect())
}

fn zip_map(x: &Matrix, g: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_rows(x.rows, x.cols, x.data.iter().zip(&g.data).map(|(&v, &gv)| f(v, gv)).collect())
}

fn source_row(t: usize, k: usize, pad: usize, rows: usize) -> usize {
    (t + k).saturating_sub(pad).min(rows - 1)
}

/// Window of `kernel` rows centred on `t`, laid out `(channel, offset)` to
/// match the `(out, in, kernel)` weight order.
fn unfold(x: &Matrix, t: usize, kernel: usize, window: &mut [f64]) {
    let pad = kernel / 2;
    for k in 0..kernel {
        let row = x.row(source_row(t, k, pad, x.rows));
        for (c, &v) in row.iter().enumerate() {
            window[c * kernel + k] = v;
        }
    }
}

/// Row holding the maximum of column `c`; ties go to the lowest row.
fn pool_argmax(x: &Matrix, c: usize) -> usize {
    let mut best = 0;
    for r in 1..x.rows {
        if x.data[r * x.cols + c] > x.data[best * x.cols + c] {
            best = r;
        }
    }
    best
}

/// Per-layer inputs recorded during a forward pass.
pub struct ForwardCache {
    inputs: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

impl Network {
    pub fn zeros(layers: Vec<LayerSpec>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Self {
            layers,
            offsets,
            params: vec![0.0; total],
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng>(layers: Vec<LayerSpec>, rng: &mut R) -> Self {
        let mut net = Self::zeros(layers);
        for (l, &offset) in net.layers.iter().zip(&net.offsets) {
            if let Some((fan_in, fan_out)) = l.fans() {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut net.params[offset..offset + l.weight_count()] {
                    *w = rng.gen_range(-limit..limit);
                }
            }
        }
        net
    }

    pub fn with_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(layers);
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match *l {
            LayerSpec::Dense { inputs, .. } | LayerSpec::Conv1d { inputs, .. } => Some(inputs),
            _ => None,
        })
    }

    fn layer_params(&self, i: usize) -> &[f64] {
        let start = self.offsets[i];
        &self.params[start..start + self.layers[i].param_count()]
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows == 0 {
            return Err(Error::invalid("network input", "sequence has no rows"));
        }
        let mut cols = x.cols;
        for l in &self.layers {
            cols = l.output_cols(cols)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(self.layer_params(i), &h);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let next = l.forward(self.layer_params(i), &h);
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Backpropagates `grad_out` through the cached pass, adding parameter
    /// gradients into `grads`, and returns the gradient of the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Matrix, grads: &mut [f64]) -> Matrix {
        assert_eq!(grads.len(), self.params.len());
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let start = self.offsets[i];
            let end = start + l.param_count();
            g = l.backward(self.layer_params(i), &cache.inputs[i], &g, &mut grads[start..end]);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_forward_by_hand() {
        let net = Network::with_params(
            vec![LayerSpec::Dense { inputs: 2, outputs: 2 }],
            vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5],
        )
        .unwrap();
        let y = net.forward(&Matrix::from_rows(1, 2, vec![1.0, -1.0])).unwrap();
        assert_eq!(y.data, vec![-0.5, -1.5]);
    }

    #[test]
    fn conv_replicates_edges() {
        // single channel, kernel 3, weights (1, 10, 100)
        let net = Network::with_params(
            vec![LayerSpec::Conv1d { inputs: 1, outputs: 1, kernel: 3 }],
            vec![1.0, 10.0, 100.0, 0.0],
        )
        .unwrap();
        let y = net.forward(&Matrix::from_rows(3, 1, vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data, vec![1.0 + 10.0 + 200.0, 1.0 + 20.0 + 300.0, 2.0 + 30.0 + 300.0]);
        let single = net.forward(&Matrix::from_rows(1, 1, vec![2.0])).unwrap();
        assert_eq!(single.data, vec![222.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let net = Network::zeros(vec![LayerSpec::GlobalMaxPool]);
        let x = Matrix::from_rows(3, 2, vec![1.0, 5.0, 3.0, 5.0, 3.0, 0.0]);
        let (y, cache) = net.forward_cached(&x).unwrap();
        assert_eq!(y.data, vec![3.0, 5.0]);
        let gx = net.backward(&cache, Matrix::from_rows(1, 2, vec![1.0, 2.0]), &mut []);
        assert_eq!(gx.data, vec![0.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_respects_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init(vec![LayerSpec::Dense { inputs: 10, outputs: 6 }], &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(net.params[..60].iter().all(|w| w.abs() <= limit));
        assert!(net.params[60..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = Network::zeros(vec![LayerSpec::Dense { inputs: 3, outputs: 1 }]);
        assert!(net.forward(&Matrix::zeros(1, 2)).is_err());
        assert!(net.forward(&Matrix::zeros(0, 3)).is_err());
    }
}
