//! Small convolutional binary classifier with hand-written backpropagation.
//!
//! Architecture: `[conv(k x k, same padding) -> ReLU -> maxpool 2x2] x blocks
//! -> dense -> ReLU -> dense(1) -> sigmoid`. All parameters live in one flat
//! vector so optimizers and gradient checks can treat them uniformly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{EpochMetrics, TrainingCurve};
use crate::imaging::resize_image;
use crate::preprocess::Sample;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;
pub const MAX_LAYERS: usize = 10;
const POOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub input_side: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub dense_units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_side: 256,
            conv_blocks: vec![ConvBlock { filters: 8, kernel: 3 }, ConvBlock { filters: 16, kernel: 3 }],
            dense_units: 32,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl CnnConfig {
    /// Conv and pool per block, plus the hidden and output dense layers.
    pub fn layer_count(&self) -> usize {
        2 * self.conv_blocks.len() + 2
    }

    /// Spatial side of the last pooled feature map.
    pub fn feature_side(&self) -> usize {
        self.input_side >> self.conv_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("cnn config: {m}")));
        if self.layer_count() > MAX_LAYERS {
            return bad(format!("{} layers exceed the limit of {MAX_LAYERS}", self.layer_count()));
        }
        let div = 1usize << self.conv_blocks.len();
        if self.input_side == 0 || self.input_side % div != 0 {
            return bad(format!("input side {} not divisible by {div}", self.input_side));
        }
        if let Some(b) = self.conv_blocks.iter().find(|b| b.filters == 0 || b.kernel % 2 == 0) {
            return bad(format!("conv block {b:?} needs filters > 0 and an odd kernel"));
        }
        if self.dense_units == 0 || self.batch_size == 0 {
            return bad("dense units and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct ConvShape {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    /// Input (and pre-pool output) side.
    side: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct DenseShape {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: CnnConfig,
    convs: Vec<ConvShape>,
    hidden: DenseShape,
    output: DenseShape,
    params: Vec<f64>,
}

impl Network {
    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Input length of the hidden dense layer.
    pub fn dense_inputs(&self) -> usize {
        self.hidden.inputs
    }

    /// Index ranges of every bias vector in [`Network::params`].
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<_> = self.convs.iter().map(|c| c.bias..c.bias + c.out_ch).collect();
        out.push(self.hidden.bias..self.hidden.bias + self.hidden.outputs);
        out.push(self.output.bias..self.output.bias + 1);
        out
    }

    /// Position of the output-unit bias.
    pub fn output_bias_index(&self) -> usize {
        self.output.bias
    }

    fn input_len(&self) -> usize {
        self.config.input_side * self.config.input_side
    }
}

pub fn build_network(config: &CnnConfig) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    let mut glorot = |params: &mut Vec<f64>, count: usize, fan_in: usize, fan_out: usize| {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let start = params.len();
        params.extend((0..count).map(|_| rng.gen_range(-s..=s)));
        start
    };
    let mut convs = Vec::new();
    let (mut in_ch, mut side) = (1, config.input_side);
    for block in &config.conv_blocks {
        let k2 = block.kernel * block.kernel;
        let weights = glorot(&mut params, block.filters * in_ch * k2, in_ch * k2, block.filters * k2);
        let bias = params.len();
        params.extend(std::iter::repeat(0.0).take(block.filters));
        convs.push(ConvShape { in_ch, out_ch: block.filters, kernel: block.kernel, side, weights, bias });
        in_ch = block.filters;
        side /= POOL;
    }
    let inputs = in_ch * side * side;
    let mut dense = |params: &mut Vec<f64>, inputs: usize, outputs: usize| {
        let weights = glorot(params, inputs * outputs, inputs, outputs);
        let bias = params.len();
        params.extend(std::iter::repeat(0.0).take(outputs));
        DenseShape { inputs, outputs, weights, bias }
    };
    let hidden = dense(&mut params, inputs, config.dense_units);
    let output = dense(&mut params, config.dense_units, 1);
    Ok(Network { config: config.clone(), convs, hidden, output, params })
}

/// Images scaled to `[0, 1]`, flattened row-major, with 0/1 labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Downscales each sample to `side` and normalizes by `2^bit_depth - 1`.
    pub fn from_samples(samples: &[Sample], side: usize) -> Result<Self> {
        let mut batch = Batch::default();
        for s in samples {
            let image = if s.image.dims() == (side, side) { s.image.clone() } else { resize_image(&s.image, side, side)? };
            batch.images.push(image.normalized());
            batch.labels.push(s.label.target());
        }
        Ok(batch)
    }

    fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-sample activations kept for the backward pass.
struct Trace {
    /// Input of each conv layer (the image first).
    conv_inputs: Vec<Vec<f64>>,
    /// Post-ReLU conv outputs, before pooling.
    conv_relu: Vec<Vec<f64>>,
    /// For each pooled cell, the flat index of its maximum in `conv_relu`.
    pool_argmax: Vec<Vec<usize>>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
    prob: f64,
}

fn conv_forward(params: &[f64], c: &ConvShape, input: &[f64]) -> Vec<f64> {
    let (s, k) = (c.side, c.kernel);
    let r = k / 2;
    let mut out = vec![0.0; c.out_ch * s * s];
    for o in 0..c.out_ch {
        let plane = &mut out[o * s * s..(o + 1) * s * s];
        plane.fill(params[c.bias + o]);
        for ch in 0..c.in_ch {
            let src = &input[ch * s * s..(ch + 1) * s * s];
            for ky in 0..k {
                for kx in 0..k {
                    let w = params[c.weights + ((o * c.in_ch + ch) * k + ky) * k + kx];
                    let (y0, y1) = (r.saturating_sub(ky), (s + r - ky).min(s));
                    let (x0, x1) = (r.saturating_sub(kx), (s + r - kx).min(s));
                    for y in y0..y1 {
                        let sy = y + ky - r;
                        let dst = &mut plane[y * s + x0..y * s + x1];
                        let srow = &src[sy * s + x0 + kx - r..sy * s + x1 + kx - r];
                        for (d, v) in dst.iter_mut().zip(srow) {
                            *d += w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
fn conv_backward(params: &[f64], c: &ConvShape, input: &[f64], dz: &[f64], grad: &mut [f64], want_input: bool) -> Option<Vec<f64>> {
    let (s, k) = (c.side, c.kernel);
    let r = k / 2;
    let mut din = want_input.then(|| vec![0.0; c.in_ch * s * s]);
    for o in 0..c.out_ch {
        let dplane = &dz[o * s * s..(o + 1) * s * s];
        grad[c.bias + o] += dplane.iter().sum::<f64>();
        for ch in 0..c.in_ch {
            let src = &input[ch * s * s..(ch + 1) * s * s];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = c.weights + ((o * c.in_ch + ch) * k + ky) * k + kx;
                    let w = params[wi];
                    let (y0, y1) = (r.saturating_sub(ky), (s + r - ky).min(s));
                    let (x0, x1) = (r.saturating_sub(kx), (s + r - kx).min(s));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - r;
                        let drow = &dplane[y * s + x0..y * s + x1];
                        let srow = &src[sy * s + x0 + kx - r..sy * s + x1 + kx - r];
                        acc += drow.iter().zip(srow).map(|(d, v)| d * v).sum::<f64>();
                        if let Some(din) = din.as_mut() {
                            let dst = &mut din[ch * s * s + sy * s + x0 + kx - r..ch * s * s + sy * s + x1 + kx - r];
                            for (d, g) in dst.iter_mut().zip(drow) {
                                *d += w * g;
                            }
                        }
                    }
                    grad[wi] += acc;
                }
            }
        }
    }
    din
}

fn max_pool(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / POOL;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for ch in 0..channels {
        for y in 0..half {
            for x in 0..half {
                let mut best = ch * side * side + (POOL * y) * side + POOL * x;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let i = ch * side * side + (POOL * y + dy) * side + POOL * x + dx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn dense_forward(params: &[f64], d: &DenseShape, input: &[f64]) -> Vec<f64> {
    (0..d.outputs)
        .map(|o| {
            let w = &params[d.weights + o * d.inputs..d.weights + (o + 1) * d.inputs];
            params[d.bias + o] + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn forward_one(net: &Network, image: &[f64]) -> Trace {
    let p = &net.params;
    let mut conv_inputs = Vec::with_capacity(net.convs.len());
    let mut conv_relu = Vec::with_capacity(net.convs.len());
    let mut pool_argmax = Vec::with_capacity(net.convs.len());
    let mut current = image.to_vec();
    for c in &net.convs {
        let mut z = conv_forward(p, c, &current);
        for v in &mut z {
            *v = v.max(0.0);
        }
        let (pooled, arg) = max_pool(&z, c.out_ch, c.side);
        conv_inputs.push(std::mem::replace(&mut current, pooled));
        conv_relu.push(z);
        pool_argmax.push(arg);
    }
    let mut hidden = dense_forward(p, &net.hidden, &current);
    for v in &mut hidden {
        *v = v.max(0.0);
    }
    let logit = dense_forward(p, &net.output, &hidden)[0];
    Trace { conv_inputs, conv_relu, pool_argmax, flat: current, hidden, prob: sigmoid(logit) }
}

fn check_batch(net: &Network, batch: &Batch) -> Result<()> {
    if batch.images.len() != batch.labels.len() {
        return Err(Error::InvalidArgument("batch images and labels differ in count".into()));
    }
    if let Some(img) = batch.images.iter().find(|i| i.len() != net.input_len()) {
        return Err(Error::InvalidArgument(format!(
            "image of {} values does not match input side {}",
            img.len(),
            net.config.input_side
        )));
    }
    if batch.labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Nodule probability for every image in the batch.
pub fn forward(net: &Network, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(net, batch)?;
    Ok(batch.images.iter().map(|img| forward_one(net, img).prob).collect())
}

fn sample_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().zip(labels).map(|(&p, &y)| sample_loss(p, y)).sum::<f64>() / probs.len() as f64
}

/// Fraction of probabilities on the correct side of 0.5.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let correct = probs.iter().zip(labels).filter(|(&p, &y)| u8::from(p >= 0.5) == y).count();
    correct as f64 / probs.len() as f64
}

/// Gradients of the mean loss, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    /// Forward probabilities computed on the way.
    pub probs: Vec<f64>,
}

pub fn backward(net: &Network, batch: &Batch) -> Result<Gradients> {
    check_batch(net, batch)?;
    let p = &net.params;
    let mut grad = vec![0.0; p.len()];
    let mut probs = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len().max(1) as f64;
    for (img, &y) in batch.images.iter().zip(&batch.labels) {
        let t = forward_one(net, img);
        probs.push(t.prob);
        // d(mean bce)/d(logit)
        let dlogit = (t.prob - f64::from(y)) * scale;
        let (o, h) = (&net.output, &net.hidden);
        grad[o.bias] += dlogit;
        let mut dhidden = vec![0.0; h.outputs];
        for u in 0..h.outputs {
            grad[o.weights + u] += dlogit * t.hidden[u];
            dhidden[u] = if t.hidden[u] > 0.0 { dlogit * p[o.weights + u] } else { 0.0 };
        }
        let mut dflat = vec![0.0; h.inputs];
        for (u, &dh) in dhidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            grad[h.bias + u] += dh;
            let w = h.weights + u * h.inputs;
            for i in 0..h.inputs {
                grad[w + i] += dh * t.flat[i];
                dflat[i] += dh * p[w + i];
            }
        }
        let mut dpooled = dflat;
        for (li, c) in net.convs.iter().enumerate().rev() {
            let relu = &t.conv_relu[li];
            let mut dz = vec![0.0; relu.len()];
            for (&idx, &g) in t.pool_argmax[li].iter().zip(&dpooled) {
                if relu[idx] > 0.0 {
                    dz[idx] += g;
                }
            }
            match conv_backward(p, c, &t.conv_inputs[li], &dz, &mut grad, li > 0) {
                Some(din) => dpooled = din,
                None => break,
            }
        }
    }
    Ok(Gradients { values: grad, probs })
}

/// Minibatch SGD for `epochs`. Training metrics are averaged over the
/// minibatches of each epoch as they are seen (before each update);
/// validation metrics are computed after the epoch.
pub fn train(net: &mut Network, train_set: &Batch, val_set: &Batch, epochs: usize) -> Result<TrainingCurve> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    check_batch(net, train_set)?;
    check_batch(net, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(net.config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut series = Vec::with_capacity(epochs);
    let lr = net.config.learning_rate;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(net.config.batch_size) {
            let mb = train_set.subset(chunk);
            let g = backward(net, &mb)?;
            loss_sum += bce_loss(&g.probs, &mb.labels) * mb.len() as f64;
            correct += (accuracy(&g.probs, &mb.labels) * mb.len() as f64).round() as usize;
            for (w, d) in net.params.iter_mut().zip(&g.values) {
                *w -= lr * d;
            }
        }
        let val_probs = forward(net, val_set)?;
        series.push(EpochMetrics {
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc: accuracy(&val_probs, &val_set.labels),
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: bce_loss(&val_probs, &val_set.labels),
        });
    }
    if net.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("training diverged; lower the learning rate".into()));
    }
    Ok(TrainingCurve { run_id: format!("seed{}", net.config.seed), series })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> CnnConfig {
        CnnConfig {
            input_side: 8,
            conv_blocks: vec![ConvBlock { filters: 1, kernel: 3 }],
            dense_units: 4,
            learning_rate: 1e-3,
            batch_size: 4,
            seed,
        }
    }

    fn random_batch(n: usize, side: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            images: (0..n).map(|_| (0..side * side).map(|_| rng.gen::<f64>()).collect()).collect(),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        }
    }

    #[test]
    fn construction() {
        let cfg = CnnConfig { input_side: 32, ..Default::default() };
        let a = build_network(&cfg).unwrap();
        assert_eq!(a, build_network(&cfg).unwrap());
        assert_eq!(cfg.feature_side(), 8);
        assert_eq!(a.dense_inputs(), 16 * 8 * 8);
        for r in a.bias_ranges() {
            assert!(a.params()[r].iter().all(|&b| b == 0.0));
        }
        // glorot bound of the first conv: sqrt(6 / (9 + 72))
        let s = (6.0f64 / 81.0).sqrt();
        assert!(a.params()[..72].iter().all(|w| w.abs() <= s));
        assert_ne!(a.params(), build_network(&CnnConfig { seed: 1, ..cfg.clone() }).unwrap().params());
    }

    #[test]
    fn config_limits() {
        let five = CnnConfig { conv_blocks: vec![ConvBlock { filters: 2, kernel: 3 }; 5], ..Default::default() };
        assert!(build_network(&five).is_err());
        assert!(build_network(&CnnConfig { input_side: 30, ..Default::default() }).is_err());
        let even = CnnConfig { conv_blocks: vec![ConvBlock { filters: 2, kernel: 2 }], ..Default::default() };
        assert!(build_network(&even).is_err());
    }

    #[test]
    fn zero_network_predicts_half() {
        let mut net = build_network(&tiny_config(1)).unwrap();
        net.params_mut().fill(0.0);
        let probs = forward(&net, &random_batch(3, 8, 2)).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn duplicates_and_purity() {
        let net = build_network(&tiny_config(4)).unwrap();
        let mut b = random_batch(2, 8, 3);
        b.images.push(b.images[0].clone());
        b.labels.push(b.labels[0]);
        let p = forward(&net, &b).unwrap();
        assert_eq!(p[0], p[2]);
        assert_eq!(p, forward(&net, &b).unwrap());
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn hand_computed_forward() {
        // 4x4 input, one 3x3 filter, pool to 2x2, one hidden unit, output unit
        let cfg = CnnConfig {
            input_side: 4,
            conv_blocks: vec![ConvBlock { filters: 1, kernel: 3 }],
            dense_units: 1,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 0,
        };
        let mut net = build_network(&cfg).unwrap();
        let p = net.params_mut();
        // conv weights: centre 1, right neighbour 0.5, others 0; bias -0.1
        p[..9].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0]);
        p[9] = -0.1;
        // hidden: weights [1, -1, 2, 0], bias 0.05
        p[10..14].copy_from_slice(&[1.0, -1.0, 2.0, 0.0]);
        p[14] = 0.05;
        // output: weight 1.5, bias -0.2
        p[15] = 1.5;
        p[16] = -0.2;
        #[rustfmt::skip]
        let image = vec![
            0.1, 0.2, 0.3, 0.4,
            0.5, 0.6, 0.7, 0.8,
            0.9, 1.0, 0.0, 0.1,
            0.2, 0.3, 0.4, 0.5,
        ];
        // conv z[y][x] = in[y][x] + 0.5 in[y][x+1] - 0.1, zero beyond the right edge:
        // row0: 0.1, 0.25, 0.4, 0.3     row1: 0.7, 0.85, 1.0, 0.7
        // row2: 1.3, 0.9, -0.05, 0.0    row3: 0.25, 0.4, 0.55, 0.4
        // relu + pool -> [0.85, 1.0, 1.3, 0.55]
        // hidden = relu(0.85 - 1.0 + 2.6 + 0.05) = 2.5; logit = 3.75 - 0.2 = 3.55
        let expected = 1.0 / (1.0 + (-3.55f64).exp());
        let prob = forward(&net, &Batch { images: vec![image], labels: vec![1] }).unwrap()[0];
        assert!((prob - expected).abs() < 1e-12, "{prob} vs {expected}");
    }

    #[test]
    fn loss_values() {
        assert!((bce_loss(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[1.0 - 1e-7], &[1]) - 1e-7).abs() < 1e-12);
        assert!((bce_loss(&[1.0], &[1]) - 1e-7).abs() < 1e-12);
        let p = 0.3;
        assert!((sample_loss(p, 1) - sample_loss(1.0 - p, 0)).abs() < 1e-15);
        assert!(bce_loss(&[0.9, 0.2], &[1, 0]) >= 0.0);
    }

    #[test]
    fn accuracy_recount() {
        let probs = [0.1, 0.7, 0.5, 0.49];
        let labels = [0, 1, 0, 1];
        assert_eq!(accuracy(&probs, &labels), 0.25 + 0.25);
    }

    #[test]
    fn stationary_point_has_zero_output_bias_gradient() {
        let mut net = build_network(&tiny_config(2)).unwrap();
        net.params_mut().fill(0.0);
        let batch = Batch { images: vec![vec![0.0; 64]; 4], labels: vec![0, 1, 0, 1] };
        let g = backward(&net, &batch).unwrap();
        assert_eq!(g.values[net.output_bias_index()], 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    fn max_rel_error(net: &Network, batch: &Batch, h: f64) -> f64 {
        let analytic = backward(net, batch).unwrap().values;
        let mut worst: f64 = 0.0;
        for k in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[k] += h;
            let mut minus = net.clone();
            minus.params_mut()[k] -= h;
            let lp = bce_loss(&forward(&plus, batch).unwrap(), &batch.labels);
            let lm = bce_loss(&forward(&minus, batch).unwrap(), &batch.labels);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[k].abs());
            if denom > 1e-8 {
                worst = worst.max((fd - analytic[k]).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = build_network(&tiny_config(5)).unwrap();
        let err = max_rel_error(&net, &random_batch(4, 8, 6), 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let net = build_network(&tiny_config(7)).unwrap();
        let b = random_batch(3, 8, 8);
        let mut bb = b.clone();
        bb.images.extend(b.images.clone());
        bb.labels.extend(b.labels.clone());
        let (g1, g2) = (backward(&net, &b).unwrap().values, backward(&net, &bb).unwrap().values);
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn small_full_batch_steps_do_not_increase_loss() {
        let mut net = build_network(&tiny_config(9)).unwrap();
        let b = random_batch(6, 8, 10);
        let mut last = bce_loss(&forward(&net, &b).unwrap(), &b.labels);
        for _ in 0..10 {
            let g = backward(&net, &b).unwrap();
            for (w, d) in net.params_mut().iter_mut().zip(&g.values) {
                *w -= 1e-3 * d;
            }
            let now = bce_loss(&forward(&net, &b).unwrap(), &b.labels);
            assert!(now <= last, "{now} > {last}");
            last = now;
        }
    }

    #[test]
    fn training_determinism_and_edge_cases() {
        let cfg = CnnConfig { learning_rate: 0.1, ..tiny_config(11) };
        let (tr, va) = (random_batch(8, 8, 12), random_batch(4, 8, 13));
        let mut a = build_network(&cfg).unwrap();
        let mut b = build_network(&cfg).unwrap();
        let ca = train(&mut a, &tr, &va, 5).unwrap();
        assert_eq!(ca, train(&mut b, &tr, &va, 5).unwrap());
        assert_eq!(ca.series.len(), 5);
        assert!(ca.series.iter().all(|m| (0.0..=1.0).contains(&m.train_acc) && m.val_loss >= 0.0));
        assert!(train(&mut a, &tr, &va, 0).unwrap().series.is_empty());
        assert!(train(&mut a, &Batch::default(), &va, 1).is_err());
    }
}
