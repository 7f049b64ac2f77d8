//! Feed-forward networks with exact backpropagation.
//!
//! A [`Model`] is an ordered list of dense and ReLU layers split at
//! `split_index` into a frozen lower part (the feature extractor) and a
//! trainable upper part. Backpropagation only produces gradients for the
//! trainable part, and the optimizer only ever touches those parameters.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{Reader, Writer};
use crate::error::{FedError, Result};
use crate::seed::rng_from;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 6] = b"FEDFT1";
const TAG_DENSE: u8 = 0;
const TAG_RELU: u8 = 1;

/// Row-major matrix of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(FedError::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric(
                "tensor contains non-finite values".into(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FedError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copies the given rows, in order, into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor2 {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fully connected layer computing `W x + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(FedError::Shape(format!(
                "bias length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Tensor2::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.values.len() + self.bias.len()
    }

    fn forward(&self, input: &Tensor2) -> Tensor2 {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let mut out = Vec::with_capacity(input.rows * n_out);
        for x in input.iter_rows() {
            for (o, b) in self.bias.iter().enumerate() {
                let w = &self.weights.values[o * n_in..(o + 1) * n_in];
                out.push(b + dot(w, x));
            }
        }
        Tensor2 {
            rows: input.rows,
            cols: n_out,
            values: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Relu,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.param_count(),
            Layer::Relu => 0,
        }
    }

    fn forward(&self, input: &Tensor2) -> Tensor2 {
        match self {
            Layer::Dense(d) => d.forward(input),
            Layer::Relu => Tensor2 {
                rows: input.rows,
                cols: input.cols,
                values: input.values.iter().map(|&v| v.max(0.0)).collect(),
            },
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        let slices: [&[f64]; 2] = match self {
            Layer::Dense(d) => [&d.weights.values, &d.bias],
            Layer::Relu => [&[], &[]],
        };
        slices.into_iter().flatten()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let slices: [&mut [f64]; 2] = match self {
            Layer::Dense(d) => [&mut d.weights.values, &mut d.bias],
            Layer::Relu => [&mut [], &mut []],
        };
        slices.into_iter().flatten()
    }
}

/// Layered network `{phi, theta}`: layers `[0, split_index)` are frozen,
/// layers `[split_index, len)` are trainable.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    split_index: usize,
    num_classes: usize,
    input_width: usize,
    // Bumped on every parameter mutation so stale forward caches are caught.
    generation: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.split_index == other.split_index
    }
}

impl Model {
    pub fn new(layers: Vec<Layer>, split_index: usize) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut input_width = None;
        let mut last_dense = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Dense(d) = layer {
                if d.bias.len() != d.outputs() {
                    return Err(FedError::Shape(format!("layer {i}: bias/weight mismatch")));
                }
                if let Some(w) = width {
                    if w != d.inputs() {
                        return Err(FedError::Shape(format!(
                            "layer {i} expects {} inputs, previous layer yields {w}",
                            d.inputs()
                        )));
                    }
                }
                input_width.get_or_insert(d.inputs());
                width = Some(d.outputs());
                last_dense = Some(d.outputs());
            }
        }
        let (Some(input_width), Some(num_classes)) = (input_width, last_dense) else {
            return Err(FedError::Shape(
                "model needs at least one dense layer".into(),
            ));
        };
        if split_index > layers.len() {
            return Err(FedError::Parameter(format!(
                "split index {split_index} beyond {} layers",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            split_index,
            num_classes,
            input_width,
            generation: 0,
        })
    }

    /// Builds `dense, relu, dense, relu, ..., dense` with the given widths
    /// (input first, classes last) and He-normal weights, zero biases.
    pub fn mlp(widths: &[usize], split_index: usize, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(FedError::Parameter(format!("invalid widths {widths:?}")));
        }
        let mut rng = rng_from(seed);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let scale = (2.0 / n_in as f64).sqrt();
            let weights: Vec<f64> = (0..n_in * n_out)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(Layer::Dense(Dense::new(
                Tensor2::new(n_out, n_in, weights)?,
                vec![0.0; n_out],
            )?));
            if i + 2 < widths.len() {
                layers.push(Layer::Relu);
            }
        }
        Self::new(layers, split_index)
    }

    /// Index of the last dense layer: the default split trains only the classifier.
    pub fn classifier_split(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_)))
            .expect("validated at construction")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn set_split_index(&mut self, split_index: usize) -> Result<()> {
        if split_index > self.layers.len() {
            return Err(FedError::Parameter(format!(
                "split index {split_index} beyond {} layers",
                self.layers.len()
            )));
        }
        self.split_index = split_index;
        Ok(())
    }

    /// Disjoint views of the frozen and trainable layers.
    pub fn split_params(&self) -> (&[Layer], &[Layer]) {
        self.layers.split_at(self.split_index)
    }

    /// Like [`Model::split_params`], but the trainable half is mutable.
    pub fn split_params_mut(&mut self) -> (&[Layer], &mut [Layer]) {
        self.generation += 1;
        let (phi, theta) = self.layers.split_at_mut(self.split_index);
        (phi, theta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn phi_len(&self) -> usize {
        self.split_params().0.iter().map(Layer::param_count).sum()
    }

    pub fn theta_len(&self) -> usize {
        self.split_params().1.iter().map(Layer::param_count).sum()
    }

    /// Trainable parameters flattened: layer by layer, weights row-major then bias.
    pub fn theta(&self) -> Vec<f64> {
        self.split_params()
            .1
            .iter()
            .flat_map(Layer::params)
            .copied()
            .collect()
    }

    pub fn phi(&self) -> Vec<f64> {
        self.split_params()
            .0
            .iter()
            .flat_map(Layer::params)
            .copied()
            .collect()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_len() {
            return Err(FedError::Shape(format!(
                "theta has {} values, model expects {}",
                theta.len(),
                self.theta_len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric("non-finite parameter".into()));
        }
        let (_, upper) = self.split_params_mut();
        for (p, &v) in upper.iter_mut().flat_map(Layer::params_mut).zip(theta) {
            *p = v;
        }
        Ok(())
    }

    /// Forward pass caching the input and every layer output.
    pub fn forward(&self, batch: &Tensor2) -> Result<ForwardPass> {
        if batch.cols != self.input_width {
            return Err(FedError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols, self.input_width
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(activations.last().expect("nonempty"));
            if !out.all_finite() {
                return Err(FedError::Numeric(format!(
                    "non-finite activation at layer {i}"
                )));
            }
            activations.push(out);
        }
        Ok(ForwardPass {
            activations,
            generation: self.generation,
        })
    }

    /// Logits only, without keeping intermediate activations.
    pub fn logits(&self, batch: &Tensor2) -> Result<Tensor2> {
        if batch.cols != self.input_width {
            return Err(FedError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols, self.input_width
            )));
        }
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward(&current);
            if !current.all_finite() {
                return Err(FedError::Numeric(format!(
                    "non-finite activation at layer {i}"
                )));
            }
        }
        Ok(current)
    }

    /// Gradients of the mean cross-entropy (standard softmax) with respect
    /// to the trainable parameters, from a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Result<Gradients> {
        if pass.generation != self.generation || pass.activations.len() != self.layers.len() + 1 {
            return Err(FedError::State(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        let batch = pass.activations[0].rows;
        if labels.len() != batch || batch == 0 {
            return Err(FedError::State(format!(
                "forward cache holds {batch} rows, got {} labels",
                labels.len()
            )));
        }
        check_labels(labels, self.num_classes)?;

        let probs = softmax_rows(pass.logits(), 1.0)?;
        let inv_b = 1.0 / batch as f64;
        let mut delta = probs.values;
        for (r, &y) in labels.iter().enumerate() {
            delta[r * self.num_classes + y] -= 1.0;
        }
        delta.iter_mut().for_each(|d| *d *= inv_b);
        let mut delta_cols = self.num_classes;

        let mut per_layer: Vec<Vec<f64>> = Vec::new();
        for l in (self.split_index..self.layers.len()).rev() {
            let input = &pass.activations[l];
            let need_input_grad = l > self.split_index;
            match &self.layers[l] {
                Layer::Dense(d) => {
                    let (n_in, n_out) = (d.inputs(), d.outputs());
                    debug_assert_eq!(n_out, delta_cols);
                    let mut grad = vec![0.0; n_out * n_in + n_out];
                    let (gw, gb) = grad.split_at_mut(n_out * n_in);
                    for r in 0..batch {
                        let x = input.row(r);
                        let dr = &delta[r * n_out..(r + 1) * n_out];
                        for (o, &dv) in dr.iter().enumerate() {
                            if dv == 0.0 {
                                continue;
                            }
                            gb[o] += dv;
                            for (g, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                                *g += dv * xv;
                            }
                        }
                    }
                    per_layer.push(grad);
                    if need_input_grad {
                        let mut prev = vec![0.0; batch * n_in];
                        for r in 0..batch {
                            let dr = &delta[r * n_out..(r + 1) * n_out];
                            let pr = &mut prev[r * n_in..(r + 1) * n_in];
                            for (o, &dv) in dr.iter().enumerate() {
                                if dv == 0.0 {
                                    continue;
                                }
                                let w = &d.weights.values[o * n_in..(o + 1) * n_in];
                                for (p, &wv) in pr.iter_mut().zip(w) {
                                    *p += dv * wv;
                                }
                            }
                        }
                        delta = prev;
                        delta_cols = n_in;
                    }
                }
                Layer::Relu => {
                    if need_input_grad {
                        for (d, &x) in delta.iter_mut().zip(&input.values) {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
        }
        per_layer.reverse();
        let values: Vec<f64> = per_layer.concat();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric("non-finite gradient".into()));
        }
        Ok(Gradients { values })
    }

    /// Forward then backward; returns the mean loss alongside the gradients.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor2,
        labels: &[usize],
    ) -> Result<(f64, Gradients)> {
        let pass = self.forward(batch)?;
        let probs = softmax_rows(pass.logits(), 1.0)?;
        let loss = cross_entropy_loss(&probs, labels)?;
        let grads = self.backward(&pass, labels)?;
        Ok((loss, grads))
    }

    /// Multiply-add count of one forward pass for a single sample.
    pub fn forward_flops(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => 2 * (d.inputs() * d.outputs()) as u64,
                Layer::Relu => 0,
            })
            .sum()
    }

    /// Operation count of one backward pass (trainable part only) for a single sample.
    pub fn backward_flops(&self) -> u64 {
        self.layers
            .iter()
            .enumerate()
            .skip(self.split_index)
            .map(|(i, l)| match l {
                Layer::Dense(d) => {
                    let one = 2 * (d.inputs() * d.outputs()) as u64;
                    if i > self.split_index {
                        2 * one
                    } else {
                        one
                    }
                }
                Layer::Relu => 0,
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u64(self.layers.len() as u64);
        w.u64(self.split_index as u64);
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    w.u8(TAG_DENSE);
                    w.u64(d.outputs() as u64);
                    w.u64(d.inputs() as u64);
                    w.f64s(&d.weights.values);
                    w.f64s(&d.bias);
                }
                Layer::Relu => w.u8(TAG_RELU),
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, "magic")?;
        let count = r.count("layer_count", 1 << 20)?;
        let split_offset = r.offset();
        let split = r.count("split_index", count as u64)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let tag_offset = r.offset();
            match r.u8("layer_kind")? {
                TAG_DENSE => {
                    let out = r.count("dense_outputs", 1 << 24)?;
                    let inp = r.count("dense_inputs", 1 << 24)?;
                    let weights = r.f64s(out * inp, "dense_weights")?;
                    let bias = r.f64s(out, "dense_bias")?;
                    layers.push(Layer::Dense(Dense {
                        weights: Tensor2 {
                            rows: out,
                            cols: inp,
                            values: weights,
                        },
                        bias,
                    }));
                }
                TAG_RELU => layers.push(Layer::Relu),
                other => {
                    return Err(FedError::Format {
                        offset: tag_offset,
                        field: "layer_kind",
                        message: format!("unknown layer tag {other}"),
                    })
                }
            }
        }
        r.finish()?;
        Model::new(layers, split).map_err(|e| FedError::Format {
            offset: split_offset,
            field: "layers",
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Activations cached by [`Model::forward`]: index 0 is the input batch,
/// index `i + 1` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Tensor2>,
    generation: u64,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor2 {
        self.activations.last().expect("input is always cached")
    }
}

/// Flattened gradient, ordered like [`Model::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// SGD with heavy-ball momentum: `v <- m v + g; p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, len: usize) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(FedError::Parameter(format!(
                "learning rate must be nonnegative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(FedError::Parameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; len],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.check(grads)?;
        if params.len() != grads.len() {
            return Err(FedError::Shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }

    /// Applies one step to the trainable layers of `model` in place.
    pub fn step_model(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        self.check(&grads.values)?;
        let (lr, m) = (self.learning_rate, self.momentum);
        let (_, upper) = model.split_params_mut();
        let params = upper.iter_mut().flat_map(Layer::params_mut);
        for ((p, v), &g) in params.zip(&mut self.velocity).zip(&grads.values) {
            *v = m * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    fn check(&self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(FedError::Shape(format!(
                "optimizer tracks {} parameters, got {} gradients",
                self.velocity.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(FedError::Numeric("non-finite gradient".into()));
        }
        Ok(())
    }
}

/// Softmax of `logits / rho`, evaluated with the max subtracted first.
pub fn softmax_with_temperature(logits: &[f64], rho: f64) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, rho)?;
    Ok(out)
}

fn softmax_in_place(z: &mut [f64], rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(FedError::Parameter(format!(
            "temperature must be positive, got {rho}"
        )));
    }
    if z.is_empty() {
        return Err(FedError::Parameter("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FedError::Numeric("non-finite logit".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = ((*v - max) / rho).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Row-wise [`softmax_with_temperature`].
pub fn softmax_rows(logits: &Tensor2, rho: f64) -> Result<Tensor2> {
    let mut values = logits.values.clone();
    if logits.cols > 0 {
        for row in values.chunks_exact_mut(logits.cols) {
            softmax_in_place(row, rho)?;
        }
    }
    Ok(Tensor2 {
        rows: logits.rows,
        cols: logits.cols,
        values,
    })
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy_loss(probs: &Tensor2, labels: &[usize]) -> Result<f64> {
    if probs.rows != labels.len() || labels.is_empty() {
        return Err(FedError::Shape(format!(
            "{} probability rows, {} labels",
            probs.rows,
            labels.len()
        )));
    }
    check_labels(labels, probs.cols)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(FedError::Parameter(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
