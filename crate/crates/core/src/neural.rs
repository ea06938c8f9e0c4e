//! Next-pitch model: two stacked LSTM layers, a rectified dense layer and a
//! softmax over the 88 piano keys.
//!
//! Everything is computed in `f64`. LSTM weights are stored input-major
//! (`(input + hidden) x 4·hidden`, gate blocks ordered input, forget, cell,
//! output) so a timestep is a sum of weight rows scaled by the non-zero
//! inputs; one-hot features touch a single row.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::representation::{encode, DatasetWindowSet, EncodingScheme, FeatureMatrix, Level, PIANO_KEYS};

pub const OUTPUT_SIZE: usize = PIANO_KEYS;
const MODEL_MAGIC: &[u8; 4] = b"MTRN";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset level {dataset} does not match model level {model}")]
    LevelMismatch { dataset: Level, model: Level },
    #[error("non-finite parameter after epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("bad model file: {0}")]
    Format(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate order inside an LSTM layer's weight and bias blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    input: usize,
    hidden: usize,
    weights: Matrix,
    bias: Vec<f64>,
}

impl LstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer { input, hidden, weights: Matrix::zeros(input + hidden, 4 * hidden), bias: vec![0.0; 4 * hidden] }
    }

    fn random(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let weights = Matrix::uniform(input + hidden, 4 * hidden, bound, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        LstmLayer { input, hidden, weights, bias }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Weight from column `col` of `[input; previous hidden]` into `unit` of `gate`.
    pub fn weight(&self, gate: Gate, unit: usize, col: usize) -> f64 {
        self.weights.get(col, gate as usize * self.hidden + unit)
    }

    pub fn bias(&self, gate: Gate, unit: usize) -> f64 {
        self.bias[gate as usize * self.hidden + unit]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(input: usize, output: usize) -> Self {
        DenseLayer { weights: Matrix::zeros(output, input), bias: vec![0.0; output] }
    }

    fn random(input: usize, output: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer { weights: Matrix::uniform(output, input, bound, rng), bias: vec![0.0; output] }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights.get(row, col)
    }

    pub fn bias(&self, row: usize) -> f64 {
        self.bias[row]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.bias[r] + dot(self.weights.row(r), x);
        }
    }
}

/// Weights of the whole network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub level: Level,
    pub input_width: usize,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub dense: DenseLayer,
    pub output: DenseLayer,
}

impl LstmModel {
    pub fn zeros(level: Level, input_width: usize, hidden: usize, dense: usize) -> Self {
        LstmModel {
            level,
            input_width,
            lstm1: LstmLayer::zeros(input_width, hidden),
            lstm2: LstmLayer::zeros(hidden, hidden),
            dense: DenseLayer::zeros(hidden, dense),
            output: DenseLayer::zeros(dense, OUTPUT_SIZE),
        }
    }

    /// Seeded initialization: LSTM weights uniform in ±1/sqrt(hidden) with
    /// forget-gate bias 1, He-uniform dense layer, output layer uniform in
    /// ±1/sqrt(dense).
    pub fn random(level: Level, input_width: usize, hidden: usize, dense: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm1 = LstmLayer::random(input_width, hidden, &mut rng);
        let lstm2 = LstmLayer::random(hidden, hidden, &mut rng);
        let dense_layer = DenseLayer::random(hidden, dense, (6.0 / hidden as f64).sqrt(), &mut rng);
        let output = DenseLayer::random(dense, OUTPUT_SIZE, 1.0 / (dense as f64).sqrt(), &mut rng);
        LstmModel { level, input_width, lstm1, lstm2, dense: dense_layer, output }
    }

    pub fn zeros_like(&self) -> Self {
        LstmModel::zeros(self.level, self.input_width, self.hidden_size(), self.dense_size())
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm1.hidden
    }

    pub fn dense_size(&self) -> usize {
        self.dense.bias.len()
    }

    /// Input layout implied by the input width.
    pub fn scheme(&self) -> Option<EncodingScheme> {
        EncodingScheme::for_input_width(self.level, self.input_width)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every parameter block, in a fixed order.
    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.lstm1.weights.data,
            &self.lstm1.bias,
            &self.lstm2.weights.data,
            &self.lstm2.bias,
            &self.dense.weights.data,
            &self.dense.bias,
            &self.output.weights.data,
            &self.output.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.lstm1.weights.data,
            &mut self.lstm1.bias,
            &mut self.lstm2.weights.data,
            &mut self.lstm2.bias,
            &mut self.dense.weights.data,
            &mut self.dense.bias,
            &mut self.output.weights.data,
            &mut self.output.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LstmModel, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(dst, scale, src);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().map(|t| dot(t, t)).sum::<f64>().sqrt()
    }

    /// Rounds every parameter to the nearest `f32`, the precision of the
    /// model file.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    fn check_dims(&self) -> Result<(), NeuralError> {
        let h = self.hidden_size();
        let d = self.dense_size();
        let ok = self.lstm1.input == self.input_width
            && self.lstm1.weights.rows == self.input_width + h
            && self.lstm1.weights.cols == 4 * h
            && self.lstm2.input == h
            && self.lstm2.hidden == h
            && self.lstm2.weights.rows == 2 * h
            && self.dense.weights.rows == d
            && self.dense.weights.cols == h
            && self.output.weights.rows == OUTPUT_SIZE
            && self.output.weights.cols == d;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::Dimension("inconsistent layer shapes".into()))
        }
    }
}

/// Per-layer hidden and cell vectors carried between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(model: &LstmModel) -> Self {
        let h = model.hidden_size();
        RecurrentState { h1: vec![0.0; h], c1: vec![0.0; h], h2: vec![0.0; h], c2: vec![0.0; h] }
    }

    pub fn reset(&mut self) {
        for v in [&mut self.h1, &mut self.c1, &mut self.h2, &mut self.c2] {
            v.fill(0.0);
        }
    }
}

/// Activations of one LSTM timestep, kept for backpropagation.
#[derive(Debug, Clone, Default)]
struct StepCache {
    /// Concatenated `[input; previous hidden]`.
    v: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Advances one LSTM layer by a timestep, updating `h` and `c` in place.
/// `z` is scratch space of length `4·hidden`.
fn lstm_step(layer: &LstmLayer, x: &[f64], h: &mut [f64], c: &mut [f64], z: &mut [f64], cache: Option<&mut StepCache>) {
    let hs = layer.hidden;
    z.copy_from_slice(&layer.bias);
    for (j, &v) in x.iter().chain(h.iter()).enumerate() {
        if v != 0.0 {
            axpy(z, v, layer.weights.row(j));
        }
    }
    let mut cache = cache;
    if let Some(cache) = cache.as_deref_mut() {
        cache.v.clear();
        cache.v.extend_from_slice(x);
        cache.v.extend_from_slice(h);
        cache.c_prev.clear();
        cache.c_prev.extend_from_slice(c);
        for buf in [&mut cache.i, &mut cache.f, &mut cache.g, &mut cache.o, &mut cache.tanh_c] {
            buf.resize(hs, 0.0);
        }
    }
    for k in 0..hs {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hs + k]);
        let g = z[2 * hs + k].tanh();
        let o = sigmoid(z[3 * hs + k]);
        c[k] = f * c[k] + i * g;
        let tc = c[k].tanh();
        h[k] = o * tc;
        if let Some(cache) = cache.as_deref_mut() {
            cache.i[k] = i;
            cache.f[k] = f;
            cache.g[k] = g;
            cache.o[k] = o;
            cache.tanh_c[k] = tc;
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Sparse categorical cross-entropy of `target` under `softmax(logits)`.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> f64 {
    (log_sum_exp(logits) - logits[target]).max(0.0)
}

/// `-ln p[target]`; a zero probability maps to the loss of the smallest
/// positive `f64` instead of infinity.
pub fn loss(probabilities: &[f64], target: usize) -> f64 {
    -probabilities[target].max(f64::MIN_POSITIVE).ln()
}

/// Scratch buffers for streaming inference.
#[derive(Debug, Clone)]
pub struct Workspace {
    z: Vec<f64>,
    dense: Vec<f64>,
    logits: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &LstmModel) -> Self {
        Workspace { z: vec![0.0; 4 * model.hidden_size()], dense: vec![0.0; model.dense_size()], logits: vec![0.0; OUTPUT_SIZE] }
    }
}

impl LstmModel {
    fn advance(&self, state: &mut RecurrentState, x: &[f64], z: &mut [f64]) {
        lstm_step(&self.lstm1, x, &mut state.h1, &mut state.c1, z, None);
        let RecurrentState { h1, h2, c2, .. } = state;
        lstm_step(&self.lstm2, h1, h2, c2, z, None);
    }

    fn head_logits(&self, h2: &[f64], ws: &mut Workspace) {
        self.dense.apply(h2, &mut ws.dense);
        ws.dense.iter_mut().for_each(|a| *a = a.max(0.0));
        self.output.apply(&ws.dense, &mut ws.logits);
    }

    fn check_input(&self, width: usize) -> Result<(), NeuralError> {
        if width != self.input_width {
            return Err(NeuralError::Dimension(format!("input width {width}, model expects {}", self.input_width)));
        }
        Ok(())
    }

    /// Output logits after running `window` from a zero state.
    pub fn forward_logits(&self, window: &FeatureMatrix) -> Result<Vec<f64>, NeuralError> {
        self.check_input(window.width)?;
        let mut state = RecurrentState::zeros(self);
        let mut ws = Workspace::new(self);
        for r in 0..window.rows() {
            self.advance(&mut state, window.row(r), &mut ws.z);
        }
        self.head_logits(&state.h2, &mut ws);
        Ok(ws.logits)
    }

    /// Next-key distribution after running `window` from a zero state.
    pub fn forward(&self, window: &FeatureMatrix) -> Result<Vec<f64>, NeuralError> {
        Ok(softmax(&self.forward_logits(window)?))
    }

    /// Consumes one encoded event and returns the distribution over the
    /// following key. Composing this over a window from a zero state gives
    /// exactly [`LstmModel::forward`].
    pub fn forward_streaming(&self, state: &mut RecurrentState, event: &[f64], ws: &mut Workspace) -> Result<Vec<f64>, NeuralError> {
        self.check_input(event.len())?;
        if state.h1.len() != self.hidden_size() || state.h2.len() != self.hidden_size() {
            return Err(NeuralError::Dimension("recurrent state does not match model".into()));
        }
        self.advance(state, event, &mut ws.z);
        self.head_logits(&state.h2, ws);
        Ok(softmax(&ws.logits))
    }
}

/// Inverted-dropout masks for one training window: one mask per timestep for
/// each layer's output.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub layer1: Vec<Vec<f64>>,
    pub layer2: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample(rate: f64, steps: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - rate;
        let mut draw = || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
        let layer1 = (0..steps).map(|_| (0..hidden).map(|_| draw()).collect()).collect();
        let layer2 = (0..steps).map(|_| (0..hidden).map(|_| draw()).collect()).collect();
        DropoutMasks { layer1, layer2 }
    }
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: f64,
    pub logits: Vec<f64>,
}

impl BackwardResult {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn backprop_layer(layer: &LstmLayer, caches: &[StepCache], dh_above: &[Vec<f64>], grad: &mut LstmLayer, dx_out: Option<&mut Vec<Vec<f64>>>) {
    let hs = layer.hidden;
    let inp = layer.input;
    let steps = caches.len();
    let mut dh_next = vec![0.0; hs];
    let mut dc_next = vec![0.0; hs];
    let mut dz = vec![0.0; 4 * hs];
    let mut dx_out = dx_out;
    if let Some(dx) = dx_out.as_deref_mut() {
        *dx = vec![Vec::new(); steps];
    }
    for t in (0..steps).rev() {
        let cache = &caches[t];
        for k in 0..hs {
            let dh = dh_above[t][k] + dh_next[k];
            let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
            let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            dz[k] = dc * g * i * (1.0 - i);
            dz[hs + k] = dc * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * hs + k] = dc * i * (1.0 - g * g);
            dz[3 * hs + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        axpy(&mut grad.bias, 1.0, &dz);
        for (j, &v) in cache.v.iter().enumerate() {
            if v != 0.0 {
                axpy(grad.weights.row_mut(j), v, &dz);
            }
        }
        for k in 0..hs {
            dh_next[k] = dot(layer.weights.row(inp + k), &dz);
        }
        if let Some(dx) = dx_out.as_deref_mut() {
            dx[t] = (0..inp).map(|j| dot(layer.weights.row(j), &dz)).collect();
        }
    }
}

impl LstmModel {
    /// Loss of `target` after `window` and its exact gradient by
    /// backpropagation through time, accumulated into `grad`. With `masks`
    /// the dropout pattern is applied as in training.
    pub fn backward_into(
        &self,
        window: &FeatureMatrix,
        target: usize,
        masks: Option<&DropoutMasks>,
        grad: &mut LstmModel,
    ) -> Result<BackwardResult, NeuralError> {
        let mut targets = vec![None; window.rows()];
        if let Some(last) = targets.last_mut() {
            *last = Some(target);
        }
        self.backward_steps_into(window, &targets, masks, grad)
    }

    /// Like [`LstmModel::backward_into`] but with a target at any subset of
    /// timesteps; the loss is the mean cross-entropy over those steps. The
    /// returned logits are those of the last step.
    pub fn backward_steps_into(
        &self,
        window: &FeatureMatrix,
        targets: &[Option<usize>],
        masks: Option<&DropoutMasks>,
        grad: &mut LstmModel,
    ) -> Result<BackwardResult, NeuralError> {
        self.check_input(window.width)?;
        let steps = window.rows();
        if steps == 0 {
            return Err(NeuralError::Dimension("empty window".into()));
        }
        if targets.len() != steps {
            return Err(NeuralError::Dimension(format!("{} targets for {steps} steps", targets.len())));
        }
        if targets.iter().flatten().any(|&t| t >= OUTPUT_SIZE) {
            return Err(NeuralError::Dimension("target out of range".into()));
        }
        let supervised = targets.iter().flatten().count();
        if supervised == 0 {
            return Err(NeuralError::Dimension("no supervised step".into()));
        }
        let weight = 1.0 / supervised as f64;
        let hs = self.hidden_size();
        let mut z = vec![0.0; 4 * hs];
        let (mut h1, mut c1, mut h2, mut c2) = (vec![0.0; hs], vec![0.0; hs], vec![0.0; hs], vec![0.0; hs]);
        let mut caches1 = vec![StepCache::default(); steps];
        let mut caches2 = vec![StepCache::default(); steps];
        let mut up = vec![0.0; hs];
        let mut dh2 = vec![vec![0.0; hs]; steps];
        let mut pre = vec![0.0; self.dense_size()];
        let mut logits = vec![0.0; OUTPUT_SIZE];
        let mut dact = vec![0.0; self.dense_size()];
        let mut loss = 0.0;
        for t in 0..steps {
            lstm_step(&self.lstm1, window.row(t), &mut h1, &mut c1, &mut z, Some(&mut caches1[t]));
            up.copy_from_slice(&h1);
            if let Some(m) = masks {
                up.iter_mut().zip(&m.layer1[t]).for_each(|(u, k)| *u *= k);
            }
            lstm_step(&self.lstm2, &up, &mut h2, &mut c2, &mut z, Some(&mut caches2[t]));
            let Some(target) = targets[t] else { continue };

            let mut top = h2.clone();
            if let Some(m) = masks {
                top.iter_mut().zip(&m.layer2[t]).for_each(|(u, k)| *u *= k);
            }
            self.dense.apply(&top, &mut pre);
            let act: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
            self.output.apply(&act, &mut logits);

            loss += weight * cross_entropy_from_logits(&logits, target);
            let mut dlogits = softmax(&logits);
            dlogits[target] -= 1.0;
            dlogits.iter_mut().for_each(|d| *d *= weight);

            axpy(&mut grad.output.bias, 1.0, &dlogits);
            dact.iter_mut().for_each(|d| *d = 0.0);
            for (r, &dl) in dlogits.iter().enumerate() {
                axpy(grad.output.weights.row_mut(r), dl, &act);
                axpy(&mut dact, dl, self.output.weights.row(r));
            }
            let dpre: Vec<f64> = dact.iter().zip(&pre).map(|(&d, &p)| if p > 0.0 { d } else { 0.0 }).collect();
            axpy(&mut grad.dense.bias, 1.0, &dpre);
            let dtop = &mut dh2[t];
            for (r, &dp) in dpre.iter().enumerate() {
                if dp != 0.0 {
                    axpy(grad.dense.weights.row_mut(r), dp, &top);
                    axpy(dtop, dp, self.dense.weights.row(r));
                }
            }
            if let Some(m) = masks {
                dtop.iter_mut().zip(&m.layer2[t]).for_each(|(d, k)| *d *= k);
            }
        }
        if targets[steps - 1].is_none() {
            // Report the last step's prediction even when it is unsupervised.
            let mut ws = Workspace::new(self);
            self.head_logits(&h2, &mut ws);
            logits = ws.logits;
        }

        let mut dup = Vec::new();
        backprop_layer(&self.lstm2, &caches2, &dh2, &mut grad.lstm2, Some(&mut dup));
        if let Some(m) = masks {
            for (d, mask) in dup.iter_mut().zip(&m.layer1) {
                d.iter_mut().zip(mask).for_each(|(x, k)| *x *= k);
            }
        }
        backprop_layer(&self.lstm1, &caches1, &dup, &mut grad.lstm1, None);
        Ok(BackwardResult { loss, logits })
    }

    /// Gradient of the loss for one window, without dropout.
    pub fn backward(&self, window: &FeatureMatrix, target: usize) -> Result<(LstmModel, f64), NeuralError> {
        let mut grad = self.zeros_like();
        let r = self.backward_into(window, target, None, &mut grad)?;
        Ok((grad, r.loss))
    }
}

/// Which timesteps of a window carry a training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Only the event after the window.
    FinalStep,
    /// Every step predicts the key of the event that follows it, so the
    /// model is trained on every history length up to the window length.
    #[default]
    EveryStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sequence_length: usize,
    pub lstm_hidden: usize,
    pub dense_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling applied before each update.
    pub clip_norm: f64,
    #[serde(default)]
    pub objective: Objective,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            sequence_length: 64,
            lstm_hidden: 256,
            dense_size: 128,
            epochs: 10,
            batch_size: 32,
            dropout: 0.0,
            learning_rate: 0.1,
            seed: 0,
            clip_norm: 5.0,
            objective: Objective::EveryStep,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Hyperparams(m.to_string()));
        if self.sequence_length == 0 || self.lstm_hidden == 0 || self.dense_size == 0 {
            return bad("sizes must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mini-batch SGD with inverted dropout and global-norm clipping.
///
/// Windows are shuffled each epoch by a generator seeded from `hp.seed`;
/// per-window gradients are summed in batch order, so a run is fully
/// determined by its inputs. The loss and top-1 accuracy reported per epoch
/// are those of the training passes themselves, measured on each window's
/// own target whatever the objective.
pub fn train(model: LstmModel, data: &DatasetWindowSet, hp: &Hyperparams) -> Result<(LstmModel, Vec<EpochStats>), NeuralError> {
    train_with(model, data, hp, |_| {})
}

pub fn train_with(
    mut model: LstmModel,
    data: &DatasetWindowSet,
    hp: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(LstmModel, Vec<EpochStats>), NeuralError> {
    hp.validate()?;
    model.check_dims()?;
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    if data.level != model.level {
        return Err(NeuralError::LevelMismatch { dataset: data.level, model: model.level });
    }
    model.check_input(data.scheme.input_width(data.level))?;

    let features = data
        .inputs
        .iter()
        .map(|w| encode(w, data.scheme, data.level))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| NeuralError::Dimension(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = model.zeros_like();
    let mut step_targets = Vec::with_capacity(data.sequence_length);
    let mut history = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        shuffle(&mut order, &mut rng);
        let (mut total_loss, mut correct) = (0.0, 0usize);
        for (batch_index, batch) in order.chunks(hp.batch_size).enumerate() {
            grad.scale(0.0);
            for &i in batch {
                let masks = (hp.dropout > 0.0)
                    .then(|| DropoutMasks::sample(hp.dropout, features[i].rows(), model.hidden_size(), &mut rng));
                let target = usize::from(data.targets[i]);
                let r = match hp.objective {
                    Objective::FinalStep => model.backward_into(&features[i], target, masks.as_ref(), &mut grad)?,
                    Objective::EveryStep => {
                        step_targets.clear();
                        step_targets.extend(data.inputs[i].iter().skip(1).map(|e| Some(usize::from(e.key))));
                        step_targets.push(Some(target));
                        model.backward_steps_into(&features[i], &step_targets, masks.as_ref(), &mut grad)?
                    }
                };
                total_loss += cross_entropy_from_logits(&r.logits, target);
                correct += usize::from(r.predicted() == target);
            }
            grad.scale(1.0 / batch.len() as f64);
            let norm = grad.l2_norm();
            if norm > hp.clip_norm {
                grad.scale(hp.clip_norm / norm);
            }
            model.add_scaled(&grad, -hp.learning_rate);
            if !model.is_finite() {
                return Err(NeuralError::NonFinite { epoch, batch: batch_index });
            }
        }
        let stats = EpochStats { epoch: epoch + 1, loss: total_loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

/// Fisher-Yates with the crate's own generator, so shuffles are stable
/// across `rand` versions.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = (rng.next_u64_below(i as u64 + 1)) as usize;
        v.swap(i, j);
    }
}

trait BelowExt {
    fn next_u64_below(&mut self, n: u64) -> u64;
}

impl BelowExt for ChaCha8Rng {
    fn next_u64_below(&mut self, n: u64) -> u64 {
        // Rejection sampling for an unbiased draw in [0, n).
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = rand::RngCore::next_u64(self);
            if x < zone {
                return x % n;
            }
        }
    }
}

/// Mean loss and top-1 accuracy of `model` over a dataset, without dropout.
pub fn evaluate(model: &LstmModel, data: &DatasetWindowSet) -> Result<EpochStats, NeuralError> {
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let (mut total, mut correct) = (0.0, 0usize);
    for (w, &t) in data.inputs.iter().zip(&data.targets) {
        let f = encode(w, data.scheme, data.level).map_err(|e| NeuralError::Dimension(e.to_string()))?;
        let logits = model.forward_logits(&f)?;
        total += cross_entropy_from_logits(&logits, usize::from(t));
        correct += usize::from(argmax(&logits) == usize::from(t));
    }
    Ok(EpochStats { epoch: 0, loss: total / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}

/// Metadata written as a JSON sidecar next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub level: Level,
    pub scheme: EncodingScheme,
    pub hyperparams: Hyperparams,
    pub dataset_fingerprint: String,
    pub history: Vec<EpochStats>,
}

fn write_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    let buf: Vec<u8> = values.flat_map(|x| (x as f32).to_le_bytes()).collect();
    w.write_all(&buf)
}

fn lstm_blocks(layer: &LstmLayer) -> impl Iterator<Item = f64> + '_ {
    let hs = layer.hidden;
    let cols = layer.input + hs;
    let weights = Gate::ALL.into_iter().flat_map(move |g| (0..hs).flat_map(move |u| (0..cols).map(move |c| layer.weight(g, u, c))));
    weights.chain(layer.bias.iter().copied())
}

/// Writes the `MTRN` model file: header, then little-endian `f32` blocks.
/// Each LSTM layer contributes its input, forget, cell and output weight
/// matrices (`hidden x (input + hidden)`, row-major) followed by the four
/// bias vectors; then the dense and output layers as weights
/// (`out x in`, row-major) and bias.
pub fn save_model<W: Write>(model: &LstmModel, mut w: W) -> Result<(), NeuralError> {
    model.check_dims()?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&[model.level.tag()])?;
    for dim in [model.input_width, model.hidden_size(), model.dense_size()] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    write_f32s(&mut w, lstm_blocks(&model.lstm1))?;
    write_f32s(&mut w, lstm_blocks(&model.lstm2))?;
    for layer in [&model.dense, &model.output] {
        write_f32s(&mut w, layer.weights.data.iter().copied().chain(layer.bias.iter().copied()))?;
    }
    Ok(())
}

fn read_f32s(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f64>, NeuralError> {
    let end = *at + 4 * n;
    let slice = bytes.get(*at..end).ok_or_else(|| NeuralError::Format("truncated weight block".into()))?;
    *at = end;
    Ok(slice.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

fn read_lstm(bytes: &[u8], at: &mut usize, input: usize, hidden: usize) -> Result<LstmLayer, NeuralError> {
    let mut layer = LstmLayer::zeros(input, hidden);
    let cols = input + hidden;
    for g in Gate::ALL {
        let block = read_f32s(bytes, at, hidden * cols)?;
        for u in 0..hidden {
            for c in 0..cols {
                layer.weights.row_mut(c)[g as usize * hidden + u] = block[u * cols + c];
            }
        }
    }
    layer.bias = read_f32s(bytes, at, 4 * hidden)?;
    Ok(layer)
}

pub fn load_model<R: Read>(mut r: R) -> Result<LstmModel, NeuralError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 19 || &bytes[0..4] != MODEL_MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let level = Level::from_tag(bytes[6]).ok_or_else(|| NeuralError::Format(format!("bad level tag {}", bytes[6])))?;
    let dim = |i: usize| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
    let (input, hidden, dense) = (dim(0), dim(1), dim(2));
    if input == 0 || hidden == 0 || dense == 0 {
        return Err(NeuralError::Format("zero dimension".into()));
    }
    if EncodingScheme::for_input_width(level, input).is_none() {
        return Err(NeuralError::Format(format!("input width {input} is not a valid layout for level {level}")));
    }
    let expected = 19
        + 4 * (4 * hidden * (input + hidden) + 4 * hidden + 4 * hidden * 2 * hidden + 4 * hidden + dense * hidden + dense + OUTPUT_SIZE * dense + OUTPUT_SIZE);
    if bytes.len() != expected {
        return Err(NeuralError::Format(format!("file is {} bytes, dimensions imply {expected}", bytes.len())));
    }
    let mut at = 19;
    let lstm1 = read_lstm(&bytes, &mut at, input, hidden)?;
    let lstm2 = read_lstm(&bytes, &mut at, hidden, hidden)?;
    let mut read_dense = |inp: usize, out: usize| -> Result<DenseLayer, NeuralError> {
        let w = read_f32s(&bytes, &mut at, inp * out)?;
        let b = read_f32s(&bytes, &mut at, out)?;
        Ok(DenseLayer { weights: Matrix { rows: out, cols: inp, data: w }, bias: b })
    };
    let dense_layer = read_dense(hidden, dense)?;
    let output = read_dense(dense, OUTPUT_SIZE)?;
    let model = LstmModel { level, input_width: input, lstm1, lstm2, dense: dense_layer, output };
    if !model.is_finite() {
        return Err(NeuralError::Format("non-finite weight".into()));
    }
    Ok(model)
}
