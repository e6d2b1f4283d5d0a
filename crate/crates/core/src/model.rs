//! Small spiking networks built from quantized conv/dense layers, with a
//! straight-through backward pass over time.
//!
//! Every spiking layer quantizes its weights, forms one input current from
//! the squeezed previous train, optionally batch-normalizes it, and then runs
//! the refined neuron for its own `T` steps. A non-spiking quantized dense
//! readout maps the last squeezed train to logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bits::{materialize_grad, spike_bits_grad, threshold_grad_with, BitAverages, BitLayer, LayerBitParams};
use crate::cost::{bit_budget, bits_to_mb, CostReport, CostTotals, LayerCost, COST_REPORT_SCHEMA};
use crate::error::{Error, Result};
use crate::neuron::{fire_normalized, spike_range};
use crate::ops::{conv2d_backward, conv2d_forward, dense_backward, dense_forward, ConvGeom};
use crate::quant::{quantize_weights, weight_grad_bits, weight_grad_step, weight_grad_values, QuantRange};
use crate::renewal::{GridSearchConfig, ObserverState};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Bit depth assumed for raw input pixels in cost accounting.
pub const INPUT_BITS: f64 = 8.0;

/// Round to the nearest `f32`, so every stored parameter survives a 32-bit checkpoint.
#[inline]
pub fn snap(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub bidirectional: bool,
    pub batch_norm: bool,
}

/// `(W, S, T)` triple used for bounds and initial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitTriple<T> {
    pub w: T,
    pub s: T,
    pub t: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    /// Spiking layers, in order.
    pub layers: Vec<LayerSpec>,
    /// Width of the dense readout.
    pub classes: usize,
    pub tau: f64,
    pub shift_enabled: bool,
    pub bounds: BitTriple<u32>,
    pub init: BitTriple<f64>,
}

impl ModelSpec {
    /// Three spiking conv layers and a dense readout on `1 x 8 x 8` digits.
    pub fn desk() -> Self {
        let conv = |i, o, s, bidir| LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: 3,
                stride: s,
                padding: 1,
            },
            bidirectional: bidir,
            batch_norm: true,
        };
        ModelSpec {
            input: InputShape {
                channels: 1,
                height: 8,
                width: 8,
            },
            layers: vec![conv(1, 16, 1, true), conv(16, 32, 2, false), conv(32, 32, 2, false)],
            classes: 10,
            tau: 1.0,
            shift_enabled: true,
            bounds: BitTriple { w: 6, s: 6, t: 3 },
            init: BitTriple { w: 4.0, s: 4.0, t: 2.0 },
        }
    }

    /// One dense spiking layer and a dense readout, without batch norm.
    pub fn micro(inputs: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            input: InputShape {
                channels: 1,
                height: 1,
                width: inputs,
            },
            layers: vec![LayerSpec {
                kind: LayerKind::Dense {
                    in_features: inputs,
                    out_features: hidden,
                },
                bidirectional: false,
                batch_norm: false,
            }],
            classes,
            tau: 1.0,
            shift_enabled: true,
            bounds: BitTriple { w: 6, s: 6, t: 3 },
            init: BitTriple { w: 4.0, s: 4.0, t: 2.0 },
        }
    }

    /// Check the layer chain and return the operator of every layer, readout last.
    pub fn ops(&self) -> Result<Vec<Op>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one spiking layer"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("readout needs at least two classes"));
        }
        if self.input.is_empty() {
            return Err(Error::invalid("input shape has a zero dimension"));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be >= 1, got {}", self.tau)));
        }
        let b = self.bounds;
        if b.w < 1 || b.s < 1 || b.t < 1 || b.w > 16 || b.s > 16 {
            return Err(Error::invalid("bit bounds must lie in [1, 16] and T bound must be >= 1"));
        }
        for (name, v) in [("w", self.init.w), ("s", self.init.s), ("t", self.init.t)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("initial {name} is not finite")));
            }
        }
        // (channels, height, width) of the current activation
        let mut shape = (self.input.channels, self.input.height, self.input.width);
        let mut ops = Vec::with_capacity(self.layers.len() + 1);
        for (i, l) in self.layers.iter().enumerate() {
            if l.bidirectional && i != 0 {
                return Err(Error::invalid(format!("only the first layer may be bidirectional (layer {i})")));
            }
            let op = match l.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if in_channels != shape.0 {
                        return Err(Error::invalid(format!(
                            "layer {i} expects {in_channels} input channels, previous layer gives {}",
                            shape.0
                        )));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::invalid(format!("layer {i} has a zero kernel, stride or width")));
                    }
                    if kernel > shape.1 + 2 * padding || kernel > shape.2 + 2 * padding {
                        return Err(Error::invalid(format!("layer {i} kernel exceeds the padded input")));
                    }
                    let g = ConvGeom {
                        in_ch: in_channels,
                        out_ch: out_channels,
                        kernel,
                        stride,
                        padding,
                        in_h: shape.1,
                        in_w: shape.2,
                    };
                    shape = (out_channels, g.out_h(), g.out_w());
                    Op::Conv(g)
                }
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let flat = shape.0 * shape.1 * shape.2;
                    if in_features != flat {
                        return Err(Error::invalid(format!(
                            "layer {i} expects {in_features} inputs, previous layer gives {flat}"
                        )));
                    }
                    if out_features == 0 {
                        return Err(Error::invalid(format!("layer {i} has no outputs")));
                    }
                    shape = (out_features, 1, 1);
                    Op::Dense {
                        in_f: in_features,
                        out_f: out_features,
                    }
                }
            };
            ops.push(op);
        }
        ops.push(Op::Dense {
            in_f: shape.0 * shape.1 * shape.2,
            out_f: self.classes,
        });
        Ok(ops)
    }
}

/// Linear operator of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Conv(ConvGeom),
    Dense { in_f: usize, out_f: usize },
}

impl Op {
    pub fn in_len(&self) -> usize {
        match self {
            Op::Conv(g) => g.in_len(),
            Op::Dense { in_f, .. } => *in_f,
        }
    }

    pub fn out_len(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_len(),
            Op::Dense { out_f, .. } => *out_f,
        }
    }

    pub fn weight_len(&self) -> usize {
        match self {
            Op::Conv(g) => g.weight_len(),
            Op::Dense { in_f, out_f } => in_f * out_f,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight_len() / self.channels()
    }

    /// Output channels; batch norm keeps one statistic per channel.
    pub fn channels(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_ch,
            Op::Dense { out_f, .. } => *out_f,
        }
    }

    pub fn spatial(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_h() * g.out_w(),
            Op::Dense { .. } => 1,
        }
    }

    /// Multiply-accumulates per sample and frame.
    pub fn macs(&self) -> usize {
        match self {
            Op::Conv(g) => g.macs(),
            Op::Dense { in_f, out_f } => in_f * out_f,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv2d",
            Op::Dense { .. } => "dense",
        }
    }

    pub fn forward(&self, x: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
        match self {
            Op::Conv(g) => conv2d_forward(x, n, g, w),
            Op::Dense { in_f, out_f } => dense_forward(x, n, *in_f, *out_f, w),
        }
    }

    pub fn backward(&self, g: &[f64], x: &[f64], n: usize, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Op::Conv(geom) => conv2d_backward(g, x, n, geom, w),
            Op::Dense { in_f, out_f } => dense_backward(g, x, n, *in_f, *out_f, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub op: Op,
    pub spiking: bool,
    pub bidirectional: bool,
    pub weights: Vec<f64>,
    /// Weight step size `S_q`.
    pub s_q: f64,
    /// Per-timestep-slot thresholds; empty for the readout.
    pub v1: Vec<f64>,
    pub bits: LayerBitParams,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Which quantizer a renewal event touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Weight,
    Spike,
}

impl QuantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantKind::Weight => "weight",
            QuantKind::Spike => "spike",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewalEvent {
    pub layer: usize,
    pub kind: QuantKind,
    /// Timestep slot for spike events, `0` for weights.
    pub slot: usize,
    pub old: f64,
    pub new: f64,
}

/// Side channels of a forward pass.
#[derive(Debug, Default)]
pub struct ForwardCtx<'a> {
    /// Batch statistics for batch norm instead of running statistics.
    pub train: bool,
    /// Derive every threshold from the membrane it quantizes.
    pub init_thresholds: bool,
    /// Spike observers, `[spiking layer][slot]`; renewal runs when present.
    pub spike_observers: Option<&'a mut Vec<Vec<ObserverState>>>,
    pub grid: GridSearchConfig,
    pub events: Vec<RenewalEvent>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx::default()
    }
}

/// Everything the backward pass needs from one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub b_w: u32,
    /// Normalized current and per-channel inverse std, when batch norm ran.
    pub bn_xhat: Vec<f64>,
    pub bn_inv_std: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Membrane potentials per timestep, each `n x features`.
    pub v: Vec<Vec<f64>>,
    pub codes: Vec<Vec<i32>>,
    /// Thresholds after initialization or renewal, all slots.
    pub v1: Vec<f64>,
    pub bits_s: Vec<u32>,
    /// Squeezed, dequantized output train (logits for the readout).
    pub output: Vec<f64>,
}

impl LayerCache {
    pub fn timesteps(&self) -> usize {
        self.v.len()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub n: usize,
    pub caches: Vec<LayerCache>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        &self.caches.last().expect("model has a readout").output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub s_q: f64,
    pub v1: Vec<f64>,
    pub b_w: f64,
    pub b_s: Vec<f64>,
    pub t: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerGrads {
    fn zeros(layer: &Layer) -> Self {
        let c = layer.bn.as_ref().map_or(0, |b| b.gamma.len());
        LayerGrads {
            weights: vec![0.0; layer.weights.len()],
            s_q: 0.0,
            v1: vec![0.0; layer.v1.len()],
            b_w: 0.0,
            b_s: vec![0.0; layer.bits.b_s_hat.len()],
            t: 0.0,
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
        }
    }

    /// Gradients in the order of [`Layer::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            &self.weights,
            std::slice::from_ref(&self.s_q),
            &self.v1,
            std::slice::from_ref(&self.b_w),
            &self.b_s,
            std::slice::from_ref(&self.t),
        ];
        if !self.gamma.is_empty() {
            v.push(&self.gamma);
            v.push(&self.beta);
        }
        v
    }

    pub fn clear_bits(&mut self) {
        self.b_w = 0.0;
        self.b_s.iter_mut().for_each(|g| *g = 0.0);
        self.t = 0.0;
    }
}

impl Layer {
    /// Learnable tensors: weights, `S_q`, `V1`, `B_w`, `B_s`, `T`, then batch-norm affine.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.weights,
            std::slice::from_mut(&mut self.s_q),
            &mut self.v1,
            std::slice::from_mut(&mut self.bits.b_w_hat),
            &mut self.bits.b_s_hat,
            std::slice::from_mut(&mut self.bits.t_hat),
        ];
        if let Some(bn) = self.bn.as_mut() {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    /// Every stored tensor with a stable name, trainable ones first.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("weights", &self.weights),
            ("s_q", std::slice::from_ref(&self.s_q)),
            ("v1", &self.v1),
            ("b_w_hat", std::slice::from_ref(&self.bits.b_w_hat)),
            ("b_s_hat", &self.bits.b_s_hat),
            ("t_hat", std::slice::from_ref(&self.bits.t_hat)),
        ];
        if let Some(bn) = self.bn.as_ref() {
            v.push(("bn_gamma", &bn.gamma));
            v.push(("bn_beta", &bn.beta));
            v.push(("bn_running_mean", &bn.running_mean));
            v.push(("bn_running_var", &bn.running_var));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.weights,
            std::slice::from_mut(&mut self.s_q),
            &mut self.v1,
            std::slice::from_mut(&mut self.bits.b_w_hat),
            &mut self.bits.b_s_hat,
            std::slice::from_mut(&mut self.bits.t_hat),
        ];
        if let Some(bn) = self.bn.as_mut() {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
            v.push(&mut bn.running_mean);
            v.push(&mut bn.running_var);
        }
        v
    }

    /// Features per sample and timestep of the layer's spike output.
    pub fn feature_count(&self) -> usize {
        if self.spiking {
            self.op.out_len()
        } else {
            0
        }
    }
}

/// `2 * mean|x| / sqrt(q_max)`, or `None` for all-zero data.
pub fn init_step(x: &[f64], q_max: i32) -> Option<f64> {
    let m = x.iter().map(|v| v.abs()).sum::<f64>() / x.len().max(1) as f64;
    let s = 2.0 * m / (q_max as f64).sqrt();
    (s > 0.0 && s.is_finite()).then_some(s)
}

impl Model {
    /// Kaiming-normal weights, `S_q` from the weights, unit thresholds.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let ops = spec.ops()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_bound = spec.bounds.t as usize;
        let mut layers = Vec::with_capacity(ops.len());
        for (i, op) in ops.into_iter().enumerate() {
            let spiking = i < spec.layers.len();
            let ls = spec.layers.get(i);
            let std = (2.0 / op.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let weights: Vec<f64> = (0..op.weight_len()).map(|_| snap(normal.sample(&mut rng))).collect();
            let bits = LayerBitParams::new(spec.init.w, spec.init.s, spec.init.t, spec.bounds.w, spec.bounds.s, spec.bounds.t)?;
            let q_max = QuantRange::new(bits.b_w(), true)?.q_max;
            let s_q = snap(init_step(&weights, q_max).unwrap_or(1.0));
            layers.push(Layer {
                op,
                spiking,
                bidirectional: ls.is_some_and(|l| l.bidirectional),
                weights,
                s_q,
                v1: if spiking { vec![1.0; t_bound] } else { Vec::new() },
                bits,
                bn: ls.filter(|l| l.batch_norm).map(|_| BatchNorm::new(op.channels())),
            });
        }
        Ok(Model { spec, layers })
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn spiking_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn bit_layers(&self) -> Vec<BitLayer<'_>> {
        self.layers
            .iter()
            .map(|l| BitLayer {
                params: &l.bits,
                weight_count: l.weights.len(),
                feature_count: l.feature_count(),
            })
            .collect()
    }

    pub fn averages(&self) -> BitAverages {
        crate::bits::average_bits(&self.bit_layers()).expect("model has weights and spiking layers")
    }

    pub fn fresh_spike_observers(&self) -> Vec<Vec<ObserverState>> {
        self.layers
            .iter()
            .filter(|l| l.spiking)
            .map(|l| vec![ObserverState::default(); l.v1.len()])
            .collect()
    }

    pub fn forward(&self, input: &[f64], n: usize, ctx: &mut ForwardCtx<'_>) -> Result<Forward> {
        if n == 0 || input.len() != n * self.input_len() {
            return Err(Error::invalid(format!(
                "input has {} values, expected {n} x {}",
                input.len(),
                self.input_len()
            )));
        }
        let inv_tau = 1.0 / self.spec.tau;
        let shift = self.spec.shift_enabled;
        let mut x = input.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let b_w = layer.bits.b_w();
            let w_hat = quantize_weights(&layer.weights, layer.s_q, b_w)?.dequantize();
            let mut current = layer.op.forward(&x, n, &w_hat);
            let mut cache = LayerCache {
                b_w,
                ..LayerCache::default()
            };
            if !layer.spiking {
                cache.input = x;
                cache.w_hat = w_hat;
                cache.output = current;
                caches.push(cache);
                break;
            }
            if let Some(bn) = &layer.bn {
                batch_norm_forward(&mut current, n, &layer.op, bn, ctx.train, &mut cache);
            }

            let f = layer.op.out_len();
            let t_len = layer.bits.t();
            let mut v1 = layer.v1.clone();
            let mut v = vec![0.0; n * f];
            let mut reset = vec![0.0; n * f];
            let mut y = vec![0.0; n * f];
            for t in 0..t_len {
                let bits = layer.bits.b_s(t);
                let range = spike_range(bits, layer.bidirectional)?;
                for j in 0..n * f {
                    v[j] = inv_tau * v[j] + current[j] - reset[j];
                }
                if ctx.init_thresholds {
                    if let Some(s) = init_step(&v, range.q_max) {
                        v1[t] = snap(s);
                    }
                }
                if let Some(obs) = ctx.spike_observers.as_deref_mut() {
                    if let Some(s) = obs[li][t].renew(&v, bits, layer.bidirectional, &ctx.grid)? {
                        let s = snap(s);
                        ctx.events.push(RenewalEvent {
                            layer: li,
                            kind: QuantKind::Spike,
                            slot: t,
                            old: v1[t],
                            new: s,
                        });
                        v1[t] = s;
                    }
                }
                let th = v1[t];
                let sign_mode = layer.bidirectional && bits == 1;
                let codes: Vec<i32> = v.iter().map(|&vj| fire_normalized(vj / th, range, sign_mode, shift)).collect();
                for j in 0..n * f {
                    reset[j] = codes[j] as f64 * th;
                    y[j] += reset[j];
                }
                cache.v.push(v.clone());
                cache.codes.push(codes);
                cache.bits_s.push(bits);
            }
            if ctx.init_thresholds {
                let last = v1[t_len - 1];
                v1[t_len..].iter_mut().for_each(|s| *s = last);
            }
            let inv_t = 1.0 / t_len as f64;
            y.iter_mut().for_each(|yj| *yj *= inv_t);
            cache.v1 = v1;
            cache.input = x;
            cache.w_hat = w_hat;
            cache.output = y.clone();
            caches.push(cache);
            x = y;
        }
        Ok(Forward { n, caches })
    }

    /// Gradients of the task loss given `dL/dlogits`.
    pub fn backward(&self, fwd: &Forward, g_logits: &[f64]) -> Result<Vec<LayerGrads>> {
        let n = fwd.n;
        let inv_tau = 1.0 / self.spec.tau;
        let shift = self.spec.shift_enabled;
        let mut grads: Vec<LayerGrads> = self.layers.iter().map(LayerGrads::zeros).collect();
        let mut g_out = g_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let cache = &fwd.caches[li];
            let g = &mut grads[li];
            let g_current = if layer.spiking {
                let f = layer.op.out_len();
                let t_len = cache.timesteps();
                let inv_t = 1.0 / t_len as f64;
                let mut g_vnext = vec![0.0; n * f];
                let mut g_current = vec![0.0; n * f];
                let mut g_p = vec![0.0; n * f];
                let mut d_s = vec![0.0; n * f];
                let mut x = vec![0.0; n * f];
                for t in (0..t_len).rev() {
                    let th = cache.v1[t];
                    let bits = cache.bits_s[t];
                    let range = spike_range(bits, layer.bidirectional)?;
                    let v = &cache.v[t];
                    for j in 0..n * f {
                        g_p[j] = g_out[j] * inv_t - g_vnext[j];
                        d_s[j] = g_p[j] * th;
                        x[j] = v[j] / th;
                    }
                    g.v1[t] += threshold_grad_with(v, th, bits, &d_s, layer.bidirectional, shift)?;
                    g.b_s[t] += spike_bits_grad(&x, bits, &d_s, layer.bidirectional)?
                        * materialize_grad(layer.bits.b_s_hat[t], layer.bits.s_bound);
                    for j in 0..n * f {
                        let mask = if range.contains(x[j]) { 1.0 } else { 0.0 };
                        let gv = g_p[j] * mask + g_vnext[j] * inv_tau;
                        g_current[j] += gv;
                        g_vnext[j] = gv;
                    }
                }
                let dy_dt: f64 = g_out.iter().zip(&cache.output).map(|(gy, y)| -gy * y * inv_t).sum();
                g.t = dy_dt * materialize_grad(layer.bits.t_hat, layer.bits.t_bound);
                if let Some(bn) = &layer.bn {
                    batch_norm_backward(&mut g_current, n, &layer.op, bn, cache, &mut g.gamma, &mut g.beta);
                }
                g_current
            } else {
                g_out.clone()
            };
            let (g_what, g_x) = layer.op.backward(&g_current, &cache.input, n, &cache.w_hat);
            g.weights = weight_grad_values(&layer.weights, layer.s_q, cache.b_w, &g_what)?;
            g.s_q = weight_grad_step(&layer.weights, layer.s_q, cache.b_w, &g_what)?;
            g.b_w = weight_grad_bits(&layer.weights, layer.s_q, cache.b_w, &g_what)?
                * materialize_grad(layer.bits.b_w_hat, layer.bits.w_bound);
            g_out = g_x;
        }
        Ok(grads)
    }

    /// Copy thresholds chosen during a forward pass back into the model and
    /// fold the batch statistics into the running ones.
    pub fn absorb(&mut self, fwd: &Forward) {
        let n = fwd.n;
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.caches) {
            if !layer.spiking {
                continue;
            }
            layer.v1.clone_from(&cache.v1);
            if let Some(bn) = layer.bn.as_mut() {
                if cache.bn_mean.is_empty() {
                    continue;
                }
                let m = (n * layer.op.spatial()) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..bn.gamma.len() {
                    bn.running_mean[c] = snap((1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * cache.bn_mean[c]);
                    bn.running_var[c] =
                        snap((1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * cache.bn_var[c] * unbias);
                }
            }
        }
    }

    /// First non-finite intermediate of a forward pass, named for diagnostics.
    pub fn first_non_finite(&self, fwd: &Forward) -> Option<String> {
        for (li, c) in fwd.caches.iter().enumerate() {
            for (t, v) in c.v.iter().enumerate() {
                if v.iter().any(|x| !x.is_finite()) {
                    return Some(format!("layer {li} membrane potential at timestep {}", t + 1));
                }
            }
            if c.output.iter().any(|x| !x.is_finite()) {
                let what = if self.layers[li].spiking { "squeezed output" } else { "logits" };
                return Some(format!("layer {li} {what}"));
            }
        }
        self.first_non_finite_param()
    }

    pub fn first_non_finite_param(&self) -> Option<String> {
        for (li, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                if let Some(i) = t.iter().position(|x| !x.is_finite()) {
                    return Some(format!("layer {li} parameter {name}[{i}]"));
                }
            }
        }
        None
    }

    /// Cost report from measured spike statistics `(non-zero bits, bit slots)` per spiking layer.
    pub fn cost_report(&self, spikes: &[(u64, u64)]) -> Result<CostReport> {
        if spikes.len() != self.spiking_layers() {
            return Err(Error::invalid("spike statistics must cover every spiking layer"));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let (t, b_s, fr) = if li == 0 {
                (1.0, INPUT_BITS, 1.0)
            } else {
                let prev = &self.layers[li - 1].bits;
                let bs = prev.active_b_s();
                let (nz, slots) = spikes[li - 1];
                let fr = if slots == 0 { 0.0 } else { nz as f64 / slots as f64 };
                (bs.len() as f64, bs.iter().map(|&b| b as f64).sum::<f64>() / bs.len() as f64, fr)
            };
            let b_w = layer.bits.b_w() as f64;
            let macs = layer.op.macs() as f64;
            let bb = bit_budget(t, b_w, b_s);
            let s_ace = macs * bb;
            per_layer.push(LayerCost {
                layer: li,
                kind: if layer.spiking { layer.op.kind().to_string() } else { "readout".to_string() },
                t,
                b_w,
                b_s,
                macs,
                bit_budget: bb,
                s_ace,
                s_ace_squeezed: macs * bit_budget(1.0, b_w, b_s),
                ns_ace: fr * s_ace,
                weight_count: layer.weights.len(),
                weight_bits_total: layer.weights.len() as f64 * b_w,
                firing_rate: fr,
            });
        }
        let (nz, slots) = spikes.iter().fold((0u64, 0u64), |a, s| (a.0 + s.0, a.1 + s.1));
        let avg_fr = if slots == 0 { 0.0 } else { nz as f64 / slots as f64 };
        let avg = self.averages();
        let s_ace: f64 = per_layer.iter().map(|l| l.s_ace).sum();
        let ns_ace = crate::cost::ns_ace(s_ace, avg_fr)?;
        let weight_bits_total: f64 = per_layer.iter().map(|l| l.weight_bits_total).sum();
        let exp_act = crate::cost::expected_nonzero_bits(avg.t, avg.b_s, ns_ace, s_ace)?;
        let features: usize = self.layers.iter().map(|l| l.feature_count()).sum();
        // slots = samples * sum_l F_l * sum_t B_s^t, so the sample count is recoverable
        let per_sample_slots: f64 = self
            .layers
            .iter()
            .map(|l| l.feature_count() as f64 * l.bits.active_b_s().iter().map(|&b| b as f64).sum::<f64>())
            .sum();
        let samples = if per_sample_slots > 0.0 { slots as f64 / per_sample_slots } else { 0.0 };
        let measured = if samples > 0.0 { nz as f64 / (samples * features as f64) } else { 0.0 };
        Ok(CostReport {
            schema: COST_REPORT_SCHEMA.to_string(),
            totals: CostTotals {
                b_w: avg.b_w,
                b_s: avg.b_s,
                t: avg.t,
                bit_budget: avg.bit_budget(),
                macs: per_layer.iter().map(|l| l.macs).sum(),
                s_ace,
                s_ace_squeezed: per_layer.iter().map(|l| l.s_ace_squeezed).sum(),
                ns_ace,
                weight_bits_total,
                size_mb: bits_to_mb(weight_bits_total),
            },
            per_layer,
            avg_firing_rate: avg_fr,
            exp_act,
            measured_nonzero_bits: measured,
        })
    }

    /// `(non-zero bits, bit slots)` of every spiking layer's output in a forward pass.
    pub fn spike_counts(&self, fwd: &Forward) -> Vec<(u64, u64)> {
        self.layers
            .iter()
            .zip(&fwd.caches)
            .filter(|(l, _)| l.spiking)
            .map(|(_, c)| {
                let mut nz = 0u64;
                let mut slots = 0u64;
                for (codes, &b) in c.codes.iter().zip(&c.bits_s) {
                    nz += codes.iter().map(|c| c.unsigned_abs().count_ones() as u64).sum::<u64>();
                    slots += codes.len() as u64 * b as u64;
                }
                (nz, slots)
            })
            .collect()
    }

    /// Keep bit parameters inside their clip region and steps positive,
    /// then round every stored value to `f32`.
    pub fn project(&mut self, clamp_bits: bool) {
        for l in &mut self.layers {
            if clamp_bits {
                let b = &mut l.bits;
                b.b_w_hat = b.b_w_hat.clamp(1.0, b.w_bound as f64);
                for s in &mut b.b_s_hat {
                    *s = s.clamp(1.0, b.s_bound as f64);
                }
                b.t_hat = b.t_hat.clamp(1.0, b.t_bound as f64);
            }
            l.s_q = l.s_q.max(MIN_STEP);
            for th in &mut l.v1 {
                *th = th.max(MIN_STEP);
            }
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|x| *x = snap(*x));
            }
        }
    }
}

/// Floor for learned step sizes and thresholds.
pub const MIN_STEP: f64 = 1e-6;

fn batch_norm_forward(x: &mut [f64], n: usize, op: &Op, bn: &BatchNorm, train: bool, cache: &mut LayerCache) {
    let c_n = op.channels();
    let sp = op.spatial();
    let f = op.out_len();
    let (mean, var) = if train {
        let m = (n * sp) as f64;
        let mut mean = vec![0.0; c_n];
        let mut var = vec![0.0; c_n];
        for b in 0..n {
            for c in 0..c_n {
                let s = &x[b * f + c * sp..b * f + (c + 1) * sp];
                mean[c] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for c in 0..c_n {
                let s = &x[b * f + c * sp..b * f + (c + 1) * sp];
                var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..c_n {
            for s in 0..sp {
                let j = b * f + c * sp + s;
                xhat[j] = (x[j] - mean[c]) * inv_std[c];
                x[j] = bn.gamma[c] * xhat[j] + bn.beta[c];
            }
        }
    }
    cache.bn_xhat = xhat;
    cache.bn_inv_std = inv_std;
    if train {
        cache.bn_mean = mean;
        cache.bn_var = var;
    }
}

fn batch_norm_backward(
    g: &mut [f64],
    n: usize,
    op: &Op,
    bn: &BatchNorm,
    cache: &LayerCache,
    g_gamma: &mut [f64],
    g_beta: &mut [f64],
) {
    let c_n = op.channels();
    let sp = op.spatial();
    let f = op.out_len();
    let m = (n * sp) as f64;
    let train = !cache.bn_mean.is_empty();
    for c in 0..c_n {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..n {
            for s in 0..sp {
                let j = b * f + c * sp + s;
                sum_g += g[j];
                sum_gx += g[j] * cache.bn_xhat[j];
            }
        }
        g_gamma[c] += sum_gx;
        g_beta[c] += sum_g;
        let k = bn.gamma[c] * cache.bn_inv_std[c];
        for b in 0..n {
            for s in 0..sp {
                let j = b * f + c * sp + s;
                g[j] = if train {
                    k * (g[j] - sum_g / m - cache.bn_xhat[j] * sum_gx / m)
                } else {
                    k * g[j]
                };
            }
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::invalid("logits and labels disagree in size"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside [0, {classes})")));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[y];
        for k in 0..classes {
            let p = (row[k] - max).exp() / z;
            grad[b * classes + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest logit per sample; ties go to the lowest class.
pub fn predictions(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
