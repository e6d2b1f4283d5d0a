//! Multi-bit spiking neuron with temporal squeezing, soft reset and a
//! shifted-floor fire that rounds instead of flooring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{sign_pos, QuantRange, QuantizedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    /// Leak constant; `1.0` is a plain integrate-and-fire neuron.
    pub tau: f64,
    pub bidirectional: bool,
    pub t_bound: usize,
    /// Apply the `0.5 * sign(v / V1)` threshold shift before flooring.
    pub shift_enabled: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            tau: 1.0,
            bidirectional: false,
            t_bound: 3,
            shift_enabled: true,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be >= 1, got {}", self.tau)));
        }
        if self.t_bound == 0 {
            return Err(Error::invalid("t_bound must be >= 1"));
        }
        Ok(())
    }
}

/// Range of spike codes for a timestep with `bits` bits.
pub fn spike_range(bits: u32, bidirectional: bool) -> Result<QuantRange> {
    QuantRange::new(bits, bidirectional)
}

/// Spike code for a normalized membrane `x = v / V1`.
///
/// With the shift, the fire rounds half away from zero; for the unsigned
/// neuron this is exactly `floor(x + 0.5 * sign(x))` after clipping.
/// A one-bit bidirectional neuron fires `sign(x)`.
#[inline]
pub fn fire_normalized(x: f64, range: QuantRange, sign_mode: bool, shift: bool) -> i32 {
    if sign_mode {
        return sign_pos(x) as i32;
    }
    let level = if shift {
        sign_pos(x) * (x.abs() + 0.5).floor()
    } else {
        x.floor()
    };
    range.clip(level) as i32
}

/// Fire with the threshold shift enabled.
pub fn fire(v: f64, v1: f64, bits: u32, bidirectional: bool) -> Result<i32> {
    fire_with(v, v1, bits, bidirectional, true)
}

pub fn fire_with(v: f64, v1: f64, bits: u32, bidirectional: bool, shift: bool) -> Result<i32> {
    check_threshold(v1)?;
    let range = spike_range(bits, bidirectional)?;
    Ok(fire_normalized(v / v1, range, bidirectional && bits == 1, shift))
}

/// Straight-through mask for `dS / d(v / V1)`: 1 inside the clip range, else 0.
pub fn spike_surrogate(v: f64, v1: f64, bits: u32, bidirectional: bool) -> Result<u8> {
    check_threshold(v1)?;
    let range = spike_range(bits, bidirectional)?;
    Ok(range.contains(v / v1) as u8)
}

pub(crate) fn check_threshold(v1: f64) -> Result<()> {
    if !(v1 > 0.0 && v1.is_finite()) {
        return Err(Error::invalid(format!("threshold V1 must be positive and finite, got {v1}")));
    }
    Ok(())
}

/// Integer spike codes over `t` timesteps, row-major `[t][features]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub codes: Vec<i32>,
    pub bits_per_t: Vec<u32>,
    pub features: usize,
    pub bidirectional: bool,
}

impl SpikeTrain {
    pub fn new(codes: Vec<i32>, bits_per_t: Vec<u32>, features: usize, bidirectional: bool) -> Result<Self> {
        let t = bits_per_t.len();
        if t == 0 || features == 0 {
            return Err(Error::invalid("spike train needs at least one timestep and one feature"));
        }
        if codes.len() != t * features {
            return Err(Error::invalid(format!(
                "spike train has {} codes, expected {t} x {features}",
                codes.len()
            )));
        }
        for (ti, &b) in bits_per_t.iter().enumerate() {
            let r = spike_range(b, bidirectional)?;
            let frame = &codes[ti * features..(ti + 1) * features];
            if let Some(c) = frame.iter().find(|&&c| c < r.q_min || c > r.q_max) {
                return Err(Error::invalid(format!(
                    "spike code {c} at timestep {ti} outside [{}, {}]",
                    r.q_min, r.q_max
                )));
            }
        }
        Ok(SpikeTrain {
            codes,
            bits_per_t,
            features,
            bidirectional,
        })
    }

    /// Build from rows, one per timestep.
    pub fn from_rows(rows: &[Vec<i32>], bits: u32, bidirectional: bool) -> Result<Self> {
        let features = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != features) {
            return Err(Error::invalid("ragged spike rows"));
        }
        let codes = rows.iter().flatten().copied().collect();
        SpikeTrain::new(codes, vec![bits; rows.len()], features, bidirectional)
    }

    pub fn timesteps(&self) -> usize {
        self.bits_per_t.len()
    }

    pub fn frame(&self, t: usize) -> &[i32] {
        &self.codes[t * self.features..(t + 1) * self.features]
    }
}

/// Mean of the spike train over its timesteps.
pub fn temporal_squeeze(train: &SpikeTrain) -> Result<Vec<f64>> {
    let t = train.timesteps();
    if t == 0 {
        return Err(Error::invalid("empty spike train"));
    }
    let mut out = vec![0i64; train.features];
    for ti in 0..t {
        for (o, &c) in out.iter_mut().zip(train.frame(ti)) {
            *o += c as i64;
        }
    }
    Ok(out.into_iter().map(|s| s as f64 / t as f64).collect())
}

/// Input current `W_q * (V1_prev * squeezed)` for a dense `[out][in]` weight matrix.
///
/// The step and threshold scale the integer accumulation once, after the sum.
pub fn input_current(squeezed_prev: &[f64], weights: &QuantizedTensor, out_dim: usize, v1_prev: f64) -> Result<Vec<f64>> {
    check_threshold(v1_prev)?;
    let in_dim = squeezed_prev.len();
    if out_dim == 0 || weights.len() != out_dim * in_dim {
        return Err(Error::invalid(format!(
            "weight matrix has {} entries, expected {out_dim} x {in_dim}",
            weights.len()
        )));
    }
    let scale = weights.step * v1_prev;
    Ok(weights
        .codes
        .chunks_exact(in_dim)
        .map(|row| {
            let acc: f64 = row.iter().zip(squeezed_prev).map(|(&c, &x)| c as f64 * x).sum();
            acc * scale
        })
        .collect())
}

/// Membrane state of one layer during a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub config: NeuronConfig,
    pub v: Vec<f64>,
    /// Per-timestep thresholds, one slot per possible timestep.
    pub v1: Vec<f64>,
    pub last_spike: Vec<i32>,
    /// Threshold that produced `last_spike`; the soft reset subtracts with it.
    pub last_v1: f64,
}

impl NeuronState {
    pub fn new(config: NeuronConfig, features: usize, v1: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if v1.len() != config.t_bound {
            return Err(Error::invalid(format!(
                "expected {} threshold slots, got {}",
                config.t_bound,
                v1.len()
            )));
        }
        for &th in &v1 {
            check_threshold(th)?;
        }
        Ok(NeuronState {
            config,
            v: vec![0.0; features],
            v1,
            last_spike: vec![0; features],
            last_v1: 0.0,
        })
    }

    /// Advance to timestep `t` (1-based): leak, integrate, soft reset, fire.
    pub fn step(&mut self, v_in: &[f64], t: usize, bits_t: u32) -> Result<Vec<i32>> {
        if t == 0 || t > self.config.t_bound {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.config.t_bound)));
        }
        if v_in.len() != self.v.len() {
            return Err(Error::invalid(format!(
                "input current has {} features, neuron has {}",
                v_in.len(),
                self.v.len()
            )));
        }
        let th = self.v1[t - 1];
        let range = spike_range(bits_t, self.config.bidirectional)?;
        let sign_mode = self.config.bidirectional && bits_t == 1;
        let inv_tau = 1.0 / self.config.tau;
        for j in 0..self.v.len() {
            let v = inv_tau * self.v[j] + v_in[j] - self.last_spike[j] as f64 * self.last_v1;
            self.v[j] = v;
            self.last_spike[j] = fire_normalized(v / th, range, sign_mode, self.config.shift_enabled);
        }
        self.last_v1 = th;
        if let Some(j) = self.v.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("membrane potential {j} is not finite")));
        }
        Ok(self.last_spike.clone())
    }
}
