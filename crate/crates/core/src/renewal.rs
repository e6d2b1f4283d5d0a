//! Step-size renewal: a bit-width observer re-derives a quantizer's step
//! from running extrema whenever the materialized bit width changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantRange;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    /// Number of candidate ranges.
    pub k: usize,
    /// Exponent of the reconstruction error.
    pub pow: f64,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        GridSearchConfig { k: 100, pow: 2.4 }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("grid search needs k >= 1"));
        }
        if !(self.pow > 0.0) {
            return Err(Error::invalid("grid search power must be > 0"));
        }
        Ok(())
    }
}

/// Result of one grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridChoice {
    pub v_max: f64,
    pub v_min: f64,
    /// Winning score; `+inf` when no candidate was scorable.
    pub score: f64,
}

/// Mean `|x_q - x|^pow` for quantizing `x` with `step` over `range`.
pub fn quantization_score(x: &[f64], step: f64, range: QuantRange, pow: f64) -> f64 {
    let sum: f64 = x
        .iter()
        .map(|&v| {
            let q = step * range.clip((v / step).round());
            (q - v).abs().powf(pow)
        })
        .sum();
    sum / x.len() as f64
}

/// Search candidate clipping ranges `k * R / K`, symmetric when any value is
/// negative and anchored at zero otherwise, keeping the lowest-scoring one.
///
/// The best score starts at `+inf`; only strict improvements replace the
/// incumbent, so ties keep the earliest `k`.
pub fn grid_search(x: &[f64], v_max: f64, v_min: f64, cfg: &GridSearchConfig, range: QuantRange) -> Result<GridChoice> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("grid search on empty data"));
    }
    if range.q_min == range.q_max {
        return Err(Error::invalid("grid search needs q_min < q_max"));
    }
    if !(v_max >= v_min) {
        return Err(Error::invalid(format!("grid search needs v_max >= v_min, got {v_max} < {v_min}")));
    }
    let r = v_max - v_min;
    let any_negative = x.iter().any(|&v| v < 0.0);
    let mut best = GridChoice {
        v_max,
        v_min,
        score: f64::INFINITY,
    };
    for k in 1..=cfg.k {
        let cand_max = k as f64 * r / cfg.k as f64;
        let cand_min = if any_negative { -cand_max } else { 0.0 };
        let step = (cand_max - cand_min) / range.span();
        if !(step > 0.0 && step.is_finite()) {
            continue;
        }
        let score = quantization_score(x, step, range, cfg.pow);
        if score < best.score {
            best = GridChoice {
                v_max: cand_max,
                v_min: cand_min,
                score,
            };
        }
    }
    Ok(best)
}

/// Per-quantizer bit-width observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub v_r_max: f64,
    pub v_r_min: f64,
    /// Bit width seen at the last renewal; `0` before the first one.
    pub recorded_bits: u32,
    pub active: bool,
}

impl Default for ObserverState {
    fn default() -> Self {
        ObserverState {
            v_r_max: f64::NEG_INFINITY,
            v_r_min: f64::INFINITY,
            recorded_bits: 0,
            active: true,
        }
    }
}

impl ObserverState {
    /// Renew the step if `bits` differs from the recorded width.
    ///
    /// Returns `None` when the width is unchanged (or the observer was shut).
    pub fn renew(&mut self, x: &[f64], bits: u32, signed: bool, cfg: &GridSearchConfig) -> Result<Option<f64>> {
        if !self.active || bits == self.recorded_bits {
            return Ok(None);
        }
        let range = QuantRange::new(bits, signed)?;
        if x.is_empty() {
            return Err(Error::invalid("renewal on empty data"));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in x {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let choice = grid_search(x, hi, lo, cfg, range)?;
        self.recorded_bits = bits;
        self.v_r_max = self.v_r_max.max(choice.v_max);
        self.v_r_min = self.v_r_min.min(choice.v_min);
        let step = (self.v_r_max - self.v_r_min) / range.span();
        if step > 0.0 && step.is_finite() {
            Ok(Some(step))
        } else {
            Ok(None)
        }
    }
}

/// Whether renewal should stay on: the bit gap is still above 24% of its
/// initial value.
pub fn shutting_check(current_avg: f64, target: f64, initial_diff: f64) -> bool {
    (current_avg - target).abs() > SHUTTING_FRACTION * initial_diff
}

pub const SHUTTING_FRACTION: f64 = 0.24;

/// Latching shut-off for one quantizer class (weights or spikes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuttingGate {
    pub initial_diff: f64,
    pub active: bool,
    /// When false, the gate re-arms if the gap grows back above the threshold.
    pub latch: bool,
}

impl ShuttingGate {
    pub fn new(initial_avg: f64, target: f64, latch: bool) -> Self {
        ShuttingGate {
            initial_diff: (initial_avg - target).abs(),
            active: true,
            latch,
        }
    }

    /// Update with the current average and report whether renewal may run.
    pub fn update(&mut self, current_avg: f64, target: f64) -> bool {
        let open = self.initial_diff > 0.0 && shutting_check(current_avg, target, self.initial_diff);
        if self.latch {
            self.active = self.active && open;
        } else {
            self.active = open;
        }
        self.active
    }
}
