//! Learnable bit widths and temporal lengths: materialization, their
//! straight-through gradients, and the regulating loss on model averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{check_threshold, fire_normalized, spike_range, SpikeTrain};
use crate::quant::{bits_gq, grad_scale};

/// `round(clip(x_hat, 1, bound))`.
pub fn materialize(x_hat: f64, bound: u32) -> Result<u32> {
    if bound < 1 {
        return Err(Error::invalid("bound must be >= 1"));
    }
    if x_hat.is_nan() {
        return Err(Error::invalid("bit parameter is NaN"));
    }
    Ok(x_hat.clamp(1.0, bound as f64).round() as u32)
}

/// Straight-through derivative of [`materialize`]: identity inside the clip region.
pub fn materialize_grad(x_hat: f64, bound: u32) -> f64 {
    if x_hat >= 1.0 && x_hat <= bound as f64 {
        1.0
    } else {
        0.0
    }
}

/// Per-layer learnable bit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBitParams {
    pub b_w_hat: f64,
    /// One spike bit-width parameter per timestep slot (`t_bound` slots).
    pub b_s_hat: Vec<f64>,
    pub t_hat: f64,
    pub w_bound: u32,
    pub s_bound: u32,
    pub t_bound: u32,
}

impl LayerBitParams {
    pub fn new(init_w: f64, init_s: f64, init_t: f64, w_bound: u32, s_bound: u32, t_bound: u32) -> Result<Self> {
        if w_bound < 1 || s_bound < 1 || t_bound < 1 {
            return Err(Error::invalid("bit bounds must be >= 1"));
        }
        Ok(LayerBitParams {
            b_w_hat: init_w,
            b_s_hat: vec![init_s; t_bound as usize],
            t_hat: init_t,
            w_bound,
            s_bound,
            t_bound,
        })
    }

    pub fn b_w(&self) -> u32 {
        materialize(self.b_w_hat, self.w_bound).expect("bound validated")
    }

    pub fn t(&self) -> usize {
        materialize(self.t_hat, self.t_bound).expect("bound validated") as usize
    }

    /// Spike bits of slot `t` (0-based).
    pub fn b_s(&self, t: usize) -> u32 {
        materialize(self.b_s_hat[t], self.s_bound).expect("bound validated")
    }

    /// Spike bits for the active timesteps `0..t()`.
    pub fn active_b_s(&self) -> Vec<u32> {
        (0..self.t()).map(|t| self.b_s(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatingTargets {
    pub b_w_tar: f64,
    pub b_s_tar: f64,
    pub t_tar: f64,
    /// Penalty on the weight-bit average.
    pub lambda1: f64,
    /// Penalty on the temporal-length average.
    pub lambda2: f64,
    /// Penalty on the spike-bit average.
    pub lambda3: f64,
}

impl Default for RegulatingTargets {
    fn default() -> Self {
        RegulatingTargets {
            b_w_tar: 2.0,
            b_s_tar: 2.0,
            t_tar: 1.0,
            lambda1: 4e-2,
            lambda2: 4e-2,
            lambda3: 1e-2,
        }
    }
}

impl RegulatingTargets {
    pub fn validate(&self) -> Result<()> {
        if self.b_w_tar < 1.0 || self.b_s_tar < 1.0 || self.t_tar < 1.0 {
            return Err(Error::invalid("targets must be >= 1"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::invalid("penalty coefficients must be >= 0"));
        }
        Ok(())
    }
}

/// Gradient of the task loss with respect to one timestep's spike bit width.
///
/// `x` holds `v / V1` for the frame; `upstream` is `dL/dS` on the integer codes.
pub fn spike_bits_grad(x: &[f64], bits: u32, upstream: &[f64], bidirectional: bool) -> Result<f64> {
    if x.len() != upstream.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} membrane values vs {} upstream gradients",
            x.len(),
            upstream.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let range = spike_range(bits, bidirectional)?;
    let scale = grad_scale(x.len(), range.q_max);
    let sum: f64 = x
        .iter()
        .zip(upstream)
        .map(|(&xi, &g)| {
            // unsigned neurons only saturate upwards
            if !bidirectional && xi < range.q_min as f64 {
                0.0
            } else {
                g * bits_gq(xi, range, 1.0)
            }
        })
        .sum();
    Ok(sum * scale)
}

/// Per-element `g_q` of the threshold gradient.
#[inline]
pub fn threshold_gq(x: f64, bits: u32, bidirectional: bool, shift: bool) -> f64 {
    let range = spike_range(bits, bidirectional).expect("bits validated by caller");
    if x < range.q_min as f64 {
        range.q_min as f64
    } else if x > range.q_max as f64 {
        range.q_max as f64
    } else {
        fire_normalized(x, range, bidirectional && bits == 1, shift) as f64 - x
    }
}

/// Gradient with respect to one timestep slot's threshold `V1`.
///
/// `v` is the membrane potential of the frame, `upstream` is `dL/dS`.
pub fn threshold_grad(v: &[f64], v1: f64, bits: u32, upstream: &[f64], bidirectional: bool) -> Result<f64> {
    threshold_grad_with(v, v1, bits, upstream, bidirectional, true)
}

/// [`threshold_grad`] for a neuron with or without the threshold shift.
pub fn threshold_grad_with(v: &[f64], v1: f64, bits: u32, upstream: &[f64], bidirectional: bool, shift: bool) -> Result<f64> {
    check_threshold(v1)?;
    if v.len() != upstream.len() {
        return Err(Error::invalid("shape mismatch between membrane and upstream"));
    }
    if v.is_empty() {
        return Ok(0.0);
    }
    let range = spike_range(bits, bidirectional)?;
    let scale = grad_scale(v.len(), range.q_max);
    let sum: f64 = v
        .iter()
        .zip(upstream)
        .map(|(&vi, &g)| g * threshold_gq(vi / v1, bits, bidirectional, shift))
        .sum();
    Ok(sum * scale / v1)
}

/// Gradient of the squeezed train `(1/T) sum_t S^t` with respect to a continuous `T`.
pub fn temporal_grad(train: &SpikeTrain, upstream_on_squeezed: &[f64]) -> Result<f64> {
    if upstream_on_squeezed.len() != train.features {
        return Err(Error::invalid("upstream length must equal the feature count"));
    }
    let t = train.timesteps() as f64;
    let mut sums = vec![0.0; train.features];
    for ti in 0..train.timesteps() {
        for (s, &c) in sums.iter_mut().zip(train.frame(ti)) {
            *s += c as f64;
        }
    }
    Ok(sums
        .iter()
        .zip(upstream_on_squeezed)
        .map(|(s, g)| -g * s / (t * t))
        .sum())
}

/// One layer as seen by the bit averages.
#[derive(Debug, Clone, Copy)]
pub struct BitLayer<'a> {
    pub params: &'a LayerBitParams,
    pub weight_count: usize,
    /// Output feature elements per timestep; zero for non-spiking layers.
    pub feature_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitAverages {
    pub b_w: f64,
    pub b_s: f64,
    pub t: f64,
}

impl BitAverages {
    /// Model-level Bit Budget as the product of the averages.
    pub fn bit_budget(&self) -> f64 {
        self.b_w * self.b_s * self.t
    }
}

/// Element-count weighted model averages of the materialized widths.
pub fn average_bits(layers: &[BitLayer<'_>]) -> Result<BitAverages> {
    if layers.is_empty() {
        return Err(Error::invalid("average_bits needs at least one layer"));
    }
    let nw: f64 = layers.iter().map(|l| l.weight_count as f64).sum();
    let nf: f64 = layers.iter().map(|l| l.feature_count as f64).sum();
    if nw == 0.0 {
        return Err(Error::invalid("model has no weights"));
    }
    let b_w = layers.iter().map(|l| l.weight_count as f64 * l.params.b_w() as f64).sum::<f64>() / nw;
    if nf == 0.0 {
        return Ok(BitAverages { b_w, b_s: 0.0, t: 0.0 });
    }
    let ft: f64 = layers.iter().map(|l| (l.feature_count * l.params.t()) as f64).sum();
    let bs_sum: f64 = layers
        .iter()
        .map(|l| l.feature_count as f64 * l.params.active_b_s().iter().map(|&b| b as f64).sum::<f64>())
        .sum();
    Ok(BitAverages {
        b_w,
        b_s: bs_sum / ft,
        t: ft / nf,
    })
}

/// Gradients of the regulating loss for one layer's bit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBitGrads {
    pub b_w: f64,
    pub b_s: Vec<f64>,
    pub t: f64,
}

impl LayerBitGrads {
    pub fn zeros(slots: usize) -> Self {
        LayerBitGrads {
            b_w: 0.0,
            b_s: vec![0.0; slots],
            t: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regulation {
    pub loss: f64,
    pub averages: BitAverages,
    pub grads: Vec<LayerBitGrads>,
}

/// Squared-distance penalty of the averages from their targets.
pub fn regulating_loss(avg: &BitAverages, targets: &RegulatingTargets) -> f64 {
    targets.lambda1 * (avg.b_w - targets.b_w_tar).powi(2)
        + targets.lambda2 * (avg.t - targets.t_tar).powi(2)
        + targets.lambda3 * (avg.b_s - targets.b_s_tar).powi(2)
}

/// Regulating loss plus its straight-through gradients into every layer.
///
/// The spike-bit average depends on the temporal lengths only through the
/// integer `T`, so it contributes nothing to the `T_hat` gradients.
pub fn regulate(layers: &[BitLayer<'_>], targets: &RegulatingTargets) -> Result<Regulation> {
    let averages = average_bits(layers)?;
    let loss = regulating_loss(&averages, targets);
    let d_bw = 2.0 * targets.lambda1 * (averages.b_w - targets.b_w_tar);
    let d_t = 2.0 * targets.lambda2 * (averages.t - targets.t_tar);
    let d_bs = 2.0 * targets.lambda3 * (averages.b_s - targets.b_s_tar);

    let nw: f64 = layers.iter().map(|l| l.weight_count as f64).sum();
    let nf: f64 = layers.iter().map(|l| l.feature_count as f64).sum();
    let ft: f64 = layers.iter().map(|l| (l.feature_count * l.params.t()) as f64).sum();

    let grads = layers
        .iter()
        .map(|l| {
            let p = l.params;
            let mut g = LayerBitGrads::zeros(p.b_s_hat.len());
            g.b_w = d_bw * l.weight_count as f64 / nw * materialize_grad(p.b_w_hat, p.w_bound);
            if l.feature_count > 0 {
                let share = l.feature_count as f64;
                g.t = d_t * share / nf * materialize_grad(p.t_hat, p.t_bound);
                for t in 0..p.t() {
                    g.b_s[t] = d_bs * share / ft * materialize_grad(p.b_s_hat[t], p.s_bound);
                }
            }
            g
        })
        .collect();
    Ok(Regulation { loss, averages, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn materialize_examples() {
        assert_eq!(materialize(0.3, 6).unwrap(), 1);
        assert_eq!(materialize(4.49, 6).unwrap(), 4);
        assert_eq!(materialize(9.0, 6).unwrap(), 6);
        assert!(materialize(1.0, 0).is_err());
        assert_eq!(materialize_grad(0.3, 6), 0.0);
        assert_eq!(materialize_grad(3.3, 6), 1.0);
    }

    #[test]
    fn spike_bits_grad_examples() {
        let g = spike_bits_grad(&[5.0], 2, &[1.0], false).unwrap();
        assert!((4.0 * LN_2 - 2.7726).abs() < 1e-4);
        assert!((g - 4.0 * LN_2 / 3f64.sqrt()).abs() < 1e-12);

        assert_eq!(spike_bits_grad(&[0.2, 1.7, 3.0], 2, &[1.0; 3], false).unwrap(), 0.0);

        // bidirectional, 2 bits: range [-1, 1], q_max + 1 = 2
        let g = spike_bits_grad(&[-4.0], 2, &[1.0], true).unwrap();
        assert!((g - (-2.0 * LN_2)).abs() < 1e-12);

        // unsigned neuron below zero does not saturate the bit width
        assert_eq!(spike_bits_grad(&[-4.0], 2, &[1.0], false).unwrap(), 0.0);
    }

    #[test]
    fn threshold_grad_examples() {
        let g = threshold_grad(&[1.3], 1.0, 2, &[1.0], false).unwrap();
        assert!((g - (-0.3 / 3f64.sqrt())).abs() < 1e-12);
        let g = threshold_grad(&[10.0], 1.0, 2, &[1.0], false).unwrap();
        assert!((g - 3.0 / 3f64.sqrt()).abs() < 1e-12);
        let g = threshold_grad(&[-10.0], 1.0, 2, &[1.0], false).unwrap();
        assert_eq!(g, 0.0);
        assert!(threshold_grad(&[1.0], 0.0, 2, &[1.0], false).is_err());
        // one-bit bidirectional: sign(0.4) - 0.4
        let g = threshold_grad(&[0.4], 1.0, 1, &[1.0], true).unwrap();
        assert!((g - 0.6).abs() < 1e-12);
    }

    #[test]
    fn temporal_grad_examples() {
        let tr = SpikeTrain::from_rows(&[vec![2], vec![2]], 2, false).unwrap();
        assert_eq!(temporal_grad(&tr, &[1.0]).unwrap(), -1.0);
        let tr = SpikeTrain::from_rows(&[vec![0, 0], vec![0, 0]], 2, false).unwrap();
        assert_eq!(temporal_grad(&tr, &[1.0, 1.0]).unwrap(), 0.0);
        let tr = SpikeTrain::from_rows(&[vec![3], vec![1]], 2, false).unwrap();
        assert_eq!(temporal_grad(&tr, &[0.0]).unwrap(), 0.0);
    }

    fn params(bw: f64) -> LayerBitParams {
        LayerBitParams::new(bw, 2.0, 1.0, 6, 6, 3).unwrap()
    }

    #[test]
    fn averages_are_element_weighted() {
        let (a, b) = (params(2.0), params(4.0));
        let layers = [
            BitLayer { params: &a, weight_count: 10, feature_count: 5 },
            BitLayer { params: &b, weight_count: 10, feature_count: 5 },
        ];
        assert_eq!(average_bits(&layers).unwrap().b_w, 3.0);

        let (a, b) = (params(1.0), params(3.0));
        let layers = [
            BitLayer { params: &a, weight_count: 100, feature_count: 5 },
            BitLayer { params: &b, weight_count: 300, feature_count: 5 },
        ];
        assert_eq!(average_bits(&layers).unwrap().b_w, 2.5);

        let mut c = LayerBitParams::new(3.0, 4.0, 2.0, 6, 6, 3).unwrap();
        c.b_s_hat[1] = 2.0;
        let avg = average_bits(&[BitLayer { params: &c, weight_count: 7, feature_count: 9 }]).unwrap();
        assert_eq!(avg, BitAverages { b_w: 3.0, b_s: 3.0, t: 2.0 });

        assert!(average_bits(&[]).is_err());
    }

    #[test]
    fn regulating_loss_examples() {
        let t = RegulatingTargets::default();
        let avg = BitAverages { b_w: 2.0, b_s: 2.0, t: 1.0 };
        assert_eq!(regulating_loss(&avg, &t), 0.0);
        let avg = BitAverages { b_w: 4.0, b_s: 2.0, t: 1.0 };
        assert!((regulating_loss(&avg, &t) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn regulating_gradient_sign() {
        let (a, b) = (params(4.0), params(3.0));
        let layers = [
            BitLayer { params: &a, weight_count: 10, feature_count: 5 },
            BitLayer { params: &b, weight_count: 30, feature_count: 5 },
        ];
        let reg = regulate(&layers, &RegulatingTargets::default()).unwrap();
        assert!(reg.grads.iter().all(|g| g.b_w > 0.0));
    }

    #[test]
    fn regulation_converges_on_frozen_task() {
        let mut layers_p: Vec<LayerBitParams> =
            (0..3).map(|_| LayerBitParams::new(4.0, 4.0, 2.0, 6, 6, 3).unwrap()).collect();
        let counts = [(100, 50), (300, 20), (60, 10)];
        let targets = RegulatingTargets {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            ..RegulatingTargets::default()
        };
        let mut avg = BitAverages { b_w: 0.0, b_s: 0.0, t: 0.0 };
        for _ in 0..200 {
            let layers: Vec<BitLayer> = layers_p
                .iter()
                .zip(counts)
                .map(|(p, (w, f))| BitLayer { params: p, weight_count: w, feature_count: f })
                .collect();
            let reg = regulate(&layers, &targets).unwrap();
            avg = reg.averages;
            for (p, g) in layers_p.iter_mut().zip(&reg.grads) {
                p.b_w_hat -= 0.1 * g.b_w;
                p.t_hat -= 0.1 * g.t;
                for (b, gb) in p.b_s_hat.iter_mut().zip(&g.b_s) {
                    *b -= 0.1 * gb;
                }
            }
        }
        assert!((avg.b_w - 2.0).abs() <= 0.5, "{avg:?}");
        assert!((avg.b_s - 2.0).abs() <= 0.5, "{avg:?}");
        assert!((avg.t - 1.0).abs() <= 0.5, "{avg:?}");
    }
}
