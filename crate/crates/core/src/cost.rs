//! Bit Budget, S-ACE / NS-ACE, model size, firing rate and expected
//! non-zero activation bits.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::SpikeTrain;

pub const COST_REPORT_SCHEMA: &str = "bitsnn.cost_report/1";

/// `T * B_w * B_s`.
pub fn bit_budget(t: f64, b_w: f64, b_s: f64) -> f64 {
    t * b_w * b_s
}

/// One weight/spike pairing for S-ACE accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AceTerm {
    pub macs: f64,
    pub t: f64,
    pub b_w: f64,
    pub b_s: f64,
    /// Post-squeeze pipeline: the layer convolves one averaged frame.
    pub squeezed: bool,
}

/// `sum_l MACs_l * BB_l`, with `T = 1` for squeezed layers.
pub fn s_ace(layers: &[AceTerm]) -> f64 {
    layers
        .iter()
        .map(|l| {
            let t = if l.squeezed { 1.0 } else { l.t };
            l.macs * bit_budget(t, l.b_w, l.b_s)
        })
        .sum()
}

pub fn ns_ace(s_ace_total: f64, avg_firing_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&avg_firing_rate) {
        return Err(Error::invalid(format!("firing rate {avg_firing_rate} outside [0, 1]")));
    }
    Ok(avg_firing_rate * s_ace_total)
}

/// Set bits and total bit slots of a spike train; signed codes count magnitude bits.
pub fn spike_bit_counts(train: &SpikeTrain) -> (u64, u64) {
    let mut nonzero = 0u64;
    let mut slots = 0u64;
    for t in 0..train.timesteps() {
        let bits = train.bits_per_t[t] as u64;
        slots += bits * train.features as u64;
        nonzero += train.frame(t).iter().map(|c| c.unsigned_abs().count_ones() as u64).sum::<u64>();
    }
    (nonzero, slots)
}

/// Fraction of non-zero bit positions among the train's bit slots.
pub fn firing_rate(train: &SpikeTrain) -> Result<f64> {
    if train.timesteps() == 0 || train.features == 0 {
        return Err(Error::invalid("empty spike train"));
    }
    let (nz, slots) = spike_bit_counts(train);
    Ok(nz as f64 / slots as f64)
}

/// `T * S * (NS-ACE / S-ACE)`.
pub fn expected_nonzero_bits(t: f64, s: f64, ns_ace: f64, s_ace: f64) -> Result<f64> {
    if !(s_ace > 0.0) {
        return Err(Error::invalid("S-ACE must be positive"));
    }
    Ok(t * s * ns_ace / s_ace)
}

/// Weight storage in bits.
pub fn model_size_bits(layers: &[(usize, f64)]) -> f64 {
    layers.iter().map(|&(n, b)| n as f64 * b).sum()
}

pub fn bits_to_mb(bits: f64) -> f64 {
    bits / (8.0 * 1024.0 * 1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    /// Temporal length of the consumed spike train.
    pub t: f64,
    pub b_w: f64,
    /// Mean bit width of the consumed spikes over their timesteps.
    pub b_s: f64,
    pub macs: f64,
    pub bit_budget: f64,
    /// Conventional pipeline: one convolution per input timestep.
    pub s_ace: f64,
    /// Post-squeeze pipeline: one convolution of the averaged frame.
    pub s_ace_squeezed: f64,
    pub ns_ace: f64,
    pub weight_count: usize,
    pub weight_bits_total: f64,
    /// Bits set over bits available in the consumed spikes, when measured.
    pub firing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    /// Element-weighted model averages.
    pub b_w: f64,
    pub b_s: f64,
    pub t: f64,
    /// Product of the averages.
    pub bit_budget: f64,
    pub macs: f64,
    pub s_ace: f64,
    pub s_ace_squeezed: f64,
    pub ns_ace: f64,
    pub weight_bits_total: f64,
    pub size_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema: String,
    pub per_layer: Vec<LayerCost>,
    pub totals: CostTotals,
    pub avg_firing_rate: f64,
    pub exp_act: f64,
    /// Measured non-zero activation bits per output element.
    pub measured_nonzero_bits: f64,
}

impl CostReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: CostReport = serde_json::from_str(&text)?;
        if report.schema != COST_REPORT_SCHEMA {
            return Err(Error::Version {
                found: report.schema,
                expected: COST_REPORT_SCHEMA.into(),
            });
        }
        Ok(report)
    }

    /// Flat CSV: one row per layer followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,t,b_w,b_s,macs,bit_budget,s_ace,s_ace_squeezed,ns_ace,weight_count,weight_bits_total,firing_rate\n",
        );
        for l in &self.per_layer {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.layer,
                l.kind,
                l.t,
                l.b_w,
                l.b_s,
                l.macs,
                l.bit_budget,
                l.s_ace,
                l.s_ace_squeezed,
                l.ns_ace,
                l.weight_count,
                l.weight_bits_total,
                l.firing_rate
            ));
        }
        let t = &self.totals;
        let count: usize = self.per_layer.iter().map(|l| l.weight_count).sum();
        out.push_str(&format!(
            "total,model,{},{},{},{},{},{},{},{},{},{},{}\n",
            t.t,
            t.b_w,
            t.b_s,
            t.macs,
            t.bit_budget,
            t.s_ace,
            t.s_ace_squeezed,
            t.ns_ace,
            count,
            t.weight_bits_total,
            self.avg_firing_rate
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Table-style summary row: W/S/T, Bit Budget, S-ACE, NS-ACE, size, accuracy.
    ///
    /// NS-ACE needs measured firing rates; pass `measured = false` to print `-` instead.
    pub fn table_row(&self, accuracy: Option<f64>, measured: bool) -> String {
        let t = &self.totals;
        let acc = accuracy.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let ns = if measured { format!("{:.4} M", t.ns_ace / 1e6) } else { "-".to_string() };
        format!(
            "W/S/T {:.2}/{:.2}/{:.2} | Bit Budget {:.2} | S-ACE {:.4} M | S-ACE squeezed {:.4} M | NS-ACE {} | Size {:.4} MB | Top-1 {}",
            t.b_w,
            t.b_s,
            t.t,
            t.bit_budget,
            t.s_ace / 1e6,
            t.s_ace_squeezed / 1e6,
            ns,
            t.size_mb,
            acc
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_budget_examples() {
        assert_eq!(bit_budget(4.0, 16.0, 1.0), 64.0);
        assert_eq!(bit_budget(1.0, 16.0, 2.0), 32.0);
        assert_eq!(bit_budget(1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn s_ace_examples() {
        let l = AceTerm { macs: 1000.0, t: 4.0, b_w: 16.0, b_s: 1.0, squeezed: false };
        assert_eq!(s_ace(&[l]), 64000.0);
        let a = AceTerm { macs: 500.0, t: 2.0, b_w: 3.0, b_s: 2.0, squeezed: false };
        let b = AceTerm { squeezed: true, ..a };
        assert_eq!(s_ace(&[a]), 2.0 * s_ace(&[b]));
        assert_eq!(s_ace(&[AceTerm { macs: 0.0, ..a }]), 0.0);
    }

    #[test]
    fn ns_ace_examples() {
        assert_eq!(ns_ace(10.0, 0.0).unwrap(), 0.0);
        assert_eq!(ns_ace(10.0, 1.0).unwrap(), 10.0);
        let v = ns_ace(54.69, 16.99 / 54.69).unwrap();
        assert!((v - 16.99).abs() < 1e-12);
        assert!(ns_ace(1.0, 1.5).is_err());
        assert!(ns_ace(1.0, -0.1).is_err());
    }

    #[test]
    fn firing_rate_examples() {
        let tr = SpikeTrain::from_rows(&[vec![0, 0]], 2, false).unwrap();
        assert_eq!(firing_rate(&tr).unwrap(), 0.0);
        let tr = SpikeTrain::from_rows(&[vec![3]], 2, false).unwrap();
        assert_eq!(firing_rate(&tr).unwrap(), 1.0);
        let tr = SpikeTrain::from_rows(&[vec![2]], 2, false).unwrap();
        assert_eq!(firing_rate(&tr).unwrap(), 0.5);
        // magnitude bits for signed codes
        let tr = SpikeTrain::from_rows(&[vec![-3, 1]], 3, true).unwrap();
        assert_eq!(firing_rate(&tr).unwrap(), 3.0 / 6.0);
    }

    #[test]
    fn expected_bits_examples() {
        let e = expected_nonzero_bits(1.0, 3.96, 16.99, 54.69).unwrap();
        assert!((e - 1.23).abs() < 0.01);
        let e = expected_nonzero_bits(1.0, 2.18, 7.77, 30.74).unwrap();
        assert!((e - 0.55).abs() < 0.01);
        assert_eq!(expected_nonzero_bits(1.0, 2.0, 0.0, 3.0).unwrap(), 0.0);
        assert!(expected_nonzero_bits(1.0, 2.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn model_size_examples() {
        let bits = model_size_bits(&[(1_000_000, 4.0)]);
        assert_eq!(bits, 4e6);
        assert!((bits_to_mb(bits) - 0.4768).abs() < 1e-4);
        assert_eq!(model_size_bits(&[]), 0.0);
        assert_eq!(model_size_bits(&[(10, 2.0), (5, 4.0)]), 40.0);
    }
}
