//! TOML run configuration, one section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bits::RegulatingTargets;
use crate::error::{Error, Result};
use crate::model::{BitTriple, ModelSpec};
use crate::renewal::GridSearchConfig;
use crate::train::{RenewalMode, TrainConfig};

const DIGITS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/digits");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    /// `desk` (three conv layers on 8x8 digits) or `micro`.
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Learn the bit widths; off gives uniform quantization at the initial widths.
    pub learn_bits: bool,
    pub eval_batch_size: usize,
    pub classes: usize,
    pub train_data: String,
    pub train_labels: String,
    pub test_data: String,
    pub test_labels: String,
}

impl Default for HarnessSection {
    fn default() -> Self {
        HarnessSection {
            model: "desk".into(),
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            learn_bits: true,
            eval_batch_size: 128,
            classes: 10,
            train_data: format!("{DIGITS}/train-images.idx3-ubyte"),
            train_labels: format!("{DIGITS}/train-labels.idx1-ubyte"),
            test_data: format!("{DIGITS}/test-images.idx3-ubyte"),
            test_labels: format!("{DIGITS}/test-labels.idx1-ubyte"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitSection {
    pub init_w: f64,
    pub init_s: f64,
    pub init_t: f64,
    pub w_bound: u32,
    pub s_bound: u32,
    pub t_bound: u32,
    pub b_w_tar: f64,
    pub b_s_tar: f64,
    pub t_tar: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Keep learnable widths inside `[1, bound]` after each update.
    pub clamp: bool,
}

impl Default for BitSection {
    fn default() -> Self {
        let t = RegulatingTargets::default();
        BitSection {
            init_w: 4.0,
            init_s: 4.0,
            init_t: 2.0,
            w_bound: 6,
            s_bound: 6,
            t_bound: 3,
            b_w_tar: t.b_w_tar,
            b_s_tar: t.b_s_tar,
            t_tar: t.t_tar,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lambda3: t.lambda3,
            clamp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronSection {
    pub tau: f64,
    pub shift_enabled: bool,
    pub first_layer_bidirectional: bool,
}

impl Default for NeuronSection {
    fn default() -> Self {
        NeuronSection {
            tau: 1.0,
            shift_enabled: true,
            first_layer_bidirectional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenewalSection {
    /// `off`, `act-only`, `weight-only` or `bilateral`.
    pub mode: String,
    pub k: usize,
    pub pow: f64,
    /// Once shut, renewal stays off even if the bit gap grows again.
    pub latch: bool,
}

impl Default for RenewalSection {
    fn default() -> Self {
        let g = GridSearchConfig::default();
        RenewalSection {
            mode: "act-only".into(),
            k: g.k,
            pow: g.pow,
            latch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub samples: usize,
    pub seed: u64,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train_harness: HarnessSection,
    pub bit_allocation: BitSection,
    pub spiking_neuron: NeuronSection,
    pub step_renewal: RenewalSection,
    pub theory_oracle: TheorySection,
}

const KEY_DOCS: &[(&str, &str)] = &[
    ("train_harness.model", "network: desk (3 conv + readout) or micro (1 dense + readout)"),
    ("train_harness.epochs", "training epochs (>= 1)"),
    ("train_harness.batch_size", "mini-batch size (>= 1)"),
    ("train_harness.learning_rate", "SGD learning rate, shared by weights, steps and bit widths"),
    ("train_harness.momentum", "SGD momentum"),
    ("train_harness.seed", "seed for initialization and shuffling"),
    ("train_harness.learn_bits", "learn bit widths; false trains at the fixed initial widths"),
    ("train_harness.eval_batch_size", "batch size for evaluation"),
    ("train_harness.classes", "number of classes"),
    ("train_harness.train_data", "training images (IDX) or CSV"),
    ("train_harness.train_labels", "training labels (IDX); ignored for CSV"),
    ("train_harness.test_data", "test images (IDX) or CSV; empty to skip"),
    ("train_harness.test_labels", "test labels (IDX); ignored for CSV"),
    ("bit_allocation.init_w", "initial weight bits"),
    ("bit_allocation.init_s", "initial spike bits"),
    ("bit_allocation.init_t", "initial temporal length"),
    ("bit_allocation.w_bound", "upper bound of weight bits"),
    ("bit_allocation.s_bound", "upper bound of spike bits"),
    ("bit_allocation.t_bound", "upper bound of the temporal length"),
    ("bit_allocation.b_w_tar", "target average weight bits"),
    ("bit_allocation.b_s_tar", "target average spike bits"),
    ("bit_allocation.t_tar", "target average temporal length"),
    ("bit_allocation.lambda1", "penalty on the weight-bit average"),
    ("bit_allocation.lambda2", "penalty on the temporal-length average"),
    ("bit_allocation.lambda3", "penalty on the spike-bit average"),
    ("bit_allocation.clamp", "clamp learnable widths to [1, bound] after each update"),
    ("spiking_neuron.tau", "leak constant (1 = integrate-and-fire)"),
    ("spiking_neuron.shift_enabled", "apply the 0.5*sign threshold shift (rounding fire)"),
    ("spiking_neuron.first_layer_bidirectional", "first layer emits signed spikes"),
    ("step_renewal.mode", "off | act-only | weight-only | bilateral"),
    ("step_renewal.k", "grid-search candidates"),
    ("step_renewal.pow", "grid-search error exponent"),
    ("step_renewal.latch", "renewal stays off once shut"),
    ("theory_oracle.samples", "Monte Carlo samples per claim"),
    ("theory_oracle.seed", "Monte Carlo seed"),
];

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let h = &mut cfg.train_harness;
        for p in [&mut h.train_data, &mut h.train_labels, &mut h.test_data, &mut h.test_labels] {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = match self.train_harness.model.as_str() {
            "desk" => ModelSpec::desk(),
            "micro" => ModelSpec::micro(64, 32, self.train_harness.classes),
            other => return Err(Error::Config(format!("unknown model {other:?}; use desk or micro"))),
        };
        let b = &self.bit_allocation;
        let n = &self.spiking_neuron;
        spec.classes = self.train_harness.classes;
        spec.tau = n.tau;
        spec.shift_enabled = n.shift_enabled;
        spec.layers[0].bidirectional = n.first_layer_bidirectional;
        spec.bounds = BitTriple {
            w: b.w_bound,
            s: b.s_bound,
            t: b.t_bound,
        };
        spec.init = BitTriple {
            w: b.init_w,
            s: b.init_s,
            t: b.init_t,
        };
        spec.ops()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let h = &self.train_harness;
        let b = &self.bit_allocation;
        let r = &self.step_renewal;
        let cfg = TrainConfig {
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            targets: RegulatingTargets {
                b_w_tar: b.b_w_tar,
                b_s_tar: b.b_s_tar,
                t_tar: b.t_tar,
                lambda1: b.lambda1,
                lambda2: b.lambda2,
                lambda3: b.lambda3,
            },
            renewal: r.mode.parse()?,
            grid: GridSearchConfig { k: r.k, pow: r.pow },
            latch: r.latch,
            seed: h.seed,
            learn_bits: h.learn_bits,
            clamp_bits: b.clamp,
            eval_batch_size: h.eval_batch_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn test_data(&self) -> Option<(PathBuf, PathBuf)> {
        let h = &self.train_harness;
        (!h.test_data.is_empty()).then(|| (PathBuf::from(&h.test_data), PathBuf::from(&h.test_labels)))
    }

    /// Every key with its default and meaning, for `--help`.
    pub fn describe_keys() -> String {
        let defaults = toml::Value::try_from(Config::default()).expect("config serializes");
        let mut out = String::from("Config keys (TOML, [section] key = default):\n");
        let table = defaults.as_table().expect("config is a table");
        for (section, keys) in table {
            out.push_str(&format!("  [{section}]\n"));
            for (key, value) in keys.as_table().expect("sections are tables") {
                let doc = KEY_DOCS
                    .iter()
                    .find(|(k, _)| *k == format!("{section}.{key}"))
                    .map_or("", |(_, d)| d);
                out.push_str(&format!("    {key} = {value}  # {doc}\n"));
            }
        }
        out
    }
}

impl std::str::FromStr for RenewalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(RenewalMode::Off),
            "act-only" => Ok(RenewalMode::ActOnly),
            "weight-only" => Ok(RenewalMode::WeightOnly),
            "bilateral" => Ok(RenewalMode::Bilateral),
            other => Err(Error::Config(format!(
                "unknown renewal mode {other:?}; use off, act-only, weight-only or bilateral"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        let defaults = toml::Value::try_from(Config::default()).unwrap();
        let mut count = 0;
        for (section, keys) in defaults.as_table().unwrap() {
            for key in keys.as_table().unwrap().keys() {
                let full = format!("{section}.{key}");
                assert!(KEY_DOCS.iter().any(|(k, _)| *k == full), "undocumented key {full}");
                count += 1;
            }
        }
        assert_eq!(count, KEY_DOCS.len());
        assert!(Config::describe_keys().contains("lambda1 = 0.04"));
    }

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = Config::from_toml("[train_harness]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train_harness.epochs, 3);
        assert_eq!(partial.bit_allocation, BitSection::default());
        assert!(matches!(Config::from_toml("[train_harness]\nepoch = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut cfg = Config::default();
        cfg.train_harness.epochs = 0;
        assert!(cfg.train_config().is_err());
        let mut cfg = Config::default();
        cfg.step_renewal.mode = "sometimes".into();
        assert!(cfg.train_config().is_err());
        assert!(Config::default().model_spec().is_ok());
    }
}
