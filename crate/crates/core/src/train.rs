//! Training loop for bit-adaptive spiking networks, evaluation, and CSV logs.
//!
//! Per mini-batch: shutting gates, weight renewal, forward (with threshold
//! initialization on the first batch and spike renewal when enabled),
//! task loss plus regulating loss, backward, SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::{regulate, BitAverages, RegulatingTargets};
use crate::cost::CostReport;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, predictions, snap, ForwardCtx, Model, QuantKind, RenewalEvent};
use crate::renewal::{GridSearchConfig, ObserverState, ShuttingGate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenewalMode {
    Off,
    ActOnly,
    WeightOnly,
    Bilateral,
}

impl RenewalMode {
    pub fn weights(&self) -> bool {
        matches!(self, RenewalMode::WeightOnly | RenewalMode::Bilateral)
    }

    pub fn spikes(&self) -> bool {
        matches!(self, RenewalMode::ActOnly | RenewalMode::Bilateral)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub targets: RegulatingTargets,
    pub renewal: RenewalMode,
    pub grid: GridSearchConfig,
    pub latch: bool,
    pub seed: u64,
    pub learn_bits: bool,
    pub clamp_bits: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            targets: RegulatingTargets::default(),
            renewal: RenewalMode::ActOnly,
            grid: GridSearchConfig::default(),
            latch: true,
            seed: 0,
            learn_bits: true,
            clamp_bits: true,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        self.targets.validate()?;
        self.grid.validate()
    }
}

/// Observers and shutting gates of the renewal mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalState {
    pub weight: Vec<ObserverState>,
    /// `[spiking layer][slot]`.
    pub spike: Vec<Vec<ObserverState>>,
    pub gate_w: Option<ShuttingGate>,
    pub gate_s: Option<ShuttingGate>,
}

impl RenewalState {
    pub fn new(model: &Model) -> Self {
        RenewalState {
            weight: vec![ObserverState::default(); model.layers.len()],
            spike: model.fresh_spike_observers(),
            gate_w: None,
            gate_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub b_w: f64,
    pub b_s: f64,
    pub t: f64,
    pub accuracy: f64,
    pub renewal_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub epoch: usize,
    pub averages: BitAverages,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub cost: CostReport,
}

/// Deterministic inference over a dataset; batches run in parallel.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.shape.len() != model.input_len() {
        return Err(Error::invalid(format!(
            "dataset samples have {} values, the model expects {}",
            data.shape.len(),
            model.input_len()
        )));
    }
    if data.classes != model.classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, the model has {}",
            data.classes,
            model.classes()
        )));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluation needs samples and a positive batch size"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<(usize, f64, Vec<(u64, u64)>)>> = idx
        .par_chunks(batch_size)
        .map(|chunk| {
            let (x, y) = data.batch(chunk);
            let fwd = model.forward(&x, chunk.len(), &mut ForwardCtx::eval())?;
            let (loss, _) = cross_entropy(fwd.logits(), &y, model.classes())?;
            let correct = predictions(fwd.logits(), model.classes())
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            Ok((correct, loss * chunk.len() as f64, model.spike_counts(&fwd)))
        })
        .collect();
    let mut correct = 0;
    let mut loss = 0.0;
    let mut spikes = vec![(0u64, 0u64); model.spiking_layers()];
    for p in parts {
        let (c, l, s) = p?;
        correct += c;
        loss += l;
        for (acc, v) in spikes.iter_mut().zip(s) {
            acc.0 += v.0;
            acc.1 += v.1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        correct,
        total: data.len(),
        cost: model.cost_report(&spikes)?,
    })
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub renewal: RenewalState,
    /// Momentum buffers, `[layer][tensor]`.
    velocity: Vec<Vec<Vec<f64>>>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    initialized: bool,
    pub log: Vec<EpochLog>,
    pub events: Vec<(usize, RenewalEvent)>,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let renewal = RenewalState::new(&model);
        let mut model = model;
        let velocity = model
            .layers
            .iter_mut()
            .map(|l| l.trainable_mut().iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        let start = TrajectoryPoint {
            step: 0,
            epoch: 0,
            averages: model.averages(),
        };
        Ok(Trainer {
            model,
            cfg,
            renewal,
            velocity,
            epoch: 0,
            step: 0,
            initialized: false,
            log: Vec::new(),
            events: Vec::new(),
            trajectory: vec![start],
        })
    }

    /// Continue from a saved state; momentum restarts from zero.
    pub fn resume(model: Model, cfg: TrainConfig, renewal: RenewalState, epoch: usize) -> Result<Self> {
        let mut t = Trainer::new(model, cfg)?;
        t.renewal = renewal;
        t.epoch = epoch;
        t.initialized = true;
        Ok(t)
    }

    /// Sample order of an epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One SGD step on a batch; returns the task loss.
    pub fn step(&mut self, x: &[f64], y: &[usize]) -> Result<f64> {
        let n = y.len();
        if let Some(what) = self.model.first_non_finite_param() {
            return Err(Error::Divergence(format!("non-finite {what} before step {}", self.step)));
        }
        let tar = self.cfg.targets;
        let avg = self.model.averages();
        let latch = self.cfg.latch;
        let gate_w = self.renewal.gate_w.get_or_insert_with(|| ShuttingGate::new(avg.b_w, tar.b_w_tar, latch));
        let renew_w = gate_w.update(avg.b_w, tar.b_w_tar) && self.cfg.renewal.weights();
        let gate_s = self.renewal.gate_s.get_or_insert_with(|| ShuttingGate::new(avg.b_s, tar.b_s_tar, latch));
        let renew_s = gate_s.update(avg.b_s, tar.b_s_tar) && self.cfg.renewal.spikes();

        let epoch = self.epoch;
        if renew_w {
            for (li, layer) in self.model.layers.iter_mut().enumerate() {
                let bits = layer.bits.b_w();
                if let Some(s) = self.renewal.weight[li].renew(&layer.weights, bits, true, &self.cfg.grid)? {
                    let s = snap(s);
                    self.events.push((
                        epoch,
                        RenewalEvent {
                            layer: li,
                            kind: QuantKind::Weight,
                            slot: 0,
                            old: layer.s_q,
                            new: s,
                        },
                    ));
                    layer.s_q = s;
                }
            }
        }

        let mut ctx = ForwardCtx {
            train: true,
            init_thresholds: !self.initialized,
            spike_observers: renew_s.then_some(&mut self.renewal.spike),
            grid: self.cfg.grid,
            events: Vec::new(),
        };
        let fwd = self.model.forward(x, n, &mut ctx)?;
        self.events.extend(ctx.events.into_iter().map(|e| (epoch, e)));
        self.initialized = true;

        let (loss, g_logits) = cross_entropy(fwd.logits(), y, self.model.classes())?;
        if !loss.is_finite() {
            let what = self.model.first_non_finite(&fwd).unwrap_or_else(|| "task loss".into());
            return Err(Error::Divergence(format!("non-finite {what} at step {}", self.step)));
        }
        let mut grads = self.model.backward(&fwd, &g_logits)?;
        self.model.absorb(&fwd);
        if self.cfg.learn_bits {
            let reg = regulate(&self.model.bit_layers(), &tar)?;
            for (g, r) in grads.iter_mut().zip(&reg.grads) {
                g.b_w += r.b_w;
                g.t += r.t;
                for (a, b) in g.b_s.iter_mut().zip(&r.b_s) {
                    *a += b;
                }
            }
        } else {
            grads.iter_mut().for_each(|g| g.clear_bits());
        }

        const NAMES: [&str; 8] = ["weights", "s_q", "v1", "b_w_hat", "b_s_hat", "t_hat", "bn_gamma", "bn_beta"];
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        for (li, ((layer, g), vel)) in self.model.layers.iter_mut().zip(&grads).zip(&mut self.velocity).enumerate() {
            for (ti, ((p, gs), v)) in layer.trainable_mut().into_iter().zip(g.slices()).zip(vel).enumerate() {
                if let Some(bad) = gs.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient of layer {li} {}[{bad}] at step {}",
                        NAMES[ti], self.step
                    )));
                }
                for ((pi, &gi), vi) in p.iter_mut().zip(gs).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        self.model.project(self.cfg.clamp_bits);
        self.step += 1;
        self.trajectory.push(TrajectoryPoint {
            step: self.step,
            epoch: self.epoch + 1,
            averages: self.model.averages(),
        });
        Ok(loss)
    }

    /// Run one epoch and log it; accuracy is measured on `test` when given, else on `train`.
    pub fn train_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<&EpochLog> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if train.shape.len() != self.model.input_len() || train.classes != self.model.classes() {
            return Err(Error::invalid("training data does not match the model input or classes"));
        }
        let order = Trainer::epoch_order(self.cfg.seed, self.epoch, train.len());
        let events_before = self.events.len();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            loss_sum += self.step(&x, &y)? * chunk.len() as f64;
        }
        self.epoch += 1;
        let avg = self.model.averages();
        let reg_loss = crate::bits::regulating_loss(&avg, &self.cfg.targets);
        let acc = evaluate(&self.model, test.unwrap_or(train), self.cfg.eval_batch_size)?.accuracy;
        self.log.push(EpochLog {
            epoch: self.epoch,
            task_loss: loss_sum / train.len() as f64,
            reg_loss,
            b_w: avg.b_w,
            b_s: avg.b_s,
            t: avg.t,
            accuracy: acc,
            renewal_events: self.events.len() - events_before,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn fit(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.train_epoch(train, test)?;
        }
        Ok(())
    }
}

pub const EPOCH_LOG_HEADER: &str = "epoch,task_loss,reg_loss,b_w,b_s,t,accuracy,renewal_events";

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.task_loss, r.reg_loss, r.b_w, r.b_s, r.t, r.accuracy, r.renewal_events
        ));
    }
    s
}

pub fn renewal_events_csv(events: &[(usize, RenewalEvent)]) -> String {
    let mut s = String::from("epoch,layer,kind,slot,old_step,new_step\n");
    for (epoch, e) in events {
        s.push_str(&format!("{},{},{},{},{},{}\n", epoch, e.layer, e.kind.as_str(), e.slot, e.old, e.new));
    }
    s
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("step,epoch,b_w,b_s,t,bit_budget\n");
    for p in points {
        let a = p.averages;
        s.push_str(&format!("{},{},{},{},{},{}\n", p.step, p.epoch, a.b_w, a.b_s, a.t, a.bit_budget()));
    }
    s
}

/// Per-layer materialized allocation; spike bits are `;`-joined over active timesteps.
pub fn allocation_csv(model: &Model) -> String {
    let mut s = String::from("layer,kind,weights,features,b_w,t,b_s\n");
    for (i, l) in model.layers.iter().enumerate() {
        let (t, bs) = if l.spiking {
            let bs: Vec<String> = l.bits.active_b_s().iter().map(u32::to_string).collect();
            (l.bits.t().to_string(), bs.join(";"))
        } else {
            (String::new(), String::new())
        };
        let kind = if l.spiking { l.op.kind() } else { "readout" };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            kind,
            l.weights.len(),
            l.feature_count(),
            l.bits.b_w(),
            t,
            bs
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn toy(n: usize) -> Dataset {
        let spec = ModelSpec::micro(6, 8, 3);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            for j in 0..6 {
                features.push(if j / 2 == c { 0.9 } else { 0.1 } + 0.01 * ((i * 7 + j) % 5) as f64);
            }
            labels.push(c);
        }
        Dataset {
            features,
            labels,
            shape: spec.input,
            classes: 3,
        }
    }

    #[test]
    fn learns_a_separable_toy_and_is_deterministic() {
        let data = toy(60);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 10,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Model::new(ModelSpec::micro(6, 8, 3), 3).unwrap();
            let mut t = Trainer::new(model, cfg.clone()).unwrap();
            t.fit(&data, None).unwrap();
            t
        };
        let a = run();
        let b = run();
        assert_eq!(epoch_log_csv(&a.log), epoch_log_csv(&b.log));
        assert!(a.log.last().unwrap().accuracy > 0.9, "{}", epoch_log_csv(&a.log));
    }

    #[test]
    fn frozen_bits_stay_put() {
        let data = toy(30);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            learn_bits: false,
            ..TrainConfig::default()
        };
        let model = Model::new(ModelSpec::micro(6, 8, 3), 3).unwrap();
        let before = model.averages();
        let mut t = Trainer::new(model, cfg).unwrap();
        t.fit(&data, None).unwrap();
        assert_eq!(t.model.averages(), before);
    }

    #[test]
    fn divergence_names_the_tensor() {
        let data = toy(10);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let mut model = Model::new(ModelSpec::micro(6, 8, 3), 3).unwrap();
        model.layers[0].weights[0] = f64::NAN;
        let mut t = Trainer::new(model, cfg).unwrap();
        let (x, y) = data.batch(&(0..10).collect::<Vec<_>>());
        match t.step(&x, &y) {
            Err(Error::Divergence(m)) => assert!(m.contains("layer 0"), "{m}"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("NaN weight went unnoticed"),
        }
    }
}
