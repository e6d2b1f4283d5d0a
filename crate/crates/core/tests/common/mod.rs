#![allow(dead_code)]

//! Shared test support: an independent relaxed forward for finite-difference
//! gradient checks, and small training helpers.

use bitsnn::bits::{materialize, regulate, RegulatingTargets};
use bitsnn::model::{cross_entropy, ForwardCtx, Model, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Region of a quantized element, frozen at the base point.
#[derive(Debug, Clone, Copy)]
enum Reg {
    /// Inside the range; offset `round(x) - x`.
    In(f64),
    Hi,
    Lo,
}

#[derive(Debug, Clone, Default)]
struct FrozenLayer {
    w: Vec<Reg>,
    bw_delta: f64,
    /// `[t][element]`.
    s: Vec<Vec<Reg>>,
    bs_delta: Vec<f64>,
    t_int: usize,
    t_delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Frozen {
    layers: Vec<FrozenLayer>,
}

fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

fn classify(r: f64, lo: f64, hi: f64) -> Reg {
    if r > hi {
        Reg::Hi
    } else if r < lo {
        Reg::Lo
    } else {
        Reg::In(round_half_away(r) - r)
    }
}

/// Loss of the model with every rounding replaced by a frozen offset and every
/// saturated code by the continuous `q_max(B)`. With `record`, the offsets are
/// taken from the current parameters first.
pub fn relaxed_loss(m: &Model, x: &[f64], y: &[usize], tgt: &RegulatingTargets, frozen: &mut Frozen, record: bool) -> f64 {
    let n = y.len();
    if record {
        frozen.layers = vec![FrozenLayer::default(); m.layers.len()];
    }
    let inv_tau = 1.0 / m.spec.tau;
    let mut input = x.to_vec();
    let mut in_f = m.input_len();
    let mut logits = Vec::new();
    for (li, layer) in m.layers.iter().enumerate() {
        let fl = &mut frozen.layers[li];
        let p = &layer.bits;
        if record {
            let b = materialize(p.b_w_hat, p.w_bound).unwrap() as f64;
            fl.bw_delta = b - p.b_w_hat;
            let q = 2f64.powf(b - 1.0) - 1.0;
            fl.w = layer.weights.iter().map(|w| classify(w / layer.s_q, -q, q)).collect();
        }
        let bw = p.b_w_hat + fl.bw_delta;
        let qw = 2f64.powf(bw - 1.0) - 1.0;
        let w_hat: Vec<f64> = layer
            .weights
            .iter()
            .zip(&fl.w)
            .map(|(&w, r)| match *r {
                Reg::In(d) => layer.s_q * (w / layer.s_q + d),
                Reg::Hi => layer.s_q * qw,
                Reg::Lo => -layer.s_q * qw,
            })
            .collect();
        let out_f = w_hat.len() / in_f;
        let mut cur = vec![0.0; n * out_f];
        for b in 0..n {
            for o in 0..out_f {
                cur[b * out_f + o] = (0..in_f).map(|i| input[b * in_f + i] * w_hat[o * in_f + i]).sum();
            }
        }
        if !layer.spiking {
            logits = cur;
            break;
        }
        if record {
            fl.t_int = materialize(p.t_hat, p.t_bound).unwrap() as usize;
            fl.t_delta = fl.t_int as f64 - p.t_hat;
            fl.bs_delta = p
                .b_s_hat
                .iter()
                .map(|&b| materialize(b, p.s_bound).unwrap() as f64 - b)
                .collect();
            fl.s = vec![Vec::new(); fl.t_int];
        }
        let mut v = vec![0.0; n * out_f];
        let mut reset = vec![0.0; n * out_f];
        let mut acc = vec![0.0; n * out_f];
        for t in 0..fl.t_int {
            let th = layer.v1[t];
            let bs = p.b_s_hat[t] + fl.bs_delta[t];
            let qs = 2f64.powf(bs) - 1.0;
            for j in 0..n * out_f {
                v[j] = inv_tau * v[j] + cur[j] - reset[j];
            }
            if record {
                let q_int = 2f64.powf(materialize(p.b_s_hat[t], p.s_bound).unwrap() as f64) - 1.0;
                fl.s[t] = v.iter().map(|&vj| classify(vj / th, 0.0, q_int)).collect();
            }
            for j in 0..n * out_f {
                let r = v[j] / th;
                let code = match fl.s[t][j] {
                    Reg::In(d) => r + d,
                    Reg::Hi => qs,
                    Reg::Lo => 0.0,
                };
                reset[j] = th * code;
                acc[j] += reset[j];
            }
        }
        let t_rel = p.t_hat + fl.t_delta;
        input = acc.iter().map(|a| a / t_rel).collect();
        in_f = out_f;
    }

    let classes = m.classes();
    let mut ce = 0.0;
    for b in 0..n {
        let row = &logits[b * classes..(b + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        ce += lse - row[y[b]];
    }
    ce /= n as f64;

    let (mut nw, mut sw, mut nf, mut sf_t, mut ft_int, mut sbs) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (layer, fl) in m.layers.iter().zip(&frozen.layers) {
        let p = &layer.bits;
        let wc = layer.weights.len() as f64;
        nw += wc;
        sw += wc * (p.b_w_hat + fl.bw_delta);
        if layer.spiking {
            let f = layer.op.out_len() as f64;
            nf += f;
            sf_t += f * (p.t_hat + fl.t_delta);
            ft_int += f * fl.t_int as f64;
            sbs += f * (0..fl.t_int).map(|t| p.b_s_hat[t] + fl.bs_delta[t]).sum::<f64>();
        }
    }
    let (aw, at, as_) = (sw / nw, sf_t / nf, sbs / ft_int);
    let reg = tgt.lambda1 * (aw - tgt.b_w_tar).powi(2) + tgt.lambda2 * (at - tgt.t_tar).powi(2) + tgt.lambda3 * (as_ - tgt.b_s_tar).powi(2);
    ce + reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    W(usize),
    Sq,
    V1(usize),
    Bw,
    Bs(usize),
    T,
}

pub const GROUPS: [&str; 6] = ["w", "S_q", "V1", "B_w", "B_s", "T"];

fn group(p: Param) -> usize {
    match p {
        Param::W(_) => 0,
        Param::Sq => 1,
        Param::V1(_) => 2,
        Param::Bw => 3,
        Param::Bs(_) => 4,
        Param::T => 5,
    }
}

fn slot(m: &mut Model, li: usize, p: Param) -> &mut f64 {
    let l = &mut m.layers[li];
    match p {
        Param::W(i) => &mut l.weights[i],
        Param::Sq => &mut l.s_q,
        Param::V1(t) => &mut l.v1[t],
        Param::Bw => &mut l.bits.b_w_hat,
        Param::Bs(t) => &mut l.bits.b_s_hat[t],
        Param::T => &mut l.bits.t_hat,
    }
}

fn away_from_half(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> f64 {
    let base = rng.random_range(lo..=hi) as f64;
    let off = rng.random_range(0.05..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    (base + off).clamp(lo as f64 + 0.05, hi as f64 - 0.05)
}

/// Random micro model, batch and targets for one restart.
pub fn micro_instance(seed: u64) -> (Model, Vec<f64>, Vec<usize>, RegulatingTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ModelSpec::micro(10, 6, 3);
    spec.tau = if seed % 2 == 0 { 1.0 } else { 1.5 };
    let mut m = Model::new(spec, seed).unwrap();
    for l in &mut m.layers {
        l.bits.b_w_hat = away_from_half(&mut rng, 2, 5);
        l.s_q *= rng.random_range(0.3..1.2);
        if l.spiking {
            l.bits.t_hat = away_from_half(&mut rng, 1, 3);
            for b in &mut l.bits.b_s_hat {
                *b = away_from_half(&mut rng, 2, 4);
            }
            for th in &mut l.v1 {
                *th = rng.random_range(0.15..0.8);
            }
        }
    }
    let n = 6;
    let x: Vec<f64> = (0..n * m.input_len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let tgt = RegulatingTargets {
        b_w_tar: 2.0,
        b_s_tar: 2.0,
        t_tar: 1.0,
        lambda1: rng.random_range(0.01..0.1),
        lambda2: rng.random_range(0.01..0.1),
        lambda3: rng.random_range(0.01..0.1),
    };
    (m, x, y, tgt)
}

/// Largest vector-relative error per parameter group for one restart, plus
/// the gap between the model's loss and the relaxed loss at the base point.
pub fn gradient_check(seed: u64) -> ([f64; 6], f64) {
    let (mut m, x, y, tgt) = micro_instance(seed);
    let n = y.len();
    let fwd = m.forward(&x, n, &mut ForwardCtx::eval()).unwrap();
    let (task, g_logits) = cross_entropy(fwd.logits(), &y, m.classes()).unwrap();
    let grads = m.backward(&fwd, &g_logits).unwrap();
    let reg = regulate(&m.bit_layers(), &tgt).unwrap();

    let mut frozen = Frozen::default();
    let base = relaxed_loss(&m, &x, &y, &tgt, &mut frozen, true);
    let loss_gap = (base - task - reg.loss).abs();

    // LSQ scales, written out independently of the library
    let scale = |count: usize, q_max: f64| 1.0 / (count as f64 * q_max).sqrt();
    let mut analytic: Vec<Vec<f64>> = vec![Vec::new(); 6];
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); 6];
    let h = 1e-6;
    for li in 0..m.layers.len() {
        let l = &m.layers[li];
        let g = &grads[li];
        let r = &reg.grads[li];
        let bw = l.bits.b_w() as f64;
        let sw = scale(l.weights.len(), 2f64.powf(bw - 1.0) - 1.0);
        let mut params: Vec<(Param, f64)> = Vec::new();
        for (i, &gw) in g.weights.iter().enumerate() {
            params.push((Param::W(i), gw));
        }
        params.push((Param::Sq, g.s_q / sw));
        params.push((Param::Bw, g.b_w / sw + r.b_w));
        if l.spiking {
            let count = n * l.op.out_len();
            for t in 0..l.v1.len() {
                let qs = 2f64.powf(l.bits.b_s(t) as f64) - 1.0;
                let ss = scale(count, qs);
                params.push((Param::V1(t), g.v1[t] / ss));
                params.push((Param::Bs(t), g.b_s[t] / ss + r.b_s[t]));
            }
            params.push((Param::T, g.t + r.t));
        }
        for (p, a) in params {
            let orig = *slot(&mut m, li, p);
            *slot(&mut m, li, p) = orig + h;
            let up = relaxed_loss(&m, &x, &y, &tgt, &mut frozen, false);
            *slot(&mut m, li, p) = orig - h;
            let down = relaxed_loss(&m, &x, &y, &tgt, &mut frozen, false);
            *slot(&mut m, li, p) = orig;
            analytic[group(p)].push(a);
            numeric[group(p)].push((up - down) / (2.0 * h));
        }
    }
    let mut errs = [0.0; 6];
    for gi in 0..6 {
        let diff: f64 = analytic[gi].iter().zip(&numeric[gi]).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
        let norm = numeric[gi].iter().map(|f| f * f).sum::<f64>().sqrt();
        errs[gi] = if norm < 1e-9 { diff } else { diff / norm };
    }
    (errs, loss_gap)
}

/// Bundled digits, train and test splits.
pub fn digits() -> (bitsnn::data::Dataset, bitsnn::data::Dataset) {
    let cfg = bitsnn::config::Config::default();
    let spec = cfg.model_spec().unwrap();
    let h = &cfg.train_harness;
    let load = |d: &str, l: &str| {
        bitsnn::data::load(std::path::Path::new(d), Some(std::path::Path::new(l)), spec.input, spec.classes).unwrap()
    };
    (load(&h.train_data, &h.train_labels), load(&h.test_data, &h.test_labels))
}

/// Train the desk model from the default config with `edit` applied.
pub fn train_desk(edit: impl FnOnce(&mut bitsnn::config::Config)) -> bitsnn::train::Trainer {
    let mut cfg = bitsnn::config::Config::default();
    edit(&mut cfg);
    let spec = cfg.model_spec().unwrap();
    let tc = cfg.train_config().unwrap();
    let (train, test) = digits();
    let model = Model::new(spec, tc.seed).unwrap();
    let mut t = bitsnn::train::Trainer::new(model, tc).unwrap();
    t.fit(&train, Some(&test)).unwrap();
    t
}
