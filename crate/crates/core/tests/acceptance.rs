//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Exits non-zero when a criterion fails, unless it is listed in
//! `KNOWN_FAILURES` with the reason it cannot be met.

mod common;

use std::time::Instant;

use bitsnn::checkpoint::Checkpoint;
use bitsnn::cost::{bit_budget, expected_nonzero_bits, s_ace, AceTerm};
use bitsnn::neuron::{temporal_squeeze, SpikeTrain};
use bitsnn::ops::{conv2d_forward, ConvGeom};
use bitsnn::renewal::{GridSearchConfig, ObserverState};
use bitsnn::theory::{
    analytic_mismatch_probability, exact_mismatch_probability, floor_vs_round_error, simulate_tail,
    simulate_mismatch, simulate_temporal_accumulation, temporal_accumulation, Domain, MismatchExperiment,
};
use bitsnn::train::{self, evaluate, RenewalMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const N: usize = 1_000_000;

/// Criteria that fail for a documented reason and do not fail the run.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    2,
    "the stated probability P(x > r*3s) counts x/s in (2^b'-1, 2^b'-1/2), where both quantizers round alike; \
     the simulated strict-increase rate follows the midpoint threshold instead",
)];

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, detail: String) {
        println!("criterion {id:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn tail_constant(r: &mut Report) {
    let t0 = Instant::now();
    let p = simulate_tail(N, 11);
    let secs = t0.elapsed().as_secs_f64();
    let pass = (p - 0.1336).abs() <= 0.003 && secs < 5.0;
    r.line(1, pass, format!("P(x > 1.5 sigma) = {p:.5} (target 0.1336 +- 0.003) in {secs:.2} s"));
}

/// Tail of the half-normal law by Simpson integration of the density.
fn half_normal_tail(a: f64) -> f64 {
    let steps = 20_000;
    let h = a / steps as f64;
    let f = |x: f64| 2.0 * (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(a);
    for i in 1..steps {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - s * h / 3.0
}

fn mismatch_agreement(r: &mut Report) {
    let t0 = Instant::now();
    let mut worst_stated = 0.0f64;
    let mut worst_exact = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for domain in [Domain::HalfNormal, Domain::FullNormal] {
        for (i, (b, bp)) in [(2, 1), (3, 1), (4, 2), (4, 3)].into_iter().enumerate() {
            let exp = MismatchExperiment {
                b,
                b_prime: bp,
                sigma: 1.0,
                n: N,
                seed: 20 + i as u64,
                domain,
            };
            let sim = simulate_mismatch(&exp).unwrap();
            let stated = analytic_mismatch_probability(b, bp, domain).unwrap();
            let exact = exact_mismatch_probability(b, bp, domain).unwrap();
            let ratio = ((1u64 << bp) - 1) as f64 / ((1u64 << b) - 1) as f64;
            let s = 3.0 / ((1u64 << b) - 1) as f64;
            worst_oracle = worst_oracle
                .max((stated - half_normal_tail(3.0 * ratio)).abs())
                .max((exact - half_normal_tail((((1u64 << bp) - 1) as f64 + 0.5) * s)).abs());
            worst_stated = worst_stated.max((sim - stated).abs());
            worst_exact = worst_exact.max((sim - exact).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_stated <= 0.005 && worst_oracle < 1e-6 && secs < 30.0;
    r.line(
        2,
        pass,
        format!(
            "max |sim - stated P(x > r*3s)| = {worst_stated:.4} (tol 0.005); \
             max |sim - midpoint P(x > (2^b'-1/2)s)| = {worst_exact:.4}; \
             closed forms vs Simpson {worst_oracle:.1e}; {secs:.2} s"
        ),
    );
}

fn floor_vs_round(r: &mut Report) {
    let mut gaps = Vec::new();
    let mut pass = true;
    for b in [2u32, 3, 4] {
        let e = floor_vs_round_error(b, 1.0, N, 30 + b as u64).unwrap();
        pass &= e.e_floor > e.e_round;
        gaps.push(format!("b{b} {:.4}>{:.4}", e.e_floor, e.e_round));
    }
    let ratio = floor_vs_round_error(6, 1.0, N, 36).unwrap().unsaturated_ratio();
    pass &= (ratio - 4.0).abs() <= 0.2;
    r.line(3, pass, format!("E_floor > E_round: {}; unsaturated ratio at b6 = {ratio:.3} (4 +- 0.2)", gaps.join(", ")));
}

fn temporal(r: &mut Report) {
    let base = MismatchExperiment {
        b: 4,
        b_prime: 2,
        sigma: 1.0,
        n: N,
        seed: 40,
        domain: Domain::HalfNormal,
    };
    let p = exact_mismatch_probability(4, 2, Domain::HalfNormal).unwrap();
    let mut worst = 0.0f64;
    for t in [1u32, 2, 4] {
        let sim = simulate_temporal_accumulation(&MismatchExperiment { seed: 40 + t as u64, ..base }, t).unwrap();
        let law = temporal_accumulation(p, t).unwrap();
        assert!((law - (1.0 - (1.0 - p).powi(t as i32))).abs() < 1e-12);
        worst = worst.max((sim - law).abs());
    }
    r.line(4, worst <= 0.01, format!("max |MC - (1-(1-p)^T)| over T in {{1,2,4}} = {worst:.4} (tol 0.01), per-step p = {p:.4}"));
}

fn squeeze(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    let mut ace_exact = true;
    for _ in 0..100 {
        let g = ConvGeom {
            in_ch: rng.random_range(1..4),
            out_ch: rng.random_range(1..5),
            kernel: [1, 3][rng.random_range(0..2)],
            stride: rng.random_range(1..3),
            padding: rng.random_range(0..2),
            in_h: rng.random_range(3..8),
            in_w: rng.random_range(3..8),
        };
        let t = rng.random_range(1..5usize);
        let bits: Vec<u32> = (0..t).map(|_| rng.random_range(1..4)).collect();
        let f = g.in_len();
        let codes: Vec<i32> = (0..t * f).map(|i| rng.random_range(0..(1 << bits[i / f]))).collect();
        let v1: f64 = rng.random_range(0.1..2.0);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut pre = vec![0.0; g.out_len()];
        for ti in 0..t {
            let frame: Vec<f64> = codes[ti * f..(ti + 1) * f].iter().map(|&c| v1 * c as f64).collect();
            for (p, o) in pre.iter_mut().zip(conv2d_forward(&frame, 1, &g, &w)) {
                *p += o / t as f64;
            }
        }
        let train = SpikeTrain::new(codes, bits.clone(), f, false).unwrap();
        let squeezed: Vec<f64> = temporal_squeeze(&train).unwrap().iter().map(|s| v1 * s).collect();
        let post = conv2d_forward(&squeezed, 1, &g, &w);
        let norm = pre.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let diff = pre.iter().zip(&post).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);

        let term = AceTerm {
            macs: g.macs() as f64,
            t: t as f64,
            b_w: rng.random_range(1..9) as f64,
            b_s: bits.iter().sum::<u32>() as f64 / t as f64,
            squeezed: false,
        };
        let pre_ace = s_ace(&[term]);
        let post_ace = s_ace(&[AceTerm { squeezed: true, ..term }]);
        ace_exact &= (post_ace - pre_ace / t as f64).abs() <= 1e-12 * post_ace;
    }
    r.line(
        5,
        worst <= 1e-6 && ace_exact,
        format!("max relative gap pre vs post squeeze = {worst:.2e} over 100 instances; post S-ACE = pre / T (rel 1e-12): {ace_exact}"),
    );
}

fn gradients(r: &mut Report) {
    let mut worst = [0.0f64; 6];
    let mut gap = 0.0f64;
    for seed in 0..50 {
        let (e, g) = common::gradient_check(seed);
        for (w, x) in worst.iter_mut().zip(e) {
            *w = w.max(x);
        }
        gap = gap.max(g);
    }
    let detail: Vec<String> = common::GROUPS.iter().zip(worst).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let pass = worst.iter().all(|&e| e <= 1e-4) && gap < 1e-9;
    r.line(6, pass, format!("worst relative error over 50 restarts: {} (tol 1e-4)", detail.join(", ")));
}

fn paper_arithmetic(r: &mut Report) {
    // (W, S, T, Bit Budget) cells of the comparison tables
    let cells = [(16.0, 1.0, 4.0, 64.0), (16.0, 2.0, 1.0, 32.0), (16.0, 4.0, 6.0, 384.0), (16.0, 2.0, 4.0, 128.0), (8.0, 8.0, 1.0, 64.0), (16.0, 1.0, 250.0, 4000.0)];
    let bb_ok = cells.iter().all(|&(w, s, t, bb)| bit_budget(t, w, s) == bb);
    // (S, S-ACE, NS-ACE, Exp(act.)) of the three ImageNet models, T = 1
    let rows = [(2.18, 30.74, 7.77, 0.55), (3.96, 54.69, 16.99, 1.23), (3.92, 77.78, 24.30, 1.22)];
    let got: Vec<f64> = rows.iter().map(|&(s, sa, ns, _)| expected_nonzero_bits(1.0, s, ns, sa).unwrap()).collect();
    let exp_ok = rows.iter().zip(&got).all(|(row, g)| (g - row.3).abs() <= 0.01);
    r.line(
        7,
        bb_ok && exp_ok,
        format!(
            "bit budget cells exact: {bb_ok}; Exp(act.) = {:.3}/{:.3}/{:.3} vs 0.55/1.23/1.22",
            got[0], got[1], got[2]
        ),
    );
}

fn renewal_efficacy(r: &mut Report) {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        let sigma = rng.random_range(0.5..3.0);
        let x: Vec<f64> = (0..20_000).map(|_| sigma * rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let old_step = 3.0 * sigma / 15.0;
        let mse = |s: f64| x.iter().map(|&v| (v - s * (v / s).round().clamp(0.0, 3.0)).powi(2)).sum::<f64>() / x.len() as f64;
        let mut obs = ObserverState {
            recorded_bits: 4,
            ..ObserverState::default()
        };
        let new_step = obs.renew(&x, 2, false, &GridSearchConfig::default()).unwrap().expect("bit drop renews");
        let (before, after) = (mse(old_step), mse(new_step));
        if after < before {
            wins += 1;
        }
        ratios.push(after / before);
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    r.line(8, wins == 10, format!("renewed step lowers the 2-bit MSE in {wins}/10 seeds (worst MSE ratio {worst:.3})"));
}

/// Largest drop `v[s] - v[s + len]` over windows starting after step 0.
fn best_later_drop(v: &[f64], len: usize) -> f64 {
    (1..v.len() - len).map(|s| v[s] - v[s + len]).fold(f64::NEG_INFINITY, f64::max)
}

fn bit_convergence(r: &mut Report) -> (f64, f64) {
    let t0 = Instant::now();
    let tr = common::train_desk(|_| {});
    let secs = t0.elapsed().as_secs_f64();
    let avg = tr.model.averages();
    let tg = tr.cfg.targets;
    let close = (avg.b_w - tg.b_w_tar).abs() <= 0.5 && (avg.b_s - tg.b_s_tar).abs() <= 0.5 && (avg.t - tg.t_tar).abs() <= 0.5;

    let traj = &tr.trajectory;
    let len = ((traj.len() - 1) as f64 * 0.125).round() as usize;
    let series: [(&str, Vec<f64>); 4] = [
        ("BB", traj.iter().map(|p| p.averages.bit_budget()).collect()),
        ("W", traj.iter().map(|p| p.averages.b_w).collect()),
        ("S", traj.iter().map(|p| p.averages.b_s).collect()),
        ("T", traj.iter().map(|p| p.averages.t).collect()),
    ];
    let mut early = true;
    let mut parts = Vec::new();
    for (name, v) in &series {
        let first = v[0] - v[len];
        let later = best_later_drop(v, len);
        early &= first >= later;
        parts.push(format!("{name} {first:.2} vs {later:.2}"));
    }
    let acc = tr.log.last().unwrap().accuracy;
    r.line(
        9,
        close && early && secs < 1800.0,
        format!(
            "final W/S/T {:.2}/{:.2}/{:.2} vs 2/2/1 (tol 0.5); first-window drop vs best later window: {}; {secs:.0} s; test acc {acc:.4}",
            avg.b_w,
            avg.b_s,
            avg.t,
            parts.join(", ")
        ),
    );
    (acc, avg.bit_budget())
}

fn adaptive_vs_uniform(r: &mut Report) {
    const EPOCHS: usize = 25;
    let seeds = [0u64, 1, 2];
    let run = |seed: u64, mode: RenewalMode, uniform: Option<(f64, f64, f64)>| {
        let tr = common::train_desk(|c| {
            c.train_harness.seed = seed;
            c.train_harness.epochs = EPOCHS;
            c.step_renewal.mode = match mode {
                RenewalMode::Off => "off",
                RenewalMode::ActOnly => "act-only",
                RenewalMode::WeightOnly => "weight-only",
                RenewalMode::Bilateral => "bilateral",
            }
            .into();
            if let Some((w, s, t)) = uniform {
                c.train_harness.learn_bits = false;
                c.bit_allocation.init_w = w;
                c.bit_allocation.init_s = s;
                c.bit_allocation.init_t = t;
            }
        });
        (tr.log.last().unwrap().accuracy, tr.model.averages().bit_budget())
    };
    let mean = |v: &[(f64, f64)]| {
        let n = v.len() as f64;
        (v.iter().map(|x| x.0).sum::<f64>() / n, v.iter().map(|x| x.1).sum::<f64>() / n)
    };
    let adaptive: Vec<_> = seeds.iter().map(|&s| run(s, RenewalMode::ActOnly, None)).collect();
    let no_renewal: Vec<_> = seeds.iter().map(|&s| run(s, RenewalMode::Off, None)).collect();
    let (acc_a, bb_a) = mean(&adaptive);
    let (acc_n, bb_n) = mean(&no_renewal);

    // uniform allocation with the bit budget closest to the adaptive runs
    let mut best = (2.0, 2.0, 1.0);
    for w in 1..=6 {
        for s in 1..=6 {
            for t in 1..=3 {
                let bb = (w * s * t) as f64;
                if (bb - bb_a).abs() < (best.0 * best.1 * best.2 - bb_a).abs() {
                    best = (w as f64, s as f64, t as f64);
                }
            }
        }
    }
    let uniform: Vec<_> = seeds.iter().map(|&s| run(s, RenewalMode::Off, Some(best))).collect();
    let (acc_u, bb_u) = mean(&uniform);
    let matched = (bb_a / bb_u - 1.0).abs() <= 0.05;
    let pass = matched && acc_a >= acc_u - 0.005 && acc_a >= acc_n - 0.005;
    r.line(
        10,
        pass,
        format!(
            "{EPOCHS} epochs, 3 seeds: adaptive acc {:.2}% at BB {bb_a:.2}; uniform {}/{}/{} acc {:.2}% at BB {bb_u:.2} (matched within 5%: {matched}); \
             renewal off acc {:.2}% at BB {bb_n:.2}",
            100.0 * acc_a,
            best.0,
            best.1,
            best.2,
            100.0 * acc_u,
            100.0 * acc_n
        ),
    );
}

fn determinism(r: &mut Report) {
    let short = |c: &mut bitsnn::config::Config| {
        c.train_harness.epochs = 2;
        c.train_harness.seed = 7;
        c.step_renewal.mode = "bilateral".into();
    };
    let a = common::train_desk(short);
    let b = common::train_desk(short);
    let logs = |t: &train::Trainer| {
        [
            train::epoch_log_csv(&t.log),
            train::renewal_events_csv(&t.events),
            train::trajectory_csv(&t.trajectory),
            train::allocation_csv(&t.model),
        ]
    };
    let same_logs = logs(&a) == logs(&b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_trainer(&a).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (_, test) = common::digits();
    let before = evaluate(&a.model, &test, 128).unwrap();
    let after = evaluate(&loaded.model, &test, 128).unwrap();
    let same_eval = before == after && loaded.model == a.model;
    r.line(
        11,
        same_logs && same_eval,
        format!("identical logs across two runs: {same_logs}; checkpoint round trip evaluation identical: {same_eval} (acc {:.4})", after.accuracy),
    );
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    tail_constant(&mut r);
    mismatch_agreement(&mut r);
    floor_vs_round(&mut r);
    temporal(&mut r);
    squeeze(&mut r);
    gradients(&mut r);
    paper_arithmetic(&mut r);
    renewal_efficacy(&mut r);
    bit_convergence(&mut r);
    adaptive_vs_uniform(&mut r);
    determinism(&mut r);

    let unexpected: Vec<u32> = r.failed.iter().copied().filter(|id| !KNOWN_FAILURES.iter().any(|(k, _)| k == id)).collect();
    for (id, why) in KNOWN_FAILURES {
        if r.failed.contains(id) {
            println!("criterion {id:>2} known failure: {why}");
        }
    }
    println!("{} of 11 criteria pass", 11 - r.failed.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
