//! Analytic and Monte Carlo checks of the step-size mismatch results:
//! mismatch probability, its 3σ/2 lower bound, temporal accumulation and
//! the flooring-vs-rounding error gap.
//!
//! Sampling is split into fixed blocks of [`BLOCK`] draws, each with its own
//! ChaCha stream derived from `(seed, block index)`, so results do not
//! depend on how many worker threads run the blocks.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quant::QuantRange;

pub const BLOCK: usize = 1 << 16;

/// Half-normal tail at 3σ/2.
pub const TAIL_BOUND: f64 = 0.1336;

/// Standard normal upper tail `1 - Φ(x)`.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64) -> f64 {
    1.0 - normal_tail(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// `|x|` for `x ~ N(0, σ²)`: the activation after ReLU.
    HalfNormal,
    /// `x ~ N(0, σ²)` quantized with a symmetric range.
    FullNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchExperiment {
    pub b: u32,
    pub b_prime: u32,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
    pub domain: Domain,
}

impl MismatchExperiment {
    pub fn validate(&self) -> Result<()> {
        validate_bits(self.b, self.b_prime)?;
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if self.n == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        Ok(())
    }
}

fn validate_bits(b: u32, b_prime: u32) -> Result<()> {
    if b < 2 || b > 24 {
        return Err(Error::invalid(format!("b must be in [2, 24], got {b}")));
    }
    if b_prime < 1 || b_prime >= b {
        return Err(Error::invalid(format!("b' must be in [1, b-1], got b'={b_prime} with b={b}")));
    }
    Ok(())
}

/// `(2^b' - 1) / (2^b - 1)`.
pub fn level_ratio(b: u32, b_prime: u32) -> f64 {
    ((1u64 << b_prime) - 1) as f64 / ((1u64 << b) - 1) as f64
}

/// `P(x > r * 3σ)` under the half-normal law, `r = (2^b' - 1) / (2^b - 1)`:
/// the probability that the reduced quantizer clips, i.e. that dropping from
/// `b` to `b'` bits with an unchanged `b`-optimal step can raise the error.
/// The symmetric full-normal case has the same value.
pub fn analytic_mismatch_probability(b: u32, b_prime: u32, _domain: Domain) -> Result<f64> {
    validate_bits(b, b_prime)?;
    Ok(2.0 * normal_tail(3.0 * level_ratio(b, b_prime)))
}

/// Probability of the strict event `Err' > Err` itself.
///
/// With rounding, the reduced quantizer first differs from the full one once
/// `x / s` passes the midpoint `2^b' - 1/2`, so the event is
/// `x > (2^b' - 1/2) * s`. [`analytic_mismatch_probability`] places the
/// threshold half a step lower and overestimates the event.
pub fn exact_mismatch_probability(b: u32, b_prime: u32, _domain: Domain) -> Result<f64> {
    validate_bits(b, b_prime)?;
    let s = 3.0 / ((1u64 << b) - 1) as f64;
    let threshold = (((1u64 << b_prime) - 1) as f64 + 0.5) * s;
    Ok(2.0 * normal_tail(threshold))
}

/// Sum a per-sample statistic over `n` draws, block-parallel and deterministic.
fn mc_sum<F>(n: usize, seed: u64, per_sample: F) -> f64
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let partial: Vec<f64> = (0..blocks)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let len = BLOCK.min(n - i * BLOCK);
            (0..len).map(|_| per_sample(&mut rng)).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

fn draw(rng: &mut ChaCha8Rng, sigma: f64, domain: Domain) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match domain {
        Domain::HalfNormal => sigma * z.abs(),
        Domain::FullNormal => sigma * z,
    }
}

/// Quantize with `levels` magnitude levels above zero (and below, for the
/// full-normal domain).
fn quantize_levels(x: f64, step: f64, levels: f64, domain: Domain) -> f64 {
    let lo = match domain {
        Domain::HalfNormal => 0.0,
        Domain::FullNormal => -levels,
    };
    step * (x / step).round().clamp(lo, levels)
}

/// Whether the error at `b'` bits strictly exceeds the error at `b` bits.
fn mismatch_event(x: f64, step: f64, b: u32, b_prime: u32, domain: Domain) -> bool {
    let full = ((1u64 << b) - 1) as f64;
    let reduced = ((1u64 << b_prime) - 1) as f64;
    let e = (x - quantize_levels(x, step, full, domain)).powi(2);
    let e_reduced = (x - quantize_levels(x, step, reduced, domain)).powi(2);
    e_reduced > e
}

/// Empirical `P(Err' > Err)`.
pub fn simulate_mismatch(exp: &MismatchExperiment) -> Result<f64> {
    exp.validate()?;
    Ok(simulate_mismatch_unchecked(exp))
}

/// [`simulate_mismatch`] without the `b' < b` check, for degenerate test setups.
pub fn simulate_mismatch_unchecked(exp: &MismatchExperiment) -> f64 {
    let step = 3.0 * exp.sigma / ((1u64 << exp.b) - 1) as f64;
    let hits = mc_sum(exp.n, exp.seed, |rng| {
        let x = draw(rng, exp.sigma, exp.domain);
        mismatch_event(x, step, exp.b, exp.b_prime, exp.domain) as u8 as f64
    });
    hits / exp.n as f64
}

/// Empirical `P(x > 3σ/2)` for half-normal `x`.
pub fn simulate_tail(n: usize, seed: u64) -> f64 {
    let hits = mc_sum(n, seed, |rng| (draw(rng, 1.0, Domain::HalfNormal) > 1.5) as u8 as f64);
    hits / n as f64
}

/// Probability that at least one of `t` independent timesteps has increased error.
pub fn temporal_accumulation(p: f64, t: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    if t == 0 {
        return Err(Error::invalid("T must be >= 1"));
    }
    // p * sum_k (1-p)^k equals 1 - (1-p)^T and is exact at T = 1
    Ok(p * (0..t as i32).map(|k| (1.0 - p).powi(k)).sum::<f64>())
}

/// Empirical probability that a `t`-step sequence of mismatched quantizations
/// has at least one step with increased error.
pub fn simulate_temporal_accumulation(exp: &MismatchExperiment, t: u32) -> Result<f64> {
    exp.validate()?;
    if t == 0 {
        return Err(Error::invalid("T must be >= 1"));
    }
    let step = 3.0 * exp.sigma / ((1u64 << exp.b) - 1) as f64;
    let hits = mc_sum(exp.n, exp.seed, |rng| {
        let mut any = false;
        for _ in 0..t {
            let x = draw(rng, exp.sigma, exp.domain);
            any |= mismatch_event(x, step, exp.b, exp.b_prime, exp.domain);
        }
        any as u8 as f64
    });
    Ok(hits / exp.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorRoundErrors {
    pub e_floor: f64,
    pub e_round: f64,
    /// Errors restricted to samples with `q_min <= x/s <= q_max`.
    pub e_floor_unsaturated: f64,
    pub e_round_unsaturated: f64,
    pub step: f64,
}

impl FloorRoundErrors {
    pub fn unsaturated_ratio(&self) -> f64 {
        self.e_floor_unsaturated / self.e_round_unsaturated
    }
}

/// Expected squared errors of signed flooring and rounding quantizers on
/// `N(0, σ²)` with the shared step `3σ / q_max`.
pub fn floor_vs_round_error(b: u32, sigma: f64, n: usize, seed: u64) -> Result<FloorRoundErrors> {
    if b == 0 || b > 24 {
        return Err(Error::invalid(format!("b must be in [1, 24], got {b}")));
    }
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::invalid("need sigma > 0 and n >= 1"));
    }
    let range = QuantRange::new(b, true)?;
    let step = 3.0 * sigma / range.q_max as f64;
    // each statistic replays the same seeded sample stream
    let stats = |k: usize| {
        mc_sum(n, seed, move |rng| {
            let x: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
            let r = x / step;
            let ef = (x - step * range.clip(r.floor())).powi(2);
            let er = (x - step * range.clip(r.round())).powi(2);
            let inside = range.contains(r);
            match k {
                0 => ef,
                1 => er,
                2 => inside as u8 as f64 * ef,
                3 => inside as u8 as f64 * er,
                _ => inside as u8 as f64,
            }
        })
    };
    let inside_n = stats(4);
    Ok(FloorRoundErrors {
        e_floor: stats(0) / n as f64,
        e_round: stats(1) / n as f64,
        e_floor_unsaturated: stats(2) / inside_n,
        e_round_unsaturated: stats(3) / inside_n,
        step,
    })
}

/// Floor and round errors of a fixed list of inputs.
pub fn floor_vs_round_error_on(x: &[f64], b: u32, step: f64) -> Result<(f64, f64)> {
    let range = QuantRange::new(b, true)?;
    let n = x.len().max(1) as f64;
    let ef = x.iter().map(|&v| (v - step * range.clip((v / step).floor())).powi(2)).sum::<f64>() / n;
    let er = x.iter().map(|&v| (v - step * range.clip((v / step).round())).powi(2)).sum::<f64>() / n;
    Ok((ef, er))
}

/// One verified claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claim: String,
    pub analytic: f64,
    pub empirical: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ClaimResult {
    fn within(claim: impl Into<String>, analytic: f64, empirical: f64, tolerance: f64) -> Self {
        ClaimResult {
            claim: claim.into(),
            analytic,
            empirical,
            tolerance,
            pass: (analytic - empirical).abs() <= tolerance,
        }
    }
}

/// Run every theory claim at `n` samples per experiment.
pub fn verify_all(n: usize, seed: u64) -> Result<Vec<ClaimResult>> {
    let mut out = Vec::new();

    out.push(ClaimResult::within("tail_1.5sigma", TAIL_BOUND, simulate_tail(n, seed), 0.003));

    let pairs = [(2, 1), (3, 1), (4, 2), (4, 3)];
    for domain in [Domain::HalfNormal, Domain::FullNormal] {
        for (i, &(b, bp)) in pairs.iter().enumerate() {
            let exp = MismatchExperiment {
                b,
                b_prime: bp,
                sigma: 1.0,
                n,
                seed: seed.wrapping_add(1 + i as u64),
                domain,
            };
            let sim = simulate_mismatch(&exp)?;
            let exact = exact_mismatch_probability(b, bp, domain)?;
            let stated = analytic_mismatch_probability(b, bp, domain)?;
            let name = format!("{}.b{}_to_b{}", domain_name(domain), b, bp);
            out.push(ClaimResult::within(format!("step_mismatch.{name}"), exact, sim, 0.005));
            out.push(ClaimResult {
                claim: format!("step_mismatch.clip_upper_bound.{name}"),
                analytic: stated,
                empirical: sim,
                tolerance: 0.005,
                pass: sim <= stated + 0.005,
            });
        }
    }

    // lower bound and monotonicity over every valid pair up to 8 bits
    let mut min_p = f64::INFINITY;
    let mut monotone = true;
    for b in 2..=8u32 {
        let mut prev = 0.0;
        for bp in (1..b).rev() {
            let p = analytic_mismatch_probability(b, bp, Domain::HalfNormal)?;
            min_p = min_p.min(p);
            monotone &= p > prev;
            prev = p;
        }
    }
    out.push(ClaimResult {
        claim: "tail_lower_bound".into(),
        analytic: TAIL_BOUND,
        empirical: min_p,
        tolerance: 0.0,
        pass: min_p > TAIL_BOUND,
    });
    out.push(ClaimResult {
        claim: "step_mismatch.monotone_in_b_prime".into(),
        analytic: 1.0,
        empirical: monotone as u8 as f64,
        tolerance: 0.0,
        pass: monotone,
    });

    for b in [2u32, 3, 4] {
        let e = floor_vs_round_error(b, 1.0, n, seed.wrapping_add(100 + b as u64))?;
        out.push(ClaimResult {
            claim: format!("floor_gt_round.b{b}"),
            analytic: e.e_round,
            empirical: e.e_floor,
            tolerance: 0.0,
            pass: e.e_floor > e.e_round,
        });
    }
    let e = floor_vs_round_error(6, 1.0, n, seed.wrapping_add(106))?;
    out.push(ClaimResult::within("floor_round_ratio.b6", 4.0, e.unsaturated_ratio(), 0.2));

    let base = MismatchExperiment {
        b: 4,
        b_prime: 2,
        sigma: 1.0,
        n,
        seed: seed.wrapping_add(200),
        domain: Domain::HalfNormal,
    };
    let p = exact_mismatch_probability(base.b, base.b_prime, base.domain)?;
    for t in [1u32, 2, 4] {
        let exp = MismatchExperiment {
            seed: base.seed.wrapping_add(t as u64),
            ..base
        };
        out.push(ClaimResult::within(
            format!("temporal_accumulation.T{t}"),
            temporal_accumulation(p, t)?,
            simulate_temporal_accumulation(&exp, t)?,
            0.01,
        ));
    }
    Ok(out)
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::HalfNormal => "half_normal",
        Domain::FullNormal => "full_normal",
    }
}

pub fn claims_to_csv(claims: &[ClaimResult]) -> String {
    let mut out = String::from("claim,analytic,empirical,tolerance,result\n");
    for c in claims {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            c.claim,
            c.analytic,
            c.empirical,
            c.tolerance,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    out
}
