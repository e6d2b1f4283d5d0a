//! A bit width drops from 4 to 2: compare the stale step with the one the
//! observer renews by grid search.

use bitsnn::renewal::{GridSearchConfig, ObserverState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mse(x: &[f64], step: f64, q_max: f64) -> f64 {
    x.iter().map(|&v| (v - step * (v / step).round().clamp(0.0, q_max)).powi(2)).sum::<f64>() / x.len() as f64
}

fn main() -> bitsnn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..50_000).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();

    let stale = 3.0 / 15.0;
    let mut observer = ObserverState {
        recorded_bits: 4,
        ..ObserverState::default()
    };
    let renewed = observer.renew(&x, 2, false, &GridSearchConfig::default())?.expect("bit width changed");
    println!("stale step {stale:.4}: 2-bit MSE {:.5}", mse(&x, stale, 3.0));
    println!("renewed step {renewed:.4}: 2-bit MSE {:.5}", mse(&x, renewed, 3.0));
    println!("same width again renews nothing: {:?}", observer.renew(&x, 2, false, &GridSearchConfig::default())?);
    Ok(())
}
