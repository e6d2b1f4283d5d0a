//! Drive a multi-bit integrate-and-fire layer for three timesteps and squeeze
//! its spike train into one frame.

use bitsnn::neuron::{temporal_squeeze, NeuronConfig, NeuronState, SpikeTrain};

fn main() -> bitsnn::Result<()> {
    let cfg = NeuronConfig::default();
    let mut state = NeuronState::new(cfg, 4, vec![1.0; cfg.t_bound])?;
    let current = [2.6, 0.4, -0.7, 5.0];
    let bits = [2, 2, 1];

    let mut rows = Vec::new();
    for (t, &b) in bits.iter().enumerate() {
        let spikes = state.step(&current, t + 1, b)?;
        println!("t={} bits={b} v={:?} spikes={spikes:?}", t + 1, state.v);
        rows.push(spikes);
    }
    let codes: Vec<i32> = rows.concat();
    let train = SpikeTrain::new(codes, bits.to_vec(), current.len(), false)?;
    println!("squeezed frame: {:?}", temporal_squeeze(&train)?);

    let bidir = NeuronConfig {
        bidirectional: true,
        ..cfg
    };
    let mut state = NeuronState::new(bidir, 4, vec![1.0; cfg.t_bound])?;
    println!("bidirectional, 2 bits: {:?}", state.step(&current, 1, 2)?);
    Ok(())
}
