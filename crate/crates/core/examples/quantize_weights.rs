//! Quantize a weight vector at several bit widths and show the
//! straight-through gradients for values, step and bit width.

use bitsnn::quant::{quantize_weights, weight_grad_bits, weight_grad_step, weight_grad_values};

fn main() -> bitsnn::Result<()> {
    let w = [0.6, -0.05, 0.31, -1.4, 2.2];
    let step = 0.25;
    for bits in [1, 2, 3, 4] {
        let q = quantize_weights(&w, step, bits)?;
        println!("{bits} bit(s): codes {:?} -> {:?}", q.codes, q.dequantize());
    }

    let upstream = [1.0; 5];
    println!("d/dw      {:?}", weight_grad_values(&w, step, 3, &upstream)?);
    println!("d/dstep   {:.4}", weight_grad_step(&w, step, 3, &upstream)?);
    println!("d/dbits   {:.4}", weight_grad_bits(&w, step, 3, &upstream)?);
    Ok(())
}
