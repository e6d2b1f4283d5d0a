//! Learnable bit widths: rounding of the continuous parameters, model-wide
//! averages, and the regulating loss that pulls them toward targets.

use bitsnn::bits::{materialize, regulate, RegulatingTargets};
use bitsnn::model::{Model, ModelSpec};

fn main() -> bitsnn::Result<()> {
    for x in [0.3, 2.49, 2.51, 9.0] {
        println!("materialize({x}, bound 6) = {}", materialize(x, 6)?);
    }

    let mut model = Model::new(ModelSpec::desk(), 0)?;
    model.layers[1].bits.b_w_hat = 2.2;
    model.layers[2].bits.b_s_hat = vec![1.8; 3];
    let targets = RegulatingTargets::default();
    let reg = regulate(&model.bit_layers(), &targets)?;
    let a = reg.averages;
    println!("averages W/S/T = {:.3}/{:.3}/{:.3}, bit budget {:.2}", a.b_w, a.b_s, a.t, a.bit_budget());
    println!("regulating loss {:.5}", reg.loss);
    for (i, g) in reg.grads.iter().enumerate() {
        println!("layer {i}: dB_w {:+.5} dT {:+.5} dB_s {:?}", g.b_w, g.t, g.b_s);
    }
    Ok(())
}
