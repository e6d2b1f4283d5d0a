//! Bit budget, S-ACE with and without temporal squeezing, NS-ACE and the
//! expected number of non-zero activation bits.

use bitsnn::cost::{bit_budget, expected_nonzero_bits, ns_ace, s_ace, AceTerm};
use bitsnn::model::{Model, ModelSpec};

fn main() -> bitsnn::Result<()> {
    println!("W/S/T 16/1/4 -> bit budget {}", bit_budget(4.0, 16.0, 1.0));

    let layer = AceTerm {
        macs: 1.0e6,
        t: 2.0,
        b_w: 4.0,
        b_s: 2.0,
        squeezed: false,
    };
    let plain = s_ace(&[layer]);
    let squeezed = s_ace(&[AceTerm { squeezed: true, ..layer }]);
    println!("S-ACE {plain:.0}, squeezed {squeezed:.0}");
    let ns = ns_ace(plain, 0.2)?;
    println!("NS-ACE at firing rate 0.2: {ns:.0}");
    println!("Exp(act.) = {:.3}", expected_nonzero_bits(2.0, 2.0, ns, plain)?);

    let model = Model::new(ModelSpec::desk(), 0)?;
    let report = model.cost_report(&vec![(1, 4); model.spiking_layers()])?;
    println!("{}", report.table_row(None, true));
    print!("{}", report.to_csv());
    Ok(())
}
