//! Fixed-precision baseline: bit learning and renewal off, every layer at
//! 4-bit weights, 4-bit spikes and one timestep (bit budget 16).

use bitsnn::config::Config;
use bitsnn::data;
use bitsnn::model::Model;
use bitsnn::train::{evaluate, Trainer};
use std::path::Path;

fn main() -> bitsnn::Result<()> {
    let cfg = Config::from_toml(include_str!("../configs/uquant-441.toml"))?;
    let spec = cfg.model_spec()?;
    let h = &cfg.train_harness;
    let train = data::load(Path::new(&h.train_data), Some(Path::new(&h.train_labels)), spec.input, spec.classes)?;
    let test = data::load(Path::new(&h.test_data), Some(Path::new(&h.test_labels)), spec.input, spec.classes)?;
    let mut trainer = Trainer::new(Model::new(spec, 0)?, cfg.train_config()?)?;
    trainer.cfg.epochs = 3;
    trainer.fit(&train, Some(&test))?;
    let ev = evaluate(&trainer.model, &test, 128)?;
    println!("{}", ev.cost.table_row(Some(ev.accuracy), true));
    Ok(())
}
