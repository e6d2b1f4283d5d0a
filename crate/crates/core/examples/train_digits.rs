//! Train the desk network on the bundled 8x8 digits, then save, reload and
//! re-evaluate the checkpoint.
//!
//! `cargo run --release --example train_digits -- [epochs]`

use bitsnn::checkpoint::Checkpoint;
use bitsnn::config::Config;
use bitsnn::data;
use bitsnn::model::Model;
use bitsnn::train::{evaluate, Trainer};
use std::path::Path;

fn main() -> bitsnn::Result<()> {
    let mut cfg = Config::default();
    cfg.train_harness.epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = cfg.model_spec()?;
    let h = &cfg.train_harness;
    let train = data::load(Path::new(&h.train_data), Some(Path::new(&h.train_labels)), spec.input, spec.classes)?;
    let test = data::load(Path::new(&h.test_data), Some(Path::new(&h.test_labels)), spec.input, spec.classes)?;

    let tc = cfg.train_config()?;
    let mut trainer = Trainer::new(Model::new(spec, tc.seed)?, tc)?;
    while trainer.epoch < trainer.cfg.epochs {
        let log = trainer.train_epoch(&train, Some(&test))?;
        println!(
            "epoch {:>2} loss {:.4} W/S/T {:.2}/{:.2}/{:.2} acc {:.4}",
            log.epoch, log.task_loss, log.b_w, log.b_s, log.t, log.accuracy
        );
    }
    println!("{} renewal events", trainer.events.len());

    let dir = std::env::temp_dir().join("bitsnn-example");
    let path = dir.join("checkpoint.json");
    Checkpoint::from_trainer(&trainer).save(&path)?;
    let reloaded = Checkpoint::load(&path)?;
    let ev = evaluate(&reloaded.model, &test, 128)?;
    println!("reloaded from {}: accuracy {:.4}", path.display(), ev.accuracy);
    println!("{}", ev.cost.table_row(Some(ev.accuracy), true));
    Ok(())
}
