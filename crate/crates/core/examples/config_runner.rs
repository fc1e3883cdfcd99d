//! Loads an experiment preset, applies `key=value` overrides and prints the
//! resolved configuration with the schedule it implies.
//!
//!     cargo run --release -p l2tww --example config_runner -- crates/core/presets/limited-data.cfg data.train_per_class=25

use std::path::Path;

use l2tww::config::RunConfig;
use l2tww::run::load_task;

fn main() -> l2tww::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "crates/core/presets/synthetic-transfer.cfg".into());
    let mut cfg = RunConfig::load(Path::new(&preset))?;
    for kv in args {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| l2tww::Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    print!("{}", cfg.resolved());

    let data = load_task(&cfg)?;
    let train = cfg.train_for(data.train.len())?;
    println!(
        "# mode {}, {} training images, {} epochs of batch {}, scheme {}",
        cfg.mode()?,
        data.train.len(),
        train.epochs,
        train.batch_size,
        cfg.mode()?.scheme()
    );
    Ok(())
}
