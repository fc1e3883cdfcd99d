//! Accuracy gain of L2T-ww and FM over scratch as the number of training
//! images per class shrinks, at a fixed number of epochs.
//!
//!     cargo run --release -p l2tww --example limited_data -- /tmp/limited

use l2tww::config::RunConfig;
use l2tww::run::{pretrain_source, train_run};

const SMALL: &str = "\
synthetic.size = 12
synthetic.families = 3
synthetic.palettes = 2
synthetic.source_per_class = 40
synthetic.train_per_class = 24
synthetic.test_per_class = 20
source.groups = 8x1,16x1,16x1
source.epochs = 30
source.batch_size = 16
plant.epochs = 10
target.groups = 4x1,8x1,8x1
batch_size = 12
epochs = 30
augment = false
meta_lr = 0.01
";

fn main() -> l2tww::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-limited".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    cfg.set("out_dir", &format!("{out}/source"))?;
    let source = pretrain_source(&cfg, |_| {})?;
    cfg.set("source.checkpoints", source.checkpoint.to_str().unwrap_or_default())?;

    println!("{:>4} {:>8} {:>8} {:>8}", "N", "scratch", "fm", "l2tww");
    for n in [3, 6, 12, 24] {
        cfg.set("data.train_per_class", &n.to_string())?;
        let mut accs = Vec::new();
        for mode in ["scratch", "fm-one-to-one", "l2tww-all-to-all"] {
            cfg.set("mode", mode)?;
            cfg.set("out_dir", &format!("{out}/n{n}-{mode}"))?;
            accs.push(train_run(&cfg, false, |_| {})?.final_acc());
        }
        println!("{n:>4} {:>8.3} {:>8.3} {:>8.3}", accs[0], accs[1], accs[2]);
    }
    Ok(())
}
