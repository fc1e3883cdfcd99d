//! Training resumed from the checkpoint written after epoch 2 ends
//! bit-identical to the uninterrupted run.
//!
//!     cargo run --release -p l2tww --example checkpoint_resume -- /tmp/resume

use std::path::Path;

use l2tww::config::RunConfig;
use l2tww::data::Checkpoint;
use l2tww::run::{pretrain_source, train_run, CHECKPOINT_FILE};

const SMALL: &str = "\
synthetic.size = 8
synthetic.families = 2
synthetic.palettes = 2
synthetic.source_per_class = 12
synthetic.train_per_class = 6
synthetic.test_per_class = 6
source.groups = 4x1,8x1
source.epochs = 2
source.batch_size = 8
plant.epochs = 2
target.groups = 4x1,4x1
batch_size = 4
augment = true
checkpoint_f64 = true
mode = l2tww-all-to-all
";

fn main() -> l2tww::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-resume".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    cfg.set("out_dir", &format!("{out}/source"))?;
    let source = pretrain_source(&cfg, |_| {})?;
    cfg.set("source.checkpoints", source.checkpoint.to_str().unwrap_or_default())?;

    cfg.set("epochs", "4")?;
    let root = Path::new(out.as_str());
    let snapshot = root.join("epoch2.bin");
    cfg.set("out_dir", &format!("{out}/straight"))?;
    let straight = train_run(&cfg, false, |m| {
        if m.epoch == 2 {
            std::fs::copy(root.join("straight").join(CHECKPOINT_FILE), &snapshot).expect("copy checkpoint");
        }
    })?;

    cfg.set("out_dir", &format!("{out}/interrupted"))?;
    std::fs::create_dir_all(root.join("interrupted")).expect("create run directory");
    std::fs::copy(&snapshot, root.join("interrupted").join(CHECKPOINT_FILE)).expect("copy checkpoint");
    let resumed = train_run(&cfg, true, |m| println!("resumed, epoch {} acc {:.3}", m.epoch, m.test_acc))?;

    let bytes = |dir: &str| Checkpoint::load(&root.join(dir).join(CHECKPOINT_FILE)).map(|c| c.to_bytes(true));
    println!("final states equal: {}", straight.state == resumed.state);
    println!("checkpoints byte-identical: {}", bytes("straight")? == bytes("interrupted")?);
    Ok(())
}
