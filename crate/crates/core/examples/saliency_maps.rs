//! Trains a small L2T-ww target, then writes the input-gradient saliency of
//! the planted pair for a few test images, learned weights against uniform.
//!
//!     cargo run --release -p l2tww --example saliency_maps -- /tmp/saliency

use std::path::Path;

use l2tww::config::RunConfig;
use l2tww::run::{pretrain_source, saliency_run, train_run, CHECKPOINT_FILE};
use l2tww::transfer::Pair;

const SMALL: &str = "\
synthetic.size = 12
synthetic.families = 3
synthetic.palettes = 2
synthetic.source_per_class = 40
synthetic.train_per_class = 10
synthetic.test_per_class = 20
source.groups = 8x1,16x1,16x1
source.epochs = 30
source.batch_size = 16
plant.epochs = 10
target.groups = 4x1,8x1,8x1
epochs = 30
batch_size = 10
augment = false
meta_lr = 0.01
mode = l2tww-all-to-all
";

fn main() -> l2tww::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-saliency".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    cfg.set("out_dir", &format!("{out}/source"))?;
    let source = pretrain_source(&cfg, |_| {})?;
    cfg.set("source.checkpoints", source.checkpoint.to_str().unwrap_or_default())?;
    cfg.set("out_dir", &out)?;
    let run = train_run(&cfg, false, |_| {})?;
    println!("test accuracy {:.3}", run.final_acc());

    let ckpt = Path::new(&out).join(CHECKPOINT_FILE);
    let pair = Pair::new(0, 1, 2);
    for index in [0, 7, 19] {
        for p in saliency_run(&cfg, &ckpt, index, &pair, true)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
