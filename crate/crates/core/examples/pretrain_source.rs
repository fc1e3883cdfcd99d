//! Pretrains a small source network on the family labels, plants tap 1 and
//! reports linear-probe accuracy of every tap on the fine target labels.
//!
//!     cargo run --release -p l2tww --example pretrain_source -- /tmp/source

use l2tww::config::RunConfig;
use l2tww::run::pretrain_source;

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
augment = false
";

fn main() -> l2tww::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-source".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    cfg.set("out_dir", &out)?;
    let summary = pretrain_source(&cfg, |m| println!("epoch {:>2}  loss {:.3}  acc {:.3}", m.epoch, m.train_loss_org, m.test_acc))?;
    println!("source train accuracy {:.3}", summary.train_acc);
    for (i, p) in summary.probes.iter().enumerate() {
        println!("probe g{}  {p:.3}", i + 1);
    }
    println!("wrote {}", summary.checkpoint.display());
    Ok(())
}
