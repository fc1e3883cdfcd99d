//! Two sources of different depth taught to one target. Every source tap is
//! paired with every target tap; the learned λ shows which source is used.
//!
//!     cargo run --release -p l2tww --example multi_source -- /tmp/duo

use l2tww::config::RunConfig;
use l2tww::run::{pretrain_source, train_run};

const SMALL: &str = "\
synthetic.size = 12
synthetic.families = 3
synthetic.palettes = 2
synthetic.source_per_class = 40
synthetic.train_per_class = 10
synthetic.test_per_class = 20
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
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-duo".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    let mut paths = Vec::new();
    for (name, groups, seed) in [("deep", "8x2,16x2,16x2", "0"), ("shallow", "8x1,16x1", "1")] {
        cfg.set("source.groups", groups)?;
        cfg.set("seed", seed)?;
        cfg.set("out_dir", &format!("{out}/{name}"))?;
        let s = pretrain_source(&cfg, |_| {})?;
        println!("{name:<8} source probes {:.2?}", s.probes);
        paths.push(s.checkpoint.to_string_lossy().into_owned());
    }
    cfg.set("seed", "0")?;
    cfg.set("source.checkpoints", &paths.join(","))?;
    cfg.set("out_dir", &format!("{out}/target"))?;
    let run = train_run(&cfg, false, |_| {})?;
    println!("test accuracy {:.3}", run.final_acc());
    let last = run.history.last().expect("at least the initial epoch");
    for p in &last.pairs {
        println!("{:<10} λ {:.3} ± {:.3}  loss {:.3}", p.pair.key(), p.lambda_mean, p.lambda_std, p.loss);
    }
    Ok(())
}
