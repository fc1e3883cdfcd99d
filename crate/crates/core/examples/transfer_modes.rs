//! Trains the same small target in every transfer mode against one planted
//! source, and prints test accuracy and where the learned λ mass sits.
//!
//!     cargo run --release -p l2tww --example transfer_modes -- /tmp/modes

use l2tww::bilevel::EpochMetrics;
use l2tww::config::{Mode, RunConfig};
use l2tww::run::{pretrain_source, train_run};

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
";

fn lambda_by_tap(m: &EpochMetrics) -> Vec<f64> {
    let taps = m.pairs.iter().map(|p| p.pair.m).max().unwrap_or(0);
    let mut mass = vec![0.0; taps];
    for p in &m.pairs {
        mass[p.pair.m - 1] += p.lambda_mean;
    }
    let total: f64 = mass.iter().sum();
    mass.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
}

fn main() -> l2tww::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-modes".into());
    let mut cfg = RunConfig::parse(SMALL)?;
    cfg.set("out_dir", &format!("{out}/source"))?;
    let source = pretrain_source(&cfg, |_| {})?;
    cfg.set("source.checkpoints", source.checkpoint.to_str().unwrap_or_default())?;

    for mode in Mode::ALL {
        cfg.set("mode", &mode.to_string())?;
        cfg.set("out_dir", &format!("{out}/{mode}"))?;
        let run = train_run(&cfg, false, |_| {})?;
        let last = run.history.last().expect("at least the initial epoch");
        let mass = lambda_by_tap(last);
        let mass = if mass.is_empty() {
            String::new()
        } else {
            format!("  λ mass by source tap {:.2?}", mass)
        };
        println!("{:<22} acc {:.3}  pairs {}{mass}", mode.to_string(), run.final_acc(), run.pairs.len());
    }
    Ok(())
}
