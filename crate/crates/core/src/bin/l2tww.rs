use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2tww::config::RunConfig;
use l2tww::run::{eval_run, pretrain_source, saliency_run, train_run};
use l2tww::transfer::Pair;
use l2tww::verify::{self, Suite};
use l2tww::Error;

/// Exit codes: 0 success, 1 verification failure, 2 usage or config error,
/// 3 numerical abort.
#[derive(Parser)]
#[command(name = "l2tww", version, about = "Meta-weighted feature-matching transfer at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a source network (and plant a layer for synthetic tasks).
    PretrainSource(ConfigArgs),
    /// Transfer training in the configured mode.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Saliency graymap of one pair's matching loss for a test image.
    Saliency {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: usize,
        /// Pair key such as s0_m1_n2.
        #[arg(long)]
        pair: String,
        #[arg(long)]
        compare_uniform: bool,
    },
    /// Finite-difference oracle suites.
    Verify {
        /// gradcheck, hvpcheck, hypergradcheck or all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Autodiff(l2tww_autodiff::AutodiffError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::PretrainSource(args) => {
            let cfg = load(&args)?;
            let s = pretrain_source(&cfg, |m| {
                eprintln!("epoch {:>3}  loss {:.4}  train acc {:.4}", m.epoch, m.train_loss_org, m.test_acc);
            })?;
            println!("source train accuracy {:.4}", s.train_acc);
            for (i, p) in s.probes.iter().enumerate() {
                println!("probe g{} {:.4}", i + 1, p);
            }
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Train { cfg, resume } => {
            let cfg = load(&cfg)?;
            let s = train_run(&cfg, resume, |m| {
                eprintln!(
                    "epoch {:>3}  lr {:.4}  org {:.4}  wfm {:.4}  test acc {:.4}",
                    m.epoch, m.lr, m.train_loss_org, m.train_loss_wfm, m.test_acc
                );
            })?;
            println!("test accuracy {:.4}", s.final_acc());
            if let Some(last) = s.history.last() {
                for p in &last.pairs {
                    println!("{}  lambda {:.4} ± {:.4}  loss {:.4}", p.pair, p.lambda_mean, p.lambda_std, p.loss);
                }
            }
        }
        Command::Eval { cfg, checkpoint, split } => {
            let cfg = load(&cfg)?;
            println!("{:.4}", eval_run(&cfg, &checkpoint, &split)?);
        }
        Command::Saliency {
            cfg,
            checkpoint,
            index,
            pair,
            compare_uniform,
        } => {
            let cfg = load(&cfg)?;
            let pair: Pair = pair.parse()?;
            for p in saliency_run(&cfg, &checkpoint, index, &pair, compare_uniform)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Verify { suite, seeds } => {
            let suite: Suite = suite.parse()?;
            let reports = verify::run(suite, seeds)?;
            let mut failed = false;
            for r in verify::summarize(&reports) {
                let ok = r.passed();
                failed |= !ok;
                println!(
                    "{:<6} {:<15} {:<22} max rel err {:.3e} (tol {:.0e}){}",
                    if ok { "ok" } else { "FAIL" },
                    r.suite,
                    r.op,
                    r.error,
                    r.tolerance,
                    if ok { String::new() } else { format!(" seed {}", r.seed) }
                );
            }
            return Ok(failed as u8);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code(&e))
        }
    }
}
