use std::path::Path;
use std::process::{Command, Output};

fn l2tww(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2tww")).args(args).output().unwrap()
}

const TINY: &str = "\
# tiny synthetic run
synthetic.size = 8
synthetic.families = 2
synthetic.subfamilies = 2
synthetic.palettes = 2
synthetic.source_per_class = 6
synthetic.train_per_class = 3
synthetic.test_per_class = 3
source.groups = 4x1,8x1
source.epochs = 1
source.batch_size = 8
plant.epochs = 1
target.groups = 4x1,4x1
epochs = 2
batch_size = 4
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("{TINY}out_dir = {}\n", dir.display())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_hypergradcheck_passes() {
    let out = l2tww(&["verify", "hypergradcheck", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("hypergrad_three_stage"));
    assert!(text.contains("product_counts"));
    assert!(text.lines().all(|l| l.starts_with("ok")));
}

#[test]
fn verify_gradcheck_passes() {
    let out = l2tww(&["verify", "gradcheck", "--seeds", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("conv2d"));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "epochs = many\n").unwrap();
    let out = l2tww(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));

    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    assert_eq!(l2tww(&["train", "-c", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(l2tww(&["verify", "nonsense"]).status.code(), Some(2));
    assert_eq!(l2tww(&["train", "--set", "mode=fm-everything"]).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let src = dir.path().join("source.bin");
    let src_set = format!("source.checkpoints={}", src.display());

    let out = l2tww(&["pretrain-source", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(src.exists());

    let out = l2tww(&["train", "-c", &cfg, "-s", &src_set]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("test accuracy"));
    assert!(stdout.contains("s0_m1_n1"));

    let ckpt = dir.path().join("checkpoint.bin");
    let out = l2tww(&["eval", "-c", &cfg, "-s", &src_set, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let acc: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = l2tww(&[
        "saliency",
        "-c",
        &cfg,
        "-s",
        &src_set,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--index",
        "1",
        "--pair",
        "s0_m2_n2",
        "--compare-uniform",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for suffix in ["", "_uniform", "_diff"] {
        let bytes = std::fs::read(dir.path().join(format!("saliency_1_s0_m2_n2{suffix}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    }

    let out = l2tww(&["train", "-c", &cfg, "-s", &src_set, "-s", "target.groups=4x1,6x1", "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scratch_needs_no_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = l2tww(&["train", "-c", &cfg, "-s", "mode=scratch"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = l2tww(&["train", "-c", &cfg, "-s", "mode=fm-one-to-one"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = l2tww(&["train", "-c", &cfg, "-s", "mode=scratch", "-s", "lr=1e200", "-s", "momentum=0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(dir.path().join("checkpoint.bin").exists());
}
