//! The synthetic transfer task: family-labelled source split, fine-labelled
//! target splits. Writes the channel means of a few images as PGM files.
//!
//!     cargo run --release -p l2tww --example synthetic_data -- /tmp/synthetic

use std::path::PathBuf;

use l2tww::data::{gen_synthetic, SyntheticSpec, Variant};
use l2tww::transfer::saliency::write_pgm;
use l2tww_autodiff::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    std::fs::create_dir_all(&out)?;

    for variant in [Variant::Standard, Variant::TwoPopulation] {
        let spec = SyntheticSpec {
            variant,
            ..SyntheticSpec::default()
        };
        let task = gen_synthetic(&spec)?;
        println!(
            "{variant}: source {:?} over {} families, target train {:?} / test {:?} over {} classes",
            task.source.data.images.shape(),
            task.source.data.classes,
            task.target_train.data.images.shape(),
            task.target_test.data.images.shape(),
            task.target_train.data.classes,
        );
        let pops = task.target_train.populations();
        println!("  population sizes {} / {}", pops.iter().filter(|&&p| p == 0).count(), pops.iter().filter(|&&p| p == 1).count());
    }

    let task = gen_synthetic(&SyntheticSpec::default())?;
    let data = &task.target_train.data;
    let unit = data.stats.destandardize(&data.images);
    let [c, h, w] = data.image_shape();
    for i in 0..data.classes {
        let f = task.target_train.factors[i];
        let img = Tensor::from_fn(&[h, w], |p| (0..c).map(|ch| unit.data()[((i * c + ch) * h * w) + p]).sum::<f64>() / c as f64);
        let path = out.join(format!("fine{}_family{}_palette{}.pgm", f.fine, f.coarse, f.palette));
        write_pgm(&path, &img)?;
    }
    println!("wrote {} images to {}", data.classes, out.display());
    Ok(())
}
