pub mod checkpoint;
pub mod dataset;
pub mod formats;
pub mod synthetic;

pub use checkpoint::{Checkpoint, RngState};
pub use dataset::{augment, batches, gather_rows, subsample_per_class, Dataset, Stats};
pub use formats::{load_cifar_binary, load_idx};
pub use synthetic::{gen_synthetic, SyntheticSpec, SyntheticTask, Variant};
