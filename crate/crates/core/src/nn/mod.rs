pub mod extractor;
pub mod meta;
pub mod optim;

pub use extractor::{ExtractorSpec, FeatureExtractor, Features, GroupSpec};
pub use meta::{adaptor_apply, AdaptorInit, meta_f, meta_g, MetaConfig, WeightSource};
pub use optim::{cosine_lr, AdamConfig, AdamState, SgdConfig, SgdState};
