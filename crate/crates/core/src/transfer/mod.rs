pub mod loss;
pub mod matching;
pub mod saliency;

pub use loss::{combined_wfm, total_loss, wfm_pair_loss, PairTerm, TransferBatchReport, TransferModel};
pub use matching::{make_config, MatchConfig, MatchStyle, Pair};
