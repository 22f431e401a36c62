//! Distribution and paired-image scores between generated and reference figure sets.

mod evaluate;
mod stats;

pub use evaluate::{evaluate, evaluate_records, ocr_sim, MetricExtractor, MetricReport};
pub use stats::{
    fid, fid_from_stats, inception_score, kid, kid_subsets, mean_and_covariance, FeatureSet,
};
