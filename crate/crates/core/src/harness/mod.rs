//! Orchestration: configuration, scene datasets, training, evaluation,
//! gradient checking and report emission.

mod config;
mod dataset;
mod eval;
mod gradcheck;
mod report;
mod train;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use dataset::{cmd_gen, load_dataset, Manifest, ManifestEntry};
pub use eval::{
    cmd_eval, corruption_label, evaluate, evaluate_report, evaluate_scene, CorruptionResult, EvalReport,
    SceneEvalOutput, CALIB_SWEEP, MAX_DETECTIONS,
};
pub use gradcheck::{cmd_gradcheck, gradcheck, tiny_config, BlockResult, GradcheckOptions, GradcheckReport};
pub use report::{cmd_report, line_chart_svg, ReportSummary, Series};
pub use train::{cmd_train, train, TrainSummary, TrainedModel};

use sha2::{Digest, Sha256};

/// Revision string embedded in reports.
pub const REVISION: &str = concat!("poifusion-", env!("CARGO_PKG_VERSION"));

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stateless 64-bit mixer used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
