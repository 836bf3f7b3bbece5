//! Feature files, synthetic inputs, run configuration, toy training and
//! benchmarking behind the command line tool.

pub mod bench;
pub mod config;
pub mod fmap;
pub mod synth;
pub mod train;

pub use bench::{bench, BenchReport};
pub use config::{load_config, parse_config, FeatureSource, ReportFormat, RunConfig};
pub use fmap::FeatureFileHeader;
pub use synth::{gen_batch, gen_features};
pub use train::{toy_train, LossCurve, TrainConfig, TrainStep};
