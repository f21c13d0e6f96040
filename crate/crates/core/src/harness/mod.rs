//! Seeded BER sweeps over reader spacing and noise for the three read
//! channels, plus the self-test suite.

pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod results;
pub mod selftest;

pub use artifacts::{derive_seed, NnOutcome, TimingLine, TrainedPoint};
pub use config::{ExperimentConfig, SweepPoint, SystemId};
pub use experiment::{evaluate_point, mean_ber, run_experiment, run_point, run_sweep, train_point};
pub use results::{ber_csv, emit_results, parse_ber_csv, BerRecord, RunFlag, BER_HEADER};
pub use selftest::{run_selftest, CheckResult};
