//! Two-track TDMR read-channel laboratory.
//!
//! Readback synthesis with intertrack interference, media noise and writer
//! frequency offset; joint least-squares design of MIMO equalizers and
//! matrix partial-response targets; a tanh MLP equalizer trained against a
//! time-varying target; joint Viterbi and differentiable forward-backward
//! detection; data-aided timing recovery; and a seeded BER sweep harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::len_without_is_empty)]

pub mod channel;
pub mod detector;
pub mod error;
pub mod harness;
pub mod interp;
pub mod nn;
pub mod targets;
mod textio;
pub mod timing;

pub use channel::{
    build_channel, generate_bits, linear_offset_trajectory, simulate_readback, ChannelGeometry, ChannelMatrixFir, NoiseConfig,
    ReadbackFrame, TimingTrajectory, TrackBits, SLEW_MAX,
};
pub use detector::{
    build_trellis, forward_backward, soft_blockwise, viterbi_blockwise, viterbi_joint, viterbi_single, FbRun, JointTrellis, SoftOutput,
};
pub use error::{Error, Result};
pub use interp::{delay_sequence, lagrange_taps, InterpOrder};
pub use nn::{forward, init_mlp, loss_mse, loss_xent, train, LossMode, MlpEqualizer, TrainConfig, TrainOutcome};
pub use targets::{delay_bits, design_gpr, design_miso_gpr, equalize_linear, target_branch, GprDesign, MatrixTarget, MimoFir};
pub use timing::{estimate_trajectory, fit_line, pll_step, ted_mm, PllRun, PllState, TrajectoryEstimator};
