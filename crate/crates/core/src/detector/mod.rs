//! Sequence detection over the time-varying two-track target.

pub mod oracle;
mod soft;
mod trellis;
mod viterbi;

pub use soft::{forward_backward, FbGrad, FbRun, SoftOutput, POSTERIOR_FLOOR};
pub use trellis::{Entry, JointTrellis, MAX_STATES};
pub use viterbi::{viterbi_decisions, viterbi_joint, viterbi_single};

use ndarray::{s, Array2, ArrayView2};

use crate::channel::{TimingTrajectory, TrackBits};
use crate::error::{invalid, Result};
use crate::interp::InterpOrder;
use crate::targets::MatrixTarget;

/// Joint trellis over a whole frame.
pub fn build_trellis(target: &MatrixTarget, traj: &TimingTrajectory, order: InterpOrder) -> Result<JointTrellis> {
    JointTrellis::new(target, traj, order)
}

/// Splits `[0, n)` into cores of `block` samples, each padded by `overlap`
/// on both sides. Yields `(padded_start, core_start, core_end, padded_end)`.
fn blocks(n: usize, block: usize, overlap: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..n.div_ceil(block)).map(move |b| {
        let a = b * block;
        let e = (a + block).min(n);
        (a.saturating_sub(overlap), a, e, (e + overlap).min(n))
    })
}

fn check_frame(target: &MatrixTarget, traj: &TimingTrajectory, y: &ArrayView2<f64>, block: usize) -> Result<()> {
    if block == 0 {
        return Err(invalid!("block length must be positive"));
    }
    if y.ncols() != traj.len() || y.nrows() != target.n_out() {
        return Err(invalid!("equalized frame is {}x{}, expected {}x{}", y.nrows(), y.ncols(), target.n_out(), traj.len()));
    }
    Ok(())
}

/// Viterbi over a long frame in overlapping blocks. Each bit is taken from
/// the block whose core contains the sample where it enters the trellis.
pub fn viterbi_blockwise(
    target: &MatrixTarget,
    traj: &TimingTrajectory,
    order: InterpOrder,
    y: ArrayView2<f64>,
    block: usize,
    overlap: usize,
) -> Result<TrackBits> {
    check_frame(target, traj, &y, block)?;
    let n = traj.len();
    let mut out = Array2::from_elem((target.n_tracks(), n), -1i8);
    for (p0, c0, c1, p1) in blocks(n, block, overlap) {
        let tr = JointTrellis::for_block(target, traj, order, p0, p1, n)?;
        let (bits, _) = viterbi_decisions(&tr, y.slice(s![.., p0..p1]))?;
        for (e, b) in tr.entries().zip(bits) {
            if (c0..c1).contains(&e.sample) {
                out[[e.track, e.index]] = b;
            }
        }
    }
    TrackBits::new(out)
}

/// Forward-backward over a long frame in overlapping blocks.
pub fn soft_blockwise(
    target: &MatrixTarget,
    traj: &TimingTrajectory,
    order: InterpOrder,
    y: ArrayView2<f64>,
    noise_var: f64,
    block: usize,
    overlap: usize,
) -> Result<SoftOutput> {
    check_frame(target, traj, &y, block)?;
    let n = traj.len();
    let mut post = Array2::from_elem((target.n_tracks(), n), 0.5);
    for (p0, c0, c1, p1) in blocks(n, block, overlap) {
        let tr = JointTrellis::for_block(target, traj, order, p0, p1, n)?;
        let run = FbRun::new(&tr, y.slice(s![.., p0..p1]), noise_var)?;
        for (e, &(lp, _)) in tr.entries().zip(run.log_posteriors()) {
            if (c0..c1).contains(&e.sample) {
                post[[e.track, e.index]] = lp.exp().clamp(POSTERIOR_FLOOR, 1.0 - POSTERIOR_FLOOR);
            }
        }
    }
    Ok(SoftOutput { posteriors: post })
}
