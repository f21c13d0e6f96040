//! Exhaustive reference detectors for short blocks.

use ndarray::{Array2, ArrayView2};

use super::trellis::{label_delay, Entry, JointTrellis};
use crate::channel::TimingTrajectory;
use crate::error::{invalid, Result};
use crate::interp::{lagrange_taps, split_delay, InterpOrder};
use crate::targets::MatrixTarget;

/// Largest `n_tracks * n_bits` enumerated.
pub const MAX_ENUM_BITS: usize = 20;

/// `sum_l G_l b~[k-l]` evaluated directly from the interpolation formula.
pub fn direct_labels(target: &MatrixTarget, traj: &TimingTrajectory, order: InterpOrder, bits: &[Vec<i8>]) -> Array2<f64> {
    let n = traj.len();
    let mut out = Array2::zeros((target.n_out(), n));
    for k in 0..n {
        for (l, g) in target.taps().iter().enumerate() {
            if k < l {
                continue;
            }
            let m = k - l;
            for (j, b) in bits.iter().enumerate() {
                let nb = b.len() as i64;
                let (ni, mu) = split_delay(label_delay(traj, j, k, l, target.len()));
                let c = lagrange_taps(mu, order).expect("fractional part in [0, 1)");
                let mut v = 0.0;
                for (i, ci) in c.iter().enumerate() {
                    let idx = m as i64 - ni - i as i64 + order.offset() as i64;
                    if idx >= 0 && idx < nb {
                        v += ci * b[idx as usize] as f64;
                    }
                }
                for o in 0..target.n_out() {
                    out[[o, k]] += g[[o, j]] * v;
                }
            }
        }
    }
    out
}

/// Every joint sequence of `n_tracks` tracks of `n` bits.
pub fn all_sequences(n_tracks: usize, n: usize) -> impl Iterator<Item = Vec<Vec<i8>>> {
    (0..1usize << (n_tracks * n))
        .map(move |code| (0..n_tracks).map(|j| (0..n).map(|i| if (code >> (j * n + i)) & 1 == 1 { 1 } else { -1 }).collect()).collect())
}

fn sq_dist(y: &ArrayView2<f64>, d: &Array2<f64>) -> f64 {
    y.iter().zip(d.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_size(trellis: &JointTrellis) -> Result<()> {
    if trellis.start() != 0 {
        return Err(invalid!("oracles need a whole-frame trellis"));
    }
    let bits = trellis.n_tracks() * trellis.n_bits();
    if bits > MAX_ENUM_BITS {
        return Err(invalid!("{bits} bits is too many to enumerate (limit {MAX_ENUM_BITS})"));
    }
    Ok(())
}

/// Minimum-distance joint sequence by enumeration: the decided bits in
/// trellis entry order and their squared distance. Costs within a relative
/// `1e-12` count as ties and go to the lexicographically smallest decided
/// sequence.
pub fn exhaustive_ml(trellis: &JointTrellis, traj: &TimingTrajectory, y: ArrayView2<f64>) -> Result<(Vec<i8>, f64)> {
    check_size(trellis)?;
    let decided: Vec<Entry> = trellis.entries().copied().collect();
    let mut best: Option<(f64, Vec<i8>)> = None;
    for b in all_sequences(trellis.n_tracks(), trellis.n_bits()) {
        let c = sq_dist(&y, &direct_labels(trellis.target(), traj, trellis.order(), &b));
        let key: Vec<i8> = decided.iter().map(|e| b[e.track][e.index]).collect();
        best = match best {
            None => Some((c, key)),
            Some((bc, bk)) => {
                let tol = 1e-12 * bc.abs().max(1e-300);
                if c < bc - tol || ((c - bc).abs() <= tol && key < bk) {
                    Some((c, key))
                } else {
                    Some((bc, bk))
                }
            }
        };
    }
    let (c, key) = best.expect("at least one sequence");
    Ok((key, c))
}

/// Posterior `P(b = +1 | y)` of every bit under AWGN of variance
/// `noise_var`, by enumeration, and `ln sum_b exp(-||y - d(b)||^2 / 2 var)`.
pub fn enumerated_posteriors(
    trellis: &JointTrellis,
    traj: &TimingTrajectory,
    y: ArrayView2<f64>,
    noise_var: f64,
) -> Result<(Array2<f64>, f64)> {
    check_size(trellis)?;
    let (nt, n) = (trellis.n_tracks(), trellis.n_bits());
    let seqs: Vec<_> = all_sequences(nt, n).collect();
    let logw: Vec<f64> =
        seqs.iter().map(|b| -sq_dist(&y, &direct_labels(trellis.target(), traj, trellis.order(), b)) / (2.0 * noise_var)).collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut plus = Array2::<f64>::zeros((nt, n));
    for (b, lw) in seqs.iter().zip(&logw) {
        let w = (lw - m).exp();
        z += w;
        for j in 0..nt {
            for i in 0..n {
                if b[j][i] == 1 {
                    plus[[j, i]] += w;
                }
            }
        }
    }
    Ok((plus / z, m + z.ln()))
}
