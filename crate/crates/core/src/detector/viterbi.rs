//! Hard-decision sequence detection.
//!
//! Ties between equal-metric paths go to the lexicographically smaller bit
//! sequence, where bits are compared in trellis entry order (time first,
//! then track) and -1 sorts before +1. Survivors carry a rank reflecting that
//! order, so ties are resolved exactly without storing paths.

use ndarray::{Array2, ArrayView2};

use super::trellis::JointTrellis;
use crate::channel::TrackBits;
use crate::error::{invalid, Result};

fn check_block(trellis: &JointTrellis, y: &ArrayView2<f64>) -> Result<()> {
    if y.nrows() != trellis.n_out() || y.ncols() != trellis.len() {
        return Err(invalid!("equalized block is {}x{}, trellis expects {}x{}", y.nrows(), y.ncols(), trellis.n_out(), trellis.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("non-finite equalized sample"));
    }
    Ok(())
}

/// Maximum-likelihood joint sequence. Bits the trellis never decides (those
/// lost to timing slips or held in a mid-frame start state) are set to -1.
pub fn viterbi_joint(trellis: &JointTrellis, y: ArrayView2<f64>) -> Result<TrackBits> {
    let (decisions, _) = viterbi_decisions(trellis, y)?;
    let mut out = Array2::from_elem((trellis.n_tracks(), trellis.n_bits()), -1i8);
    for (e, b) in trellis.entries().zip(decisions) {
        out[[e.track, e.index]] = b;
    }
    TrackBits::new(out)
}

/// Decided bits in entry order, plus the winning path metric.
pub fn viterbi_decisions(trellis: &JointTrellis, y: ArrayView2<f64>) -> Result<(Vec<i8>, f64)> {
    check_block(trellis, &y)?;
    let y = y.to_owned();
    let n_states = trellis.n_states();
    let mut metric = vec![f64::INFINITY; n_states];
    let mut rank = vec![usize::MAX; n_states];
    let mut next_rank_order: Vec<usize> = Vec::new();
    for s in 0..n_states {
        if trellis.initial_allowed(s) {
            metric[s] = 0.0;
            next_rank_order.push(s);
        }
    }
    // all permitted start states share the same (empty) path; rank by index
    for (r, &s) in next_rank_order.iter().enumerate() {
        rank[s] = r;
    }

    let mut survivors: Vec<Vec<(u32, u32)>> = Vec::with_capacity(trellis.n_steps());
    let mut ext = vec![0u64; trellis.n_tracks()];
    let mut new_metric = vec![f64::INFINITY; n_states];
    let mut best: Vec<(u32, u32)> = vec![(u32::MAX, 0); n_states];

    for g in &trellis.groups {
        new_metric.fill(f64::INFINITY);
        best.fill((u32::MAX, 0));
        let n_inputs = 1usize << g.input_bits;
        for s in 0..n_states {
            let m = metric[s];
            if !m.is_finite() {
                continue;
            }
            for u in 0..n_inputs {
                let next = trellis.step(g, s, u, &mut ext);
                let cand = m + trellis.group_cost(g, &ext, &y);
                let cur = new_metric[next];
                let better = if cand < cur {
                    true
                } else if cand == cur {
                    let (bp, bu) = best[next];
                    (rank[s], u) < (rank[bp as usize], bu as usize)
                } else {
                    false
                };
                if better {
                    new_metric[next] = cand;
                    best[next] = (s as u32, u as u32);
                }
            }
        }
        let mut live: Vec<usize> = (0..n_states).filter(|&s| new_metric[s].is_finite()).collect();
        live.sort_by_key(|&s| {
            let (p, u) = best[s];
            (rank[p as usize], u)
        });
        rank.fill(usize::MAX);
        for (r, &s) in live.iter().enumerate() {
            rank[s] = r;
        }
        std::mem::swap(&mut metric, &mut new_metric);
        survivors.push(best.clone());
    }

    let mut end = usize::MAX;
    for s in 0..n_states {
        if !metric[s].is_finite() {
            continue;
        }
        if end == usize::MAX || metric[s] < metric[end] || (metric[s] == metric[end] && rank[s] < rank[end]) {
            end = s;
        }
    }
    if end == usize::MAX {
        return Err(invalid!("no surviving trellis path"));
    }
    let final_metric = metric[end];

    let mut inputs = vec![0u32; trellis.n_steps()];
    let mut s = end;
    for t in (0..trellis.n_steps()).rev() {
        let (p, u) = survivors[t][s];
        inputs[t] = u;
        s = p as usize;
    }
    let mut bits = Vec::new();
    for (g, &u) in trellis.groups.iter().zip(&inputs) {
        let a = g.input_bits;
        for q in 0..a {
            bits.push(if (u >> (a - 1 - q)) & 1 == 1 { 1 } else { -1 });
        }
    }
    Ok((bits, final_metric))
}

/// Two-state Viterbi for one track and the target `[1, g1]`:
/// `d_k = b_k + g1 b_{k-1}` with `b_{-1} = 0`.
pub fn viterbi_single(y: &[f64], g1: f64) -> Result<Vec<i8>> {
    if !g1.is_finite() {
        return Err(invalid!("non-finite target tap"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("non-finite equalized sample"));
    }
    let n = y.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let bit = |s: usize| if s == 1 { 1.0 } else { -1.0 };
    // state = current bit (0 for -1, 1 for +1)
    let mut metric = [0.0f64; 2];
    let mut rank = [0usize, 1];
    for (s, m) in metric.iter_mut().enumerate() {
        let e = y[0] - bit(s);
        *m = e * e;
    }
    let mut back = vec![[0u8; 2]; n];
    for k in 1..n {
        let mut nm = [f64::INFINITY; 2];
        let mut pred = [0usize; 2];
        for ns in 0..2 {
            for ps in 0..2 {
                let e = y[k] - bit(ns) - g1 * bit(ps);
                let cand = metric[ps] + e * e;
                if cand < nm[ns] || (cand == nm[ns] && rank[ps] < rank[pred[ns]]) {
                    nm[ns] = cand;
                    pred[ns] = ps;
                }
            }
        }
        back[k] = [pred[0] as u8, pred[1] as u8];
        rank = if (rank[pred[0]], 0) < (rank[pred[1]], 1) { [0, 1] } else { [1, 0] };
        metric = nm;
    }
    let mut s = if metric[0] < metric[1] || (metric[0] == metric[1] && rank[0] < rank[1]) { 0 } else { 1 };
    let mut out = vec![0i8; n];
    for k in (0..n).rev() {
        out[k] = if s == 1 { 1 } else { -1 };
        s = back[k][s] as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TimingTrajectory;
    use crate::interp::InterpOrder;
    use crate::targets::MatrixTarget;
    use ndarray::array;

    #[test]
    fn sign_detector_when_g1_zero() {
        let y = [0.3, -0.2, 0.0, 1.5, -0.0];
        assert_eq!(viterbi_single(&y, 0.0).unwrap(), vec![1, -1, -1, 1, -1]);
    }

    #[test]
    fn single_noiseless_recovers() {
        let bits = [1i8, -1, -1, 1, 1, 1, -1, 1];
        let g1 = 0.6;
        let y: Vec<f64> = (0..bits.len()).map(|k| bits[k] as f64 + if k > 0 { g1 * bits[k - 1] as f64 } else { 0.0 }).collect();
        assert_eq!(viterbi_single(&y, g1).unwrap(), bits);
    }

    #[test]
    fn single_rejects_nan() {
        assert!(viterbi_single(&[f64::NAN], 0.1).is_err());
        assert!(viterbi_single(&[0.0], f64::NAN).is_err());
        assert!(viterbi_single(&[], 0.3).unwrap().is_empty());
    }

    #[test]
    fn joint_noiseless_recovers_synchronous() {
        let target = MatrixTarget::monic(vec![array![[0.5, 0.2], [0.1, 0.4]]], 2).unwrap();
        let bits = crate::channel::generate_bits(2, 40, 4).unwrap();
        let traj = TimingTrajectory::zeros(2, 40);
        let delayed = bits.to_f64();
        let y = crate::targets::target_branch(&target, delayed.view(), 0).unwrap();
        let trellis = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let est = viterbi_joint(&trellis, y.view()).unwrap();
        assert_eq!(est, bits);
    }

    #[test]
    fn joint_dimension_checked() {
        let target = MatrixTarget::monic(vec![array![[0.5, 0.2], [0.1, 0.4]]], 2).unwrap();
        let traj = TimingTrajectory::zeros(2, 10);
        let trellis = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let y = Array2::zeros((2, 9));
        assert!(viterbi_joint(&trellis, y.view()).is_err());
    }
}
