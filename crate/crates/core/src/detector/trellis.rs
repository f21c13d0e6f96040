//! Joint trellis over the time-varying target.
//!
//! The expected equalized sample at time `k` is
//! `d_k = sum_l G_l b~[k-l]`, where `b~_j[m] = sum_i c_i(mu_j(m)) b_j[m - n_j(m) - i + off]`
//! is track `j` passed through its fractional-delay filter. Every bit that
//! influences `d_k` lies in the window `[e_j(k) - M, e_j(k)]` with
//! `e_j(k) = k - n_j(k) + off` and `M = L + P - 1`, so a state holding the
//! `M` most recent bits of each track suffices. The one exception is a
//! delay that falls back across an integer inside the target span; such a
//! tap is evaluated at `tau_j(k)` instead (see [`label_delay`]).
//!
//! Timing offsets drift, so a track's newest bit index does not advance by
//! exactly one every sample. Samples are therefore merged into groups: each
//! group starts from a state, brings in the new bits of every track, and all
//! its labels are computable from the state plus those new bits. Bits outside
//! `[0, n_bits)` read as zero and are never enumerated.

use ndarray::Array2;

use crate::channel::TimingTrajectory;
use crate::error::{invalid, Error, Result};
use crate::interp::{fill_taps, split_delay, InterpOrder};
use crate::targets::MatrixTarget;

/// Delay used for tap `l` of the label at sample `k` on track `j`: the
/// sample's own `tau_j(k - l)`, unless that reaches a bit older than the
/// window of `k`, in which case `tau_j(k)`.
pub fn label_delay(traj: &TimingTrajectory, j: usize, k: usize, l: usize, target_len: usize) -> f64 {
    let own = traj.get(j, k - l);
    let (n_m, _) = split_delay(own);
    let (n_k, _) = split_delay(traj.get(j, k));
    if n_m - n_k > (target_len - 1 - l) as i64 {
        traj.get(j, k)
    } else {
        own
    }
}

/// Largest joint state space accepted.
pub const MAX_STATES: usize = 4096;

/// Largest number of fresh bits a single trellis group may enumerate.
const MAX_GROUP_BITS: usize = 12;

/// A bit decided by the trellis: it enters the state at `sample`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub track: usize,
    pub index: usize,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Group {
    /// First sample, relative to the trellis start.
    pub first: usize,
    pub len: usize,
    /// Number of enumerated input bits.
    pub input_bits: usize,
    /// Per-track advance of the newest bit index, forced bits included.
    pub advance: Vec<u32>,
    /// Fresh bits in entry order; the first one is the input MSB.
    pub entries: Vec<Entry>,
    /// Position of each entry in its track's extended register.
    pub entry_shift: Vec<u32>,
    /// `[sample][track]` right shift that aligns the extended register with
    /// that sample's window.
    pub sample_shift: Vec<Vec<u32>>,
}

/// Per-sample label tables.
#[derive(Debug, Clone)]
pub(crate) struct SampleTable {
    /// `[track][window * n_out + o]` contribution of track `j` to `d_k`.
    pub contrib: Vec<Vec<f64>>,
    /// `[track][window * L + l]` delayed bit `b~_j[k-l]` for that window.
    pub delayed: Vec<Vec<f64>>,
}

/// Joint trellis for a block of samples `[start, start + len)`.
#[derive(Debug, Clone)]
pub struct JointTrellis {
    n_tracks: usize,
    n_out: usize,
    target_len: usize,
    memory: usize,
    order: InterpOrder,
    n_bits: usize,
    start: usize,
    len: usize,
    /// Newest bit index held by the initial state, per track.
    init_newest: Vec<i64>,
    pub(crate) groups: Vec<Group>,
    pub(crate) tables: Vec<SampleTable>,
    target: MatrixTarget,
}

impl JointTrellis {
    /// Trellis over a whole frame: samples and bits `0..traj.len()`.
    pub fn new(target: &MatrixTarget, traj: &TimingTrajectory, order: InterpOrder) -> Result<Self> {
        Self::for_block(target, traj, order, 0, traj.len(), traj.len())
    }

    /// Trellis over samples `[start, end)` of a frame whose tracks hold
    /// `n_bits` bits. A block that starts mid-frame begins from an unknown
    /// state; the bits it holds are not decided here.
    pub fn for_block(
        target: &MatrixTarget,
        traj: &TimingTrajectory,
        order: InterpOrder,
        start: usize,
        end: usize,
        n_bits: usize,
    ) -> Result<Self> {
        if !target.is_monic() {
            return Err(invalid!("trellis requires a monic target"));
        }
        let n_tracks = target.n_tracks();
        if traj.n_tracks() != n_tracks {
            return Err(invalid!("trajectory has {} tracks, target has {n_tracks}", traj.n_tracks()));
        }
        if start >= end || end > traj.len() {
            return Err(invalid!("bad sample range {start}..{end} for {} samples", traj.len()));
        }
        let memory = target.len() + order.order() - 1;
        let state_bits = n_tracks * memory;
        if state_bits >= usize::BITS as usize - 1 || (1usize << state_bits) > MAX_STATES {
            let states = 1usize.checked_shl(state_bits as u32).unwrap_or(usize::MAX);
            return Err(Error::TrellisTooLarge { states, limit: MAX_STATES });
        }
        for j in 0..n_tracks {
            let t = traj.track(j);
            for k in start.max(1)..end {
                if (t[k] - t[k - 1]).abs() >= 1.0 {
                    return Err(invalid!("trajectory of track {j} jumps by a full sample at {k}"));
                }
            }
        }

        let off = order.offset() as i64;
        let newest = |j: usize, k: usize| -> i64 {
            let (n, _) = split_delay(traj.get(j, k));
            k as i64 - n + off
        };
        let init_newest: Vec<i64> = (0..n_tracks).map(|j| if start == 0 { -1 } else { newest(j, start) - 1 }).collect();

        let mut groups: Vec<Group> = Vec::new();
        let mut state_newest = init_newest.clone();
        // (group start newest, per-sample newest lists) of the open group
        let mut open: Option<(Vec<i64>, usize, Vec<Vec<i64>>)> = None;
        let real = |idx: i64| idx >= 0 && idx < n_bits as i64;

        let close = |pre: Vec<i64>, first: usize, per_sample: Vec<Vec<i64>>, groups: &mut Vec<Group>| -> Result<Vec<i64>> {
            let len = per_sample.len();
            let post: Vec<i64> = (0..n_tracks).map(|j| per_sample.iter().map(|e| e[j]).fold(pre[j], i64::max)).collect();
            let mut entries = Vec::new();
            let mut entry_shift = Vec::new();
            let mut seen = pre.clone();
            for (s, e) in per_sample.iter().enumerate() {
                for j in 0..n_tracks {
                    while seen[j] < e[j] {
                        seen[j] += 1;
                        if real(seen[j]) {
                            entries.push(Entry { track: j, index: seen[j] as usize, sample: start + first + s });
                            entry_shift.push((post[j] - seen[j]) as u32);
                        }
                    }
                }
            }
            if entries.len() > MAX_GROUP_BITS {
                return Err(invalid!("{} fresh bits in one trellis step; trajectory changes too fast", entries.len()));
            }
            let sample_shift = per_sample.iter().map(|e| (0..n_tracks).map(|j| (post[j] - e[j].max(pre[j])) as u32).collect()).collect();
            groups.push(Group {
                first,
                len,
                input_bits: entries.len(),
                advance: (0..n_tracks).map(|j| (post[j] - pre[j]) as u32).collect(),
                entries,
                entry_shift,
                sample_shift,
            });
            Ok(post)
        };

        for k in start..end {
            let e: Vec<i64> = (0..n_tracks).map(|j| newest(j, k)).collect();
            // a sample can open a new group only if, for every track, its
            // window's real bits are reachable from the current state
            let held: Vec<i64> = match &open {
                Some((pre, _, per_sample)) => (0..n_tracks).map(|j| per_sample.iter().map(|x| x[j]).fold(pre[j], i64::max)).collect(),
                None => state_newest.clone(),
            };
            let fresh_ok = (0..n_tracks).all(|j| {
                let lo = (e[j] - memory as i64).max(0);
                let hi = e[j].min(n_bits as i64 - 1);
                lo > hi || lo > held[j] - memory as i64
            });
            if fresh_ok || open.is_none() {
                if let Some((pre, first, per_sample)) = open.take() {
                    state_newest = close(pre, first, per_sample, &mut groups)?;
                }
                if !fresh_ok {
                    return Err(invalid!("trellis window not reachable at sample {k}"));
                }
                open = Some((state_newest.clone(), k - start, vec![e]));
            } else if let Some((_, _, per_sample)) = open.as_mut() {
                per_sample.push(e);
            }
        }
        if let Some((pre, first, per_sample)) = open.take() {
            close(pre, first, per_sample, &mut groups)?;
        }

        let n_out = target.n_out();
        let target_len = target.len();
        let window_count = 1usize << (memory + 1);
        let mut taps = [0.0; 4];
        let tables = (start..end)
            .map(|k| {
                let mut contrib = Vec::with_capacity(n_tracks);
                let mut delayed_tab = Vec::with_capacity(n_tracks);
                for j in 0..n_tracks {
                    let e = newest(j, k);
                    let mut c = vec![0.0; window_count * n_out];
                    let mut dtab = vec![0.0; window_count * target_len];
                    for w in 0..window_count {
                        for l in 0..target_len {
                            if k < l {
                                continue;
                            }
                            let m = k - l;
                            let (n, mu) = split_delay(label_delay(traj, j, k, l, target_len));
                            let taps = &mut taps[..order.len()];
                            fill_taps(mu, order, taps);
                            let mut v = 0.0;
                            for (i, ci) in taps.iter().enumerate() {
                                let idx = m as i64 - n - i as i64 + off;
                                if !real(idx) {
                                    continue;
                                }
                                let pos = e - idx;
                                debug_assert!((0..=memory as i64).contains(&pos));
                                let bit = if (w >> pos) & 1 == 1 { 1.0 } else { -1.0 };
                                v += ci * bit;
                            }
                            dtab[w * target_len + l] = v;
                            let g = target.tap(l);
                            for o in 0..n_out {
                                c[w * n_out + o] += g[[o, j]] * v;
                            }
                        }
                    }
                    contrib.push(c);
                    delayed_tab.push(dtab);
                }
                SampleTable { contrib, delayed: delayed_tab }
            })
            .collect();

        Ok(JointTrellis {
            n_tracks,
            n_out,
            target_len,
            memory,
            order,
            n_bits,
            start,
            len: end - start,
            init_newest,
            groups,
            tables,
            target: target.clone(),
        })
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Bits of history per track, `M = L + P - 1`.
    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn n_states(&self) -> usize {
        1 << (self.n_tracks * self.memory)
    }

    pub fn order(&self) -> InterpOrder {
        self.order
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// Number of samples covered.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn target(&self) -> &MatrixTarget {
        &self.target
    }

    pub(crate) fn target_len(&self) -> usize {
        self.target_len
    }

    pub(crate) fn n_steps(&self) -> usize {
        self.groups.len()
    }

    /// Every bit decided by this trellis, in entry order.
    pub fn entries(&self) -> impl Iterator<Item = &Entry> + '_ {
        self.groups.iter().flat_map(|g| g.entries.iter())
    }

    /// Expected equalized sample at absolute time `sample` for per-track
    /// windows `windows[j]` (bit `p` set means bit `e_j - p` is +1).
    pub fn label(&self, sample: usize, windows: &[usize]) -> Vec<f64> {
        let t = &self.tables[sample - self.start];
        let mut d = vec![0.0; self.n_out];
        for (j, &w) in windows.iter().enumerate() {
            for (o, v) in d.iter_mut().enumerate() {
                *v += t.contrib[j][w * self.n_out + o];
            }
        }
        d
    }

    /// Combined target-and-interpolator taps seen at sample `k` when the
    /// trajectory is held at its value `tau_k`: `L + P` taps acting on
    /// `b[e_j(k)], b[e_j(k) - 1], ...`.
    pub fn effective_taps(&self, traj: &TimingTrajectory, k: usize) -> Vec<Array2<f64>> {
        let p = self.order.order();
        let mut out = vec![Array2::zeros((self.n_out, self.n_tracks)); self.target_len + p];
        let mut taps = [0.0; 4];
        for j in 0..self.n_tracks {
            let (_, mu) = split_delay(traj.get(j, k));
            let taps = &mut taps[..self.order.len()];
            fill_taps(mu, self.order, taps);
            for (l, g) in self.target.taps().iter().enumerate() {
                for (i, c) in taps.iter().enumerate() {
                    for o in 0..self.n_out {
                        out[l + i][[o, j]] += g[[o, j]] * c;
                    }
                }
            }
        }
        out
    }

    /// Mask of state bits whose index is inside the frame; states with a bit
    /// set outside this mask are unreachable.
    pub(crate) fn initial_allowed(&self, state: usize) -> bool {
        let m = self.memory;
        (0..self.n_tracks).all(|j| {
            let pat = (state >> (j * m)) & ((1 << m) - 1);
            (0..m).all(|p| {
                let idx = self.init_newest[j] - p as i64;
                let inside = idx >= 0 && idx < self.n_bits as i64;
                inside || (pat >> p) & 1 == 0
            })
        })
    }

    /// Applies input `u` of group `g` to `state`. Writes each track's extended
    /// register into `ext` and returns the next state.
    #[inline]
    pub(crate) fn step(&self, g: &Group, state: usize, u: usize, ext: &mut [u64]) -> usize {
        let m = self.memory;
        let mask = (1u64 << m) - 1;
        let mut next = 0usize;
        for j in 0..self.n_tracks {
            let pat = ((state >> (j * m)) as u64) & mask;
            ext[j] = pat << g.advance[j];
        }
        let a = g.input_bits;
        for (q, (entry, shift)) in g.entries.iter().zip(&g.entry_shift).enumerate() {
            if (u >> (a - 1 - q)) & 1 == 1 {
                ext[entry.track] |= 1u64 << shift;
            }
        }
        for j in 0..self.n_tracks {
            next |= ((ext[j] & mask) as usize) << (j * m);
        }
        next
    }

    /// Window of track `j` at the `s`-th sample of group `g`.
    #[inline]
    pub(crate) fn window(&self, g: &Group, s: usize, ext: &[u64], j: usize) -> usize {
        let wmask = (1u64 << (self.memory + 1)) - 1;
        ((ext[j] >> g.sample_shift[s][j]) & wmask) as usize
    }

    /// Squared-error cost of input `u` from `state` over group `g`, using the
    /// equalized block `y` (`n_out x len`, block-relative).
    #[inline]
    pub(crate) fn group_cost(&self, g: &Group, ext: &[u64], y: &Array2<f64>) -> f64 {
        let mut cost = 0.0;
        for s in 0..g.len {
            let k = g.first + s;
            let t = &self.tables[k];
            for o in 0..self.n_out {
                let mut d = 0.0;
                for j in 0..self.n_tracks {
                    let w = self.window(g, s, ext, j);
                    d += t.contrib[j][w * self.n_out + o];
                }
                let e = y[[o, k]] - d;
                cost += e * e;
            }
        }
        cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::linear_offset_trajectory;
    use ndarray::array;

    fn target2(l: usize) -> MatrixTarget {
        let trailing = (1..l).map(|i| array![[0.5 / i as f64, 0.2], [-0.1, 0.4 / i as f64]]).collect();
        MatrixTarget::monic(trailing, 2).unwrap()
    }

    #[test]
    fn state_count_formula() {
        let traj = TimingTrajectory::zeros(2, 20);
        let t = JointTrellis::new(&target2(2), &traj, InterpOrder::Linear).unwrap();
        assert_eq!(t.memory(), 2);
        assert_eq!(t.n_states(), 16);
        let t = JointTrellis::new(&target2(3), &traj, InterpOrder::Linear).unwrap();
        assert_eq!(t.n_states(), 64);
    }

    #[test]
    fn too_large() {
        let traj = TimingTrajectory::zeros(2, 20);
        match JointTrellis::new(&target2(5), &traj, InterpOrder::Cubic) {
            Err(Error::TrellisTooLarge { states, .. }) => assert_eq!(states, 1 << 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synchronous_effective_taps_equal_target() {
        let traj = TimingTrajectory::zeros(2, 20);
        let target = target2(2);
        let t = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let eff = t.effective_taps(&traj, 5);
        assert_eq!(eff.len(), 3);
        assert_eq!(&eff[0], target.tap(0));
        assert_eq!(&eff[1], target.tap(1));
        assert!(eff[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_sample_offset_averages_columns() {
        let mut tau = Array2::zeros((2, 20));
        tau.row_mut(1).fill(0.5);
        let traj = TimingTrajectory::new(tau).unwrap();
        let target = target2(2);
        let t = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let eff = t.effective_taps(&traj, 5);
        for o in 0..2 {
            assert_eq!(eff[0][[o, 1]], 0.5 * target.tap(0)[[o, 1]]);
            assert_eq!(eff[1][[o, 1]], 0.5 * (target.tap(0)[[o, 1]] + target.tap(1)[[o, 1]]));
            assert_eq!(eff[2][[o, 1]], 0.5 * target.tap(1)[[o, 1]]);
            // synchronous track untouched
            assert_eq!(eff[1][[o, 0]], target.tap(1)[[o, 0]]);
        }
    }

    #[test]
    fn drifting_trajectory_groups_cover_every_bit_once() {
        let n = 6000;
        let traj = linear_offset_trajectory(2, n, &[0.0, 5e-4]).unwrap();
        let t = JointTrellis::new(&target2(3), &traj, InterpOrder::Linear).unwrap();
        let mut seen = vec![vec![0u8; n]; 2];
        for e in t.entries() {
            seen[e.track][e.index] += 1;
        }
        assert!(seen[0].iter().all(|&c| c == 1));
        // tau reaches 2.9995: track 2 slips twice over the frame
        let decided = seen[1].iter().filter(|&&c| c == 1).count();
        assert_eq!(decided, n - 2);
        assert!(seen[1].iter().all(|&c| c <= 1));
        assert!(t.groups.iter().any(|g| g.len == 2));
    }

    #[test]
    fn rejects_non_monic() {
        let target = MatrixTarget::new(vec![array![[2.0]]]).unwrap();
        let traj = TimingTrajectory::zeros(1, 10);
        assert!(JointTrellis::new(&target, &traj, InterpOrder::Linear).is_err());
    }
}
