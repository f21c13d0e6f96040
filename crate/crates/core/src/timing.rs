//! Data-aided second-order PLL for per-track timing recovery.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::channel::{TimingTrajectory, TrackBits, SLEW_MAX};
use crate::error::{invalid, Error, Result};
use crate::interp::InterpOrder;
use crate::targets::{delayed_bit, MatrixTarget};

pub const DEFAULT_KP: f64 = 7e-4;
pub const DEFAULT_KI: f64 = 2.5e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PllState {
    /// Phase estimate in units of T.
    pub mu: f64,
    /// Frequency register, T per sample.
    pub freq: f64,
    pub kp: f64,
    pub ki: f64,
}

impl PllState {
    pub fn new(kp: f64, ki: f64) -> Result<Self> {
        let s = PllState { mu: 0.0, freq: 0.0, kp, ki };
        s.validate()?;
        Ok(s)
    }

    pub fn with_phase(self, mu: f64, freq: f64) -> Result<Self> {
        let s = PllState { mu, freq, ..self };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp.is_finite() && self.ki.is_finite() && self.kp > 0.0 && self.ki >= 0.0 && self.ki < self.kp) {
            return Err(invalid!("loop gains need kp > 0 and 0 <= ki < kp (kp={}, ki={})", self.kp, self.ki));
        }
        if !self.mu.is_finite() || !(self.freq.abs() <= SLEW_MAX) {
            return Err(invalid!("phase {} / frequency {} out of range", self.mu, self.freq));
        }
        Ok(())
    }
}

impl Default for PllState {
    fn default() -> Self {
        PllState { mu: 0.0, freq: 0.0, kp: DEFAULT_KP, ki: DEFAULT_KI }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mueller-Muller timing error `<y_k, d_{k-1}> - <y_{k-1}, d_k>`. Positive
/// when `y` lags the reference `d`.
pub fn ted_mm(y_k: &[f64], y_prev: &[f64], d_k: &[f64], d_prev: &[f64]) -> f64 {
    dot(y_k, d_prev) - dot(y_prev, d_k)
}

/// One loop update: `freq' = clamp(freq + ki e)`, `mu' = mu + freq' + kp e`.
pub fn pll_step(state: PllState, e: f64) -> Result<PllState> {
    if !e.is_finite() {
        return Err(invalid!("non-finite timing error"));
    }
    let freq = (state.freq + state.ki * e).clamp(-SLEW_MAX, SLEW_MAX);
    Ok(PllState { mu: state.mu + freq + state.kp * e, freq, ..state })
}

/// Sequential per-track loops driven by an equalized stream and the known
/// bits. Tracks without a loop stay at `tau = 0`.
///
/// The phase written to the trajectory is slew limited to `SLEW_MAX` per
/// sample so the estimate is always a valid [`TimingTrajectory`].
#[derive(Debug, Clone)]
pub struct TrajectoryEstimator {
    bits: TrackBits,
    target: MatrixTarget,
    order: InterpOrder,
    loops: Vec<Option<PllState>>,
    tau: Array2<f64>,
    freq_history: Array2<f64>,
    next: usize,
    prev_own: Vec<Vec<f64>>,
    prev_d: Vec<Vec<f64>>,
}

impl TrajectoryEstimator {
    pub fn new(bits: TrackBits, target: MatrixTarget, order: InterpOrder, loops: Vec<Option<PllState>>) -> Result<Self> {
        let nt = bits.n_tracks();
        if target.n_tracks() != nt || loops.len() != nt {
            return Err(invalid!("{} tracks of bits, {} in target, {} loops", nt, target.n_tracks(), loops.len()));
        }
        for l in loops.iter().flatten() {
            l.validate()?;
        }
        let n = bits.n_bits();
        let n_out = target.n_out();
        Ok(TrajectoryEstimator {
            tau: Array2::zeros((nt, n)),
            freq_history: Array2::zeros((nt, n)),
            next: 0,
            prev_own: vec![vec![0.0; n_out]; nt],
            prev_d: vec![vec![0.0; n_out]; nt],
            bits,
            target,
            order,
            loops,
        })
    }

    /// Samples processed so far.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn loops(&self) -> &[Option<PllState>] {
        &self.loops
    }

    pub fn set_target(&mut self, target: MatrixTarget) -> Result<()> {
        if target.n_tracks() != self.target.n_tracks() || target.n_out() != self.target.n_out() {
            return Err(invalid!("replacement target has different dimensions"));
        }
        self.target = target;
        Ok(())
    }

    /// Starts a new pass over the frame with loop phases `mu` (one per
    /// track; ignored for tracks without a loop), keeping each loop's
    /// frequency register.
    pub fn restart(&mut self, mu: &[f64]) {
        for (l, &m) in self.loops.iter_mut().zip(mu) {
            if let Some(l) = l {
                l.mu = m;
            }
        }
        self.next = 0;
        self.prev_own.iter_mut().for_each(|d| d.fill(0.0));
        self.prev_d.iter_mut().for_each(|d| d.fill(0.0));
    }

    /// Raw estimates; only the first [`Self::position`] samples are set.
    pub fn tau_raw(&self) -> &Array2<f64> {
        &self.tau
    }

    /// Track `j`'s share of the target-branch output at `k`, with the
    /// current sample delayed by `tau_k`.
    fn track_reference(&self, j: usize, k: usize, tau_k: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.target.n_out()];
        for (l, g) in self.target.taps().iter().enumerate() {
            if k < l {
                break;
            }
            let tau = if l == 0 { tau_k } else { self.tau[[j, k - l]] };
            let b = delayed_bit(&self.bits, j, (k - l) as i64, tau, self.order);
            for (o, v) in d.iter_mut().enumerate() {
                *v += g[[o, j]] * b;
            }
        }
        d
    }

    /// Runs the loops over the next `y.ncols()` samples of the frame.
    pub fn advance(&mut self, y: ArrayView2<f64>) -> Result<()> {
        if y.nrows() != self.target.n_out() {
            return Err(invalid!("equalized block has {} rows, expected {}", y.nrows(), self.target.n_out()));
        }
        if self.next + y.ncols() > self.bits.n_bits() {
            return Err(invalid!("block runs past the end of the frame"));
        }
        let nt = self.loops.len();
        let mut y_k = vec![0.0; y.nrows()];
        let mut own = vec![0.0; y.nrows()];
        for c in 0..y.ncols() {
            let k = self.next;
            for (o, v) in y_k.iter_mut().enumerate() {
                *v = y[[o, c]];
            }
            let refs: Vec<Vec<f64>> = (0..nt)
                .map(|j| {
                    let tau = match self.loops[j] {
                        Some(state) => state.mu + state.freq,
                        None => 0.0,
                    };
                    self.track_reference(j, k, tau)
                })
                .collect();
            for j in 0..nt {
                let Some(state) = self.loops[j] else {
                    continue;
                };
                // the other tracks' known contributions are removed before
                // correlating against this track's reference
                own.copy_from_slice(&y_k);
                for (jj, r) in refs.iter().enumerate() {
                    if jj != j {
                        own.iter_mut().zip(r).for_each(|(v, x)| *v -= x);
                    }
                }
                let e = ted_mm(&own, &self.prev_own[j], &refs[j], &self.prev_d[j]);
                let mut next = pll_step(state, e)?;
                next.mu = state.mu + (next.mu - state.mu).clamp(-SLEW_MAX, SLEW_MAX);
                self.tau[[j, k]] = next.mu;
                self.freq_history[[j, k]] = next.freq;
                self.loops[j] = Some(next);
                self.prev_own[j].copy_from_slice(&own);
            }
            self.prev_d = refs;
            self.next += 1;
        }
        Ok(())
    }

    /// Estimated trajectory. Samples not yet processed coast on each loop's
    /// frequency register.
    pub fn trajectory(&self) -> Result<TimingTrajectory> {
        let mut tau = self.tau.clone();
        for (j, l) in self.loops.iter().enumerate() {
            let Some(state) = l else {
                continue;
            };
            let mut mu = state.mu;
            for k in self.next..tau.ncols() {
                mu += state.freq;
                tau[[j, k]] = mu;
            }
        }
        TimingTrajectory::new(tau)
    }

    /// Frequency register after each processed sample.
    pub fn freq_history(&self) -> &Array2<f64> {
        &self.freq_history
    }
}

/// Result of [`estimate_trajectory`].
#[derive(Debug, Clone)]
pub struct PllRun {
    pub trajectory: TimingTrajectory,
    pub freq_history: Array2<f64>,
    pub final_states: Vec<Option<PllState>>,
}

/// Runs the data-aided loops over a whole equalized frame. `equalized[k]`
/// must be aligned with `sum_l G_l b~[k-l]`; `init[j] = None` holds track `j`
/// at zero offset.
pub fn estimate_trajectory(
    equalized: ArrayView2<f64>,
    bits: &TrackBits,
    target: &MatrixTarget,
    order: InterpOrder,
    init: &[Option<PllState>],
) -> Result<PllRun> {
    if equalized.ncols() != bits.n_bits() {
        return Err(invalid!("equalized frame has {} samples, bits have {}", equalized.ncols(), bits.n_bits()));
    }
    let mut est = TrajectoryEstimator::new(bits.clone(), target.clone(), order, init.to_vec())?;
    est.advance(equalized)?;
    Ok(PllRun { trajectory: est.trajectory()?, freq_history: est.freq_history.clone(), final_states: est.loops.clone() })
}

/// Least-squares line `tau ~ a + s k` through samples `[from, len)` of one
/// track.
pub fn fit_line(tau: &[f64], from: usize) -> Result<(f64, f64)> {
    if tau.len() < from + 2 {
        return Err(invalid!("need at least two samples to fit a line"));
    }
    let pts = &tau[from..];
    let n = pts.len() as f64;
    let mk = (from as f64 + (tau.len() - 1) as f64) / 2.0;
    let mt = pts.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, t) in pts.iter().enumerate() {
        let dk = (from + i) as f64 - mk;
        sxy += dk * (t - mt);
        sxx += dk * dk;
    }
    let s = sxy / sxx;
    Ok((mt - s * mk, s))
}

/// Writes `k,tau_1,...` rows.
pub fn write_trajectory_csv(traj: &TimingTrajectory, path: &Path) -> Result<()> {
    let mut out = String::from("k");
    for j in 0..traj.n_tracks() {
        let _ = write!(out, ",tau_{}", j + 1);
    }
    out.push('\n');
    for k in 0..traj.len() {
        let _ = write!(out, "{k}");
        for j in 0..traj.n_tracks() {
            let _ = write!(out, ",{}", traj.get(j, k));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_error_at_lock() {
        let d = [0.3, -1.2];
        let dp = [1.1, 0.4];
        assert_eq!(ted_mm(&d, &dp, &d, &dp), 0.0);
        assert_eq!(ted_mm(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn sinusoid_sign_follows_delay() {
        let w = 2.0 * std::f64::consts::PI * 0.15;
        for &delta in &[-0.2, -0.05, 0.05, 0.2] {
            let mut acc = 0.0;
            for k in 1..200 {
                let kf = k as f64;
                let y = [(w * (kf - delta)).sin()];
                let yp = [(w * (kf - 1.0 - delta)).sin()];
                let d = [(w * kf).sin()];
                let dp = [(w * (kf - 1.0)).sin()];
                acc += ted_mm(&y, &yp, &d, &dp);
            }
            assert_eq!(acc.signum(), delta.signum(), "delta {delta}");
        }
    }

    #[test]
    fn coast_and_first_order() {
        let s = PllState::new(0.01, 0.0).unwrap().with_phase(0.3, 2e-4).unwrap();
        let n = pll_step(s, 0.0).unwrap();
        assert_eq!(n.mu, 0.3 + 2e-4);
        assert_eq!(n.freq, 2e-4);
        let s = PllState::new(0.01, 0.0).unwrap();
        let n = pll_step(s, 1.0).unwrap();
        assert_eq!(n.mu, 0.01);
        assert!(pll_step(s, f64::NAN).is_err());
    }

    #[test]
    fn integrator_law_and_clamp() {
        let mut s = PllState::new(2e-3, 1e-5).unwrap();
        for _ in 0..50 {
            s = pll_step(s, 0.5).unwrap();
        }
        assert_abs_diff_eq!(s.freq, 50.0 * 1e-5 * 0.5, epsilon = 1e-15);
        for _ in 0..1000 {
            s = pll_step(s, 0.5).unwrap();
        }
        assert_eq!(s.freq, SLEW_MAX);
    }

    #[test]
    fn gain_ordering_enforced() {
        assert!(PllState::new(0.0, 0.0).is_err());
        assert!(PllState::new(1e-3, 1e-3).is_err());
        assert!(PllState::new(1e-3, -1e-6).is_err());
        assert!(PllState::default().with_phase(0.0, 2e-3).is_err());
    }

    #[test]
    fn preloaded_frequency_coasts_linearly() {
        // perfect reference: y equals d built with the true line, so e = 0
        let n = 400;
        let slope = 2e-4;
        let bits = crate::channel::generate_bits(1, n, 3).unwrap();
        let target = MatrixTarget::scalar(&[1.0, 0.5]).unwrap();
        let truth = crate::channel::linear_offset_trajectory(1, n, &[slope]).unwrap();
        let delayed = crate::targets::delay_bits(&bits, &truth, InterpOrder::Linear).unwrap();
        let y = crate::targets::target_branch(&target, delayed.view(), 0).unwrap();
        let init = PllState::default().with_phase(-slope, slope).unwrap();
        // the reference for sample k uses the predicted phase mu + freq
        let run = estimate_trajectory(y.view(), &bits, &target, InterpOrder::Linear, &[Some(init)]).unwrap();
        for k in 0..n {
            assert_abs_diff_eq!(run.trajectory.get(0, k), slope * k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn line_fit_exact() {
        let tau: Vec<f64> = (0..100).map(|k| 0.1 + 3e-4 * k as f64).collect();
        let (a, s) = fit_line(&tau, 40).unwrap();
        assert_abs_diff_eq!(a, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 3e-4, epsilon = 1e-15);
    }

    #[test]
    fn unprocessed_tail_coasts() {
        let bits = crate::channel::generate_bits(2, 50, 1).unwrap();
        let target = MatrixTarget::monic(vec![], 2).unwrap();
        let init = PllState::default().with_phase(0.0, 1e-4).unwrap();
        let est = TrajectoryEstimator::new(bits, target, InterpOrder::Linear, vec![None, Some(init)]).unwrap();
        let t = est.trajectory().unwrap();
        assert_eq!(t.get(0, 10), 0.0);
        assert_abs_diff_eq!(t.get(1, 10), 11e-4, epsilon = 1e-15);
    }
}
