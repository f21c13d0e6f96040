//! Multitrack readback synthesis.
//!
//! Each reader sees every track through a Gaussian down-track pulse scaled by
//! a cross-track gain that halves at `w50_cross` track pitches. Written bits
//! are fractionally delayed per track (writer frequency offset), transitions
//! carry first-order position jitter, white Gaussian noise is added, and an
//! optional quadratic term models readback asymmetry.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::interp::{delay_sequence, InterpOrder};

/// Largest allowed per-sample change of a timing offset, in units of T.
pub const SLEW_MAX: f64 = 1e-3;

/// Interpolation order used to delay written bits in the channel.
pub const CHANNEL_INTERP: InterpOrder = InterpOrder::Cubic;

/// Bipolar written bits, one row per track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackBits(Array2<i8>);

impl TrackBits {
    pub fn new(bits: Array2<i8>) -> Result<Self> {
        if bits.nrows() == 0 || bits.ncols() == 0 {
            return Err(invalid!("track bits must be non-empty, got {:?}", bits.dim()));
        }
        if let Some(v) = bits.iter().find(|&&b| b != 1 && b != -1) {
            return Err(invalid!("track bits must be +1 or -1, found {v}"));
        }
        Ok(TrackBits(bits))
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid!("ragged track rows"));
        }
        let flat: Vec<i8> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), n), flat).map_err(|e| invalid!("bad bit matrix: {e}"))?;
        TrackBits::new(arr)
    }

    pub fn n_tracks(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_bits(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<i8> {
        &self.0
    }

    pub fn track(&self, j: usize) -> ArrayView1<'_, i8> {
        self.0.row(j)
    }

    pub fn get(&self, track: usize, idx: usize) -> i8 {
        self.0[[track, idx]]
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }

    pub fn track_f64(&self, j: usize) -> Vec<f64> {
        self.0.row(j).iter().map(|&b| f64::from(b)).collect()
    }

    /// Keeps only the listed tracks, in the listed order.
    pub fn select_tracks(&self, tracks: &[usize]) -> Result<TrackBits> {
        let rows: Vec<Vec<i8>> = tracks
            .iter()
            .map(|&j| if j < self.n_tracks() { Ok(self.0.row(j).to_vec()) } else { Err(invalid!("track {j} out of range")) })
            .collect::<Result<_>>()?;
        TrackBits::from_rows(&rows)
    }

    /// Bits with every sign flipped.
    pub fn negated(&self) -> TrackBits {
        TrackBits(self.0.mapv(|b| -b))
    }
}

/// i.i.d. equiprobable bits, deterministic for a given seed.
pub fn generate_bits(n_tracks: usize, n_bits: usize, seed: u64) -> Result<TrackBits> {
    if n_tracks == 0 || n_bits == 0 {
        return Err(invalid!("need at least one track and one bit, got {n_tracks}x{n_bits}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arr = Array2::from_shape_simple_fn((n_tracks, n_bits), || if rng.random::<bool>() { 1 } else { -1 });
    Ok(TrackBits(arr))
}

/// Per-track timing offsets in units of T, one row per track.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingTrajectory(Array2<f64>);

impl TimingTrajectory {
    /// Validates finiteness and the slew bound.
    pub fn new(tau: Array2<f64>) -> Result<Self> {
        if let Some(t) = tau.iter().find(|t| !t.is_finite()) {
            return Err(invalid!("non-finite timing offset {t}"));
        }
        for (j, row) in tau.rows().into_iter().enumerate() {
            for k in 1..row.len() {
                let step = (row[k] - row[k - 1]).abs();
                if step > SLEW_MAX * (1.0 + 1e-9) {
                    return Err(invalid!("timing offset of track {j} changes by {step:e} at sample {k}, above slew limit {SLEW_MAX:e}"));
                }
            }
        }
        Ok(TimingTrajectory(tau))
    }

    pub fn zeros(n_tracks: usize, n_bits: usize) -> Self {
        TimingTrajectory(Array2::zeros((n_tracks, n_bits)))
    }

    pub fn n_tracks(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn track(&self, j: usize) -> &[f64] {
        self.0.row(j).to_slice().expect("trajectory rows are contiguous")
    }

    pub fn get(&self, track: usize, k: usize) -> f64 {
        self.0[[track, k]]
    }

    /// Trajectory restricted to the listed tracks.
    pub fn select_tracks(&self, tracks: &[usize]) -> Result<TimingTrajectory> {
        let mut out = Array2::zeros((tracks.len(), self.len()));
        for (r, &j) in tracks.iter().enumerate() {
            if j >= self.n_tracks() {
                return Err(invalid!("track {j} out of range"));
            }
            out.row_mut(r).assign(&self.0.row(j));
        }
        Ok(TimingTrajectory(out))
    }

    /// Samples `[start, end)` of every track.
    pub fn window(&self, start: usize, end: usize) -> TimingTrajectory {
        TimingTrajectory(self.0.slice(ndarray::s![.., start..end]).to_owned())
    }
}

/// `tau[j][k] = slopes[j] * k`.
pub fn linear_offset_trajectory(n_tracks: usize, n_bits: usize, slopes: &[f64]) -> Result<TimingTrajectory> {
    if slopes.len() != n_tracks {
        return Err(invalid!("{} slopes for {n_tracks} tracks", slopes.len()));
    }
    if let Some(s) = slopes.iter().find(|s| !(s.abs() <= SLEW_MAX)) {
        return Err(invalid!("slope {s:e} exceeds slew limit {SLEW_MAX:e}"));
    }
    let tau = Array2::from_shape_fn((n_tracks, n_bits), |(j, k)| slopes[j] * k as f64);
    Ok(TimingTrajectory(tau))
}

/// Cross-track layout and pulse shape. Positions are in track pitches,
/// `sigma_p` and `pulse_halflen` in bit periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    pub reader_positions: Vec<f64>,
    pub track_positions: Vec<f64>,
    pub w50_cross: f64,
    pub sigma_p: f64,
    pub pulse_halflen: usize,
}

impl ChannelGeometry {
    /// Two tracks at 0 and 1 TP with two readers placed symmetrically about
    /// their midpoint, `spacing` TP apart.
    pub fn two_track(spacing: f64) -> Self {
        ChannelGeometry {
            reader_positions: vec![0.5 - spacing / 2.0, 0.5 + spacing / 2.0],
            track_positions: vec![0.0, 1.0],
            w50_cross: 0.7,
            sigma_p: 0.8,
            pulse_halflen: 6,
        }
    }

    pub fn n_readers(&self) -> usize {
        self.reader_positions.len()
    }

    pub fn n_tracks(&self) -> usize {
        self.track_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tracks() == 0 || self.n_readers() < self.n_tracks() {
            return Err(invalid!(
                "need at least as many readers as tracks, got {} readers for {} tracks",
                self.n_readers(),
                self.n_tracks()
            ));
        }
        if !(self.sigma_p > 0.0) {
            return Err(invalid!("sigma_p must be positive, got {}", self.sigma_p));
        }
        if (self.pulse_halflen as f64) < 3.0 * self.sigma_p {
            return Err(invalid!("pulse half-length {} shorter than 3*sigma_p = {}", self.pulse_halflen, 3.0 * self.sigma_p));
        }
        if !(self.w50_cross > 0.0) {
            return Err(invalid!("w50_cross must be positive, got {}", self.w50_cross));
        }
        Ok(())
    }
}

/// Noise and nonlinearity settings for one simulated frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_awgn: f64,
    pub sigma_jitter: f64,
    pub gamma_asym: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig { sigma_awgn: 0.0, sigma_jitter: 0.0, gamma_asym: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_awgn >= 0.0) || !(self.sigma_jitter >= 0.0) {
            return Err(invalid!("noise deviations must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.gamma_asym) {
            return Err(invalid!("gamma_asym {} outside [0, 0.5]", self.gamma_asym));
        }
        Ok(())
    }
}

/// Reader-by-track pulse responses `h_ij[n] = a_ij * p[n]`, `n` in `[-H, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrixFir {
    gains: Array2<f64>,
    pulse: Vec<f64>,
    halflen: usize,
    sigma_p: f64,
}

impl ChannelMatrixFir {
    pub fn n_readers(&self) -> usize {
        self.gains.nrows()
    }

    pub fn n_tracks(&self) -> usize {
        self.gains.ncols()
    }

    pub fn halflen(&self) -> usize {
        self.halflen
    }

    /// Cross-track gain `a_ij`.
    pub fn gain(&self, reader: usize, track: usize) -> f64 {
        self.gains[[reader, track]]
    }

    /// Unit-peak pulse `p[n]` stored for `n = -H..=H`.
    pub fn pulse(&self) -> &[f64] {
        &self.pulse
    }

    /// Full response `h_ij[n]`, index 0 corresponding to `n = -H`.
    pub fn response(&self, reader: usize, track: usize) -> Vec<f64> {
        let a = self.gain(reader, track);
        self.pulse.iter().map(|p| a * p).collect()
    }

    /// Truncated Gaussian pulse at a fractional offset.
    fn pulse_at(&self, x: f64) -> f64 {
        if x.abs() > self.halflen as f64 {
            0.0
        } else {
            (-x * x / (2.0 * self.sigma_p * self.sigma_p)).exp()
        }
    }

    /// First difference `p(x) - p(x - 1)`, the jitter response of a transition.
    fn dipulse_at(&self, x: f64) -> f64 {
        self.pulse_at(x) - self.pulse_at(x - 1.0)
    }
}

pub fn build_channel(geometry: &ChannelGeometry) -> Result<ChannelMatrixFir> {
    geometry.validate()?;
    let gains = Array2::from_shape_fn((geometry.n_readers(), geometry.n_tracks()), |(i, j)| {
        let d = (geometry.reader_positions[i] - geometry.track_positions[j]).abs();
        2f64.powf(-(d / geometry.w50_cross).powi(2))
    });
    let h = geometry.pulse_halflen as i64;
    let s2 = 2.0 * geometry.sigma_p * geometry.sigma_p;
    let pulse = (-h..=h).map(|n| (-(n * n) as f64 / s2).exp()).collect();
    Ok(ChannelMatrixFir { gains, pulse, halflen: geometry.pulse_halflen, sigma_p: geometry.sigma_p })
}

/// Reader-by-sample matrix of ADC samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadbackFrame(Array2<f64>);

impl ReadbackFrame {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("readback contains non-finite samples"));
        }
        Ok(ReadbackFrame(samples))
    }

    pub fn n_readers(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Noiseless linear readback for real-valued (possibly superposed) track
/// inputs: `r_i = sum_j h_ij * delay(x_j, tau_j)`, "same"-mode convolution.
pub fn noiseless_readback(inputs: ArrayView2<'_, f64>, traj: &TimingTrajectory, channel: &ChannelMatrixFir) -> Result<Array2<f64>> {
    let (n_tracks, n) = inputs.dim();
    if n_tracks != channel.n_tracks() || traj.n_tracks() != n_tracks || traj.len() != n {
        return Err(invalid!(
            "dimension mismatch: inputs {:?}, trajectory {}x{}, channel has {} tracks",
            inputs.dim(),
            traj.n_tracks(),
            traj.len(),
            channel.n_tracks()
        ));
    }
    let h = channel.halflen as i64;
    let mut out = Array2::zeros((channel.n_readers(), n));
    for j in 0..n_tracks {
        let x: Vec<f64> = inputs.row(j).to_vec();
        let delayed = delay_sequence(&x, traj.track(j), CHANNEL_INTERP)?;
        // shared pulse convolution, then per-reader gain
        let mut conv = vec![0.0; n];
        for (k, c) in conv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, p) in channel.pulse.iter().enumerate() {
                let idx = k as i64 - (t as i64 - h);
                if idx >= 0 && (idx as usize) < n {
                    acc += p * delayed[idx as usize];
                }
            }
            *c = acc;
        }
        for i in 0..channel.n_readers() {
            let a = channel.gains[[i, j]];
            let mut row = out.row_mut(i);
            for (o, c) in row.iter_mut().zip(&conv) {
                *o += a * c;
            }
        }
    }
    Ok(out)
}

/// Full readback synthesis: delayed-bit convolution, transition jitter,
/// AWGN and quadratic asymmetry, in that order.
pub fn simulate_readback(
    bits: &TrackBits,
    traj: &TimingTrajectory,
    channel: &ChannelMatrixFir,
    noise: &NoiseConfig,
) -> Result<ReadbackFrame> {
    noise.validate()?;
    if bits.n_tracks() != traj.n_tracks() || bits.n_bits() != traj.len() {
        return Err(invalid!("bits {}x{} do not match trajectory {}x{}", bits.n_tracks(), bits.n_bits(), traj.n_tracks(), traj.len()));
    }
    let mut r = noiseless_readback(bits.to_f64().view(), traj, channel)?;
    let n = bits.n_bits();

    // Jitter and AWGN come from separate streams so the AWGN realization does
    // not depend on the number of transitions.
    if noise.sigma_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, noise.sigma_jitter).expect("valid deviation");
        let h = channel.halflen as i64;
        for j in 0..bits.n_tracks() {
            let row = bits.track(j);
            for k in 1..n {
                if row[k] == row[k - 1] {
                    continue;
                }
                let amp = f64::from(row[k] - row[k - 1]) / 2.0 * normal.sample(&mut rng);
                let center = k as f64 + traj.get(j, k);
                let lo = (center.floor() as i64 - h).max(0);
                let hi = (center.ceil() as i64 + h + 1).min(n as i64 - 1);
                for s in lo..=hi {
                    let dp = channel.dipulse_at(s as f64 - center);
                    if dp == 0.0 {
                        continue;
                    }
                    for i in 0..channel.n_readers() {
                        r[[i, s as usize]] += amp * channel.gains[[i, j]] * dp;
                    }
                }
            }
        }
    }

    if noise.sigma_awgn > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(2);
        let normal = Normal::new(0.0, noise.sigma_awgn).expect("valid deviation");
        for v in r.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    if noise.gamma_asym > 0.0 {
        r.mapv_inplace(|v| v + noise.gamma_asym * v * v);
    }
    ReadbackFrame::new(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single_track_channel() -> ChannelMatrixFir {
        build_channel(&ChannelGeometry {
            reader_positions: vec![0.0],
            track_positions: vec![0.0],
            w50_cross: 0.7,
            sigma_p: 0.8,
            pulse_halflen: 6,
        })
        .unwrap()
    }

    #[test]
    fn bits_are_deterministic() {
        let a = generate_bits(2, 4, 7).unwrap();
        let b = generate_bits(2, 4, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.as_array().iter().all(|&v| v == 1 || v == -1));
    }

    #[test]
    fn bits_are_balanced() {
        let b = generate_bits(1, 100_000, 1).unwrap();
        let mean = b.as_array().iter().map(|&v| f64::from(v)).sum::<f64>() / 1e5;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(generate_bits(2, 0, 1).is_err());
        assert!(generate_bits(0, 3, 1).is_err());
        assert!(TrackBits::from_rows(&[vec![1, 0]]).is_err());
    }

    #[test]
    fn offset_trajectory() {
        let t = linear_offset_trajectory(2, 101, &[0.0, 2e-4]).unwrap();
        assert_eq!(t.get(0, 100), 0.0);
        assert_abs_diff_eq!(t.get(1, 100), 0.02, epsilon = 1e-15);
        let z = linear_offset_trajectory(2, 50, &[0.0, 0.0]).unwrap();
        assert!(z.as_array().iter().all(|&v| v == 0.0));
        assert!(linear_offset_trajectory(2, 10, &[0.0, 1e-2]).is_err());
    }

    #[test]
    fn trajectory_rejects_fast_slew() {
        let mut tau = Array2::zeros((1, 3));
        tau[[0, 2]] = 0.01;
        assert!(TimingTrajectory::new(tau).is_err());
    }

    #[test]
    fn cross_track_gains() {
        let g = ChannelGeometry {
            reader_positions: vec![0.0, 0.7],
            track_positions: vec![0.0],
            w50_cross: 0.7,
            sigma_p: 0.8,
            pulse_halflen: 6,
        };
        let ch = build_channel(&g).unwrap();
        assert_eq!(ch.gain(0, 0), 1.0);
        assert_abs_diff_eq!(ch.gain(1, 0), 0.5, epsilon = 1e-15);
        // p[1] = exp(-1/1.28)
        assert_abs_diff_eq!(ch.pulse()[7], 0.457833361771614, epsilon = 1e-12);
        assert_eq!(ch.pulse()[6], 1.0);
    }

    #[test]
    fn geometry_validation() {
        let mut g = ChannelGeometry::two_track(0.4);
        g.pulse_halflen = 2;
        assert!(build_channel(&g).is_err());
        let mut g = ChannelGeometry::two_track(0.4);
        g.sigma_p = 0.0;
        assert!(build_channel(&g).is_err());
    }

    #[test]
    fn pure_convolution_single_track() {
        let ch = single_track_channel();
        let bits = generate_bits(1, 64, 3).unwrap();
        let traj = TimingTrajectory::zeros(1, 64);
        let r = simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).unwrap();
        let b = bits.track_f64(0);
        for k in 0..64 {
            let mut expect = 0.0;
            for (t, p) in ch.pulse().iter().enumerate() {
                let idx = k as i64 - (t as i64 - 6);
                if (0..64).contains(&idx) {
                    expect += p * b[idx as usize];
                }
            }
            assert_eq!(r.samples()[[0, k]], expect);
        }
    }

    #[test]
    fn constant_bits_have_no_jitter() {
        let ch = build_channel(&ChannelGeometry::two_track(0.4)).unwrap();
        let bits = TrackBits::new(Array2::from_elem((2, 200), 1)).unwrap();
        let traj = TimingTrajectory::zeros(2, 200);
        let clean = simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).unwrap();
        let noise = NoiseConfig { sigma_jitter: 0.3, ..NoiseConfig::noiseless() };
        let jittered = simulate_readback(&bits, &traj, &ch, &noise).unwrap();
        assert_eq!(clean, jittered);
    }

    #[test]
    fn awgn_variance() {
        let ch = build_channel(&ChannelGeometry::two_track(0.4)).unwrap();
        let bits = generate_bits(2, 10_000, 11).unwrap();
        let traj = TimingTrajectory::zeros(2, 10_000);
        let clean = simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).unwrap();
        let noise = NoiseConfig { sigma_awgn: 0.1, seed: 5, ..NoiseConfig::noiseless() };
        let noisy = simulate_readback(&bits, &traj, &ch, &noise).unwrap();
        let diff: Vec<f64> = (noisy.samples() - clean.samples()).row(0).to_vec();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
        assert!((0.0094..=0.0106).contains(&var), "variance {var}");
    }

    #[test]
    fn dimension_mismatch() {
        let ch = build_channel(&ChannelGeometry::two_track(0.4)).unwrap();
        let bits = generate_bits(2, 10, 1).unwrap();
        let traj = TimingTrajectory::zeros(2, 11);
        assert!(simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).is_err());
        let bits = generate_bits(1, 11, 1).unwrap();
        let traj = TimingTrajectory::zeros(1, 11);
        assert!(simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).is_err());
    }

    #[test]
    fn integer_delay_shifts_readback() {
        let ch = build_channel(&ChannelGeometry::two_track(0.6)).unwrap();
        let bits = generate_bits(2, 300, 4).unwrap();
        let zero = TimingTrajectory::zeros(2, 300);
        let shifted = TimingTrajectory::new(Array2::from_elem((2, 300), 3.0)).unwrap();
        let a = simulate_readback(&bits, &zero, &ch, &NoiseConfig::noiseless()).unwrap();
        let b = simulate_readback(&bits, &shifted, &ch, &NoiseConfig::noiseless()).unwrap();
        for i in 0..2 {
            for k in 20..280 {
                assert_abs_diff_eq!(b.samples()[[i, k]], a.samples()[[i, k - 3]], epsilon = 1e-12);
            }
        }
    }

    fn noisy_config(seed: u64) -> NoiseConfig {
        NoiseConfig { sigma_awgn: 0.2, sigma_jitter: 0.08, gamma_asym: 0.1, seed }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn simulation_is_deterministic(seed in 0u64..10_000, spacing in 0.2f64..1.2) {
            let ch = build_channel(&ChannelGeometry::two_track(spacing)).unwrap();
            let bits = generate_bits(2, 500, seed).unwrap();
            let traj = linear_offset_trajectory(2, 500, &[0.0, 2e-4]).unwrap();
            let a = simulate_readback(&bits, &traj, &ch, &noisy_config(seed)).unwrap();
            let b = simulate_readback(&bits, &traj, &ch, &noisy_config(seed)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn negation_symmetry(seed in 0u64..10_000) {
            let ch = build_channel(&ChannelGeometry::two_track(0.5)).unwrap();
            let bits = generate_bits(2, 300, seed).unwrap();
            let traj = linear_offset_trajectory(2, 300, &[0.0, 5e-4]).unwrap();
            let a = simulate_readback(&bits, &traj, &ch, &NoiseConfig::noiseless()).unwrap();
            let b = simulate_readback(&bits.negated(), &traj, &ch, &NoiseConfig::noiseless()).unwrap();
            prop_assert_eq!(a.samples(), &b.samples().mapv(|v| -v));
        }

        #[test]
        fn linear_with_shared_awgn(s1 in 0u64..10_000, s2 in 0u64..10_000) {
            let ch = build_channel(&ChannelGeometry::two_track(0.5)).unwrap();
            let traj = linear_offset_trajectory(2, 300, &[0.0, 2e-4]).unwrap();
            let b1 = generate_bits(2, 300, s1).unwrap();
            let b2 = generate_bits(2, 300, s2).unwrap();
            let noise = NoiseConfig { sigma_awgn: 0.3, seed: 99, ..NoiseConfig::noiseless() };
            let r1 = simulate_readback(&b1, &traj, &ch, &noise).unwrap();
            let r2 = simulate_readback(&b2, &traj, &ch, &noise).unwrap();
            let sum = b1.to_f64() + b2.to_f64();
            let clean_sum = noiseless_readback(sum.view(), &traj, &ch).unwrap();
            let awgn = r1.samples() - &noiseless_readback(b1.to_f64().view(), &traj, &ch).unwrap();
            // r1 + r2 = readback of the superposed inputs plus the same noise twice
            let lhs = r1.samples() + r2.samples();
            let rhs = clean_sum + &awgn * 2.0;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
