//! Joint least-squares design of a MIMO FIR equalizer and a monic matrix
//! partial-response target.
//!
//! The design minimizes
//! `(1/N) sum_k || sum_m F_m r[k-m] - sum_l G_l b[k-D-l] ||^2`
//! with `G_0 = I`, where `b` are the (fractionally delayed) written bits.
//! Substituting the constraint leaves an unconstrained quadratic in the
//! equalizer taps and the non-leading target taps, solved from the normal
//! equations. Each output row decouples and shares one Gram matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::channel::{ReadbackFrame, TimingTrajectory, TrackBits};
use crate::error::{invalid, Error, Result};
use crate::interp::{delay_sequence, fill_taps, split_delay, InterpOrder};
use crate::textio;

/// Designs whose Gram matrix exceeds this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e10;

/// Matrix-valued partial-response target `G_0 .. G_{L-1}`, each `n_out x n_tracks`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTarget {
    taps: Vec<Array2<f64>>,
}

impl MatrixTarget {
    pub fn new(taps: Vec<Array2<f64>>) -> Result<Self> {
        let first = taps.first().ok_or_else(|| invalid!("target needs at least one tap"))?;
        let dim = first.dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(invalid!("empty target tap"));
        }
        if taps.iter().any(|t| t.dim() != dim) {
            return Err(invalid!("target taps have inconsistent shapes"));
        }
        if taps.iter().flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
            return Err(invalid!("target contains non-finite coefficients"));
        }
        Ok(MatrixTarget { taps })
    }

    /// Monic target with the given trailing taps.
    pub fn monic(trailing: Vec<Array2<f64>>, n: usize) -> Result<Self> {
        let mut taps = vec![Array2::eye(n)];
        taps.extend(trailing);
        MatrixTarget::new(taps)
    }

    /// Scalar monic target `[1, g_1, ...]`.
    pub fn scalar(coeffs: &[f64]) -> Result<Self> {
        MatrixTarget::new(coeffs.iter().map(|&c| Array2::from_elem((1, 1), c)).collect())
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn n_out(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn n_tracks(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn taps(&self) -> &[Array2<f64>] {
        &self.taps
    }

    pub fn tap(&self, l: usize) -> &Array2<f64> {
        &self.taps[l]
    }

    /// Mutable access to the non-leading taps; `G_0` stays fixed.
    pub fn trailing_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.taps[1..]
    }

    pub fn is_monic(&self) -> bool {
        self.n_out() == self.n_tracks() && self.taps[0] == Array2::<f64>::eye(self.n_out())
    }

    pub fn to_text(&self) -> String {
        let header = format!("matrix_target {} {} {}", self.len(), self.n_out(), self.n_tracks());
        textio::write_blocks(&header, &self.taps)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (dims, mut values) = textio::read_header(text, "matrix_target", 3)?;
        let taps = textio::read_blocks(&mut values, dims[0], dims[1], dims[2])?;
        textio::expect_end(&mut values)?;
        MatrixTarget::new(taps)
    }
}

/// MIMO FIR equalizer `F_0 .. F_{W-1}` (each `n_out x n_readers`) with its
/// decision delay.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoFir {
    taps: Vec<Array2<f64>>,
    delay: usize,
}

impl MimoFir {
    pub fn new(taps: Vec<Array2<f64>>, delay: usize) -> Result<Self> {
        let first = taps.first().ok_or_else(|| invalid!("equalizer needs at least one tap"))?;
        let dim = first.dim();
        if taps.iter().any(|t| t.dim() != dim) {
            return Err(invalid!("equalizer taps have inconsistent shapes"));
        }
        if taps.iter().flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
            return Err(invalid!("equalizer contains non-finite coefficients"));
        }
        Ok(MimoFir { taps, delay })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn n_out(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn n_readers(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn taps(&self) -> &[Array2<f64>] {
        &self.taps
    }

    pub fn to_text(&self) -> String {
        let header = format!("mimo_fir {} {} {} {}", self.len(), self.n_out(), self.n_readers(), self.delay);
        textio::write_blocks(&header, &self.taps)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (dims, mut values) = textio::read_header(text, "mimo_fir", 4)?;
        let taps = textio::read_blocks(&mut values, dims[0], dims[1], dims[2])?;
        textio::expect_end(&mut values)?;
        MimoFir::new(taps, dims[3])
    }
}

/// Result of a joint equalizer/target design.
#[derive(Debug, Clone)]
pub struct GprDesign {
    pub equalizer: MimoFir,
    pub target: MatrixTarget,
    pub mse: f64,
}

/// Bits of every track passed through the fractional-delay filter of its
/// trajectory.
pub fn delay_bits(bits: &TrackBits, traj: &TimingTrajectory, order: InterpOrder) -> Result<Array2<f64>> {
    if bits.n_tracks() != traj.n_tracks() || bits.n_bits() != traj.len() {
        return Err(invalid!("bits and trajectory dimensions differ"));
    }
    let mut out = Array2::zeros((bits.n_tracks(), bits.n_bits()));
    for j in 0..bits.n_tracks() {
        let row = delay_sequence(&bits.track_f64(j), traj.track(j), order)?;
        out.row_mut(j).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

/// Track `j` of `bits` through the fractional-delay filter for sample `m`
/// at delay `tau`; bits outside the frame read as zero.
pub(crate) fn delayed_bit(bits: &TrackBits, j: usize, m: i64, tau: f64, order: InterpOrder) -> f64 {
    let (n, mu) = split_delay(tau);
    let mut taps = [0.0; 4];
    let taps = &mut taps[..order.len()];
    fill_taps(mu, order, taps);
    let nb = bits.n_bits() as i64;
    let mut v = 0.0;
    for (i, c) in taps.iter().enumerate() {
        let idx = m - n - i as i64 + order.offset() as i64;
        if idx >= 0 && idx < nb {
            v += c * bits.get(j, idx as usize) as f64;
        }
    }
    v
}

/// Desired equalizer output `t[k] = sum_l G_l b[k - D - l]`, zero outside the
/// bit range.
pub fn target_branch(target: &MatrixTarget, delayed: ArrayView2<'_, f64>, delay: usize) -> Result<Array2<f64>> {
    if delayed.nrows() != target.n_tracks() {
        return Err(invalid!("{} bit rows for a target over {} tracks", delayed.nrows(), target.n_tracks()));
    }
    let n = delayed.ncols();
    let mut out = Array2::zeros((target.n_out(), n));
    for (l, g) in target.taps().iter().enumerate() {
        let shift = delay + l;
        for k in shift..n {
            let src = delayed.column(k - shift);
            let mut col = out.column_mut(k);
            col += &g.dot(&src);
        }
    }
    Ok(out)
}

/// `y[k] = sum_m F_m r[k-m]`, samples before the frame read as zero.
pub fn equalize_linear(eq: &MimoFir, readback: &ReadbackFrame) -> Result<Array2<f64>> {
    equalize_view(eq, readback.view())
}

pub(crate) fn equalize_view(eq: &MimoFir, r: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if r.nrows() != eq.n_readers() {
        return Err(invalid!("equalizer expects {} readers, readback has {}", eq.n_readers(), r.nrows()));
    }
    let n = r.ncols();
    let mut y = Array2::zeros((eq.n_out(), n));
    for (m, f) in eq.taps().iter().enumerate() {
        for k in m..n {
            let src = r.column(k - m);
            let mut col = y.column_mut(k);
            col += &f.dot(&src);
        }
    }
    Ok(y)
}

/// Objective value `(1/N) sum_k ||F*r - G*b||^2` for an arbitrary pair.
pub fn gpr_objective(eq: &MimoFir, target: &MatrixTarget, readback: ArrayView2<'_, f64>, delayed: ArrayView2<'_, f64>) -> Result<f64> {
    let y = equalize_view(eq, readback)?;
    let t = target_branch(target, delayed, eq.delay())?;
    let n = readback.ncols() as f64;
    Ok((&y - &t).iter().map(|e| e * e).sum::<f64>() / n)
}

/// Joint design of a `W`-tap equalizer and `L`-tap monic target at delay `D`.
pub fn design_gpr(
    readback: &ReadbackFrame,
    delayed: ArrayView2<'_, f64>,
    target_len: usize,
    eq_len: usize,
    delay: usize,
) -> Result<GprDesign> {
    let r = readback.view();
    let (n_readers, n) = r.dim();
    let n_tracks = delayed.nrows();
    if delayed.ncols() != n {
        return Err(invalid!("readback has {n} samples but delayed bits have {}", delayed.ncols()));
    }
    if target_len == 0 || eq_len == 0 || n_tracks == 0 {
        return Err(invalid!("target and equalizer lengths must be positive"));
    }
    let n_f = eq_len * n_readers;
    let n_g = (target_len - 1) * n_tracks;
    let dim = n_f + n_g;
    if n < 10 * (eq_len * n_readers + target_len * n_tracks) {
        return Err(invalid!(
            "{n} samples are too few for {dim} design unknowns (need at least {})",
            10 * (eq_len * n_readers + target_len * n_tracks)
        ));
    }

    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut cross = DMatrix::<f64>::zeros(dim, n_tracks);
    let mut x = vec![0.0; dim];
    for k in 0..n {
        for m in 0..eq_len {
            for i in 0..n_readers {
                x[m * n_readers + i] = if k >= m { r[[i, k - m]] } else { 0.0 };
            }
        }
        for l in 1..target_len {
            for j in 0..n_tracks {
                x[n_f + (l - 1) * n_tracks + j] = if k >= delay + l { -delayed[[j, k - delay - l]] } else { 0.0 };
            }
        }
        for a in 0..dim {
            let xa = x[a];
            if xa == 0.0 {
                continue;
            }
            for b in a..dim {
                gram[(a, b)] += xa * x[b];
            }
            if k >= delay {
                for o in 0..n_tracks {
                    cross[(a, o)] += xa * delayed[[o, k - delay]];
                }
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram /= n as f64;
    cross /= n as f64;

    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let chol = gram.cholesky().ok_or(Error::IllConditioned { condition })?;
    let theta = chol.solve(&cross);

    let eq_taps = (0..eq_len).map(|m| Array2::from_shape_fn((n_tracks, n_readers), |(o, i)| theta[(m * n_readers + i, o)])).collect();
    let target_taps =
        (1..target_len).map(|l| Array2::from_shape_fn((n_tracks, n_tracks), |(o, j)| theta[(n_f + (l - 1) * n_tracks + j, o)])).collect();
    let equalizer = MimoFir::new(eq_taps, delay)?;
    let target = MatrixTarget::monic(target_taps, n_tracks)?;
    let mse = gpr_objective(&equalizer, &target, r, delayed)?;
    Ok(GprDesign { equalizer, target, mse })
}

/// Single-output design for one track: all readers in, one equalized stream
/// out, monic two-tap target `[1, g_1]`.
pub fn design_miso_gpr(readback: &ReadbackFrame, delayed_track: &[f64], eq_len: usize, delay: usize) -> Result<GprDesign> {
    let bits = ArrayView2::from_shape((1, delayed_track.len()), delayed_track).map_err(|e| invalid!("bad track bits: {e}"))?;
    design_gpr(readback, bits, 2, eq_len, delay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_bits;
    use approx::assert_abs_diff_eq;

    fn frame(a: Array2<f64>) -> ReadbackFrame {
        ReadbackFrame::new(a).unwrap()
    }

    #[test]
    fn identity_channel_single_track() {
        let bits = generate_bits(1, 2000, 3).unwrap().to_f64();
        let d = design_gpr(&frame(bits.clone()), bits.view(), 1, 5, 2).unwrap();
        assert!(d.mse < 1e-20);
        for (m, f) in d.equalizer.taps().iter().enumerate() {
            let expect = if m == 2 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(f[[0, 0]], expect, epsilon = 1e-10);
        }
        assert_eq!(d.target.tap(0)[[0, 0]], 1.0);
    }

    #[test]
    fn miso_recovers_dicode_like_tap() {
        let b = generate_bits(1, 3000, 8).unwrap().track_f64(0);
        let mut r = Array2::zeros((1, 3000));
        for k in 0..3000 {
            r[[0, k]] = b[k] + if k > 0 { 0.5 * b[k - 1] } else { 0.0 };
        }
        let d = design_miso_gpr(&frame(r), &b, 7, 3).unwrap();
        assert_abs_diff_eq!(d.target.tap(1)[[0, 0]], 0.5, epsilon = 1e-8);
        assert!(d.mse < 1e-10, "mse {}", d.mse);
        // a one-tap equalizer keeps the identity-channel design well posed
        let r = Array2::from_shape_vec((1, 3000), b.clone()).unwrap();
        let identity = design_miso_gpr(&frame(r), &b, 1, 0).unwrap();
        assert_abs_diff_eq!(identity.target.tap(1)[[0, 0]], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(identity.equalizer.taps()[0][[0, 0]], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_bits_are_ill_conditioned() {
        let b = vec![1.0; 2000];
        let r = Array2::from_elem((1, 2000), 1.0);
        match design_miso_gpr(&frame(r), &b, 5, 2) {
            Err(Error::IllConditioned { .. }) => {}
            other => panic!("expected ill-conditioned error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples() {
        let b = generate_bits(1, 50, 1).unwrap().to_f64();
        assert!(design_gpr(&frame(b.clone()), b.view(), 2, 5, 1).is_err());
    }

    #[test]
    fn equalizer_basics() {
        let r = frame(Array2::from_elem((2, 10), 1.0));
        let id = MimoFir::new(vec![Array2::eye(2)], 0).unwrap();
        assert_eq!(equalize_linear(&id, &r).unwrap(), *r.samples());
        let zero = MimoFir::new(vec![Array2::zeros((2, 2)); 3], 0).unwrap();
        assert!(equalize_linear(&zero, &r).unwrap().iter().all(|&v| v == 0.0));
        let two = MimoFir::new(vec![Array2::eye(2) * 2.0], 0).unwrap();
        assert!(equalize_linear(&two, &r).unwrap().iter().all(|&v| v == 2.0));
        let wrong = MimoFir::new(vec![Array2::eye(3)], 0).unwrap();
        assert!(equalize_linear(&wrong, &r).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = MatrixTarget::monic(vec![Array2::from_shape_vec((2, 2), vec![0.25, -0.125, 1.0 / 3.0, 0.7]).unwrap()], 2).unwrap();
        assert_eq!(MatrixTarget::from_text(&t.to_text()).unwrap(), t);
        let f = MimoFir::new(vec![Array2::from_shape_vec((1, 2), vec![0.1, 0.2]).unwrap(); 3], 4).unwrap();
        assert_eq!(MimoFir::from_text(&f.to_text()).unwrap(), f);
        assert!(MatrixTarget::from_text("matrix_target 1 1 1\n").is_err());
        assert!(MimoFir::from_text("bogus 1 1 1 1\n0").is_err());
    }
}
