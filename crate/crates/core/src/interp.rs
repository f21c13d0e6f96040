//! Fractional-delay interpolation with short Lagrange kernels.
//!
//! A delay `tau` is split into an integer part `n = floor(tau)` and a
//! fraction `mu`. The output sample is `y[k] = sum_i c_i(mu) * x[k - n - i + offset]`
//! where the kernel nodes are `{0, 1}` for linear and `{-1, 0, 1, 2}` for cubic
//! interpolation, so `offset` is 0 and 1 respectively.

use crate::error::{invalid, Result};

/// Supported interpolation orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum InterpOrder {
    Linear,
    Cubic,
}

impl InterpOrder {
    /// Polynomial order P.
    pub fn order(self) -> usize {
        match self {
            InterpOrder::Linear => 1,
            InterpOrder::Cubic => 3,
        }
    }

    /// Number of taps, P + 1.
    pub fn len(self) -> usize {
        self.order() + 1
    }

    /// Index of the node at zero, i.e. how many taps look "ahead" of the
    /// integer delay.
    pub fn offset(self) -> usize {
        match self {
            InterpOrder::Linear => 0,
            InterpOrder::Cubic => 1,
        }
    }

    fn nodes(self) -> &'static [f64] {
        match self {
            InterpOrder::Linear => &[0.0, 1.0],
            InterpOrder::Cubic => &[-1.0, 0.0, 1.0, 2.0],
        }
    }
}

impl TryFrom<usize> for InterpOrder {
    type Error = crate::Error;

    fn try_from(p: usize) -> Result<Self> {
        match p {
            1 => Ok(InterpOrder::Linear),
            3 => Ok(InterpOrder::Cubic),
            _ => Err(invalid!("unsupported interpolation order {p} (expected 1 or 3)")),
        }
    }
}

impl From<InterpOrder> for usize {
    fn from(o: InterpOrder) -> usize {
        o.order()
    }
}

/// Lagrange interpolation coefficients for fraction `mu` in `[0, 1)`.
pub fn lagrange_taps(mu: f64, order: InterpOrder) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&mu) {
        return Err(invalid!("fraction {mu} outside [0, 1)"));
    }
    Ok(taps_unchecked(mu, order))
}

/// Same as [`lagrange_taps`] without the range check; used on hot paths where
/// `mu` comes from [`split_delay`].
pub(crate) fn taps_unchecked(mu: f64, order: InterpOrder) -> Vec<f64> {
    let mut out = vec![0.0; order.len()];
    fill_taps(mu, order, &mut out);
    out
}

pub(crate) fn fill_taps(mu: f64, order: InterpOrder, out: &mut [f64]) {
    let nodes = order.nodes();
    for (i, c) in out.iter_mut().enumerate() {
        let mut num = 1.0;
        let mut den = 1.0;
        for (m, &node) in nodes.iter().enumerate() {
            if m != i {
                num *= mu - node;
                den *= nodes[i] - node;
            }
        }
        *c = num / den;
    }
}

/// Integer part and fraction of a delay, `tau = n + mu` with `mu` in `[0, 1)`.
pub fn split_delay(tau: f64) -> (i64, f64) {
    let n = tau.floor();
    let mut mu = tau - n;
    // tau slightly below an integer can round mu up to exactly 1.0
    if mu >= 1.0 {
        mu = 0.0;
        return (n as i64 + 1, mu);
    }
    (n as i64, mu)
}

/// Applies a per-sample delay `traj[k]` to `x`: `y[k] ~= x(k - traj[k])`.
pub fn delay_sequence(x: &[f64], traj: &[f64], order: InterpOrder) -> Result<Vec<f64>> {
    if x.len() != traj.len() {
        return Err(invalid!("sequence length {} does not match trajectory length {}", x.len(), traj.len()));
    }
    if let Some(bad) = traj.iter().position(|t| !t.is_finite()) {
        return Err(invalid!("non-finite delay at sample {bad}"));
    }
    let mut taps = [0.0; 4];
    let taps = &mut taps[..order.len()];
    let off = order.offset() as i64;
    let y = traj
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let (n, mu) = split_delay(tau);
            fill_taps(mu, order, taps);
            let base = k as i64 - n + off;
            taps.iter()
                .enumerate()
                .map(|(i, c)| {
                    let idx = base - i as i64;
                    if idx >= 0 && (idx as usize) < x.len() {
                        c * x[idx as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_at_zero_fraction() {
        assert_eq!(lagrange_taps(0.0, InterpOrder::Cubic).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(lagrange_taps(0.0, InterpOrder::Linear).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn half_sample_taps() {
        assert_eq!(lagrange_taps(0.5, InterpOrder::Linear).unwrap(), vec![0.5, 0.5]);
        let c = lagrange_taps(0.5, InterpOrder::Cubic).unwrap();
        let expect = [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0];
        for (a, b) in c.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        assert!(lagrange_taps(1.0, InterpOrder::Cubic).is_err());
        assert!(lagrange_taps(-0.1, InterpOrder::Linear).is_err());
        assert!(InterpOrder::try_from(2).is_err());
    }

    #[test]
    fn zero_and_integer_delays() {
        let x: Vec<f64> = (0..20).map(|k| (k as f64 * 0.37).sin()).collect();
        let y = delay_sequence(&x, &[0.0; 20], InterpOrder::Cubic).unwrap();
        assert_eq!(y, x);
        let y = delay_sequence(&x, &[3.0; 20], InterpOrder::Cubic).unwrap();
        for k in 0..20 {
            let expect = if k >= 3 { x[k - 3] } else { 0.0 };
            assert_eq!(y[k], expect);
        }
    }

    /// Lagrange remainder bound for a unit sinusoid of radian frequency `w`
    /// interpolated at fraction `mu` on nodes {-1, 0, 1, 2}.
    fn cubic_remainder_bound(w: f64, mu: f64) -> f64 {
        w.powi(4) / 24.0 * ((mu + 1.0) * mu * (mu - 1.0) * (mu - 2.0)).abs()
    }

    #[test]
    fn sinusoid_phase_shift() {
        let w = 2.0 * std::f64::consts::PI * 0.1;
        let x: Vec<f64> = (0..200).map(|k| (w * k as f64).sin()).collect();
        let y = delay_sequence(&x, &[0.3; 200], InterpOrder::Cubic).unwrap();
        let err = (5..195).map(|k| (y[k] - (w * (k as f64 - 0.3)).sin()).abs()).fold(0.0, f64::max);
        let bound = cubic_remainder_bound(w, 0.7);
        assert!(err <= bound, "max error {err} above remainder bound {bound}");
        // the bound is tight here: the kernel cannot do better than ~3e-3
        assert!(err > 0.9 * bound);
    }

    #[test]
    fn length_mismatch() {
        assert!(delay_sequence(&[1.0, 2.0], &[0.0], InterpOrder::Linear).is_err());
        assert!(delay_sequence(&[1.0], &[f64::NAN], InterpOrder::Linear).is_err());
    }

    fn composition_error(t1: f64, t2: f64, f: f64) -> (f64, f64) {
        let w = 2.0 * std::f64::consts::PI * f;
        let n = 300;
        let x: Vec<f64> = (0..n).map(|k| (w * k as f64 + 0.4).sin()).collect();
        let a = delay_sequence(&x, &vec![t1; n], InterpOrder::Cubic).unwrap();
        let ab = delay_sequence(&a, &vec![t2; n], InterpOrder::Cubic).unwrap();
        let c = delay_sequence(&x, &vec![t1 + t2; n], InterpOrder::Cubic).unwrap();
        let err = (10..n - 10).map(|k| (ab[k] - c[k]).abs()).fold(0.0, f64::max);
        // nodes are mirrored for a delay, so the remainder uses 1 - frac
        let e = |t: f64| cubic_remainder_bound(w, 1.0 - split_delay(t).1);
        let gain: f64 = taps_unchecked(split_delay(t2).1, InterpOrder::Cubic).iter().map(|c| c.abs()).sum();
        (err, gain * e(t1) + e(t2) + e(t1 + t2) + 1e-12)
    }

    proptest! {
        #[test]
        fn taps_sum_to_one(mu in 0.0f64..1.0, cubic in any::<bool>()) {
            let order = if cubic { InterpOrder::Cubic } else { InterpOrder::Linear };
            let s: f64 = lagrange_taps(mu, order).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-14);
        }

        #[test]
        fn dc_is_preserved(tau in -3.0f64..3.0) {
            let x = vec![1.0; 40];
            let y = delay_sequence(&x, &[tau; 40], InterpOrder::Cubic).unwrap();
            for v in &y[6..34] {
                prop_assert!((v - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn composition_of_constant_delays(t1 in 0.0f64..2.0, t2 in 0.0f64..2.0, f in 0.0f64..0.2) {
            let (err, bound) = composition_error(t1, t2, f);
            prop_assert!(err <= bound, "error {} above bound {}", err, bound);
        }

        #[test]
        fn delay_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let n = 32;
            let x: Vec<f64> = (0..n).map(|k| ((k as u64 * 31 + seed) % 7) as f64 - 3.0).collect();
            let z: Vec<f64> = (0..n).map(|k| ((k as u64 * 17 + seed) % 5) as f64 - 2.0).collect();
            let traj: Vec<f64> = (0..n).map(|k| 0.3 + 0.01 * k as f64).collect();
            let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
            let lhs = delay_sequence(&mix, &traj, InterpOrder::Cubic).unwrap();
            let dx = delay_sequence(&x, &traj, InterpOrder::Cubic).unwrap();
            let dz = delay_sequence(&z, &traj, InterpOrder::Cubic).unwrap();
            for k in 0..n {
                prop_assert!((lhs[k] - (a * dx[k] + b * dz[k])).abs() < 1e-12);
            }
        }
    }
}
