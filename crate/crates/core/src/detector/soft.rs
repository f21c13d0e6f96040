//! Log-domain forward-backward over the joint trellis, with exact reverse-mode
//! gradients of the bit log-posteriors with respect to the equalized samples
//! and the target taps.

use ndarray::{Array2, ArrayView2};

use super::trellis::{Entry, JointTrellis};
use crate::error::{invalid, Result};

/// Posteriors are clamped to `[POSTERIOR_FLOOR, 1 - POSTERIOR_FLOOR]`.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// `P(b = +1 | y)` per track and bit. Bits the trellis does not decide are 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOutput {
    pub posteriors: Array2<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior bit probabilities given equalized samples `y` (`n_out x len`)
/// and AWGN variance `noise_var`.
pub fn forward_backward(trellis: &JointTrellis, y: ArrayView2<f64>, noise_var: f64) -> Result<SoftOutput> {
    Ok(FbRun::new(trellis, y, noise_var)?.soft_output())
}

/// Gradients returned by [`FbRun::backward`].
#[derive(Debug, Clone)]
pub struct FbGrad {
    /// `n_out x len`, with respect to the equalized samples.
    pub y: Array2<f64>,
    /// One `n_out x n_tracks` matrix per target tap. The monic tap's entry is
    /// computed like the others but is not a free parameter.
    pub target: Vec<Array2<f64>>,
}

/// A completed forward-backward pass, kept for posterior queries and
/// gradient evaluation.
pub struct FbRun<'a> {
    trellis: &'a JointTrellis,
    y: Array2<f64>,
    noise_var: f64,
    /// Normalized log forward messages, `(steps + 1) x states`.
    alpha: Vec<Vec<f64>>,
    /// Normalization subtracted at each forward step.
    alpha_norm: Vec<f64>,
    beta: Vec<Vec<f64>>,
    beta_norm: Vec<f64>,
    /// Per entry `(log p+, log p-)`, unclamped.
    log_post: Vec<(f64, f64)>,
    /// Log evidence at each step, `log sum_s alpha_t(s) beta_t(s)` plus norms.
    step_evidence: Vec<f64>,
}

impl<'a> FbRun<'a> {
    pub fn new(trellis: &'a JointTrellis, y: ArrayView2<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(invalid!("noise variance must be positive, got {noise_var}"));
        }
        if y.nrows() != trellis.n_out() || y.ncols() != trellis.len() {
            return Err(invalid!("equalized block is {}x{}, trellis expects {}x{}", y.nrows(), y.ncols(), trellis.n_out(), trellis.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite equalized sample"));
        }
        let y = y.to_owned();
        let n_states = trellis.n_states();
        let steps = trellis.n_steps();
        let scale = -0.5 / noise_var;
        let mut ext = vec![0u64; trellis.n_tracks()];

        let mut alpha = vec![vec![f64::NEG_INFINITY; n_states]; steps + 1];
        for s in 0..n_states {
            if trellis.initial_allowed(s) {
                alpha[0][s] = 0.0;
            }
        }
        let mut alpha_norm = vec![0.0; steps];
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); n_states];
        for (t, g) in trellis.groups.iter().enumerate() {
            acc.iter_mut().for_each(Vec::clear);
            for s in 0..n_states {
                let a = alpha[t][s];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                for u in 0..(1usize << g.input_bits) {
                    let next = trellis.step(g, s, u, &mut ext);
                    acc[next].push(a + scale * trellis.group_cost(g, &ext, &y));
                }
            }
            let row: Vec<f64> = acc.iter().map(|v| log_sum_exp(v.iter().copied())).collect();
            let norm = log_sum_exp(row.iter().copied());
            alpha_norm[t] = norm;
            alpha[t + 1] = row.into_iter().map(|v| v - norm).collect();
        }

        let mut beta = vec![vec![0.0; n_states]; steps + 1];
        let mut beta_norm = vec![0.0; steps];
        let mut terms = Vec::new();
        for (t, g) in trellis.groups.iter().enumerate().rev() {
            let mut row = vec![f64::NEG_INFINITY; n_states];
            for (s, r) in row.iter_mut().enumerate() {
                terms.clear();
                for u in 0..(1usize << g.input_bits) {
                    let next = trellis.step(g, s, u, &mut ext);
                    terms.push(scale * trellis.group_cost(g, &ext, &y) + beta[t + 1][next]);
                }
                *r = log_sum_exp(terms.iter().copied());
            }
            let norm = log_sum_exp(row.iter().copied());
            beta_norm[t] = norm;
            beta[t] = row.into_iter().map(|v| v - norm).collect();
        }

        let mut run = FbRun { trellis, y, noise_var, alpha, alpha_norm, beta, beta_norm, log_post: Vec::new(), step_evidence: Vec::new() };
        run.log_post = run.compute_log_posteriors();
        run.step_evidence = (0..=steps).map(|t| run.evidence_at(t)).collect();
        Ok(run)
    }

    fn evidence_at(&self, t: usize) -> f64 {
        let fwd: f64 = self.alpha_norm[..t].iter().sum();
        let bwd: f64 = self.beta_norm[t..].iter().sum();
        log_sum_exp(self.alpha[t].iter().zip(&self.beta[t]).map(|(a, b)| a + b)) + fwd + bwd
    }

    /// Log-likelihood of the block. Every step gives the same value up to
    /// rounding; [`FbRun::step_evidence`] exposes them all.
    pub fn log_evidence(&self) -> f64 {
        self.step_evidence[0]
    }

    pub fn step_evidence(&self) -> &[f64] {
        &self.step_evidence
    }

    /// Branch log-weights `alpha_t(s) + gamma_t(s,u) + beta_{t+1}(s')` of one
    /// step, as `(state, input, weight)`.
    fn branch_weights(&self, t: usize) -> Vec<(usize, usize, f64)> {
        let g = &self.trellis.groups[t];
        let scale = -0.5 / self.noise_var;
        let mut ext = vec![0u64; self.trellis.n_tracks()];
        let mut out = Vec::new();
        for s in 0..self.trellis.n_states() {
            let a = self.alpha[t][s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for u in 0..(1usize << g.input_bits) {
                let next = self.trellis.step(g, s, u, &mut ext);
                let w = a + scale * self.trellis.group_cost(g, &ext, &self.y) + self.beta[t + 1][next];
                out.push((s, u, w));
            }
        }
        out
    }

    fn compute_log_posteriors(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (t, g) in self.trellis.groups.iter().enumerate() {
            if g.input_bits == 0 {
                continue;
            }
            let w = self.branch_weights(t);
            let total = log_sum_exp(w.iter().map(|x| x.2));
            let a = g.input_bits;
            for q in 0..a {
                let plus = log_sum_exp(w.iter().filter(|x| (x.1 >> (a - 1 - q)) & 1 == 1).map(|x| x.2));
                let minus = log_sum_exp(w.iter().filter(|x| (x.1 >> (a - 1 - q)) & 1 == 0).map(|x| x.2));
                out.push((plus - total, minus - total));
            }
        }
        out
    }

    /// Unclamped `(log P(+1), log P(-1))` per decided bit, in entry order.
    pub fn log_posteriors(&self) -> &[(f64, f64)] {
        &self.log_post
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.trellis.entries().copied().collect()
    }

    pub fn soft_output(&self) -> SoftOutput {
        let mut p = Array2::from_elem((self.trellis.n_tracks(), self.trellis.n_bits()), 0.5);
        for (e, &(lp, _)) in self.trellis.entries().zip(&self.log_post) {
            p[[e.track, e.index]] = lp.exp().clamp(POSTERIOR_FLOOR, 1.0 - POSTERIOR_FLOOR);
        }
        SoftOutput { posteriors: p }
    }

    /// Backpropagates `upstream[i] = (dL/dlog p+, dL/dlog p-)` for every
    /// decided bit (entry order) to the equalized samples and target taps.
    pub fn backward(&self, upstream: &[(f64, f64)]) -> Result<FbGrad> {
        if upstream.len() != self.log_post.len() {
            return Err(invalid!("{} upstream gradients for {} decided bits", upstream.len(), self.log_post.len()));
        }
        let tr = self.trellis;
        let n_states = tr.n_states();
        let steps = tr.n_steps();
        let scale = -0.5 / self.noise_var;
        let mut ext = vec![0u64; tr.n_tracks()];

        // gradients with respect to branch weights xi_t(s,u), split into the
        // alpha, gamma and beta parts they feed
        let mut g_alpha = vec![vec![0.0; n_states]; steps + 1];
        let mut g_beta = vec![vec![0.0; n_states]; steps + 1];
        let mut g_gamma: Vec<Vec<f64>> = tr.groups.iter().map(|g| vec![0.0; n_states << g.input_bits]).collect();

        let mut cursor = 0;
        for (t, g) in tr.groups.iter().enumerate() {
            let a = g.input_bits;
            if a == 0 {
                continue;
            }
            let w = self.branch_weights(t);
            let total = log_sum_exp(w.iter().map(|x| x.2));
            for q in 0..a {
                let (wp, wm) = upstream[cursor + q];
                if wp == 0.0 && wm == 0.0 {
                    continue;
                }
                let (lp, lm) = self.log_post[cursor + q];
                let lse_plus = lp + total;
                let lse_minus = lm + total;
                for &(s, u, xi) in &w {
                    let one = (u >> (a - 1 - q)) & 1 == 1;
                    let qv = (xi - total).exp();
                    let mut gx = -(wp + wm) * qv;
                    if one {
                        gx += wp * (xi - lse_plus).exp();
                    } else {
                        gx += wm * (xi - lse_minus).exp();
                    }
                    let next = tr.step(g, s, u, &mut ext);
                    g_alpha[t][s] += gx;
                    g_gamma[t][(s << a) | u] += gx;
                    g_beta[t + 1][next] += gx;
                }
            }
            cursor += a;
        }

        // forward recursion, in reverse
        for t in (0..steps).rev() {
            let g = &tr.groups[t];
            let a = g.input_bits;
            for s in 0..n_states {
                let al = self.alpha[t][s];
                if al == f64::NEG_INFINITY {
                    continue;
                }
                for u in 0..(1usize << a) {
                    let next = tr.step(g, s, u, &mut ext);
                    let upstream = g_alpha[t + 1][next];
                    if upstream == 0.0 {
                        continue;
                    }
                    let gam = scale * tr.group_cost(g, &ext, &self.y);
                    let w = (al + gam - self.alpha_norm[t] - self.alpha[t + 1][next]).exp();
                    g_alpha[t][s] += upstream * w;
                    g_gamma[t][(s << a) | u] += upstream * w;
                }
            }
        }

        // backward recursion, in forward order; beta_0 feeds nothing
        for t in 1..steps {
            let g = &tr.groups[t];
            let a = g.input_bits;
            for s in 0..n_states {
                let upstream = g_beta[t][s];
                if upstream == 0.0 {
                    continue;
                }
                for u in 0..(1usize << a) {
                    let next = tr.step(g, s, u, &mut ext);
                    let gam = scale * tr.group_cost(g, &ext, &self.y);
                    let w = (gam + self.beta[t + 1][next] - self.beta_norm[t] - self.beta[t][s]).exp();
                    g_gamma[t][(s << a) | u] += upstream * w;
                    g_beta[t + 1][next] += upstream * w;
                }
            }
        }

        // gamma_t(s,u) = -sum_k |y_k - d_k|^2 / (2 var)
        let n_out = tr.n_out();
        let n_tracks = tr.n_tracks();
        let l_len = tr.target_len();
        let mut gy = Array2::zeros((n_out, tr.len()));
        let mut g_target = vec![Array2::zeros((n_out, n_tracks)); l_len];
        let mut d = vec![0.0; n_out];
        let mut windows = vec![0usize; n_tracks];
        for (t, g) in tr.groups.iter().enumerate() {
            let a = g.input_bits;
            for s in 0..n_states {
                if self.alpha[t][s] == f64::NEG_INFINITY {
                    continue;
                }
                for u in 0..(1usize << a) {
                    let gg = g_gamma[t][(s << a) | u];
                    if gg == 0.0 {
                        continue;
                    }
                    tr.step(g, s, u, &mut ext);
                    for si in 0..g.len {
                        let k = g.first + si;
                        let table = &tr.tables[k];
                        for (j, w) in windows.iter_mut().enumerate() {
                            *w = tr.window(g, si, &ext, j);
                        }
                        d.fill(0.0);
                        for (j, &w) in windows.iter().enumerate() {
                            for (o, v) in d.iter_mut().enumerate() {
                                *v += table.contrib[j][w * n_out + o];
                            }
                        }
                        for o in 0..n_out {
                            let r = (self.y[[o, k]] - d[o]) / self.noise_var;
                            gy[[o, k]] -= gg * r;
                            for (j, &w) in windows.iter().enumerate() {
                                for (l, gt) in g_target.iter_mut().enumerate() {
                                    gt[[o, j]] += gg * r * table.delayed[j][w * l_len + l];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(FbGrad { y: gy, target: g_target })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::TimingTrajectory;
    use crate::interp::InterpOrder;
    use crate::targets::MatrixTarget;
    use ndarray::array;

    fn small() -> (MatrixTarget, TimingTrajectory, Array2<f64>) {
        let target = MatrixTarget::monic(vec![array![[0.4, 0.3], [-0.2, 0.5]]], 2).unwrap();
        let mut tau = Array2::zeros((2, 7));
        for k in 0..7 {
            tau[[1, k]] = 0.3 + 0.001 * k as f64;
        }
        let traj = TimingTrajectory::new(tau).unwrap();
        let y = Array2::from_shape_fn((2, 7), |(o, k)| ((o * 7 + k) as f64 * 0.77).sin() * 1.3);
        (target, traj, y)
    }

    #[test]
    fn evidence_consistent_across_steps() {
        let (target, traj, y) = small();
        let tr = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let run = FbRun::new(&tr, y.view(), 0.4).unwrap();
        let ev = run.step_evidence();
        for e in ev {
            assert!((e - ev[0]).abs() < 1e-9, "{e} vs {}", ev[0]);
        }
    }

    #[test]
    fn posteriors_in_range() {
        let (target, traj, y) = small();
        let tr = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let out = forward_backward(&tr, y.view(), 0.4).unwrap();
        assert!(out.posteriors.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_bad_variance() {
        let (target, traj, y) = small();
        let tr = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        assert!(forward_backward(&tr, y.view(), 0.0).is_err());
        assert!(forward_backward(&tr, y.view(), f64::NAN).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (target, traj, y) = small();
        let var = 0.5;
        let tr = JointTrellis::new(&target, &traj, InterpOrder::Linear).unwrap();
        let run = FbRun::new(&tr, y.view(), var).unwrap();
        // L = sum over bits of (0.7 log p+ - 0.3 log p-)
        let up: Vec<(f64, f64)> = run.log_posteriors().iter().map(|_| (0.7, -0.3)).collect();
        let grad = run.backward(&up).unwrap();
        let loss = |tr: &JointTrellis, y: &Array2<f64>| {
            let r = FbRun::new(tr, y.view(), var).unwrap();
            r.log_posteriors().iter().map(|(p, m)| 0.7 * p - 0.3 * m).sum::<f64>()
        };
        let h = 1e-6;
        for o in 0..2 {
            for k in 0..7 {
                let mut yp = y.clone();
                yp[[o, k]] += h;
                let mut ym = y.clone();
                ym[[o, k]] -= h;
                let fd = (loss(&tr, &yp) - loss(&tr, &ym)) / (2.0 * h);
                assert!((fd - grad.y[[o, k]]).abs() < 1e-6 * (1.0 + fd.abs()), "y[{o},{k}] {fd} vs {}", grad.y[[o, k]]);
            }
        }
        for o in 0..2 {
            for j in 0..2 {
                let mut tp = target.clone();
                tp.trailing_mut()[0][[o, j]] += h;
                let mut tm = target.clone();
                tm.trailing_mut()[0][[o, j]] -= h;
                let trp = JointTrellis::new(&tp, &traj, InterpOrder::Linear).unwrap();
                let trm = JointTrellis::new(&tm, &traj, InterpOrder::Linear).unwrap();
                let fd = (loss(&trp, &y) - loss(&trm, &y)) / (2.0 * h);
                let an = grad.target[1][[o, j]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "G1[{o},{j}] {fd} vs {an}");
            }
        }
    }
}
