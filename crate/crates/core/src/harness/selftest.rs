//! Invariant and oracle checks, runnable outside the test harness.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, SystemId};
use super::experiment::run_experiment;
use super::results::{ber_csv, parse_ber_csv, BerRecord, RunFlag};
use crate::channel::{
    build_channel, generate_bits, noiseless_readback, simulate_readback, ChannelGeometry, NoiseConfig, ReadbackFrame, TimingTrajectory,
    TrackBits,
};
use crate::detector::oracle::{direct_labels, enumerated_posteriors, exhaustive_ml};
use crate::detector::{build_trellis, forward_backward, viterbi_decisions, viterbi_joint, viterbi_single};
use crate::error::Result;
use crate::interp::{delay_sequence, InterpOrder};
use crate::nn::{check_gradients, default_dims, init_mlp, loss_mse, loss_xent, ClassError, DEFAULT_HALFWIN};
use crate::targets::{delay_bits, design_gpr, equalize_linear, gpr_objective, target_branch, MatrixTarget};
use crate::timing::ted_mm;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String)>;

/// Every check, in run order.
pub const CHECKS: &[(&str, CheckFn)] = &[
    ("interp_identity", interp_identity),
    ("interp_dc", interp_dc),
    ("interp_linearity", interp_linearity),
    ("interp_composition", interp_composition),
    ("channel_determinism", channel_determinism),
    ("channel_linearity", channel_linearity),
    ("channel_symmetry", channel_symmetry),
    ("channel_shift", channel_shift),
    ("target_optimality", target_optimality),
    ("target_mse_monotone", target_mse_monotone),
    ("ted_s_curve", ted_s_curve),
    ("viterbi_exhaustive", viterbi_exhaustive),
    ("viterbi_random_alternatives", viterbi_random_alternatives),
    ("viterbi_synchronous_split", viterbi_synchronous_split),
    ("posterior_enumeration", posterior_enumeration),
    ("gradient_mse", gradient_mse),
    ("gradient_xent", gradient_xent),
    ("noiseless_ber", noiseless_ber),
    ("csv_round_trip", csv_round_trip),
];

pub fn run_check(name: &'static str, f: CheckFn) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Runs the checks whose names contain `filter` (all when `None`).
pub fn run_selftest(filter: Option<&str>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(n, _)| filter.is_none_or(|f| n.contains(f)))
        .map(|&(n, f)| {
            let r = run_check(n, f);
            log::info!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            r
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn interp_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut ok = true;
    for order in [InterpOrder::Linear, InterpOrder::Cubic] {
        ok &= delay_sequence(&x, &vec![0.0; x.len()], order)? == x;
    }
    Ok((ok, "zero delay returns the input bit-exactly".into()))
}

fn interp_dc() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 400;
    let ones = vec![1.0; n];
    let mut worst: f64 = 0.0;
    for order in [InterpOrder::Linear, InterpOrder::Cubic] {
        let start: f64 = rng.random_range(-3.0..3.0);
        let traj: Vec<f64> = (0..n).map(|k| start + 1e-3 * k as f64).collect();
        let y = delay_sequence(&ones, &traj, order)?;
        worst = worst.max(max_abs_diff(&y[8..n - 8], &ones[8..n - 8]));
    }
    Ok((worst <= 4.0 * f64::EPSILON, format!("max interior deviation {worst:e}")))
}

fn interp_linearity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 300;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let traj: Vec<f64> = (0..n).map(|k| 0.37 - 8e-4 * k as f64).collect();
    let (a, b) = (1.7, -0.6);
    let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
    let lhs = delay_sequence(&mix, &traj, InterpOrder::Cubic)?;
    let dx = delay_sequence(&x, &traj, InterpOrder::Cubic)?;
    let dz = delay_sequence(&z, &traj, InterpOrder::Cubic)?;
    let rhs: Vec<f64> = dx.iter().zip(&dz).map(|(p, q)| a * p + b * q).collect();
    let err = max_abs_diff(&lhs, &rhs);
    Ok((err < 1e-12, format!("max deviation {err:e} (rounding only)")))
}

/// Literal composition criterion: cubic delays by `t1` then `t2` against one
/// delay by `t1 + t2`, input frequencies up to 0.2 cycles/sample, 2e-3.
fn interp_composition() -> Result<(bool, String)> {
    let n = 400;
    let mut worst: (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for &f in &[0.05, 0.1, 0.15, 0.2] {
        let w = 2.0 * std::f64::consts::PI * f;
        let x: Vec<f64> = (0..n).map(|k| (w * k as f64 + 0.4).sin()).collect();
        for &t1 in &[0.15, 0.3, 0.5, 0.8] {
            for &t2 in &[0.1, 0.25, 0.45] {
                let a = delay_sequence(&x, &vec![t1; n], InterpOrder::Cubic)?;
                let ab = delay_sequence(&a, &vec![t2; n], InterpOrder::Cubic)?;
                let c = delay_sequence(&x, &vec![t1 + t2; n], InterpOrder::Cubic)?;
                let e = max_abs_diff(&ab[10..n - 10], &c[10..n - 10]);
                if e > worst.0 {
                    worst = (e, f, t1, t2);
                }
            }
        }
    }
    let (e, f, t1, t2) = worst;
    Ok((e <= 2e-3, format!("max error {e:.3e} at f={f}, tau1={t1}, tau2={t2} (limit 2e-3)")))
}

fn default_frame(n: usize, seed: u64) -> Result<(TrackBits, crate::channel::ChannelMatrixFir)> {
    Ok((generate_bits(2, n, seed)?, build_channel(&ChannelGeometry::two_track(0.5))?))
}

fn channel_determinism() -> Result<(bool, String)> {
    let (bits, ch) = default_frame(2000, 4)?;
    let traj = crate::channel::linear_offset_trajectory(2, 2000, &[0.0, 2e-4])?;
    let noise = NoiseConfig { sigma_awgn: 0.2, sigma_jitter: 0.08, gamma_asym: 0.1, seed: 77 };
    let a = simulate_readback(&bits, &traj, &ch, &noise)?;
    let b = simulate_readback(&bits, &traj, &ch, &noise)?;
    Ok((a == b, "identical inputs give bit-identical readback".into()))
}

fn channel_linearity() -> Result<(bool, String)> {
    let n = 1500;
    let (b1, ch) = default_frame(n, 5)?;
    let b2 = generate_bits(2, n, 6)?;
    let traj = crate::channel::linear_offset_trajectory(2, n, &[0.0, 2e-4])?;
    let sum = &b1.to_f64() + &b2.to_f64();
    let joint = noiseless_readback(sum.view(), &traj, &ch)?;
    let sep = noiseless_readback(b1.to_f64().view(), &traj, &ch)? + noiseless_readback(b2.to_f64().view(), &traj, &ch)?;
    // shared AWGN realization: the same noise adds to both sides
    let noise = NoiseConfig { sigma_awgn: 0.3, sigma_jitter: 0.0, gamma_asym: 0.0, seed: 9 };
    let w = simulate_readback(&b1, &traj, &ch, &noise)?.into_inner() - noiseless_readback(b1.to_f64().view(), &traj, &ch)?;
    let lhs = joint + &w;
    let rhs = sep + &w;
    let err = lhs.iter().zip(rhs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err < 1e-12, format!("superposition error {err:e}")))
}

fn channel_symmetry() -> Result<(bool, String)> {
    let (bits, ch) = default_frame(1500, 7)?;
    let traj = crate::channel::linear_offset_trajectory(2, 1500, &[0.0, 2e-4])?;
    let noise = NoiseConfig::noiseless();
    let a = simulate_readback(&bits, &traj, &ch, &noise)?;
    let b = simulate_readback(&bits.negated(), &traj, &ch, &noise)?;
    let ok = a.samples().iter().zip(b.samples().iter()).all(|(x, y)| *x == -*y);
    Ok((ok, "negated bits give exactly negated readback".into()))
}

fn channel_shift() -> Result<(bool, String)> {
    let n = 1000;
    let (bits, ch) = default_frame(n, 8)?;
    let zero = simulate_readback(&bits, &TimingTrajectory::zeros(2, n), &ch, &NoiseConfig::noiseless())?;
    let m = 3;
    let shifted = simulate_readback(&bits, &TimingTrajectory::new(Array2::from_elem((2, n), m as f64))?, &ch, &NoiseConfig::noiseless())?;
    let edge = 10;
    let a = zero.samples().slice(s![.., edge..n - m - edge]);
    let b = shifted.samples().slice(s![.., edge + m..n - edge]);
    let err = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok((err < 1e-12, format!("integer delay {m}: interior mismatch {err:e}")))
}

fn design_instance(seed: u64) -> Result<(ReadbackFrame, Array2<f64>)> {
    let n = 4000;
    let (bits, ch) = default_frame(n, seed)?;
    let traj = crate::channel::linear_offset_trajectory(2, n, &[0.0, 2e-4])?;
    let noise = NoiseConfig { sigma_awgn: 0.2, sigma_jitter: 0.08, gamma_asym: 0.1, seed: seed + 1 };
    let rb = simulate_readback(&bits, &traj, &ch, &noise)?;
    let delayed = delay_bits(&bits, &traj, InterpOrder::Linear)?;
    Ok((rb, delayed))
}

/// Gradient of the design objective at the returned solution, computed from
/// the residual rather than the normal equations.
fn objective_gradient_norm(
    eq: &crate::targets::MimoFir,
    target: &MatrixTarget,
    r: ArrayView2<f64>,
    delayed: ArrayView2<f64>,
) -> Result<f64> {
    let n = r.ncols();
    let y = crate::targets::equalize_view(eq, r)?;
    let t = target_branch(target, delayed, eq.delay())?;
    let e = &y - &t;
    let mut worst: f64 = 0.0;
    for m in 0..eq.len() {
        let g = e.slice(s![.., m..]).dot(&r.slice(s![.., ..n - m]).t()) * (2.0 / n as f64);
        worst = worst.max(g.iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    for l in 1..target.len() {
        let shift = eq.delay() + l;
        let g = e.slice(s![.., shift..]).dot(&delayed.slice(s![.., ..n - shift]).t()) * (-2.0 / n as f64);
        worst = worst.max(g.iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    Ok(worst)
}

fn target_optimality() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for seed in [11, 12, 13] {
        let (rb, delayed) = design_instance(seed)?;
        let des = design_gpr(&rb, delayed.view(), 3, 15, 7)?;
        let scale = rb.samples().iter().map(|v| v * v).sum::<f64>() / rb.samples().len() as f64;
        let g = objective_gradient_norm(&des.equalizer, &des.target, rb.view(), delayed.view())?;
        ok &= g < 1e-8 * (1.0 + scale) && des.target.is_monic();
        worst = worst.max(g / (1.0 + scale));
    }
    Ok((ok, format!("max |grad| / (1 + R) = {worst:.3e} (limit 1e-8)")))
}

fn target_mse_monotone() -> Result<(bool, String)> {
    let mut ok = true;
    let mut detail = String::new();
    for seed in [21, 22] {
        let (rb, delayed) = design_instance(seed)?;
        let mut prev = f64::INFINITY;
        for w in [3usize, 5, 7, 9, 11, 13, 15] {
            // same delay for every width so the feasible sets nest
            let des = design_gpr(&rb, delayed.view(), 3, w, 2)?;
            let check = gpr_objective(&des.equalizer, &des.target, rb.view(), delayed.view())?;
            ok &= des.mse <= prev * (1.0 + 1e-9) && (check - des.mse).abs() <= 1e-9 * (1.0 + des.mse);
            prev = des.mse;
        }
        detail.push_str(&format!("seed {seed}: final mse {prev:.4}; "));
    }
    Ok((ok, detail.trim_end().into()))
}

/// Mean MM error on track 2 when it sits `delta` behind the reference.
fn ted_mean(delta: f64, eq: &crate::targets::MimoFir, target: &MatrixTarget, bits: &TrackBits) -> Result<(f64, f64)> {
    let n = bits.n_bits();
    let ch = build_channel(&ChannelGeometry::two_track(0.5))?;
    let traj = TimingTrajectory::new(Array2::from_shape_fn((2, n), |(j, _)| if j == 1 { delta } else { 0.0 }))?;
    let noise = NoiseConfig { sigma_awgn: 0.1, sigma_jitter: 0.08, gamma_asym: 0.1, seed: 5 };
    let rb = simulate_readback(bits, &traj, &ch, &noise)?;
    let d = eq.delay();
    let y = equalize_linear(eq, &rb)?;
    let sync = bits.to_f64();
    let refs: Vec<Array2<f64>> = (0..2)
        .map(|j| {
            let mut single = sync.clone();
            single.row_mut(1 - j).fill(0.0);
            target_branch(target, single.view(), 0)
        })
        .collect::<Result<_>>()?;
    let mut es = Vec::with_capacity(n);
    for k in 20..n - d - 20 {
        let own = |kk: usize| -> Vec<f64> { (0..2).map(|o| y[[o, kk + d]] - refs[0][[o, kk]]).collect() };
        let dk: Vec<f64> = refs[1].column(k).to_vec();
        let dp: Vec<f64> = refs[1].column(k - 1).to_vec();
        es.push(ted_mm(&own(k), &own(k - 1), &dk, &dp));
    }
    let m = es.iter().sum::<f64>() / es.len() as f64;
    let var = es.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (es.len() - 1) as f64;
    Ok((m, (var / es.len() as f64).sqrt()))
}

fn ted_s_curve() -> Result<(bool, String)> {
    let n = 20_000;
    let (bits, ch) = default_frame(n, 31)?;
    let rb = simulate_readback(
        &bits,
        &TimingTrajectory::zeros(2, n),
        &ch,
        &NoiseConfig { sigma_awgn: 0.1, sigma_jitter: 0.08, gamma_asym: 0.1, seed: 4 },
    )?;
    let des = design_gpr(&rb, bits.to_f64().view(), 3, 15, 7)?;
    let deltas = [-0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3];
    let pts: Vec<(f64, f64)> = deltas.iter().map(|&d| ted_mean(d, &des.equalizer, &des.target, &bits)).collect::<Result<_>>()?;
    let increasing = pts.windows(2).all(|w| w[1].0 > w[0].0);
    let odd = (0..3).all(|i| {
        let (a, sa) = pts[i];
        let (b, sb) = pts[6 - i];
        (a + b).abs() <= 4.0 * (sa * sa + sb * sb).sqrt() + 0.05 * (b - a).abs()
    });
    let curve: Vec<String> = deltas.iter().zip(&pts).map(|(d, p)| format!("{d:+.1}:{:+.4}", p.0)).collect();
    Ok((increasing && odd, format!("S-curve {}", curve.join(" "))))
}

fn random_target(rng: &mut ChaCha8Rng, len: usize) -> Result<MatrixTarget> {
    let trailing = (1..len)
        .map(|l| {
            let s = 0.7 / l as f64;
            Array2::from_shape_simple_fn((2, 2), || rng.random_range(-s..s))
        })
        .collect();
    MatrixTarget::monic(trailing, 2)
}

fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Result<TimingTrajectory> {
    let start = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let slope = [rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)];
    TimingTrajectory::new(Array2::from_shape_fn((2, n), |(j, k)| start[j] + slope[j] * k as f64))
}

/// Viterbi against exhaustive search on 2-track, 8-bit instances; every
/// fifth trial uses `y = 0`, where every sequence ties with its negation.
pub fn viterbi_exhaustive_trials(trials: usize, seed: u64) -> Result<(usize, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let mut matched = 0;
    let mut first_miss = String::new();
    for t in 0..trials {
        let order = if t % 3 == 2 { InterpOrder::Cubic } else { InterpOrder::Linear };
        let target = random_target(&mut rng, 2 + t % 2)?;
        let traj = random_trajectory(&mut rng, n)?;
        let tr = build_trellis(&target, &traj, order)?;
        let truth = generate_bits(2, n, rng.random())?;
        let rows: Vec<Vec<i8>> = (0..2).map(|j| truth.track(j).to_vec()).collect();
        let sigma = rng.random_range(0.1..1.0);
        let mut y = direct_labels(&target, &traj, order, &rows);
        if t % 5 == 4 {
            y.fill(0.0);
        } else {
            y.mapv_inplace(|v| v + sigma * rng.random_range(-1.0..1.0));
        }
        let (ml, _) = exhaustive_ml(&tr, &traj, y.view())?;
        let (vb, _) = viterbi_decisions(&tr, y.view())?;
        if ml == vb {
            matched += 1;
        } else if first_miss.is_empty() {
            first_miss = format!("; first mismatch at trial {t}");
        }
    }
    Ok((matched, first_miss))
}

fn viterbi_exhaustive() -> Result<(bool, String)> {
    let trials = 100;
    let (matched, miss) = viterbi_exhaustive_trials(trials, 1001)?;
    Ok((matched == trials, format!("{matched}/{trials} exact matches{miss}")))
}

fn viterbi_random_alternatives() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 200;
    let mut ok = true;
    for _ in 0..5 {
        let target = random_target(&mut rng, 3)?;
        let traj = random_trajectory(&mut rng, n)?;
        let truth = generate_bits(2, n, rng.random())?;
        let rows: Vec<Vec<i8>> = (0..2).map(|j| truth.track(j).to_vec()).collect();
        let mut y = direct_labels(&target, &traj, InterpOrder::Linear, &rows);
        y.mapv_inplace(|v| v + 0.5 * rng.random_range(-1.0..1.0));
        let tr = build_trellis(&target, &traj, InterpOrder::Linear)?;
        let est = viterbi_joint(&tr, y.view())?;
        let rows_est: Vec<Vec<i8>> = (0..2).map(|j| est.track(j).to_vec()).collect();
        let cost = |b: &[Vec<i8>]| -> f64 {
            let d = direct_labels(&target, &traj, InterpOrder::Linear, b);
            y.iter().zip(d.iter()).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let best = cost(&rows_est);
        for _ in 0..1000 {
            let alt: Vec<Vec<i8>> = (0..2).map(|_| (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()).collect();
            ok &= best <= cost(&alt) + 1e-9;
        }
    }
    Ok((ok, "winning metric never beaten by 5000 random sequences".into()))
}

fn viterbi_synchronous_split() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 300;
    let (g1, g2) = (0.55, -0.35);
    let target = MatrixTarget::monic(vec![ndarray::array![[g1, 0.0], [0.0, g2]]], 2)?;
    let traj = TimingTrajectory::zeros(2, n);
    let bits = generate_bits(2, n, 3)?;
    let mut y = target_branch(&target, bits.to_f64().view(), 0)?;
    y.mapv_inplace(|v| v + 0.9 * rng.random_range(-1.0..1.0));
    let joint = viterbi_joint(&build_trellis(&target, &traj, InterpOrder::Linear)?, y.view())?;
    let a = viterbi_single(y.row(0).as_slice().expect("contiguous"), g1)?;
    let b = viterbi_single(y.row(1).as_slice().expect("contiguous"), g2)?;
    let ok = joint.track(0).to_vec() == a && joint.track(1).to_vec() == b;
    Ok((ok, "diagonal target: joint equals two single-track runs".into()))
}

fn posterior_enumeration() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let n = 6;
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let order = if t % 2 == 0 { InterpOrder::Linear } else { InterpOrder::Cubic };
        let target = random_target(&mut rng, 2 + t % 2)?;
        let traj = random_trajectory(&mut rng, n)?;
        let tr = build_trellis(&target, &traj, order)?;
        let y = Array2::from_shape_simple_fn((2, n), || rng.random_range(-1.5..1.5));
        let var = rng.random_range(0.2..1.0);
        let (post, _) = enumerated_posteriors(&tr, &traj, y.view(), var)?;
        let soft = forward_backward(&tr, y.view(), var)?;
        for e in tr.entries() {
            worst = worst.max((post[[e.track, e.index]] - soft.posteriors[[e.track, e.index]]).abs());
        }
    }
    Ok((worst < 1e-9, format!("max posterior deviation {worst:.2e} over 20 instances (limit 1e-9)")))
}

/// A 64-sample training instance on the default channel with an offset
/// second track and an untrained default-size network.
pub fn gradient_instance() -> Result<(crate::nn::MlpEqualizer, MatrixTarget, ReadbackFrame, TrackBits, TimingTrajectory)> {
    let n = 64;
    let (bits, ch) = default_frame(n, 51)?;
    let traj = TimingTrajectory::new(Array2::from_shape_fn((2, n), |(j, k)| j as f64 * (0.35 + 8e-4 * k as f64)))?;
    let noise = NoiseConfig { sigma_awgn: 0.2, sigma_jitter: 0.08, gamma_asym: 0.1, seed: 52 };
    let rb = simulate_readback(&bits, &traj, &ch, &noise)?;
    let mlp = init_mlp(&default_dims(2, 2), DEFAULT_HALFWIN, 53)?;
    let target = MatrixTarget::monic(vec![ndarray::array![[0.6, 0.25], [0.2, 0.55]], ndarray::array![[0.15, 0.05], [-0.04, 0.1]]], 2)?;
    Ok((mlp, target, rb, bits, traj))
}

fn summarize(errs: &[ClassError], limit: f64) -> (bool, String) {
    let worst = errs.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).expect("classes");
    (
        errs.iter().all(|e| e.rel_error < limit),
        format!("{} classes, worst {} rel. error {:.2e} (limit {limit:e})", errs.len(), worst.class, worst.rel_error),
    )
}

pub fn gradient_errors_mse() -> Result<Vec<ClassError>> {
    let (mlp, target, rb, bits, traj) = gradient_instance()?;
    check_gradients(&mlp, &target, 1e-5, |m, t| loss_mse(m, t, &rb, &bits, &traj, InterpOrder::Linear))
}

pub fn gradient_errors_xent() -> Result<Vec<ClassError>> {
    let (mlp, target, rb, bits, traj) = gradient_instance()?;
    check_gradients(&mlp, &target, 1e-4, |m, t| loss_xent(m, t, &rb, &bits, &traj, InterpOrder::Linear, 0.5, 512))
}

fn gradient_mse() -> Result<(bool, String)> {
    Ok(summarize(&gradient_errors_mse()?, 1e-5))
}

fn gradient_xent() -> Result<(bool, String)> {
    Ok(summarize(&gradient_errors_xent()?, 1e-4))
}

/// Small noiseless configuration: zero noise, jitter, asymmetry and offset.
pub fn noiseless_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.train_bits = 6000;
    cfg.run.test_bits = 10_000;
    cfg.run.sector_bits = 5000;
    cfg.channel.spacings = vec![0.5];
    cfg.channel.sigma_awgn = vec![0.0];
    cfg.channel.sigma_jitter = 0.0;
    cfg.channel.gamma_asym = 0.0;
    cfg.channel.slopes = vec![0.0];
    cfg.nn.train.epochs = 15;
    cfg
}

fn noiseless_ber() -> Result<(bool, String)> {
    let records = run_experiment(&noiseless_config())?;
    let ok = records.iter().all(|r| r.flag == RunFlag::Ok && r.track_ber.iter().all(|&b| b == 0.0));
    let detail: Vec<String> = records.iter().map(|r| format!("{}={:.2e}", r.system, r.avg_ber())).collect();
    Ok((ok, detail.join(", ")))
}

fn csv_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let records: Vec<BerRecord> = (0..30)
        .map(|i| BerRecord {
            system: SystemId::ALL[i % 3],
            spacing_tp: rng.random_range(0.1..1.5),
            sigma_awgn: rng.random_range(0.0..0.5),
            sigma_jitter: rng.random_range(0.0..0.2),
            slope: rng.random_range(-1e-3..1e-3),
            track_ber: vec![rng.random::<f64>(), rng.random::<f64>() * 1e-4],
            track_bits: vec![rng.random_range(1..1_000_000), rng.random_range(1..1_000_000)],
            flag: if i % 7 == 0 { RunFlag::Diverged } else { RunFlag::Ok },
            train_loss: None,
            wall_time_s: None,
        })
        .collect();
    let back = parse_ber_csv(&ber_csv(&records)?)?;
    let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    let ok = back.len() == records.len()
        && back.iter().zip(&records).all(|(p, r)| {
            p.system == r.system
                && p.flag == r.flag
                && p.track_bits == r.track_bits
                && close(p.spacing_tp, r.spacing_tp)
                && close(p.sigma_awgn, r.sigma_awgn)
                && close(p.sigma_jitter, r.sigma_jitter)
                && close(p.slope, r.slope)
                && p.track_ber.iter().zip(&r.track_ber).all(|(a, b)| close(*a, *b))
        });
    Ok((ok, format!("{} records survive write/parse to 12 significant digits", records.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        for name in [
            "interp_identity",
            "interp_dc",
            "interp_linearity",
            "channel_determinism",
            "channel_linearity",
            "channel_symmetry",
            "channel_shift",
            "csv_round_trip",
            "viterbi_synchronous_split",
        ] {
            let r = run_selftest(Some(name));
            assert!(r.iter().all(|c| c.passed), "{r:?}");
        }
    }

    #[test]
    fn design_checks_pass() {
        for r in run_selftest(Some("target_")) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        assert_eq!(run_selftest(Some("no_such_check")).len(), 0);
        assert_eq!(CHECKS.len(), 19);
    }
}
