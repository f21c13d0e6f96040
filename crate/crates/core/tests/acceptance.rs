//! Acceptance suite: one pass/fail line per criterion. Exits nonzero when
//! any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::{s, Array2};
use tdmr::harness::experiment::training_frame;
use tdmr::harness::selftest::{run_check, CHECKS};
use tdmr::harness::{
    evaluate_point, mean_ber, run_experiment, run_selftest, train_point, ExperimentConfig, NnOutcome, SweepPoint, SystemId,
};
use tdmr::{delay_bits, design_gpr, equalize_linear, estimate_trajectory, PllState, ReadbackFrame, Result, TimingTrajectory};

type Outcome = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn named_checks(names: &[&str]) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for name in names {
        let &(n, f) = CHECKS.iter().find(|(n, _)| n == name).expect("check exists");
        let r = run_check(n, f);
        ok &= r.passed;
        detail.push(format!("{n}: {}", r.detail));
    }
    Ok((ok, detail.join("; ")))
}

fn detection_oracles() -> Outcome {
    named_checks(&["viterbi_exhaustive", "posterior_enumeration"])
}

fn gradient_correctness() -> Outcome {
    named_checks(&["gradient_mse", "gradient_xent"])
}

/// First timing pass of the linear chain: a design on the acquisition prefix
/// assuming no offset, then the loop from zero frequency over 2e4 samples.
fn timing_recovery() -> Outcome {
    let cfg = ExperimentConfig::default();
    let slope = 2e-4;
    let (eq_len, d, acq) = (cfg.linear.eq_len, cfg.linear.delay(), cfg.linear.acquisition_len);
    let order = cfg.timing.interp_order;
    let mut ok = true;
    let mut detail = Vec::new();
    for spacing in [0.3, 0.5, 0.7] {
        for sigma_awgn in [0.1, 0.2] {
            let p = SweepPoint { spacing, sigma_awgn, slope };
            let frame = training_frame(&cfg, p)?;
            let n = frame.bits.n_bits();
            let zero = delay_bits(&frame.bits, &TimingTrajectory::zeros(2, n), order)?;
            let prefix = ReadbackFrame::new(frame.readback.samples().slice(s![.., ..acq]).to_owned())?;
            let design = design_gpr(&prefix, zero.slice(s![.., ..acq]), cfg.linear.target_len, eq_len, d)?;
            let eq = equalize_linear(&design.equalizer, &frame.readback)?;
            let mut y = Array2::zeros(eq.raw_dim());
            y.slice_mut(s![.., ..n - d]).assign(&eq.slice(s![.., d..]));
            let init = [None, Some(PllState::new(cfg.timing.kp, cfg.timing.ki)?)];
            let run = estimate_trajectory(y.view(), &frame.bits, &design.target, order, &init)?;
            let freq = run.freq_history.row(1);
            let worst = freq.slice(s![n / 2..]).iter().map(|f| (f - slope).abs() / slope).fold(0.0, f64::max);
            ok &= worst <= 0.1;
            detail.push(format!("{spacing}/{sigma_awgn}: {:.1}%", 100.0 * worst));
        }
    }
    Ok((ok, format!("worst deviation over last half (spacing/sigma): {} (limit 10%)", detail.join(", "))))
}

fn linear_parity() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.run.systems = vec![SystemId::GprmlNn, SystemId::GprmlLinear];
    cfg.channel.spacings = vec![0.5];
    cfg.channel.sigma_awgn = vec![0.2];
    cfg.channel.slopes = vec![0.0];
    cfg.channel.sigma_jitter = 0.0;
    cfg.channel.gamma_asym = 0.0;
    cfg.timing.loop_tracks = vec![];
    cfg.run.test_bits = 100_000;
    let p = cfg.points()[0];
    let trained = train_point(&cfg, p)?;
    let nn_loss = match &trained.nn {
        Some(NnOutcome::Trained(nn)) => *nn.loss_history.last().expect("at least one epoch"),
        _ => return Ok((false, "network training diverged".into())),
    };
    let records = evaluate_point(&cfg, &trained)?;
    let nn = mean_ber(&records, SystemId::GprmlNn, 0.5).expect("nn record");
    let lin = mean_ber(&records, SystemId::GprmlLinear, 0.5).expect("linear record");
    let loss_ratio = nn_loss / trained.linear.mse;
    let bits = records[0].bits();
    let ok = loss_ratio <= 1.1 && nn <= 1.25 * lin && bits >= 100_000;
    Ok((
        ok,
        format!(
            "nn loss {nn_loss:.4} / design mse {:.4} = {loss_ratio:.3} (limit 1.1); BER nn {nn:.3e} vs linear {lin:.3e}, ratio {:.2} (limit 1.25), {bits} bits",
            trained.linear.mse,
            nn / lin
        ),
    ))
}

fn ber_ordering() -> Outcome {
    let cfg = ExperimentConfig::default();
    let records = run_experiment(&cfg)?;
    let mut ok = true;
    let mut best_ratio = f64::INFINITY;
    let mut detail = Vec::new();
    for &spacing in &cfg.channel.spacings {
        let ber = |s| mean_ber(&records, s, spacing).expect("record for every system");
        let (nn, lin, prml) = (ber(SystemId::GprmlNn), ber(SystemId::GprmlLinear), ber(SystemId::PrmlIndependent));
        ok &= nn < lin && lin < prml;
        if lin > 0.0 {
            best_ratio = best_ratio.min(nn / lin);
        }
        detail.push(format!("{spacing}: nn {nn:.3e} lin {lin:.3e} prml {prml:.3e}"));
    }
    ok &= best_ratio <= 0.8;
    Ok((ok, format!("{}; best nn/linear {best_ratio:.2} (limit 0.8)", detail.join(", "))))
}

fn invariant_suites() -> Outcome {
    let results = run_selftest(None);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{} ({})", r.name, r.detail)).collect();
    if failed.is_empty() {
        Ok((true, format!("{} checks green", results.len())))
    } else {
        Ok((false, format!("{}/{} red: {}", failed.len(), results.len(), failed.join("; "))))
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        ("1 detection oracles", detection_oracles),
        ("2 gradient correctness", gradient_correctness),
        ("3 timing recovery", timing_recovery),
        ("4 linear-optimum parity", linear_parity),
        ("5 BER ordering", ber_ordering),
        ("6 invariant suites", invariant_suites),
    ];
    let mut all = true;
    for (name, f) in criteria {
        let t0 = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        all &= passed;
        println!("{} criterion {name} [{:.1}s]: {detail}", if passed { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
