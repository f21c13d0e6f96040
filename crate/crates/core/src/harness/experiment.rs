use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;

use super::artifacts::{
    cache_key, cache_path, derive_seed, line_trajectory, LinearArtifact, MisoArtifact, NnArtifact, NnOutcome, TimingLine, TrainedPoint,
};
use super::config::{ExperimentConfig, SweepPoint, SystemId};
use super::results::{ber_csv, write_run_meta, BerRecord, RunFlag, BER_HEADER};
use crate::channel::{
    build_channel, generate_bits, linear_offset_trajectory, simulate_readback, ChannelMatrixFir, NoiseConfig, ReadbackFrame,
    TimingTrajectory, TrackBits,
};
use crate::detector::{viterbi_blockwise, viterbi_single};
use crate::error::{invalid, Error, Result};
use crate::interp::{delay_sequence, InterpOrder};
use crate::nn::{forward, init_mlp, train};
use crate::targets::{delay_bits, design_gpr, design_miso_gpr, equalize_linear};
use crate::timing::{estimate_trajectory, fit_line, PllState, TrajectoryEstimator};

const N_TRACKS: usize = 2;

fn point_parts(p: SweepPoint) -> [u64; 3] {
    [p.spacing.to_bits(), p.sigma_awgn.to_bits(), p.slope.to_bits()]
}

/// One recorded frame with its written bits and true trajectory.
pub struct Frame {
    pub bits: TrackBits,
    pub truth: TimingTrajectory,
    pub readback: ReadbackFrame,
}

fn record_frame(
    cfg: &ExperimentConfig,
    channel: &ChannelMatrixFir,
    p: SweepPoint,
    n: usize,
    bits_seed: u64,
    noise_seed: u64,
) -> Result<Frame> {
    let bits = generate_bits(N_TRACKS, n, bits_seed)?;
    let truth = linear_offset_trajectory(N_TRACKS, n, &[0.0, p.slope])?;
    let noise = NoiseConfig {
        sigma_awgn: p.sigma_awgn,
        sigma_jitter: cfg.channel.sigma_jitter,
        gamma_asym: cfg.channel.gamma_asym,
        seed: noise_seed,
    };
    let readback = simulate_readback(&bits, &truth, channel, &noise)?;
    Ok(Frame { bits, truth, readback })
}

/// Training frame of a sweep point; depends only on the master seed.
pub fn training_frame(cfg: &ExperimentConfig, p: SweepPoint) -> Result<Frame> {
    let channel = build_channel(&cfg.channel.geometry(p.spacing))?;
    let parts = point_parts(p);
    let root = cfg.run.master_seed;
    record_frame(cfg, &channel, p, cfg.run.train_bits, derive_seed(root, "train-bits", &parts), derive_seed(root, "train-noise", &parts))
}

/// Test sector `s` of a sweep point; depends only on the test seed.
pub fn test_sector(cfg: &ExperimentConfig, channel: &ChannelMatrixFir, p: SweepPoint, s: usize, len: usize) -> Result<Frame> {
    let parts = point_parts(p);
    let seed = |domain| derive_seed(cfg.test_seed(), domain, &[parts[0], parts[1], parts[2], s as u64]);
    record_frame(cfg, channel, p, len, seed("test-bits"), seed("test-noise"))
}

fn sector_lengths(cfg: &ExperimentConfig) -> Vec<usize> {
    let (total, len) = (cfg.run.test_bits, cfg.run.sector_bits);
    let mut out = vec![len; total / len];
    if total % len > 0 {
        out.push(total % len);
    }
    out
}

/// `y[k] <- y[k + d]`, zero-filled at the end.
fn advance_by(y: Array2<f64>, d: usize) -> Array2<f64> {
    if d == 0 {
        return y;
    }
    let n = y.ncols();
    let mut out = Array2::zeros(y.dim());
    if d < n {
        out.slice_mut(s![.., ..n - d]).assign(&y.slice(s![.., d..]));
    }
    out
}

fn loop_init(cfg: &ExperimentConfig) -> Result<Vec<Option<PllState>>> {
    let init = PllState::new(cfg.timing.kp, cfg.timing.ki)?;
    Ok((0..N_TRACKS).map(|j| cfg.timing.loop_tracks.contains(&(j + 1)).then_some(init)).collect())
}

/// Line fits over the second half of each looped track's trajectory.
fn fit_lines(traj: &TimingTrajectory, loops: &[Option<PllState>]) -> Result<Vec<TimingLine>> {
    loops
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_some())
        .map(|(j, _)| {
            let (intercept, slope) = fit_line(traj.track(j), traj.len() / 2)?;
            Ok(TimingLine { track: j, intercept, slope })
        })
        .collect()
}

/// Loop states restarted at phase 0 with the given frequency registers.
fn restarted(states: &[Option<PllState>]) -> Result<Vec<Option<PllState>>> {
    states.iter().map(|s| s.map(|s| s.with_phase(0.0, s.freq)).transpose()).collect()
}

/// Linear joint design with two timing passes. Returns the artifact and the
/// loop states after the second pass.
pub fn train_linear(cfg: &ExperimentConfig, frame: &Frame) -> Result<(LinearArtifact, Vec<Option<PllState>>)> {
    let l = &cfg.linear;
    let order = cfg.timing.interp_order;
    let (d, n) = (l.delay(), frame.bits.n_bits());
    let rb = &frame.readback;
    let bits = &frame.bits;

    // acquisition: design on a prefix assuming no offset, then run the loops
    let acq = l.acquisition_len;
    let zero = delay_bits(bits, &TimingTrajectory::zeros(N_TRACKS, n), order)?;
    let prefix = ReadbackFrame::new(rb.samples().slice(s![.., ..acq]).to_owned())?;
    let first = design_gpr(&prefix, zero.slice(s![.., ..acq]), l.target_len, l.eq_len, d)?;
    let y = advance_by(equalize_linear(&first.equalizer, rb)?, d);
    let init = loop_init(cfg)?;
    let run1 = estimate_trajectory(y.view(), bits, &first.target, order, &init)?;

    // tracking: redesign on the whole frame, rerun with the acquired frequency
    let delayed = delay_bits(bits, &run1.trajectory, order)?;
    let second = design_gpr(rb, delayed.view(), l.target_len, l.eq_len, d)?;
    let y = advance_by(equalize_linear(&second.equalizer, rb)?, d);
    let run2 = estimate_trajectory(y.view(), bits, &second.target, order, &restarted(&run1.final_states)?)?;

    let delayed = delay_bits(bits, &run2.trajectory, order)?;
    let last = design_gpr(rb, delayed.view(), l.target_len, l.eq_len, d)?;
    log::debug!("linear design mse {:.5} -> {:.5} -> {:.5}", first.mse, second.mse, last.mse);
    Ok((
        LinearArtifact { equalizer: last.equalizer, target: last.target, mse: last.mse, timing: fit_lines(&run2.trajectory, &init)? },
        run2.final_states,
    ))
}

/// NN equalizer trained jointly with the target, warm-started from the
/// linear design and its acquired loop frequencies.
pub fn train_nn(
    cfg: &ExperimentConfig,
    p: SweepPoint,
    frame: &Frame,
    linear: &LinearArtifact,
    loops: &[Option<PllState>],
) -> Result<NnOutcome> {
    let nn = &cfg.nn;
    let mut dims = vec![N_TRACKS * (2 * nn.halfwin + 1)];
    dims.extend(nn.hidden);
    dims.push(N_TRACKS);
    let parts = point_parts(p);
    let seed = derive_seed(cfg.run.master_seed, "nn-init", &[parts[0], parts[1], parts[2], nn.train.seed]);
    let mlp = init_mlp(&dims, nn.halfwin, seed)?;
    let mut est = TrajectoryEstimator::new(frame.bits.clone(), linear.target.clone(), nn.train.interp_order, restarted(loops)?)?;
    match train(&mlp, &linear.target, &frame.readback, &frame.bits, &mut est, &nn.train) {
        Ok(out) => Ok(NnOutcome::Trained(NnArtifact {
            timing: fit_lines(&out.trajectory, loops)?,
            mlp: out.mlp,
            target: out.target,
            loss_history: out.loss_history,
            noise_var: out.noise_var,
        })),
        Err(Error::TrainingDiverged { epoch }) => {
            log::warn!("nn training diverged at epoch {epoch} (spacing {})", p.spacing);
            Ok(NnOutcome::Diverged { epoch })
        }
        Err(e) => Err(e),
    }
}

/// `r(k + tau_k)` for every reader: undoes a track's delay.
fn resync(rb: &ReadbackFrame, tau: &[f64]) -> Result<ReadbackFrame> {
    let neg: Vec<f64> = tau.iter().map(|t| -t).collect();
    let mut out = Array2::zeros(rb.samples().dim());
    for (i, row) in rb.samples().rows().into_iter().enumerate() {
        let x = delay_sequence(&row.to_vec(), &neg, InterpOrder::Cubic)?;
        out.row_mut(i).assign(&ndarray::Array1::from(x));
    }
    ReadbackFrame::new(out)
}

/// Conventional chain: per-track MISO equalizer with a `[1, g1]` target; the
/// offset track's readback is resampled onto its estimated clock first.
pub fn train_prml(cfg: &ExperimentConfig, frame: &Frame) -> Result<Vec<MisoArtifact>> {
    let l = &cfg.linear;
    let (d, n, acq) = (l.delay(), frame.bits.n_bits(), l.acquisition_len);
    let rb = &frame.readback;
    let init = loop_init(cfg)?;
    let mut out = Vec::with_capacity(N_TRACKS);
    for (j, lp) in init.iter().enumerate() {
        let own = frame.bits.track_f64(j);
        let Some(lp) = lp else {
            let des = design_miso_gpr(rb, &own, l.eq_len, d)?;
            out.push(MisoArtifact { equalizer: des.equalizer, g1: des.target.tap(1)[[0, 0]], mse: des.mse, timing: None });
            continue;
        };
        let prefix = ReadbackFrame::new(rb.samples().slice(s![.., ..acq]).to_owned())?;
        let first = design_miso_gpr(&prefix, &own[..acq], l.eq_len, d)?;
        let y = advance_by(equalize_linear(&first.equalizer, rb)?, d);
        let bits_j = frame.bits.select_tracks(&[j])?;
        let run = estimate_trajectory(y.view(), &bits_j, &first.target, cfg.timing.interp_order, &[Some(*lp)])?;
        let (intercept, slope) = fit_line(run.trajectory.track(0), n / 2)?;
        let line = TimingLine { track: j, intercept, slope };
        let tau = line_trajectory(&[TimingLine { track: 0, ..line }], 1, n)?;
        let synced = resync(rb, tau.track(0))?;
        let des = design_miso_gpr(&synced, &own, l.eq_len, d)?;
        out.push(MisoArtifact { equalizer: des.equalizer, g1: des.target.tap(1)[[0, 0]], mse: des.mse, timing: Some(line) });
    }
    Ok(out)
}

/// Trains every system `cfg` selects at `p`, using the artifact cache when
/// configured.
pub fn train_point(cfg: &ExperimentConfig, p: SweepPoint) -> Result<TrainedPoint> {
    let cached = cfg.run.cache_dir.as_ref().map(|dir| cache_path(dir, &cache_key(cfg, p)));
    if let Some(path) = &cached {
        if path.exists() {
            match TrainedPoint::load(path) {
                Ok(t) if t.point == p && t.covers(&cfg.run.systems) => {
                    log::info!("using cached training for spacing {}", p.spacing);
                    return Ok(t);
                }
                Ok(_) => log::warn!("cache entry {} does not match; retraining", path.display()),
                Err(e) => log::warn!("unreadable cache entry {}: {e}; retraining", path.display()),
            }
        }
    }
    let frame = training_frame(cfg, p)?;
    let (linear, loops) = train_linear(cfg, &frame)?;
    let mut trained = TrainedPoint::new(p, linear);
    if cfg.run.systems.contains(&SystemId::GprmlNn) {
        trained.nn = Some(train_nn(cfg, p, &frame, &trained.linear, &loops)?);
    }
    if cfg.run.systems.contains(&SystemId::PrmlIndependent) {
        trained.prml = Some(train_prml(cfg, &frame)?);
    }
    if let Some(path) = &cached {
        trained.save(path)?;
    }
    Ok(trained)
}

/// Hard decisions of one system on one test sector, aligned with the
/// written bits.
fn detect(cfg: &ExperimentConfig, system: SystemId, trained: &TrainedPoint, frame: &Frame) -> Result<Option<TrackBits>> {
    let n = frame.bits.n_bits();
    let det = &cfg.detector;
    match system {
        SystemId::GprmlLinear => {
            let lin = &trained.linear;
            let y = advance_by(equalize_linear(&lin.equalizer, &frame.readback)?, lin.equalizer.delay());
            let traj = line_trajectory(&lin.timing, N_TRACKS, n)?;
            let order = cfg.timing.interp_order;
            viterbi_blockwise(&lin.target, &traj, order, y.view(), det.block, det.overlap).map(Some)
        }
        SystemId::GprmlNn => match trained.nn.as_ref().ok_or_else(|| invalid!("network not trained"))? {
            NnOutcome::Trained(nn) => {
                let y = forward(&nn.mlp, &frame.readback)?;
                let traj = line_trajectory(&nn.timing, N_TRACKS, n)?;
                let order = cfg.nn.train.interp_order;
                viterbi_blockwise(&nn.target, &traj, order, y.view(), det.block, det.overlap).map(Some)
            }
            NnOutcome::Diverged { .. } => Ok(None),
        },
        SystemId::PrmlIndependent => {
            let chains = trained.prml.as_ref().ok_or_else(|| invalid!("independent chain not trained"))?;
            let mut out = Array2::zeros((N_TRACKS, n));
            for (j, c) in chains.iter().enumerate() {
                let rb = match c.timing {
                    Some(line) => {
                        let tau = line_trajectory(&[TimingLine { track: 0, ..line }], 1, n)?;
                        resync(&frame.readback, tau.track(0))?
                    }
                    None => frame.readback.clone(),
                };
                let y = advance_by(equalize_linear(&c.equalizer, &rb)?, c.equalizer.delay());
                let est = viterbi_single(y.row(0).as_slice().expect("row is contiguous"), c.g1)?;
                out.row_mut(j).assign(&ndarray::Array1::from(est));
            }
            TrackBits::new(out).map(Some)
        }
    }
}

/// Error counts per alignment offset and track.
struct Tally {
    errors: Vec<Vec<u64>>,
    bits: Vec<u64>,
}

impl Tally {
    fn new(search: usize) -> Self {
        Tally { errors: vec![vec![0; N_TRACKS]; 2 * search + 1], bits: vec![0; N_TRACKS] }
    }

    /// Counts `est[k + delta] != bits[k]` over interior `k`.
    fn add(&mut self, est: &TrackBits, bits: &TrackBits, edge: usize, search: usize) {
        let n = bits.n_bits();
        if n <= 2 * edge {
            return;
        }
        for j in 0..N_TRACKS {
            self.bits[j] += (n - 2 * edge) as u64;
            for (si, delta) in (-(search as i64)..=search as i64).enumerate() {
                let errs = (edge..n - edge).filter(|&k| est.get(j, (k as i64 + delta) as usize) != bits.get(j, k)).count();
                self.errors[si][j] += errs as u64;
            }
        }
    }

    /// Per-track BER at the single offset minimizing total errors.
    fn best(&self) -> Vec<f64> {
        let best = self.errors.iter().min_by_key(|e| e.iter().sum::<u64>()).expect("search range is non-empty");
        best.iter().zip(&self.bits).map(|(&e, &n)| if n == 0 { 0.0 } else { e as f64 / n as f64 }).collect()
    }
}

/// BER of every selected system at `p` on fresh test sectors.
pub fn evaluate_point(cfg: &ExperimentConfig, trained: &TrainedPoint) -> Result<Vec<BerRecord>> {
    let p = trained.point;
    let channel = build_channel(&cfg.channel.geometry(p.spacing))?;
    let det = &cfg.detector;
    let edge = det.edge.max(det.align_search);
    let mut tallies: Vec<Tally> = cfg.run.systems.iter().map(|_| Tally::new(det.align_search)).collect();
    let mut diverged = vec![false; cfg.run.systems.len()];
    let mut elapsed = vec![0.0; cfg.run.systems.len()];
    for (s, len) in sector_lengths(cfg).into_iter().enumerate() {
        let frame = test_sector(cfg, &channel, p, s, len)?;
        for (i, &system) in cfg.run.systems.iter().enumerate() {
            let t0 = Instant::now();
            match detect(cfg, system, trained, &frame)? {
                Some(est) => tallies[i].add(&est, &frame.bits, edge, det.align_search),
                None => diverged[i] = true,
            }
            elapsed[i] += t0.elapsed().as_secs_f64();
        }
    }
    Ok(cfg
        .run
        .systems
        .iter()
        .enumerate()
        .map(|(i, &system)| {
            let t = &tallies[i];
            let bits = if diverged[i] {
                let per_track: u64 = sector_lengths(cfg).iter().map(|&n| n.saturating_sub(2 * edge) as u64).sum();
                vec![per_track; N_TRACKS]
            } else {
                t.bits.clone()
            };
            BerRecord {
                system,
                spacing_tp: p.spacing,
                sigma_awgn: p.sigma_awgn,
                sigma_jitter: cfg.channel.sigma_jitter,
                slope: p.slope,
                track_ber: if diverged[i] { vec![0.5; N_TRACKS] } else { t.best() },
                track_bits: bits,
                flag: if diverged[i] { RunFlag::Diverged } else { RunFlag::Ok },
                train_loss: train_loss(trained, system),
                wall_time_s: Some(elapsed[i]),
            }
        })
        .collect())
}

fn train_loss(t: &TrainedPoint, system: SystemId) -> Option<f64> {
    match system {
        SystemId::GprmlLinear => Some(t.linear.mse),
        SystemId::GprmlNn => match t.nn.as_ref()? {
            NnOutcome::Trained(nn) => nn.loss_history.last().copied(),
            NnOutcome::Diverged { .. } => None,
        },
        SystemId::PrmlIndependent => {
            let c = t.prml.as_ref()?;
            Some(c.iter().map(|m| m.mse).sum::<f64>() / c.len() as f64)
        }
    }
}

/// Train and evaluate one sweep point.
pub fn run_point(cfg: &ExperimentConfig, p: SweepPoint) -> Result<Vec<BerRecord>> {
    let t0 = Instant::now();
    let trained = train_point(cfg, p)?;
    let train_time = t0.elapsed().as_secs_f64();
    let mut records = evaluate_point(cfg, &trained)?;
    for r in &mut records {
        r.wall_time_s = r.wall_time_s.map(|t| t + train_time);
    }
    log::info!("spacing {} sigma_awgn {} done in {:.1}s", p.spacing, p.sigma_awgn, t0.elapsed().as_secs_f64());
    Ok(records)
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build().map_err(|e| invalid!("cannot start worker pool: {e}"))
}

/// Every sweep point, in [`ExperimentConfig::points`] order, systems in
/// configured order within a point.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<BerRecord>> {
    cfg.validate()?;
    let points = cfg.points();
    let per_point: Vec<Vec<BerRecord>> = pool(cfg)?.install(|| points.par_iter().map(|&p| run_point(cfg, p)).collect::<Result<_>>())?;
    Ok(per_point.into_iter().flatten().collect())
}

/// [`run_experiment`] writing each point to its own part file under `dir`,
/// then merging them into `ber.csv` and `run_meta.txt`.
pub fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<BerRecord>> {
    cfg.validate()?;
    let parts_dir = dir.join("parts");
    std::fs::create_dir_all(&parts_dir).map_err(|e| Error::io(&parts_dir, e))?;
    let points = cfg.points();
    let paths: Vec<_> = pool(cfg)?.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let records = run_point(cfg, p)?;
                let path = parts_dir.join(format!("point-{i:04}.csv"));
                std::fs::write(&path, ber_csv(&records)?).map_err(|e| Error::io(&path, e))?;
                Ok((path, records))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv_text = String::from(BER_HEADER);
    csv_text.push('\n');
    let mut merged = Vec::new();
    for (path, records) in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        csv_text.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
        merged.extend(records);
    }
    let csv_path = dir.join("ber.csv");
    std::fs::write(&csv_path, csv_text).map_err(|e| Error::io(&csv_path, e))?;
    write_run_meta(&merged, cfg, dir)?;
    std::fs::remove_dir_all(&parts_dir).map_err(|e| Error::io(&parts_dir, e))?;
    Ok(merged)
}

/// Average BER of `system` at `spacing`, over all records that match.
pub fn mean_ber(records: &[BerRecord], system: SystemId, spacing: f64) -> Option<f64> {
    let sel: Vec<&BerRecord> = records.iter().filter(|r| r.system == system && r.spacing_tp == spacing).collect();
    if sel.is_empty() {
        return None;
    }
    Some(sel.iter().map(|r| r.avg_ber()).sum::<f64>() / sel.len() as f64)
}
