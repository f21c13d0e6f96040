//! Tanh MLP equalizer trained against the time-varying target.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ReadbackFrame, TimingTrajectory, TrackBits};
use crate::detector::{FbRun, JointTrellis};
use crate::error::{invalid, Error, Result};
use crate::interp::InterpOrder;
use crate::targets::{delayed_bit, MatrixTarget};
use crate::textio;
use crate::timing::{fit_line, TrajectoryEstimator};

pub const DEFAULT_HIDDEN: [usize; 3] = [24, 16, 8];
pub const DEFAULT_HALFWIN: usize = 7;
/// Per-term floor on log-probabilities in the cross-entropy loss.
pub const LOG_FLOOR: f64 = -30.0;

/// Fully connected network `[in, h1, h2, h3, out]`, tanh hidden layers and
/// an affine output. The input at sample `k` is every reader's window
/// `r_i[k - halfwin ..= k + halfwin]`, concatenated reader by reader.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEqualizer {
    dims: Vec<usize>,
    halfwin: usize,
    /// `weights[l]` is `dims[l+1] x dims[l]`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl MlpEqualizer {
    pub fn new(dims: Vec<usize>, halfwin: usize, weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        check_dims(&dims, halfwin)?;
        if weights.len() != 4 || biases.len() != 4 {
            return Err(invalid!("expected 4 weight matrices and 4 bias vectors"));
        }
        for l in 0..4 {
            if weights[l].dim() != (dims[l + 1], dims[l]) || biases[l].len() != dims[l + 1] {
                return Err(invalid!("layer {l} parameters do not match dims {dims:?}"));
            }
        }
        let mlp = MlpEqualizer { dims, halfwin, weights, biases };
        if !mlp.is_finite() {
            return Err(invalid!("non-finite network parameter"));
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn halfwin(&self) -> usize {
        self.halfwin
    }

    pub fn n_readers(&self) -> usize {
        self.dims[0] / (2 * self.halfwin + 1)
    }

    pub fn n_out(&self) -> usize {
        self.dims[4]
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Text form: `mlp halfwin d0 d1 d2 d3 d4`, then each layer's weights
    /// (row-major) followed by its bias row.
    pub fn to_text(&self) -> String {
        let mut header = format!("mlp {}", self.halfwin);
        for d in &self.dims {
            let _ = write!(header, " {d}");
        }
        let mut blocks = Vec::with_capacity(8);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            blocks.push(w.clone());
            blocks.push(b.clone().insert_axis(Axis(0)));
        }
        textio::write_blocks(&header, &blocks)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (h, mut values) = textio::read_header(text, "mlp", 6)?;
        let halfwin = h[0];
        let dims = h[1..].to_vec();
        check_dims(&dims, halfwin).map_err(|e| Error::Parse(e.to_string()))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..4 {
            weights.extend(textio::read_blocks(&mut values, 1, dims[l + 1], dims[l])?);
            let b = textio::read_blocks(&mut values, 1, 1, dims[l + 1])?.remove(0);
            biases.push(b.row(0).to_owned());
        }
        textio::expect_end(&mut values)?;
        MlpEqualizer::new(dims, halfwin, weights, biases)
    }

    /// Input windows for samples `[a, b)`, `in x (b - a)`.
    fn inputs(&self, r: ArrayView2<f64>, a: usize, b: usize) -> Array2<f64> {
        let w = 2 * self.halfwin + 1;
        let n = r.ncols() as i64;
        let mut x = Array2::zeros((self.dims[0], b - a));
        for (c, k) in (a..b).enumerate() {
            for i in 0..r.nrows() {
                for t in 0..w {
                    let idx = k as i64 + t as i64 - self.halfwin as i64;
                    if idx >= 0 && idx < n {
                        x[[i * w + t, c]] = r[[i, idx as usize]];
                    }
                }
            }
        }
        x
    }

    /// Forward pass over samples `[a, b)`, keeping activations.
    fn forward_range(&self, r: ArrayView2<f64>, a: usize, b: usize) -> Activations {
        let mut acts = vec![self.inputs(r, a, b)];
        for l in 0..4 {
            let mut z = self.weights[l].dot(&acts[l]);
            z += &self.biases[l].view().insert_axis(Axis(1));
            if l < 3 {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Activations { acts }
    }

    /// Reverse pass: parameter gradients for the upstream output gradient.
    fn backward(&self, acts: &Activations, grad_y: &Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let mut gw = vec![Array2::zeros((0, 0)); 4];
        let mut gb = vec![Array1::zeros(0); 4];
        let mut delta = grad_y.clone();
        for l in (0..4).rev() {
            gw[l] = delta.dot(&acts.acts[l].t());
            gb[l] = delta.sum_axis(Axis(1));
            if l > 0 {
                let mut up = self.weights[l].t().dot(&delta);
                up.zip_mut_with(&acts.acts[l], |g, h| *g *= 1.0 - h * h);
                delta = up;
            }
        }
        (gw, gb)
    }

    fn check_readback(&self, r: ArrayView2<f64>) -> Result<()> {
        if r.nrows() != self.n_readers() {
            return Err(invalid!("network expects {} readers, readback has {}", self.n_readers(), r.nrows()));
        }
        Ok(())
    }
}

struct Activations {
    acts: Vec<Array2<f64>>,
}

impl Activations {
    fn output(&self) -> &Array2<f64> {
        &self.acts[4]
    }
}

fn check_dims(dims: &[usize], halfwin: usize) -> Result<()> {
    if dims.len() != 5 {
        return Err(invalid!("need [in, h1, h2, h3, out], got {} layer sizes", dims.len()));
    }
    if dims.contains(&0) {
        return Err(invalid!("layer sizes must be positive: {dims:?}"));
    }
    if !dims[0].is_multiple_of(2 * halfwin + 1) {
        return Err(invalid!("input width {} is not a multiple of the window length {}", dims[0], 2 * halfwin + 1));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(layer_dims: &[usize], halfwin: usize, seed: u64) -> Result<MlpEqualizer> {
    check_dims(layer_dims, halfwin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(4);
    let mut biases = Vec::with_capacity(4);
    for l in 0..4 {
        let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-a..=a)));
        biases.push(Array1::zeros(fan_out));
    }
    MlpEqualizer::new(layer_dims.to_vec(), halfwin, weights, biases)
}

/// Default layer sizes for `n_readers` readers and `n_out` outputs.
pub fn default_dims(n_readers: usize, n_out: usize) -> Vec<usize> {
    let mut d = vec![n_readers * (2 * DEFAULT_HALFWIN + 1)];
    d.extend(DEFAULT_HIDDEN);
    d.push(n_out);
    d
}

/// Equalized frame, `n_out x n_samples`.
pub fn forward(mlp: &MlpEqualizer, readback: &ReadbackFrame) -> Result<Array2<f64>> {
    forward_view(mlp, readback.view())
}

pub(crate) fn forward_view(mlp: &MlpEqualizer, r: ArrayView2<f64>) -> Result<Array2<f64>> {
    mlp.check_readback(r)?;
    let n = r.ncols();
    let mut out = Array2::zeros((mlp.n_out(), n));
    // chunked to bound activation memory
    let chunk = 4096;
    for a in (0..n).step_by(chunk) {
        let b = (a + chunk).min(n);
        let acts = mlp.forward_range(r, a, b);
        out.slice_mut(s![.., a..b]).assign(acts.output());
    }
    Ok(out)
}

/// Gradients of a training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Trailing target taps `G_1 .. G_{L-1}`; the monic tap is fixed.
    pub target: Vec<Array2<f64>>,
}

impl Gradients {
    fn zeros(mlp: &MlpEqualizer, target: &MatrixTarget) -> Self {
        Gradients {
            weights: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: mlp.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            target: target.taps()[1..].iter().map(|g| Array2::zeros(g.raw_dim())).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(s, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(s, b);
        }
        for (a, b) in self.target.iter_mut().zip(&other.target) {
            a.scaled_add(s, b);
        }
    }

    /// Euclidean norm over every entry, target taps included.
    pub fn norm(&self) -> f64 {
        let sq = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v * v).sum::<f64>();
        (self.weights.iter().map(|w| sq(&mut w.iter())).sum::<f64>()
            + self.biases.iter().map(|b| sq(&mut b.iter())).sum::<f64>()
            + self.target.iter().map(|g| sq(&mut g.iter())).sum::<f64>())
        .sqrt()
    }
}

/// Delayed bits `b~[m]` for `m` in `[a - (L-1), b)`, column `m - a + L - 1`.
fn delayed_window(bits: &TrackBits, tau: ArrayView2<f64>, order: InterpOrder, lead: usize, a: usize, b: usize) -> Array2<f64> {
    let mut out = Array2::zeros((bits.n_tracks(), b - a + lead));
    for j in 0..bits.n_tracks() {
        for c in 0..out.ncols() {
            let m = a as i64 + c as i64 - lead as i64;
            if m >= 0 {
                out[[j, c]] = delayed_bit(bits, j, m, tau[[j, m as usize]], order);
            }
        }
    }
    out
}

/// Target branch over `[a, b)` from a delayed window with `lead = L - 1`
/// leading columns.
fn branch_from_window(target: &MatrixTarget, window: &Array2<f64>, len: usize) -> Array2<f64> {
    let lead = target.len() - 1;
    let mut t = Array2::zeros((target.n_out(), len));
    for (l, g) in target.taps().iter().enumerate() {
        let src = window.slice(s![.., lead - l..lead - l + len]);
        t += &g.dot(&src);
    }
    t
}

fn check_training_inputs(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: ArrayView2<f64>,
    bits: &TrackBits,
    tau: ArrayView2<f64>,
) -> Result<()> {
    mlp.check_readback(readback)?;
    if !target.is_monic() {
        return Err(invalid!("training requires a monic target"));
    }
    if target.n_out() != mlp.n_out() || target.n_tracks() != bits.n_tracks() {
        return Err(invalid!("target, network and bits disagree on dimensions"));
    }
    let n = readback.ncols();
    if bits.n_bits() != n || tau.ncols() != n || tau.nrows() != bits.n_tracks() {
        return Err(invalid!("readback, bits and trajectory lengths differ"));
    }
    Ok(())
}

/// Mean squared error and its gradient over samples `[a, b)`.
#[allow(clippy::too_many_arguments)]
fn mse_range(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: ArrayView2<f64>,
    bits: &TrackBits,
    tau: ArrayView2<f64>,
    order: InterpOrder,
    a: usize,
    b: usize,
) -> (f64, Gradients) {
    let len = b - a;
    let lead = target.len() - 1;
    let acts = mlp.forward_range(readback, a, b);
    let window = delayed_window(bits, tau, order, lead, a, b);
    let t = branch_from_window(target, &window, len);
    let resid = acts.output() - &t;
    let loss = resid.iter().map(|e| e * e).sum::<f64>() / len as f64;
    let grad_y = resid.mapv(|e| 2.0 * e / len as f64);
    let (gw, gb) = mlp.backward(&acts, &grad_y);
    let gt = (1..target.len()).map(|l| -grad_y.dot(&window.slice(s![.., lead - l..lead - l + len]).t())).collect();
    (loss, Gradients { weights: gw, biases: gb, target: gt })
}

/// Squared-error loss `(1/N) sum_k ||y_k - sum_l G_l b~[k-l]||^2` against the
/// target branch built with `traj`, and its gradient.
pub fn loss_mse(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: &ReadbackFrame,
    bits: &TrackBits,
    traj: &TimingTrajectory,
    order: InterpOrder,
) -> Result<(f64, Gradients)> {
    let r = readback.view();
    let tau = traj.as_array().view();
    check_training_inputs(mlp, target, r, bits, tau)?;
    Ok(mse_range(mlp, target, r, bits, tau, order, 0, r.ncols()))
}

/// Summed clamped cross-entropy and gradient over one detector block.
#[allow(clippy::too_many_arguments)]
fn xent_block(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: ArrayView2<f64>,
    bits: &TrackBits,
    traj: &TimingTrajectory,
    order: InterpOrder,
    noise_var: f64,
    a: usize,
    b: usize,
    scale: f64,
) -> Result<(f64, Gradients)> {
    let acts = mlp.forward_range(readback, a, b);
    let trellis = JointTrellis::for_block(target, traj, order, a, b, bits.n_bits())?;
    let run = FbRun::new(&trellis, acts.output().view(), noise_var)?;
    let mut loss = 0.0;
    let upstream: Vec<(f64, f64)> = trellis
        .entries()
        .zip(run.log_posteriors())
        .map(|(e, &(lp, lm))| {
            let (l, plus) = if bits.get(e.track, e.index) == 1 { (lp, true) } else { (lm, false) };
            let clamped = l < LOG_FLOOR;
            loss -= l.max(LOG_FLOOR);
            let g = if clamped { 0.0 } else { -scale };
            if plus {
                (g, 0.0)
            } else {
                (0.0, g)
            }
        })
        .collect();
    let fb = run.backward(&upstream)?;
    let (gw, gb) = mlp.backward(&acts, &fb.y);
    Ok((loss * scale, Gradients { weights: gw, biases: gb, target: fb.target.into_iter().skip(1).collect() }))
}

/// Cross-entropy between the written bits and the forward-backward
/// posteriors of the equalized frame, detected in blocks of `block`
/// samples, normalized per bit. Log-probabilities are floored at
/// [`LOG_FLOOR`].
#[allow(clippy::too_many_arguments)]
pub fn loss_xent(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: &ReadbackFrame,
    bits: &TrackBits,
    traj: &TimingTrajectory,
    order: InterpOrder,
    noise_var: f64,
    block: usize,
) -> Result<(f64, Gradients)> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(invalid!("noise variance must be positive, got {noise_var}"));
    }
    if block == 0 {
        return Err(invalid!("block length must be positive"));
    }
    let r = readback.view();
    check_training_inputs(mlp, target, r, bits, traj.as_array().view())?;
    let n = r.ncols();
    let scale = 1.0 / (n * bits.n_tracks()) as f64;
    let mut total = 0.0;
    let mut grads = Gradients::zeros(mlp, target);
    for a in (0..n).step_by(block) {
        let b = (a + block).min(n);
        let (l, g) = xent_block(mlp, target, r, bits, traj, order, noise_var, a, b, scale)?;
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MseTarget,
    XentDetector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub learning_rate: f64,
    /// Samples per update; in cross-entropy mode also the detector block.
    pub batch_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_trainable: bool,
    pub grad_clip: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub interp_order: InterpOrder,
    /// Epochs during which the timing loops coast instead of updating.
    pub pll_freeze_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::MseTarget,
            learning_rate: 0.02,
            batch_len: 64,
            epochs: 40,
            seed: 1,
            target_trainable: true,
            grad_clip: 5.0,
            lr_decay_every: 20,
            lr_decay: 0.5,
            interp_order: InterpOrder::Linear,
            pll_freeze_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid!("learning rate must be non-negative"));
        }
        if self.batch_len == 0 {
            return Err(invalid!("batch length must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid!("gradient clip must be positive"));
        }
        if self.lr_decay_every == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid!("learning-rate decay needs a positive period and a factor in (0, 1]"));
        }
        Ok(())
    }

    fn rate(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mlp: MlpEqualizer,
    pub target: MatrixTarget,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Trajectory estimated during the last epoch.
    pub trajectory: TimingTrajectory,
    /// Per-component residual variance at the end of training.
    pub noise_var: f64,
}

fn residual_variance(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: ArrayView2<f64>,
    bits: &TrackBits,
    tau: ArrayView2<f64>,
    order: InterpOrder,
) -> f64 {
    let n = readback.ncols();
    let mut total = 0.0;
    let chunk = 4096;
    for a in (0..n).step_by(chunk) {
        let b = (a + chunk).min(n);
        let y = mlp.forward_range(readback, a, b);
        let w = delayed_window(bits, tau, order, target.len() - 1, a, b);
        let t = branch_from_window(target, &w, b - a);
        total += (y.output() - &t).iter().map(|e| e * e).sum::<f64>();
    }
    total / (n * target.n_out()) as f64
}

fn apply_step(mlp: &mut MlpEqualizer, target: &mut MatrixTarget, g: &Gradients, rate: f64, clip: f64, train_target: bool) {
    let norm = g.norm();
    let s = if norm > clip { rate * clip / norm } else { rate };
    for (w, gw) in mlp.weights.iter_mut().zip(&g.weights) {
        w.scaled_add(-s, gw);
    }
    for (b, gb) in mlp.biases.iter_mut().zip(&g.biases) {
        b.scaled_add(-s, gb);
    }
    if train_target {
        for (t, gt) in target.trailing_mut().iter_mut().zip(&g.target) {
            t.scaled_add(-s, gt);
        }
    }
}

/// Joint training of the network and the trailing target taps. Each epoch
/// walks the frame in order with the timing loops restarted at the phase the
/// previous epoch's estimate extrapolates to at frame start (frequency
/// registers carry over); every batch first advances the
/// loops on the current equalized output, then takes one clipped SGD step.
pub fn train(
    mlp: &MlpEqualizer,
    target: &MatrixTarget,
    readback: &ReadbackFrame,
    bits: &TrackBits,
    estimator: &mut TrajectoryEstimator,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let r = readback.view();
    let n = r.ncols();
    let mut mlp = mlp.clone();
    let mut target = target.clone();
    let mut phase0: Vec<f64> = estimator.loops().iter().map(|l| l.map_or(0.0, |s| s.mu)).collect();
    estimator.restart(&phase0);
    let mut traj = estimator.trajectory()?;
    check_training_inputs(&mlp, &target, r, bits, traj.as_array().view())?;
    estimator.set_target(target.clone())?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut noise_var = residual_variance(&mlp, &target, r, bits, traj.as_array().view(), cfg.interp_order);
    for epoch in 0..cfg.epochs {
        let rate = cfg.rate(epoch);
        let frozen = epoch < cfg.pll_freeze_epochs;
        estimator.restart(&phase0);
        if frozen {
            traj = estimator.trajectory()?;
        }
        let noise = noise_var.max(1e-6);
        let mut epoch_loss = 0.0;
        for a in (0..n).step_by(cfg.batch_len) {
            let b = (a + cfg.batch_len).min(n);
            if !frozen {
                let y = mlp.forward_range(r, a, b);
                estimator.advance(y.output().view())?;
            }
            let (loss, grads) = match cfg.loss_mode {
                LossMode::MseTarget => {
                    let tau = if frozen { traj.as_array().view() } else { estimator.tau_raw().view() };
                    mse_range(&mlp, &target, r, bits, tau, cfg.interp_order, a, b)
                }
                LossMode::XentDetector => {
                    if !frozen {
                        traj = estimator.trajectory()?;
                    }
                    let scale = 1.0 / ((b - a) * bits.n_tracks()) as f64;
                    xent_block(&mlp, &target, r, bits, &traj, cfg.interp_order, noise, a, b, scale)?
                }
            };
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * (b - a) as f64;
            apply_step(&mut mlp, &mut target, &grads, rate, cfg.grad_clip, cfg.target_trainable);
            if cfg.target_trainable {
                estimator.set_target(target.clone())?;
            }
        }
        history.push(epoch_loss / n as f64);
        if !frozen {
            traj = estimator.trajectory()?;
            // the next pass starts where this one's line says frame start is
            for (j, (p, l)) in phase0.iter_mut().zip(estimator.loops()).enumerate() {
                if l.is_some() {
                    *p = fit_line(traj.track(j), n / 2)?.0;
                }
            }
        }
        noise_var = residual_variance(&mlp, &target, r, bits, traj.as_array().view(), cfg.interp_order);
        if !noise_var.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {:.6} noise_var {:.5}", history[epoch], noise_var);
    }
    Ok(TrainOutcome { mlp, target, loss_history: history, trajectory: traj, noise_var })
}

/// Parameter class label, e.g. `W2`, `b0`, `G1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassError {
    pub class: String,
    /// `||fd - g|| / max(||fd||, ||g||)` over the class.
    pub rel_error: f64,
}

/// Compares reverse-mode gradients against central differences for every
/// parameter of every class. `loss` evaluates `(loss, grads)` for given
/// parameters.
pub fn check_gradients<F>(mlp: &MlpEqualizer, target: &MatrixTarget, eps: f64, loss: F) -> Result<Vec<ClassError>>
where
    F: Fn(&MlpEqualizer, &MatrixTarget) -> Result<(f64, Gradients)>,
{
    let (_, g) = loss(mlp, target)?;
    let mut out = Vec::new();
    let rel = |fd: &[f64], an: &[f64]| {
        let diff: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = an.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    };
    let central = |set: &dyn Fn(&mut MlpEqualizer, &mut MatrixTarget, f64)| -> Result<f64> {
        let (mut m, mut t) = (mlp.clone(), target.clone());
        set(&mut m, &mut t, eps);
        let up = loss(&m, &t)?.0;
        let (mut m, mut t) = (mlp.clone(), target.clone());
        set(&mut m, &mut t, -eps);
        let down = loss(&m, &t)?.0;
        Ok((up - down) / (2.0 * eps))
    };
    for l in 0..4 {
        let (rows, cols) = mlp.weights[l].dim();
        let mut fd = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                fd.push(central(&|m, _, d| m.weights[l][[r, c]] += d)?);
            }
        }
        out.push(ClassError { class: format!("W{l}"), rel_error: rel(&fd, &g.weights[l].iter().copied().collect::<Vec<_>>()) });
        let fd = (0..mlp.biases[l].len()).map(|i| central(&|m, _, d| m.biases[l][i] += d)).collect::<Result<Vec<_>>>()?;
        out.push(ClassError { class: format!("b{l}"), rel_error: rel(&fd, &g.biases[l].to_vec()) });
    }
    for l in 1..target.len() {
        let (rows, cols) = target.tap(l).dim();
        let mut fd = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                fd.push(central(&|_, t, d| t.trailing_mut()[l - 1][[r, c]] += d)?);
            }
        }
        out.push(ClassError { class: format!("G{l}"), rel_error: rel(&fd, &g.target[l - 1].iter().copied().collect::<Vec<_>>()) });
    }
    Ok(out)
}

/// `epoch,loss` rows.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{e},{l:e}");
    }
    out
}
