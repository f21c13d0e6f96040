//! Trained per-point systems and their on-disk form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SweepPoint, SystemId};
use crate::channel::TimingTrajectory;
use crate::error::{Error, Result};
use crate::nn::MlpEqualizer;
use crate::targets::{MatrixTarget, MimoFir};

const FORMAT_VERSION: u32 = 1;

pub(crate) trait TextForm: Sized {
    fn to_text(&self) -> String;
    fn from_text(text: &str) -> Result<Self>;
}

macro_rules! text_form {
    ($($t:ty),*) => {$(
        impl TextForm for $t {
            fn to_text(&self) -> String {
                <$t>::to_text(self)
            }
            fn from_text(text: &str) -> Result<Self> {
                <$t>::from_text(text)
            }
        }
    )*};
}
text_form!(MimoFir, MatrixTarget, MlpEqualizer);

mod as_text {
    use super::TextForm;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: TextForm, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_text())
    }

    pub fn deserialize<'de, T: TextForm, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        let text = String::deserialize(d)?;
        T::from_text(&text).map_err(serde::de::Error::custom)
    }
}

/// `tau ~ intercept + slope * k` for one track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingLine {
    /// 0-based track index.
    pub track: usize,
    pub intercept: f64,
    pub slope: f64,
}

/// Straight-line trajectory over `len` samples; tracks without a line stay
/// at zero.
pub fn line_trajectory(lines: &[TimingLine], n_tracks: usize, len: usize) -> Result<TimingTrajectory> {
    let mut tau = ndarray::Array2::zeros((n_tracks, len));
    for l in lines {
        for k in 0..len {
            tau[[l.track, k]] = l.intercept + l.slope * k as f64;
        }
    }
    TimingTrajectory::new(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearArtifact {
    #[serde(with = "as_text")]
    pub equalizer: MimoFir,
    #[serde(with = "as_text")]
    pub target: MatrixTarget,
    pub mse: f64,
    pub timing: Vec<TimingLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnArtifact {
    #[serde(with = "as_text")]
    pub mlp: MlpEqualizer,
    #[serde(with = "as_text")]
    pub target: MatrixTarget,
    pub timing: Vec<TimingLine>,
    pub loss_history: Vec<f64>,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NnOutcome {
    Trained(NnArtifact),
    Diverged { epoch: usize },
}

/// One track's equalizer and `[1, g1]` target in the independent chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisoArtifact {
    #[serde(with = "as_text")]
    pub equalizer: MimoFir,
    pub g1: f64,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPoint {
    pub version: u32,
    pub point: SweepPoint,
    pub linear: LinearArtifact,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nn: Option<NnOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prml: Option<Vec<MisoArtifact>>,
}

impl TrainedPoint {
    pub fn new(point: SweepPoint, linear: LinearArtifact) -> Self {
        TrainedPoint { version: FORMAT_VERSION, point, linear, nn: None, prml: None }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: TrainedPoint = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if t.version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported artifact version {}", t.version)));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Whether this holds everything `systems` needs.
    pub fn covers(&self, systems: &[SystemId]) -> bool {
        systems.iter().all(|s| match s {
            SystemId::GprmlLinear => true,
            SystemId::GprmlNn => self.nn.is_some(),
            SystemId::PrmlIndependent => self.prml.is_some(),
        })
    }
}

/// The part of the configuration that determines training.
#[derive(Serialize)]
struct TrainingSlice<'a> {
    version: u32,
    point: SweepPoint,
    master_seed: u64,
    train_bits: usize,
    systems: Vec<SystemId>,
    sigma_jitter: f64,
    gamma_asym: f64,
    w50_cross: f64,
    sigma_p: f64,
    pulse_halflen: usize,
    linear: &'a super::config::LinearSection,
    timing: &'a super::config::TimingSection,
    nn: &'a super::config::NnSection,
}

/// Content hash of the training inputs for `point`.
pub fn cache_key(cfg: &ExperimentConfig, point: SweepPoint) -> String {
    let mut systems = cfg.run.systems.clone();
    systems.sort();
    systems.dedup();
    let slice = TrainingSlice {
        version: FORMAT_VERSION,
        point,
        master_seed: cfg.run.master_seed,
        train_bits: cfg.run.train_bits,
        systems,
        sigma_jitter: cfg.channel.sigma_jitter,
        gamma_asym: cfg.channel.gamma_asym,
        w50_cross: cfg.channel.w50_cross,
        sigma_p: cfg.channel.sigma_p,
        pulse_halflen: cfg.channel.pulse_halflen,
        linear: &cfg.linear,
        timing: &cfg.timing,
        nn: &cfg.nn,
    };
    let text = toml::to_string(&slice).expect("slice is serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.toml"))
}

/// Seed for `domain` under `root`, independent across domains and parts.
pub fn derive_seed(root: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_mlp;
    use ndarray::array;

    fn sample() -> TrainedPoint {
        let linear = LinearArtifact {
            equalizer: MimoFir::new(vec![array![[1.0, 0.5], [0.25, -1.0 / 3.0]]], 0).unwrap(),
            target: MatrixTarget::monic(vec![array![[0.1, 0.2], [0.3, 0.4]]], 2).unwrap(),
            mse: 0.123,
            timing: vec![TimingLine { track: 1, intercept: -0.01, slope: 2.0001e-4 }],
        };
        let mut t = TrainedPoint::new(SweepPoint { spacing: 0.5, sigma_awgn: 0.2, slope: 2e-4 }, linear.clone());
        t.nn = Some(NnOutcome::Trained(NnArtifact {
            mlp: init_mlp(&[30, 4, 3, 2, 2], 7, 1).unwrap(),
            target: linear.target.clone(),
            timing: linear.timing.clone(),
            loss_history: vec![0.5, 0.25],
            noise_var: 0.07,
        }));
        t.prml =
            Some(vec![MisoArtifact { equalizer: MimoFir::new(vec![array![[1.0, 0.5]]], 0).unwrap(), g1: 0.4, mse: 0.2, timing: None }]);
        t
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let t = sample();
        assert_eq!(TrainedPoint::from_toml(&t.to_toml().unwrap()).unwrap(), t);
        let mut d = sample();
        d.nn = Some(NnOutcome::Diverged { epoch: 3 });
        assert_eq!(TrainedPoint::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn cache_key_ignores_test_side() {
        let cfg = ExperimentConfig::default();
        let p = cfg.points()[0];
        let mut other = cfg.clone();
        other.run.test_seed = Some(99);
        other.run.test_bits *= 2;
        other.detector.block = 1024;
        assert_eq!(cache_key(&cfg, p), cache_key(&other, p));
        other.run.master_seed += 1;
        assert_ne!(cache_key(&cfg, p), cache_key(&other, p));
    }

    #[test]
    fn seeds_differ_by_domain() {
        assert_ne!(derive_seed(1, "train-bits", &[0]), derive_seed(1, "test-bits", &[0]));
        assert_ne!(derive_seed(1, "train-bits", &[0]), derive_seed(1, "train-bits", &[1]));
        assert_eq!(derive_seed(5, "x", &[2, 3]), derive_seed(5, "x", &[2, 3]));
    }

    #[test]
    fn line_trajectory_values() {
        let l = [TimingLine { track: 1, intercept: 0.5, slope: 1e-4 }];
        let t = line_trajectory(&l, 2, 10).unwrap();
        assert_eq!(t.get(0, 9), 0.0);
        assert!((t.get(1, 9) - 0.5009).abs() < 1e-15);
    }
}
