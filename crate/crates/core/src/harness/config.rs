use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelGeometry, SLEW_MAX};
use crate::error::{invalid, Error, Result};
use crate::interp::InterpOrder;
use crate::nn::{TrainConfig, DEFAULT_HALFWIN, DEFAULT_HIDDEN};
use crate::timing::{DEFAULT_KI, DEFAULT_KP};

pub const MIN_TEST_BITS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    GprmlNn,
    GprmlLinear,
    PrmlIndependent,
}

impl SystemId {
    pub const ALL: [SystemId; 3] = [SystemId::GprmlNn, SystemId::GprmlLinear, SystemId::PrmlIndependent];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::GprmlNn => "gprml_nn",
            SystemId::GprmlLinear => "gprml_linear",
            SystemId::PrmlIndependent => "prml_independent",
        }
    }
}

impl std::str::FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| Error::Parse(format!("unknown system '{s}'")))
    }
}

impl std::fmt::Display for SystemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
    /// Root of the test-data streams; defaults to `master_seed`. Training
    /// never reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_seed: Option<u64>,
    pub systems: Vec<SystemId>,
    pub train_bits: usize,
    pub test_bits: usize,
    /// Test bits are recorded in independent sectors of this length, each
    /// starting at zero timing offset.
    pub sector_bits: usize,
    /// Worker threads for sweep points; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    /// Reader spacings in track pitches.
    pub spacings: Vec<f64>,
    pub sigma_awgn: Vec<f64>,
    pub sigma_jitter: f64,
    pub gamma_asym: f64,
    /// Writer frequency offsets of the second track, in bit periods per bit.
    pub slopes: Vec<f64>,
    pub w50_cross: f64,
    pub sigma_p: f64,
    pub pulse_halflen: usize,
}

impl ChannelSection {
    pub fn geometry(&self, spacing: f64) -> ChannelGeometry {
        ChannelGeometry {
            w50_cross: self.w50_cross,
            sigma_p: self.sigma_p,
            pulse_halflen: self.pulse_halflen,
            ..ChannelGeometry::two_track(spacing)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    pub eq_len: usize,
    /// Equalizer decision delay; defaults to the window centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<usize>,
    pub target_len: usize,
    /// Samples used for the first design, before any timing estimate.
    pub acquisition_len: usize,
}

impl LinearSection {
    pub fn delay(&self) -> usize {
        self.delay.unwrap_or((self.eq_len - 1) / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub kp: f64,
    pub ki: f64,
    pub interp_order: InterpOrder,
    /// 1-based indices of tracks written with a frequency offset; only these
    /// run a timing loop.
    pub loop_tracks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnSection {
    pub hidden: [usize; 3],
    pub halfwin: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub block: usize,
    pub overlap: usize,
    /// Bits excluded from error counting at each sector edge.
    pub edge: usize,
    /// Alignment search half-width around the nominal delay.
    pub align_search: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub channel: ChannelSection,
    pub linear: LinearSection,
    pub timing: TimingSection,
    pub nn: NnSection,
    pub detector: DetectorSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunSection {
                master_seed: 2024,
                test_seed: None,
                systems: SystemId::ALL.to_vec(),
                train_bits: 20_000,
                test_bits: 100_000,
                sector_bits: 20_000,
                workers: 0,
                cache_dir: None,
                output_dir: PathBuf::from("results"),
            },
            channel: ChannelSection {
                spacings: vec![0.3, 0.5, 0.7],
                sigma_awgn: vec![0.2],
                sigma_jitter: 0.08,
                gamma_asym: 0.1,
                slopes: vec![2e-4],
                w50_cross: 0.7,
                sigma_p: 0.8,
                pulse_halflen: 6,
            },
            linear: LinearSection { eq_len: 15, delay: None, target_len: 3, acquisition_len: 3000 },
            timing: TimingSection { kp: DEFAULT_KP, ki: DEFAULT_KI, interp_order: InterpOrder::Linear, loop_tracks: vec![2] },
            nn: NnSection { hidden: DEFAULT_HIDDEN, halfwin: DEFAULT_HALFWIN, train: TrainConfig::default() },
            detector: DetectorSection { block: 4096, overlap: 48, edge: 10, align_search: 2 },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn test_seed(&self) -> u64 {
        self.run.test_seed.unwrap_or(self.run.master_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.test_bits < MIN_TEST_BITS {
            return Err(invalid!("test_bits must be at least {MIN_TEST_BITS}, got {}", r.test_bits));
        }
        if r.systems.is_empty() {
            return Err(invalid!("no systems selected"));
        }
        if r.sector_bits <= 2 * self.detector.edge + 2 * self.detector.align_search {
            return Err(invalid!("sector_bits {} leaves no interior bits", r.sector_bits));
        }
        if r.train_bits < self.linear.acquisition_len || self.linear.acquisition_len < 4 * self.linear.eq_len {
            return Err(invalid!("acquisition_len must lie in [4*eq_len, train_bits]"));
        }
        let c = &self.channel;
        if c.spacings.is_empty() || c.sigma_awgn.is_empty() || c.slopes.is_empty() {
            return Err(invalid!("spacings, sigma_awgn and slopes must be non-empty"));
        }
        if c.sigma_awgn.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid!("sigma_awgn values must be non-negative"));
        }
        if c.slopes.iter().any(|s| !(s.abs() <= SLEW_MAX)) {
            return Err(invalid!("slopes must not exceed the slew limit {SLEW_MAX:e}"));
        }
        for &s in &c.spacings {
            c.geometry(s).validate()?;
        }
        let l = &self.linear;
        if l.eq_len == 0 || l.target_len < 1 || l.delay() >= l.eq_len {
            return Err(invalid!("linear equalizer needs eq_len >= 1, target_len >= 1, delay < eq_len"));
        }
        let t = &self.timing;
        crate::timing::PllState::new(t.kp, t.ki)?;
        if t.loop_tracks.iter().any(|&j| j == 0 || j > 2) {
            return Err(invalid!("loop_tracks are 1-based indices of the two tracks"));
        }
        if self.nn.hidden.contains(&0) {
            return Err(invalid!("hidden layer widths must be positive"));
        }
        self.nn.train.validate()?;
        if self.detector.block == 0 {
            return Err(invalid!("detector block must be positive"));
        }
        Ok(())
    }

    /// Every (spacing, sigma_awgn, slope) combination, spacing-major.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &spacing in &self.channel.spacings {
            for &sigma_awgn in &self.channel.sigma_awgn {
                for &slope in &self.channel.slopes {
                    out.push(SweepPoint { spacing, sigma_awgn, slope });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub spacing: f64,
    pub sigma_awgn: f64,
    pub slope: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn checked_in_config_matches_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        assert_eq!(ExperimentConfig::from_toml(text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_short_test_runs_and_unknown_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.test_bits = 9_999;
        assert!(cfg.validate().is_err());
        let text = ExperimentConfig::default().to_toml().replace("[run]", "[run]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn system_names() {
        for id in SystemId::ALL {
            assert_eq!(id.as_str().parse::<SystemId>().unwrap(), id);
        }
        assert!("viterbi".parse::<SystemId>().is_err());
    }

    #[test]
    fn points_are_spacing_major() {
        let mut cfg = ExperimentConfig::default();
        cfg.channel.sigma_awgn = vec![0.1, 0.2];
        let p = cfg.points();
        assert_eq!(p.len(), 6);
        assert_eq!((p[1].spacing, p[1].sigma_awgn), (0.3, 0.2));
    }
}
