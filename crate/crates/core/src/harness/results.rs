use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SystemId};
use crate::error::{invalid, Error, Result};

pub const BER_HEADER: &str = "system,spacing_tp,sigma_awgn,sigma_jitter,slope,track,ber,bits,flag";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    Ok,
    Diverged,
}

/// BER of one system at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub system: SystemId,
    pub spacing_tp: f64,
    pub sigma_awgn: f64,
    pub sigma_jitter: f64,
    pub slope: f64,
    pub track_ber: Vec<f64>,
    pub track_bits: Vec<u64>,
    pub flag: RunFlag,
    /// Final training loss (NN) or design MSE (linear systems).
    pub train_loss: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl BerRecord {
    pub fn bits(&self) -> u64 {
        self.track_bits.iter().sum()
    }

    /// Bit-weighted mean over tracks.
    pub fn avg_ber(&self) -> f64 {
        let bits = self.bits();
        if bits == 0 {
            return 0.0;
        }
        self.track_ber.iter().zip(&self.track_bits).map(|(b, &n)| b * n as f64).sum::<f64>() / bits as f64
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.track_ber.len() != self.track_bits.len() {
            return Err(invalid!("per-track BER and bit counts differ in length"));
        }
        if self.track_ber.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(invalid!("BER outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BerRow {
    system: SystemId,
    spacing_tp: f64,
    sigma_awgn: f64,
    sigma_jitter: f64,
    slope: f64,
    track: String,
    ber: f64,
    bits: u64,
    flag: RunFlag,
}

fn rows(r: &BerRecord) -> Vec<BerRow> {
    let row = |track: String, ber, bits| BerRow {
        system: r.system,
        spacing_tp: r.spacing_tp,
        sigma_awgn: r.sigma_awgn,
        sigma_jitter: r.sigma_jitter,
        slope: r.slope,
        track,
        ber,
        bits,
        flag: r.flag,
    };
    let mut out: Vec<BerRow> =
        r.track_ber.iter().zip(&r.track_bits).enumerate().map(|(j, (&b, &n))| row(format!("track{}", j + 1), b, n)).collect();
    out.push(row("avg".into(), r.avg_ber(), r.bits()));
    out
}

/// `ber.csv` contents for `records`.
pub fn ber_csv(records: &[BerRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        r.validate()?;
        for row in rows(r) {
            w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    let body = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(format!("{BER_HEADER}\n{}", String::from_utf8(body).expect("csv output is utf-8")))
}

/// Parses `ber.csv` back into records. Training loss and wall time are not
/// part of the file and come back as `None`.
pub fn parse_ber_csv(text: &str) -> Result<Vec<BerRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.iter().map(str::to_owned).collect();
    if header.join(",") != BER_HEADER {
        return Err(Error::Parse(format!("unexpected header '{}'", header.join(","))));
    }
    let mut out: Vec<BerRecord> = Vec::new();
    let mut open: Option<BerRecord> = None;
    for row in rd.deserialize::<BerRow>() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let rec = open.get_or_insert_with(|| BerRecord {
            system: row.system,
            spacing_tp: row.spacing_tp,
            sigma_awgn: row.sigma_awgn,
            sigma_jitter: row.sigma_jitter,
            slope: row.slope,
            track_ber: Vec::new(),
            track_bits: Vec::new(),
            flag: row.flag,
            train_loss: None,
            wall_time_s: None,
        });
        if row.system != rec.system || row.spacing_tp != rec.spacing_tp || row.flag != rec.flag {
            return Err(Error::Parse("track rows of one record disagree".into()));
        }
        if row.track == "avg" {
            let done = open.take().expect("record is open");
            if done.track_ber.is_empty() {
                return Err(Error::Parse("avg row without track rows".into()));
            }
            out.push(done);
        } else {
            let expect = format!("track{}", rec.track_ber.len() + 1);
            if row.track != expect {
                return Err(Error::Parse(format!("expected track '{expect}', found '{}'", row.track)));
            }
            rec.track_ber.push(row.ber);
            rec.track_bits.push(row.bits);
        }
    }
    if open.is_some() {
        return Err(Error::Parse("record without avg row".into()));
    }
    Ok(out)
}

/// Writes `ber.csv` and `run_meta.txt` into `dir`.
pub fn emit_results(records: &[BerRecord], cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("ber.csv");
    std::fs::write(&csv_path, ber_csv(records)?).map_err(|e| Error::io(&csv_path, e))?;
    write_run_meta(records, cfg, dir)
}

pub(crate) fn write_run_meta(records: &[BerRecord], cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join("run_meta.txt");
    std::fs::write(&path, run_meta(records, cfg)).map_err(|e| Error::io(&path, e))
}

fn run_meta(records: &[BerRecord], cfg: &ExperimentConfig) -> String {
    let mut out = format!(
        "tdmr {}\nmaster_seed = {}\ntest_seed = {}\nrecords = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.run.master_seed,
        cfg.test_seed(),
        records.len()
    );
    for r in records {
        out.push_str(&format!(
            "# {} spacing {} sigma_awgn {}: train_loss {} wall_time_s {}\n",
            r.system,
            r.spacing_tp,
            r.sigma_awgn,
            r.train_loss.map_or("-".into(), |v| format!("{v:.6e}")),
            r.wall_time_s.map_or("-".into(), |v| format!("{v:.2}")),
        ));
    }
    out.push_str("\n[config]\n");
    out.push_str(&cfg.to_toml());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(ber: [f64; 2]) -> BerRecord {
        BerRecord {
            system: SystemId::GprmlLinear,
            spacing_tp: 0.5,
            sigma_awgn: 0.2,
            sigma_jitter: 0.08,
            slope: 2e-4,
            track_ber: ber.to_vec(),
            track_bits: vec![99_000, 99_000],
            flag: RunFlag::Ok,
            train_loss: None,
            wall_time_s: None,
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(ber_csv(&[]).unwrap(), format!("{BER_HEADER}\n"));
    }

    #[test]
    fn one_record_three_rows() {
        let text = ber_csv(&[record([1e-3, 3e-3])]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "gprml_linear,0.5,0.2,0.08,0.0002,track1,0.001,99000,ok");
        assert!(lines[3].starts_with("gprml_linear,0.5,0.2,0.08,0.0002,avg,0.002,198000,"));
    }

    #[test]
    fn rejects_bad_ber() {
        assert!(ber_csv(&[record([1.5, 0.0])]).is_err());
        assert!(parse_ber_csv("system,ber\n").is_err());
    }

    #[test]
    fn emit_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        emit_results(&[record([0.0, 0.5])], &cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("ber.csv")).unwrap();
        assert_eq!(parse_ber_csv(&text).unwrap(), vec![record([0.0, 0.5])]);
        assert!(std::fs::read_to_string(dir.path().join("run_meta.txt")).unwrap().contains("master_seed = 2024"));
    }

    proptest! {
        #[test]
        fn csv_round_trip(b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, sp in 0.05f64..2.0, sig in 0.0f64..1.0,
                          n1 in 1u64..1_000_000, diverged: bool) {
            let mut r = record([b1, b2]);
            r.spacing_tp = sp;
            r.sigma_awgn = sig;
            r.track_bits = vec![n1, n1 + 7];
            r.flag = if diverged { RunFlag::Diverged } else { RunFlag::Ok };
            let back = parse_ber_csv(&ber_csv(&[r.clone(), r.clone()]).unwrap()).unwrap();
            prop_assert_eq!(back, vec![r.clone(), r]);
        }
    }
}
