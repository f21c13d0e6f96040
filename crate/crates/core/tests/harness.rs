use tdmr::harness::selftest::noiseless_config;
use tdmr::harness::{parse_ber_csv, run_experiment, run_sweep, train_point, RunFlag, BER_HEADER};

#[test]
fn noiseless_channel_has_no_errors() {
    let cfg = noiseless_config();
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r.flag, RunFlag::Ok);
        assert_eq!(r.avg_ber(), 0.0, "{}", r.system);
        assert!(r.bits() > 0);
    }
}

#[test]
fn same_config_gives_identical_records() {
    let mut cfg = noiseless_config();
    cfg.channel.sigma_awgn = vec![0.3];
    cfg.channel.slopes = vec![2e-4];
    cfg.nn.train.epochs = 3;
    let strip = |mut v: Vec<tdmr::harness::BerRecord>| {
        v.iter_mut().for_each(|r| r.wall_time_s = None);
        v
    };
    let a = strip(run_experiment(&cfg).unwrap());
    let b = strip(run_experiment(&cfg).unwrap());
    assert_eq!(a, b);
    assert!(a.iter().any(|r| r.avg_ber() > 0.0));
}

#[test]
fn test_seed_does_not_touch_training() {
    let mut cfg = noiseless_config();
    cfg.channel.sigma_awgn = vec![0.2];
    cfg.nn.train.epochs = 2;
    let p = cfg.points()[0];
    let a = train_point(&cfg, p).unwrap();
    cfg.run.test_seed = Some(cfg.run.master_seed + 1);
    assert_eq!(train_point(&cfg, p).unwrap(), a);
    cfg.run.master_seed += 1;
    assert_ne!(train_point(&cfg, p).unwrap(), a);
}

#[test]
fn sweep_writes_merged_csv_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = noiseless_config();
    cfg.channel.spacings = vec![0.4, 0.6];
    cfg.nn.train.epochs = 2;
    cfg.run.cache_dir = Some(dir.path().join("cache"));
    let records = run_sweep(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("ber.csv")).unwrap();
    assert!(text.starts_with(BER_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 3);
    let mut parsed = parse_ber_csv(&text).unwrap();
    let mut expected = records.clone();
    for r in parsed.iter_mut().chain(expected.iter_mut()) {
        r.train_loss = None;
        r.wall_time_s = None;
    }
    assert_eq!(parsed, expected);
    assert!(!dir.path().join("parts").exists());
    assert!(dir.path().join("run_meta.txt").exists());
    assert_eq!(std::fs::read_dir(dir.path().join("cache")).unwrap().count(), 2);

    let again = run_sweep(&cfg, dir.path()).unwrap();
    assert_eq!(
        again.iter().map(|r| r.track_ber.clone()).collect::<Vec<_>>(),
        records.iter().map(|r| r.track_ber.clone()).collect::<Vec<_>>()
    );
}
