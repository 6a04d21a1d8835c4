use std::path::Path;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use vip_core::spectra::rebin;
use vip_pipeline::config::PipelineConfig;
use vip_pipeline::manifest::{RunManifest, INCOMPLETE_MARKER, MANIFEST_FILE};
use vip_pipeline::run::{self, run_experiment};

fn small(n_frames: u64, seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::with_efficiency(1.0, "assumed, unit efficiency");
    c.sim.frame_width = 300;
    c.sim.frame_height = 300;
    c.sim.seed = seed;
    c.n_frames = n_frames;
    // coarser ADU bins keep the line fit well-conditioned on short runs
    c.fit.adu_bins = 300;
    c.rs.duration = c.live_time();
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != MANIFEST_FILE)
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn null_run_gives_finite_limit_and_flat_difference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(100, 5);
    let o = run_experiment(&cfg, dir.path()).unwrap();
    assert!(o.report.beta2_over_2_upper.is_finite() && o.report.beta2_over_2_upper > 0.0);
    assert_eq!(o.report.efficiency_assumption, "assumed, unit efficiency");
    assert!(!dir.path().join(INCOMPLETE_MARKER).exists());

    // 100 eV bins keep the Gaussian approximation honest
    let d = rebin(&o.difference, 100).unwrap();
    let (chi2, ndf) = d.chi2_against_zero();
    let p = 1.0 - ChiSquared::new(ndf as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2} / {ndf}");
    let pulls = o.difference.pulls();
    let mean = pulls.iter().sum::<f64>() / pulls.len() as f64;
    assert!(mean.abs() < 4.0 / (pulls.len() as f64).sqrt(), "mean pull {mean}");

    // the manifest agrees with what was written
    let m = RunManifest::read(dir.path()).unwrap();
    assert_eq!(m, o.manifest);
    m.validate(dir.path()).unwrap();
    for r in &m.runs {
        assert_eq!(r.live_time, 100.0 * 600.0);
    }
    assert_ne!(m.runs[0].seed, m.runs[1].seed);
}

#[test]
fn identical_config_reproduces_every_byte() {
    let cfg = small(100, 11);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run_experiment(&cfg, a.path()).unwrap();
    // a single worker thread schedules frames completely differently
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let ob = pool.install(|| run_experiment(&cfg, b.path())).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(oa.manifest.without_timestamps(), ob.manifest.without_timestamps());
    let strip = |p: &Path| {
        let mut m = RunManifest::read(p).unwrap();
        m.timestamps = None;
        serde_json::to_string_pretty(&m).unwrap()
    };
    assert_eq!(strip(a.path()), strip(b.path()));

    let other = tempfile::tempdir().unwrap();
    let oc = run_experiment(&small(100, 12), other.path()).unwrap();
    assert_ne!(oc.manifest.config_hash, oa.manifest.config_hash);
    assert_ne!(files(other.path()), files(a.path()));
}

#[test]
fn downstream_stages_rerun_from_files_match_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small(100, 21);
    let o = run_experiment(&cfg, d).unwrap();

    let on = run::read_events(&d.join(run::events_file(true))).unwrap();
    let off = run::read_events(&d.join(run::events_file(false))).unwrap();
    let lc = run::stage_calibrate(&cfg, &[&on, &off]).unwrap();
    assert_eq!(lc, o.calibration);

    let cal = run::read_calibration(&d.join(run::CALIBRATION_FILE)).unwrap();
    assert_eq!(cal, o.calibration.calibration);
    let s_on = run::stage_spectrum(&cfg, &on, &cal, cfg.live_time(), true).unwrap();
    let s_off = run::stage_spectrum(&cfg, &off, &cal, cfg.live_time(), false).unwrap();
    assert_eq!(s_on, o.spectrum_on);
    assert_eq!(s_off, o.spectrum_off);

    let f_on = run::read_spectrum("test", &d.join(run::spectrum_file(true))).unwrap();
    let f_off = run::read_spectrum("test", &d.join(run::spectrum_file(false))).unwrap();
    assert_eq!(f_on, o.spectrum_on);
    assert_eq!(run::stage_subtract(&f_on, &f_off).unwrap(), o.difference);
    assert_eq!(run::read_spectrum("test", &d.join(run::DIFFERENCE_FILE)).unwrap(), o.difference);
    let report = run::stage_limit(&cfg, &f_on, &f_off).unwrap();
    assert_eq!(report, o.report);
    assert_eq!(run::read_limit(&d.join(run::LIMIT_FILE)).unwrap(), o.report);
}

#[test]
fn frame_files_reconstruct_to_the_streamed_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(70, 8);
    let path = dir.path().join("on.vipf");
    let info = run::stage_simulate(&cfg, true, &path).unwrap();
    assert_eq!(info.live_time, 70.0 * 600.0);
    let (from_file, stats_file) = run::stage_reconstruct_file(&cfg, &path).unwrap();
    let (streamed, stats, _) = run::stage_simulate_reconstruct(&cfg, true).unwrap();
    assert_eq!(from_file, streamed);
    assert_eq!(stats_file, stats);
    assert_eq!(stats.frames, 70);
}

#[test]
fn laboratory_exposure_manifest_records_14510_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_ini_str("[rs]\ndetection_efficiency = 1.0\n").unwrap();
    assert_eq!(cfg.n_frames, 1451);
    assert_eq!(cfg.rs.current, 40.0);
    let o = run_experiment(&cfg, dir.path()).unwrap();
    for r in &o.manifest.runs {
        assert_eq!(r.n_frames, 1451);
        assert_eq!(r.live_time / 60.0, 14510.0);
    }
    assert_eq!(o.report.rs.duration / 60.0, 14510.0);
}

#[test]
fn failed_stage_leaves_marker_and_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(20, 3);
    // nothing at all above the line search threshold
    cfg.sim.rates.kalpha = 0.0;
    cfg.sim.rates.kbeta = 0.0;
    cfg.sim.rates.continuum = 0.0;
    let e = run_experiment(&cfg, dir.path()).unwrap_err();
    assert_eq!(e.stage_name(), Some("calibrate"));
    assert_eq!(e.exit_code(), 3);
    let marker = std::fs::read_to_string(dir.path().join(INCOMPLETE_MARKER)).unwrap();
    let record: serde_json::Value = serde_json::from_str(marker.trim()).unwrap();
    assert_eq!(record["stage"], "calibrate");
    assert_eq!(record["exit_code"], 3);
    assert!(dir.path().join(run::events_file(true)).exists());
    assert!(dir.path().join(run::events_file(false)).exists());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn manifest_refuses_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_experiment(&small(100, 4), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(run::DIFFERENCE_FILE)).unwrap();
    assert!(o.manifest.validate(dir.path()).is_err());
    let mut bad = o.manifest.clone();
    bad.runs[0].live_time += 1.0;
    std::fs::write(dir.path().join(run::DIFFERENCE_FILE), "").unwrap();
    assert!(bad.validate(dir.path()).is_err());
    assert!(o.manifest.validate(dir.path()).is_ok());
}
