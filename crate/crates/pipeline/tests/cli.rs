use std::path::Path;
use std::process::{Command, Output};

fn vip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vip")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn error_record(o: &Output) -> serde_json::Value {
    serde_json::from_slice(o.stderr.trim_ascii()).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&o.stderr)))
}

const SMALL: &str = "[sim]
seed = 77
n_frames = 100
frame_width = 300
frame_height = 300
[fit]
adu_bins = 300
[rs]
detection_efficiency = 0.9
efficiency_source = measured acceptance
";

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.ini");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn dump_defaults_is_a_valid_config() {
    let o = vip(&["config", "--dump-defaults"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = vip_pipeline::PipelineConfig::from_file(Path::new(&write_config(dir.path(), &text))).unwrap();
    assert_eq!(cfg.n_frames, 1451);
    for key in ["seed_threshold_adu", "detection_efficiency", "roi_low_kev", "nominal_gain_adu_per_kev"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn presets_and_config_errors() {
    let o = vip(&["preset", "lngs"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("environment_scale = 0.1"));

    let o = vip(&["preset", "gran-sasso"]);
    assert_eq!(code(&o), 2);
    let msg = error_record(&o)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("lnf") && msg.contains("lngs"), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for bad in ["[sim]\nseed = 1\n", "[sim]\nwidth = 5\n[rs]\ndetection_efficiency = 1\n"] {
        let o = vip(&["run", "--config", &write_config(dir.path(), bad), "--out-dir", out]);
        assert_eq!(code(&o), 2);
        assert_eq!(error_record(&o)["kind"], "config");
    }
    assert!(!Path::new(out).exists());
    // malformed arguments are configuration errors too
    assert_eq!(code(&vip(&["coverage", "--background", "x"])), 2);
    assert_eq!(code(&vip(&["coverage", "--background", "10", "--toys", "0"])), 2);
}

#[test]
fn stage_by_stage_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    let o = vip(&["run", "--config", &cfg, "--out-dir", &p("run")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for (kind, tag) in [("on", "on"), ("off", "off")] {
        let frames = p(&format!("frames_{tag}.vipf"));
        let events = p(&format!("events_{tag}.csv"));
        assert_eq!(code(&vip(&["simulate", "--config", &cfg, "--run", kind, "--out", &frames])), 0);
        assert_eq!(code(&vip(&["reconstruct", "--config", &cfg, "--frames", &frames, "--out", &events])), 0);
    }
    let o = vip(&[
        "calibrate",
        "--config",
        &cfg,
        "--events",
        &p("events_on.csv"),
        &p("events_off.csv"),
        "--out",
        &p("calibration.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for tag in ["on", "off"] {
        let o = vip(&[
            "spectrum",
            "--config",
            &cfg,
            "--events",
            &p(&format!("events_{tag}.csv")),
            "--calibration",
            &p("calibration.json"),
            "--run",
            tag,
            "--out",
            &p(&format!("spectrum_{tag}.csv")),
        ]);
        assert_eq!(code(&o), 0);
    }
    let on = p("spectrum_on.csv");
    let off = p("spectrum_off.csv");
    assert_eq!(code(&vip(&["subtract", "--on", &on, "--off", &off, "--out", &p("difference.csv")])), 0);
    assert_eq!(code(&vip(&["limit", "--config", &cfg, "--on", &on, "--off", &off, "--out", &p("limit.json")])), 0);

    for f in [
        "events_on.csv",
        "events_off.csv",
        "calibration.json",
        "spectrum_on.csv",
        "spectrum_off.csv",
        "difference.csv",
        "limit.json",
    ] {
        let a = std::fs::read(d.join("run").join(f)).unwrap();
        let b = std::fs::read(d.join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let limit: serde_json::Value = serde_json::from_slice(&std::fs::read(p("limit.json")).unwrap()).unwrap();
    assert_eq!(limit["efficiency_assumption"], "measured acceptance");
    assert_eq!(limit["rs"]["detection_efficiency"], 0.9);

    // plot extracts
    let o = vip(&["plot", "--spectrum", &p("difference.csv"), "--range", "fig4b"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 330);
    let diff = std::fs::read_to_string(p("difference.csv")).unwrap();
    let first = rows[0].split(',').next().unwrap().parse::<f64>().unwrap();
    assert!((first - 7.564).abs() < 1e-9);
    assert!(diff.contains(rows[0]) && diff.contains(rows[329]));
    assert_eq!(text.lines().next(), diff.lines().next());

    let full = p("full.csv");
    assert_eq!(code(&vip(&["plot", "--spectrum", &on, "--range", "full", "--out", &full])), 0);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&on).unwrap());

    let o = vip(&["plot", "--spectrum", &on, "--range", "8:8"]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_record(&o)["stage"], "plot");
}

#[test]
fn stage_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // no lines at all: the line search finds nothing
    let empty = SMALL.replace("[fit]", "kalpha_rate = 0\nkbeta_rate = 0\ncontinuum_rate = 0\n[fit]");
    let o = vip(&["run", "--config", &write_config(dir.path(), &empty), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_record(&o)["stage"], "calibrate");
    assert!(out.join("INCOMPLETE").exists());

    // continuum only: two candidate bumps, neither a significant line
    let continuum = SMALL.replace("[fit]", "kalpha_rate = 0\nkbeta_rate = 0\n[fit]\nadu_bins = 1500\n").replace("adu_bins = 300\n", "");
    let o = vip(&["run", "--config", &write_config(dir.path(), &continuum), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_record(&o)["kind"], "non_convergence");

    let o = vip(&["subtract", "--on", "/nonexistent.csv", "--off", "/nonexistent.csv", "--out", "x.csv"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn coverage_command_reports_json() {
    let o = vip(&["coverage", "--background", "100", "--toys", "20000", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c["n_toys"], 20000);
    assert!(c["coverage"].as_f64().unwrap() >= 0.994);
}
