//! Pipeline stages and the end-to-end run.
//!
//! Every stage reads and writes the documented file formats, so a downstream
//! stage rerun from persisted intermediates reproduces the end-to-end result
//! bit for bit.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use vip_core::calib::{calibrate_events, fit_calibration_lines, LineFitConfig};
use vip_core::limits::{
    compute_limit, compute_limit_neyman, coverage_with_signal, LimitMethod, LimitReport, NeymanToys, RoiCounts,
    ToySetup,
};
use vip_core::recon::{read_events_csv, reconstruct_frame, simulate_and_reconstruct, write_events_csv, ReconStats};
use vip_core::sim::{write_frame, FrameReader, RunInfo};
use vip_core::spectra::{roi_counts, subtract, AduHistogram, SpectrumLabel};
use vip_core::{Calibration, EnergySpectrum, Event, LineCalibration};

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::manifest::{config_hash, write_atomic, RunManifest, RunRecord, StageOutputs, Timestamps, INCOMPLETE_MARKER};

pub const CONFIG_FILE: &str = "config.ini";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DIFFERENCE_FILE: &str = "difference.csv";
pub const LIMIT_FILE: &str = "limit.json";

pub fn events_file(current_on: bool) -> &'static str {
    if current_on {
        "events_on.csv"
    } else {
        "events_off.csv"
    }
}

pub fn spectrum_file(current_on: bool) -> &'static str {
    if current_on {
        "spectrum_on.csv"
    } else {
        "spectrum_off.csv"
    }
}

fn label(current_on: bool) -> SpectrumLabel {
    if current_on {
        SpectrumLabel::CurrentOn
    } else {
        SpectrumLabel::CurrentOff
    }
}

fn open(stage: &'static str, path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(PipelineError::io(stage, path))
}

/// Simulates one run and writes the frames as a VIPF stream.
pub fn stage_simulate(cfg: &PipelineConfig, current_on: bool, path: &Path) -> Result<RunInfo> {
    let sim = cfg.run_sim(current_on);
    let info = RunInfo::new(&sim, cfg.n_frames, current_on).map_err(PipelineError::stage("simulate"))?;
    write_atomic("simulate", path, |w| {
        // chunks bound memory; frames are independent of the chunking
        let chunk = 64u64;
        let mut start = 0;
        while start < cfg.n_frames {
            let end = (start + chunk).min(cfg.n_frames);
            let frames = (start..end)
                .into_par_iter()
                .map(|i| vip_core::sim::simulate_frame(&sim, i, current_on))
                .collect::<vip_core::Result<Vec<_>>>()?;
            for f in &frames {
                write_frame(w, f)?;
            }
            start = end;
        }
        Ok(())
    })?;
    Ok(info)
}

/// Reconstructs a VIPF frame file.
pub fn stage_reconstruct_file(cfg: &PipelineConfig, frames: &Path) -> Result<(Vec<Event>, ReconStats)> {
    cfg.recon.validate().map_err(PipelineError::stage("reconstruct"))?;
    let mut reader = FrameReader::new(open("reconstruct", frames)?);
    let mut events = Vec::new();
    let mut stats = ReconStats::default();
    loop {
        let chunk = reader
            .by_ref()
            .take(64)
            .collect::<vip_core::Result<Vec<_>>>()
            .map_err(PipelineError::stage("reconstruct"))?;
        if chunk.is_empty() {
            break;
        }
        let per_frame: Vec<_> = chunk.par_iter().map(|f| reconstruct_frame(f, &cfg.recon)).collect();
        for (ev, st) in per_frame {
            stats.add(&st);
            events.extend(ev);
        }
    }
    vip_core::recon::sort_events(&mut events);
    Ok((events, stats))
}

/// Simulates and reconstructs one run without keeping frames.
pub fn stage_simulate_reconstruct(cfg: &PipelineConfig, current_on: bool) -> Result<(Vec<Event>, ReconStats, RunInfo)> {
    let sim = cfg.run_sim(current_on);
    let info = RunInfo::new(&sim, cfg.n_frames, current_on).map_err(PipelineError::stage("simulate"))?;
    let (events, stats) = simulate_and_reconstruct(&sim, cfg.n_frames, current_on, &cfg.recon)
        .map_err(PipelineError::stage("reconstruct"))?;
    Ok((events, stats, info))
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    write_atomic("reconstruct", path, |w| write_events_csv(w, events))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    read_events_csv(open("reconstruct", path)?).map_err(PipelineError::stage("reconstruct"))
}

/// Joint Kα/Kβ fit on the ADU histogram of all given event lists pooled.
pub fn stage_calibrate(cfg: &PipelineConfig, event_sets: &[&[Event]]) -> Result<LineCalibration> {
    let binning = cfg.fit.binning()?;
    let hist = AduHistogram::from_values(binning, event_sets.iter().flat_map(|s| s.iter().map(|e| e.total_adu)));
    let fit_cfg = LineFitConfig::from_nominal_gain(cfg.fit.nominal_gain_adu_per_kev, cfg.fit.init_fwhm_ev);
    let lc = fit_calibration_lines(&hist, &cfg.sim.lines, &fit_cfg).map_err(PipelineError::stage("calibrate"))?;
    if !lc.converged() {
        return Err(PipelineError::NonConvergence {
            stage: "calibrate",
            detail: format!("{} iterations, chi2 {}", lc.fit.iterations, lc.fit.chi2),
        });
    }
    Ok(lc)
}

pub fn write_calibration(path: &Path, cal: &Calibration) -> Result<()> {
    write_atomic("calibrate", path, |w| cal.write_json(w))
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    Calibration::read_json(open("calibrate", path)?).map_err(PipelineError::stage("calibrate"))
}

pub fn stage_spectrum(
    cfg: &PipelineConfig,
    events: &[Event],
    cal: &Calibration,
    live_time: f64,
    current_on: bool,
) -> Result<EnergySpectrum> {
    let binning = cfg.limit.energy_binning()?;
    calibrate_events(events.iter().map(|e| e.total_adu), cal, binning, live_time, label(current_on))
        .map(|(s, _)| s)
        .map_err(PipelineError::stage("spectrum"))
}

pub fn write_spectrum(stage: &'static str, path: &Path, spec: &EnergySpectrum) -> Result<()> {
    write_atomic(stage, path, |w| spec.write_csv(w))
}

pub fn read_spectrum(stage: &'static str, path: &Path) -> Result<EnergySpectrum> {
    EnergySpectrum::read_csv(open(stage, path)?).map_err(PipelineError::stage(stage))
}

pub fn stage_subtract(on: &EnergySpectrum, off: &EnergySpectrum) -> Result<EnergySpectrum> {
    subtract(on, off).map_err(PipelineError::stage("subtract"))
}

/// ROI counts of the two raw spectra, scaled by their live-time ratio.
pub fn roi_from_spectra(cfg: &PipelineConfig, on: &EnergySpectrum, off: &EnergySpectrum) -> Result<RoiCounts<f64>> {
    let stage = PipelineError::stage("limit");
    if !on.binning.same_as(&off.binning) {
        return Err(stage(vip_core::Error::BinningMismatch("on and off spectra differ".into())));
    }
    let a = roi_counts(on, &cfg.limit.roi).map_err(PipelineError::stage("limit"))?;
    let b = roi_counts(off, &cfg.limit.roi).map_err(PipelineError::stage("limit"))?;
    let roi = RoiCounts::new(a.counts, b.counts, on.live_time / off.live_time).with_cl(cfg.limit.cl);
    roi.validate().map_err(stage)?;
    Ok(roi)
}

pub fn stage_limit(cfg: &PipelineConfig, on: &EnergySpectrum, off: &EnergySpectrum) -> Result<LimitReport> {
    let roi = roi_from_spectra(cfg, on, off)?;
    let l = &cfg.limit;
    let result = match l.method {
        LimitMethod::Gaussian => compute_limit(&roi, &cfg.rs, cfg.efficiency_source.as_str()),
        LimitMethod::Neyman => NeymanToys::new(l.neyman_toys, l.coverage_seed)
            .and_then(|toys| compute_limit_neyman(&roi, &cfg.rs, cfg.efficiency_source.as_str(), &toys)),
    }
    .map_err(PipelineError::stage("limit"))?;
    let coverage = if l.coverage_toys > 0 {
        let setup = ToySetup {
            background_on: roi.scale_s * roi.n_off,
            signal: 0.0,
            scale_s: roi.scale_s,
            cl: l.cl,
            n_toys: l.coverage_toys,
            seed: l.coverage_seed,
        };
        Some(coverage_with_signal(&setup).map_err(PipelineError::stage("coverage"))?)
    } else {
        None
    };
    LimitReport::new(&result, coverage).map_err(PipelineError::stage("limit"))
}

pub fn write_limit(path: &Path, report: &LimitReport) -> Result<()> {
    write_atomic("limit", path, |w| {
        report.write_json(&mut *w)?;
        Ok(w.write_all(b"\n")?)
    })
}

pub fn read_limit(path: &Path) -> Result<LimitReport> {
    LimitReport::read_json(open("limit", path)?).map_err(PipelineError::stage("limit"))
}

/// In-memory results of a complete run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub calibration: LineCalibration,
    pub spectrum_on: EnergySpectrum,
    pub spectrum_off: EnergySpectrum,
    pub difference: EnergySpectrum,
    pub report: LimitReport,
}

/// Runs both runs and the full analysis chain, writing every artifact into
/// `out_dir`. While running, and after a failure, the directory carries an
/// `INCOMPLETE` marker; on failure it holds the error record.
pub fn run_experiment(cfg: &PipelineConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(PipelineError::io("run", out_dir))?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, "running\n").map_err(PipelineError::io("run", &marker))?;
    match run_stages(cfg, out_dir) {
        Ok(outcome) => {
            std::fs::remove_file(&marker).map_err(PipelineError::io("run", &marker))?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = std::fs::write(&marker, format!("{}\n", e.to_json()));
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, dir: &Path) -> Result<Outcome> {
    write_atomic("run", &dir.join(CONFIG_FILE), |w| Ok(w.write_all(cfg.to_ini().as_bytes())?))?;

    let mut runs = Vec::new();
    for current_on in [true, false] {
        let (events, stats, info) = stage_simulate_reconstruct(cfg, current_on)?;
        write_events(&dir.join(events_file(current_on)), &events)?;
        runs.push((events, stats, info));
    }

    // pooling both runs doubles the calibration statistics; the gain is
    // the same with and without current
    let calibration = stage_calibrate(cfg, &[&runs[0].0, &runs[1].0])?;
    write_calibration(&dir.join(CALIBRATION_FILE), &calibration.calibration)?;

    let mut spectra = Vec::new();
    for (events, _, info) in &runs {
        let s = stage_spectrum(cfg, events, &calibration.calibration, info.live_time, info.current_on)?;
        write_spectrum("spectrum", &dir.join(spectrum_file(info.current_on)), &s)?;
        spectra.push(s);
    }
    let spectrum_off = spectra.pop().expect("two spectra");
    let spectrum_on = spectra.pop().expect("two spectra");

    let difference = stage_subtract(&spectrum_on, &spectrum_off)?;
    write_spectrum("subtract", &dir.join(DIFFERENCE_FILE), &difference)?;

    let report = stage_limit(cfg, &spectrum_on, &spectrum_off)?;
    write_limit(&dir.join(LIMIT_FILE), &report)?;

    let mut manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(cfg),
        runs: runs
            .iter()
            .map(|(_, stats, info)| RunRecord {
                name: if info.current_on { "current_on" } else { "current_off" }.to_string(),
                current_on: info.current_on,
                seed: info.seed,
                n_frames: info.n_frames,
                exposure: info.exposure,
                live_time: info.live_time,
                events_csv: events_file(info.current_on).to_string(),
                spectrum_csv: spectrum_file(info.current_on).to_string(),
                recon: *stats,
            })
            .collect(),
        outputs: StageOutputs {
            config_ini: CONFIG_FILE.to_string(),
            calibration_json: CALIBRATION_FILE.to_string(),
            difference_csv: DIFFERENCE_FILE.to_string(),
            limit_json: LIMIT_FILE.to_string(),
        },
        digests: Default::default(),
        timestamps: Some(Timestamps {
            written_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }),
    };
    manifest.compute_digests(dir)?;
    manifest.write(dir)?;

    Ok(Outcome {
        manifest,
        calibration,
        spectrum_on,
        spectrum_off,
        difference,
        report,
    })
}
