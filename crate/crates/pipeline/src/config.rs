//! INI configuration: `[sim] [recon] [fit] [limit] [rs]` with `key = value`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};
use vip_core::limits::LimitMethod;
use vip_core::physics::{ResponseModel, RsParameters, SILICON_FANO, SILICON_PAIR_ENERGY_EV};
use vip_core::recon::ReconConfig;
use vip_core::sim::SimConfig;
use vip_core::spectra::{Binning, RoiWindow};

use crate::error::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    /// Surface laboratory.
    Lnf,
    /// Underground laboratory, background an order of magnitude lower.
    Lngs,
}

impl Environment {
    pub const ALL: [Environment; 2] = [Environment::Lnf, Environment::Lngs];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lnf => "lnf",
            Self::Lngs => "lngs",
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Self::Lnf => 1.0,
            Self::Lngs => 0.1,
        }
    }
}

impl FromStr for Environment {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        match s {
            "lnf" => Ok(Self::Lnf),
            "lngs" => Ok(Self::Lngs),
            _ => Err(PipelineError::Config(format!(
                "unknown preset {s:?}; available presets: lnf, lngs"
            ))),
        }
    }
}

/// Simulation settings for a preset: the defaults with the environment's
/// background scale.
pub fn preset(name: &str) -> Result<SimConfig, PipelineError> {
    let env: Environment = name.parse()?;
    Ok(SimConfig {
        environment_scale: env.scale(),
        ..SimConfig::default()
    })
}

/// INI fragment for `preset`.
pub fn preset_fragment(name: &str) -> Result<String, PipelineError> {
    let env: Environment = name.parse()?;
    Ok(format!(
        "[sim]\nenvironment = {}\nenvironment_scale = {}\n",
        env.name(),
        env.scale()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub adu_min: f64,
    pub adu_max: f64,
    pub adu_bins: usize,
    /// Used only to locate the lines before fitting.
    pub nominal_gain_adu_per_kev: f64,
    pub init_fwhm_ev: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            adu_min: 0.0,
            adu_max: 1500.0,
            adu_bins: 1500,
            nominal_gain_adu_per_kev: 100.0,
            init_fwhm_ev: 320.0,
        }
    }
}

impl FitSettings {
    pub fn binning(&self) -> Result<Binning<f64>, PipelineError> {
        Binning::new(self.adu_min, self.adu_max, self.adu_bins).map_err(|e| PipelineError::Config(format!("[fit] {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSettings {
    pub cl: f64,
    pub method: LimitMethod,
    pub roi: RoiWindow<f64>,
    pub energy_min_kev: f64,
    pub energy_max_kev: f64,
    pub energy_bins: usize,
    /// Zero disables the coverage block in the report.
    pub coverage_toys: u64,
    pub coverage_seed: u64,
    pub neyman_toys: usize,
}

impl Default for LimitSettings {
    fn default() -> Self {
        Self {
            cl: vip_core::limits::DEFAULT_CL,
            method: LimitMethod::Gaussian,
            roi: RoiWindow::default(),
            energy_min_kev: 1.0,
            energy_max_kev: 12.0,
            energy_bins: 11_000,
            coverage_toys: 0,
            coverage_seed: 7,
            neyman_toys: 20_000,
        }
    }
}

impl LimitSettings {
    pub fn energy_binning(&self) -> Result<Binning<f64>, PipelineError> {
        Binning::new(self.energy_min_kev, self.energy_max_kev, self.energy_bins)
            .map_err(|e| PipelineError::Config(format!("[limit] {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    /// Frames per run; both runs have the same count.
    pub n_frames: u64,
    pub environment: Option<Environment>,
    pub recon: ReconConfig,
    pub fit: FitSettings,
    pub limit: LimitSettings,
    /// Analysis parameters. `duration` defaults to the current-on live time.
    pub rs: RsParameters<f64>,
    pub efficiency_source: String,
}

/// Laboratory run length: 1451 ten-minute frames.
pub const DEFAULT_FRAMES: u64 = 1451;

impl PipelineConfig {
    /// Defaults with an explicitly supplied detection efficiency.
    pub fn with_efficiency(detection_efficiency: f64, efficiency_source: &str) -> Self {
        let sim = SimConfig::default();
        let mut rs = RsParameters::with_efficiency(detection_efficiency);
        rs.duration = DEFAULT_FRAMES as f64 * sim.exposure;
        Self {
            sim: SimConfig {
                rs,
                ..sim
            },
            n_frames: DEFAULT_FRAMES,
            environment: None,
            recon: ReconConfig::default(),
            fit: FitSettings::default(),
            limit: LimitSettings::default(),
            rs,
            efficiency_source: efficiency_source.to_string(),
        }
    }

    pub fn live_time(&self) -> f64 {
        self.n_frames as f64 * self.sim.exposure
    }

    /// Run-level seed: master seed XOR run index (0 = current on, 1 = off).
    pub fn run_seed(&self, run_index: u64) -> u64 {
        self.sim.seed ^ run_index
    }

    pub fn run_sim(&self, current_on: bool) -> SimConfig {
        SimConfig {
            seed: self.run_seed(if current_on { 0 } else { 1 }),
            ..self.sim.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: vip_core::Error, section: &str| PipelineError::Config(format!("[{section}] {e}"));
        if self.n_frames == 0 {
            return Err(PipelineError::Config("[sim] n_frames must be >= 1".into()));
        }
        self.sim.validate().map_err(|e| cfg(e, "sim"))?;
        self.recon.validate().map_err(|e| cfg(e, "recon"))?;
        self.rs.validate().map_err(|e| cfg(e, "rs"))?;
        self.fit.binning()?;
        if !(self.fit.nominal_gain_adu_per_kev > 0.0 && self.fit.init_fwhm_ev > 0.0) {
            return Err(PipelineError::Config("[fit] nominal gain and FWHM must be positive".into()));
        }
        let b = self.limit.energy_binning()?;
        vip_core::limits::z_for_cl(self.limit.cl).map_err(|e| cfg(e, "limit"))?;
        if self.limit.roi.e_low < b.min || self.limit.roi.e_high > b.max {
            return Err(PipelineError::Config("[limit] ROI lies outside the energy binning".into()));
        }
        if self.limit.coverage_toys != 0 && self.limit.coverage_toys < vip_core::limits::MIN_COVERAGE_TOYS {
            return Err(PipelineError::Config(format!(
                "[limit] coverage_toys must be 0 or >= {}",
                vip_core::limits::MIN_COVERAGE_TOYS
            )));
        }
        Ok(())
    }

    pub fn from_ini_str(text: &str) -> Result<Self, PipelineError> {
        let ini = Ini::load_from_str(text).map_err(|e| PipelineError::Config(format!("INI syntax: {e}")))?;
        let mut r = Reader::new(&ini)?;
        let cfg = r.build()?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    /// Canonical INI text; parses back to the same configuration.
    pub fn to_ini(&self) -> String {
        render(self, false)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

const SECTIONS: [&str; 5] = ["sim", "recon", "fit", "limit", "rs"];

struct Reader<'a> {
    ini: &'a Ini,
    used: BTreeSet<(String, String)>,
}

impl<'a> Reader<'a> {
    fn new(ini: &'a Ini) -> Result<Self, PipelineError> {
        for (name, props) in ini.iter() {
            match name {
                None if props.is_empty() => {}
                None => {
                    return Err(PipelineError::Config("keys must appear inside a section".into()));
                }
                Some(s) if !SECTIONS.contains(&s) => {
                    return Err(PipelineError::Config(format!(
                        "unknown section [{s}]; expected one of {}",
                        SECTIONS.join(", ")
                    )));
                }
                _ => {}
            }
        }
        Ok(Self {
            ini,
            used: BTreeSet::new(),
        })
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<&'a str> {
        let v = self.ini.section(Some(section))?.get(key)?;
        self.used.insert((section.to_string(), key.to_string()));
        Some(v.trim())
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, PipelineError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| PipelineError::Config(format!("[{section}] {key}: cannot parse {v:?}"))),
        }
    }

    fn build(&mut self) -> Result<PipelineConfig, PipelineError> {
        let environment = match self.raw("sim", "environment") {
            None => None,
            Some(v) => Some(v.parse::<Environment>()?),
        };
        let d = SimConfig::default();
        let scale_default = environment.map(|e| e.scale()).unwrap_or(d.environment_scale);
        let n_frames = self.get("sim", "n_frames", DEFAULT_FRAMES)?;
        let exposure = self.get("sim", "exposure_s", d.exposure)?;

        let efficiency = match self.raw("rs", "detection_efficiency") {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| PipelineError::Config(format!("[rs] detection_efficiency: cannot parse {v:?}")))?,
            None => {
                return Err(PipelineError::Config(
                    "[rs] detection_efficiency is required (no default is assumed)".into(),
                ))
            }
        };
        let efficiency_source = self.get("rs", "efficiency_source", "assumed".to_string())?;
        type Rs = RsParameters<f64>;
        let rs = RsParameters {
            current: self.get("rs", "current_a", Rs::DEFAULT_CURRENT_A)?,
            duration: self.get("rs", "duration_s", n_frames as f64 * exposure)?,
            strip_length_d: self.get("rs", "strip_length_m", Rs::DEFAULT_STRIP_LENGTH_M)?,
            scattering_length_mu: self.get("rs", "scattering_length_m", Rs::DEFAULT_SCATTERING_LENGTH_M)?,
            capture_radiative_fraction: self.get("rs", "capture_radiative_fraction", Rs::DEFAULT_CAPTURE_RADIATIVE_FRACTION)?,
            detection_efficiency: efficiency,
        };

        let fwhm = self.get("sim", "fwhm_ev", d.response.fwhm_ref)?;
        let e_ref = self.get("sim", "fwhm_ref_kev", d.response.e_ref)?;
        let response = ResponseModel::anchored(fwhm, e_ref, SILICON_FANO, SILICON_PAIR_ENERGY_EV)
            .map_err(|e| PipelineError::Config(format!("[sim] response: {e}")))?;

        let sim = SimConfig {
            frame_width: self.get("sim", "frame_width", d.frame_width)?,
            frame_height: self.get("sim", "frame_height", d.frame_height)?,
            exposure,
            adu_gain: self.get("sim", "adu_gain", d.adu_gain)?,
            readout_noise: self.get("sim", "readout_noise_adu", d.readout_noise)?,
            rates: vip_core::sim::Rates {
                continuum: self.get("sim", "continuum_rate", d.rates.continuum)?,
                kalpha: self.get("sim", "kalpha_rate", d.rates.kalpha)?,
                kbeta: self.get("sim", "kbeta_rate", d.rates.kbeta)?,
                tracks: self.get("sim", "track_rate", d.rates.tracks)?,
            },
            continuum: vip_core::sim::ContinuumShape {
                flat_fraction: self.get("sim", "continuum_flat_fraction", d.continuum.flat_fraction)?,
                tau_kev: self.get("sim", "continuum_tau_kev", d.continuum.tau_kev)?,
                ..d.continuum
            },
            tracks: d.tracks,
            environment_scale: self.get("sim", "environment_scale", scale_default)?,
            injected_beta2_over_2: self.get("sim", "injected_beta2_over_2", d.injected_beta2_over_2)?,
            rs,
            lines: d.lines,
            response,
            charge_cloud_sigma: self.get("sim", "charge_cloud_sigma_px", d.charge_cloud_sigma)?,
            seed: self.get("sim", "seed", d.seed)?,
        };

        let rd = ReconConfig::default();
        let recon = ReconConfig {
            seed_threshold: self.get("recon", "seed_threshold_adu", rd.seed_threshold)?,
            split_threshold: self.get("recon", "split_threshold_adu", rd.split_threshold)?,
            max_xray_pixels: self.get("recon", "max_xray_pixels", rd.max_xray_pixels)?,
            max_bounding_box: (
                self.get("recon", "max_box_width", rd.max_bounding_box.0)?,
                self.get("recon", "max_box_height", rd.max_bounding_box.1)?,
            ),
        };

        let fd = FitSettings::default();
        let fit = FitSettings {
            adu_min: self.get("fit", "adu_min", fd.adu_min)?,
            adu_max: self.get("fit", "adu_max", fd.adu_max)?,
            adu_bins: self.get("fit", "adu_bins", fd.adu_bins)?,
            nominal_gain_adu_per_kev: self.get("fit", "nominal_gain_adu_per_kev", fd.nominal_gain_adu_per_kev)?,
            init_fwhm_ev: self.get("fit", "init_fwhm_ev", fd.init_fwhm_ev)?,
        };

        let ld = LimitSettings::default();
        let method: String = self.get("limit", "method", "gaussian".to_string())?;
        let roi_low = self.get("limit", "roi_low_kev", ld.roi.e_low)?;
        let roi_high = self.get("limit", "roi_high_kev", ld.roi.e_high)?;
        let limit = LimitSettings {
            cl: self.get("limit", "cl", ld.cl)?,
            method: method.parse().map_err(|e| PipelineError::Config(format!("[limit] {e}")))?,
            roi: RoiWindow::new(roi_low, roi_high).map_err(|e| PipelineError::Config(format!("[limit] {e}")))?,
            energy_min_kev: self.get("limit", "energy_min_kev", ld.energy_min_kev)?,
            energy_max_kev: self.get("limit", "energy_max_kev", ld.energy_max_kev)?,
            energy_bins: self.get("limit", "energy_bins", ld.energy_bins)?,
            coverage_toys: self.get("limit", "coverage_toys", ld.coverage_toys)?,
            coverage_seed: self.get("limit", "coverage_seed", ld.coverage_seed)?,
            neyman_toys: self.get("limit", "neyman_toys", ld.neyman_toys)?,
        };

        Ok(PipelineConfig {
            sim,
            n_frames,
            environment,
            recon,
            fit,
            limit,
            rs,
            efficiency_source,
        })
    }

    fn finish(self) -> Result<(), PipelineError> {
        for (name, props) in self.ini.iter() {
            let Some(section) = name else { continue };
            for (key, _) in props.iter() {
                if !self.used.contains(&(section.to_string(), key.to_string())) {
                    return Err(PipelineError::Config(format!("[{section}] unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }
}

/// `with_docs` adds a comment above every key.
fn render(c: &PipelineConfig, with_docs: bool) -> String {
    let mut out = String::new();
    let section = |name: &str, out: &mut String| {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "[{name}]");
    };
    let key = |out: &mut String, k: &str, v: String, doc: &str| {
        if with_docs {
            let _ = writeln!(out, "; {doc}");
        }
        let _ = writeln!(out, "{k} = {v}");
    };
    let s = &c.sim;
    // `{:?}` prints the shortest text that parses back to the same f64
    let f = |x: f64| format!("{x:?}");

    section("sim", &mut out);
    key(&mut out, "seed", s.seed.to_string(), "master seed; run seeds are seed XOR run index (0 = current on, 1 = current off)");
    key(&mut out, "n_frames", c.n_frames.to_string(), "frames per run (1451 x 600 s = 14510 min)");
    if let Some(env) = c.environment {
        key(&mut out, "environment", env.name().into(), "preset: lnf (scale 1.0) or lngs (scale 0.1)");
    }
    key(&mut out, "environment_scale", f(s.environment_scale), "multiplies every background rate");
    key(&mut out, "frame_width", s.frame_width.to_string(), "pixels");
    key(&mut out, "frame_height", s.frame_height.to_string(), "pixels");
    key(&mut out, "exposure_s", f(s.exposure), "seconds per frame");
    key(&mut out, "adu_gain", f(s.adu_gain), "ADU per keV");
    key(&mut out, "readout_noise_adu", f(s.readout_noise), "rms per pixel");
    key(&mut out, "charge_cloud_sigma_px", f(s.charge_cloud_sigma), "Gaussian charge cloud width");
    key(&mut out, "fwhm_ev", f(s.response.fwhm_ref), "energy resolution at fwhm_ref_kev");
    key(&mut out, "fwhm_ref_kev", f(s.response.e_ref), "anchor energy of fwhm_ev");
    key(&mut out, "continuum_rate", f(s.rates.continuum), "continuum photons per keV per frame over 1-12 keV");
    key(&mut out, "continuum_flat_fraction", f(s.continuum.flat_fraction), "flat share of the continuum, rest exp(-E/tau)");
    key(&mut out, "continuum_tau_kev", f(s.continuum.tau_kev), "continuum slope");
    key(&mut out, "kalpha_rate", f(s.rates.kalpha), "Cu K-alpha photons per frame");
    key(&mut out, "kbeta_rate", f(s.rates.kbeta), "Cu K-beta photons per frame");
    key(&mut out, "track_rate", f(s.rates.tracks), "cosmic tracks per frame");
    key(&mut out, "injected_beta2_over_2", f(s.injected_beta2_over_2), "signal strength injected into current-on frames");

    let r = &c.recon;
    section("recon", &mut out);
    key(&mut out, "seed_threshold_adu", f(r.seed_threshold), "a cluster needs one pixel at or above this");
    key(&mut out, "split_threshold_adu", f(r.split_threshold), "pixels at or above this join a cluster");
    key(&mut out, "max_xray_pixels", r.max_xray_pixels.to_string(), "larger clusters are tracks");
    key(&mut out, "max_box_width", r.max_bounding_box.0.to_string(), "bounding box limit for X-rays");
    key(&mut out, "max_box_height", r.max_bounding_box.1.to_string(), "bounding box limit for X-rays");

    let fi = &c.fit;
    section("fit", &mut out);
    key(&mut out, "adu_min", f(fi.adu_min), "ADU histogram range and bins for the line fit");
    key(&mut out, "adu_max", f(fi.adu_max), "");
    key(&mut out, "adu_bins", fi.adu_bins.to_string(), "");
    key(&mut out, "nominal_gain_adu_per_kev", f(fi.nominal_gain_adu_per_kev), "only used to locate the lines");
    key(&mut out, "init_fwhm_ev", f(fi.init_fwhm_ev), "starting width; the fit window is +-3 sigma");

    let l = &c.limit;
    section("limit", &mut out);
    key(&mut out, "cl", f(l.cl), "confidence level; 0.997 uses z = 3 exactly");
    key(&mut out, "method", serde_json::to_value(l.method).unwrap().as_str().unwrap().into(), "gaussian or neyman");
    key(&mut out, "roi_low_kev", f(l.roi.e_low), "region of interest around the 7.729 keV line");
    key(&mut out, "roi_high_kev", f(l.roi.e_high), "");
    key(&mut out, "energy_min_kev", f(l.energy_min_kev), "calibrated spectrum binning");
    key(&mut out, "energy_max_kev", f(l.energy_max_kev), "");
    key(&mut out, "energy_bins", l.energy_bins.to_string(), "");
    key(&mut out, "coverage_toys", l.coverage_toys.to_string(), "0 = no coverage block in the limit report");
    key(&mut out, "coverage_seed", l.coverage_seed.to_string(), "");
    key(&mut out, "neyman_toys", l.neyman_toys.to_string(), "toys for method = neyman");

    let p = &c.rs;
    section("rs", &mut out);
    key(&mut out, "current_a", f(p.current), "current through the copper strip");
    key(&mut out, "duration_s", f(p.duration), "current-on time; defaults to n_frames x exposure_s");
    key(&mut out, "strip_length_m", f(p.strip_length_d), "D");
    key(&mut out, "scattering_length_m", f(p.scattering_length_mu), "electron mean free path");
    key(&mut out, "capture_radiative_fraction", f(p.capture_radiative_fraction), "");
    key(&mut out, "detection_efficiency", f(p.detection_efficiency), "required; there is no default");
    key(&mut out, "efficiency_source", c.efficiency_source.clone(), "where detection_efficiency comes from");
    out.replace("; \n", "")
}

/// Documented defaults, as printed by `config --dump-defaults`. The
/// efficiency line is an explicit assumption the user should revisit.
pub fn dump_defaults() -> String {
    let c = PipelineConfig::with_efficiency(1.0, "assumed");
    format!(
        "; Default configuration. detection_efficiency has no physics default;\n\
         ; the value below is an assumption, replace it with a measured acceptance.\n\n{}",
        render(&c, true)
    )
}
