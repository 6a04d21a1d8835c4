//! Linear ADU → energy calibration from fitted fluorescence lines.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fit::{find_initial_peaks, fit_peaks, seed_single_peak, FitResult, LinearBackground, Peak, PeakModel};
use crate::num::Real;
use crate::physics::LinePhysics;
use crate::spectra::{AduHistogram, BinSlot, Binning, EnergySpectrum, Spill, SpectrumLabel};

/// `energy = gain·adu + offset` (keV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration<T> {
    #[serde(rename = "gain_kev_per_adu")]
    pub gain: T,
    #[serde(rename = "offset_kev")]
    pub offset: T,
    pub chi2: T,
    pub ndf: usize,
    #[serde(rename = "line_energies_kev")]
    pub line_energies: Vec<T>,
    #[serde(rename = "centroids_adu")]
    pub centroids: Vec<T>,
    /// Per line, calibrated minus nominal energy.
    #[serde(rename = "residuals_kev", default = "Vec::new")]
    pub residuals: Vec<T>,
}

impl<T: Real> Calibration<T> {
    pub fn identity() -> Self {
        Self::linear(T::one(), T::zero())
    }

    /// Calibration with known constants and no fit behind it.
    pub fn linear(gain: T, offset: T) -> Self {
        Self {
            gain,
            offset,
            chi2: T::zero(),
            ndf: 0,
            line_energies: Vec::new(),
            centroids: Vec::new(),
            residuals: Vec::new(),
        }
    }

    pub fn energy(&self, adu: T) -> T {
        self.gain * adu + self.offset
    }

    pub fn adu(&self, energy: T) -> T {
        (energy - self.offset) / self.gain
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > T::zero() && self.gain.is_finite() && self.offset.is_finite()) {
            return Err(domain(format!("invalid calibration gain {} offset {}", self.gain, self.offset)));
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()>
    where
        T: Serialize,
    {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

impl Calibration<f64> {
    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let c: Self = serde_json::from_reader(r)?;
        c.validate()?;
        Ok(c)
    }
}

/// Straight line through `(centroid, energy)` points. Two points are solved
/// exactly; three or more are fitted with weights `1/σ_c²` (uniform when
/// `centroid_errors` is `None`).
pub fn calibrate_points<T: Real>(
    centroids: &[T],
    energies: &[T],
    centroid_errors: Option<&[T]>,
) -> Result<Calibration<T>> {
    let n = centroids.len();
    if n != energies.len() || n < 2 {
        return Err(domain("calibration needs at least two (centroid, energy) pairs"));
    }
    let (gain, offset) = if n == 2 {
        let dc = centroids[1] - centroids[0];
        if dc.abs() <= T::epsilon() * centroids[0].abs().max(centroids[1].abs()) {
            return Err(Error::Singular("coincident calibration centroids".into()));
        }
        let gain = (energies[1] - energies[0]) / dc;
        (gain, energies[0] - gain * centroids[0])
    } else {
        let w: Vec<T> = match centroid_errors {
            Some(e) => e.iter().map(|s| T::one() / (*s * *s)).collect(),
            None => vec![T::one(); n],
        };
        let sw: T = w.iter().copied().sum();
        let mx = (0..n).map(|i| w[i] * centroids[i]).sum::<T>() / sw;
        let my = (0..n).map(|i| w[i] * energies[i]).sum::<T>() / sw;
        let sxx: T = (0..n).map(|i| w[i] * (centroids[i] - mx) * (centroids[i] - mx)).sum();
        if !(sxx > T::zero()) {
            return Err(Error::Singular("coincident calibration centroids".into()));
        }
        let sxy: T = (0..n).map(|i| w[i] * (centroids[i] - mx) * (energies[i] - my)).sum();
        let gain = sxy / sxx;
        (gain, my - gain * mx)
    };
    if !(gain > T::zero()) {
        return Err(domain("calibration gain must be positive; line order inverted?"));
    }
    let residuals = (0..n)
        .map(|i| gain * centroids[i] + offset - energies[i])
        .collect();
    Ok(Calibration {
        gain,
        offset,
        chi2: T::zero(),
        ndf: 0,
        line_energies: energies.to_vec(),
        centroids: centroids.to_vec(),
        residuals,
    })
}

/// Two-line calibration from a model whose first two peaks (in centroid
/// order) are Kα and Kβ.
pub fn calibrate<T: Real>(fitted: &PeakModel<T>, lines: &LinePhysics<T>) -> Result<Calibration<T>> {
    if fitted.peaks.len() < 2 {
        return Err(domain("calibration needs fitted Kα and Kβ peaks"));
    }
    let mut c: Vec<T> = fitted.peaks.iter().map(|p| p.centroid).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    calibrate_points(&c[..2], &[lines.e_kalpha, lines.e_kbeta], None)
}

/// Settings for automatic line finding and fitting on an ADU histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFitConfig<T> {
    /// Expected peak sigma, ADU. Sets the fit window and smoothing.
    pub init_sigma: T,
    /// Peaks are searched at or above this position (the 6 keV equivalent).
    pub min_peak_position: T,
}

impl<T: Real> LineFitConfig<T> {
    /// Derives the search settings from a nominal gain (ADU per keV) and
    /// the expected FWHM at Kα (eV).
    pub fn from_nominal_gain(adu_per_kev: T, fwhm_ev_at_kalpha: T) -> Self {
        Self {
            init_sigma: crate::physics::sigma_from_fwhm(fwhm_ev_at_kalpha) / T::lit(1000.0) * adu_per_kev,
            min_peak_position: T::lit(6.0) * adu_per_kev,
        }
    }
}

/// Joint Kα/Kβ fit and the calibration built from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineCalibration<T> {
    /// Two peaks, Kα first, on a common linear background.
    pub fit: FitResult<T>,
    pub calibration: Calibration<T>,
}

impl<T: Real> LineCalibration<T> {
    pub fn converged(&self) -> bool {
        self.fit.converged
    }

    pub fn kalpha(&self) -> &Peak<T> {
        &self.fit.model.peaks[0]
    }

    pub fn kbeta(&self) -> &Peak<T> {
        &self.fit.model.peaks[1]
    }
}

/// Finds the two strongest local maxima above the search threshold, fits
/// both as Gaussians on one linear background over the union of their
/// ±3σ windows, and solves for the calibration.
pub fn fit_calibration_lines<T: Real>(
    hist: &AduHistogram<T>,
    lines: &LinePhysics<T>,
    cfg: &LineFitConfig<T>,
) -> Result<LineCalibration<T>> {
    if !(cfg.init_sigma > T::zero()) {
        return Err(domain("initial sigma must be positive"));
    }
    let width = hist.binning.width();
    let halfwidth = (cfg.init_sigma / width / T::lit(2.0)).round().to_usize().unwrap_or(0).max(1);
    let seeds = find_initial_peaks(
        hist,
        cfg.min_peak_position,
        halfwidth,
        T::lit(3.0) * cfg.init_sigma,
        2,
    );
    if seeds.len() < 2 {
        return Err(domain(format!(
            "found {} candidate lines above {}, need 2",
            seeds.len(),
            cfg.min_peak_position
        )));
    }
    let a = seed_single_peak(hist, seeds[0], cfg.init_sigma);
    let b = seed_single_peak(hist, seeds[1], cfg.init_sigma);
    let init = PeakModel {
        peaks: vec![a.peaks[0], b.peaks[0]],
        background: LinearBackground {
            b0: (a.background.b0 + b.background.b0) / T::lit(2.0),
            b1: T::zero(),
            pivot: (seeds[0] + seeds[1]) / T::lit(2.0),
        },
    };
    let fit = fit_peaks(hist, &init)?;
    let mut calibration = calibrate(&fit.model, lines)?;
    calibration.chi2 = fit.chi2;
    calibration.ndf = fit.ndf;
    Ok(LineCalibration { fit, calibration })
}

/// Re-histograms ADU bin contents onto an energy binning. Each ADU bin maps
/// to an energy interval and its content is shared among the energy bins it
/// overlaps in proportion to the overlap.
pub fn apply_calibration<T: Real>(
    hist: &AduHistogram<T>,
    cal: &Calibration<T>,
    energy_binning: Binning<T>,
    live_time: T,
    label: SpectrumLabel,
) -> Result<(EnergySpectrum<T>, Spill<T>)> {
    cal.validate()?;
    let mut counts = vec![T::zero(); energy_binning.n_bins];
    let mut spill = Spill::default();
    for i in 0..hist.binning.n_bins {
        let c = hist.counts[i];
        if c == T::zero() {
            continue;
        }
        let lo = cal.energy(hist.binning.edge(i));
        let hi = cal.energy(hist.binning.edge(i + 1));
        let span = hi - lo;
        if lo < energy_binning.min {
            let below = (energy_binning.min.min(hi) - lo) / span;
            spill.underflow += c * below;
        }
        if hi > energy_binning.max {
            let above = (hi - energy_binning.max.max(lo)) / span;
            spill.overflow += c * above;
        }
        let first = match energy_binning.slot(lo) {
            BinSlot::Underflow => 0,
            BinSlot::Bin(j) => j,
            BinSlot::Overflow => continue,
        };
        for j in first..energy_binning.n_bins {
            let (elo, ehi) = (energy_binning.edge(j), energy_binning.edge(j + 1));
            if elo >= hi {
                break;
            }
            let overlap = ehi.min(hi) - elo.max(lo);
            if overlap > T::zero() {
                counts[j] += c * overlap / span;
            }
        }
    }
    let spec = EnergySpectrum::from_counts(energy_binning, counts, live_time, label)?;
    Ok((spec, spill))
}

/// Histograms per-event charges directly in energy.
pub fn calibrate_events<T: Real>(
    adu: impl IntoIterator<Item = T>,
    cal: &Calibration<T>,
    energy_binning: Binning<T>,
    live_time: T,
    label: SpectrumLabel,
) -> Result<(EnergySpectrum<T>, Spill<T>)> {
    cal.validate()?;
    EnergySpectrum::from_energies(energy_binning, adu.into_iter().map(|a| cal.energy(a)), live_time, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_solve() {
        let c = calibrate_points(&[804.0f64, 890.5], &[8.040, 8.905], None).unwrap();
        assert!((c.gain - 0.01).abs() < 1e-15);
        assert!(c.offset.abs() < 1e-12);
        assert!(c.residuals.iter().all(|r| r.abs() < 1e-12));

        let id = calibrate_points(&[8.040f64, 8.905], &[8.040, 8.905], None).unwrap();
        assert!((id.gain - 1.0).abs() < 1e-12 && id.offset.abs() < 1e-12);
    }

    #[test]
    fn coincident_centroids_are_singular() {
        assert!(matches!(
            calibrate_points(&[804.0f64, 804.0], &[8.040, 8.905], None),
            Err(Error::Singular(_))
        ));
        assert!(matches!(
            calibrate_points(&[804.0f64, 804.0, 804.0], &[8.040, 8.905, 7.0], None),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn three_line_weighted_fit() {
        let e = [6.4f64, 8.040, 8.905];
        let c: Vec<f64> = e.iter().map(|x| (x - 0.002) / 0.0101).collect();
        let cal = calibrate_points(&c, &e, Some(&[0.5, 0.1, 0.3])).unwrap();
        assert!((cal.gain - 0.0101).abs() < 1e-12);
        assert!((cal.offset - 0.002).abs() < 1e-12);
    }

    #[test]
    fn from_fitted_models() {
        let lines = LinePhysics::default();
        let mut m = PeakModel::single(890.5f64, 14.2, 1e4);
        m.peaks.push(Peak { centroid: 804.0, sigma: 13.6, amplitude: 1e5 });
        let cal = calibrate(&m, &lines).unwrap();
        assert!((cal.energy(804.0) - 8.040).abs() < 1e-12);
        assert!((cal.adu(8.905) - 890.5).abs() < 1e-9);
    }

    #[test]
    fn identity_apply_is_unchanged() {
        let b = Binning::new(1.0f64, 12.0, 1100).unwrap();
        let mut h = AduHistogram::empty(b);
        for (i, c) in h.counts.iter_mut().enumerate() {
            *c = ((i * 31) % 17) as f64;
        }
        let (spec, spill) = apply_calibration(&h, &Calibration::identity(), b, 10.0, SpectrumLabel::CurrentOn).unwrap();
        assert_eq!(spec.counts, h.counts);
        assert_eq!((spill.underflow, spill.overflow), (0.0, 0.0));
    }

    #[test]
    fn doubled_gain_stretches_and_conserves() {
        let b = Binning::new(0.0f64, 100.0, 100).unwrap();
        let mut h = AduHistogram::empty(b);
        h.counts[10] = 40.0;
        h.counts[20] = 8.0;
        let e = Binning::new(0.0f64, 200.0, 200).unwrap();
        let (spec, spill) = apply_calibration(&h, &Calibration::linear(2.0, 0.0), e, 1.0, SpectrumLabel::CurrentOn).unwrap();
        assert_eq!(spec.counts[20], 20.0);
        assert_eq!(spec.counts[21], 20.0);
        assert_eq!(spec.counts[40], 4.0);
        assert_eq!(spec.counts[41], 4.0);
        assert!((spec.total() - 48.0).abs() < 1e-12);
        assert_eq!(spill.overflow, 0.0);

        // narrower energy range: the stretched content partly overflows
        let e = Binning::new(0.0f64, 41.0, 41).unwrap();
        let (spec, spill) = apply_calibration(&h, &Calibration::linear(2.0, 0.0), e, 1.0, SpectrumLabel::CurrentOn).unwrap();
        assert!((spec.total() + spill.overflow - 48.0).abs() < 1e-12);
        assert!((spill.overflow - 4.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let mut cal = calibrate_points(&[804.123f64, 890.77], &[8.040, 8.905], None).unwrap();
        cal.chi2 = 123.456;
        cal.ndf = 160;
        let mut buf = Vec::new();
        cal.write_json(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        for key in ["gain_kev_per_adu", "offset_kev", "chi2", "ndf", "line_energies_kev", "centroids_adu"] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(Calibration::read_json(&buf[..]).unwrap(), cal);
    }

    #[test]
    fn line_fit_on_exact_spectrum() {
        let m = PeakModel {
            peaks: vec![
                Peak { centroid: 804.0, sigma: 13.6, amplitude: 1e5 },
                Peak { centroid: 890.5, sigma: 14.2, amplitude: 1.37e4 },
            ],
            background: LinearBackground { b0: 3.0, b1: 0.0, pivot: 0.0 },
        };
        let b = Binning::new(0.0f64, 1500.0, 750).unwrap();
        let mut h = AduHistogram::empty(b);
        for i in 0..b.n_bins {
            h.counts[i] = m.bin_integral(b.edge(i), b.edge(i + 1));
        }
        let cfg = LineFitConfig::from_nominal_gain(100.0, 320.0);
        let lc = fit_calibration_lines(&h, &LinePhysics::default(), &cfg).unwrap();
        assert!(lc.converged());
        assert!((lc.calibration.gain - 0.01).abs() / 0.01 < 1e-6, "{:?}", lc.calibration);
        assert!(lc.calibration.offset.abs() < 1e-6);
        assert!((lc.kalpha().sigma - 13.6).abs() < 1e-4);
    }
}
