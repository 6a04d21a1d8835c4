//! Binned spectra: uniform binning, raw ADU histograms, energy spectra with
//! Poisson errors, on/off subtraction, ROI integration, rebinning and merging.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, format_err, Error, Result};
use crate::num::Real;

/// Relative slack (in units of bin width) under which a value is considered
/// to sit exactly on a bin edge.
const EDGE_SNAP_TOLERANCE: f64 = 1e-6;

/// Uniform binning of `[min, max)` into `n_bins` bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning<T> {
    pub min: T,
    pub max: T,
    pub n_bins: usize,
}

/// Where a value falls relative to a [`Binning`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinSlot {
    Underflow,
    Bin(usize),
    Overflow,
}

impl<T: Real> Binning<T> {
    pub fn new(min: T, max: T, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(domain("binning needs at least one bin"));
        }
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(domain(format!("invalid binning range [{min}, {max})")));
        }
        Ok(Self { min, max, n_bins })
    }

    /// Binning with the given bin width; `max - min` must be a whole number
    /// of widths (to within rounding).
    pub fn with_width(min: T, max: T, width: T) -> Result<Self> {
        if !(width > T::zero()) {
            return Err(domain("bin width must be positive"));
        }
        let n = ((max - min) / width).round();
        let n_bins = n
            .to_usize()
            .ok_or_else(|| domain("bin count not representable"))?;
        let back = min + width * n;
        if (back - max).abs() > T::lit(EDGE_SNAP_TOLERANCE) * width {
            return Err(domain(format!(
                "range [{min}, {max}) is not a multiple of width {width}"
            )));
        }
        Self::new(min, max, n_bins)
    }

    pub fn width(&self) -> T {
        (self.max - self.min) / T::from_count(self.n_bins)
    }

    /// Lower edge of bin `i`; `edge(n_bins)` is exactly `max`.
    pub fn edge(&self, i: usize) -> T {
        if i >= self.n_bins {
            self.max
        } else {
            self.min + (self.max - self.min) * T::from_count(i) / T::from_count(self.n_bins)
        }
    }

    pub fn center(&self, i: usize) -> T {
        (self.edge(i) + self.edge(i + 1)) / T::lit(2.0)
    }

    pub fn slot(&self, x: T) -> BinSlot {
        if x.is_nan() || x < self.min {
            return BinSlot::Underflow;
        }
        if x >= self.max {
            return BinSlot::Overflow;
        }
        let guess = ((x - self.min) / self.width()).floor().to_usize().unwrap_or(0);
        let mut i = guess.min(self.n_bins - 1);
        // Repair off-by-one from rounding against the exact edge definition.
        while i > 0 && x < self.edge(i) {
            i -= 1;
        }
        while i + 1 < self.n_bins && x >= self.edge(i + 1) {
            i += 1;
        }
        BinSlot::Bin(i)
    }

    /// Index of the last edge at or below `x` (edges within tolerance count
    /// as equal). `None` when `x` lies outside `[min, max]`.
    pub fn edge_at_or_below(&self, x: T) -> Option<usize> {
        self.snap(x, |f| f.floor())
    }

    /// Index of the first edge at or above `x`.
    pub fn edge_at_or_above(&self, x: T) -> Option<usize> {
        self.snap(x, |f| f.ceil())
    }

    fn snap(&self, x: T, round: impl Fn(T) -> T) -> Option<usize> {
        let w = self.width();
        let tol = T::lit(EDGE_SNAP_TOLERANCE);
        let f = (x - self.min) / w;
        let nearest = f.round();
        let idx = if (f - nearest).abs() <= tol { nearest } else { round(f) };
        if idx < T::zero() || idx > T::from_count(self.n_bins) {
            return None;
        }
        idx.to_usize()
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.n_bins == other.n_bins && self.min == other.min && self.max == other.max
    }
}

/// Counts that fell outside a binning while filling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spill<T> {
    pub underflow: T,
    pub overflow: T,
}

/// Raw ADU histogram of reconstructed event charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AduHistogram<T> {
    pub binning: Binning<T>,
    pub counts: Vec<T>,
    pub spill: Spill<T>,
}

impl<T: Real> AduHistogram<T> {
    pub fn empty(binning: Binning<T>) -> Self {
        Self {
            counts: vec![T::zero(); binning.n_bins],
            binning,
            spill: Spill::default(),
        }
    }

    pub fn fill(&mut self, adu: T) {
        match self.binning.slot(adu) {
            BinSlot::Underflow => self.spill.underflow += T::one(),
            BinSlot::Overflow => self.spill.overflow += T::one(),
            BinSlot::Bin(i) => self.counts[i] += T::one(),
        }
    }

    pub fn from_values(binning: Binning<T>, values: impl IntoIterator<Item = T>) -> Self {
        let mut h = Self::empty(binning);
        for v in values {
            h.fill(v);
        }
        h
    }

    /// In-range plus spilled entries.
    pub fn entries(&self) -> T {
        self.counts.iter().copied().sum::<T>() + self.spill.underflow + self.spill.overflow
    }

    /// Count-weighted mean of bin centres.
    pub fn mean(&self) -> Option<T> {
        let n: T = self.counts.iter().copied().sum();
        if n <= T::zero() {
            return None;
        }
        let s: T = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c * self.binning.center(i))
            .sum();
        Some(s / n)
    }

    /// Adds another histogram with identical binning.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if !self.binning.same_as(&other.binning) {
            return Err(Error::BinningMismatch("ADU histograms differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        self.spill.underflow += other.spill.underflow;
        self.spill.overflow += other.spill.overflow;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumLabel {
    CurrentOn,
    CurrentOff,
    Difference,
}

impl SpectrumLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpectrumLabel::CurrentOn => "current_on",
            SpectrumLabel::CurrentOff => "current_off",
            SpectrumLabel::Difference => "difference",
        }
    }

    pub fn is_raw(&self) -> bool {
        !matches!(self, SpectrumLabel::Difference)
    }
}

impl fmt::Display for SpectrumLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpectrumLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current_on" => Ok(Self::CurrentOn),
            "current_off" => Ok(Self::CurrentOff),
            "difference" => Ok(Self::Difference),
            other => Err(format_err("spectrum label", other)),
        }
    }
}

/// Counts versus energy (keV) with per-bin errors and the live time they
/// were accumulated over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum<T> {
    pub binning: Binning<T>,
    pub counts: Vec<T>,
    pub errors: Vec<T>,
    /// Seconds.
    pub live_time: T,
    pub label: SpectrumLabel,
}

/// ROI integral and its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSum<T> {
    pub counts: T,
    pub error: T,
}

/// Energy window in keV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiWindow<T> {
    pub e_low: T,
    pub e_high: T,
}

impl<T: Real> Default for RoiWindow<T> {
    fn default() -> Self {
        Self {
            e_low: T::lit(7.564),
            e_high: T::lit(7.894),
        }
    }
}

impl<T: Real> RoiWindow<T> {
    pub fn new(e_low: T, e_high: T) -> Result<Self> {
        if !(e_low < e_high) {
            return Err(domain(format!("ROI [{e_low}, {e_high}] is empty")));
        }
        Ok(Self { e_low, e_high })
    }

    pub fn contains(&self, e: T) -> bool {
        e >= self.e_low && e <= self.e_high
    }

    pub fn width(&self) -> T {
        self.e_high - self.e_low
    }
}

/// Default energy binning: 1 eV bins over 1–12 keV.
pub fn default_energy_binning<T: Real>() -> Binning<T> {
    Binning::new(T::lit(1.0), T::lit(12.0), 11_000).expect("valid default binning")
}

impl<T: Real> EnergySpectrum<T> {
    /// Raw spectrum from bin contents; errors are `sqrt(counts)`.
    pub fn from_counts(
        binning: Binning<T>,
        counts: Vec<T>,
        live_time: T,
        label: SpectrumLabel,
    ) -> Result<Self> {
        if counts.len() != binning.n_bins {
            return Err(Error::BinningMismatch(format!(
                "{} counts for {} bins",
                counts.len(),
                binning.n_bins
            )));
        }
        if counts.iter().any(|c| *c < T::zero() || !c.is_finite()) {
            return Err(domain("raw counts must be finite and non-negative"));
        }
        check_live_time(live_time)?;
        let errors = counts.iter().map(|c| c.sqrt()).collect();
        Ok(Self {
            binning,
            counts,
            errors,
            live_time,
            label,
        })
    }

    /// Histograms event energies (keV).
    pub fn from_energies(
        binning: Binning<T>,
        energies: impl IntoIterator<Item = T>,
        live_time: T,
        label: SpectrumLabel,
    ) -> Result<(Self, Spill<T>)> {
        let h = AduHistogram::from_values(binning, energies);
        let spec = Self::from_counts(binning, h.counts, live_time, label)?;
        Ok((spec, h.spill))
    }

    pub fn zeros(binning: Binning<T>, live_time: T, label: SpectrumLabel) -> Result<Self> {
        Self::from_counts(binning, vec![T::zero(); binning.n_bins], live_time, label)
    }

    pub fn total(&self) -> T {
        self.counts.iter().copied().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.binning.n_bins;
        if self.counts.len() != n || self.errors.len() != n {
            return Err(Error::BinningMismatch("counts/errors length differs from n_bins".into()));
        }
        if self.errors.iter().any(|e| *e < T::zero()) {
            return Err(domain("negative bin error"));
        }
        check_live_time(self.live_time)
    }

    /// `diff/err` for bins with non-zero error.
    pub fn pulls(&self) -> Vec<T> {
        self.counts
            .iter()
            .zip(&self.errors)
            .filter(|(_, e)| **e > T::zero())
            .map(|(c, e)| *c / *e)
            .collect()
    }

    /// χ² of the contents against zero over bins with non-zero error, with
    /// the number of such bins.
    pub fn chi2_against_zero(&self) -> (T, usize) {
        let pulls = self.pulls();
        let n = pulls.len();
        (pulls.into_iter().map(|p| p * p).sum(), n)
    }

    /// Contents restricted to `[e_low, e_high]` after outward edge snapping.
    pub fn restrict(&self, roi: &RoiWindow<T>) -> Result<Self> {
        let (a, b) = self.roi_bins(roi)?;
        let binning = Binning::new(self.binning.edge(a), self.binning.edge(b), b - a)?;
        Ok(Self {
            binning,
            counts: self.counts[a..b].to_vec(),
            errors: self.errors[a..b].to_vec(),
            live_time: self.live_time,
            label: self.label,
        })
    }

    /// Bin index range `[first, last)` covered by the ROI. The lower edge
    /// snaps down and the upper edge up, so the ROI never shrinks.
    pub fn roi_bins(&self, roi: &RoiWindow<T>) -> Result<(usize, usize)> {
        if !(roi.e_low < roi.e_high) {
            return Err(domain("ROI is empty"));
        }
        if roi.e_low < self.binning.min || roi.e_high > self.binning.max {
            return Err(domain(format!(
                "ROI [{}, {}] outside spectrum range [{}, {})",
                roi.e_low, roi.e_high, self.binning.min, self.binning.max
            )));
        }
        let a = self
            .binning
            .edge_at_or_below(roi.e_low)
            .ok_or_else(|| domain("ROI low edge outside range"))?;
        let b = self
            .binning
            .edge_at_or_above(roi.e_high)
            .ok_or_else(|| domain("ROI high edge outside range"))?;
        Ok((a, b.max(a + 1)))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# live_time_s={} label={}", self.live_time, self.label)?;
        writeln!(w, "e_low_kev,e_high_kev,counts,error")?;
        for i in 0..self.binning.n_bins {
            writeln!(
                w,
                "{},{},{},{}",
                self.binning.edge(i),
                self.binning.edge(i + 1),
                self.counts[i],
                self.errors[i]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let meta = lines
            .next()
            .ok_or_else(|| format_err("spectrum CSV", "empty input"))??;
        let (live_time, label) = parse_meta_line(&meta)?;
        let header = lines
            .next()
            .ok_or_else(|| format_err("spectrum CSV", "missing header"))??;
        if header.trim() != "e_low_kev,e_high_kev,counts,error" {
            return Err(format_err("spectrum CSV", format!("unexpected header {header:?}")));
        }
        let mut rows: Vec<[T; 4]> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = [T::zero(); 4];
            let mut parts = line.split(',');
            for f in fields.iter_mut() {
                let tok = parts
                    .next()
                    .ok_or_else(|| format_err("spectrum CSV", format!("row {lineno}: too few columns")))?;
                *f = tok.trim().parse::<T>().map_err(|_| {
                    format_err("spectrum CSV", format!("row {lineno}: bad number {tok:?}"))
                })?;
            }
            if parts.next().is_some() {
                return Err(format_err("spectrum CSV", format!("row {lineno}: too many columns")));
            }
            rows.push(fields);
        }
        if rows.is_empty() {
            return Err(format_err("spectrum CSV", "no bins"));
        }
        let binning = Binning::new(rows[0][0], rows[rows.len() - 1][1], rows.len())?;
        for (i, row) in rows.iter().enumerate() {
            if row[0] != binning.edge(i) || row[1] != binning.edge(i + 1) {
                return Err(format_err("spectrum CSV", format!("bin {i} is not on a uniform grid")));
            }
        }
        let spec = Self {
            binning,
            counts: rows.iter().map(|r| r[2]).collect(),
            errors: rows.iter().map(|r| r[3]).collect(),
            live_time,
            label,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_live_time<T: Real>(t: T) -> Result<()> {
    if !(t > T::zero() && t.is_finite()) {
        return Err(domain(format!("live time must be positive, got {t}")));
    }
    Ok(())
}

fn parse_meta_line<T: Real>(line: &str) -> Result<(T, SpectrumLabel)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| format_err("spectrum CSV", "missing '# live_time_s=... label=...' line"))?;
    let mut live_time = None;
    let mut label = None;
    for kv in body.split_whitespace() {
        match kv.split_once('=') {
            Some(("live_time_s", v)) => {
                live_time = Some(
                    v.parse::<T>()
                        .map_err(|_| format_err("spectrum CSV", format!("bad live time {v:?}")))?,
                )
            }
            Some(("label", v)) => label = Some(v.parse()?),
            _ => {}
        }
    }
    match (live_time, label) {
        (Some(t), Some(l)) => Ok((t, l)),
        _ => Err(format_err("spectrum CSV", "metadata line lacks live_time_s or label")),
    }
}

/// `on − s·off` with `s = on.live_time / off.live_time`; errors
/// `sqrt(on + s²·off)`.
pub fn subtract<T: Real>(on: &EnergySpectrum<T>, off: &EnergySpectrum<T>) -> Result<EnergySpectrum<T>> {
    if !on.binning.same_as(&off.binning) {
        return Err(Error::BinningMismatch("on and off spectra have different binning".into()));
    }
    if !on.label.is_raw() || !off.label.is_raw() {
        return Err(domain("subtraction needs two raw spectra"));
    }
    check_live_time(on.live_time)?;
    check_live_time(off.live_time)?;
    let s = on.live_time / off.live_time;
    let counts = on
        .counts
        .iter()
        .zip(&off.counts)
        .map(|(a, b)| *a - s * *b)
        .collect();
    let errors = on
        .errors
        .iter()
        .zip(&off.errors)
        .map(|(ea, eb)| (*ea * *ea + s * s * *eb * *eb).sqrt())
        .collect();
    Ok(EnergySpectrum {
        binning: on.binning,
        counts,
        errors,
        live_time: on.live_time,
        label: SpectrumLabel::Difference,
    })
}

/// Sum over the (outward snapped) ROI bins; error added in quadrature.
pub fn roi_counts<T: Real>(spec: &EnergySpectrum<T>, roi: &RoiWindow<T>) -> Result<RoiSum<T>> {
    let (a, b) = spec.roi_bins(roi)?;
    let counts = spec.counts[a..b].iter().copied().sum();
    let var: T = spec.errors[a..b].iter().map(|e| *e * *e).sum();
    Ok(RoiSum {
        counts,
        error: var.sqrt(),
    })
}

/// Merges `factor` adjacent bins.
pub fn rebin<T: Real>(spec: &EnergySpectrum<T>, factor: usize) -> Result<EnergySpectrum<T>> {
    if factor == 0 || spec.binning.n_bins % factor != 0 {
        return Err(domain(format!(
            "rebin factor {factor} does not divide {} bins",
            spec.binning.n_bins
        )));
    }
    let binning = Binning::new(spec.binning.min, spec.binning.max, spec.binning.n_bins / factor)?;
    let counts = spec.counts.chunks(factor).map(|c| c.iter().copied().sum()).collect();
    let errors = spec
        .errors
        .chunks(factor)
        .map(|c| c.iter().map(|e| *e * *e).sum::<T>().sqrt())
        .collect();
    Ok(EnergySpectrum {
        binning,
        counts,
        errors,
        live_time: spec.live_time,
        label: spec.label,
    })
}

/// Adds spectra from several runs with identical binning and label. Live
/// times add.
pub fn merge_runs<T: Real>(spectra: &[EnergySpectrum<T>]) -> Result<EnergySpectrum<T>> {
    let first = spectra.first().ok_or_else(|| domain("nothing to merge"))?;
    let mut counts = vec![T::zero(); first.binning.n_bins];
    let mut var = vec![T::zero(); first.binning.n_bins];
    let mut live_time = T::zero();
    for s in spectra {
        if !s.binning.same_as(&first.binning) {
            return Err(Error::BinningMismatch("merged spectra differ in binning".into()));
        }
        if s.label != first.label {
            return Err(domain(format!("cannot merge {} with {}", s.label, first.label)));
        }
        for i in 0..counts.len() {
            counts[i] += s.counts[i];
            var[i] += s.errors[i] * s.errors[i];
        }
        live_time += s.live_time;
    }
    Ok(EnergySpectrum {
        binning: first.binning,
        counts,
        errors: var.into_iter().map(|v| v.sqrt()).collect(),
        live_time,
        label: first.label,
    })
}
