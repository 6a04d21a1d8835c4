//! CSV extracts for external plotting, same schema as spectrum files.

use std::str::FromStr;

use vip_core::spectra::RoiWindow;
use vip_core::EnergySpectrum;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlotRange {
    /// Every bin.
    Full,
    /// The default region of interest, 7.564 to 7.894 keV. Also spelled `fig4b`.
    Roi,
    Custom { low_kev: f64, high_kev: f64 },
}

impl FromStr for PlotRange {
    type Err = PipelineError;

    /// `full`, `roi`, `fig4b`, or `LOW:HIGH` in keV.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "roi" | "fig4b" => Ok(Self::Roi),
            _ => {
                let bad = || PipelineError::Config(format!("range {s:?}: expected full, roi, fig4b or LOW:HIGH"));
                let (a, b) = s.split_once(':').ok_or_else(bad)?;
                Ok(Self::Custom {
                    low_kev: a.trim().parse().map_err(|_| bad())?,
                    high_kev: b.trim().parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

/// Restricts a spectrum (raw or difference) to `range`. A range selecting
/// no bins is an error.
pub fn emit_plot_data(spec: &EnergySpectrum, range: PlotRange) -> Result<EnergySpectrum> {
    let err = |e| PipelineError::Stage { stage: "plot", source: e };
    let window = match range {
        PlotRange::Full => return Ok(spec.clone()),
        PlotRange::Roi => RoiWindow::default(),
        PlotRange::Custom { low_kev, high_kev } => RoiWindow::new(low_kev, high_kev).map_err(err)?,
    };
    spec.restrict(&window).map_err(err)
}

pub fn write_plot_data<W: std::io::Write>(spec: &EnergySpectrum, range: PlotRange, w: W) -> Result<()> {
    emit_plot_data(spec, range)?
        .write_csv(w)
        .map_err(|e| PipelineError::Stage { stage: "plot", source: e })
}
