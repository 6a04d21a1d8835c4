//! Physical constants, line energies, the CCD energy response and the
//! electron budget that turns a count bound into a violation probability.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::num::Real;

/// Elementary charge in coulomb (exact SI value).
pub const ELEMENTARY_CHARGE_C: f64 = 1.602_176_634e-19;

/// `2 sqrt(2 ln 2)`: FWHM of a unit Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Fano factor of silicon.
pub const SILICON_FANO: f64 = 0.115;
/// Mean energy per electron-hole pair in silicon, eV.
pub const SILICON_PAIR_ENERGY_EV: f64 = 3.71;

/// Copper line energies (keV) and the Kβ/Kα intensity ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePhysics<T> {
    pub e_kalpha: T,
    pub e_kbeta: T,
    /// Kα analogue for a transition into an already filled 1s shell.
    pub e_forbidden: T,
    pub relative_kbeta_intensity: T,
}

impl<T: Real> Default for LinePhysics<T> {
    fn default() -> Self {
        Self {
            e_kalpha: T::lit(8.040),
            e_kbeta: T::lit(8.905),
            e_forbidden: T::lit(7.729),
            // Kβ1,3 / Kα1,2 for Z = 29.
            relative_kbeta_intensity: T::lit(0.137),
        }
    }
}

impl<T: Real> LinePhysics<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_forbidden < self.e_kalpha && self.e_kalpha < self.e_kbeta) {
            return Err(domain("line energies must satisfy e_forbidden < e_kalpha < e_kbeta"));
        }
        let shift = self.e_kalpha - self.e_forbidden;
        if shift < T::lit(0.25) || shift > T::lit(0.35) {
            return Err(domain(format!(
                "Kα to forbidden-line shift {shift} keV outside [0.25, 0.35]"
            )));
        }
        let r = self.relative_kbeta_intensity;
        if !(r > T::zero() && r < T::one()) {
            return Err(domain("relative_kbeta_intensity must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Energy gap between the allowed Kα and the forbidden transition, keV.
    pub fn shift(&self) -> T {
        self.e_kalpha - self.e_forbidden
    }
}

/// Semiconductor energy resolution, `FWHM²(E) = noise_term + fano_term_coeff·E`.
///
/// Energies in keV, widths in eV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseModel<T> {
    pub fwhm_ref: T,
    pub e_ref: T,
    /// eV² per keV.
    pub fano_term_coeff: T,
    /// eV².
    pub noise_term: T,
}

impl<T: Real> ResponseModel<T> {
    /// Anchors a Fano-limited response at one `(e_ref, fwhm_ref)` point; the
    /// constant term absorbs everything that is not pair statistics.
    pub fn anchored(fwhm_ref_ev: T, e_ref_kev: T, fano: T, pair_energy_ev: T) -> Result<Self> {
        if !(fwhm_ref_ev > T::zero() && e_ref_kev > T::zero()) {
            return Err(domain("reference FWHM and energy must be positive"));
        }
        if fano < T::zero() || pair_energy_ev < T::zero() {
            return Err(domain("Fano factor and pair energy must be non-negative"));
        }
        let k = T::lit(FWHM_PER_SIGMA);
        // E in keV, w in eV: the Fano variance in eV² is F·w·E·1000.
        let fano_term_coeff = k * k * fano * pair_energy_ev * T::lit(1000.0);
        let noise_term = fwhm_ref_ev * fwhm_ref_ev - fano_term_coeff * e_ref_kev;
        if noise_term < T::zero() {
            return Err(domain(format!(
                "Fano term alone exceeds FWHM {fwhm_ref_ev} eV at {e_ref_kev} keV"
            )));
        }
        Ok(Self {
            fwhm_ref: fwhm_ref_ev,
            e_ref: e_ref_kev,
            fano_term_coeff,
            noise_term,
        })
    }

    /// Energy-independent width.
    pub fn constant(fwhm_ev: T) -> Self {
        Self {
            fwhm_ref: fwhm_ev,
            e_ref: T::one(),
            fano_term_coeff: T::zero(),
            noise_term: fwhm_ev * fwhm_ev,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_term < T::zero() || self.fano_term_coeff < T::zero() {
            return Err(domain("response terms must be non-negative"));
        }
        if !(self.fwhm_ref > T::zero() && self.e_ref > T::zero()) {
            return Err(domain("reference FWHM and energy must be positive"));
        }
        Ok(())
    }

    /// FWHM in eV at energy `e` keV.
    pub fn fwhm_at(&self, e: T) -> Result<T> {
        if !(e > T::zero()) {
            return Err(domain(format!("energy must be positive, got {e}")));
        }
        Ok((self.noise_term + self.fano_term_coeff * e).sqrt())
    }

    /// Gaussian sigma in keV at energy `e` keV.
    pub fn sigma_kev_at(&self, e: T) -> Result<T> {
        Ok(sigma_from_fwhm(self.fwhm_at(e)?) / T::lit(1000.0))
    }
}

impl<T: Real> Default for ResponseModel<T> {
    /// 320 eV FWHM at 8 keV with silicon pair statistics.
    fn default() -> Self {
        Self::anchored(
            T::lit(320.0),
            T::lit(8.0),
            T::lit(SILICON_FANO),
            T::lit(SILICON_PAIR_ENERGY_EV),
        )
        .expect("default response is valid")
    }
}

/// Inputs of the electron budget: `N_new · (D/μ) · f_rad · ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsParameters<T> {
    /// A.
    pub current: T,
    /// s.
    pub duration: T,
    /// m.
    pub strip_length_d: T,
    /// Mean free path of conduction electrons, m.
    pub scattering_length_mu: T,
    pub capture_radiative_fraction: T,
    pub detection_efficiency: T,
}

impl<T: Real> RsParameters<T> {
    pub const DEFAULT_CURRENT_A: f64 = 40.0;
    /// 14510 min.
    pub const DEFAULT_DURATION_S: f64 = 870_600.0;
    /// Cylinder height.
    pub const DEFAULT_STRIP_LENGTH_M: f64 = 0.088;
    /// Drude mean free path in copper at room temperature.
    pub const DEFAULT_SCATTERING_LENGTH_M: f64 = 3.9e-8;
    pub const DEFAULT_CAPTURE_RADIATIVE_FRACTION: f64 = 0.1;

    /// Laboratory-run defaults. The detection efficiency has no physics
    /// default and must always be supplied.
    pub fn with_efficiency(detection_efficiency: T) -> Self {
        Self {
            current: T::lit(Self::DEFAULT_CURRENT_A),
            duration: T::lit(Self::DEFAULT_DURATION_S),
            strip_length_d: T::lit(Self::DEFAULT_STRIP_LENGTH_M),
            scattering_length_mu: T::lit(Self::DEFAULT_SCATTERING_LENGTH_M),
            capture_radiative_fraction: T::lit(Self::DEFAULT_CAPTURE_RADIATIVE_FRACTION),
            detection_efficiency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("current", self.current),
            ("duration", self.duration),
            ("strip_length_d", self.strip_length_d),
            ("scattering_length_mu", self.scattering_length_mu),
            ("capture_radiative_fraction", self.capture_radiative_fraction),
            ("detection_efficiency", self.detection_efficiency),
        ];
        for (name, v) in fields {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(domain(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if self.capture_radiative_fraction > T::one() {
            return Err(domain("capture_radiative_fraction must be <= 1"));
        }
        if self.detection_efficiency > T::one() {
            return Err(domain("detection_efficiency must be <= 1"));
        }
        if self.interactions() < T::one() {
            return Err(domain("strip_length_d / scattering_length_mu must be >= 1"));
        }
        Ok(())
    }

    /// Lattice interactions per electron, `D/μ`.
    pub fn interactions(&self) -> T {
        self.strip_length_d / self.scattering_length_mu
    }

    pub fn denominator(&self) -> Result<T> {
        rs_denominator(self)
    }
}

/// Geometry of the copper target and CCD ring. Lengths in mm (foil in μm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub cylinder_radius_mm: f64,
    pub foil_thickness_um: f64,
    pub cylinder_height_mm: f64,
    pub ccd_distance_mm: f64,
    pub n_ccd_total: u32,
    pub n_ccd_active: u32,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            cylinder_radius_mm: 45.0,
            foil_thickness_um: 50.0,
            cylinder_height_mm: 88.0,
            ccd_distance_mm: 23.0,
            n_ccd_total: 16,
            n_ccd_active: 14,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.cylinder_radius_mm,
            self.foil_thickness_um,
            self.cylinder_height_mm,
            self.ccd_distance_mm,
        ];
        if dims.iter().any(|d| !(*d > 0.0)) {
            return Err(domain("geometry dimensions must be positive"));
        }
        if self.n_ccd_active > self.n_ccd_total {
            return Err(domain("more active CCDs than installed"));
        }
        Ok(())
    }

    /// Current path length along the cylinder, m.
    pub fn strip_length_m(&self) -> f64 {
        self.cylinder_height_mm * 1e-3
    }

    pub fn active_fraction(&self) -> f64 {
        f64::from(self.n_ccd_active) / f64::from(self.n_ccd_total)
    }
}

/// Electrons injected by a current over a duration, `I·T/e`.
pub fn n_new_electrons<T: Real>(current: T, duration: T) -> Result<T> {
    if current < T::zero() || duration < T::zero() || current.is_nan() || duration.is_nan() {
        return Err(domain("current and duration must be non-negative"));
    }
    // Evaluated in f64 so f32 callers keep full precision in I·T/e.
    let n = current.to_f64_lossy() * duration.to_f64_lossy() / ELEMENTARY_CHARGE_C;
    Ok(T::lit(n))
}

pub fn sigma_from_fwhm<T: Real>(fwhm: T) -> T {
    fwhm / T::lit(FWHM_PER_SIGMA)
}

pub fn fwhm_from_sigma<T: Real>(sigma: T) -> T {
    sigma * T::lit(FWHM_PER_SIGMA)
}

/// Number of PEP-violation opportunities that would yield a detected X-ray.
pub fn rs_denominator<T: Real>(p: &RsParameters<T>) -> Result<T> {
    p.validate()?;
    let n_new = n_new_electrons(p.current, p.duration)?;
    Ok(n_new * p.interactions() * p.capture_radiative_fraction * p.detection_efficiency)
}
