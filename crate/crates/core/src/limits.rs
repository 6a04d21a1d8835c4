//! Counting upper limits on the ROI excess and their conversion to β²/2.
//!
//! The default bound is `max(n_on − s·n_off, 0) + z·sqrt(n_on + s²·n_off)`.
//! At `cl = 0.997` the z-score is exactly 3 (the 3σ convention); any other
//! confidence level uses the two-sided normal quantile `Φ⁻¹((1+cl)/2)`, which
//! agrees with the convention to 1% at 0.997.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::num::{two_sided_z, Real};
use crate::physics::{rs_denominator, RsParameters};

pub const DEFAULT_CL: f64 = 0.997;
/// z-score used at the default confidence level.
pub const DEFAULT_Z: f64 = 3.0;
/// Toys per deterministic RNG block in Monte Carlo helpers.
const TOY_BLOCK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiCounts<T> {
    pub n_on: T,
    pub n_off: T,
    /// `on.live_time / off.live_time`.
    pub scale_s: T,
    pub cl: f64,
}

impl<T: Real> RoiCounts<T> {
    pub fn new(n_on: T, n_off: T, scale_s: T) -> Self {
        Self {
            n_on,
            n_off,
            scale_s,
            cl: DEFAULT_CL,
        }
    }

    pub fn with_cl(self, cl: f64) -> Self {
        Self { cl, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_on >= T::zero() && self.n_on.is_finite() && self.n_off >= T::zero() && self.n_off.is_finite()) {
            return Err(domain(format!("counts must be finite and >= 0, got {} and {}", self.n_on, self.n_off)));
        }
        if !(self.scale_s > T::zero() && self.scale_s.is_finite()) {
            return Err(domain(format!("scale must be positive, got {}", self.scale_s)));
        }
        z_for_cl(self.cl).map(|_| ())
    }

    pub fn excess(&self) -> T {
        self.n_on - self.scale_s * self.n_off
    }

    pub fn excess_error(&self) -> T {
        (self.n_on + self.scale_s * self.scale_s * self.n_off).sqrt()
    }
}

/// z-score for a confidence level in (0, 1).
pub fn z_for_cl(cl: f64) -> Result<f64> {
    if !(cl > 0.0 && cl < 1.0) {
        return Err(domain(format!("confidence level must lie in (0, 1), got {cl}")));
    }
    if cl == DEFAULT_CL {
        return Ok(DEFAULT_Z);
    }
    Ok(two_sided_z(cl))
}

/// Upper bound on the signal counts in the ROI.
pub fn upper_limit_counts<T: Real>(r: &RoiCounts<T>) -> Result<T> {
    r.validate()?;
    let z = T::lit(z_for_cl(r.cl)?);
    Ok(r.excess().max(T::zero()) + z * r.excess_error())
}

/// `delta_nx / rs_denominator(p)`.
pub fn beta2_limit<T: Real>(delta_nx: T, p: &RsParameters<T>) -> Result<T> {
    if !(delta_nx >= T::zero() && delta_nx.is_finite()) {
        return Err(domain(format!("delta_nx must be finite and >= 0, got {delta_nx}")));
    }
    Ok(delta_nx / rs_denominator(p)?)
}

pub fn improvement_factor<T: Real>(old_limit: T, new_limit: T) -> Result<T> {
    if !(old_limit > T::zero() && new_limit > T::zero() && old_limit.is_finite() && new_limit.is_finite()) {
        return Err(domain(format!("limits must be positive, got {old_limit} and {new_limit}")));
    }
    Ok(old_limit / new_limit)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMethod {
    /// Clamped Gaussian z-bound; authoritative.
    #[default]
    Gaussian,
    /// Toy Monte Carlo Neyman construction, for cross-checks.
    Neyman,
}

impl std::str::FromStr for LimitMethod {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "neyman" => Ok(Self::Neyman),
            _ => Err(domain(format!("unknown limit method {s:?} (gaussian, neyman)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitResult<T> {
    pub delta_nx_upper: T,
    pub beta2_over_2_upper: T,
    pub cl: f64,
    pub method: LimitMethod,
    pub roi: RoiCounts<T>,
    pub rs: RsParameters<T>,
    /// Where `rs.detection_efficiency` came from.
    pub efficiency_assumption: String,
}

/// Bound on the excess and on β²/2 for one measurement.
pub fn compute_limit<T: Real>(
    roi: &RoiCounts<T>,
    rs: &RsParameters<T>,
    efficiency_assumption: impl Into<String>,
) -> Result<LimitResult<T>> {
    let delta = upper_limit_counts(roi)?;
    Ok(LimitResult {
        delta_nx_upper: delta,
        beta2_over_2_upper: beta2_limit(delta, rs)?,
        cl: roi.cl,
        method: LimitMethod::Gaussian,
        roi: *roi,
        rs: *rs,
        efficiency_assumption: efficiency_assumption.into(),
    })
}

/// Same as [`compute_limit`] with the bound from [`neyman_upper_limit`].
pub fn compute_limit_neyman(
    roi: &RoiCounts<f64>,
    rs: &RsParameters<f64>,
    efficiency_assumption: impl Into<String>,
    toys: &NeymanToys,
) -> Result<LimitResult<f64>> {
    let delta = neyman_upper_limit(roi, toys)?;
    Ok(LimitResult {
        delta_nx_upper: delta,
        beta2_over_2_upper: beta2_limit(delta, rs)?,
        cl: roi.cl,
        method: LimitMethod::Neyman,
        roi: *roi,
        rs: *rs,
        efficiency_assumption: efficiency_assumption.into(),
    })
}

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

fn poisson_draw<R: Rng>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        0.0
    } else {
        Poisson::new(mean).expect("positive finite mean").sample(rng)
    }
}

/// Runs `n_toys` toys in fixed blocks so the outcome does not depend on how
/// rayon partitions the work.
fn run_toys<A, F>(n_toys: u64, seed: u64, per_toy: F) -> Vec<A>
where
    A: Send,
    F: Fn(&mut ChaCha8Rng) -> A + Sync,
{
    let blocks = n_toys.div_ceil(TOY_BLOCK);
    (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = block_rng(seed, b);
            let n = TOY_BLOCK.min(n_toys - b * TOY_BLOCK);
            (0..n).map(|_| per_toy(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Toy experiment setup: Poisson on/off counts in the ROI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySetup {
    /// Expected background in the on window.
    pub background_on: f64,
    /// Expected signal in the on window.
    pub signal: f64,
    pub scale_s: f64,
    pub cl: f64,
    pub n_toys: u64,
    pub seed: u64,
}

impl ToySetup {
    pub fn null(background: f64, cl: f64, n_toys: u64, seed: u64) -> Self {
        Self {
            background_on: background,
            signal: 0.0,
            scale_s: 1.0,
            cl,
            n_toys,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.background_on >= 0.0 && self.background_on.is_finite() && self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(domain("toy rates must be finite and >= 0"));
        }
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return Err(domain("toy scale must be positive"));
        }
        if self.n_toys == 0 {
            return Err(domain("need at least one toy"));
        }
        z_for_cl(self.cl).map(|_| ())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> RoiCounts<f64> {
        let n_on = poisson_draw(self.background_on + self.signal, rng);
        let n_off = poisson_draw(self.background_on / self.scale_s, rng);
        RoiCounts::new(n_on, n_off, self.scale_s).with_cl(self.cl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub n_toys: u64,
    pub covered: u64,
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub error: f64,
    pub true_signal: f64,
    pub cl: f64,
}

/// Fraction of toys whose bound is at or above the true signal.
pub fn coverage_with_signal(setup: &ToySetup) -> Result<Coverage> {
    setup.validate()?;
    let hits = run_toys(setup.n_toys, setup.seed, |rng| {
        let r = setup.draw(rng);
        // validated above, so this cannot fail
        upper_limit_counts(&r).map(|ul| ul >= setup.signal).unwrap_or(false)
    });
    let covered = hits.iter().filter(|h| **h).count() as u64;
    let n = setup.n_toys as f64;
    let p = covered as f64 / n;
    Ok(Coverage {
        n_toys: setup.n_toys,
        covered,
        coverage: p,
        error: (p * (1.0 - p) / n).sqrt(),
        true_signal: setup.signal,
        cl: setup.cl,
    })
}

/// Minimum toy count for [`coverage_check`].
pub const MIN_COVERAGE_TOYS: u64 = 10_000;

/// Coverage of [`upper_limit_counts`] with zero true signal and equal
/// on/off exposure.
pub fn coverage_check(background: f64, n_toys: u64, cl: f64, seed: u64) -> Result<Coverage> {
    if n_toys < MIN_COVERAGE_TOYS {
        return Err(domain(format!("coverage needs at least {MIN_COVERAGE_TOYS} toys, got {n_toys}")));
    }
    coverage_with_signal(&ToySetup::null(background, cl, n_toys, seed))
}

/// Sorted Gaussian-method bounds over toys.
pub fn toy_limit_distribution(setup: &ToySetup) -> Result<Vec<f64>> {
    setup.validate()?;
    let mut v = run_toys(setup.n_toys, setup.seed, |rng| {
        upper_limit_counts(&setup.draw(rng)).unwrap_or(f64::NAN)
    });
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Empirical quantile (nearest rank) of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Some(sorted[idx])
}

pub fn median(sorted: &[f64]) -> Option<f64> {
    match sorted.len() {
        0 => None,
        n if n % 2 == 1 => Some(sorted[n / 2]),
        n => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

/// Random numbers reused for every trial signal in the Neyman scan.
#[derive(Debug, Clone)]
pub struct NeymanToys {
    u_on: Vec<f64>,
    u_off: Vec<f64>,
}

impl NeymanToys {
    pub fn new(n_toys: usize, seed: u64) -> Result<Self> {
        if n_toys < 100 {
            return Err(domain("Neyman construction needs at least 100 toys"));
        }
        let draws = run_toys(n_toys as u64, seed, |rng| (rng.random::<f64>(), rng.random::<f64>()));
        let (mut u_on, u_off): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
        u_on.sort_by(f64::total_cmp);
        Ok(Self { u_on, u_off })
    }

    pub fn len(&self) -> usize {
        self.u_on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_on.is_empty()
    }
}

/// Poisson quantiles for ascending uniforms by walking the CDF once.
fn poisson_inverse_sorted(mean: f64, sorted_u: &[f64], out: &mut Vec<f64>) {
    use statrs::distribution::{DiscreteCDF, Poisson as SPoisson};
    out.clear();
    if mean <= 0.0 {
        out.resize(sorted_u.len(), 0.0);
        return;
    }
    let d = SPoisson::new(mean).expect("positive mean");
    let mut k = (mean - 12.0 * mean.sqrt() - 10.0).max(0.0) as u64;
    let mut cdf = d.cdf(k);
    for &u in sorted_u {
        while cdf < u {
            k += 1;
            cdf = d.cdf(k);
        }
        out.push(k as f64);
    }
}

/// Toy-MC Neyman upper limit on the signal.
///
/// The background is fixed at its plug-in estimate `s·n_off`. For a trial
/// signal μ, toys draw `n_on ~ Poisson(μ + s·n_off)` and
/// `n_off' ~ Poisson(n_off)` by inversion of shared uniforms, so the toy
/// excess is non-decreasing in μ. The bound is the smallest μ for which at
/// most `1 − cl` of toy excesses fall at or below the observed one.
pub fn neyman_upper_limit(r: &RoiCounts<f64>, toys: &NeymanToys) -> Result<f64> {
    r.validate()?;
    let s = r.scale_s;
    let b = s * r.n_off;
    let observed = r.excess();
    let alpha = 1.0 - r.cl;

    let mut off_draws = Vec::new();
    let mut u_off = toys.u_off.clone();
    u_off.sort_by(f64::total_cmp);
    poisson_inverse_sorted(r.n_off, &u_off, &mut off_draws);
    // pair the sorted off draws with on draws independently: shuffle by the
    // original order of u_off
    let mut order: Vec<usize> = (0..toys.u_off.len()).collect();
    order.sort_by(|&i, &j| toys.u_off[i].total_cmp(&toys.u_off[j]));
    let mut off_by_toy = vec![0.0; order.len()];
    for (rank, &i) in order.iter().enumerate() {
        off_by_toy[i] = off_draws[rank];
    }

    let mut on = Vec::new();
    let tail = |mu: f64, on: &mut Vec<f64>| {
        poisson_inverse_sorted(mu + b, &toys.u_on, on);
        let n = on.len();
        let below = on
            .iter()
            .zip(&off_by_toy)
            .filter(|(a, o)| **a - s * **o <= observed)
            .count();
        below as f64 / n as f64
    };

    if tail(0.0, &mut on) <= alpha {
        return Ok(0.0);
    }
    let spread = (r.n_on + s * s * r.n_off).sqrt().max(1.0);
    let mut lo = 0.0;
    let mut hi = observed.max(0.0) + 10.0 * spread + 10.0;
    while tail(hi, &mut on) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    // bisection to a tenth of a count
    while hi - lo > 0.1 {
        let mid = 0.5 * (lo + hi);
        if tail(mid, &mut on) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Limit report as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub n_on: f64,
    pub n_off: f64,
    pub scale: f64,
    pub cl: f64,
    pub z: f64,
    pub method: LimitMethod,
    pub excess: f64,
    pub excess_error: f64,
    pub delta_nx_upper: f64,
    pub rs: RsParameters<f64>,
    pub rs_denominator: f64,
    pub beta2_over_2_upper: f64,
    pub efficiency_assumption: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage: Option<Coverage>,
}

impl LimitReport {
    pub fn new(result: &LimitResult<f64>, coverage: Option<Coverage>) -> Result<Self> {
        Ok(Self {
            n_on: result.roi.n_on,
            n_off: result.roi.n_off,
            scale: result.roi.scale_s,
            cl: result.cl,
            z: z_for_cl(result.cl)?,
            method: result.method,
            excess: result.roi.excess(),
            excess_error: result.roi.excess_error(),
            delta_nx_upper: result.delta_nx_upper,
            rs: result.rs,
            rs_denominator: rs_denominator(&result.rs)?,
            beta2_over_2_upper: result.beta2_over_2_upper,
            efficiency_assumption: result.efficiency_assumption.clone(),
            coverage,
        })
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}
