//! Cavity mode geometry, detection channels and photon-level Monte Carlo.
//!
//! The fibre cavity's standing-wave Gaussian mode sets the position
//! dependence of the ion's cavity emission; free-space fluorescence follows a
//! Doppler-shifted Lorentzian. Photon arrivals are drawn by thinning an
//! inhomogeneous Poisson process, and camera frames are photon-binned images
//! with Poisson dark counts. Everything is deterministic behind explicit
//! seeds.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit::{pseudo_voigt, PixelGrid};

/// Standing-wave Gaussian mode of the fibre Fabry-Perot cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityMode {
    pub wavelength: f64,
    pub length: f64,
    pub roc_upper: f64,
    pub roc_lower: f64,
    pub waist: f64,
    pub rayleigh_range: f64,
    /// Axial registration of the standing wave: an antinode sits at
    /// z = -antinode_offset ... the amplitude is cos(k z - gouy + k offset).
    pub antinode_offset: f64,
    /// Optional peak coupling scale (rad/s); not used by the rate models.
    pub g0: Option<f64>,
}

impl CavityMode {
    /// Gaussian-beam parameters of a two-mirror cavity.
    ///
    /// Cavities shorter than 1 um are rejected as degenerate, as are
    /// geometries outside the stability range 0 < g1 g2 < 1.
    pub fn from_geometry(length: f64, roc_upper: f64, roc_lower: f64, wavelength: f64) -> Result<CavityMode> {
        if !(wavelength > 0.0) {
            return Err(Error::Cavity("wavelength must be positive".into()));
        }
        if !(length >= 1e-6) {
            return Err(Error::Cavity(format!(
                "cavity length {length:.3e} m below the 1 um degeneracy guard"
            )));
        }
        let g1 = 1.0 - length / roc_upper;
        let g2 = 1.0 - length / roc_lower;
        let product = g1 * g2;
        if !(product > 0.0 && product < 1.0) {
            return Err(Error::Cavity(format!(
                "unstable geometry: stability product g1 g2 = {product:.6}"
            )));
        }
        let denom = g1 + g2 - 2.0 * product;
        if denom.abs() < 1e-15 {
            return Err(Error::Cavity("degenerate (near-planar) geometry".into()));
        }
        let rayleigh = length * (product * (1.0 - product)).sqrt() / denom.abs();
        let waist = (wavelength * rayleigh / PI).sqrt();
        Ok(CavityMode {
            wavelength,
            length,
            roc_upper,
            roc_lower,
            waist,
            rayleigh_range: rayleigh,
            antinode_offset: 0.0,
            g0: None,
        })
    }

    /// Recompute waist and Rayleigh range from the stored geometry and check
    /// the stored values against them (1e-9 relative).
    pub fn validate(&self) -> Result<()> {
        let fresh = CavityMode::from_geometry(self.length, self.roc_upper, self.roc_lower, self.wavelength)?;
        let w_err = ((self.waist - fresh.waist) / fresh.waist).abs();
        let z_err = ((self.rayleigh_range - fresh.rayleigh_range) / fresh.rayleigh_range).abs();
        if w_err > 1e-9 || z_err > 1e-9 {
            return Err(Error::Cavity(format!(
                "stored beam parameters inconsistent with geometry (waist {w_err:.3e}, zR {z_err:.3e})"
            )));
        }
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        TAU / self.wavelength
    }

    /// 1/e^2 intensity radius at axial position z.
    pub fn beam_radius(&self, z: f64) -> f64 {
        let zr = self.rayleigh_range;
        self.waist * (1.0 + (z / zr) * (z / zr)).sqrt()
    }

    /// Normalised standing-wave amplitude psi(r) in [-1, 1]:
    /// (w0/w(z)) cos(k z - gouy(z) + k offset) exp(-rho^2 / w(z)^2).
    pub fn mode_amplitude(&self, r: &Vector3<f64>) -> Result<f64> {
        let z = r.z;
        if z.abs() >= self.length / 2.0 {
            return Err(Error::Optics(format!(
                "|z| = {:.3e} m outside the cavity (length {:.3e} m)",
                z.abs(),
                self.length
            )));
        }
        let rho_sq = r.x * r.x + r.y * r.y;
        let w = self.beam_radius(z);
        let gouy = (z / self.rayleigh_range).atan();
        let k = self.wavenumber();
        Ok((self.waist / w) * (k * z - gouy + k * self.antinode_offset).cos() * (-rho_sq / (w * w)).exp())
    }

    /// Closed-form Gaussian-spread average of psi^2 for an ion with axial
    /// position spread `sigma_z` centred at `z_mean`, at radial offset
    /// `rho`: 0.5 (1 + e^{-2 k^2 sigma^2} cos(2 k z - 2 gouy + 2 k offset))
    /// times the envelope at `z_mean`.
    pub fn mean_sq_amplitude(&self, z_mean: f64, sigma_z: f64, rho: f64) -> f64 {
        let k = self.wavenumber();
        let w = self.beam_radius(z_mean);
        let gouy = (z_mean / self.rayleigh_range).atan();
        let envelope = (self.waist / w) * (self.waist / w) * (-2.0 * rho * rho / (w * w)).exp();
        let contrast = (-2.0 * k * k * sigma_z * sigma_z).exp();
        let phase = 2.0 * (k * z_mean - gouy + k * self.antinode_offset);
        envelope * 0.5 * (1.0 + contrast * phase.cos())
    }

    /// Axial position spread that reduces the standing-wave visibility to
    /// `visibility` (inverse of e^{-2 k^2 sigma^2}).
    pub fn sigma_z_for_visibility(&self, visibility: f64) -> Result<f64> {
        if !(visibility > 0.0 && visibility <= 1.0) {
            return Err(Error::Optics(format!("visibility {visibility} outside (0, 1]")));
        }
        let k = self.wavenumber();
        Ok((-visibility.ln() / (2.0 * k * k)).sqrt())
    }
}

/// Doppler-sensitive fluorescence channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserParams {
    /// Detuning from resonance (rad/s).
    pub detuning: f64,
    /// Full linewidth (rad/s).
    pub linewidth: f64,
    /// Saturation parameter; the rate carries s/(1+s).
    pub saturation: f64,
    /// Laser wavevector (rad/m).
    pub k_vector: Vector3<f64>,
    /// Detected count rate at resonance for a stationary ion (counts/s),
    /// detection efficiency folded in.
    pub peak_rate: f64,
}

/// Detected fluorescence rate for an ion moving at `velocity`: a Lorentzian
/// of the first-order Doppler-shifted detuning.
pub fn fluorescence_rate(laser: &LaserParams, velocity: &Vector3<f64>) -> f64 {
    let half = laser.linewidth / 2.0;
    let detuning_eff = laser.detuning - laser.k_vector.dot(velocity);
    let lorentz = half * half / (detuning_eff * detuning_eff + half * half);
    let sat = laser.saturation / (1.0 + laser.saturation);
    laser.peak_rate * sat * lorentz
}

/// Spectral and background parameters of the cavity emission channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityEmissionParams {
    /// Peak detected rate at an antinode on resonance (counts/s).
    pub peak_rate: f64,
    /// Lorentzian HWHM of the emission line (rad/s or any consistent unit).
    pub lorentzian_width: f64,
    /// Gaussian sigma of the emission line (same unit as above).
    pub gaussian_width: f64,
    /// Detuning-independent background (counts/s), e.g. locking-light leakage.
    pub background_rate: f64,
}

/// Detected cavity emission rate: background + peak * psi(position)^2 *
/// pseudo-Voigt(detuning).
pub fn cavity_emission_rate(
    mode: &CavityMode,
    position: &Vector3<f64>,
    cavity_detuning: f64,
    params: &CavityEmissionParams,
) -> Result<f64> {
    if !(params.lorentzian_width > 0.0) || !(params.gaussian_width > 0.0) {
        return Err(Error::Optics("emission line widths must be positive".into()));
    }
    let psi = mode.mode_amplitude(position)?;
    let line = pseudo_voigt(cavity_detuning, params.gaussian_width, params.lorentzian_width);
    Ok(params.background_rate + params.peak_rate * psi * psi * line)
}

/// Photon arrival times inside an observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonStream {
    pub window: (f64, f64),
    pub arrivals: Vec<f64>,
}

impl PhotonStream {
    pub fn count(&self) -> usize {
        self.arrivals.len()
    }

    /// Histogram of arrivals folded by drive phase: returns bin centres
    /// (rad) and counts.
    pub fn phase_histogram(&self, omega: f64, n_bins: usize) -> (Vec<f64>, Vec<f64>) {
        let mut counts = vec![0.0; n_bins];
        for &t in &self.arrivals {
            let phase = (omega * t).rem_euclid(TAU);
            let bin = ((phase / TAU * n_bins as f64) as usize).min(n_bins - 1);
            counts[bin] += 1.0;
        }
        let centers = (0..n_bins).map(|i| (i as f64 + 0.5) / n_bins as f64 * TAU).collect();
        (centers, counts)
    }
}

/// Inhomogeneous Poisson sampling by thinning.
///
/// Proposals arrive at `rate_cap`; each survives with probability
/// rate(t)/rate_cap. Errors if the rate function ever exceeds the cap.
pub fn sample_photon_arrivals<F>(
    rate_fn: F,
    window: (f64, f64),
    rate_cap: f64,
    seed: u64,
) -> Result<PhotonStream>
where
    F: Fn(f64) -> f64,
{
    if !(rate_cap > 0.0) {
        return Err(Error::Optics("rate cap must be positive".into()));
    }
    if !(window.1 > window.0) {
        return Err(Error::Optics("empty observation window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrivals = Vec::new();
    let mut t = window.0;
    loop {
        // Exponential gap at the cap rate.
        let u: f64 = rng.random();
        t += -u.max(f64::MIN_POSITIVE).ln() / rate_cap;
        if t >= window.1 {
            break;
        }
        let rate = rate_fn(t);
        if rate > rate_cap {
            return Err(Error::RateCapExceeded { observed: rate, cap: rate_cap });
        }
        if rate > 0.0 && rng.random::<f64>() < rate / rate_cap {
            arrivals.push(t);
        }
    }
    Ok(PhotonStream { window, arrivals })
}

/// Imaging system calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Object-space size of one pixel (m).
    pub pixel_pitch_object: f64,
    /// Point-spread-function sigma in object space (m).
    pub psf_sigma: f64,
    pub counts_per_photon: f64,
    /// Dark counts per pixel per second.
    pub dark_rate: f64,
    /// Square sensor side length (pixels).
    pub sensor_extent: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_pitch_object > 0.0
            && self.psf_sigma > 0.0
            && self.counts_per_photon > 0.0
            && self.dark_rate >= 0.0
            && self.sensor_extent >= 8)
        {
            return Err(Error::Optics("invalid camera model".into()));
        }
        if self.psf_sigma < self.pixel_pitch_object / 4.0 {
            return Err(Error::Optics(
                "psf sigma below a quarter pixel would alias the spot".into(),
            ));
        }
        Ok(())
    }

    /// Object-space coordinate of the sensor centre.
    fn half_extent(&self) -> f64 {
        self.sensor_extent as f64 / 2.0 * self.pixel_pitch_object
    }
}

/// Photon-binned fluorescence image of an ion at `mean_position` (object
/// space, metres) with Gaussian position spread `position_sigma`.
///
/// Photons are Poisson in number, each blurred by the position distribution
/// and the PSF, binned to pixels; Poisson dark counts are added per pixel.
pub fn render_ion_image(
    mean_position: (f64, f64),
    position_sigma: f64,
    camera: &CameraModel,
    exposure: f64,
    photon_rate: f64,
    seed: u64,
) -> Result<PixelGrid> {
    camera.validate()?;
    if exposure < 0.0 || photon_rate < 0.0 {
        return Err(Error::Optics("exposure and photon rate must be nonnegative".into()));
    }
    let half = camera.half_extent();
    if mean_position.0.abs() >= half || mean_position.1.abs() >= half {
        return Err(Error::Optics(format!(
            "mean position ({:.3e}, {:.3e}) m outside the sensor field (+-{half:.3e} m)",
            mean_position.0, mean_position.1
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = camera.sensor_extent;
    let mut values = vec![0.0_f64; n * n];

    let mean_photons = photon_rate * exposure;
    let n_photons = if mean_photons > 0.0 {
        Poisson::new(mean_photons)
            .map_err(|e| Error::Optics(format!("photon budget: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let blur = (position_sigma * position_sigma + camera.psf_sigma * camera.psf_sigma).sqrt();
    let spread = Normal::new(0.0, blur).map_err(|e| Error::Optics(e.to_string()))?;
    for _ in 0..n_photons {
        let x = mean_position.0 + spread.sample(&mut rng);
        let y = mean_position.1 + spread.sample(&mut rng);
        let px = ((x + half) / camera.pixel_pitch_object).floor();
        let py = ((y + half) / camera.pixel_pitch_object).floor();
        if px >= 0.0 && py >= 0.0 && (px as usize) < n && (py as usize) < n {
            values[py as usize * n + px as usize] += camera.counts_per_photon;
        }
    }

    let dark_mean = camera.dark_rate * exposure;
    if dark_mean > 0.0 {
        let dark = Poisson::new(dark_mean).map_err(|e| Error::Optics(e.to_string()))?;
        for v in values.iter_mut() {
            *v += dark.sample(&mut rng);
        }
    }

    Ok(PixelGrid { width: n, height: n, values, pixel_pitch: camera.pixel_pitch_object })
}

/// Gaussian velocity sample helper used by thermal-spread studies.
pub fn gaussian_position_sample(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    mean + sigma * rng.sample::<f64, _>(StandardNormal)
}
