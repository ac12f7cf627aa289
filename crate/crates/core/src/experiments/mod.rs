//! End-to-end virtual experiments.
//!
//! Each run calibrates the trap model from the configured targets, executes
//! one measurement pipeline photon-for-photon (trajectories, count
//! statistics, fits) and emits a `ScanTable` plus a JSON summary. Scan
//! points draw their randomness from streams keyed by (master seed,
//! experiment, point index), so results do not depend on execution order or
//! thread count.

pub mod config;
pub mod output;

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use rayon::prelude::*;

pub use config::ExperimentConfig;
pub use output::{derive_seed, write_json_summary, Column, RunMeta, ScanTable};

use crate::dynamics::{
    integrate_trajectory, micromotion_phasor, steady_state_cycle, MismatchParams,
};
use crate::error::{Error, Result};
use crate::fitkit::{self, FitResult};
use crate::optics::{cavity_emission_rate, fluorescence_rate, render_ion_image, sample_photon_arrivals};
use crate::servo::{
    band_power, compose_loop_filter, linewidth_to_nm, loop_margins, open_loop_response,
    simulate_lock, DiscretePlant, LoopMargins,
};
use crate::trapmodel::{
    calibrate_model, CalibrationReport, DriveConfig, IonSpecies, RfSource, TrapModel,
};

fn meta(cfg: &ExperimentConfig, experiment: &str) -> RunMeta {
    RunMeta { experiment: experiment.into(), seed: cfg.master_seed, config_hash: cfg.hash() }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Calibrate the trap model from the configured targets and geometry.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<(TrapModel, CalibrationReport)> {
    calibrate_model(cfg.calibration()?, cfg.trap()?)
}

fn base_drive(cfg: &ExperimentConfig) -> Result<DriveConfig> {
    let d = cfg.drive()?;
    DriveConfig::main_drive(TAU * d.frequency_hz, d.v_main)
}

/// Coefficient of determination of a fitted model against the data.
fn r_squared(ys: &[f64], predicted: impl Fn(usize) -> f64) -> f64 {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let tss: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    let rss: f64 = ys.iter().enumerate().map(|(i, y)| (y - predicted(i)).powi(2)).sum();
    if tss == 0.0 {
        return 1.0;
    }
    1.0 - rss / tss
}

/// Sample `repeats` Poisson draws of `rate * t` and return (mean, std error).
fn poisson_counts(rate: f64, t: f64, repeats: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let lambda = rate * t;
    if lambda <= 0.0 {
        return (0.0, 0.0);
    }
    let dist = Poisson::new(lambda).expect("positive lambda");
    let draws: Vec<f64> = (0..repeats).map(|_| dist.sample(rng)).collect();
    let mean = draws.iter().sum::<f64>() / repeats as f64;
    let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / repeats as f64;
    (mean, (var / repeats as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Secular slopes
// ---------------------------------------------------------------------------

pub struct SecularScanResult {
    pub table: ScanTable,
    pub axial_fit: FitResult,
    pub radial_fit: FitResult,
    pub axial_slope_hz_per_v: f64,
    pub radial_slope_hz_per_v: f64,
    pub report: CalibrationReport,
}

/// Secular frequencies across the main-drive grid with through-origin
/// linear fits per axis.
pub fn run_secular_slope_scan(cfg: &ExperimentConfig) -> Result<SecularScanResult> {
    let (model, report) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    let drive_cfg = cfg.drive()?;
    let vs = linspace(scan.secular_v_min, scan.secular_v_max, scan.secular_points);
    let mut fx = Vec::new();
    let mut fy = Vec::new();
    let mut fz = Vec::new();
    for &v in &vs {
        let modes = model.secular_frequencies(&DriveConfig::main_drive(TAU * drive_cfg.frequency_hz, v)?)?;
        fx.push(modes.frequencies_hz[0]);
        fy.push(modes.frequencies_hz[1]);
        fz.push(modes.frequencies_hz[2]);
    }
    let radial_mean: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| 0.5 * (a + b)).collect();
    let axial_fit = fitkit::fit_polynomial(&vs, &fz, 1, true)?;
    let radial_fit = fitkit::fit_polynomial(&vs, &radial_mean, 1, true)?;

    let mut table = ScanTable::new(meta(cfg, "secular-scan"));
    table
        .push_column("v_main_V", vs)
        .push_column("f_radial_x_Hz", fx)
        .push_column("f_radial_y_Hz", fy)
        .push_column("f_axial_Hz", fz);
    let axial_slope = axial_fit.value("c1");
    let radial_slope = radial_fit.value("c1");
    Ok(SecularScanResult { table, axial_fit, radial_fit, axial_slope_hz_per_v: axial_slope, radial_slope_hz_per_v: radial_slope, report })
}

impl SecularScanResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = self.table.write_csv(dir, "secular_scan")?;
        let body = serde_json::json!({
            "axial_slope_khz_per_v": self.axial_slope_hz_per_v / 1e3,
            "radial_slope_khz_per_v": self.radial_slope_hz_per_v / 1e3,
            "axial_fit": self.axial_fit.to_json(),
            "radial_fit": self.radial_fit.to_json(),
            "calibration": serde_json::to_value(&self.report).map_err(|e| Error::Serialization(e.to_string()))?,
        });
        let json = write_json_summary(dir, "secular_scan", &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Minimum position vs rf amplitude
// ---------------------------------------------------------------------------

pub struct MinimumScanResult {
    pub table: ScanTable,
    pub fit: FitResult,
    pub displacement_at_max_um: f64,
}

/// Null position against the scanned rf amplitude, with the through-origin
/// quadratic refit.
pub fn run_minimum_scan(cfg: &ExperimentConfig) -> Result<MinimumScanResult> {
    let (model, _) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    if scan.minimum_scan_points == 0 {
        return Err(Error::config("minimum scan needs a nonempty amplitude list"));
    }
    let drive = base_drive(cfg)?;
    let amps = linspace(0.0, scan.minimum_scan_max_v, scan.minimum_scan_points);
    let scan_out = model.minimum_vs_amplitude_scan(&drive, scan.minimum_scan_source, &amps)?;

    let axis = scan_out.axis;
    let mut table = ScanTable::new(meta(cfg, "minimum-scan"));
    table
        .push_column("amplitude_V", scan_out.amplitudes.clone())
        .push_column("x_um", scan_out.positions.iter().map(|p| p.x * 1e6).collect())
        .push_column("y_um", scan_out.positions.iter().map(|p| p.y * 1e6).collect())
        .push_column("z_um", scan_out.positions.iter().map(|p| p.z * 1e6).collect());
    let displacement = scan_out.positions.last().unwrap()[axis] * 1e6;
    Ok(MinimumScanResult { table, fit: scan_out.fit, displacement_at_max_um: displacement })
}

impl MinimumScanResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = self.table.write_csv(dir, "minimum_scan")?;
        let body = serde_json::json!({
            "quadratic_um_per_v2": self.fit.value("c2"),
            "linear_um_per_v": self.fit.value("c1"),
            "displacement_at_max_um": self.displacement_at_max_um,
            "fit": self.fit.to_json(),
        });
        let json = write_json_summary(dir, "minimum_scan", &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Rf-correlation phase scans
// ---------------------------------------------------------------------------

/// Which detection channel the phase scan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseChannel {
    /// Radial rod scanned, free-space fluorescence (Doppler) detection.
    Radial,
    /// Differential inner pair scanned, cavity-emission detection with the
    /// ion parked at the maximum coupling-gradient point.
    Axial,
}

impl PhaseChannel {
    fn name(&self) -> &'static str {
        match self {
            PhaseChannel::Radial => "phase-scan-radial",
            PhaseChannel::Axial => "phase-scan-axial",
        }
    }
}

pub struct PhaseScanResult {
    pub table: ScanTable,
    /// Linear fit of the trajectory-derived signed amplitude (m) vs delta.
    pub line_fit_m: FitResult,
    /// Linear fit of the photon-derived signed amplitude (counts) vs delta.
    pub line_fit_counts: FitResult,
    pub r_squared_m: f64,
    pub r_squared_counts: f64,
    /// Zero crossing of the trajectory-derived line (rad).
    pub zero_crossing_rad: f64,
    pub measured_slope_m_per_rad: f64,
    /// First-order model slope (1/4) q R alpha (m per rad).
    pub predicted_slope_m_per_rad: f64,
    pub polarity_flip: bool,
}

struct PhasePoint {
    amp_m: f64,
    phase_m: f64,
    amp_counts: f64,
    amp_counts_err: f64,
    phase_counts: f64,
}

/// Scan the phase of one auxiliary rf source through the matched point and
/// read the induced micromotion on the configured detection channel.
pub fn run_phase_scan(cfg: &ExperimentConfig, channel: PhaseChannel) -> Result<PhaseScanResult> {
    let (model, _) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    let laser = cfg.laser()?;
    let detection = cfg.detection()?;
    let ion = IonSpecies::default();
    let drive0 = base_drive(cfg)?;
    let omega = drive0.omega_rf;
    let period = TAU / omega;
    let dt = period / 200.0;

    let (source, v_aux) = match channel {
        PhaseChannel::Radial => (
            RfSource::Electrode(crate::trapmodel::Electrode::RadialY),
            scan.phase_radial_amplitude_v,
        ),
        PhaseChannel::Axial => (RfSource::InnerDiff, scan.phase_axial_amplitude_v),
    };

    // In-phase reference drive: the aux source at its amplitude, matched
    // phase. Its null is the ion's resting point for every delta.
    let mut drive_matched = drive0.clone();
    drive_matched.set_source(source, v_aux, 0.0);
    let rest = model.find_rf_null(&drive_matched, &Vector3::zeros())?;
    let axis = source.displacement_axis();

    // Cavity registration for the axial channel: park the ion at the
    // maximum gradient of psi^2, a quarter period (k z = pi/4) off an
    // antinode, by adjusting the standing-wave registration.
    let mode = {
        let mut mode = cfg.cavity()?.mode()?;
        if channel == PhaseChannel::Axial {
            let k = mode.wavenumber();
            let gouy = (rest.z / mode.rayleigh_range).atan();
            let target = std::f64::consts::FRAC_PI_4;
            let n = ((k * rest.z - gouy - target) / std::f64::consts::PI).round();
            mode.antinode_offset = (target + gouy - k * rest.z + n * std::f64::consts::PI) / k;
        }
        mode
    };
    let emission = detection.emission_params();
    let laser_params = laser.params();
    let damping = laser.damping();

    let deltas = linspace(-scan.phase_delta_max_rad, scan.phase_delta_max_rad, scan.phase_points);
    let duration = (scan.phase_settle_periods + scan.phase_projection_periods) as f64 * period;

    let points: Vec<PhasePoint> = deltas
        .par_iter()
        .enumerate()
        .map(|(j, &delta)| -> Result<PhasePoint> {
            let mut drive = drive0.clone();
            drive.set_source(source, v_aux, delta);
            let traj = integrate_trajectory(
                &model,
                &drive,
                &ion,
                damping,
                &rest,
                &Vector3::zeros(),
                duration,
                dt,
                None,
            )?;
            let phasor = micromotion_phasor(&traj, omega)?;

            // Photon channel from the settled periodic orbit.
            let cycle = steady_state_cycle(&traj, omega, 64, 200)?;
            let rate_fn: Box<dyn Fn(f64) -> f64> = match channel {
                PhaseChannel::Radial => Box::new(move |t: f64| {
                    let (_, v) = cycle.at_time(t);
                    fluorescence_rate(&laser_params, &v)
                }),
                PhaseChannel::Axial => {
                    let mode = mode;
                    let emission = emission;
                    Box::new(move |t: f64| {
                        let (r, _) = cycle.at_time(t);
                        cavity_emission_rate(&mode, &r, 0.0, &emission).expect("in-cavity position")
                    })
                }
            };
            let mut max_rate = 0.0_f64;
            for k in 0..400 {
                max_rate = max_rate.max(rate_fn(k as f64 / 400.0 * period));
            }
            let cap = max_rate * 1.0000001 + 1.0;
            let seed = derive_seed(cfg.master_seed, channel.name(), j as u64);
            let stream = sample_photon_arrivals(&rate_fn, (0.0, detection.integration_time_s), cap, seed)?;
            let (centers, counts) = stream.phase_histogram(omega, detection.phase_bins);
            let fit = fitkit::fit_fixed_frequency_sinusoid(&centers, &counts, true)?;
            Ok(PhasePoint {
                amp_m: phasor[axis].amplitude,
                phase_m: phasor[axis].phase,
                amp_counts: fit.value("amplitude"),
                amp_counts_err: fit.error("amplitude"),
                phase_counts: fit.value("phase"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Signs relative to the most-positive-delta endpoint.
    let ref_m = points.last().unwrap().phase_m;
    let ref_c = points.last().unwrap().phase_counts;
    let signed_m: Vec<f64> = points
        .iter()
        .map(|p| p.amp_m * (p.phase_m - ref_m).cos().signum())
        .collect();
    let signed_c: Vec<f64> = points
        .iter()
        .map(|p| p.amp_counts * (p.phase_counts - ref_c).cos().signum())
        .collect();
    let max_c = signed_c.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1e-300);
    let normalized_c: Vec<f64> = signed_c.iter().map(|v| v / max_c).collect();

    let line_fit_m = fitkit::fit_polynomial(&deltas, &signed_m, 1, false)?;
    let line_fit_counts = fitkit::fit_polynomial(&deltas, &signed_c, 1, false)?;
    let r2_m = r_squared(&signed_m, |i| line_fit_m.value("c0") + line_fit_m.value("c1") * deltas[i]);
    let r2_c = r_squared(&signed_c, |i| {
        line_fit_counts.value("c0") + line_fit_counts.value("c1") * deltas[i]
    });
    let slope = line_fit_m.value("c1");
    let zero_crossing = -line_fit_m.value("c0") / slope;

    let params = MismatchParams::from_model(&model, &drive_matched, &ion, source, v_aux, 1.0)?;
    let predicted_slope = params.amplitude()?;

    let mut table = ScanTable::new(meta(cfg, channel.name()));
    table
        .push_column("delta_rad", deltas.clone())
        .push_column("amplitude_m", points.iter().map(|p| p.amp_m).collect())
        .push_column("signed_amplitude_m", signed_m.clone())
        .push_column("counts_amplitude", points.iter().map(|p| p.amp_counts).collect())
        .push_column("counts_amplitude_err", points.iter().map(|p| p.amp_counts_err).collect())
        .push_column("signed_counts_amplitude", signed_c.clone())
        .push_column("normalized_amplitude", normalized_c);

    Ok(PhaseScanResult {
        table,
        line_fit_m,
        line_fit_counts,
        r_squared_m: r2_m,
        r_squared_counts: r2_c,
        zero_crossing_rad: zero_crossing,
        measured_slope_m_per_rad: slope,
        predicted_slope_m_per_rad: predicted_slope,
        polarity_flip: signed_m.first().unwrap() * signed_m.last().unwrap() < 0.0,
    })
}

impl PhaseScanResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let stem = self.table.meta.experiment.replace('-', "_");
        let csv = self.table.write_csv(dir, &stem)?;
        let body = serde_json::json!({
            "measured_slope_m_per_rad": self.measured_slope_m_per_rad,
            "predicted_slope_m_per_rad": self.predicted_slope_m_per_rad,
            "zero_crossing_rad": self.zero_crossing_rad,
            "r_squared_trajectory": self.r_squared_m,
            "r_squared_counts": self.r_squared_counts,
            "polarity_flip": self.polarity_flip,
            "line_fit_trajectory": self.line_fit_m.to_json(),
            "line_fit_counts": self.line_fit_counts.to_json(),
        });
        let json = write_json_summary(dir, &stem, &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Axial standing-wave scan
// ---------------------------------------------------------------------------

pub struct AxialScanResult {
    pub table: ScanTable,
    pub fit: FitResult,
    pub antinode_spacing_nm: f64,
    pub visibility: f64,
}

/// Sweep the differential inner-electrode voltage to walk the ion along the
/// standing wave, photon-count at each point, and fit the two-antinode
/// structure.
pub fn run_axial_standing_wave_scan(cfg: &ExperimentConfig) -> Result<AxialScanResult> {
    let (_, report) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    let cavity = cfg.cavity()?;
    let detection = cfg.detection()?;
    let mode = cavity.mode()?;
    let sigma_z = cavity.sigma_z_nm * 1e-9;
    let t_int = detection.integration_time_s;
    let bg = detection.cavity_background_cps;
    let peak = detection.cavity_peak_rate_cps;

    let gen_vs = linspace(0.0, scan.axial_max_generator_v, scan.axial_points);
    let coeff_m_per_v = report.axial_shift_um_per_v * 1e-6;
    let mut z_nm = Vec::new();
    let mut means = Vec::new();
    let mut errs = Vec::new();
    for (j, &vg) in gen_vs.iter().enumerate() {
        let z = coeff_m_per_v * scan.inline_loss_factor * vg;
        let rate = bg + peak * mode.mean_sq_amplitude(z, sigma_z, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "axial-scan", j as u64));
        let (mean, err) = poisson_counts(rate, t_int, detection.repeats, &mut rng);
        z_nm.push(z * 1e9);
        means.push(mean);
        errs.push(err);
    }

    // Sinusoid in position with free period: counts = c0 + c1 cos(2 pi z /
    // period + phase). Seed the phase from a coarse grid.
    let ymax = means.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let ymin = means.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let z_fit = z_nm.clone();
    let data = means.clone();
    let residual = move |p: &[f64]| -> Vec<f64> {
        z_fit
            .iter()
            .zip(&data)
            .map(|(&z, &y)| p[0] + p[1] * (TAU * z / p[2] + p[3]).cos() - y)
            .collect()
    };
    let mut best: Option<FitResult> = None;
    for phase0 in [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI, 1.5 * std::f64::consts::PI] {
        let initial = [(ymax + ymin) / 2.0, (ymax - ymin) / 2.0, 433.0, phase0];
        if let Ok(fit) = fitkit::gauss_newton_engine(&residual, &initial, &["offset", "amplitude", "period", "phase"]) {
            if fit.converged && best.as_ref().map_or(true, |b| fit.residual_rms < b.residual_rms) {
                best = Some(fit);
            }
        }
    }
    let fit = best.ok_or_else(|| Error::Fit("standing-wave fit did not converge".into()))?;
    let spacing = fit.value("period").abs();
    let c0 = fit.value("offset");
    let c1 = fit.value("amplitude").abs();
    let signal = c0 - bg * t_int;
    if signal <= 0.0 {
        return Err(Error::Fit("no signal above the configured background".into()));
    }
    let visibility = c1 / signal;

    let mut table = ScanTable::new(meta(cfg, "axial-scan"));
    table
        .push_column("generator_V", gen_vs)
        .push_column("z_nm", z_nm)
        .push_column("counts_mean", means)
        .push_column("counts_err", errs);
    Ok(AxialScanResult { table, fit, antinode_spacing_nm: spacing, visibility })
}

impl AxialScanResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = self.table.write_csv(dir, "axial_scan")?;
        let body = serde_json::json!({
            "antinode_spacing_nm": self.antinode_spacing_nm,
            "visibility": self.visibility,
            "fit": self.fit.to_json(),
        });
        let json = write_json_summary(dir, "axial_scan", &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Radial mode map
// ---------------------------------------------------------------------------

pub struct RadialMapResult {
    pub table: ScanTable,
    pub fit: FitResult,
    pub waist_um: f64,
    pub center_um: f64,
}

/// Walk the ion radially through the cavity mode; at every position record a
/// cavity emission spectrum, fit it, and track the spectral area against
/// position. A Gaussian fit of area vs position returns the mode waist.
pub fn run_radial_mode_map(cfg: &ExperimentConfig) -> Result<RadialMapResult> {
    let (model, _) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    let cavity = cfg.cavity()?;
    let detection = cfg.detection()?;
    let mode = cavity.mode()?;
    let emission = detection.emission_params();
    let drive0 = base_drive(cfg)?;
    let centre_m = cavity.mode_centre_offset_y_um * 1e-6;
    let t_int = detection.integration_time_s;

    let amps = linspace(0.0, scan.radial_max_v, scan.radial_points);
    let detunings: Vec<f64> =
        linspace(-scan.detuning_span_hz, scan.detuning_span_hz, scan.detuning_points);
    let detunings_mhz: Vec<f64> = detunings.iter().map(|d| d / 1e6).collect();

    struct MapPoint {
        position_um: f64,
        area: f64,
        area_err: f64,
    }
    let points: Vec<MapPoint> = amps
        .par_iter()
        .enumerate()
        .map(|(j, &a)| -> Result<MapPoint> {
            let mut drive = drive0.clone();
            drive.set_source(scan.minimum_scan_source, a, 0.0);
            let null = model.find_rf_null(&drive, &Vector3::zeros())?;
            let rho = (null.y - centre_m).abs();
            // Ion re-registered onto an antinode per point.
            let position = Vector3::new(rho, 0.0, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "radial-map", j as u64));
            let mut means = Vec::with_capacity(detunings.len());
            for &d in &detunings {
                let rate = cavity_emission_rate(&mode, &position, d, &emission)?;
                let (mean, _) = poisson_counts(rate, t_int, detection.repeats, &mut rng);
                means.push(mean);
            }
            let fit = fitkit::fit_pseudo_voigt(&detunings_mhz, &means)?;
            if !fit.converged {
                return Err(Error::Fit(format!("spectrum fit did not converge at {a} V")));
            }
            Ok(MapPoint { position_um: null.y * 1e6, area: fit.value("area"), area_err: fit.error("area") })
        })
        .collect::<Result<Vec<_>>>()?;

    let positions: Vec<f64> = points.iter().map(|p| p.position_um).collect();
    let areas: Vec<f64> = points.iter().map(|p| p.area).collect();
    let errs: Vec<f64> = points.iter().map(|p| p.area_err).collect();
    let fit = fitkit::fit_gaussian_1d(&positions, &areas)?;
    if !fit.converged {
        return Err(Error::Fit("mode profile fit did not converge".into()));
    }

    let mut table = ScanTable::new(meta(cfg, "radial-map"));
    table
        .push_column("amplitude_V", amps)
        .push_column("position_um", positions)
        .push_column("spectral_area", areas)
        .push_column("spectral_area_err", errs);
    Ok(RadialMapResult {
        table,
        waist_um: fit.value("waist"),
        center_um: fit.value("center"),
        fit,
    })
}

impl RadialMapResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = self.table.write_csv(dir, "radial_map")?;
        let body = serde_json::json!({
            "waist_um": self.waist_um,
            "waist_err_um": self.fit.error("waist"),
            "center_um": self.center_um,
            "center_err_um": self.fit.error("center"),
            "fit": self.fit.to_json(),
        });
        let json = write_json_summary(dir, "radial_map", &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Camera displacement calibration
// ---------------------------------------------------------------------------

pub struct DisplacementCalResult {
    pub table: ScanTable,
    pub fit: FitResult,
    pub slope_um_per_vpp: f64,
    pub amplifier_gain_v_per_vpp: f64,
}

/// Image the ion at each generator setting, fit the camera spot, and fit the
/// displacement against the generator amplitude.
pub fn run_displacement_calibration(cfg: &ExperimentConfig) -> Result<DisplacementCalResult> {
    let (model, report) = calibrate(cfg)?;
    let scan = cfg.scan()?;
    let detection = cfg.detection()?;
    let camera = detection.camera();
    camera.validate()?;
    let drive0 = base_drive(cfg)?;
    let gain = report.amplifier_gain_v_per_vpp;

    let vpps = linspace(0.0, scan.displacement_max_vpp, scan.displacement_points);
    struct Frame {
        x_um: f64,
        y_um: f64,
    }
    let frames: Vec<Frame> = vpps
        .par_iter()
        .enumerate()
        .map(|(j, &u)| -> Result<Frame> {
            let mut drive = drive0.clone();
            drive.set_source(scan.minimum_scan_source, gain * u, 0.0);
            let null = model.find_rf_null(&drive, &Vector3::zeros())?;
            let seed = derive_seed(cfg.master_seed, "displacement-cal", j as u64);
            let frame = render_ion_image(
                (null.x, null.y),
                detection.position_sigma_um * 1e-6,
                &camera,
                detection.exposure_s,
                detection.camera_photon_rate_cps,
                seed,
            )?;
            let fit = fitkit::fit_gaussian_spot_2d(&frame)?;
            Ok(Frame { x_um: fit.value("x0_m") * 1e6, y_um: fit.value("y0_m") * 1e6 })
        })
        .collect::<Result<Vec<_>>>()?;

    let displacement: Vec<f64> = frames.iter().map(|f| f.y_um - frames[0].y_um).collect();
    let fit = fitkit::fit_polynomial(&vpps, &displacement, 1, false)?;
    let slope = fit.value("c1");

    let mut table = ScanTable::new(meta(cfg, "displacement-cal"));
    table
        .push_column("generator_Vpp", vpps.clone())
        .push_column("electrode_V", vpps.iter().map(|u| gain * u).collect())
        .push_column("x_um", frames.iter().map(|f| f.x_um).collect())
        .push_column("y_um", frames.iter().map(|f| f.y_um).collect())
        .push_column("displacement_um", displacement);
    Ok(DisplacementCalResult {
        table,
        fit,
        slope_um_per_vpp: slope.abs(),
        amplifier_gain_v_per_vpp: gain,
    })
}

impl DisplacementCalResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = self.table.write_csv(dir, "displacement_cal")?;
        let body = serde_json::json!({
            "slope_um_per_vpp": self.slope_um_per_vpp,
            "slope_err_um_per_vpp": self.fit.error("c1"),
            "amplifier_gain_v_per_vpp": self.amplifier_gain_v_per_vpp,
            "fit": self.fit.to_json(),
        });
        let json = write_json_summary(dir, "displacement_cal", &self.table.meta, body)?;
        Ok(vec![csv, json])
    }
}

// ---------------------------------------------------------------------------
// Servo lock simulation
// ---------------------------------------------------------------------------

pub struct ServoSimResult {
    pub margins: LoopMargins,
    pub residual_std_linewidths: f64,
    pub suppression_below_100hz_db: f64,
    pub bode: ScanTable,
    pub residual: ScanTable,
}

/// Closed-loop lock run plus Bode data of the composed loop.
pub fn run_servo_sim(cfg: &ExperimentConfig) -> Result<ServoSimResult> {
    let servo = cfg.servo()?;
    let cavity = cfg.cavity()?;
    let filter = compose_loop_filter(&servo.filter, servo.sample_rate_hz, servo.pi_gains())?;
    let discrete = DiscretePlant::new(&servo.plant, servo.sample_rate_hz)?;
    let margins = loop_margins(&discrete, &filter)?;
    let lw_nm = linewidth_to_nm(cavity.length_m, servo.lock_linewidth_hz, servo.lock_wavelength_m);
    let seed = derive_seed(cfg.master_seed, "servo-sim", 0);
    let run = simulate_lock(&servo.plant, &filter, &servo.noise, lw_nm, servo.duration_s, seed)?;

    let settle = run.open_error_nm.len() / 5;
    let open = band_power(&run.open_error_nm[settle..], run.sample_rate, 0.0, 100.0);
    let closed = band_power(&run.closed_error_nm[settle..], run.sample_rate, 0.0, 100.0);
    let suppression_db = 10.0 * (open / closed).log10();

    let mut bode = ScanTable::new(meta(cfg, "servo-bode"));
    let n = 200;
    let freqs: Vec<f64> = (0..n).map(|i| 1.0 * (1e5_f64 / 1.0).powf(i as f64 / (n - 1) as f64)).collect();
    let mut plant_db = Vec::new();
    let mut plant_deg = Vec::new();
    let mut open_db = Vec::new();
    let mut open_deg = Vec::new();
    for &f in &freqs {
        let p = servo.plant.frequency_response(f);
        let g = open_loop_response(&discrete, &filter, f);
        plant_db.push(20.0 * p.norm().log10());
        plant_deg.push(p.arg().to_degrees());
        open_db.push(20.0 * g.norm().log10());
        open_deg.push(g.arg().to_degrees());
    }
    bode.push_column("f_Hz", freqs)
        .push_column("plant_mag_dB", plant_db)
        .push_column("plant_phase_deg", plant_deg)
        .push_column("open_loop_mag_dB", open_db)
        .push_column("open_loop_phase_deg", open_deg);

    let mut residual = ScanTable::new(meta(cfg, "servo-residual"));
    let decim = 100;
    let t: Vec<f64> = (0..run.closed_error_nm.len())
        .step_by(decim)
        .map(|k| k as f64 / run.sample_rate)
        .collect();
    let closed_lw: Vec<f64> = run
        .closed_error_nm
        .iter()
        .step_by(decim)
        .map(|v| v / run.linewidth_nm)
        .collect();
    let open_lw: Vec<f64> =
        run.open_error_nm.iter().step_by(decim).map(|v| v / run.linewidth_nm).collect();
    residual
        .push_column("t_s", t)
        .push_column("closed_error_linewidths", closed_lw)
        .push_column("open_error_linewidths", open_lw);

    Ok(ServoSimResult {
        margins,
        residual_std_linewidths: run.residual_std_linewidths,
        suppression_below_100hz_db: suppression_db,
        bode,
        residual,
    })
}

impl ServoSimResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let bode = self.bode.write_csv(dir, "servo_bode")?;
        let trace = self.residual.write_csv(dir, "servo_residual")?;
        let body = serde_json::json!({
            "phase_margin_deg": self.margins.phase_margin_deg,
            "gain_margin_db": self.margins.gain_margin_db,
            "unity_gain_hz": self.margins.unity_gain_hz,
            "residual_std_linewidths": self.residual_std_linewidths,
            "residual_target_linewidths": 1.0 / 13.0,
            "suppression_below_100hz_db": self.suppression_below_100hz_db,
        });
        let json = write_json_summary(dir, "servo_sim", &self.residual.meta, body)?;
        Ok(vec![bode, trace, json])
    }
}

// ---------------------------------------------------------------------------
// Field solving
// ---------------------------------------------------------------------------

pub struct SolveFieldsResult {
    pub tables: Vec<ScanTable>,
    pub multipoles: serde_json::Value,
}

/// Solve the unit-voltage basis potentials on the configured geometry and
/// reduce each to its multipole entry.
pub fn run_solve_fields(cfg: &ExperimentConfig, spacing: f64, tolerance: f64) -> Result<SolveFieldsResult> {
    use crate::fieldsolver::{build_axisymmetric_grid, extract_multipoles, solve_basis_potential, SolverElectrode};
    let geometry = cfg.trap()?;
    let grid = build_axisymmetric_grid(geometry, spacing)?;
    let fit_radius = (geometry.tip_gap / 2.0 * 0.9).min(80e-6);

    let mut tables = Vec::new();
    let mut entries = serde_json::Map::new();
    for electrode in SolverElectrode::ALL {
        let solved = solve_basis_potential(&grid, electrode, tolerance)?;
        let fit = extract_multipoles(&solved, 0.0, fit_radius, 4)?;
        let mut r_col = Vec::with_capacity(solved.values.len());
        let mut z_col = Vec::with_capacity(solved.values.len());
        let mut v_col = Vec::with_capacity(solved.values.len());
        for (r, z, v) in solved.rows() {
            r_col.push(r);
            z_col.push(z);
            v_col.push(v);
        }
        let mut table = ScanTable::new(meta(cfg, &format!("solve-fields-{}", electrode.label())));
        table.push_column("r_m", r_col).push_column("z_m", z_col).push_column("value_V", v_col);
        tables.push(table);
        entries.insert(
            electrode.label().to_string(),
            serde_json::json!({
                "a0_V": fit.entry.a0,
                "dipole_V_per_m": [fit.entry.b.x, fit.entry.b.y, fit.entry.b.z],
                "quadrupole_diag_V_per_m2": [fit.entry.q[(0,0)], fit.entry.q[(1,1)], fit.entry.q[(2,2)]],
                "higher_order": fit.higher_order,
                "rms_residual_V": fit.rms_residual,
                "node_count": fit.node_count,
            }),
        );
    }
    Ok(SolveFieldsResult { tables, multipoles: serde_json::Value::Object(entries) })
}

impl SolveFieldsResult {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for table in &self.tables {
            let stem = table.meta.experiment.replace('-', "_");
            out.push(table.write_csv(dir, &stem)?);
        }
        if let Some(first) = self.tables.first() {
            out.push(write_json_summary(dir, "solve_fields_multipoles", &first.meta, self.multipoles.clone())?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Whole suite
// ---------------------------------------------------------------------------

/// Run the standard experiment suite and write every artifact into
/// `out_dir`. Returns the written paths, sorted.
pub fn run_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let (model, report) = calibrate(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let model_path = out_dir.join("model.toml");
    std::fs::write(&model_path, model.to_toml()?)?;
    written.push(model_path);
    written.push(write_json_summary(
        out_dir,
        "calibration",
        &meta(cfg, "calibrate"),
        serde_json::to_value(&report).map_err(|e| Error::Serialization(e.to_string()))?,
    )?);

    written.extend(run_secular_slope_scan(cfg)?.write(out_dir)?);
    written.extend(run_minimum_scan(cfg)?.write(out_dir)?);
    written.extend(run_phase_scan(cfg, PhaseChannel::Radial)?.write(out_dir)?);
    written.extend(run_phase_scan(cfg, PhaseChannel::Axial)?.write(out_dir)?);
    written.extend(run_axial_standing_wave_scan(cfg)?.write(out_dir)?);
    written.extend(run_radial_mode_map(cfg)?.write(out_dir)?);
    written.extend(run_displacement_calibration(cfg)?.write(out_dir)?);
    written.extend(run_servo_sim(cfg)?.write(out_dir)?);

    written.sort();
    Ok(written)
}
