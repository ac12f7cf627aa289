//! Time-dependent ion motion under the full oscillating potential.
//!
//! Integrates m r'' = -q grad Phi(r, t) - m gamma r' with
//! Phi(r, t) = sum_i [V_i cos(Omega t + phi_i) + U_i] beta_i(r), extracts
//! drive-synchronous (micromotion) content by least-squares projection, and
//! carries the first-order phase-mismatch micromotion model the projections
//! are checked against.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::trapmodel::{DriveConfig, IonSpecies, RfSource, TrapModel};

/// Uniformly sampled position/velocity history.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }
}

/// Optional stochastic velocity kicks (photon recoil stand-in) for
/// thermal-spread studies; deterministic behind the seed.
#[derive(Debug, Clone, Copy)]
pub struct NoiseKicks {
    /// Velocity diffusion coefficient (m^2/s^3): per step the velocity gets
    /// an isotropic Gaussian kick of std sqrt(2 D dt) per axis.
    pub velocity_diffusion: f64,
    pub seed: u64,
}

/// Fixed-step integration of the damped, driven equation of motion.
///
/// Velocity Verlet with the electric force evaluated at both endpoints of
/// the step and the viscous drag folded in implicitly on the closing
/// half-kick. Errors if the ion leaves the model validity ball.
#[allow(clippy::too_many_arguments)]
pub fn integrate_trajectory(
    model: &TrapModel,
    drive: &DriveConfig,
    ion: &IonSpecies,
    damping: f64,
    r0: &Vector3<f64>,
    v0: &Vector3<f64>,
    duration: f64,
    dt: f64,
    noise: Option<NoiseKicks>,
) -> Result<Trajectory> {
    ion.validate()?;
    let period = TAU / drive.omega_rf;
    if !(dt > 0.0) || dt > period / 100.0 {
        return Err(Error::Integration(format!(
            "dt = {dt:.3e} s must be positive and at most T_rf/100 = {:.3e} s",
            period / 100.0
        )));
    }
    if duration < 50.0 * period {
        return Err(Error::Integration(format!(
            "duration {duration:.3e} s below 50 rf periods ({:.3e} s)",
            50.0 * period
        )));
    }
    if damping < 0.0 {
        return Err(Error::Integration("damping must be nonnegative".into()));
    }
    model.check_position(r0)?;

    let steps = (duration / dt).round() as usize;
    let q_over_m = ion.charge / ion.mass;
    let mut rng = noise.map(|n| (ChaCha8Rng::seed_from_u64(n.seed), (2.0 * n.velocity_diffusion * dt).sqrt()));

    let mut positions = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut r = *r0;
    let mut v = *v0;
    positions.push(r);
    velocities.push(v);

    let accel_field = |r: &Vector3<f64>, t: f64| -> Vector3<f64> {
        -q_over_m * model.gradient_at_time(drive, r, t)
    };

    let mut a = accel_field(&r, 0.0) - damping * v;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v_half = v + 0.5 * dt * a;
        r += dt * v_half;
        if r.norm() > model.validity_radius {
            return Err(Error::TrajectoryEscaped { escape_time_s: t + dt });
        }
        let a_field = accel_field(&r, t + dt);
        // Implicit closing half-kick for the linear drag term.
        v = (v_half + 0.5 * dt * a_field) / (1.0 + 0.5 * dt * damping);
        if let Some((rng, kick_std)) = rng.as_mut() {
            for i in 0..3 {
                v[i] += *kick_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        a = a_field - damping * v;
        positions.push(r);
        velocities.push(v);
    }

    Ok(Trajectory { t0: 0.0, dt, positions, velocities })
}

/// Drive-synchronous content of one coordinate: amplitude (m) and phase
/// (rad) in the convention x(t) = C + A cos(omega t + phase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasorComponent {
    pub amplitude: f64,
    pub phase: f64,
    pub offset: f64,
}

/// Least-squares projection of each coordinate onto {cos, sin, 1} at the
/// given frequency, over an integer number of periods after a discarded
/// 30% transient.
pub fn micromotion_phasor(traj: &Trajectory, omega: f64) -> Result<[PhasorComponent; 3]> {
    if omega <= 0.0 {
        return Err(Error::Integration("projection frequency must be positive".into()));
    }
    let n = traj.len();
    let start = (n as f64 * 0.3).ceil() as usize;
    let period = TAU / omega;
    let steps_per_period = period / traj.dt;
    let avail = n - start;
    let whole_periods = ((avail - 1) as f64 / steps_per_period).floor() as usize;
    if whole_periods < 20 {
        return Err(Error::TrajectoryTooShort(format!(
            "{whole_periods} whole periods after the transient; need at least 20"
        )));
    }
    let used = (whole_periods as f64 * steps_per_period).round() as usize + 1;
    let window = &traj.positions[start..start + used];

    let mut out = [PhasorComponent { amplitude: 0.0, phase: 0.0, offset: 0.0 }; 3];
    // Normal equations of the 3-parameter linear model per axis.
    let mut cc = 0.0;
    let mut ss = 0.0;
    let mut cs = 0.0;
    let mut c1 = 0.0;
    let mut s1 = 0.0;
    let count = window.len() as f64;
    let mut rhs = [[0.0_f64; 3]; 3];
    for (k, p) in window.iter().enumerate() {
        let t = traj.time(start + k);
        let (s, c) = (omega * t).sin_cos();
        cc += c * c;
        ss += s * s;
        cs += c * s;
        c1 += c;
        s1 += s;
        for axis in 0..3 {
            rhs[axis][0] += c * p[axis];
            rhs[axis][1] += s * p[axis];
            rhs[axis][2] += p[axis];
        }
    }
    let gram = nalgebra::Matrix3::new(cc, cs, c1, cs, ss, s1, c1, s1, count);
    let inv = gram.try_inverse().ok_or_else(|| Error::Fit("degenerate phasor projection".into()))?;
    for axis in 0..3 {
        let sol = inv * Vector3::new(rhs[axis][0], rhs[axis][1], rhs[axis][2]);
        let (a, b, offset) = (sol[0], sol[1], sol[2]);
        out[axis] = PhasorComponent {
            amplitude: a.hypot(b),
            phase: (-b).atan2(a),
            offset,
        };
    }
    Ok(out)
}

/// Symbols of the first-order phase-mismatch micromotion model
/// Delta z = -(1/4) q R alpha delta sin(omega t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchParams {
    /// Stability parameter along the displaced axis.
    pub q: f64,
    /// Ion-electrode distance (m).
    pub r_distance: f64,
    /// Dipole efficiency of the mismatched source (dimensionless).
    pub alpha: f64,
    /// Phase mismatch (rad).
    pub delta: f64,
    /// Drive frequency (rad/s).
    pub omega: f64,
}

impl MismatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q.abs() > 0.0 && self.q.abs() < 0.9) {
            return Err(Error::Drive(format!("|q| = {} outside (0, 0.9)", self.q.abs())));
        }
        if !(self.r_distance > 0.0 && self.omega > 0.0) {
            return Err(Error::Drive("R and omega must be positive".into()));
        }
        Ok(())
    }

    /// Micromotion amplitude (m) of the first-order model; the sign of the
    /// oscillation is carried separately as sign(delta).
    pub fn amplitude(&self) -> Result<f64> {
        self.validate()?;
        Ok(0.25 * self.q.abs() * self.r_distance * self.alpha.abs() * self.delta.abs())
    }

    pub fn polarity(&self) -> f64 {
        self.delta.signum()
    }

    /// Build the model symbols for a mismatched auxiliary source on a
    /// calibrated trap.
    ///
    /// Pass the drive with the auxiliary source at its matched phase. `q`
    /// is the stability parameter along the source's displacement axis; `R`
    /// the configured ion-electrode distance; `alpha` the source's dipole
    /// amplitude measured against the rf field gradient at scale R,
    /// alpha = 2 V_a |b_eff| / (|H_axis| R) with H the in-phase rf
    /// curvature. For an ideal quadrupole of characteristic distance R this
    /// reduces to the textbook geometric dipole efficiency.
    pub fn from_model(
        model: &TrapModel,
        drive: &DriveConfig,
        ion: &IonSpecies,
        source: RfSource,
        source_amplitude: f64,
        delta: f64,
    ) -> Result<MismatchParams> {
        let axis = source.displacement_axis();
        let (qs, _) = stability_parameters(model, drive, ion)?;
        let q_axis = qs[axis];

        // In-phase null of the drive as given.
        let null = model.find_rf_null(drive, &Vector3::zeros())?;

        // Effective dipole of the mismatched source at the null, per volt.
        let b_eff = match source {
            RfSource::Electrode(e) => {
                let entry = model.entry(e);
                (entry.b + entry.q * null).norm()
            }
            RfSource::InnerDiff => {
                let up = model.entry(crate::trapmodel::Electrode::InnerUpper);
                let lo = model.entry(crate::trapmodel::Electrode::InnerLower);
                0.5 * ((up.b + up.q * null) - (lo.b + lo.q * null)).norm()
            }
        };

        let electrode_for_distance = match source {
            RfSource::Electrode(e) => e,
            RfSource::InnerDiff => crate::trapmodel::Electrode::InnerUpper,
        };
        let r_distance = *model
            .electrode_distance
            .get(&electrode_for_distance)
            .ok_or_else(|| Error::Drive("no configured ion-electrode distance".into()))?;

        // Total rf curvature along the axis (the same quantity q is built
        // from).
        let amps = drive.in_phase_amplitudes()?;
        let mut h = 0.0;
        for (e, v) in amps {
            h += v * model.entry(e).q[(axis, axis)];
        }
        if h == 0.0 {
            return Err(Error::Drive("mismatch model needs rf curvature along the displaced axis".into()));
        }
        let alpha = 2.0 * source_amplitude.abs() * b_eff / (h.abs() * r_distance);

        Ok(MismatchParams { q: q_axis, r_distance, alpha, delta, omega: drive.omega_rf })
    }
}

/// Per-axis Mathieu parameters (a_k, q_k) from the model Hessians at the
/// null: a_k = 4 q_e (d2 Phi_dc / dk2) / (m Omega^2),
/// q_k = 2 q_e (d2 Phi_rf / dk2) / (m Omega^2).
pub fn stability_parameters(
    model: &TrapModel,
    drive: &DriveConfig,
    ion: &IonSpecies,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let amps = drive.in_phase_amplitudes()?;
    let denom = ion.mass * drive.omega_rf * drive.omega_rf;
    let mut q = Vector3::zeros();
    let mut a = Vector3::zeros();
    for (e, v) in amps {
        let entry = model.entry(e);
        for k in 0..3 {
            q[k] += 2.0 * ion.charge * v * entry.q[(k, k)] / denom;
        }
    }
    for (e, s) in &drive.sources {
        if s.dc != 0.0 {
            let entry = model.entry(*e);
            for k in 0..3 {
                a[k] += 4.0 * ion.charge * s.dc * entry.q[(k, k)] / denom;
            }
        }
    }
    Ok((q, a))
}

/// One rf cycle of the settled trajectory: positions and velocities folded
/// by drive phase over the trailing periods.
#[derive(Debug, Clone)]
pub struct SteadyStateCycle {
    /// Phase grid in [0, 2pi), uniform.
    pub n_bins: usize,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub omega: f64,
}

impl SteadyStateCycle {
    /// Linear interpolation of the cycle at drive phase `omega t`.
    pub fn at_time(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let phase = (self.omega * t).rem_euclid(TAU) / TAU * self.n_bins as f64;
        let i0 = phase.floor() as usize % self.n_bins;
        let i1 = (i0 + 1) % self.n_bins;
        let frac = phase - phase.floor();
        (
            self.positions[i0].lerp(&self.positions[i1], frac),
            self.velocities[i0].lerp(&self.velocities[i1], frac),
        )
    }
}

/// Fold the trailing `periods` rf periods of a trajectory into one averaged
/// cycle on `n_bins` phase bins.
pub fn steady_state_cycle(
    traj: &Trajectory,
    omega: f64,
    periods: usize,
    n_bins: usize,
) -> Result<SteadyStateCycle> {
    let period_steps = TAU / omega / traj.dt;
    let need = (periods as f64 * period_steps).ceil() as usize + 1;
    if traj.len() < need {
        return Err(Error::TrajectoryTooShort(format!(
            "need {need} samples for {periods} folded periods, have {}",
            traj.len()
        )));
    }
    let start = traj.len() - need;
    let mut pos = vec![Vector3::zeros(); n_bins];
    let mut vel = vec![Vector3::zeros(); n_bins];
    let mut weight = vec![0.0_f64; n_bins];
    for k in start..traj.len() {
        let t = traj.time(k);
        let bin = (((omega * t).rem_euclid(TAU)) / TAU * n_bins as f64).floor() as usize % n_bins;
        pos[bin] += traj.positions[k];
        vel[bin] += traj.velocities[k];
        weight[bin] += 1.0;
    }
    if weight.iter().any(|&w| w == 0.0) {
        return Err(Error::TrajectoryTooShort("empty phase bin while folding the cycle".into()));
    }
    for i in 0..n_bins {
        pos[i] /= weight[i];
        vel[i] /= weight[i];
    }
    Ok(SteadyStateCycle { n_bins, positions: pos, velocities: vel, omega })
}

/// Frequency (Hz) of the dominant spectral peak of one coordinate below
/// `f_max`, from a Hann-windowed, zero-padded periodogram with parabolic
/// peak refinement. The leading 30% transient is discarded.
pub fn secular_peak_frequency(traj: &Trajectory, axis: usize, f_max: f64) -> Result<f64> {
    let n = traj.len();
    let start = (n as f64 * 0.3).ceil() as usize;
    let m = n - start;
    if m < 1024 {
        return Err(Error::TrajectoryTooShort(format!("{m} samples after transient")));
    }
    let mean: f64 = traj.positions[start..].iter().map(|p| p[axis]).sum::<f64>() / m as f64;
    let mut padded = (m * 4).next_power_of_two();
    if padded < m {
        padded = m;
    }
    let mut buf: Vec<Complex64> = (0..padded)
        .map(|k| {
            if k < m {
                let w = 0.5 * (1.0 - (TAU * k as f64 / (m - 1) as f64).cos());
                Complex64::new((traj.positions[start + k][axis] - mean) * w, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);

    let df = 1.0 / (padded as f64 * traj.dt);
    let k_max = ((f_max / df) as usize).min(padded / 2 - 2).max(2);
    let mut best_k = 1;
    let mut best = 0.0;
    for (k, v) in buf.iter().enumerate().take(k_max).skip(1) {
        let p = v.norm_sqr();
        if p > best {
            best = p;
            best_k = k;
        }
    }
    // Parabolic refinement on log power.
    let p = |k: usize| buf[k].norm_sqr().max(1e-300).ln();
    let (pm, p0, pp) = (p(best_k - 1), p(best_k), p(best_k + 1));
    let denom = pm - 2.0 * p0 + pp;
    let shift = if denom.abs() > 1e-12 { 0.5 * (pm - pp) / denom } else { 0.0 };
    Ok((best_k as f64 + shift) * df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldsolver::TrapGeometry;
    use crate::trapmodel::{calibrate_model, CalibrationTargets, Electrode};
    use approx::assert_relative_eq;

    fn setup() -> (TrapModel, DriveConfig, IonSpecies) {
        let (model, _) = calibrate_model(&CalibrationTargets::default(), &TrapGeometry::default()).unwrap();
        let drive = DriveConfig::main_drive(TAU * 20e6, 200.0).unwrap();
        let ion = IonSpecies::default();
        (model, drive, ion)
    }

    fn rf_period() -> f64 {
        1.0 / 20e6
    }

    #[test]
    fn zero_drive_leaves_ion_at_rest() {
        let (model, _, ion) = setup();
        let drive = DriveConfig::new(TAU * 20e6).unwrap();
        let r0 = Vector3::new(1e-6, 2e-6, -3e-6);
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            0.0,
            &r0,
            &Vector3::zeros(),
            60.0 * rf_period(),
            rf_period() / 200.0,
            None,
        )
        .unwrap();
        for p in &traj.positions {
            assert_eq!(*p, r0);
        }
    }

    #[test]
    fn ion_at_null_stays_within_nanometre() {
        let (model, drive, ion) = setup();
        let damping = TAU * 5e3;
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            damping,
            &Vector3::zeros(),
            &Vector3::zeros(),
            200.0 * rf_period(),
            rf_period() / 200.0,
            None,
        )
        .unwrap();
        let tail = &traj.positions[traj.len() / 2..];
        let worst = tail.iter().map(|p| p.norm()).fold(0.0_f64, f64::max);
        assert!(worst < 1e-9, "residual motion {worst:.3e} m");
    }

    #[test]
    fn secular_peak_matches_hessian_prediction() {
        let (model, drive, ion) = setup();
        let modes = model.secular_frequencies(&drive).unwrap();
        let f_pred = modes.frequencies_hz[2];
        let dt = rf_period() / 200.0;
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            0.0,
            &Vector3::new(0.0, 0.0, 2e-6),
            &Vector3::zeros(),
            2048.0 * rf_period(),
            dt,
            None,
        )
        .unwrap();
        let f_meas = secular_peak_frequency(&traj, 2, 8e6).unwrap();
        assert_relative_eq!(f_meas, f_pred, max_relative = 0.05);
    }

    #[test]
    fn phasor_recovers_synthetic_sinusoid() {
        let omega = TAU * 20e6;
        let dt = rf_period() / 200.0;
        let n = 20000;
        let a = 10e-9;
        let positions: Vec<Vector3<f64>> = (0..n)
            .map(|k| Vector3::new(0.0, 0.0, a * (omega * (k as f64) * dt).sin()))
            .collect();
        let velocities = vec![Vector3::zeros(); n];
        let traj = Trajectory { t0: 0.0, dt, positions, velocities };
        let phasor = micromotion_phasor(&traj, omega).unwrap();
        assert_relative_eq!(phasor[2].amplitude, a, max_relative = 1e-9);
        assert_relative_eq!(phasor[2].phase, -std::f64::consts::FRAC_PI_2, max_relative = 1e-6);
        assert!(phasor[0].amplitude < 1e-20);
    }

    #[test]
    fn phasor_of_constant_trajectory_is_zero() {
        let dt = rf_period() / 200.0;
        let positions = vec![Vector3::new(1e-6, 0.0, 0.0); 20000];
        let velocities = vec![Vector3::zeros(); 20000];
        let traj = Trajectory { t0: 0.0, dt, positions, velocities };
        let phasor = micromotion_phasor(&traj, TAU * 20e6).unwrap();
        assert!(phasor[0].amplitude < 1e-18);
        assert_relative_eq!(phasor[0].offset, 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn phasor_rejects_short_trajectory() {
        let dt = rf_period() / 200.0;
        let positions = vec![Vector3::zeros(); 100];
        let velocities = vec![Vector3::zeros(); 100];
        let traj = Trajectory { t0: 0.0, dt, positions, velocities };
        assert!(micromotion_phasor(&traj, TAU * 20e6).is_err());
    }

    fn mismatch_amplitude(delta: f64) -> (f64, f64) {
        let (model, mut drive, ion) = setup();
        let v_aux = 1.0;
        drive.set_source(RfSource::InnerDiff, v_aux, delta);
        let dt = rf_period() / 200.0;
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            TAU * 5e3,
            &Vector3::zeros(),
            &Vector3::zeros(),
            1500.0 * rf_period(),
            dt,
            None,
        )
        .unwrap();
        let phasor = micromotion_phasor(&traj, drive.omega_rf).unwrap();
        (phasor[2].amplitude, phasor[2].phase)
    }

    #[test]
    fn mismatch_micromotion_linear_in_delta() {
        let (a1, _) = mismatch_amplitude(0.02);
        let (a2, _) = mismatch_amplitude(0.04);
        let ratio = a2 / a1;
        assert!((ratio - 2.0).abs() <= 0.02, "amplitude ratio {ratio}");
    }

    #[test]
    fn mismatch_micromotion_odd_in_delta() {
        let (a_plus, p_plus) = mismatch_amplitude(0.03);
        let (a_minus, p_minus) = mismatch_amplitude(-0.03);
        assert_relative_eq!(a_plus, a_minus, max_relative = 1e-3);
        let dphi = (p_plus - p_minus).rem_euclid(TAU);
        assert!(
            (dphi - std::f64::consts::PI).abs() < 0.05,
            "polarity flip should shift the phase by pi, got {dphi}"
        );
    }

    #[test]
    fn prediction_plugin_arithmetic() {
        let p = MismatchParams {
            q: 0.2,
            r_distance: 175e-6,
            alpha: 0.5,
            delta: 0.02,
            omega: TAU * 20e6,
        };
        assert_relative_eq!(p.amplitude().unwrap(), 87.5e-9, max_relative = 1e-12);
        let zero = MismatchParams { delta: 0.0, ..p };
        assert_eq!(zero.amplitude().unwrap(), 0.0);
    }

    #[test]
    fn prediction_matches_integration_within_ten_percent() {
        let (model, mut drive, ion) = setup();
        let delta = 0.02;
        let v_aux = 1.0;
        drive.set_source(RfSource::InnerDiff, v_aux, delta);
        let params =
            MismatchParams::from_model(&model, &DriveConfig::main_drive(TAU * 20e6, 200.0).unwrap(), &ion, RfSource::InnerDiff, v_aux, delta)
                .unwrap();
        let predicted = params.amplitude().unwrap();
        let (measured, _) = mismatch_amplitude(delta);
        assert_relative_eq!(measured, predicted, max_relative = 0.10);
    }

    #[test]
    fn stability_parameters_match_small_q_relation() {
        let (model, drive, ion) = setup();
        let (q, a) = stability_parameters(&model, &drive, &ion).unwrap();
        assert_eq!(a, Vector3::zeros());
        // Pure quadrupole: q_x = q_y = -q_z/2.
        assert_relative_eq!(q[0], -q[2] / 2.0, max_relative = 1e-12);
        assert_relative_eq!(q[1], q[0], max_relative = 1e-12);
        // q_z ~ 2 sqrt(2) omega_z / Omega from the calibrated axial slope.
        let modes = model.secular_frequencies(&drive).unwrap();
        let q_from_slope = 2.0 * std::f64::consts::SQRT_2 * modes.frequencies_hz[2] / 20e6;
        assert_relative_eq!(q[2].abs(), q_from_slope, max_relative = 1e-9);
    }

    #[test]
    fn micromotion_bounded_by_driven_secular_component() {
        // At the null of an in-phase drive the only rf-synchronous motion is
        // the driven micromotion of the residual secular oscillation.
        let (model, drive, ion) = setup();
        let dt = rf_period() / 200.0;
        let z0 = 1e-6;
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            0.0,
            &Vector3::new(0.0, 0.0, z0),
            &Vector3::zeros(),
            1200.0 * rf_period(),
            dt,
            None,
        )
        .unwrap();
        let phasor = micromotion_phasor(&traj, drive.omega_rf).unwrap();
        let (q, _) = stability_parameters(&model, &drive, &ion).unwrap();
        let bound = q[2].abs() / 2.0 * z0 + 1e-9;
        assert!(
            phasor[2].amplitude <= bound,
            "micromotion {:.3e} m exceeds driven bound {:.3e} m",
            phasor[2].amplitude,
            bound
        );
    }

    #[test]
    fn halving_dt_changes_micromotion_below_one_percent() {
        let (model, mut drive, ion) = setup();
        drive.set_source(RfSource::InnerDiff, 1.0, 0.02);
        let mut amps = Vec::new();
        for divisor in [200.0, 100.0] {
            let dt = rf_period() / divisor;
            let traj = integrate_trajectory(
                &model,
                &drive,
                &ion,
                TAU * 5e3,
                &Vector3::zeros(),
                &Vector3::zeros(),
                1500.0 * rf_period(),
                dt,
                None,
            )
            .unwrap();
            amps.push(micromotion_phasor(&traj, drive.omega_rf).unwrap()[2].amplitude);
        }
        let rel = (amps[0] - amps[1]).abs() / amps[0];
        assert!(rel < 0.01, "step-size sensitivity {rel}");
    }

    #[test]
    fn damped_secular_envelope_decays_at_half_damping_rate() {
        // Viscous drag -m gamma v makes the secular amplitude decay at
        // gamma/2 (energy at gamma).
        let (model, drive, ion) = setup();
        let damping = TAU * 10e3;
        let dt = rf_period() / 200.0;
        let traj = integrate_trajectory(
            &model,
            &drive,
            &ion,
            damping,
            &Vector3::new(0.0, 0.0, 3e-6),
            &Vector3::zeros(),
            3000.0 * rf_period(),
            dt,
            None,
        )
        .unwrap();
        // Envelope from block maxima of |z|.
        let block = 4000; // 20 rf periods
        let mut ts = Vec::new();
        let mut logs = Vec::new();
        for (bi, chunk) in traj.positions.chunks(block).enumerate() {
            let m = chunk.iter().map(|p| p[2].abs()).fold(0.0_f64, f64::max);
            if m > 1e-12 {
                ts.push((bi * block) as f64 * dt);
                logs.push(m.ln());
            }
        }
        let fit = crate::fitkit::fit_polynomial(&ts, &logs, 1, false).unwrap();
        let rate = -fit.value("c1");
        assert_relative_eq!(rate, damping / 2.0, max_relative = 0.05);
    }

    #[test]
    fn escape_is_reported_with_time() {
        let (model, _, ion) = setup();
        // An anti-trapping dc saddle on the compensation rods expels the ion.
        let mut drive = DriveConfig::new(TAU * 20e6).unwrap();
        drive.set_dc(Electrode::CompY, 2000.0);
        let err = integrate_trajectory(
            &model,
            &drive,
            &ion,
            0.0,
            &Vector3::new(0.0, 5e-6, 0.0),
            &Vector3::zeros(),
            5000.0 * rf_period(),
            rf_period() / 100.0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrajectoryEscaped { escape_time_s } if escape_time_s > 0.0), "{err}");
    }

    #[test]
    fn noise_kicks_are_seed_deterministic() {
        let (model, drive, ion) = setup();
        let noise = Some(NoiseKicks { velocity_diffusion: 1e-3, seed: 9 });
        let run = || {
            integrate_trajectory(
                &model,
                &drive,
                &ion,
                TAU * 5e3,
                &Vector3::zeros(),
                &Vector3::zeros(),
                60.0 * rf_period(),
                rf_period() / 100.0,
                noise,
            )
            .unwrap()
        };
        let t1 = run();
        let t2 = run();
        assert_eq!(t1.positions, t2.positions);
    }
}
