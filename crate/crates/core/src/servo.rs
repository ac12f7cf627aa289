//! Cavity length lock: plant with the two problematic mechanical
//! resonances, a PI controller with the custom low-pass + band-pass +
//! high-pass compensation filter, and closed-loop residual statistics.
//!
//! The published description is qualitative (derivative-like gain features
//! and sharp phase drops at 900 Hz and 9 kHz, a custom LP/BP/HP filter, a
//! residual of one thirteenth of the linewidth); resonance quality factors
//! and noise levels here are invented to reproduce that behaviour and are
//! config-visible.

use std::f64::consts::TAU;

use nalgebra::Complex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One mechanical resonance of the piezo/mount chain: a pole pair at
/// `frequency_hz` with an adjacent zero pair (`zero_ratio` above it when
/// `coupling_sign` is positive, below when negative), which produces the
/// derivative-like gain feature and the sharp phase drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub frequency_hz: f64,
    pub quality: f64,
    pub coupling_sign: f64,
}

/// Piezo-to-length plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    /// Sorted by frequency.
    pub resonances: Vec<Resonance>,
    /// Dc actuation (nm/V); the multilayer piezo path.
    pub dc_gain_nm_per_v: f64,
    /// Multilayer piezo stroke (nm/V), the path in use.
    pub stroke_multilayer_nm_per_v: f64,
    /// Monolayer piezo stroke (nm/V); kept for completeness, unused by the
    /// default loop.
    pub stroke_monolayer_nm_per_v: f64,
    /// Zero-to-pole spacing of each resonance pair.
    pub zero_ratio: f64,
    /// Amplifier/piezo bandwidth roll-off, if any.
    pub output_lowpass_hz: Option<f64>,
    pub output_lowpass_q: f64,
}

impl Default for PlantModel {
    fn default() -> Self {
        PlantModel {
            resonances: vec![
                Resonance { frequency_hz: 900.0, quality: 3.5, coupling_sign: 1.0 },
                Resonance { frequency_hz: 9_000.0, quality: 3.5, coupling_sign: 1.0 },
            ],
            dc_gain_nm_per_v: 1.5,
            stroke_multilayer_nm_per_v: 1.5,
            stroke_monolayer_nm_per_v: 0.45,
            zero_ratio: 2.0,
            output_lowpass_hz: Some(45_000.0),
            output_lowpass_q: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

/// Continuous second-order section b(s)/a(s) with
/// H(s) = (b2 s^2 + b1 s + b0) / (a2 s^2 + a1 s + a0).
#[derive(Debug, Clone, Copy)]
struct SectionS {
    b: [f64; 3], // [b2, b1, b0]
    a: [f64; 3], // [a2, a1, a0]
}

impl SectionS {
    fn response(&self, f: f64) -> Complex<f64> {
        let s = Complex::new(0.0, TAU * f);
        let num = self.b[0] * s * s + self.b[1] * s + self.b[2];
        let den = self.a[0] * s * s + self.a[1] * s + self.a[2];
        num / den
    }
}

impl PlantModel {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for r in &self.resonances {
            if !(r.frequency_hz > 0.0) {
                return Err(Error::LoopUnstable("resonance frequencies must be positive".into()));
            }
            if r.frequency_hz < prev {
                return Err(Error::LoopUnstable("resonances must be sorted by frequency".into()));
            }
            if !(r.quality > 0.0) {
                return Err(Error::LoopUnstable("resonance quality must be positive".into()));
            }
            prev = r.frequency_hz;
        }
        Ok(())
    }

    fn sections(&self) -> Vec<SectionS> {
        let mut out = Vec::new();
        for r in &self.resonances {
            let wp = TAU * r.frequency_hz;
            let ratio = if r.coupling_sign >= 0.0 { self.zero_ratio } else { 1.0 / self.zero_ratio };
            let wz = wp * ratio;
            out.push(SectionS {
                b: [1.0 / (wz * wz), 1.0 / (r.quality * wz), 1.0],
                a: [1.0 / (wp * wp), 1.0 / (r.quality * wp), 1.0],
            });
        }
        if let Some(flp) = self.output_lowpass_hz {
            let w0 = TAU * flp;
            out.push(SectionS {
                b: [0.0, 0.0, 1.0],
                a: [1.0 / (w0 * w0), 1.0 / (self.output_lowpass_q * w0), 1.0],
            });
        }
        out
    }

    /// Analytic (continuous-time) frequency response, volts to nanometres.
    pub fn frequency_response(&self, f: f64) -> Complex<f64> {
        assert!(f > 0.0, "frequency must be positive");
        self.sections()
            .iter()
            .fold(Complex::new(self.dc_gain_nm_per_v, 0.0), |acc, s| acc * s.response(f))
    }
}

/// Discrete biquad, direct form I coefficients normalised to a0 = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
    /// Output scale applied after the recursion (branch gain).
    pub gain: f64,
}

impl Biquad {
    /// Bilinear transform of a continuous section at `sample_rate`.
    fn from_section(sec: &SectionS, sample_rate: f64, gain: f64) -> Biquad {
        let k = 2.0 * sample_rate;
        let (b2, b1, b0) = (sec.b[0], sec.b[1], sec.b[2]);
        let (a2, a1, a0) = (sec.a[0], sec.a[1], sec.a[2]);
        let nb0 = b2 * k * k + b1 * k + b0;
        let nb1 = -2.0 * b2 * k * k + 2.0 * b0;
        let nb2 = b2 * k * k - b1 * k + b0;
        let na0 = a2 * k * k + a1 * k + a0;
        let na1 = -2.0 * a2 * k * k + 2.0 * a0;
        let na2 = a2 * k * k - a1 * k + a0;
        Biquad {
            b: [nb0 / na0, nb1 / na0, nb2 / na0],
            a: [na1 / na0, na2 / na0],
            gain,
        }
    }

    /// Poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        // z^2 + a1 z + a2: Jury conditions.
        let (a1, a2) = (self.a[0], self.a[1]);
        a2.abs() < 1.0 && (1.0 + a1 + a2) > 0.0 && (1.0 - a1 + a2) > 0.0
    }

    pub fn response(&self, f: f64, sample_rate: f64) -> Complex<f64> {
        let z_inv = Complex::from_polar(1.0, -TAU * f / sample_rate);
        let num = self.b[0] + self.b[1] * z_inv + self.b[2] * z_inv * z_inv;
        let den = Complex::new(1.0, 0.0) + self.a[0] * z_inv + self.a[1] * z_inv * z_inv;
        self.gain * num / den
    }
}

/// Running state of one biquad (direct form I).
#[derive(Debug, Clone, Copy, Default)]
struct BiquadState {
    x: [f64; 2],
    y: [f64; 2],
}

impl BiquadState {
    fn tick(&mut self, c: &Biquad, x0: f64) -> f64 {
        let y0 = c.b[0] * x0 + c.b[1] * self.x[0] + c.b[2] * self.x[1]
            - c.a[0] * self.y[0]
            - c.a[1] * self.y[1];
        self.x[1] = self.x[0];
        self.x[0] = x0;
        self.y[1] = self.y[0];
        self.y[0] = y0;
        c.gain * y0
    }
}

/// Specification of the custom compensation filter: a low-pass branch, any
/// number of band-pass branches (negative gains carve band-stops) and a
/// high-pass branch, summed in parallel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopFilterSpec {
    pub lowpass_corner_hz: f64,
    pub lowpass_gain: f64,
    pub highpass_corner_hz: f64,
    pub highpass_gain: f64,
    pub bandpass: Vec<BandpassSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub center_hz: f64,
    pub quality: f64,
    pub gain: f64,
}

impl LoopFilterSpec {
    /// Trivial spec: one wide-open low-pass branch, nothing else. Unity
    /// response over the band far below its corner.
    pub fn unity(sample_rate: f64) -> Self {
        LoopFilterSpec {
            lowpass_corner_hz: sample_rate / 4.0,
            lowpass_gain: 1.0,
            highpass_corner_hz: sample_rate / 4.0,
            highpass_gain: 0.0,
            bandpass: Vec::new(),
        }
    }
}

impl Default for LoopFilterSpec {
    fn default() -> Self {
        LoopFilterSpec {
            lowpass_corner_hz: 10_000.0,
            lowpass_gain: 1.0,
            highpass_corner_hz: 30_000.0,
            highpass_gain: 0.02,
            bandpass: vec![
                BandpassSpec { center_hz: 900.0, quality: 2.0, gain: -0.99 },
                BandpassSpec { center_hz: 9_000.0, quality: 2.0, gain: -0.55 },
            ],
        }
    }
}

/// PI controller gains: output = kp * e + ki * integral(e dt).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
}

/// Composed digital loop filter: parallel biquad branches summed, then the
/// PI stage, with an overall loop gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopFilter {
    pub sections: Vec<Biquad>,
    pub sample_rate: f64,
    pub pi_gains: PiGains,
    pub loop_gain: f64,
}

/// Build the bilinear-transform branches of the compensation filter.
///
/// Errors if any corner sits above a quarter of the Nyquist frequency or a
/// transformed section is unstable.
pub fn compose_loop_filter(spec: &LoopFilterSpec, sample_rate: f64, pi_gains: PiGains) -> Result<LoopFilter> {
    let nyquist = sample_rate / 2.0;
    let corners = [spec.lowpass_corner_hz, spec.highpass_corner_hz]
        .into_iter()
        .chain(spec.bandpass.iter().map(|b| b.center_hz));
    for c in corners {
        if !(c > 0.0) || c > nyquist / 4.0 * 2.0 {
            return Err(Error::FilterUnstable(format!(
                "corner {c} Hz outside (0, Nyquist/2 = {:.0} Hz)",
                nyquist / 2.0
            )));
        }
    }

    let mut sections = Vec::new();
    if spec.lowpass_gain != 0.0 {
        let wc = TAU * spec.lowpass_corner_hz;
        sections.push(Biquad::from_section(
            &SectionS { b: [0.0, 0.0, 1.0], a: [0.0, 1.0 / wc, 1.0] },
            sample_rate,
            spec.lowpass_gain,
        ));
    }
    for bp in &spec.bandpass {
        if bp.gain == 0.0 {
            continue;
        }
        let w0 = TAU * bp.center_hz;
        sections.push(Biquad::from_section(
            &SectionS {
                b: [0.0, 1.0 / (bp.quality * w0), 0.0],
                a: [1.0 / (w0 * w0), 1.0 / (bp.quality * w0), 1.0],
            },
            sample_rate,
            bp.gain,
        ));
    }
    if spec.highpass_gain != 0.0 {
        let wc = TAU * spec.highpass_corner_hz;
        sections.push(Biquad::from_section(
            &SectionS { b: [0.0, 1.0 / wc, 0.0], a: [0.0, 1.0 / wc, 1.0] },
            sample_rate,
            spec.highpass_gain,
        ));
    }
    for (i, s) in sections.iter().enumerate() {
        if !s.is_stable() {
            return Err(Error::FilterUnstable(format!("branch {i} has poles outside the unit circle")));
        }
    }
    Ok(LoopFilter { sections, sample_rate, pi_gains, loop_gain: 1.0 })
}

impl LoopFilter {
    /// Response of the parallel filter branches alone (no PI, no loop gain).
    pub fn filter_response(&self, f: f64) -> Complex<f64> {
        if self.sections.is_empty() {
            return Complex::new(1.0, 0.0);
        }
        self.sections.iter().map(|s| s.response(f, self.sample_rate)).sum()
    }

    /// Trapezoidal-rule PI response.
    pub fn pi_response(&self, f: f64) -> Complex<f64> {
        let theta = TAU * f / self.sample_rate;
        let z = Complex::from_polar(1.0, theta);
        let one = Complex::new(1.0, 0.0);
        let integ = (self.sample_rate.recip() / 2.0) * (z + one) / (z - one);
        Complex::new(self.pi_gains.kp, 0.0) + self.pi_gains.ki * integ
    }

    /// Full controller response: loop_gain * PI * parallel branches.
    pub fn controller_response(&self, f: f64) -> Complex<f64> {
        self.loop_gain * self.pi_response(f) * self.filter_response(f)
    }
}

/// Plant discretized for the time-domain loop.
#[derive(Debug, Clone)]
pub struct DiscretePlant {
    sections: Vec<Biquad>,
    pub sample_rate: f64,
    dc_gain: f64,
}

impl DiscretePlant {
    pub fn new(plant: &PlantModel, sample_rate: f64) -> Result<DiscretePlant> {
        plant.validate()?;
        let sections: Vec<Biquad> = plant
            .sections()
            .iter()
            .map(|s| Biquad::from_section(s, sample_rate, 1.0))
            .collect();
        for (i, s) in sections.iter().enumerate() {
            if !s.is_stable() {
                return Err(Error::LoopUnstable(format!("plant section {i} unstable after discretization")));
            }
        }
        Ok(DiscretePlant { sections, sample_rate, dc_gain: plant.dc_gain_nm_per_v })
    }

    pub fn response(&self, f: f64) -> Complex<f64> {
        self.sections
            .iter()
            .fold(Complex::new(self.dc_gain, 0.0), |acc, s| acc * s.response(f, self.sample_rate))
    }
}

/// Open-loop (controller times plant) response on the discrete chain used
/// by the time-domain simulation.
pub fn open_loop_response(plant: &DiscretePlant, filter: &LoopFilter, f: f64) -> Complex<f64> {
    filter.controller_response(f) * plant.response(f)
}

/// Stability margins of the composed open loop.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LoopMargins {
    pub gain_margin_db: f64,
    pub phase_margin_deg: f64,
    pub unity_gain_hz: f64,
}

/// Margins from the composed response on a log-frequency grid with
/// bisection refinement at the crossings. With several unity-gain crossings
/// the smallest phase margin is reported.
pub fn loop_margins(plant: &DiscretePlant, filter: &LoopFilter) -> Result<LoopMargins> {
    let f_lo = 0.1;
    let f_hi = filter.sample_rate * 0.45;
    let n = 4000;
    let grid: Vec<f64> = (0..=n)
        .map(|i| f_lo * (f_hi / f_lo).powf(i as f64 / n as f64))
        .collect();
    let mags: Vec<f64> = grid.iter().map(|&f| open_loop_response(plant, filter, f).norm()).collect();

    // Unwrapped phase along the grid.
    let mut phases = Vec::with_capacity(grid.len());
    let mut prev = open_loop_response(plant, filter, grid[0]).arg();
    phases.push(prev);
    for &f in &grid[1..] {
        let mut p = open_loop_response(plant, filter, f).arg();
        while p - prev > std::f64::consts::PI {
            p -= TAU;
        }
        while p - prev < -std::f64::consts::PI {
            p += TAU;
        }
        phases.push(p);
        prev = p;
    }

    let refine_unity = |mut a: f64, mut b: f64| -> f64 {
        for _ in 0..60 {
            let m = (a * b).sqrt();
            if open_loop_response(plant, filter, m).norm() > 1.0 {
                a = m;
            } else {
                b = m;
            }
        }
        (a * b).sqrt()
    };

    let mut worst_pm = f64::INFINITY;
    let mut unity_f = None;
    for i in 1..grid.len() {
        if (mags[i - 1] > 1.0) != (mags[i] > 1.0) {
            let (a, b) = if mags[i - 1] > 1.0 { (grid[i - 1], grid[i]) } else { (grid[i], grid[i - 1]) };
            let fc = refine_unity(a.min(b), a.max(b));
            let phase = open_loop_response(plant, filter, fc).arg();
            // Continuity with the unwrapped grid phase.
            let near = phases[i] + (phase - phases[i] + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
            let pm = 180.0 + near.to_degrees();
            if pm < worst_pm {
                worst_pm = pm;
                unity_f = Some(fc);
            }
        }
    }
    let unity_gain_hz = unity_f.ok_or(Error::NoCrossing)?;

    // Gain margin at -180 degree crossings (modulo 360).
    let mut gm_db = f64::INFINITY;
    for i in 1..grid.len() {
        let shift = |p: f64| (p + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
        let d0 = shift(phases[i - 1]) + std::f64::consts::PI;
        let d1 = shift(phases[i]) + std::f64::consts::PI;
        if d0.abs() < 1e-12 || d0.signum() != d1.signum() {
            let mag = mags[i].max(mags[i - 1]);
            if mag > 0.0 {
                gm_db = gm_db.min(-20.0 * mag.log10());
            }
        }
    }

    Ok(LoopMargins { gain_margin_db: gm_db, phase_margin_deg: worst_pm, unity_gain_hz })
}

/// Disturbance and sensor noise levels. These are calibrated inputs: the
/// vibration amplitude is set so the closed loop meets the published
/// one-thirteenth-of-a-linewidth residual and is disclosed in the config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Rms of the shaped vibration disturbance (nm).
    pub vibration_rms_nm: f64,
    /// Corner of the second-order shaping low-pass (Hz).
    pub vibration_corner_hz: f64,
    /// White sensor noise rms (nm equivalent).
    pub sensor_noise_nm: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { vibration_rms_nm: 0.02, vibration_corner_hz: 10.0, sensor_noise_nm: 3e-4 }
    }
}

/// Result of a lock run: open- and closed-loop length-error traces under
/// the same disturbance realization.
#[derive(Debug, Clone)]
pub struct LockRun {
    pub sample_rate: f64,
    /// Length error traces (nm).
    pub open_error_nm: Vec<f64>,
    pub closed_error_nm: Vec<f64>,
    /// Cavity length excursion equivalent to one linewidth (nm).
    pub linewidth_nm: f64,
    /// Closed-loop residual standard deviation in linewidth units, after
    /// the leading 20% transient.
    pub residual_std_linewidths: f64,
}

/// Length excursion per linewidth for a lock laser: dL = L * dnu * lambda / c.
pub fn linewidth_to_nm(cavity_length_m: f64, linewidth_hz: f64, lock_wavelength_m: f64) -> f64 {
    cavity_length_m * linewidth_hz * lock_wavelength_m / crate::constants::SPEED_OF_LIGHT * 1e9
}

/// Simulate the discrete-time lock.
///
/// The error signal is a linear length discriminant saturated at half a
/// linewidth (the linear capture range of the dispersive error signal);
/// the controller output drives the discretized plant. Open- and
/// closed-loop traces share the same seeded disturbance.
pub fn simulate_lock(
    plant: &PlantModel,
    filter: &LoopFilter,
    noise: &NoiseSpec,
    linewidth_nm: f64,
    duration: f64,
    seed: u64,
) -> Result<LockRun> {
    let sample_rate = filter.sample_rate;
    let discrete = DiscretePlant::new(plant, sample_rate)?;
    let margins = loop_margins(&discrete, filter)?;
    if margins.phase_margin_deg <= 0.0 {
        return Err(Error::LoopUnstable(format!(
            "phase margin {:.1} deg",
            margins.phase_margin_deg
        )));
    }
    let steps = (duration * sample_rate).round() as usize;
    if steps < 1000 {
        return Err(Error::LoopUnstable("duration too short for statistics".into()));
    }

    // Shaped vibration: white noise through a second-order low-pass,
    // normalised to the requested rms; same realization for both loops.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = TAU * noise.vibration_corner_hz;
    let shaper = Biquad::from_section(
        &SectionS { b: [0.0, 0.0, 1.0], a: [1.0 / (w0 * w0), 1.0 / (0.707 * w0), 1.0] },
        sample_rate,
        1.0,
    );
    let mut shaper_state = BiquadState::default();
    let mut disturbance: Vec<f64> = (0..steps)
        .map(|_| shaper_state.tick(&shaper, rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let settle = steps / 5;
    let rms = (disturbance[settle..].iter().map(|v| v * v).sum::<f64>() / (steps - settle) as f64).sqrt();
    if rms > 0.0 {
        let scale = noise.vibration_rms_nm / rms;
        for d in &mut disturbance {
            *d *= scale;
        }
    }
    let sensor: Vec<f64> = (0..steps)
        .map(|_| noise.sensor_noise_nm * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();

    let mut filter_states = vec![BiquadState::default(); filter.sections.len()];
    let mut plant_states = vec![BiquadState::default(); discrete.sections.len()];
    let mut integral = 0.0;
    let mut prev_err = 0.0;
    let mut plant_out = 0.0;
    let saturation = 0.5 * linewidth_nm;
    let dt = 1.0 / sample_rate;

    let mut open_trace = Vec::with_capacity(steps);
    let mut closed_trace = Vec::with_capacity(steps);
    for k in 0..steps {
        let length_error = plant_out + disturbance[k];
        closed_trace.push(length_error);
        open_trace.push(disturbance[k]);
        if length_error.abs() > 50.0 * linewidth_nm {
            return Err(Error::LoopUnstable(format!(
                "length error diverged to {length_error:.3e} nm at step {k}"
            )));
        }

        // PDH stand-in: linear within +- half a linewidth, saturated beyond.
        let measured = length_error.clamp(-saturation, saturation) + sensor[k];

        // Parallel compensation branches, then PI, negative feedback.
        let filtered = if filter.sections.is_empty() {
            measured
        } else {
            filter
                .sections
                .iter()
                .zip(&mut filter_states)
                .map(|(c, s)| s.tick(c, measured))
                .sum()
        };
        integral += 0.5 * dt * (filtered + prev_err);
        prev_err = filtered;
        let u = -filter.loop_gain * (filter.pi_gains.kp * filtered + filter.pi_gains.ki * integral);

        // Plant cascade.
        let mut x = discrete.dc_gain * u;
        for (c, s) in discrete.sections.iter().zip(&mut plant_states) {
            x = s.tick(c, x);
        }
        plant_out = x;
    }

    let tail = &closed_trace[settle..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let std_nm = (tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tail.len() as f64).sqrt();

    Ok(LockRun {
        sample_rate,
        open_error_nm: open_trace,
        closed_error_nm: closed_trace,
        linewidth_nm,
        residual_std_linewidths: std_nm / linewidth_nm,
    })
}

/// Total spectral power of `trace` in the band (f_lo, f_hi], via a
/// Hann-windowed periodogram.
pub fn band_power(trace: &[f64], sample_rate: f64, f_lo: f64, f_hi: f64) -> f64 {
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = trace
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let w = 0.5 * (1.0 - (TAU * k as f64 / (n - 1) as f64).cos());
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = sample_rate / n as f64;
    let k_lo = (f_lo / df).ceil().max(1.0) as usize;
    let k_hi = ((f_hi / df).floor() as usize).min(n / 2);
    buf[k_lo..=k_hi].iter().map(|c| c.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const FS: f64 = 1e6;

    fn default_loop() -> (PlantModel, LoopFilter) {
        let plant = PlantModel::default();
        let filter = compose_loop_filter(
            &LoopFilterSpec::default(),
            FS,
            PiGains { kp: 0.465, ki: 0.465 * TAU * 300.0 },
        )
        .unwrap();
        (plant, filter)
    }

    #[test]
    fn plant_flat_below_dynamics() {
        let plant = PlantModel::default();
        let h = plant.frequency_response(20.0);
        assert!((h.norm() - plant.dc_gain_nm_per_v).abs() / plant.dc_gain_nm_per_v < 0.01);
        assert!(h.arg().to_degrees().abs() < 2.0, "phase {} deg", h.arg().to_degrees());
    }

    #[test]
    fn phase_drops_sixty_degrees_across_each_resonance_octave() {
        let plant = PlantModel::default();
        for r in plant.resonances.clone() {
            let f = r.frequency_hz;
            let lo = plant.frequency_response(f / std::f64::consts::SQRT_2).arg().to_degrees();
            let hi = plant.frequency_response(f * std::f64::consts::SQRT_2).arg().to_degrees();
            assert!(lo - hi > 60.0, "phase drop {:.1} deg across the {f} Hz octave", lo - hi);
        }
    }

    #[test]
    fn plant_gain_has_derivative_like_feature() {
        // Peak above the dc gain just below the resonance, dip below it at
        // the zero.
        let plant = PlantModel::default();
        let dc = plant.dc_gain_nm_per_v;
        let peak = plant.frequency_response(900.0).norm();
        let dip = plant.frequency_response(1800.0).norm();
        assert!(peak > 1.5 * dc, "no resonant peak: {peak}");
        assert!(dip < dc, "no dip at the zero: {dip}");
    }

    #[test]
    fn plant_rolls_off_monotonically_at_high_frequency() {
        let plant = PlantModel::default();
        let top = 9_000.0;
        let mut prev = plant.frequency_response(10.0 * top).norm();
        for i in 1..=20 {
            let f = 10.0 * top * (1.0 + i as f64 * 0.5);
            let mag = plant.frequency_response(f).norm();
            assert!(mag < prev, "magnitude not rolling off at {f} Hz");
            prev = mag;
        }
    }

    #[test]
    fn unity_filter_spec_is_unity_in_band() {
        let filter = compose_loop_filter(
            &LoopFilterSpec::unity(FS),
            FS,
            PiGains { kp: 1.0, ki: 0.0 },
        )
        .unwrap();
        for f in [1.0, 10.0, 100.0, 600.0] {
            let h = filter.filter_response(f);
            assert!((h.norm() - 1.0).abs() < 1e-6, "|F({f})| = {}", h.norm());
        }
    }

    #[test]
    fn lowpass_corner_at_minus_three_db() {
        let spec = LoopFilterSpec {
            lowpass_corner_hz: 500.0,
            lowpass_gain: 1.0,
            highpass_gain: 0.0,
            bandpass: Vec::new(),
            ..LoopFilterSpec::default()
        };
        let filter = compose_loop_filter(&spec, FS, PiGains { kp: 1.0, ki: 0.0 }).unwrap();
        let mag = filter.filter_response(500.0).norm();
        assert_relative_eq!(mag, std::f64::consts::FRAC_1_SQRT_2, max_relative = 0.02);
    }

    #[test]
    fn pure_integrator_margin_is_ninety_degrees() {
        let plant = PlantModel {
            resonances: Vec::new(),
            dc_gain_nm_per_v: 1.0,
            output_lowpass_hz: None,
            ..PlantModel::default()
        };
        let filter = LoopFilter {
            sections: Vec::new(),
            sample_rate: FS,
            pi_gains: PiGains { kp: 0.0, ki: TAU * 1000.0 },
            loop_gain: 1.0,
        };
        let discrete = DiscretePlant::new(&plant, FS).unwrap();
        let margins = loop_margins(&discrete, &filter).unwrap();
        assert_relative_eq!(margins.phase_margin_deg, 90.0, epsilon = 0.5);
        assert_relative_eq!(margins.unity_gain_hz, 1000.0, max_relative = 0.01);
    }

    #[test]
    fn band_stop_compensation_raises_phase_margin() {
        let (plant, filter) = default_loop();
        let discrete = DiscretePlant::new(&plant, FS).unwrap();
        let with = loop_margins(&discrete, &filter).unwrap();

        let bare_spec = LoopFilterSpec { bandpass: Vec::new(), ..LoopFilterSpec::default() };
        let bare = compose_loop_filter(&bare_spec, FS, filter.pi_gains).unwrap();
        let without = loop_margins(&discrete, &bare).unwrap();
        assert!(
            with.phase_margin_deg > without.phase_margin_deg,
            "compensated {:.1} deg vs uncompensated {:.1} deg",
            with.phase_margin_deg,
            without.phase_margin_deg
        );
        assert!(with.phase_margin_deg >= 30.0);
    }

    #[test]
    fn doubling_gain_shifts_crossover_and_costs_six_db() {
        let (plant, filter) = default_loop();
        let discrete = DiscretePlant::new(&plant, FS).unwrap();
        let base = loop_margins(&discrete, &filter).unwrap();
        let mut loud = filter.clone();
        loud.loop_gain = 2.0;
        let doubled = loop_margins(&discrete, &loud).unwrap();
        assert!(doubled.unity_gain_hz > base.unity_gain_hz);
        assert_relative_eq!(base.gain_margin_db - doubled.gain_margin_db, 6.02, epsilon = 0.1);
    }

    #[test]
    fn time_domain_response_matches_analytic_chain() {
        // Inject sinusoids through the open chain (filter branches + PI +
        // plant) and compare with the analytic discrete response.
        let (plant, filter) = default_loop();
        let discrete = DiscretePlant::new(&plant, FS).unwrap();
        let probes = [20.0, 55.0, 130.0, 310.0, 700.0, 1500.0, 3300.0, 7200.0, 15000.0, 31000.0];
        for &f in &probes {
            let expected = open_loop_response(&discrete, &filter, f);
            // Steady-state projection of the simulated output.
            let periods_settle = 40.0_f64.max(f / 10.0);
            let settle = (periods_settle / f * FS) as usize;
            let measure = ((40.0 / f * FS) as usize).max(4000);
            let n = settle + measure;
            let mut fstates = vec![BiquadState::default(); filter.sections.len()];
            let mut pstates = vec![BiquadState::default(); discrete.sections.len()];
            let mut integral = 0.0;
            let mut prev = 0.0;
            let mut acc_c = Complex::new(0.0, 0.0);
            for k in 0..n {
                let t = k as f64 / FS;
                let x = (TAU * f * t).cos();
                let filtered: f64 = if filter.sections.is_empty() {
                    x
                } else {
                    filter.sections.iter().zip(&mut fstates).map(|(c, s)| s.tick(c, x)).sum()
                };
                integral += 0.5 / FS * (filtered + prev);
                prev = filtered;
                let u = filter.loop_gain * (filter.pi_gains.kp * filtered + filter.pi_gains.ki * integral);
                let mut y = plant.dc_gain_nm_per_v * u;
                for (c, s) in discrete.sections.iter().zip(&mut pstates) {
                    y = s.tick(c, y);
                }
                if k >= settle {
                    acc_c += y * Complex::from_polar(1.0, -(TAU * f * t));
                }
            }
            let measured = acc_c * (2.0 / measure as f64);
            let mag_err = (measured.norm() - expected.norm()).abs() / expected.norm();
            let mut phase_err = (measured.arg() - expected.arg()).to_degrees().abs();
            if phase_err > 180.0 {
                phase_err = 360.0 - phase_err;
            }
            assert!(mag_err < 0.02, "magnitude error {mag_err:.4} at {f} Hz");
            assert!(phase_err < 2.0, "phase error {phase_err:.2} deg at {f} Hz");
        }
    }

    #[test]
    fn zero_noise_zero_residual() {
        let (plant, filter) = default_loop();
        let noise = NoiseSpec { vibration_rms_nm: 0.0, vibration_corner_hz: 10.0, sensor_noise_nm: 0.0 };
        let run = simulate_lock(&plant, &filter, &noise, 0.024, 0.05, 1).unwrap();
        assert_eq!(run.residual_std_linewidths, 0.0);
    }

    #[test]
    fn calibrated_noise_meets_thirteenth_linewidth() {
        let (plant, filter) = default_loop();
        let lw = linewidth_to_nm(370e-6, 22e6, 897e-9);
        let run = simulate_lock(&plant, &filter, &NoiseSpec::default(), lw, 0.4, 7).unwrap();
        assert!(
            run.residual_std_linewidths <= 1.0 / 13.0,
            "residual {:.5} linewidths",
            run.residual_std_linewidths
        );
    }

    #[test]
    fn closed_loop_suppresses_low_frequency_noise_twenty_db() {
        let (plant, filter) = default_loop();
        let lw = linewidth_to_nm(370e-6, 22e6, 897e-9);
        let run = simulate_lock(&plant, &filter, &NoiseSpec::default(), lw, 0.4, 11).unwrap();
        let settle = run.open_error_nm.len() / 5;
        let open = band_power(&run.open_error_nm[settle..], run.sample_rate, 0.0, 100.0);
        let closed = band_power(&run.closed_error_nm[settle..], run.sample_rate, 0.0, 100.0);
        let db = 10.0 * (open / closed).log10();
        assert!(db >= 20.0, "suppression {db:.1} dB");
    }

    #[test]
    fn lock_run_is_seed_deterministic() {
        let (plant, filter) = default_loop();
        let lw = linewidth_to_nm(370e-6, 22e6, 897e-9);
        let a = simulate_lock(&plant, &filter, &NoiseSpec::default(), lw, 0.05, 3).unwrap();
        let b = simulate_lock(&plant, &filter, &NoiseSpec::default(), lw, 0.05, 3).unwrap();
        assert_eq!(a.closed_error_nm, b.closed_error_nm);
        assert_eq!(a.residual_std_linewidths, b.residual_std_linewidths);
    }

    #[test]
    fn unstable_corner_rejected() {
        let spec = LoopFilterSpec { lowpass_corner_hz: FS, ..LoopFilterSpec::default() };
        assert!(compose_loop_filter(&spec, FS, PiGains { kp: 1.0, ki: 0.0 }).is_err());
    }
}
