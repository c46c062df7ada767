//! Second-order Butterworth low-pass sections.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Normalized second-order IIR section
/// `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Bilinear-transform design with the cutoff pre-warped so that
/// `|H(cutoff)| = 1/sqrt(2)` exactly.
pub fn butterworth2_design(cutoff_hz: f64, sample_rate_hz: f64) -> Result<Biquad> {
    let nyquist_hz = sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist_hz) || !sample_rate_hz.is_finite() {
        return Err(Error::InvalidCutoff { cutoff_hz, nyquist_hz });
    }
    let k = (PI * cutoff_hz / sample_rate_hz).tan();
    let k2 = k * k;
    let norm = 1.0 / (1.0 + SQRT_2 * k + k2);
    let b0 = k2 * norm;
    Ok(Biquad { b: [b0, 2.0 * b0, b0], a: [2.0 * (k2 - 1.0) * norm, (1.0 - SQRT_2 * k + k2) * norm] })
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// `|H(e^{jw})|` at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let eval = |c0: f64, c1: f64, c2: f64| {
            let re = c0 + c1 * w.cos() + c2 * (2.0 * w).cos();
            let im = -c1 * w.sin() - c2 * (2.0 * w).sin();
            re.hypot(im)
        };
        eval(self.b[0], self.b[1], self.b[2]) / eval(1.0, self.a[0], self.a[1])
    }

    /// Both poles strictly inside the unit circle (Jury conditions).
    pub fn is_stable(&self) -> bool {
        let [a1, a2] = self.a;
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }

    /// Delay state that makes a constant input `x` an equilibrium.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        let z2 = self.b[2] * x - self.a[1] * y;
        [y - self.b[0] * x, z2]
    }

    fn tick(&self, z: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b[0] * x + z[0];
        z[0] = self.b[1] * x - self.a[0] * y + z[1];
        z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Causal multichannel filter in transposed direct form II.
#[derive(Clone, Debug)]
pub struct BiquadFilter {
    biquad: Biquad,
    state: Vec<[f64; 2]>,
}

impl BiquadFilter {
    pub fn new(biquad: Biquad, channels: usize) -> Self {
        Self { biquad, state: vec![[0.0; 2]; channels] }
    }

    pub fn biquad(&self) -> &Biquad {
        &self.biquad
    }

    /// Puts every channel at equilibrium for the given constant input.
    pub fn settle(&mut self, input: &[f64]) {
        assert_eq!(input.len(), self.state.len(), "channel count mismatch");
        for (z, &x) in self.state.iter_mut().zip(input) {
            *z = self.biquad.steady_state(x);
        }
    }

    pub fn step(&mut self, input: &[f64], output: &mut [f64]) {
        assert_eq!(input.len(), self.state.len(), "channel count mismatch");
        for ((z, &x), y) in self.state.iter_mut().zip(input).zip(output.iter_mut()) {
            *y = self.biquad.tick(z, x);
        }
    }

    pub fn step_scalar(&mut self, channel: usize, x: f64) -> f64 {
        self.biquad.tick(&mut self.state[channel], x)
    }
}

/// Samples needed for the filter's start-up transient to die out: one
/// cutoff period.
pub fn warm_up_samples(cutoff_hz: f64, sample_rate_hz: f64) -> usize {
    (sample_rate_hz / cutoff_hz).ceil() as usize
}

/// Forward-backward filtering with odd-reflection padding and
/// steady-state initialization at both passes. The caller checks length.
pub fn filtfilt(biquad: &Biquad, signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let (first, last) = (signal[0], signal[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * first - signal[k]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|k| 2.0 * last - signal[n - 1 - k]));

    let mut z = biquad.steady_state(ext[0]);
    for x in ext.iter_mut() {
        *x = biquad.tick(&mut z, *x);
    }
    let mut z = biquad.steady_state(ext[ext.len() - 1]);
    for x in ext.iter_mut().rev() {
        *x = biquad.tick(&mut z, *x);
    }
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_magnitude_and_dc_gain() {
        let bq = butterworth2_design(25.0, 1000.0).unwrap();
        assert!((bq.magnitude(25.0, 1000.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((bq.dc_gain() - 1.0).abs() < 1e-15);
        assert!(bq.is_stable());
    }

    #[test]
    fn matches_prewarped_analog_prototype() {
        // The bilinear map sends digital frequency f to analog
        // W = 2 fs tan(pi f / fs); with the pre-warped cutoff Wc the digital
        // response must equal the analog Butterworth 1 / sqrt(1 + (W/Wc)^4).
        let (fc, fs) = (25.0, 1000.0);
        let bq = butterworth2_design(fc, fs).unwrap();
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        for k in 1..100 {
            let f = k as f64 * 4.9;
            let analog = 1.0 / (1.0 + (warp(f) / warp(fc)).powi(4)).sqrt();
            assert!((bq.magnitude(f, fs) - analog).abs() < 1e-12, "f = {f}");
        }
    }

    #[test]
    fn rejects_bad_cutoff() {
        for fc in [0.0, -1.0, 500.0, 700.0, f64::NAN] {
            assert!(matches!(butterworth2_design(fc, 1000.0), Err(Error::InvalidCutoff { .. })));
        }
    }

    #[test]
    fn settled_filter_holds_constant() {
        let bq = butterworth2_design(25.0, 1000.0).unwrap();
        let mut f = BiquadFilter::new(bq, 2);
        f.settle(&[3.0, -1.5]);
        let mut out = [0.0; 2];
        for _ in 0..100 {
            f.step(&[3.0, -1.5], &mut out);
            assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn filtfilt_keeps_constant() {
        let bq = butterworth2_design(10.0, 1000.0).unwrap();
        let y = filtfilt(&bq, &[2.5; 300], 120);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
