//! Shared signal builders for integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use waverefine_core::audio::Waveform;

pub fn sine(rate_hz: u32, freq_hz: f64, secs: f64, amp: f64) -> Waveform {
    let n = (rate_hz as f64 * secs).round() as usize;
    let samples = (0..n)
        .map(|i| amp * (2.0 * PI * freq_hz * i as f64 / rate_hz as f64).sin())
        .collect();
    Waveform::new(samples, rate_hz)
}

/// Sum of sinusoids with the given (frequency, amplitude) pairs.
pub fn multi_sine(rate_hz: u32, parts: &[(f64, f64)], secs: f64) -> Waveform {
    let n = (rate_hz as f64 * secs).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate_hz as f64;
            parts
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t).sin())
                .sum()
        })
        .collect();
    Waveform::new(samples, rate_hz)
}

pub fn white_noise(rate_hz: u32, secs: f64, amp: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (rate_hz as f64 * secs).round() as usize;
    let samples = (0..n).map(|_| amp * (rng.gen::<f64>() * 2.0 - 1.0)).collect();
    Waveform::new(samples, rate_hz)
}

/// A voiced-speech stand-in: pitch-modulated harmonic series under a slow
/// syllabic amplitude envelope, plus a little breath noise.
pub fn speech_like(rate_hz: u32, secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (rate_hz as f64 * secs).round() as usize;
    let f0_base = 90.0 + rng.gen::<f64>() * 120.0;
    let vibrato_hz = 2.0 + rng.gen::<f64>() * 4.0;
    let syllable_hz = 2.5 + rng.gen::<f64>() * 2.0;
    let phase0: f64 = rng.gen::<f64>() * 2.0 * PI;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate_hz as f64;
        let f0 = f0_base * (1.0 + 0.04 * (2.0 * PI * vibrato_hz * t).sin());
        phase += 2.0 * PI * f0 / rate_hz as f64;
        // Formant-ish harmonic weighting.
        let mut v = 0.0;
        for (h, w) in [(1, 0.5), (2, 0.35), (3, 0.25), (4, 0.12), (6, 0.08)] {
            v += w * (h as f64 * phase).sin();
        }
        let envelope = 0.55 + 0.45 * (2.0 * PI * syllable_hz * t + phase0).sin();
        let breath = 0.01 * (rng.gen::<f64>() * 2.0 - 1.0);
        samples.push(0.4 * envelope * v + breath);
    }
    Waveform::new(samples, rate_hz)
}

/// Mix white noise into `clean` at the requested SNR (dB, full-signal power).
pub fn add_noise_snr(clean: &Waveform, snr_db: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_clean: f64 =
        clean.samples.iter().map(|s| s * s).sum::<f64>() / clean.len().max(1) as f64;
    let p_noise = p_clean / 10f64.powf(snr_db / 10.0);
    let amp = (3.0 * p_noise).sqrt(); // uniform [-a, a] has power a²/3
    let samples = clean
        .samples
        .iter()
        .map(|s| s + amp * (rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    Waveform::new(samples, clean.sample_rate_hz)
}

/// Mean |a − b| over two equal-length slices.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
