//! WAV I/O, resampling, and gain utilities.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waverefine_core::audio::{normalize_peak, read_wav, resample, write_wav, Waveform};
use waverefine_core::Error;

/// Random waveform whose samples sit exactly on the 16-bit PCM grid.
fn pcm_grid_waveform(n: usize, rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| rng.gen_range(-32767i32..=32767) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

#[test]
fn wav_round_trip_is_bit_exact_on_the_pcm_grid() {
    let dir = tempfile::tempdir().unwrap();
    let w = pcm_grid_waveform(4321, 16_000, 1);
    let p1 = dir.path().join("a.wav");
    let p2 = dir.path().join("b.wav");
    write_wav(&w, &p1).unwrap();
    let back = read_wav(&p1).unwrap();
    assert_eq!(back.sample_rate_hz, 16_000);
    assert_eq!(back.samples, w.samples);
    write_wav(&back, &p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "second generation must be byte-identical"
    );
}

#[test]
fn full_scale_samples_map_to_the_symmetric_pcm_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fs.wav");
    write_wav(&Waveform::new(vec![1.0, -1.0, 2.5, -3.0], 8_000), &p).unwrap();
    let back = read_wav(&p).unwrap();
    let q = 32767.0 / 32768.0;
    assert_eq!(back.samples, vec![q, -q, q, -q]);
}

#[test]
fn malformed_wav_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.wav");

    std::fs::write(&p, b"this is not a riff file at all........").unwrap();
    assert!(matches!(read_wav(&p), Err(Error::Format(_))));

    // Valid RIFF/WAVE shell but stereo: structurally fine, unsupported.
    let mut stereo = Vec::new();
    stereo.extend_from_slice(b"RIFF");
    stereo.extend_from_slice(&(36u32 + 4).to_le_bytes());
    stereo.extend_from_slice(b"WAVEfmt ");
    stereo.extend_from_slice(&16u32.to_le_bytes());
    stereo.extend_from_slice(&1u16.to_le_bytes()); // PCM
    stereo.extend_from_slice(&2u16.to_le_bytes()); // two channels
    stereo.extend_from_slice(&16_000u32.to_le_bytes());
    stereo.extend_from_slice(&(16_000u32 * 4).to_le_bytes());
    stereo.extend_from_slice(&4u16.to_le_bytes());
    stereo.extend_from_slice(&16u16.to_le_bytes());
    stereo.extend_from_slice(b"data");
    stereo.extend_from_slice(&4u32.to_le_bytes());
    stereo.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&p, &stereo).unwrap();
    assert!(matches!(read_wav(&p), Err(Error::Unsupported(_))));

    assert!(matches!(
        read_wav(dir.path().join("missing.wav")),
        Err(Error::Data(_) | Error::Io(_))
    ));
}

#[test]
fn non_finite_samples_refuse_to_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::new(vec![0.0, f64::NAN], 16_000);
    assert!(matches!(
        write_wav(&w, dir.path().join("nan.wav")),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn resampling_preserves_tone_frequency_and_duration() {
    let w = common::sine(16_000, 440.0, 1.0, 0.5);
    let down = resample(&w, 10_000).unwrap();
    assert_eq!(down.sample_rate_hz, 10_000);
    assert_eq!(down.len(), 10_000);

    // The 440 Hz tone must survive: correlate against the ideal tone away
    // from filter edges.
    let ideal = common::sine(10_000, 440.0, 1.0, 0.5);
    let lo = 500;
    let hi = down.len() - 500;
    let dot: f64 = down.samples[lo..hi]
        .iter()
        .zip(&ideal.samples[lo..hi])
        .map(|(a, b)| a * b)
        .sum();
    let na: f64 = down.samples[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = ideal.samples[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(
        dot / (na * nb) > 0.999,
        "correlation {} too low",
        dot / (na * nb)
    );

    let same = resample(&w, 16_000).unwrap();
    assert_eq!(same.samples, w.samples, "same-rate resample is the identity");
}

#[test]
fn up_down_round_trip_is_transparent_in_the_passband() {
    // Bandlimited content well below the anti-alias transition band must
    // survive a 48 kHz detour essentially untouched.
    let w = common::multi_sine(
        16_000,
        &[(220.0, 0.3), (870.0, 0.2), (2_310.0, 0.15), (5_000.0, 0.1)],
        1.0,
    );
    let up = resample(&w, 48_000).unwrap();
    let back = resample(&up, 16_000).unwrap();
    assert_eq!(back.len(), w.len());
    let lo = 800;
    let hi = w.len() - 800;
    let err = common::max_abs_diff(&back.samples[lo..hi], &w.samples[lo..hi]);
    assert!(err < 1e-3, "round-trip error {err}");
}

#[test]
fn peak_normalization_hits_the_requested_level() {
    let w = common::sine(16_000, 100.0, 0.1, 0.03);
    let n = normalize_peak(&w, 0.5).unwrap();
    let peak = n.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    assert!((peak - 0.5).abs() < 1e-12);

    let silent = Waveform::new(vec![0.0; 100], 16_000);
    let out = normalize_peak(&silent, 0.5).unwrap();
    assert_eq!(out.samples, silent.samples);

    assert!(matches!(normalize_peak(&w, 0.0), Err(Error::Usage(_))));
    assert!(matches!(normalize_peak(&w, 1.5), Err(Error::Usage(_))));
}
