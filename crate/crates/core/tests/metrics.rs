//! Objective quality metrics: closed-form oracle cases and corpus reports.

mod common;

use waverefine_core::audio::{write_wav, Waveform};
use waverefine_core::metrics::{
    evaluate_corpus, evaluate_pair, lsd, ssnr, ssnr_with_threshold, stoi, MetricReport,
    MetricRow, SystemSpec, SSNR_CEIL_DB,
};
use waverefine_core::Error;

const DB_2X: f64 = 6.020599913279624; // 20·log10(2)

#[test]
fn identical_signals_score_perfectly() {
    let clean = common::speech_like(16_000, 3.0, 1);
    assert_eq!(ssnr(&clean, &clean).unwrap(), SSNR_CEIL_DB);
    assert_eq!(lsd(&clean, &clean).unwrap(), 0.0);
    assert!(stoi(&clean, &clean).unwrap() >= 0.99);
}

#[test]
fn doubling_the_signal_gives_zero_snr_and_six_db_lsd() {
    let clean = common::speech_like(16_000, 2.0, 2);
    let doubled = Waveform::new(
        clean.samples.iter().map(|s| 2.0 * s).collect(),
        clean.sample_rate_hz,
    );
    // Error signal equals the clean signal, so every eligible frame sits at
    // exactly 0 dB.
    let s = ssnr(&clean, &doubled).unwrap();
    assert!(s.abs() < 1e-9, "ssnr {s}");
    // Every log-magnitude bin moves by 20·log10(2).
    let l = lsd(&clean, &doubled).unwrap();
    assert!((l - DB_2X).abs() < 1e-3, "lsd {l}");
}

#[test]
fn polarity_inversion_costs_six_db() {
    let clean = common::speech_like(16_000, 2.0, 3);
    let inverted = Waveform::new(
        clean.samples.iter().map(|s| -s).collect(),
        clean.sample_rate_hz,
    );
    // Error is 2× the clean signal: −20·log10(2) in every frame.
    let s = ssnr(&clean, &inverted).unwrap();
    assert!((s + DB_2X).abs() < 1e-9, "ssnr {s}");
}

#[test]
fn unrelated_noise_scores_near_zero_intelligibility() {
    let clean = common::speech_like(16_000, 3.0, 4);
    for seed in 0..10 {
        let noise = common::white_noise(16_000, 3.0, 0.3, 1000 + seed);
        let v = stoi(&clean, &noise).unwrap();
        assert!(v <= 0.3, "seed {seed}: stoi {v}");
    }
}

#[test]
fn all_three_metrics_track_snr_monotonically() {
    let clean = common::speech_like(16_000, 3.0, 5);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &snr in &[-5.0, 0.0, 5.0, 10.0, 20.0] {
        let noisy = common::add_noise_snr(&clean, snr, 7);
        let (s, i, l) = evaluate_pair(&clean, &noisy).unwrap();
        if let Some((ps, pi, pl)) = prev {
            assert!(s > ps, "ssnr fell: {ps} -> {s} at {snr} dB");
            assert!(i >= pi - 1e-9, "stoi fell: {pi} -> {i} at {snr} dB");
            assert!(l < pl, "lsd rose: {pl} -> {l} at {snr} dB");
        }
        prev = Some((s, i, l));
    }
}

#[test]
fn silent_stretches_are_excluded_from_snr() {
    // Half a second of digital silence must not drag the average down: the
    // same tone with and without the silent prefix scores identically when
    // the processed signal matches over the silent span.
    let rate = 16_000;
    let tone = common::sine(rate, 500.0, 1.0, 0.4);
    let mut clean_samples = vec![0.0; rate as usize / 2];
    clean_samples.extend_from_slice(&tone.samples);
    let clean = Waveform::new(clean_samples, rate);

    // Processed: tone degraded everywhere, silence reproduced exactly.
    let noise = common::white_noise(rate, 1.5, 0.05, 9);
    let processed = Waveform::new(
        clean
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if i < rate as usize / 2 {
                    s
                } else {
                    s + noise.samples[i]
                }
            })
            .collect(),
        rate,
    );
    let with_silence = ssnr(&clean, &processed).unwrap();

    let noisy_tone = Waveform::new(
        tone.samples
            .iter()
            .zip(&noise.samples[rate as usize / 2..])
            .map(|(s, n)| s + n)
            .collect(),
        rate,
    );
    let without_silence = ssnr(&tone, &noisy_tone).unwrap();
    assert!(
        (with_silence - without_silence).abs() < 0.6,
        "{with_silence} vs {without_silence}"
    );

    // All-silent clean reference leaves nothing to score.
    let silence = Waveform::new(vec![0.0; 16_000], rate);
    assert!(matches!(ssnr(&silence, &silence), Err(Error::Data(_))));

    // The exclusion threshold is adjustable. A −80 dBFS hum prefix
    // (reproduced exactly) is silence at the −40 default but counts once the
    // threshold drops below it, and those perfect frames clamp to the
    // ceiling and pull the mean up. Raised above full scale, the threshold
    // excludes everything.
    let mut hum_clean = vec![1e-4; rate as usize / 2];
    hum_clean.extend_from_slice(&tone.samples);
    let hum_clean = Waveform::new(hum_clean, rate);
    let hum_processed = Waveform::new(
        hum_clean
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| if i < rate as usize / 2 { s } else { s + noise.samples[i] })
            .collect(),
        rate,
    );
    let default_score = ssnr(&hum_clean, &hum_processed).unwrap();
    let admit_hum = ssnr_with_threshold(&hum_clean, &hum_processed, -100.0).unwrap();
    assert!(admit_hum > default_score, "{admit_hum} vs {default_score}");
    assert!(matches!(
        ssnr_with_threshold(&hum_clean, &hum_processed, 10.0),
        Err(Error::Data(_))
    ));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = common::sine(16_000, 100.0, 1.0, 0.5);
    let b = common::sine(8_000, 100.0, 1.0, 0.5);
    assert!(matches!(ssnr(&a, &b), Err(Error::Data(_))));
    let c = Waveform::new(a.samples[..10_000].to_vec(), 16_000);
    assert!(matches!(lsd(&a, &c), Err(Error::Data(_))));
    let short = common::sine(16_000, 100.0, 0.25, 0.5);
    assert!(matches!(stoi(&short, &short), Err(Error::Data(_))));
}

#[test]
fn report_statistics_match_hand_computation() {
    let rows = vec![
        MetricRow {
            utt_id: "a".into(),
            ssnr_db: 2.0,
            stoi: 0.8,
            lsd_db: 1.0,
        },
        MetricRow {
            utt_id: "b".into(),
            ssnr_db: 4.0,
            stoi: 0.9,
            lsd_db: 3.0,
        },
    ];
    let report = MetricReport::from_rows("sys", rows).unwrap();
    assert!((report.mean.ssnr_db - 3.0).abs() < 1e-12);
    assert!((report.mean.stoi - 0.85).abs() < 1e-12);
    assert!((report.std.ssnr_db - 1.0).abs() < 1e-12);
    assert!((report.std.lsd_db - 1.0).abs() < 1e-12);

    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "utt_id,ssnr_db,stoi,lsd_db");
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
    assert!(csv.lines().any(|l| l.starts_with("std,")));

    assert!(matches!(
        MetricReport::from_rows("empty", vec![]),
        Err(Error::Data(_))
    ));
}

#[test]
fn corpus_evaluation_writes_reports_and_skips_unusable_rows() {
    let dir = tempfile::tempdir().unwrap();
    let wav_dir = dir.path().join("wavs");
    let sys_a = dir.path().join("sys_a");
    let sys_b = dir.path().join("sys_b");
    let reports = dir.path().join("reports");
    for d in [&wav_dir, &sys_a, &sys_b] {
        std::fs::create_dir_all(d).unwrap();
    }

    let mut pairs = Vec::new();
    for i in 0..3 {
        let clean = common::speech_like(16_000, 3.0, 100 + i);
        let noisy = common::add_noise_snr(&clean, 5.0, 200 + i);
        let clean_path = wav_dir.join(format!("utt{i}_clean.wav"));
        let noisy_path = wav_dir.join(format!("utt{i}.wav"));
        write_wav(&clean, &clean_path).unwrap();
        write_wav(&noisy, &noisy_path).unwrap();
        // System A: mild improvement (halved noise). System B: passthrough.
        let half = Waveform::new(
            clean
                .samples
                .iter()
                .zip(&noisy.samples)
                .map(|(c, n)| c + 0.5 * (n - c))
                .collect(),
            16_000,
        );
        write_wav(&half, sys_a.join(format!("utt{i}.wav"))).unwrap();
        if i < 2 {
            // utt2 missing from system B: the row must be skipped, not fatal.
            write_wav(&noisy, sys_b.join(format!("utt{i}.wav"))).unwrap();
        }
        pairs.push((clean_path, noisy_path));
    }

    let systems = vec![
        SystemSpec {
            name: "halved".into(),
            dir: sys_a.clone(),
        },
        SystemSpec {
            name: "passthrough".into(),
            dir: sys_b.clone(),
        },
    ];
    let out = evaluate_corpus(&pairs, &systems, &reports, 2).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].rows.len(), 3);
    assert_eq!(out[1].rows.len(), 2, "missing file must drop one row");
    assert!(
        out[0].mean.ssnr_db > out[1].mean.ssnr_db,
        "halved noise must outscore passthrough"
    );

    assert!(reports.join("halved.csv").is_file());
    assert!(reports.join("passthrough.csv").is_file());
    let table = std::fs::read_to_string(reports.join("comparison.txt")).unwrap();
    assert!(table.contains("halved") && table.contains("passthrough"));
    assert!(table.contains('±'));

    assert!(matches!(
        evaluate_corpus(&[], &systems, &reports, 1),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        evaluate_corpus(&pairs, &[], &reports, 1),
        Err(Error::Usage(_))
    ));
}
