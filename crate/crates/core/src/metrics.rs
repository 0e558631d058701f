//! Objective quality metrics: segmental SNR, short-time intelligibility, and
//! log-spectral distance, plus corpus-level evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{self, Waveform};
use crate::error::{Error, Result};

/// Per-frame segmental SNR is clamped to this range (dB) before averaging.
pub const SSNR_FLOOR_DB: f64 = -10.0;
pub const SSNR_CEIL_DB: f64 = 35.0;

/// Frames whose clean-reference power falls below this level (dBFS, full
/// scale = 1.0) are treated as silence and excluded from the segmental mean.
pub const SSNR_SILENCE_DBFS: f64 = -40.0;

fn check_pair(clean: &Waveform, processed: &Waveform) -> Result<()> {
    if clean.sample_rate_hz != processed.sample_rate_hz {
        return Err(Error::data(format!(
            "sample rate mismatch: {} vs {} Hz",
            clean.sample_rate_hz, processed.sample_rate_hz
        )));
    }
    if clean.len() != processed.len() {
        return Err(Error::data(format!(
            "length mismatch: {} vs {} samples",
            clean.len(),
            processed.len()
        )));
    }
    Ok(())
}

fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// Segmental SNR in dB: the mean over non-silent 32 ms frames (50% overlap) of
/// `10·log10(Σ clean² / Σ (clean − processed)²)`, each frame clamped to
/// [−10, 35] dB. Frames whose clean power is below −40 dBFS are excluded so
/// that silence does not dominate the average.
pub fn ssnr(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    ssnr_with_threshold(clean, processed, SSNR_SILENCE_DBFS)
}

/// [`ssnr`] with an explicit silence-exclusion threshold in dBFS, for callers
/// whose material needs a different voiced/silent split.
pub fn ssnr_with_threshold(
    clean: &Waveform,
    processed: &Waveform,
    silence_dbfs: f64,
) -> Result<f64> {
    check_pair(clean, processed)?;
    let frame_len = (clean.sample_rate_hz as f64 * 0.032).round() as usize;
    let hop = frame_len / 2;
    let n = frame_count(clean.len(), frame_len, hop);
    if n == 0 {
        return Err(Error::data("input shorter than one 32 ms frame"));
    }
    let silence_power = 10f64.powf(silence_dbfs / 10.0);
    let mut sum = 0.0;
    let mut kept = 0usize;
    for f in 0..n {
        let off = f * hop;
        let c = &clean.samples[off..off + frame_len];
        let p = &processed.samples[off..off + frame_len];
        let sig: f64 = c.iter().map(|x| x * x).sum();
        if sig / frame_len as f64 <= silence_power {
            continue;
        }
        let err: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        // A zero-error frame has infinite SNR; the clamp ceiling applies.
        let snr = if err == 0.0 {
            SSNR_CEIL_DB
        } else {
            (10.0 * (sig / err).log10()).clamp(SSNR_FLOOR_DB, SSNR_CEIL_DB)
        };
        sum += snr;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::data(
            "all frames below the silence threshold; segmental SNR undefined",
        ));
    }
    Ok(sum / kept as f64)
}

/// Log-spectral distance in dB: RMS over frames and bins of the difference of
/// log-magnitude spectra, `20·log10(|S_clean|+ε) − 20·log10(|S_proc|+ε)` with
/// ε = 1e-10, computed on Hann-windowed 32 ms frames at 50% overlap.
pub fn lsd(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed)?;
    const EPS: f64 = 1e-10;
    let frame_len = (clean.sample_rate_hz as f64 * 0.032).round() as usize;
    let hop = frame_len / 2;
    let n = frame_count(clean.len(), frame_len, hop);
    if n == 0 {
        return Err(Error::data("input shorter than one 32 ms frame"));
    }
    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos()))
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(frame_len);
    let n_bins = frame_len / 2 + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut buf_c = vec![Complex::new(0.0, 0.0); frame_len];
    let mut buf_p = vec![Complex::new(0.0, 0.0); frame_len];
    for f in 0..n {
        let off = f * hop;
        for i in 0..frame_len {
            buf_c[i] = Complex::new(clean.samples[off + i] * window[i], 0.0);
            buf_p[i] = Complex::new(processed.samples[off + i] * window[i], 0.0);
        }
        fft.process(&mut buf_c);
        fft.process(&mut buf_p);
        for k in 0..n_bins {
            let d = 20.0 * (buf_c[k].norm() + EPS).log10() - 20.0 * (buf_p[k].norm() + EPS).log10();
            total += d * d;
            count += 1;
        }
    }
    Ok((total / count as f64).sqrt())
}

// Short-time intelligibility internals. The measure operates at 10 kHz on
// 25.6 ms Hann frames (hop 12.8 ms) zero-padded to a 512-point DFT, grouped
// into 15 one-third-octave bands starting at 150 Hz, and correlates clean and
// processed band envelopes over sliding 384 ms (30-frame) segments.
const STOI_RATE_HZ: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_HOP: usize = 128;
const STOI_NFFT: usize = 512;
const STOI_NBANDS: usize = 15;
const STOI_BAND_BASE_HZ: f64 = 150.0;
const STOI_SEG_FRAMES: usize = 30;
const STOI_DYN_RANGE_DB: f64 = 40.0;
const STOI_CLIP_BETA_DB: f64 = -15.0;

/// Hann-windowed frames of `x`, length [`STOI_FRAME`] at hop [`STOI_HOP`].
fn stoi_frames(x: &[f64]) -> Vec<Vec<f64>> {
    let window: Vec<f64> = (0..STOI_FRAME)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / STOI_FRAME as f64).cos()))
        .collect();
    let n = frame_count(x.len(), STOI_FRAME, STOI_HOP);
    (0..n)
        .map(|f| {
            let off = f * STOI_HOP;
            (0..STOI_FRAME).map(|i| x[off + i] * window[i]).collect()
        })
        .collect()
}

/// One-third-octave band edges as DFT bin ranges `[lo, hi)` at the analysis
/// rate: center frequencies 150·2^(j/3), edges a factor 2^(1/6) either side.
fn stoi_band_bins() -> Vec<(usize, usize)> {
    let bin_hz = STOI_RATE_HZ as f64 / STOI_NFFT as f64;
    let edge = 2f64.powf(1.0 / 6.0);
    (0..STOI_NBANDS)
        .map(|j| {
            let fc = STOI_BAND_BASE_HZ * 2f64.powf(j as f64 / 3.0);
            let lo = (fc / edge / bin_hz).ceil() as usize;
            let hi = ((fc * edge / bin_hz).ceil() as usize).min(STOI_NFFT / 2 + 1);
            (lo, hi)
        })
        .collect()
}

/// Short-time objective intelligibility score in [0, 1]. Operates on the
/// clean/processed pair after resampling to 10 kHz; frames more than 40 dB
/// below the loudest clean frame are discarded before band analysis. Scores
/// near 1 predict fully intelligible speech.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed)?;
    if clean.duration_secs() < 3.0 {
        log::warn!(
            "intelligibility metric on {:.2} s input; scores are most reliable above 3 s",
            clean.duration_secs()
        );
    }
    let c = audio::resample(clean, STOI_RATE_HZ)?;
    let p = audio::resample(processed, STOI_RATE_HZ)?;

    let cf = stoi_frames(&c.samples);
    let pf = stoi_frames(&p.samples);

    // Silent-frame removal keyed on the clean reference.
    let energies: Vec<f64> = cf
        .iter()
        .map(|fr| fr.iter().map(|x| x * x).sum::<f64>())
        .collect();
    let max_e = energies.iter().cloned().fold(0.0f64, f64::max);
    if max_e <= 0.0 {
        return Err(Error::data("clean reference is silent"));
    }
    let cut = max_e * 10f64.powf(-STOI_DYN_RANGE_DB / 10.0);
    let kept: Vec<usize> = (0..cf.len()).filter(|&i| energies[i] > cut).collect();
    if kept.len() < STOI_SEG_FRAMES {
        return Err(Error::data(format!(
            "only {} active frames; at least {} (one 384 ms segment) required",
            kept.len(),
            STOI_SEG_FRAMES
        )));
    }

    // Band envelopes for the retained frames.
    let bands = stoi_band_bins();
    let fft = FftPlanner::new().plan_fft_forward(STOI_NFFT);
    let mut env_c = vec![vec![0.0f64; STOI_NBANDS]; kept.len()];
    let mut env_p = vec![vec![0.0f64; STOI_NBANDS]; kept.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_NFFT];
    for (row, &fi) in kept.iter().enumerate() {
        for (frames, env) in [(&cf, &mut env_c), (&pf, &mut env_p)] {
            buf.fill(Complex::new(0.0, 0.0));
            for (i, &v) in frames[fi].iter().enumerate() {
                buf[i] = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for (j, &(lo, hi)) in bands.iter().enumerate() {
                env[row][j] = buf[lo..hi].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            }
        }
    }

    // Normalized, clipped correlation over sliding 30-frame segments.
    let clip = 1.0 + 10f64.powf(-STOI_CLIP_BETA_DB / 20.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut y_hat = [0.0f64; STOI_SEG_FRAMES];
    for seg_end in STOI_SEG_FRAMES..=kept.len() {
        let seg = seg_end - STOI_SEG_FRAMES..seg_end;
        for j in 0..STOI_NBANDS {
            let x: Vec<f64> = env_c[seg.clone()].iter().map(|r| r[j]).collect();
            let y: Vec<f64> = env_p[seg.clone()].iter().map(|r| r[j]).collect();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = if ny > 0.0 { nx / ny } else { 0.0 };
            for i in 0..STOI_SEG_FRAMES {
                y_hat[i] = (alpha * y[i]).min(clip * x[i]);
            }
            let mx = x.iter().sum::<f64>() / STOI_SEG_FRAMES as f64;
            let my = y_hat.iter().sum::<f64>() / STOI_SEG_FRAMES as f64;
            let mut num = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for i in 0..STOI_SEG_FRAMES {
                let a = x[i] - mx;
                let b = y_hat[i] - my;
                num += a * b;
                dx += a * a;
                dy += b * b;
            }
            let denom = (dx * dy).sqrt();
            sum += if denom > 0.0 { num / denom } else { 0.0 };
            count += 1;
        }
    }
    Ok((sum / count as f64).clamp(0.0, 1.0))
}

/// One evaluated utterance.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub utt_id: String,
    pub ssnr_db: f64,
    pub stoi: f64,
    pub lsd_db: f64,
}

/// Corpus mean or standard deviation of the three metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricStats {
    pub ssnr_db: f64,
    pub stoi: f64,
    pub lsd_db: f64,
}

/// Per-system evaluation result: one row per utterance plus corpus statistics.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub system: String,
    pub rows: Vec<MetricRow>,
    pub mean: MetricStats,
    pub std: MetricStats,
}

impl MetricReport {
    pub fn from_rows(system: impl Into<String>, rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("no utterances evaluated"));
        }
        let n = rows.len() as f64;
        let mut mean = MetricStats::default();
        for r in &rows {
            mean.ssnr_db += r.ssnr_db / n;
            mean.stoi += r.stoi / n;
            mean.lsd_db += r.lsd_db / n;
        }
        let mut std = MetricStats::default();
        for r in &rows {
            std.ssnr_db += (r.ssnr_db - mean.ssnr_db).powi(2) / n;
            std.stoi += (r.stoi - mean.stoi).powi(2) / n;
            std.lsd_db += (r.lsd_db - mean.lsd_db).powi(2) / n;
        }
        std.ssnr_db = std.ssnr_db.sqrt();
        std.stoi = std.stoi.sqrt();
        std.lsd_db = std.lsd_db.sqrt();
        Ok(MetricReport {
            system: system.into(),
            rows,
            mean,
            std,
        })
    }

    /// CSV rendering: `utt_id,ssnr_db,stoi,lsd_db` rows followed by `mean`
    /// and `std` footer rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,ssnr_db,stoi,lsd_db\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.utt_id, r.ssnr_db, r.stoi, r.lsd_db
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6}",
            self.mean.ssnr_db, self.mean.stoi, self.mean.lsd_db
        );
        let _ = writeln!(
            out,
            "std,{:.6},{:.6},{:.6}",
            self.std.ssnr_db, self.std.stoi, self.std.lsd_db
        );
        out
    }
}

/// All three metrics for one clean/processed pair, in report-row order.
pub fn evaluate_pair(clean: &Waveform, processed: &Waveform) -> Result<(f64, f64, f64)> {
    Ok((
        ssnr(clean, processed)?,
        stoi(clean, processed)?,
        lsd(clean, processed)?,
    ))
}

/// A named directory of enhanced outputs to score against the references.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub name: String,
    pub dir: PathBuf,
}

/// Evaluate one or more systems over a (clean, degraded) manifest. For each
/// manifest row, the system's output is looked up by the degraded file's name
/// inside the system directory and scored against the clean reference.
/// Unreadable or length-mismatched rows (beyond a ±1 sample tolerance) are
/// skipped with a warning; statistics cover the rows actually scored.
///
/// Writes `<name>.csv` per system plus a `comparison.txt` table (metrics as
/// rows, systems as columns) into `report_dir`. `jobs` bounds the number of
/// worker threads used per system.
pub fn evaluate_corpus(
    pairs: &[(PathBuf, PathBuf)],
    systems: &[SystemSpec],
    report_dir: &Path,
    jobs: usize,
) -> Result<Vec<MetricReport>> {
    if pairs.is_empty() {
        return Err(Error::data("empty manifest"));
    }
    if systems.is_empty() {
        return Err(Error::usage("no systems to evaluate"));
    }
    std::fs::create_dir_all(report_dir)?;

    let mut reports = Vec::with_capacity(systems.len());
    for sys in systems {
        let slots: Mutex<Vec<Option<MetricRow>>> = Mutex::new(vec![None; pairs.len()]);
        let next = AtomicUsize::new(0);
        let workers = jobs.max(1).min(pairs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= pairs.len() {
                        break;
                    }
                    if let Some(row) = score_row(sys, &pairs[i].0, &pairs[i].1) {
                        slots.lock().unwrap()[i] = Some(row);
                    }
                });
            }
        });
        let rows: Vec<MetricRow> = slots.into_inner().unwrap().into_iter().flatten().collect();
        if rows.len() < pairs.len() {
            log::warn!(
                "system {}: scored {}/{} rows; the rest were skipped",
                sys.name,
                rows.len(),
                pairs.len()
            );
        }
        let report = MetricReport::from_rows(&sys.name, rows)?;
        std::fs::write(
            report_dir.join(format!("{}.csv", sys.name)),
            report.to_csv(),
        )?;
        reports.push(report);
    }

    std::fs::write(report_dir.join("comparison.txt"), comparison_table(&reports))?;
    Ok(reports)
}

fn score_row(sys: &SystemSpec, clean_path: &Path, degraded_path: &Path) -> Option<MetricRow> {
    let name = degraded_path.file_name()?;
    let out_path = sys.dir.join(name);
    let mut clean = match audio::read_wav(clean_path) {
        Ok(w) => w,
        Err(e) => {
            log::warn!("skipping {}: {e}", clean_path.display());
            return None;
        }
    };
    let mut proc = match audio::read_wav(&out_path) {
        Ok(w) => w,
        Err(e) => {
            log::warn!("skipping {}: {e}", out_path.display());
            return None;
        }
    };
    // Enhancement pipelines may shed or gain a boundary sample; tolerate ±1.
    let (a, b) = (clean.len(), proc.len());
    if a.abs_diff(b) > 1 {
        log::warn!(
            "skipping {}: length mismatch {} vs {}",
            out_path.display(),
            a,
            b
        );
        return None;
    }
    let common = a.min(b);
    clean.samples.truncate(common);
    proc.samples.truncate(common);
    let utt_id = Path::new(name)
        .file_stem()
        .unwrap_or(name)
        .to_string_lossy()
        .into_owned();
    match evaluate_pair(&clean, &proc) {
        Ok((ssnr_db, stoi, lsd_db)) => Some(MetricRow {
            utt_id,
            ssnr_db,
            stoi,
            lsd_db,
        }),
        Err(e) => {
            log::warn!("skipping {utt_id}: {e}");
            None
        }
    }
}

/// Aligned text table with metrics as rows and systems as columns; cells are
/// `mean ± std`.
fn comparison_table(reports: &[MetricReport]) -> String {
    let metric_names = ["ssnr_db", "stoi", "lsd_db"];
    let cells: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                format!("{:.3} ± {:.3}", r.mean.ssnr_db, r.std.ssnr_db),
                format!("{:.4} ± {:.4}", r.mean.stoi, r.std.stoi),
                format!("{:.3} ± {:.3}", r.mean.lsd_db, r.std.lsd_db),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = reports
        .iter()
        .map(|r| r.system.chars().count())
        .collect();
    for (c, w) in widths.iter_mut().enumerate() {
        for row in 0..metric_names.len() {
            *w = (*w).max(cells[c][row].chars().count());
        }
    }
    let name_w = metric_names.iter().map(|n| n.len()).max().unwrap_or(0);
    let mut out = format!("{:name_w$}", "metric");
    for (c, r) in reports.iter().enumerate() {
        let _ = write!(out, "  {:>w$}", r.system, w = widths[c]);
    }
    out.push('\n');
    for (row, name) in metric_names.iter().enumerate() {
        let _ = write!(out, "{name:name_w$}");
        for (c, _) in reports.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", cells[c][row], w = widths[c]);
        }
        out.push('\n');
    }
    out
}
