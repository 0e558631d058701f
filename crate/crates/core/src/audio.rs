//! Mono waveform I/O, resampling and normalization.
//!
//! I/O is restricted to RIFF/WAVE PCM 16-bit mono; everything internal runs
//! in double precision.

use std::path::Path;

use crate::error::{Error, Result};

/// A mono sample sequence plus its rate. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

// PCM values are read as p / 32768 so no sample ever exceeds 1.0 in
// magnitude. Writing uses the exact inverse, clamp(round(s * 32768)) into
// [-32767, 32767], so that write_wav(read_wav(f)) reproduces f byte for byte
// for every PCM value in that range (and so that 1.0 / -1.0 land on
// 32767 / -32767).
const PCM_SCALE: f64 = 32768.0;

fn read_u32(b: &[u8], off: usize) -> Option<u32> {
    Some(u32::from_le_bytes(b.get(off..off + 4)?.try_into().ok()?))
}

fn read_u16(b: &[u8], off: usize) -> Option<u16> {
    Some(u16::from_le_bytes(b.get(off..off + 2)?.try_into().ok()?))
}

/// Read a PCM 16-bit mono RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut off = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = read_u32(&bytes, off + 4)
            .ok_or_else(|| Error::format("truncated chunk header"))? as usize;
        let body_off = off + 8;
        if body_off + size > bytes.len() {
            return Err(Error::format(format!(
                "{}: chunk '{}' overruns file",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt chunk too small"));
                }
                let format = read_u16(&bytes, body_off).unwrap();
                let channels = read_u16(&bytes, body_off + 2).unwrap();
                let rate = read_u32(&bytes, body_off + 4).unwrap();
                let bits = read_u16(&bytes, body_off + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_off..body_off + size]),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        off = body_off + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format(format!("{}: missing fmt chunk", path.display())))?;
    if format != 1 {
        return Err(Error::unsupported(format!(
            "{}: only PCM encoding is supported (format tag {format})",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(Error::unsupported(format!(
            "{}: only mono files are supported ({channels} channels)",
            path.display()
        )));
    }
    if bits != 16 {
        return Err(Error::unsupported(format!(
            "{}: only 16-bit samples are supported ({bits} bits)",
            path.display()
        )));
    }
    if rate == 0 {
        return Err(Error::format("sample rate 0"));
    }
    let data =
        data.ok_or_else(|| Error::format(format!("{}: missing data chunk", path.display())))?;
    if data.len() % 2 != 0 {
        return Err(Error::format("data chunk has odd byte length"));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM_SCALE)
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Write a PCM 16-bit mono RIFF/WAVE file. Out-of-range samples are clipped;
/// the number of clipped samples is reported as a warning.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut clipped = 0usize;
    let mut pcm = Vec::with_capacity(w.samples.len() * 2);
    for &s in &w.samples {
        if !s.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite sample while writing {}",
                path.display()
            )));
        }
        let v = (s * PCM_SCALE).round();
        let q = if v > 32767.0 {
            clipped += 1;
            32767
        } else if v < -32767.0 {
            clipped += 1;
            -32767
        } else {
            v as i16
        };
        pcm.extend_from_slice(&q.to_le_bytes());
    }
    if clipped > 0 {
        log::warn!(
            "write_wav {}: clipped {clipped} of {} samples",
            path.display(),
            w.samples.len()
        );
    }

    let data_len = pcm.len() as u32;
    let byte_rate = w.sample_rate_hz * 2;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);
    std::fs::write(path, out)?;
    Ok(())
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (series form),
/// used by the Kaiser window.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let x2 = x * x / 4.0;
    for k in 1..=30 {
        term *= x2 / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass prototype for a rational polyphase
/// resampler. `cutoff` is in radians per sample at the upsampled rate.
fn design_lowpass(taps: usize, cutoff: f64, beta: f64, gain: f64) -> Vec<f64> {
    let c = (taps - 1) as f64 / 2.0;
    let denom = bessel_i0(beta);
    (0..taps)
        .map(|n| {
            let t = n as f64 - c;
            let ideal = if t == 0.0 {
                cutoff / std::f64::consts::PI
            } else {
                (cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let r = 2.0 * n as f64 / (taps - 1) as f64 - 1.0;
            let win = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
            gain * ideal * win
        })
        .collect()
}

/// Resample to `target_hz` with a polyphase Kaiser-windowed FIR
/// (beta = 8.6, 64 taps per phase of the larger rate factor), giving a
/// stopband attenuation comfortably past 60 dB. The output length is
/// ceil(len * target / source).
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::usage("resample target rate must be positive"));
    }
    if target_hz == w.sample_rate_hz {
        return Ok(w.clone());
    }
    let g = gcd(target_hz, w.sample_rate_hz);
    let up = (target_hz / g) as usize; // L
    let down = (w.sample_rate_hz / g) as usize; // M

    let taps = 64 * up.max(down) + 1;
    // Band edge at the narrower of the two Nyquist frequencies, with a small
    // margin for the transition band.
    let cutoff = 0.92 * std::f64::consts::PI * (1.0 / up as f64).min(1.0 / down as f64);
    // Gain `up` compensates the zero-stuffing energy loss.
    let h = design_lowpass(taps, cutoff, 8.6, up as f64);
    let center = (taps - 1) / 2;

    let n_in = w.samples.len();
    let n_out = (n_in * up).div_ceil(down);
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        // Index on the virtual upsampled grid, shifted so the filter's group
        // delay cancels and output stays time-aligned with input.
        let j0 = m * down + center;
        let i_hi = (j0 / up).min(n_in.saturating_sub(1));
        let i_lo = (j0.saturating_sub(taps - 1)).div_ceil(up);
        let mut acc = 0.0;
        let mut i = i_lo;
        while i <= i_hi {
            let k = j0 - i * up;
            acc += w.samples[i] * h[k];
            i += 1;
        }
        out.push(acc);
    }
    Ok(Waveform::new(out, target_hz))
}

/// Scale so the maximum absolute sample equals `peak`. All-zero input is
/// returned unchanged with a warning.
pub fn normalize_peak(w: &Waveform, peak: f64) -> Result<Waveform> {
    if !(peak > 0.0 && peak <= 1.0) {
        return Err(Error::usage(format!("peak must be in (0, 1], got {peak}")));
    }
    if w.is_empty() {
        return Err(Error::data("normalize_peak: empty waveform"));
    }
    let max_abs = w.samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    if max_abs == 0.0 {
        log::warn!("normalize_peak: all-zero input left unchanged");
        return Ok(w.clone());
    }
    let scale = peak / max_abs;
    Ok(Waveform::new(
        w.samples.iter().map(|&s| s * scale).collect(),
        w.sample_rate_hz,
    ))
}
