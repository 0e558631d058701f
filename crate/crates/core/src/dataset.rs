//! Clean/degraded pair preparation: delay alignment, silence trimming,
//! fixed-window chunking and the on-disk chunk cache.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// A clean/degraded pair trimmed to a common length after delay removal.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub clean: Waveform,
    pub degraded: Waveform,
    pub delay_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// Overlapping windows for training; trailing partial window dropped.
    TrainingOverlapped,
    /// Non-overlapping tiling for inference; the final window is pre-padded
    /// with the preceding samples instead of zeros.
    InferenceSequential,
}

/// Fixed-length windows of a waveform plus the metadata `stitch` needs to
/// reassemble the original.
#[derive(Debug, Clone)]
pub struct ChunkSet {
    pub chunks: Vec<Vec<f64>>,
    pub window_len: usize,
    pub hop_len: usize,
    pub original_len: usize,
    pub sample_rate_hz: u32,
    pub mode: ChunkMode,
    /// Inference mode only: how many leading samples of the final chunk are
    /// repeats of earlier material and must be discarded when stitching.
    pub prepad_len: usize,
}

/// Lag in [0, max_lag] maximizing the cross-correlation
/// sum_n reference[n] * recorded[n + lag], computed exactly over integer lags
/// via FFT. Ties resolve to the smallest lag.
pub fn estimate_delay(reference: &Waveform, recorded: &Waveform, max_lag: usize) -> Result<usize> {
    if reference.is_empty() || recorded.is_empty() {
        return Err(Error::data("estimate_delay: empty input"));
    }
    if reference.sample_rate_hz != recorded.sample_rate_hz {
        return Err(Error::data(format!(
            "estimate_delay: sample rates differ ({} vs {})",
            reference.sample_rate_hz, recorded.sample_rate_hz
        )));
    }
    if max_lag >= recorded.len() {
        return Err(Error::usage(format!(
            "estimate_delay: max_lag {} >= recorded length {}",
            max_lag,
            recorded.len()
        )));
    }

    // Zero padding to this size leaves lags [0, max_lag] free of circular
    // wrap-around.
    let n = (reference.len() + max_lag)
        .max(recorded.len())
        .next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut a: Vec<Complex<f64>> = reference
        .samples
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    let mut b: Vec<Complex<f64>> = recorded
        .samples
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for i in 0..n {
        a[i] = a[i].conj() * b[i];
    }
    ifft.process(&mut a);

    let mut best_lag = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (lag, v) in a.iter().take(max_lag + 1).enumerate() {
        if v.re > best {
            best = v.re;
            best_lag = lag;
        }
    }
    Ok(best_lag)
}

/// Shift `recorded` left by the estimated delay and trim both signals to the
/// common length. Errors if that length falls below `min_len` (one model
/// window in the pipeline).
pub fn align(
    reference: &Waveform,
    recorded: &Waveform,
    max_lag: usize,
    min_len: usize,
) -> Result<AlignedPair> {
    let delay = estimate_delay(reference, recorded, max_lag)?;
    let shifted = &recorded.samples[delay..];
    let common = reference.len().min(shifted.len());
    if common < min_len {
        return Err(Error::data(format!(
            "align: common length {common} after removing delay {delay} is below {min_len}"
        )));
    }
    Ok(AlignedPair {
        clean: Waveform::new(reference.samples[..common].to_vec(), reference.sample_rate_hz),
        degraded: Waveform::new(shifted[..common].to_vec(), recorded.sample_rate_hz),
        delay_samples: delay,
    })
}

/// Sample range [start, end) that survives silence trimming: leading and
/// trailing runs of frames below `energy_threshold_db` (dBFS) are removed
/// when the run lasts longer than `min_silence_ms`. Frames are 20 ms with a
/// 10 ms hop.
pub fn trim_silence_bounds(
    w: &Waveform,
    energy_threshold_db: f64,
    min_silence_ms: f64,
) -> Result<(usize, usize)> {
    if min_silence_ms <= 0.0 {
        return Err(Error::usage("trim_silence: min_silence_ms must be > 0"));
    }
    if w.is_empty() {
        return Err(Error::data("trim_silence: empty waveform"));
    }
    let rate = w.sample_rate_hz as f64;
    let frame = ((0.020 * rate).round() as usize).max(1);
    let hop = ((0.010 * rate).round() as usize).max(1);

    let frame_db = |start: usize| -> f64 {
        let end = (start + frame).min(w.len());
        let e = w.samples[start..end].iter().map(|s| s * s).sum::<f64>() / (end - start) as f64;
        10.0 * (e + 1e-300).log10()
    };

    let n_frames = if w.len() <= frame {
        1
    } else {
        (w.len() - frame) / hop + 1
    };
    let loud: Vec<bool> = (0..n_frames)
        .map(|t| frame_db(t * hop) >= energy_threshold_db)
        .collect();

    let first_loud = loud.iter().position(|&l| l);
    let Some(first_loud) = first_loud else {
        return Err(Error::data(
            "trim_silence: entire signal below threshold".to_string(),
        ));
    };
    let last_loud = loud.iter().rposition(|&l| l).unwrap();

    let min_silence_samples = (min_silence_ms / 1000.0 * rate).round() as usize;
    let lead_samples = first_loud * hop;
    let start = if lead_samples > min_silence_samples {
        lead_samples
    } else {
        0
    };
    let loud_end = (last_loud * hop + frame).min(w.len());
    let trail_samples = w.len() - loud_end;
    let end = if trail_samples > min_silence_samples {
        loud_end
    } else {
        w.len()
    };
    Ok((start, end))
}

/// Remove leading/trailing silence runs longer than `min_silence_ms`.
pub fn trim_silence(w: &Waveform, energy_threshold_db: f64, min_silence_ms: f64) -> Result<Waveform> {
    let (start, end) = trim_silence_bounds(w, energy_threshold_db, min_silence_ms)?;
    Ok(Waveform::new(
        w.samples[start..end].to_vec(),
        w.sample_rate_hz,
    ))
}

/// Overlapping training windows at offsets 0, hop, 2*hop, ...; a trailing
/// partial window is dropped. Chunk count is floor((len - window)/hop) + 1.
pub fn chunk_training(w: &Waveform, window_len: usize, hop_len: usize) -> Result<ChunkSet> {
    if window_len == 0 || hop_len == 0 {
        return Err(Error::usage("chunk_training: window and hop must be positive"));
    }
    if w.len() < window_len {
        return Err(Error::data(format!(
            "chunk_training: signal length {} shorter than window {}",
            w.len(),
            window_len
        )));
    }
    if !window_len.is_power_of_two() {
        log::warn!(
            "chunk_training: window {window_len} is not a power of two; \
             the encoder needs lengths divisible by 2^num_layers"
        );
    }
    let count = (w.len() - window_len) / hop_len + 1;
    let chunks = (0..count)
        .map(|i| w.samples[i * hop_len..i * hop_len + window_len].to_vec())
        .collect();
    Ok(ChunkSet {
        chunks,
        window_len,
        hop_len,
        original_len: w.len(),
        sample_rate_hz: w.sample_rate_hz,
        mode: ChunkMode::TrainingOverlapped,
        prepad_len: 0,
    })
}

/// Non-overlapping inference tiling. A final remainder r < window becomes a
/// full window taken from the signal tail (pre-padded with the preceding
/// window - r samples rather than zeros). Signals shorter than one window
/// yield a single chunk left-padded by repeating the first sample.
pub fn chunk_inference(w: &Waveform, window_len: usize) -> Result<ChunkSet> {
    if window_len == 0 {
        return Err(Error::usage("chunk_inference: window must be positive"));
    }
    if w.is_empty() {
        return Err(Error::data("chunk_inference: empty waveform"));
    }
    let len = w.len();
    let mut chunks = Vec::new();
    let mut prepad_len = 0usize;
    if len < window_len {
        let mut c = vec![w.samples[0]; window_len - len];
        c.extend_from_slice(&w.samples);
        prepad_len = window_len - len;
        chunks.push(c);
    } else {
        let full = len / window_len;
        for i in 0..full {
            chunks.push(w.samples[i * window_len..(i + 1) * window_len].to_vec());
        }
        let r = len - full * window_len;
        if r > 0 {
            chunks.push(w.samples[len - window_len..].to_vec());
            prepad_len = window_len - r;
        }
    }
    Ok(ChunkSet {
        chunks,
        window_len,
        hop_len: window_len,
        original_len: len,
        sample_rate_hz: w.sample_rate_hz,
        mode: ChunkMode::InferenceSequential,
        prepad_len,
    })
}

/// Reassemble an inference ChunkSet: chunks are concatenated and the first
/// `prepad_len` samples of the final chunk are discarded, recovering exactly
/// `original_len` samples.
pub fn stitch(c: &ChunkSet) -> Result<Waveform> {
    if c.mode != ChunkMode::InferenceSequential {
        return Err(Error::usage(
            "stitch: chunk set is not in inference-sequential mode",
        ));
    }
    let mut samples = Vec::with_capacity(c.original_len);
    for (i, chunk) in c.chunks.iter().enumerate() {
        if chunk.len() != c.window_len {
            return Err(Error::data(format!(
                "stitch: chunk {i} has length {} != window {}",
                chunk.len(),
                c.window_len
            )));
        }
        if i + 1 == c.chunks.len() {
            samples.extend_from_slice(&chunk[c.prepad_len..]);
        } else {
            samples.extend_from_slice(chunk);
        }
    }
    if samples.len() != c.original_len {
        return Err(Error::data(format!(
            "stitch: reassembled {} samples, expected {}",
            samples.len(),
            c.original_len
        )));
    }
    Ok(Waveform::new(samples, c.sample_rate_hz))
}

const CHUNK_CACHE_MAGIC: &[u8; 7] = b"WRCHNK1";

/// Write fixed-length chunks as a cache file: magic "WRCHNK1", then
/// window_len, hop, count as little-endian u32, then count*window_len raw
/// little-endian f32 samples.
pub fn write_chunk_cache(
    path: impl AsRef<Path>,
    window_len: usize,
    hop_len: usize,
    chunks: &[Vec<f32>],
) -> Result<()> {
    for (i, c) in chunks.iter().enumerate() {
        if c.len() != window_len {
            return Err(Error::usage(format!(
                "chunk cache: chunk {i} has length {} != window {window_len}",
                c.len()
            )));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    f.write_all(CHUNK_CACHE_MAGIC)?;
    f.write_all(&(window_len as u32).to_le_bytes())?;
    f.write_all(&(hop_len as u32).to_le_bytes())?;
    f.write_all(&(chunks.len() as u32).to_le_bytes())?;
    for c in chunks {
        for &s in c {
            f.write_all(&s.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a chunk cache written by [`write_chunk_cache`].
pub fn read_chunk_cache(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 7];
    f.read_exact(&mut magic)?;
    if &magic != CHUNK_CACHE_MAGIC {
        return Err(Error::format(format!(
            "{}: bad chunk cache magic",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let window_len = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let hop_len = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if window_len == 0 {
        return Err(Error::format(format!("{}: window 0", path.display())));
    }

    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != count * window_len * 4 {
        return Err(Error::format(format!(
            "{}: expected {} sample bytes, found {}",
            path.display(),
            count * window_len * 4,
            raw.len()
        )));
    }
    let mut chunks = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * window_len * 4;
        let chunk = raw[start..start + window_len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        chunks.push(chunk);
    }
    Ok((window_len, hop_len, chunks))
}

/// Parse a corpus manifest: one `clean_path<TAB>degraded_path` line per pair.
/// Blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(clean), Some(degraded), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::format(format!(
                "{}:{}: manifest line must be clean<TAB>degraded",
                path.display(),
                lineno + 1
            )));
        };
        pairs.push((PathBuf::from(clean), PathBuf::from(degraded)));
    }
    Ok(pairs)
}

/// Knobs for [`prepare_pair`].
#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub max_lag: usize,
    pub trim_threshold_db: f64,
    pub min_silence_ms: f64,
    pub target_rate_hz: u32,
    pub window_len: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            max_lag: 16000,
            trim_threshold_db: -50.0,
            min_silence_ms: 200.0,
            target_rate_hz: 16000,
            window_len: 16384,
        }
    }
}

/// Full per-pair preparation: align at the source rate, apply the clean
/// signal's silence-trim bounds to both sides (keeping them sample-parallel),
/// then resample both to the target rate.
pub fn prepare_pair(
    clean: &Waveform,
    degraded: &Waveform,
    opts: &PrepareOptions,
) -> Result<AlignedPair> {
    let max_lag = opts.max_lag.min(degraded.len().saturating_sub(1));
    let pair = align(clean, degraded, max_lag, 1)?;
    let (start, end) =
        trim_silence_bounds(&pair.clean, opts.trim_threshold_db, opts.min_silence_ms)?;
    let clean_t = Waveform::new(pair.clean.samples[start..end].to_vec(), pair.clean.sample_rate_hz);
    let degraded_t = Waveform::new(
        pair.degraded.samples[start..end].to_vec(),
        pair.degraded.sample_rate_hz,
    );
    let clean_r = crate::audio::resample(&clean_t, opts.target_rate_hz)?;
    let degraded_r = crate::audio::resample(&degraded_t, opts.target_rate_hz)?;
    if clean_r.len() < opts.window_len {
        return Err(Error::data(format!(
            "prepare_pair: {} samples after trim/resample is shorter than one window ({})",
            clean_r.len(),
            opts.window_len
        )));
    }
    Ok(AlignedPair {
        clean: clean_r,
        degraded: degraded_r,
        delay_samples: pair.delay_samples,
    })
}
