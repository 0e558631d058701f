//! Spectral-domain pre-enhancement: STFT/ISTFT plumbing, a decision-directed
//! Wiener filter, harmonic-regeneration noise reduction (HRNR), and the
//! stage chain used as the baseline enhancer for directed-reference training.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Complex short-time spectra (frames x bins, bins = frame_len/2 + 1).
#[derive(Debug, Clone)]
pub struct StftFrames {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
    /// Length of the analyzed signal; istft returns exactly this many samples.
    pub original_len: usize,
}

impl StftFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }
}

/// Square root of the periodic Hann window; used for both analysis and
/// synthesis so the overlap-added squared window sums to one at 50% overlap.
fn sqrt_hann(frame_len: usize) -> Vec<f64> {
    (0..frame_len)
        .map(|n| {
            let h = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos();
            h.sqrt()
        })
        .collect()
}

/// STFT with sqrt-Hann analysis window. The signal is padded with `hop`
/// leading zeros and enough trailing zeros that every real sample receives
/// unit overlap-add weight, making istft(stft(w)) exact to FFT rounding.
pub fn stft(w: &Waveform, frame_len: usize, hop: usize) -> Result<StftFrames> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::usage("stft: frame_len and hop must be positive"));
    }
    if hop > frame_len {
        return Err(Error::usage(format!(
            "stft: hop {hop} larger than frame {frame_len}"
        )));
    }
    if w.is_empty() {
        return Err(Error::data("stft: empty waveform"));
    }
    let len = w.len();
    let n_frames = len.div_ceil(hop) + 1;
    let padded_len = (n_frames - 1) * hop + frame_len;
    let mut padded = vec![0.0f64; padded_len];
    padded[hop..hop + len].copy_from_slice(&w.samples);

    let window = sqrt_hann(frame_len);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(frame_len);
    let n_bins = frame_len / 2 + 1;

    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..frame_len {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..n_bins].to_vec());
    }
    Ok(StftFrames {
        frames,
        frame_len,
        hop,
        sample_rate_hz: w.sample_rate_hz,
        original_len: len,
    })
}

/// Inverse STFT: per-frame inverse FFT (spectra are extended by conjugate
/// symmetry), sqrt-Hann synthesis window, overlap-add, then removal of the
/// padding introduced by [`stft`].
pub fn istft(s: &StftFrames) -> Result<Waveform> {
    let frame_len = s.frame_len;
    let n_bins = frame_len / 2 + 1;
    if s.frames.is_empty() {
        return Err(Error::data("istft: no frames"));
    }
    for (t, f) in s.frames.iter().enumerate() {
        if f.len() != n_bins {
            return Err(Error::data(format!(
                "istft: frame {t} has {} bins, expected {n_bins}",
                f.len()
            )));
        }
    }
    let window = sqrt_hann(frame_len);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(frame_len);

    let padded_len = (s.frames.len() - 1) * s.hop + frame_len;
    let mut out = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    for (t, spec) in s.frames.iter().enumerate() {
        buf[..n_bins].copy_from_slice(spec);
        for k in n_bins..frame_len {
            buf[k] = spec[frame_len - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * s.hop;
        let scale = 1.0 / frame_len as f64;
        for i in 0..frame_len {
            out[start + i] += buf[i].re * scale * window[i];
        }
    }
    let start = s.hop;
    let end = start + s.original_len;
    if end > out.len() {
        return Err(Error::data("istft: frames too few for original length"));
    }
    Ok(Waveform::new(
        out[start..end].to_vec(),
        s.sample_rate_hz,
    ))
}

/// Decision-directed Wiener filter parameters.
#[derive(Debug, Clone)]
pub struct WienerParams {
    pub frame_len: usize,
    pub hop: usize,
    /// Decision-directed smoothing of the a-priori SNR estimate.
    pub alpha_dd: f64,
    /// Gain floor in dB (amplitude).
    pub gmin_db: f64,
    /// Frames used for the initial noise PSD estimate.
    pub noise_init_frames: usize,
    /// Recursive averaging factor for noise updates in non-speech frames.
    pub noise_update_beta: f64,
    /// A frame counts as non-speech when its mean posteriori SNR is below
    /// this threshold (dB); only such frames update the noise estimate.
    pub vad_threshold_db: f64,
}

impl Default for WienerParams {
    fn default() -> Self {
        WienerParams {
            frame_len: 512,
            hop: 256,
            alpha_dd: 0.98,
            gmin_db: -18.0,
            noise_update_beta: 0.98,
            noise_init_frames: 6,
            vad_threshold_db: 3.0,
        }
    }
}

/// Everything the Wiener pass produces, kept for the HRNR second step.
struct WienerPass {
    noisy: StftFrames,
    /// Filtered spectra (gain applied to the noisy spectrum).
    s1: Vec<Vec<Complex<f64>>>,
    /// Per-frame snapshot of the evolving noise PSD estimate.
    noise_psd: Vec<Vec<f64>>,
}

const PSD_FLOOR: f64 = 1e-20;

fn wiener_pass(w: &Waveform, p: &WienerParams) -> Result<WienerPass> {
    let noisy = stft(w, p.frame_len, p.hop)?;
    let n_frames = noisy.n_frames();
    let n_bins = noisy.n_bins();
    if n_frames < p.noise_init_frames.max(10) {
        return Err(Error::data(format!(
            "wiener: {} frames is too short for noise estimation (need >= {})",
            n_frames,
            p.noise_init_frames.max(10)
        )));
    }
    let gmin = 10f64.powf(p.gmin_db / 20.0);
    let vad_ratio = 10f64.powf(p.vad_threshold_db / 10.0);

    let mut noise: Vec<f64> = vec![0.0; n_bins];
    for t in 0..p.noise_init_frames {
        for k in 0..n_bins {
            noise[k] += noisy.frames[t][k].norm_sqr();
        }
    }
    for v in noise.iter_mut() {
        *v = (*v / p.noise_init_frames as f64).max(PSD_FLOOR);
    }

    let mut s1 = Vec::with_capacity(n_frames);
    let mut noise_psd = Vec::with_capacity(n_frames);
    let mut prev_s1_power = vec![0.0f64; n_bins];
    for t in 0..n_frames {
        let frame = &noisy.frames[t];
        let mut gamma_sum = 0.0;
        let mut out = Vec::with_capacity(n_bins);
        let mut cur_power = vec![0.0f64; n_bins];
        for k in 0..n_bins {
            let px = frame[k].norm_sqr();
            let gamma = px / noise[k];
            gamma_sum += gamma;
            let xi = p.alpha_dd * prev_s1_power[k] / noise[k]
                + (1.0 - p.alpha_dd) * (gamma - 1.0).max(0.0);
            let g = (xi / (1.0 + xi)).max(gmin);
            let v = frame[k] * g;
            cur_power[k] = v.norm_sqr();
            out.push(v);
        }
        // Recursive noise tracking, gated by a posteriori-SNR speech test.
        if gamma_sum / (n_bins as f64) < vad_ratio {
            for k in 0..n_bins {
                noise[k] = (p.noise_update_beta * noise[k]
                    + (1.0 - p.noise_update_beta) * frame[k].norm_sqr())
                .max(PSD_FLOOR);
            }
        }
        noise_psd.push(noise.clone());
        prev_s1_power = cur_power;
        s1.push(out);
    }
    Ok(WienerPass {
        noisy,
        s1,
        noise_psd,
    })
}

/// Single-channel noise suppression: per-bin Wiener gain xi/(1+xi) with a
/// decision-directed a-priori SNR estimate, an initial noise PSD taken from
/// the first frames, recursive noise tracking in non-speech frames, and a
/// gain floor.
pub fn wiener_enhance(w: &Waveform, p: &WienerParams) -> Result<Waveform> {
    let pass = wiener_pass(w, p)?;
    let frames = StftFrames {
        frames: pass.s1,
        frame_len: pass.noisy.frame_len,
        hop: pass.noisy.hop,
        sample_rate_hz: pass.noisy.sample_rate_hz,
        original_len: pass.noisy.original_len,
    };
    istft(&frames)
}

/// HRNR parameters: the embedded Wiener first step plus the blend weight
/// between the first-step spectrum and the harmonic-restored spectrum when
/// re-estimating the SNR.
#[derive(Debug, Clone)]
pub struct HrnrParams {
    pub wiener: WienerParams,
    pub rho: f64,
}

impl Default for HrnrParams {
    fn default() -> Self {
        HrnrParams {
            wiener: WienerParams::default(),
            rho: 0.5,
        }
    }
}

/// Two-step harmonic regeneration noise reduction: a Wiener pass, then
/// half-wave rectification of its time-domain output to regenerate harmonic
/// energy, a refined SNR estimate blending both spectra, and a final gain
/// applied to the original noisy spectrum.
pub fn hrnr_enhance(w: &Waveform, p: &HrnrParams) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&p.rho) {
        return Err(Error::usage(format!("hrnr: rho must be in [0,1], got {}", p.rho)));
    }
    let pass = wiener_pass(w, &p.wiener)?;
    let s1_frames = StftFrames {
        frames: pass.s1.clone(),
        frame_len: pass.noisy.frame_len,
        hop: pass.noisy.hop,
        sample_rate_hz: pass.noisy.sample_rate_hz,
        original_len: pass.noisy.original_len,
    };
    let s1_time = istft(&s1_frames)?;
    let harmo = Waveform::new(
        s1_time.samples.iter().map(|&s| s.max(0.0)).collect(),
        s1_time.sample_rate_hz,
    );
    let sh = stft(&harmo, p.wiener.frame_len, p.wiener.hop)?;

    let gmin = 10f64.powf(p.wiener.gmin_db / 20.0);
    let n_bins = pass.noisy.n_bins();
    let mut out_frames = Vec::with_capacity(pass.noisy.n_frames());
    for t in 0..pass.noisy.n_frames() {
        let mut out = Vec::with_capacity(n_bins);
        for k in 0..n_bins {
            let p1 = pass.s1[t][k].norm_sqr();
            let ph = sh.frames[t][k].norm_sqr();
            let xi2 = (p.rho * p1 + (1.0 - p.rho) * ph) / pass.noise_psd[t][k];
            let g = (xi2 / (1.0 + xi2)).max(gmin);
            out.push(pass.noisy.frames[t][k] * g);
        }
        out_frames.push(out);
    }
    let frames = StftFrames {
        frames: out_frames,
        frame_len: pass.noisy.frame_len,
        hop: pass.noisy.hop,
        sample_rate_hz: pass.noisy.sample_rate_hz,
        original_len: pass.noisy.original_len,
    };
    istft(&frames)
}

/// One stage of the pre-enhancement chain.
#[derive(Debug, Clone)]
pub enum Stage {
    Wiener(WienerParams),
    Hrnr(HrnrParams),
}

/// Ordered list of enhancement stages applied back to back.
#[derive(Debug, Clone)]
pub struct EnhancerChain {
    pub stages: Vec<Stage>,
}

impl EnhancerChain {
    /// Parse a chain spec such as "wiener,hrnr", attaching the given
    /// parameter sets to each named stage.
    pub fn parse(spec: &str, wiener: &WienerParams, hrnr: &HrnrParams) -> Result<Self> {
        let mut stages = Vec::new();
        for name in spec.split(',') {
            match name.trim() {
                "wiener" => stages.push(Stage::Wiener(wiener.clone())),
                "hrnr" => stages.push(Stage::Hrnr(hrnr.clone())),
                "" => {}
                other => {
                    return Err(Error::usage(format!(
                        "unknown enhancement stage '{other}' (expected wiener or hrnr)"
                    )))
                }
            }
        }
        if stages.is_empty() {
            return Err(Error::usage("enhancement chain is empty"));
        }
        Ok(EnhancerChain { stages })
    }
}

/// Apply every stage of the chain in order. Length-preserving and
/// deterministic.
pub fn pre_enhance(w: &Waveform, chain: &EnhancerChain) -> Result<Waveform> {
    if chain.stages.is_empty() {
        return Err(Error::usage("pre_enhance: empty chain"));
    }
    let mut cur = w.clone();
    for stage in &chain.stages {
        cur = match stage {
            Stage::Wiener(p) => wiener_enhance(&cur, p)?,
            Stage::Hrnr(p) => hrnr_enhance(&cur, p)?,
        };
        if cur.len() != w.len() {
            return Err(Error::numeric(format!(
                "pre_enhance: stage changed length {} -> {}",
                w.len(),
                cur.len()
            )));
        }
    }
    Ok(cur)
}
