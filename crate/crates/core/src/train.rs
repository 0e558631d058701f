//! Adversarial training: least-squares objectives with an L1 term, K
//! discriminator then J generator iterations per step, the directed-reference
//! warmup schedule, per-epoch checkpointing with bit-exact resume, and the
//! chunked inference path.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::dataset::{self, ChunkMode};
use crate::error::{Error, Result};
use crate::model::{
    build_discriminator, build_generator, capture_vbn_stats, discriminator_forward,
    generator_forward, sample_latent, SeganConfig, VbnStats,
};
use crate::nn::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointData, Graph, ParamStore, Rmsprop,
    Scalar, Tensor,
};

pub const TARGET_RATE_HZ: u32 = 16_000;

/// Standard chunk-cache file names inside a prepared dataset directory.
pub const CLEAN_CACHE: &str = "clean.chunks";
pub const DEGRADED_CACHE: &str = "degraded.chunks";
pub const PRE_ENHANCED_CACHE: &str = "pre_enhanced.chunks";

pub const LOSS_LOG: &str = "losses.csv";
pub const LOSS_LOG_HEADER: &str = "epoch,step,d_loss,g_adv,g_l1,ref_pre_enhanced_frac";

/// Deterministic seed for a named stream (epoch index, builder id, …) derived
/// from the base seed; splitmix64 finalizer so adjacent streams decorrelate.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SEED_STREAM_G_INIT: u64 = 1;
const SEED_STREAM_D_INIT: u64 = 2;
const SEED_STREAM_EPOCH_BASE: u64 = 1000;

/// The reference-selection knobs of the generator update schedule.
#[derive(Debug, Clone, Copy)]
pub struct TrainSchedule {
    pub j_iters: usize,
    pub p_j: f64,
    pub warmup_epochs: usize,
    pub d_iters_k: usize,
}

impl From<&SeganConfig> for TrainSchedule {
    fn from(cfg: &SeganConfig) -> Self {
        TrainSchedule {
            j_iters: cfg.j_iters,
            p_j: cfg.p_j,
            warmup_epochs: cfg.warmup_epochs,
            d_iters_k: cfg.d_iters_k,
        }
    }
}

/// Which waveform the i-th generator iteration regresses toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefSource {
    Clean,
    PreEnhanced,
}

/// Deterministic reference selection: during warmup, iteration i of J is
/// directed at the pre-enhanced baseline iff `1 − i/J ≤ P_J`; past warmup
/// every iteration regresses to clean speech.
pub fn select_reference(i: usize, epoch: usize, sched: &TrainSchedule) -> Result<RefSource> {
    if i >= sched.j_iters {
        return Err(Error::usage(format!(
            "generator iteration {i} out of range (J = {})",
            sched.j_iters
        )));
    }
    let directed = epoch < sched.warmup_epochs
        && 1.0 - i as f64 / sched.j_iters as f64 <= sched.p_j;
    Ok(if directed {
        RefSource::PreEnhanced
    } else {
        RefSource::Clean
    })
}

/// The prose reading of the same schedule: during warmup each iteration picks
/// the pre-enhanced reference with probability P_J.
pub fn select_reference_stochastic<R: Rng>(
    i: usize,
    epoch: usize,
    sched: &TrainSchedule,
    rng: &mut R,
) -> Result<RefSource> {
    if i >= sched.j_iters {
        return Err(Error::usage(format!(
            "generator iteration {i} out of range (J = {})",
            sched.j_iters
        )));
    }
    Ok(if epoch < sched.warmup_epochs && rng.gen::<f64>() < sched.p_j {
        RefSource::PreEnhanced
    } else {
        RefSource::Clean
    })
}

/// Discriminator objective: ½·mean((d_real − 1)²) + ½·mean(d_fake²).
pub fn d_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let mr: f64 = d_real.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / d_real.len() as f64;
    let mf: f64 = d_fake.iter().map(|f| f * f).sum::<f64>() / d_fake.len() as f64;
    0.5 * mr + 0.5 * mf
}

/// Generator objective: mean((d_fake − 1)²) + λ·mean|generated − reference|.
pub fn g_loss(d_fake: &[f64], generated: &[f64], reference: &[f64], lambda: f64) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(Error::data(format!(
            "generated/reference length mismatch: {} vs {}",
            generated.len(),
            reference.len()
        )));
    }
    let adv: f64 = d_fake.iter().map(|f| (f - 1.0) * (f - 1.0)).sum::<f64>() / d_fake.len() as f64;
    let l1: f64 = generated
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / generated.len() as f64;
    Ok(adv + lambda * l1)
}

/// Chunked training triples, all the same window length: clean target,
/// degraded input, and the precomputed pre-enhanced baseline of the degraded
/// input.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub clean: Vec<Vec<f32>>,
    pub degraded: Vec<Vec<f32>>,
    pub pre_enhanced: Vec<Vec<f32>>,
    pub window_len: usize,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        let n = self.clean.len();
        if n == 0 {
            return Err(Error::data("training set has no chunks"));
        }
        if self.degraded.len() != n || self.pre_enhanced.len() != n {
            return Err(Error::data(format!(
                "chunk streams disagree: {} clean, {} degraded, {} pre-enhanced",
                n,
                self.degraded.len(),
                self.pre_enhanced.len()
            )));
        }
        for stream in [&self.clean, &self.degraded, &self.pre_enhanced] {
            if stream.iter().any(|c| c.len() != self.window_len) {
                return Err(Error::data("chunk length differs from window length"));
            }
        }
        Ok(())
    }

    /// Load the three standard caches from a prepared dataset directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut streams = Vec::with_capacity(3);
        let mut window = None;
        for name in [CLEAN_CACHE, DEGRADED_CACHE, PRE_ENHANCED_CACHE] {
            let (cache_window, _hop, chunks) = dataset::read_chunk_cache(dir.join(name))?;
            match window {
                None => window = Some(cache_window),
                Some(w) if w != cache_window => {
                    return Err(Error::data(format!(
                        "cache {name} window {cache_window} differs from {w}"
                    )));
                }
                _ => {}
            }
            streams.push(chunks);
        }
        let pre_enhanced = streams.pop().unwrap();
        let degraded = streams.pop().unwrap();
        let clean = streams.pop().unwrap();
        let data = TrainData {
            clean,
            degraded,
            pre_enhanced,
            window_len: window.unwrap_or(0),
        };
        data.validate()?;
        Ok(data)
    }
}

/// Everything that evolves during training. Serializes to one checkpoint and
/// restores bit-exactly.
pub struct TrainState {
    pub g_params: ParamStore<f32>,
    pub d_params: ParamStore<f32>,
    pub vbn: VbnStats<f32>,
    pub opt_g: Rmsprop<f32>,
    pub opt_d: Rmsprop<f32>,
    /// Next epoch to run.
    pub epoch: u64,
    pub global_step: u64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    /// Fraction of this step's generator iterations that regressed toward the
    /// pre-enhanced baseline.
    pub ref_pre_enhanced_frac: f64,
}

/// Gather chunk rows into a `[1, batch, window]` activation tensor.
fn batch_tensor(chunks: &[Vec<f32>], idx: &[usize], window: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * window);
    for &i in idx {
        data.extend_from_slice(&chunks[i]);
    }
    Tensor {
        shape: vec![1, idx.len(), window],
        data,
    }
}

/// Sum gradients by parameter name in first-appearance order. The
/// discriminator is traced twice per loss (real and fake pass), so its leaves
/// appear twice.
fn collect_grads<'g>(
    g: &'g Graph<f32>,
    params: &[(String, crate::nn::NodeId)],
) -> Vec<(String, Vec<f32>)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: std::collections::HashMap<&str, Vec<f32>> = std::collections::HashMap::new();
    for (name, id) in params {
        let Some(grad) = g.grad(*id) else { continue };
        match sums.get_mut(name.as_str()) {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(grad) {
                    *a += v;
                }
            }
            None => {
                order.push(name.clone());
                sums.insert(name.as_str(), grad.to_vec());
            }
        }
    }
    order
        .into_iter()
        .map(|name| {
            let v = sums.remove(name.as_str()).expect("name recorded above");
            (name, v)
        })
        .collect()
}

/// One optimization step on one batch: K discriminator updates (fresh fake
/// per update), then J generator updates, each regressing toward the
/// reference the schedule picks for that iteration.
pub fn train_step<R: Rng>(
    state: &mut TrainState,
    data: &TrainData,
    batch: &[usize],
    epoch: usize,
    cfg: &SeganConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let w = data.window_len;
    let x_clean = batch_tensor(&data.clean, batch, w);
    let x_degraded = batch_tensor(&data.degraded, batch, w);
    let x_pre = batch_tensor(&data.pre_enhanced, batch, w);
    let sched = TrainSchedule::from(cfg);
    let context = |e: Error| {
        Error::numeric(format!(
            "{e} (epoch {epoch}, global step {})",
            state.global_step
        ))
    };

    // Discriminator iterations: real pairs toward 1, fresh fakes toward 0.
    let mut d_total = 0.0;
    for _ in 0..cfg.d_iters_k {
        let mut g = Graph::new();
        let xc = g.leaf(x_clean.clone(), false);
        let xd = g.leaf(x_degraded.clone(), false);
        let z = g.leaf(sample_latent(cfg, batch.len(), rng), false);
        let fake = generator_forward(&mut g, &state.g_params, cfg, xd, z, false)
            .map_err(context)?
            .output;
        let real_trace =
            discriminator_forward(&mut g, &state.d_params, &state.vbn, cfg, xc, xd, true)
                .map_err(context)?;
        let fake_trace =
            discriminator_forward(&mut g, &state.d_params, &state.vbn, cfg, fake, xd, true)
                .map_err(context)?;
        let real_term = g.mse_const(real_trace.output, 1.0).map_err(context)?;
        let fake_term = g.mse_const(fake_trace.output, 0.0).map_err(context)?;
        let half_real = g.scale(real_term, 0.5).map_err(context)?;
        let half_fake = g.scale(fake_term, 0.5).map_err(context)?;
        let loss = g.add(half_real, half_fake).map_err(context)?;
        g.backward(loss).map_err(context)?;
        let mut all = real_trace.params;
        all.extend(fake_trace.params);
        let grads = collect_grads(&g, &all);
        let grad_refs: Vec<(&str, &[f32])> = grads
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_slice()))
            .collect();
        state
            .opt_d
            .step(&mut state.d_params, &grad_refs)
            .map_err(context)?;
        d_total += g.value(loss).data[0] as f64;
    }

    // Generator iterations.
    let mut g_adv_total = 0.0;
    let mut g_l1_total = 0.0;
    let mut pre_count = 0usize;
    for i in 0..cfg.j_iters {
        let source = if cfg.stochastic_schedule {
            select_reference_stochastic(i, epoch, &sched, rng)?
        } else {
            select_reference(i, epoch, &sched)?
        };
        let mut g = Graph::new();
        let xd = g.leaf(x_degraded.clone(), false);
        let reference = g.leaf(
            match source {
                RefSource::Clean => x_clean.clone(),
                RefSource::PreEnhanced => {
                    pre_count += 1;
                    x_pre.clone()
                }
            },
            false,
        );
        let z = g.leaf(sample_latent(cfg, batch.len(), rng), false);
        let gen_trace =
            generator_forward(&mut g, &state.g_params, cfg, xd, z, true).map_err(context)?;
        let d_trace = discriminator_forward(
            &mut g,
            &state.d_params,
            &state.vbn,
            cfg,
            gen_trace.output,
            xd,
            false,
        )
        .map_err(context)?;
        let adv = g.mse_const(d_trace.output, 1.0).map_err(context)?;
        let l1 = g.l1_mean(gen_trace.output, reference).map_err(context)?;
        let weighted = g.scale(l1, cfg.lambda_l1).map_err(context)?;
        let loss = g.add(adv, weighted).map_err(context)?;
        g.backward(loss).map_err(context)?;
        let grads = collect_grads(&g, &gen_trace.params);
        let grad_refs: Vec<(&str, &[f32])> = grads
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_slice()))
            .collect();
        state
            .opt_g
            .step(&mut state.g_params, &grad_refs)
            .map_err(context)?;
        g_adv_total += g.value(adv).data[0] as f64;
        g_l1_total += g.value(l1).data[0] as f64;
    }

    state.global_step += 1;
    Ok(StepLosses {
        d_loss: d_total / cfg.d_iters_k as f64,
        g_adv: g_adv_total / cfg.j_iters as f64,
        g_l1: g_l1_total / cfg.j_iters as f64,
        ref_pre_enhanced_frac: pre_count as f64 / cfg.j_iters as f64,
    })
}

fn vbn_to_tensors(vbn: &VbnStats<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::with_capacity(vbn.per_layer.len() * 2 + 1);
    for (i, (mean, var)) in vbn.per_layer.iter().enumerate() {
        out.push((
            format!("vbn.enc{i}.mean"),
            Tensor {
                shape: vec![mean.len()],
                data: mean.clone(),
            },
        ));
        out.push((
            format!("vbn.enc{i}.var"),
            Tensor {
                shape: vec![var.len()],
                data: var.clone(),
            },
        ));
    }
    out.push((
        "vbn.ref_batch".to_string(),
        Tensor {
            shape: vec![1],
            data: vec![vbn.ref_batch as f32],
        },
    ));
    out
}

fn state_to_checkpoint(state: &TrainState) -> Checkpoint<f32> {
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, t) in state.g_params.iter() {
        tensors.push((name.to_string(), t.clone()));
    }
    for (name, t) in state.d_params.iter() {
        tensors.push((name.to_string(), t.clone()));
    }
    tensors.extend(vbn_to_tensors(&state.vbn));
    for (name, v) in state.opt_g.export() {
        let len = v.len();
        tensors.push((
            format!("opt_g.{name}"),
            Tensor {
                shape: vec![len],
                data: v,
            },
        ));
    }
    for (name, v) in state.opt_d.export() {
        let len = v.len();
        tensors.push((
            format!("opt_d.{name}"),
            Tensor {
                shape: vec![len],
                data: v,
            },
        ));
    }
    Checkpoint {
        epoch: state.epoch,
        global_step: state.global_step,
        base_seed: state.base_seed,
        tensors,
    }
}

/// Pull every tensor under `prefix.` out of a checkpoint into a store, with
/// the prefix retained in the names.
pub fn params_from_checkpoint<S: Scalar>(
    ck: &Checkpoint<S>,
    prefix: &str,
) -> Result<ParamStore<S>> {
    let mut p = ParamStore::new();
    let want = format!("{prefix}.");
    for (name, t) in &ck.tensors {
        if name.starts_with(&want) {
            p.insert(name.clone(), t.clone())?;
        }
    }
    if p.is_empty() {
        return Err(Error::data(format!(
            "checkpoint holds no {prefix}.* tensors"
        )));
    }
    Ok(p)
}

fn vbn_from_checkpoint(ck: &Checkpoint<f32>, cfg: &SeganConfig) -> Result<VbnStats<f32>> {
    let mut per_layer = Vec::with_capacity(cfg.n_layers());
    for i in 0..cfg.n_layers() {
        let mean = ck
            .tensor(&format!("vbn.enc{i}.mean"))
            .ok_or_else(|| Error::data(format!("checkpoint missing vbn.enc{i}.mean")))?;
        let var = ck
            .tensor(&format!("vbn.enc{i}.var"))
            .ok_or_else(|| Error::data(format!("checkpoint missing vbn.enc{i}.var")))?;
        per_layer.push((mean.data.clone(), var.data.clone()));
    }
    let ref_batch = ck
        .tensor("vbn.ref_batch")
        .map(|t| t.data[0] as usize)
        .ok_or_else(|| Error::data("checkpoint missing vbn.ref_batch"))?;
    Ok(VbnStats {
        per_layer,
        ref_batch,
    })
}

fn state_from_checkpoint(ck: Checkpoint<f32>, cfg: &SeganConfig) -> Result<TrainState> {
    // Build stores of the right shapes, then overwrite every value.
    let mut g_params = build_generator::<f32>(cfg, 0)?;
    let mut d_params = build_discriminator::<f32>(cfg, 0)?;
    for (name, t) in &ck.tensors {
        if name.starts_with("g.") {
            g_params.set(name, t.clone())?;
        } else if name.starts_with("d.") {
            d_params.set(name, t.clone())?;
        }
    }
    let names_g: Vec<String> = g_params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names_g {
        if ck.tensor(&n).is_none() {
            return Err(Error::data(format!("checkpoint missing parameter {n}")));
        }
    }
    let names_d: Vec<String> = d_params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names_d {
        if ck.tensor(&n).is_none() {
            return Err(Error::data(format!("checkpoint missing parameter {n}")));
        }
    }
    let vbn = vbn_from_checkpoint(&ck, cfg)?;
    let mut opt_g = Rmsprop::new(cfg.learning_rate, 0.9, 1e-8);
    let mut opt_d = Rmsprop::new(cfg.learning_rate, 0.9, 1e-8);
    let mut acc_g = Vec::new();
    let mut acc_d = Vec::new();
    for (name, t) in &ck.tensors {
        if let Some(p) = name.strip_prefix("opt_g.") {
            acc_g.push((p.to_string(), t.data.clone()));
        } else if let Some(p) = name.strip_prefix("opt_d.") {
            acc_d.push((p.to_string(), t.data.clone()));
        }
    }
    opt_g.restore(acc_g);
    opt_d.restore(acc_d);
    Ok(TrainState {
        g_params,
        d_params,
        vbn,
        opt_g,
        opt_d,
        epoch: ck.epoch,
        global_step: ck.global_step,
        base_seed: ck.base_seed,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub base_seed: u64,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many global steps (for bounded test runs); checkpoints
    /// are still written only at epoch boundaries.
    pub stop_after_steps: Option<u64>,
}

pub struct TrainSummary {
    pub state: TrainState,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.wrckpt"))
}

/// Run (or resume) training to `cfg.total_epochs`. Writes a checkpoint after
/// every epoch and appends one loss-log row per step.
pub fn train(data: &TrainData, cfg: &SeganConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    data.validate()?;
    if data.window_len != cfg.window_len {
        return Err(Error::data(format!(
            "dataset chunks are {} samples, config wants {}",
            data.window_len, cfg.window_len
        )));
    }
    let n_chunks = data.clean.len();
    if n_chunks < cfg.batch_size {
        return Err(Error::data(format!(
            "{} chunks cannot fill one batch of {}",
            n_chunks, cfg.batch_size
        )));
    }
    std::fs::create_dir_all(&opts.out_dir)?;

    let mut state = match &opts.resume_from {
        Some(path) => match read_checkpoint(path)? {
            CheckpointData::F32(ck) => {
                log::info!(
                    "resuming from {} at epoch {}, step {}",
                    path.display(),
                    ck.epoch,
                    ck.global_step
                );
                state_from_checkpoint(ck, cfg)?
            }
            CheckpointData::F64(_) => {
                return Err(Error::unsupported(
                    "cannot resume training from a double-precision checkpoint",
                ));
            }
        },
        None => {
            let g_params = build_generator(cfg, derive_seed(opts.base_seed, SEED_STREAM_G_INIT))?;
            let d_params =
                build_discriminator(cfg, derive_seed(opts.base_seed, SEED_STREAM_D_INIT))?;
            // Reference statistics come from the first chunks in file order,
            // captured once against the initial parameters and frozen.
            let ref_idx: Vec<usize> = (0..cfg.batch_size.min(n_chunks)).collect();
            let cand = batch_tensor(&data.clean, &ref_idx, data.window_len);
            let cond = batch_tensor(&data.degraded, &ref_idx, data.window_len);
            let vbn = capture_vbn_stats(&d_params, cfg, &cand, &cond)?;
            TrainState {
                g_params,
                d_params,
                vbn,
                opt_g: Rmsprop::new(cfg.learning_rate, 0.9, 1e-8),
                opt_d: Rmsprop::new(cfg.learning_rate, 0.9, 1e-8),
                epoch: 0,
                global_step: 0,
                base_seed: opts.base_seed,
            }
        }
    };

    let log_path = opts.out_dir.join(LOSS_LOG);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if log_file.metadata()?.len() == 0 {
        writeln!(log_file, "{LOSS_LOG_HEADER}")?;
    }

    let steps_per_epoch = n_chunks / cfg.batch_size;
    let mut last_checkpoint = None;
    let mut stopped = false;
    while (state.epoch as usize) < cfg.total_epochs && !stopped {
        let epoch = state.epoch as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            state.base_seed,
            SEED_STREAM_EPOCH_BASE + epoch as u64,
        ));
        let mut order: Vec<usize> = (0..n_chunks).collect();
        // Fisher–Yates over chunk indices; chunks from one utterance may
        // share a batch.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_d = 0.0;
        let mut epoch_g = 0.0;
        for step in 0..steps_per_epoch {
            let batch = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let losses = train_step(&mut state, data, batch, epoch, cfg, &mut rng)?;
            writeln!(
                log_file,
                "{},{},{},{},{},{}",
                epoch,
                state.global_step,
                losses.d_loss,
                losses.g_adv,
                losses.g_l1,
                losses.ref_pre_enhanced_frac
            )?;
            epoch_d += losses.d_loss;
            epoch_g += losses.g_adv + cfg.lambda_l1 * losses.g_l1;
            if opts
                .stop_after_steps
                .is_some_and(|cap| state.global_step >= cap)
            {
                stopped = true;
                break;
            }
        }
        log_file.flush()?;
        if !stopped {
            state.epoch += 1;
            let path = checkpoint_path(&opts.out_dir, state.epoch);
            write_checkpoint(&path, &state_to_checkpoint(&state))?;
            log::info!(
                "epoch {} done: mean d_loss {:.4}, mean g_loss {:.4}; checkpoint {}",
                epoch,
                epoch_d / steps_per_epoch as f64,
                epoch_g / steps_per_epoch as f64,
                path.display()
            );
            last_checkpoint = Some(path);
        }
    }
    Ok(TrainSummary {
        state,
        last_checkpoint,
    })
}

/// Enhance one 16 kHz waveform: split into window-sized tiles, run the
/// generator on all tiles in a single batch, and stitch the outputs back to
/// the input length.
pub fn enhance<S: Scalar>(
    w: &Waveform,
    g_params: &ParamStore<S>,
    cfg: &SeganConfig,
    seed: u64,
) -> Result<Waveform> {
    if w.sample_rate_hz != TARGET_RATE_HZ {
        return Err(Error::data(format!(
            "enhancement expects {TARGET_RATE_HZ} Hz input, got {} Hz",
            w.sample_rate_hz
        )));
    }
    let set = dataset::chunk_inference(w, cfg.window_len)?;
    let n = set.chunks.len();
    let mut data = Vec::with_capacity(n * cfg.window_len);
    for c in &set.chunks {
        data.extend(c.iter().map(|&v| S::from_f64(v)));
    }
    let x = Tensor {
        shape: vec![1, n, cfg.window_len],
        data,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = if cfg.fixed_latent {
        // One latent draw shared by every tile.
        let single: Tensor<S> = sample_latent(cfg, 1, &mut rng);
        let blen = cfg.bottleneck_len();
        let mut rep = Tensor::zeros(vec![cfg.latent_channels, n, blen]);
        for c in 0..cfg.latent_channels {
            for b in 0..n {
                let src = &single.data[c * blen..(c + 1) * blen];
                rep.data[c * n * blen + b * blen..c * n * blen + (b + 1) * blen]
                    .copy_from_slice(src);
            }
        }
        rep
    } else {
        sample_latent(cfg, n, &mut rng)
    };
    let mut g = Graph::new();
    let xid = g.leaf(x, false);
    let zid = g.leaf(z, false);
    let trace = generator_forward(&mut g, g_params, cfg, xid, zid, false)?;
    let out = g.value(trace.output);
    let mut enhanced_chunks = Vec::with_capacity(n);
    for b in 0..n {
        enhanced_chunks.push(
            out.data[b * cfg.window_len..(b + 1) * cfg.window_len]
                .iter()
                .map(|&v| v.to_f64())
                .collect::<Vec<f64>>(),
        );
    }
    let out_set = crate::dataset::ChunkSet {
        chunks: enhanced_chunks,
        window_len: set.window_len,
        hop_len: set.hop_len,
        original_len: set.original_len,
        sample_rate_hz: set.sample_rate_hz,
        mode: ChunkMode::InferenceSequential,
        prepad_len: set.prepad_len,
    };
    dataset::stitch(&out_set)
}

/// Convenience for callers holding a freshly loaded checkpoint of unknown
/// element type.
pub fn enhance_with_checkpoint(
    w: &Waveform,
    ck: &CheckpointData,
    cfg: &SeganConfig,
    seed: u64,
) -> Result<Waveform> {
    match ck {
        CheckpointData::F32(c) => enhance(w, &params_from_checkpoint::<f32>(c, "g")?, cfg, seed),
        CheckpointData::F64(c) => enhance(w, &params_from_checkpoint::<f64>(c, "g")?, cfg, seed),
    }
}

/// Render a compact, aligned textual tail of a loss log for humans; the CSV
/// itself stays the machine interface.
pub fn summarize_losses(rows: &[(u64, u64, StepLosses)]) -> String {
    let mut out = String::from("epoch    step    d_loss     g_adv      g_l1       pre_frac\n");
    for (epoch, step, l) in rows {
        let _ = writeln!(
            out,
            "{epoch:<8} {step:<7} {:<10.5} {:<10.5} {:<10.5} {:.2}",
            l.d_loss, l.g_adv, l.g_l1, l.ref_pre_enhanced_frac
        );
    }
    out
}
