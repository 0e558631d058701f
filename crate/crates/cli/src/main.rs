//! Subcommand front end for the enhancement pipeline: corpus preparation,
//! classical pre-enhancement, adversarial training, inference, and scoring.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (NaN/Inf abort).

mod config;
mod jobs;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use waverefine_core::audio::{read_wav, write_wav};
use waverefine_core::dataset::{
    chunk_training, prepare_pair, read_manifest, write_chunk_cache, PrepareOptions,
};
use waverefine_core::dsp::{pre_enhance, EnhancerChain, HrnrParams, WienerParams};
use waverefine_core::metrics::{evaluate_corpus, SystemSpec};
use waverefine_core::nn::read_checkpoint;
use waverefine_core::train::{
    enhance_with_checkpoint, train, TrainData, TrainOptions, CLEAN_CACHE, DEGRADED_CACHE,
    PRE_ENHANCED_CACHE,
};
use waverefine_core::{Error, Result};

use config::RunConfig;
use jobs::parallel_map;

const AFTER_HELP: &str = "Configuration is a flat `key = value` file (`#` comments). Precedence: \
built-in defaults < config file < --set KEY=VALUE < dedicated flags. The WR_SEED \
environment variable supplies the seed when no flag or file sets one.\n\
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.";

#[derive(Parser)]
#[command(
    name = "waverefine",
    version,
    about = "Speech enhancement: dataset preparation, classical pre-enhancement, \
             adversarial training, inference, and objective scoring",
    after_help = AFTER_HELP
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Example: --set batch_size=16
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// RNG seed; overrides the config file and WR_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Align, trim, resample, and chunk a paired corpus into training caches
    #[command(after_help = "Config keys read: window_len, hop_len, chain, manifest, cache_dir.\n\
        Writes clean.chunks, degraded.chunks, pre_enhanced.chunks and a prepare.hash \
        freshness stamp; reruns with unchanged inputs and configuration are no-ops.")]
    Prepare {
        /// Two-column tab-separated file: clean path, degraded path.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for the chunk caches.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Per-utterance worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Fail on the first unusable pair instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Run the classical enhancement chain over a directory of WAV files
    #[command(after_help = "Config keys read: chain.")]
    PreEnhance {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Per-file worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Adversarial training over prepared chunk caches
    #[command(after_help = "Config keys read: window_len, enc_channels, filter_width, stride, \
        latent_channels, d_alpha, residual_skip, lambda_l1, j_iters, p_j, warmup_epochs, \
        total_epochs, batch_size, learning_rate, d_iters_k, vbn_current_weight, \
        stochastic_schedule, fixed_latent, seed, cache_dir, checkpoint_dir.\n\
        Writes epoch_NNNN.wrckpt checkpoints and appends losses.csv in the checkpoint \
        directory. Training is serial over steps.")]
    Train {
        /// Directory holding the three chunk caches from `prepare`.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Resume from an epoch_NNNN.wrckpt file.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Stop after this many global steps (checkpoints still land on epoch
        /// boundaries only).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Enhance every 16 kHz WAV in a directory with a trained checkpoint
    #[command(after_help = "Config keys read: window_len, enc_channels, filter_width, stride, \
        latent_channels, residual_skip, fixed_latent, seed. The architecture keys must match \
        the checkpoint being loaded.")]
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Score system output directories against the manifest's clean references
    #[command(after_help = "Config keys read: manifest, report_dir.\n\
        Each system's outputs are looked up by the degraded file's name inside DIR; \
        per-system CSVs and an aligned comparison table land in the report directory.")]
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// System to score, as NAME=DIR; repeatable.
        #[arg(long, value_name = "NAME=DIR")]
        system: Vec<String>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
        /// Per-utterance worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the fully resolved configuration (parseable back as a file)
    #[command(after_help = "Prints every config key after applying the file, --set overrides, \
        --seed, and the WR_SEED fallback.")]
    PrintConfig,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successes; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 1,
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_set(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    cfg.apply_env_fallback()?;

    match cli.command {
        Cmd::Prepare {
            manifest,
            cache_dir,
            jobs,
            strict,
        } => cmd_prepare(&cfg, manifest, cache_dir, jobs, strict),
        Cmd::PreEnhance {
            input_dir,
            output_dir,
            jobs,
        } => cmd_pre_enhance(&cfg, &input_dir, &output_dir, jobs),
        Cmd::Train {
            cache_dir,
            checkpoint_dir,
            resume,
            max_steps,
        } => cmd_train(&cfg, cache_dir, checkpoint_dir, resume, max_steps),
        Cmd::Enhance {
            checkpoint,
            input_dir,
            output_dir,
        } => cmd_enhance(&cfg, &checkpoint, &input_dir, &output_dir),
        Cmd::Evaluate {
            manifest,
            system,
            report_dir,
            jobs,
        } => cmd_evaluate(&cfg, manifest, &system, report_dir, jobs),
        Cmd::PrintConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn require(
    flag: Option<PathBuf>,
    from_config: &Option<PathBuf>,
    what: &str,
    key: &str,
) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone()).ok_or_else(|| {
        Error::usage(format!("{what} needs --{} or the `{key}` config key", key.replace('_', "-")))
    })
}

fn parse_chain(cfg: &RunConfig) -> Result<EnhancerChain> {
    EnhancerChain::parse(&cfg.chain, &WienerParams::default(), &HrnrParams::default())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::data(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

fn cmd_prepare(
    cfg: &RunConfig,
    manifest: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    jobs: usize,
    strict: bool,
) -> Result<()> {
    let manifest = require(manifest, &cfg.manifest, "prepare", "manifest")?;
    let cache_dir = require(cache_dir, &cfg.cache_dir, "prepare", "cache_dir")?;
    let window = cfg.model.window_len;
    let hop = cfg.effective_hop();
    let chain = parse_chain(cfg)?;
    let pairs = read_manifest(&manifest)?;
    std::fs::create_dir_all(&cache_dir)?;

    // Freshness stamp over the configuration and every input byte: a rerun
    // with nothing changed is a no-op.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    fnv1a(&mut h, format!("w={window};h={hop};chain={}", cfg.chain).as_bytes());
    fnv1a(&mut h, &std::fs::read(&manifest)?);
    for (clean, degraded) in &pairs {
        for p in [clean, degraded] {
            fnv1a(&mut h, p.to_string_lossy().as_bytes());
            match std::fs::read(p) {
                Ok(bytes) => fnv1a(&mut h, &bytes),
                Err(_) => fnv1a(&mut h, b"<unreadable>"),
            }
        }
    }
    let stamp = format!("{h:016x}\n");
    let stamp_path = cache_dir.join("prepare.hash");
    let cache_paths = [CLEAN_CACHE, DEGRADED_CACHE, PRE_ENHANCED_CACHE].map(|n| cache_dir.join(n));
    if std::fs::read_to_string(&stamp_path).map(|s| s == stamp).unwrap_or(false)
        && cache_paths.iter().all(|p| p.is_file())
    {
        println!(
            "cache up to date ({} pairs, hash {h:016x}); nothing to do",
            pairs.len()
        );
        return Ok(());
    }

    let opts = PrepareOptions {
        window_len: window,
        ..PrepareOptions::default()
    };
    struct PairChunks {
        clean: Vec<Vec<f32>>,
        degraded: Vec<Vec<f32>>,
        pre: Vec<Vec<f32>>,
    }
    let results = parallel_map(&pairs, jobs, |_, (clean_path, degraded_path)| {
        let clean = read_wav(clean_path)?;
        let degraded = read_wav(degraded_path)?;
        let aligned = prepare_pair(&clean, &degraded, &opts)?;
        let pre = pre_enhance(&aligned.degraded, &chain)?;
        let to_f32 = |chunks: Vec<Vec<f64>>| -> Vec<Vec<f32>> {
            chunks
                .into_iter()
                .map(|c| c.into_iter().map(|v| v as f32).collect())
                .collect()
        };
        Ok::<PairChunks, Error>(PairChunks {
            clean: to_f32(chunk_training(&aligned.clean, window, hop)?.chunks),
            degraded: to_f32(chunk_training(&aligned.degraded, window, hop)?.chunks),
            pre: to_f32(chunk_training(&pre, window, hop)?.chunks),
        })
    });

    let mut clean_chunks = Vec::new();
    let mut degraded_chunks = Vec::new();
    let mut pre_chunks = Vec::new();
    let mut rejected = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut pc) => {
                clean_chunks.append(&mut pc.clean);
                degraded_chunks.append(&mut pc.degraded);
                pre_chunks.append(&mut pc.pre);
            }
            Err(e) => {
                let (clean, degraded) = &pairs[i];
                if strict {
                    return Err(Error::data(format!(
                        "pair {} ({} / {}): {e}",
                        i + 1,
                        clean.display(),
                        degraded.display()
                    )));
                }
                log::warn!(
                    "skipping pair {} ({} / {}): {e}",
                    i + 1,
                    clean.display(),
                    degraded.display()
                );
                rejected += 1;
            }
        }
    }
    if clean_chunks.is_empty() {
        return Err(Error::data("prepare: no usable pairs in the manifest"));
    }

    write_chunk_cache(&cache_paths[0], window, hop, &clean_chunks)?;
    write_chunk_cache(&cache_paths[1], window, hop, &degraded_chunks)?;
    write_chunk_cache(&cache_paths[2], window, hop, &pre_chunks)?;
    std::fs::write(&stamp_path, stamp)?;
    println!(
        "prepared {} pairs ({} rejected), {} chunks of {} samples (hop {}) -> {}",
        pairs.len() - rejected,
        rejected,
        clean_chunks.len(),
        window,
        hop,
        cache_dir.display()
    );
    Ok(())
}

fn cmd_pre_enhance(cfg: &RunConfig, input_dir: &Path, output_dir: &Path, jobs: usize) -> Result<()> {
    let chain = parse_chain(cfg)?;
    let files = wav_files(input_dir)?;
    std::fs::create_dir_all(output_dir)?;
    let results = parallel_map(&files, jobs, |_, path| {
        let w = read_wav(path)?;
        let out = pre_enhance(&w, &chain)?;
        let name = path.file_name().expect("listed files have names");
        write_wav(&out, output_dir.join(name))
    });
    for (path, r) in files.iter().zip(results) {
        r.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    println!(
        "pre-enhanced {} files ({}) -> {}",
        files.len(),
        cfg.chain,
        output_dir.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    cache_dir: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    max_steps: Option<u64>,
) -> Result<()> {
    let cache_dir = require(cache_dir, &cfg.cache_dir, "train", "cache_dir")?;
    let checkpoint_dir = require(checkpoint_dir, &cfg.checkpoint_dir, "train", "checkpoint_dir")?;
    let data = TrainData::load_dir(&cache_dir)?;
    std::fs::create_dir_all(&checkpoint_dir)?;
    let opts = TrainOptions {
        out_dir: checkpoint_dir,
        base_seed: cfg.effective_seed(),
        resume_from: resume,
        stop_after_steps: max_steps,
    };
    let summary = train(&data, &cfg.model, &opts)?;
    match summary.last_checkpoint {
        Some(p) => println!(
            "trained to epoch {} ({} steps); last checkpoint {}",
            summary.state.epoch,
            summary.state.global_step,
            p.display()
        ),
        None => println!(
            "trained to epoch {} ({} steps); stopped before an epoch boundary, no checkpoint",
            summary.state.epoch, summary.state.global_step
        ),
    }
    Ok(())
}

fn cmd_enhance(cfg: &RunConfig, checkpoint: &Path, input_dir: &Path, output_dir: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let files = wav_files(input_dir)?;
    std::fs::create_dir_all(output_dir)?;
    for path in &files {
        let w = read_wav(path)?;
        let out = enhance_with_checkpoint(&w, &ck, &cfg.model, cfg.effective_seed())
            .map_err(|e| match e {
                Error::Usage(m) => Error::usage(format!("{}: {m}", path.display())),
                other => other,
            })?;
        let name = path.file_name().expect("listed files have names");
        write_wav(&out, output_dir.join(name))?;
    }
    println!("enhanced {} files -> {}", files.len(), output_dir.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    manifest: Option<PathBuf>,
    systems: &[String],
    report_dir: Option<PathBuf>,
    jobs: usize,
) -> Result<()> {
    let manifest = require(manifest, &cfg.manifest, "evaluate", "manifest")?;
    let report_dir = require(report_dir, &cfg.report_dir, "evaluate", "report_dir")?;
    if systems.is_empty() {
        return Err(Error::usage("evaluate needs at least one --system NAME=DIR"));
    }
    let specs = systems
        .iter()
        .map(|s| {
            let (name, dir) = s
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("--system expects NAME=DIR, got `{s}`")))?;
            Ok(SystemSpec {
                name: name.trim().to_string(),
                dir: PathBuf::from(dir.trim()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = read_manifest(&manifest)?;
    std::fs::create_dir_all(&report_dir)?;
    let reports = evaluate_corpus(&pairs, &specs, &report_dir, jobs)?;
    for r in &reports {
        println!(
            "{}: {} utterances, mean ssnr {:.3} dB, stoi {:.3}, lsd {:.3} dB",
            r.system,
            r.rows.len(),
            r.mean.ssnr_db,
            r.mean.stoi,
            r.mean.lsd_db
        );
    }
    println!("reports written to {}", report_dir.display());
    Ok(())
}
