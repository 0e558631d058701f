//! Flat `key = value` run configuration: every model hyperparameter plus the
//! pipeline paths, seed, and pre-enhancement chain. File values are applied
//! first, then `--set KEY=VALUE` overrides, then dedicated flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use waverefine_core::model::SeganConfig;
use waverefine_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: SeganConfig,
    /// Training chunk hop; `auto` (None) means half the window.
    pub hop_len: Option<usize>,
    /// None until set by file/--set/--seed; `WR_SEED` fills it as a fallback.
    pub seed: Option<u64>,
    /// Pre-enhancement chain spec, e.g. "wiener,hrnr".
    pub chain: String,
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: SeganConfig::full_scale(),
            hop_len: None,
            seed: None,
            chain: "wiener,hrnr".to_string(),
            manifest: None,
            cache_dir: None,
            checkpoint_dir: None,
            report_dir: None,
        }
    }
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Data(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// One `KEY=VALUE` override from the command line.
    pub fn apply_set(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        self.set(key.trim(), value.trim())
    }

    /// `WR_SEED` fills the seed only when nothing else has set it.
    pub fn apply_env_fallback(&mut self) -> Result<()> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var("WR_SEED") {
                let seed = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::usage(format!("WR_SEED must be an integer, got `{v}`")))?;
                self.seed = Some(seed);
            }
        }
        Ok(())
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn effective_hop(&self) -> usize {
        self.hop_len.unwrap_or(self.model.window_len / 2)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "window_len" => self.model.window_len = parse_num(key, value)?,
            "enc_channels" => {
                let mut channels = Vec::new();
                for part in value.split(',') {
                    channels.push(parse_num("enc_channels", part.trim())?);
                }
                self.model.enc_channels = channels;
            }
            "filter_width" => self.model.filter_width = parse_num(key, value)?,
            "stride" => self.model.stride = parse_num(key, value)?,
            "latent_channels" => self.model.latent_channels = parse_num(key, value)?,
            "d_alpha" => self.model.d_alpha = parse_num(key, value)?,
            "residual_skip" => self.model.residual_skip = parse_bool(key, value)?,
            "lambda_l1" => self.model.lambda_l1 = parse_num(key, value)?,
            "j_iters" => self.model.j_iters = parse_num(key, value)?,
            "p_j" => self.model.p_j = parse_num(key, value)?,
            "warmup_epochs" => self.model.warmup_epochs = parse_num(key, value)?,
            "total_epochs" => self.model.total_epochs = parse_num(key, value)?,
            "batch_size" => self.model.batch_size = parse_num(key, value)?,
            "learning_rate" => self.model.learning_rate = parse_num(key, value)?,
            "d_iters_k" => self.model.d_iters_k = parse_num(key, value)?,
            "vbn_current_weight" => {
                self.model.vbn_current_weight = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
            }
            "stochastic_schedule" => self.model.stochastic_schedule = parse_bool(key, value)?,
            "fixed_latent" => self.model.fixed_latent = parse_bool(key, value)?,
            "hop_len" => {
                self.hop_len = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
            }
            "seed" => self.seed = Some(parse_num(key, value)?),
            "chain" => self.chain = value.to_string(),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            "report_dir" => self.report_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical dump; parseable back by [`apply_file`], so a `print-config`
    /// capture reproduces the run exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let channels = self
            .model
            .enc_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "window_len = {}", self.model.window_len);
        let _ = writeln!(s, "enc_channels = {channels}");
        let _ = writeln!(s, "filter_width = {}", self.model.filter_width);
        let _ = writeln!(s, "stride = {}", self.model.stride);
        let _ = writeln!(s, "latent_channels = {}", self.model.latent_channels);
        let _ = writeln!(s, "d_alpha = {}", self.model.d_alpha);
        let _ = writeln!(s, "residual_skip = {}", self.model.residual_skip);
        let _ = writeln!(s, "lambda_l1 = {}", self.model.lambda_l1);
        let _ = writeln!(s, "j_iters = {}", self.model.j_iters);
        let _ = writeln!(s, "p_j = {}", self.model.p_j);
        let _ = writeln!(s, "warmup_epochs = {}", self.model.warmup_epochs);
        let _ = writeln!(s, "total_epochs = {}", self.model.total_epochs);
        let _ = writeln!(s, "batch_size = {}", self.model.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.model.learning_rate);
        let _ = writeln!(s, "d_iters_k = {}", self.model.d_iters_k);
        match self.model.vbn_current_weight {
            Some(w) => {
                let _ = writeln!(s, "vbn_current_weight = {w}");
            }
            None => {
                let _ = writeln!(s, "vbn_current_weight = auto");
            }
        }
        let _ = writeln!(s, "stochastic_schedule = {}", self.model.stochastic_schedule);
        let _ = writeln!(s, "fixed_latent = {}", self.model.fixed_latent);
        match self.hop_len {
            Some(h) => {
                let _ = writeln!(s, "hop_len = {h}");
            }
            None => {
                let _ = writeln!(s, "hop_len = auto");
            }
        }
        let _ = writeln!(s, "seed = {}", self.effective_seed());
        let _ = writeln!(s, "chain = {}", self.chain);
        for (key, path) in [
            ("manifest", &self.manifest),
            ("cache_dir", &self.cache_dir),
            ("checkpoint_dir", &self.checkpoint_dir),
            ("report_dir", &self.report_dir),
        ] {
            if let Some(p) = path {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::usage(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!(
            "config key `{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(7);
        cfg.manifest = Some(PathBuf::from("/tmp/list.tsv"));
        cfg.model.p_j = 0.25;
        let text = cfg.to_text();
        let dir = std::env::temp_dir().join(format!("wrcfg{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.cfg");
        std::fs::write(&path, &text).unwrap();
        let mut reparsed = RunConfig::default();
        reparsed.apply_file(&path).unwrap();
        assert_eq!(reparsed.model, cfg.model);
        assert_eq!(reparsed.seed, cfg.seed);
        assert_eq!(reparsed.manifest, cfg.manifest);
        assert_eq!(reparsed.to_text(), text);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_set("no_such_key=1"), Err(Error::Usage(_))));
        assert!(matches!(cfg.apply_set("batch_size=lots"), Err(Error::Usage(_))));
        assert!(matches!(cfg.apply_set("batch_size"), Err(Error::Usage(_))));
        cfg.apply_set("vbn_current_weight=auto").unwrap();
        assert_eq!(cfg.model.vbn_current_weight, None);
        cfg.apply_set("vbn_current_weight=0.25").unwrap();
        assert_eq!(cfg.model.vbn_current_weight, Some(0.25));
    }
}
