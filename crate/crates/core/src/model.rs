//! The enhancement GAN itself: a strided-convolution encoder/decoder
//! generator with skip connections, latent concatenation at the bottleneck,
//! and an outer residual skip; plus the conditioned convolutional
//! discriminator with virtual batch normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Scalar, Tensor};

/// Everything that fixes the network topology and the training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SeganConfig {
    /// Samples per training chunk; must survive halving once per encoder layer.
    pub window_len: usize,
    /// Output channels of each encoder layer; the decoder mirrors this.
    pub enc_channels: Vec<usize>,
    pub filter_width: usize,
    pub stride: usize,
    /// Channels of the latent tensor concatenated at the bottleneck. Its
    /// length is always the bottleneck length.
    pub latent_channels: usize,
    /// LeakyReLU slope in the discriminator.
    pub d_alpha: f64,
    /// Add the noisy input back onto the decoder output (the proposed
    /// formulation). Off reproduces the original direct-regression generator.
    pub residual_skip: bool,
    pub lambda_l1: f64,
    /// Generator iterations per step (J in the update schedule).
    pub j_iters: usize,
    /// Fraction of generator iterations directed at the pre-enhanced
    /// reference during warmup (P_J).
    pub p_j: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Discriminator iterations per step (K).
    pub d_iters_k: usize,
    /// Weight of the current example's statistics inside virtual batch norm.
    /// `None` uses 1/(reference_batch + 1); `Some(0.0)` excludes the current
    /// example entirely.
    pub vbn_current_weight: Option<f64>,
    /// Draw the reference schedule per iteration from Bernoulli(P_J) instead
    /// of the deterministic threshold.
    pub stochastic_schedule: bool,
    /// Reuse one latent sample for every chunk at inference instead of
    /// resampling per chunk.
    pub fixed_latent: bool,
}

impl SeganConfig {
    /// Full-size configuration from the published recipe.
    pub fn full_scale() -> Self {
        SeganConfig {
            window_len: 16384,
            enc_channels: vec![16, 32, 32, 64, 64, 128, 128, 256, 256, 512, 1024],
            filter_width: 31,
            stride: 2,
            latent_channels: 1024,
            d_alpha: 0.3,
            residual_skip: true,
            lambda_l1: 100.0,
            j_iters: 2,
            p_j: 0.5,
            warmup_epochs: 50,
            total_epochs: 120,
            batch_size: 100,
            learning_rate: 2e-4,
            d_iters_k: 1,
            vbn_current_weight: None,
            stochastic_schedule: false,
            fixed_latent: false,
        }
    }

    /// Desk-scale configuration used by the fast tests: same topology family,
    /// 1024-sample window, four layers.
    pub fn toy() -> Self {
        SeganConfig {
            window_len: 1024,
            enc_channels: vec![16, 32, 64, 128],
            latent_channels: 128,
            warmup_epochs: 2,
            total_epochs: 8,
            batch_size: 16,
            ..SeganConfig::full_scale()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn bottleneck_len(&self) -> usize {
        let mut len = self.window_len;
        for _ in 0..self.n_layers() {
            len /= self.stride;
        }
        len
    }

    pub fn pad(&self) -> usize {
        (self.filter_width - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() {
            return Err(Error::usage("enc_channels must not be empty"));
        }
        if self.stride < 2 {
            return Err(Error::usage("stride must be at least 2"));
        }
        if self.filter_width % 2 == 0 {
            return Err(Error::usage(
                "filter_width must be odd so same-padding halves lengths exactly",
            ));
        }
        let mut len = self.window_len;
        for i in 0..self.n_layers() {
            if len % self.stride != 0 {
                return Err(Error::usage(format!(
                    "window_len {} is not divisible by stride^{} ",
                    self.window_len,
                    i + 1
                )));
            }
            len /= self.stride;
        }
        if len == 0 {
            return Err(Error::usage("bottleneck reduced to zero length"));
        }
        if self.latent_channels == 0 {
            return Err(Error::usage("latent_channels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_j) {
            return Err(Error::usage("p_j must lie in [0, 1]"));
        }
        if self.j_iters == 0 || self.d_iters_k == 0 {
            return Err(Error::usage("j_iters and d_iters_k must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be positive"));
        }
        if self.lambda_l1 < 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::usage("lambda_l1 must be ≥ 0 and learning_rate > 0"));
        }
        if let Some(w) = self.vbn_current_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::usage("vbn_current_weight must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Channel in/out counts of decoder layer `i` (after skip concatenation
    /// on the input side).
    fn dec_io(&self, i: usize) -> (usize, usize) {
        let n = self.n_layers();
        let ci = if i == 0 {
            self.enc_channels[n - 1] + self.latent_channels
        } else {
            2 * self.enc_channels[n - 1 - i]
        };
        let co = if i == n - 1 {
            1
        } else {
            self.enc_channels[n - 2 - i]
        };
        (ci, co)
    }
}

pub const KERNEL_INIT_STD: f64 = 0.02;
pub const PRELU_INIT: f64 = 0.25;

/// Generator parameters, deterministically initialized from `seed`:
/// truncated-normal kernels, zero biases, 0.25 activation slopes.
pub fn build_generator<S: Scalar>(cfg: &SeganConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let n = cfg.n_layers();
    let w = cfg.filter_width;
    for i in 0..n {
        let ci = if i == 0 { 1 } else { cfg.enc_channels[i - 1] };
        let co = cfg.enc_channels[i];
        p.insert(
            format!("g.enc{i}.k"),
            Tensor::truncated_normal(vec![w, ci, co], KERNEL_INIT_STD, &mut rng),
        )?;
        p.insert(format!("g.enc{i}.b"), Tensor::zeros(vec![co]))?;
        p.insert(
            format!("g.enc{i}.prelu"),
            Tensor::full(vec![co], PRELU_INIT),
        )?;
    }
    for i in 0..n {
        let (ci, co) = cfg.dec_io(i);
        // Transposed kernels live in the adjoint convolution's layout
        // [width, ch_out, ch_in]; see nn::conv.
        p.insert(
            format!("g.dec{i}.k"),
            Tensor::truncated_normal(vec![w, co, ci], KERNEL_INIT_STD, &mut rng),
        )?;
        p.insert(format!("g.dec{i}.b"), Tensor::zeros(vec![co]))?;
        if i < n - 1 {
            p.insert(
                format!("g.dec{i}.prelu"),
                Tensor::full(vec![co], PRELU_INIT),
            )?;
        }
    }
    log::info!("generator: {} parameters", p.numel());
    Ok(p)
}

/// Discriminator parameters: the encoder-shaped stack over the 2-channel
/// (candidate, condition) input, per-layer virtual-batch-norm gain/bias, a
/// 1×1 projection, and the linear output head.
pub fn build_discriminator<S: Scalar>(cfg: &SeganConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let n = cfg.n_layers();
    let w = cfg.filter_width;
    for i in 0..n {
        let ci = if i == 0 { 2 } else { cfg.enc_channels[i - 1] };
        let co = cfg.enc_channels[i];
        p.insert(
            format!("d.enc{i}.k"),
            Tensor::truncated_normal(vec![w, ci, co], KERNEL_INIT_STD, &mut rng),
        )?;
        p.insert(format!("d.enc{i}.b"), Tensor::zeros(vec![co]))?;
        p.insert(format!("d.enc{i}.vbn_g"), Tensor::full(vec![co], 1.0))?;
        p.insert(format!("d.enc{i}.vbn_b"), Tensor::zeros(vec![co]))?;
    }
    let top = cfg.enc_channels[n - 1];
    p.insert(
        "d.head.k",
        Tensor::truncated_normal(vec![1, top, 1], KERNEL_INIT_STD, &mut rng),
    )?;
    p.insert("d.head.b", Tensor::zeros(vec![1]))?;
    p.insert(
        "d.out.w",
        Tensor::truncated_normal(vec![cfg.bottleneck_len(), 1], KERNEL_INIT_STD, &mut rng),
    )?;
    p.insert("d.out.b", Tensor::zeros(vec![1]))?;
    log::info!("discriminator: {} parameters", p.numel());
    Ok(p)
}

/// Standard-normal latent tensor `[latent_channels, batch, bottleneck_len]`.
pub fn sample_latent<S: Scalar, R: Rng>(cfg: &SeganConfig, batch: usize, rng: &mut R) -> Tensor<S> {
    let shape = vec![cfg.latent_channels, batch, cfg.bottleneck_len()];
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor { shape, data }
}

/// Handles returned by a network trace: the output node plus each parameter's
/// leaf, so the caller can read gradients after backward.
#[derive(Debug, Clone)]
pub struct Trace {
    pub output: NodeId,
    pub params: Vec<(String, NodeId)>,
    /// Per-encoder-layer activation shapes `[c, b, l]` (generator only).
    pub enc_shapes: Vec<Vec<usize>>,
    /// Shape of the bottleneck after latent concatenation (generator only).
    pub bottleneck_shape: Vec<usize>,
    /// Per-decoder-layer shapes after skip concatenation (generator only).
    pub dec_shapes: Vec<Vec<usize>>,
}

fn param_leaf<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParamStore<S>,
    name: &str,
    trainable: bool,
    out: &mut Vec<(String, NodeId)>,
) -> Result<NodeId> {
    let t = p
        .get(name)
        .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
    let id = g.leaf(t.clone(), trainable);
    out.push((name.to_string(), id));
    Ok(id)
}

/// Trace the generator over `x` (`[1, batch, window]`) and latent `z`
/// (`[latent_channels, batch, bottleneck]`): strided encoder with learned
/// activation slopes, latent concatenation, mirrored decoder consuming one
/// skip connection per level, plus the outer residual skip when configured.
pub fn generator_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    cfg: &SeganConfig,
    x: NodeId,
    z: NodeId,
    trainable: bool,
) -> Result<Trace> {
    let n = cfg.n_layers();
    let pad = cfg.pad();
    let xs = &g.value(x).shape;
    if xs.len() != 3 || xs[0] != 1 || xs[2] != cfg.window_len {
        return Err(Error::data(format!(
            "generator input must be [1, batch, {}], got {xs:?}",
            cfg.window_len
        )));
    }
    let zs = &g.value(z).shape;
    let want_z = [cfg.latent_channels, xs[1], cfg.bottleneck_len()];
    if zs[..] != want_z {
        return Err(Error::data(format!(
            "latent must be {want_z:?}, got {zs:?}"
        )));
    }
    let mut ids = Vec::new();
    let mut enc_shapes = Vec::with_capacity(n);
    let mut dec_shapes = Vec::with_capacity(n);
    let mut skips = Vec::with_capacity(n - 1);
    let mut cur = x;
    for i in 0..n {
        let k = param_leaf(g, params, &format!("g.enc{i}.k"), trainable, &mut ids)?;
        let b = param_leaf(g, params, &format!("g.enc{i}.b"), trainable, &mut ids)?;
        let a = param_leaf(g, params, &format!("g.enc{i}.prelu"), trainable, &mut ids)?;
        cur = g.conv1d(cur, k, Some(b), cfg.stride, pad)?;
        cur = g.prelu(cur, a)?;
        enc_shapes.push(g.value(cur).shape.clone());
        if i < n - 1 {
            skips.push(cur);
        }
    }
    cur = g.concat_ch(cur, z)?;
    let bottleneck_shape = g.value(cur).shape.clone();
    for i in 0..n {
        let k = param_leaf(g, params, &format!("g.dec{i}.k"), trainable, &mut ids)?;
        let b = param_leaf(g, params, &format!("g.dec{i}.b"), trainable, &mut ids)?;
        cur = g.tconv1d(cur, k, Some(b), cfg.stride, pad)?;
        if i < n - 1 {
            let a = param_leaf(g, params, &format!("g.dec{i}.prelu"), trainable, &mut ids)?;
            cur = g.prelu(cur, a)?;
            // Mirror-level encoder output rides along as extra channels.
            cur = g.concat_ch(cur, skips[n - 2 - i])?;
        }
        dec_shapes.push(g.value(cur).shape.clone());
    }
    let output = if cfg.residual_skip { g.add(cur, x)? } else { cur };
    Ok(Trace {
        output,
        params: ids,
        enc_shapes,
        bottleneck_shape,
        dec_shapes,
    })
}

/// Frozen virtual-batch-norm reference statistics, one (mean, variance) pair
/// per discriminator layer, plus the reference batch size that fixes the
/// default combination weight.
#[derive(Debug, Clone)]
pub struct VbnStats<S> {
    pub per_layer: Vec<(Vec<S>, Vec<S>)>,
    pub ref_batch: usize,
}

impl<S: Scalar> VbnStats<S> {
    pub fn w_cur(&self, cfg: &SeganConfig) -> f64 {
        cfg.vbn_current_weight
            .unwrap_or(1.0 / (self.ref_batch as f64 + 1.0))
    }
}

/// Run the fixed reference batch through the discriminator stack once,
/// recording each layer's per-channel statistics. The reference batch itself
/// is normalized by its own statistics while propagating (weight 0 on the
/// "current example" term), which is what freezing them at training start
/// means.
pub fn capture_vbn_stats<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &SeganConfig,
    candidate: &Tensor<S>,
    condition: &Tensor<S>,
) -> Result<VbnStats<S>> {
    let mut g = Graph::new();
    let cand = g.leaf(candidate.clone(), false);
    let cond = g.leaf(condition.clone(), false);
    let batch = candidate.shape.get(1).copied().unwrap_or(0);
    let mut ids = Vec::new();
    let mut cur = g.concat_ch(cand, cond)?;
    let mut per_layer = Vec::with_capacity(cfg.n_layers());
    for i in 0..cfg.n_layers() {
        let k = param_leaf(&mut g, params, &format!("d.enc{i}.k"), false, &mut ids)?;
        let b = param_leaf(&mut g, params, &format!("d.enc{i}.b"), false, &mut ids)?;
        let gain = param_leaf(&mut g, params, &format!("d.enc{i}.vbn_g"), false, &mut ids)?;
        let beta = param_leaf(&mut g, params, &format!("d.enc{i}.vbn_b"), false, &mut ids)?;
        cur = g.conv1d(cur, k, Some(b), cfg.stride, cfg.pad())?;
        let (mean, var) = channel_stats(g.value(cur));
        cur = g.vbn(cur, gain, beta, &mean, &var, 0.0)?;
        cur = g.leaky_relu(cur, cfg.d_alpha)?;
        per_layer.push((mean, var));
    }
    Ok(VbnStats {
        per_layer,
        ref_batch: batch,
    })
}

/// Per-channel mean and biased variance over (batch, length).
fn channel_stats<S: Scalar>(t: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let (c, b, l) = (t.shape[0], t.shape[1], t.shape[2]);
    let inv = S::from_f64(1.0 / (b * l) as f64);
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    for ch in 0..c {
        let xs = &t.data[ch * b * l..(ch + 1) * b * l];
        let mut m = S::ZERO;
        for &v in xs {
            m += v;
        }
        m *= inv;
        let mut s = S::ZERO;
        for &v in xs {
            let d = v - m;
            s += d * d;
        }
        mean[ch] = m;
        var[ch] = s * inv;
    }
    (mean, var)
}

/// Trace the discriminator on an in-graph candidate/condition pair (each
/// `[1, batch, window]`): channel-stacked input, strided conv layers with
/// virtual batch norm and LeakyReLU, a linear 1×1 projection, then a linear
/// dense head to one scalar per example (`[1, batch, 1]`).
pub fn discriminator_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    vbn: &VbnStats<S>,
    cfg: &SeganConfig,
    candidate: NodeId,
    condition: NodeId,
    trainable: bool,
) -> Result<Trace> {
    if vbn.per_layer.len() != cfg.n_layers() {
        return Err(Error::data(format!(
            "reference statistics cover {} layers, model has {}",
            vbn.per_layer.len(),
            cfg.n_layers()
        )));
    }
    for id in [candidate, condition] {
        let s = &g.value(id).shape;
        if s.len() != 3 || s[0] != 1 || s[2] != cfg.window_len {
            return Err(Error::data(format!(
                "discriminator input must be [1, batch, {}], got {s:?}",
                cfg.window_len
            )));
        }
    }
    let w_cur = vbn.w_cur(cfg);
    let mut ids = Vec::new();
    let mut cur = g.concat_ch(candidate, condition)?;
    for i in 0..cfg.n_layers() {
        let k = param_leaf(g, params, &format!("d.enc{i}.k"), trainable, &mut ids)?;
        let b = param_leaf(g, params, &format!("d.enc{i}.b"), trainable, &mut ids)?;
        let gain = param_leaf(g, params, &format!("d.enc{i}.vbn_g"), trainable, &mut ids)?;
        let beta = param_leaf(g, params, &format!("d.enc{i}.vbn_b"), trainable, &mut ids)?;
        cur = g.conv1d(cur, k, Some(b), cfg.stride, cfg.pad())?;
        let (mean, var) = &vbn.per_layer[i];
        cur = g.vbn(cur, gain, beta, mean, var, w_cur)?;
        cur = g.leaky_relu(cur, cfg.d_alpha)?;
    }
    let k = param_leaf(g, params, "d.head.k", trainable, &mut ids)?;
    let b = param_leaf(g, params, "d.head.b", trainable, &mut ids)?;
    cur = g.conv1d(cur, k, Some(b), 1, 0)?;
    let w = param_leaf(g, params, "d.out.w", trainable, &mut ids)?;
    let ob = param_leaf(g, params, "d.out.b", trainable, &mut ids)?;
    let output = g.dense(cur, w, Some(ob))?;
    Ok(Trace {
        output,
        params: ids,
        enc_shapes: Vec::new(),
        bottleneck_shape: Vec::new(),
        dec_shapes: Vec::new(),
    })
}
