//! MM-DiT: a transformer whose text and image tokens keep separate weights but
//! share one attention over the joined sequence.
//!
//! Latents are channel-last `[batch, h, w, c]`. Conditioning comes from `E`
//! synthetic text encoders (learned embedding tables over caption token ids);
//! all encoders contribute context tokens, all but the last contribute a
//! pooled vector. Parameter names are stable strings, see [`param_count`] and
//! `docs/mmdit.md` for the full inventory.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Width of the sinusoidal timestep features.
pub const TIME_FREQ_DIM: usize = 256;
/// Timesteps are scaled by this before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;
/// Base of the positional frequency ladder.
pub const POS_BASE: f64 = 10_000.0;
/// Pixels per token on the positional grid (8x autoencoder times 2x2 patches).
pub const PIXELS_PER_TOKEN: usize = 16;

/// Positional grid sizing in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosConfig {
    /// Side of the reference resolution, `S`.
    #[serde(rename = "S")]
    pub s: usize,
    /// Tallest bucket height, `H_max`.
    #[serde(rename = "H_max")]
    pub h_max: usize,
    /// Widest bucket width, `W_max`.
    #[serde(rename = "W_max")]
    pub w_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub qk_norm: bool,
    pub pos: PosConfig,
    pub context_dim: usize,
    pub vocab: usize,
    /// Number of synthetic text encoders.
    #[serde(default = "default_encoders")]
    pub encoders: usize,
    /// Tokens per caption per encoder.
    #[serde(default = "default_caption_len")]
    pub caption_len: usize,
    /// Give the last encoder's tokens their own weight set.
    #[serde(default)]
    pub three_streams: bool,
}

fn default_encoders() -> usize {
    3
}

fn default_caption_len() -> usize {
    1
}

impl ModelConfig {
    /// 2-D points as a `1x1x2` latent with one-pixel patches.
    pub fn points(depth: usize) -> Self {
        Self {
            depth,
            hidden: 64 * depth,
            heads: depth,
            patch: 1,
            latent_channels: 2,
            qk_norm: true,
            pos: PosConfig { s: 16, h_max: 16, w_max: 16 },
            context_dim: 32,
            vocab: 16,
            encoders: 3,
            caption_len: 1,
            three_streams: false,
        }
    }

    /// `16x16x1` images with `2x2` patches on an `8x8` token grid.
    pub fn images(depth: usize) -> Self {
        Self {
            depth,
            hidden: 64 * depth,
            heads: depth,
            patch: 2,
            latent_channels: 1,
            qk_norm: true,
            pos: PosConfig { s: 128, h_max: 128, w_max: 128 },
            context_dim: 32,
            vocab: 16,
            encoders: 3,
            caption_len: 1,
            three_streams: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::parameter(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.hidden != 64 * self.depth {
            return bad(format!("hidden must be 64 * depth = {}, got {}", 64 * self.depth, self.hidden));
        }
        if self.heads != self.depth {
            return bad(format!("heads must equal depth = {}, got {}", self.depth, self.heads));
        }
        if !self.hidden.is_multiple_of(self.heads) || !self.head_dim().is_multiple_of(2) {
            return bad(format!("hidden {} must split into even-width heads ({})", self.hidden, self.heads));
        }
        if self.patch == 0 || self.latent_channels == 0 || self.context_dim == 0 || self.vocab == 0 {
            return bad("patch, latent_channels, context_dim and vocab must be positive".into());
        }
        if self.encoders == 0 || self.caption_len == 0 {
            return bad("need at least one encoder and one caption token".into());
        }
        if self.three_streams && self.encoders < 2 {
            return bad("three_streams needs at least two encoders".into());
        }
        let p = self.pos;
        let t = PIXELS_PER_TOKEN;
        if p.s == 0 || !p.s.is_multiple_of(t) || !p.h_max.is_multiple_of(t) || !p.w_max.is_multiple_of(t) || p.h_max == 0 || p.w_max == 0 {
            return bad(format!("positional sides must be positive multiples of {t}, got {p:?}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.hidden
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    /// Width of `c_vec`.
    pub fn vec_dim(&self) -> usize {
        self.context_dim * (self.encoders - 1).max(1)
    }

    /// Stream names, context streams first.
    pub fn streams(&self) -> &'static [&'static str] {
        if self.three_streams {
            &["c", "t", "x"]
        } else {
            &["c", "x"]
        }
    }

    /// Latent side lengths for the configured reference resolution.
    pub fn latent_side(&self) -> usize {
        self.pos.s / PIXELS_PER_TOKEN * self.patch
    }
}

/// Synthetic captions: `ids[(b * E + e) * L + j]` and per-source keep flags
/// `keep[b * E + e]`. A dropped source contributes exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInputs {
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
}

impl ConditioningInputs {
    /// Caption for class `k`: token `j` of encoder `e` is `(k L + j) mod vocab`.
    pub fn from_classes(config: &ModelConfig, classes: &[usize]) -> Self {
        let (e, l) = (config.encoders, config.caption_len);
        let mut ids = Vec::with_capacity(classes.len() * e * l);
        for &k in classes {
            for _ in 0..e {
                ids.extend((0..l).map(|j| (k * l + j) % config.vocab));
            }
        }
        Self { ids, keep: vec![true; classes.len() * e] }
    }

    /// The CFG-null conditioning: every source dropped.
    pub fn null(config: &ModelConfig, batch: usize) -> Self {
        let mut c = Self::from_classes(config, &vec![0; batch]);
        c.keep.iter_mut().for_each(|k| *k = false);
        c
    }

    pub fn batch(&self, config: &ModelConfig) -> usize {
        self.keep.len() / config.encoders
    }

    fn check(&self, config: &ModelConfig, batch: usize) -> Result<()> {
        let (e, l) = (config.encoders, config.caption_len);
        if self.keep.len() != batch * e || self.ids.len() != batch * e * l {
            return Err(Error::contract(format!(
                "conditioning for batch {batch} needs {} keep flags and {} ids, got {} and {}",
                batch * e,
                batch * e * l,
                self.keep.len(),
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= config.vocab) {
            return Err(Error::contract(format!("caption token {bad} outside vocab {}", config.vocab)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamInit {
    /// Scaled-normal weights, zero biases, unit norm scales and a zero output
    /// projection, so the untrained model is the zero velocity field.
    Standard,
    /// Every tensor random, including biases, norm scales and the output
    /// projection. Used where every path must carry gradient.
    Dense,
}

struct Shape {
    name: String,
    dims: Vec<usize>,
}

fn inventory(c: &ModelConfig) -> Vec<Shape> {
    let h = c.hidden;
    let dh = c.head_dim();
    let mut out = Vec::new();
    let mut add = |name: String, dims: Vec<usize>| out.push(Shape { name, dims });
    let linear = |add: &mut dyn FnMut(String, Vec<usize>), name: &str, i: usize, o: usize| {
        add(format!("{name}.w"), vec![i, o]);
        add(format!("{name}.b"), vec![o]);
    };
    for e in 0..c.encoders {
        add(format!("text.{e}.table"), vec![c.vocab, c.context_dim]);
    }
    linear(&mut add, "t_embed.fc1", TIME_FREQ_DIM, h);
    linear(&mut add, "t_embed.fc2", h, h);
    linear(&mut add, "y_embed.fc1", c.vec_dim(), h);
    linear(&mut add, "y_embed.fc2", h, h);
    linear(&mut add, "context_embed", c.context_dim, h);
    linear(&mut add, "x_embed", c.patch_dim(), h);
    for i in 0..c.depth {
        for &s in c.streams() {
            let pre = block_pre_only(c, i, s);
            let p = format!("blocks.{i}.{s}");
            linear(&mut add, &format!("{p}.mod"), h, if pre { 2 * h } else { 6 * h });
            linear(&mut add, &format!("{p}.qkv"), h, 3 * h);
            if c.qk_norm {
                add(format!("{p}.q_norm"), vec![dh]);
                add(format!("{p}.k_norm"), vec![dh]);
            }
            if !pre {
                linear(&mut add, &format!("{p}.attn_out"), h, h);
                linear(&mut add, &format!("{p}.mlp.fc1"), h, c.mlp_width());
                linear(&mut add, &format!("{p}.mlp.fc2"), c.mlp_width(), h);
            }
        }
    }
    linear(&mut add, "final.mod", h, 2 * h);
    linear(&mut add, "final.out", h, c.patch_dim());
    out
}

/// Context streams in the last block only feed keys and values to the image
/// tokens; their post-attention path would never reach the output.
fn block_pre_only(c: &ModelConfig, block: usize, stream: &str) -> bool {
    block + 1 == c.depth && stream != "x"
}

/// Closed-form parameter count (`docs/mmdit.md`).
pub fn param_count(c: &ModelConfig) -> usize {
    let h = c.hidden;
    let q = if c.qk_norm { 2 * c.head_dim() } else { 0 };
    let full = 18 * h * h + 15 * h + q;
    let pre = 5 * h * h + 5 * h + q;
    let ctx_streams = c.streams().len() - 1;
    let embeds = c.encoders * c.vocab * c.context_dim
        + (TIME_FREQ_DIM * h + h + h * h + h)
        + (c.vec_dim() * h + h + h * h + h)
        + (c.context_dim * h + h)
        + (c.patch_dim() * h + h);
    let blocks = (c.depth - 1) * (ctx_streams + 1) * full + ctx_streams * pre + full;
    let last = 2 * h * h + 2 * h + h * c.patch_dim() + c.patch_dim();
    embeds + blocks + last
}

/// Fresh parameters for `config`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, init: ParamInit, rng: &mut R) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for Shape { name, dims } in inventory(config) {
        let n: usize = dims.iter().product();
        let dense = init == ParamInit::Dense;
        let values: Vec<f64> = if name.ends_with(".table") {
            (0..n).map(|_| unit.sample(rng)).collect()
        } else if name.ends_with("_norm") {
            (0..n).map(|_| if dense { 1.0 + 0.1 * unit.sample(rng) } else { 1.0 }).collect()
        } else if name.ends_with(".b") {
            (0..n).map(|_| if dense { 0.1 * unit.sample(rng) } else { 0.0 }).collect()
        } else if name.starts_with("final.out") && !dense {
            vec![0.0; n]
        } else {
            let std = 1.0 / (dims[0] as f64).sqrt();
            (0..n).map(|_| std * unit.sample(rng)).collect()
        };
        store.insert(name, Tensor::from_f64(&dims, &values)?);
    }
    Ok(store)
}

/// Token grid values along one axis: the full range
/// `(p - (n_max - s) / 2) * 256 / S` for `p < n_max`, center-cropped to `n`
/// entries (the lower start index on ties).
fn axis_grid(n: usize, n_max_px: usize, s_px: usize) -> Result<Vec<f64>> {
    let n_max = n_max_px / PIXELS_PER_TOKEN;
    let s = s_px / PIXELS_PER_TOKEN;
    if n > n_max {
        return Err(Error::contract(format!("grid of {n} tokens exceeds the maximum {n_max}")));
    }
    let offset = (n_max as f64 - s as f64) / 2.0;
    let scale = 256.0 / s_px as f64;
    let full: Vec<f64> = (0..n_max).map(|p| (p as f64 - offset) * scale).collect();
    let start = (n_max - n) / 2;
    Ok(full[start..start + n].to_vec())
}

/// Vertical and horizontal grid values for an `h x w` token grid.
pub fn positional_grid(config: &ModelConfig, h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = config.pos;
    Ok((axis_grid(h, p.h_max, p.s)?, axis_grid(w, p.w_max, p.s)?))
}

/// Sine/cosine features of the grid, `[h * w, hidden]` in row-major token
/// order: the first half of the channels encodes rows, the second columns.
pub fn positional_embedding<T: Scalar>(config: &ModelConfig, h: usize, w: usize) -> Result<Tensor<T>> {
    let (rows, cols) = positional_grid(config, h, w)?;
    let quarter = config.hidden / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| POS_BASE.powf(-(i as f64) / quarter as f64)).collect();
    let mut data = Vec::with_capacity(h * w * config.hidden);
    for &r in &rows {
        for &c in &cols {
            for v in [r, c] {
                data.extend(omega.iter().map(|&o| T::from_f64((v * o).sin())));
                data.extend(omega.iter().map(|&o| T::from_f64((v * o).cos())));
            }
        }
    }
    Tensor::new(vec![h * w, config.hidden], data)
}

/// `[b, h, w, c] -> [b, (h/p)(w/p), p*p*c]`, patches in row-major order and
/// features ordered (row in patch, column in patch, channel).
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [b, h, w, c] = s[..] else {
        return Err(Error::contract(format!("patchify expects [b, h, w, c], got {s:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::contract(format!("latent {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let y = g.reshape(x, &[b, h / p, p, w / p, p * c])?;
    let y = g.transpose(y, 2, 3)?;
    g.reshape(y, &[b, (h / p) * (w / p), p * p * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, h: usize, w: usize, c: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let b = s[0];
    if s != [b, (h / p) * (w / p), p * p * c] {
        return Err(Error::contract(format!("unpatchify: {s:?} does not tile a {h}x{w}x{c} latent")));
    }
    let y = g.reshape(x, &[b, h / p, w / p, p, p * c])?;
    let y = g.transpose(y, 2, 3)?;
    g.reshape(y, &[b, h, w, c])
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn mlp<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.silu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

/// `x (1 + scale) + shift` with `[b, h]` modulation over `[b, l, h]` tokens.
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let l = g.shape(x)[1];
    let s = g.add_scalar(scale, T::one());
    let s = g.expand(s, 1, l)?;
    let sh = g.expand(shift, 1, l)?;
    let y = g.mul(x, s)?;
    g.add(y, sh)
}

/// `x + gate * y` with a `[b, h]` gate.
fn gated<T: Scalar>(g: &mut Graph<T>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let l = g.shape(x)[1];
    let gt = g.expand(gate, 1, l)?;
    let gy = g.mul(gt, y)?;
    g.add(x, gy)
}

/// Per-stream attention results of [`joint_attention`].
pub struct JointAttention {
    /// Attention output per stream, `[b, l_s, hidden]`, before the output
    /// projection.
    pub outputs: Vec<Var>,
    /// Scaled pre-softmax logits `[b * heads, l, l]` over the joined sequence.
    pub logits: Var,
    /// Attention weights, same shape as `logits`.
    pub probs: Var,
}

/// One softmax attention over the concatenation of every stream, each stream
/// using its own projection weights `{prefix}.{stream}.*`.
pub fn joint_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    prefix: &str,
    streams: &[(&str, Var)],
) -> Result<JointAttention> {
    let (heads, dh) = (config.heads, config.head_dim());
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    let mut lens = Vec::new();
    let batch = g.shape(streams[0].1)[0];
    for &(name, x) in streams {
        let l = g.shape(x)[1];
        if l == 0 {
            return Err(Error::contract(format!("stream `{name}` has no tokens")));
        }
        let qkv = linear(g, p, &format!("{prefix}.{name}.qkv"), x)?;
        let parts = g.split(qkv, 2, &[config.hidden; 3])?;
        let mut q = g.reshape(parts[0], &[batch, l, heads, dh])?;
        let mut k = g.reshape(parts[1], &[batch, l, heads, dh])?;
        if config.qk_norm {
            let qs_ = g.param(p, &format!("{prefix}.{name}.q_norm"))?;
            let ks_ = g.param(p, &format!("{prefix}.{name}.k_norm"))?;
            q = g.rms_norm(q, qs_)?;
            k = g.rms_norm(k, ks_)?;
        }
        qs.push(q);
        ks.push(k);
        vs.push(g.reshape(parts[2], &[batch, l, heads, dh])?);
        lens.push(l);
    }
    let total: usize = lens.iter().sum();
    let joined = |g: &mut Graph<T>, parts: &[Var]| -> Result<Var> {
        let x = g.concat(parts, 1)?;
        let x = g.transpose(x, 1, 2)?;
        g.reshape(x, &[batch * heads, total, dh])
    };
    let q = joined(g, &qs)?;
    let k = joined(g, &ks)?;
    let v = joined(g, &vs)?;
    let logits = g.bmm(q, k, true)?;
    let logits = g.scale(logits, T::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = g.softmax(logits)?;
    let out = g.bmm(probs, v, false)?;
    let out = g.reshape(out, &[batch, heads, total, dh])?;
    let out = g.transpose(out, 1, 2)?;
    let out = g.reshape(out, &[batch, total, config.hidden])?;
    let outputs = g.split(out, 1, &lens)?;
    Ok(JointAttention { outputs, logits, probs })
}

/// One MM-DiT block over `streams` (context streams first, image last),
/// conditioned on `y` of shape `[b, hidden]`. Pre-only streams come back
/// unchanged.
pub fn mmdit_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    block: usize,
    streams: &[(&str, Var)],
    y: Var,
) -> Result<Vec<Var>> {
    let prefix = format!("blocks.{block}");
    let sy = g.silu(y);
    let h = config.hidden;
    let mut mods = Vec::new();
    let mut normed = Vec::new();
    for &(name, x) in streams {
        let pre = block_pre_only(config, block, name);
        let m = linear(g, p, &format!("{prefix}.{name}.mod"), sy)?;
        let sizes = vec![h; if pre { 2 } else { 6 }];
        let m = g.split(m, 1, &sizes)?;
        let n = g.layer_norm(x)?;
        normed.push((name, modulate(g, n, m[0], m[1])?));
        mods.push(m);
    }
    let attn = joint_attention(g, p, config, &prefix, &normed)?;
    let mut out = Vec::with_capacity(streams.len());
    for (i, &(name, x)) in streams.iter().enumerate() {
        if block_pre_only(config, block, name) {
            out.push(x);
            continue;
        }
        let m = &mods[i];
        let a = linear(g, p, &format!("{prefix}.{name}.attn_out"), attn.outputs[i])?;
        let x = gated(g, x, m[2], a)?;
        let n = g.layer_norm(x)?;
        let n = modulate(g, n, m[3], m[4])?;
        let f = mlp(g, p, &format!("{prefix}.{name}.mlp"), n)?;
        out.push(gated(g, x, m[5], f)?);
    }
    Ok(out)
}

/// Context tokens per stream and the pooled vector, with dropped sources
/// zeroed.
fn encode_text<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    cond: &ConditioningInputs,
    batch: usize,
) -> Result<(Vec<Var>, Var)> {
    let (e_n, l, cd) = (config.encoders, config.caption_len, config.context_dim);
    let mut tokens = Vec::with_capacity(e_n);
    let mut pooled = Vec::with_capacity(e_n);
    for e in 0..e_n {
        let table = g.param(p, &format!("text.{e}.table"))?;
        let ids: Vec<usize> = (0..batch).flat_map(|b| cond.ids[(b * e_n + e) * l..(b * e_n + e + 1) * l].to_vec()).collect();
        let rows = g.gather_rows(table, &ids)?;
        let rows = g.reshape(rows, &[batch, l, cd])?;
        let mask: Vec<T> = (0..batch)
            .flat_map(|b| {
                let keep = if cond.keep[b * e_n + e] { T::one() } else { T::zero() };
                std::iter::repeat_n(keep, l * cd)
            })
            .collect();
        let mask = g.constant(Tensor::new(vec![batch, l, cd], mask)?);
        let rows = g.mul(rows, mask)?;
        pooled.push(g.mean_axis(rows, 1)?);
        tokens.push(rows);
    }
    let vec = if e_n == 1 { pooled[0] } else { g.concat(&pooled[..e_n - 1], 1)? };
    let ctx = if config.three_streams {
        vec![g.concat(&tokens[..e_n - 1], 1)?, tokens[e_n - 1]]
    } else {
        vec![g.concat(&tokens, 1)?]
    };
    Ok((ctx, vec))
}

fn check_times(t: &[f64], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(Error::contract(format!("got {} timesteps for batch {batch}", t.len())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("model time {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `y = MLP(sinusoidal(1000 t)) + MLP(c_vec)`.
fn conditioning_vector<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, t: &[f64], vec: Var) -> Result<Var> {
    let tv = g.constant(Tensor::from_f64(&[t.len()], &t.iter().map(|t| t * TIME_SCALE).collect::<Vec<_>>())?);
    let te = g.sinusoidal_embed(tv, TIME_FREQ_DIM, POS_BASE)?;
    let te = mlp(g, p, "t_embed", te)?;
    let ve = mlp(g, p, "y_embed", vec)?;
    g.add(te, ve)
}

struct Embedded {
    context: Vec<Var>,
    x: Var,
    y: Var,
    grid: (usize, usize, usize),
}

fn embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    z: Var,
    t: &[f64],
    cond: &ConditioningInputs,
) -> Result<Embedded> {
    let s = g.shape(z).to_vec();
    let [batch, h, w, c] = s[..] else {
        return Err(Error::contract(format!("latent must be [b, h, w, c], got {s:?}")));
    };
    if c != config.latent_channels {
        return Err(Error::contract(format!("latent has {c} channels, config says {}", config.latent_channels)));
    }
    check_times(t, batch)?;
    cond.check(config, batch)?;
    let pt = config.patch;
    let tokens = patchify(g, z, pt)?;
    let x = linear(g, p, "x_embed", tokens)?;
    let pos = g.constant(positional_embedding(config, h / pt, w / pt)?);
    let pos = g.expand(pos, 0, batch)?;
    let x = g.add(x, pos)?;
    let (ctx, vec) = encode_text(g, p, config, cond, batch)?;
    let mut context = Vec::with_capacity(ctx.len());
    for c in ctx {
        context.push(linear(g, p, "context_embed", c)?);
    }
    let y = conditioning_vector(g, p, t, vec)?;
    Ok(Embedded { context, x, y, grid: (h, w, c) })
}

fn final_layer<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, config: &ModelConfig, x: Var, y: Var, grid: (usize, usize, usize)) -> Result<Var> {
    let sy = g.silu(y);
    let m = linear(g, p, "final.mod", sy)?;
    let m = g.split(m, 1, &[config.hidden; 2])?;
    let n = g.layer_norm(x)?;
    let n = modulate(g, n, m[0], m[1])?;
    let out = linear(g, p, "final.out", n)?;
    unpatchify(g, out, config.patch, grid.0, grid.1, grid.2)
}

/// Velocity (or other native target) prediction with the shape of `z`.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    z: Var,
    t: &[f64],
    cond: &ConditioningInputs,
) -> Result<Var> {
    let e = embed(g, p, config, z, t, cond)?;
    let names = config.streams();
    let mut streams: Vec<Var> = e.context.clone();
    streams.push(e.x);
    for i in 0..config.depth {
        let named: Vec<(&str, Var)> = names.iter().copied().zip(streams.iter().copied()).collect();
        streams = mmdit_block(g, p, config, i, &named, e.y)?;
    }
    final_layer(g, p, config, *streams.last().expect("image stream"), e.y, e.grid)
}

/// The concatenated-sequence DiT: every token goes through the image-stream
/// weights as one sequence. With tied stream weights this is what MM-DiT
/// reduces to.
pub fn dit_reference_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    config: &ModelConfig,
    z: Var,
    t: &[f64],
    cond: &ConditioningInputs,
) -> Result<Var> {
    let e = embed(g, p, config, z, t, cond)?;
    let lx = g.shape(e.x)[1];
    let mut parts = e.context.clone();
    parts.push(e.x);
    let mut seq = g.concat(&parts, 1)?;
    let lc = g.shape(seq)[1] - lx;
    let mut flat = config.clone();
    flat.three_streams = false;
    for i in 0..config.depth {
        // Single stream `x`: never pre-only.
        seq = mmdit_block(g, p, &flat, i, &[("x", seq)], e.y)?[0];
    }
    let x = g.slice(seq, 1, lc, lx)?;
    final_layer(g, p, config, x, e.y, e.grid)
}

/// Copies image-stream weights onto every context stream (the context
/// modulation in the last block takes the leading columns).
pub fn tie_streams<T: Scalar>(config: &ModelConfig, p: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = p.clone();
    for i in 0..config.depth {
        for &s in config.streams().iter().filter(|&&s| s != "x") {
            let prefix = format!("blocks.{i}.{s}.");
            let names: Vec<String> = p.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect();
            for name in names {
                let src = p.get(&name.replacen(&format!(".{s}."), ".x.", 1))?;
                let dst = out.get_mut(&name)?;
                if dst.shape() == src.shape() {
                    *dst = src.clone();
                } else {
                    let (rows, cols) = (src.shape()[0], *src.shape().last().expect("non-empty"));
                    let keep = *dst.shape().last().expect("non-empty");
                    let data: Vec<T> = src.data().chunks(cols).take(rows).flat_map(|r| r[..keep].to_vec()).collect();
                    *dst = Tensor::new(dst.shape().to_vec(), data)?;
                }
            }
        }
    }
    Ok(out)
}

/// Mean per-row entropy (nats) of attention weights `[.., l]`.
pub fn attention_entropy<T: Scalar>(probs: &Tensor<T>) -> f64 {
    let l = *probs.shape().last().unwrap_or(&1);
    let rows = probs.data().chunks(l);
    let n = rows.len().max(1);
    rows.map(|r| -r.iter().map(|p| p.as_f64()).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// Upper bound `ln l` of the entropy over `l` keys.
pub fn max_entropy(l: usize) -> f64 {
    (l as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_f64(shape, &(0..n).map(|_| d.sample(rng)).collect::<Vec<_>>()).unwrap()
    }

    fn tiny(depth: usize) -> ModelConfig {
        let mut c = ModelConfig::images(depth);
        c.pos = PosConfig { s: 64, h_max: 64, w_max: 64 };
        c.context_dim = 8;
        c.vocab = 6;
        c.caption_len = 2;
        c
    }

    #[test]
    fn patchify_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = patchify(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 4]);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let vals: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(Tensor::from_f64(&[1, 4, 4, 1], &vals).unwrap());
        let p = patchify(&mut g, x, 2).unwrap();
        // Index-arithmetic oracle: token (pr, pc), feature (i, j) <- x[2pr+i][2pc+j].
        let mut want = Vec::new();
        for pr in 0..2 {
            for pc in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        want.push(((2 * pr + i) * 4 + 2 * pc + j) as f64);
                    }
                }
            }
        }
        assert_eq!(g.value(p).data(), &want[..]);
        let back = unpatchify(&mut g, p, 2, 4, 4, 1).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let odd = g.constant(Tensor::zeros(&[1, 3, 4, 1]));
        assert!(matches!(patchify(&mut g, odd, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn patchify_round_trip_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[2, 6, 4, 3], &mut rng));
        let p = patchify(&mut g, x, 2).unwrap();
        let back = unpatchify(&mut g, p, 2, 6, 4, 3).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn positional_grid_examples() {
        let mut c = ModelConfig::images(1);
        c.pos = PosConfig { s: 256, h_max: 256, w_max: 256 };
        let (rows, _) = positional_grid(&c, 16, 16).unwrap();
        assert_eq!(rows, (0..16).map(f64::from).collect::<Vec<_>>());

        c.pos = PosConfig { s: 512, h_max: 768, w_max: 768 };
        let (full, _) = positional_grid(&c, 48, 48).unwrap();
        let want: Vec<f64> = (0..48).map(|p| (p as f64 - 8.0) * 0.5).collect();
        assert_eq!(full, want);
        assert_eq!(full[0], -4.0);
        assert_eq!(full[47], 19.5);

        // Center crops are slices of the full range, ties start low.
        let (crop, _) = positional_grid(&c, 31, 31).unwrap();
        assert_eq!(crop, want[8..39].to_vec());
        assert!(matches!(positional_grid(&c, 49, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn positional_embedding_symmetric_under_transpose() {
        let mut c = ModelConfig::images(1);
        c.pos = PosConfig { s: 128, h_max: 192, w_max: 192 };
        let e = positional_embedding::<f64>(&c, 5, 5).unwrap();
        let half = c.hidden / 2;
        for r in 0..5 {
            for col in 0..5 {
                let a = &e.data()[(r * 5 + col) * c.hidden..][..c.hidden];
                let b = &e.data()[(col * 5 + r) * c.hidden..][..c.hidden];
                assert_eq!(&a[..half], &b[half..]);
            }
        }
    }

    #[test]
    fn config_rules() {
        assert!(ModelConfig::points(2).validate().is_ok());
        let mut c = ModelConfig::points(2);
        c.hidden = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::points(2);
        c.heads = 4;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&ModelConfig::images(2)).unwrap();
        assert!(json.contains("\"H_max\"") && json.contains("\"latent_channels\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::images(2));
    }

    #[test]
    fn param_count_matches_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (depth, qk, three, enc) in [(1, true, false, 3), (2, true, false, 3), (2, false, true, 3), (3, true, true, 2), (2, true, false, 1)] {
            let mut c = tiny(depth);
            c.qk_norm = qk;
            c.three_streams = three;
            c.encoders = enc;
            let p = init_params::<f64, _>(&c, ParamInit::Standard, &mut rng).unwrap();
            assert_eq!(p.num_elements(), param_count(&c), "{c:?}");
        }
    }

    #[test]
    fn output_shape_matches_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let configs = [tiny(1), tiny(2), ModelConfig::points(1), { let mut c = tiny(1); c.three_streams = true; c }, {
            let mut c = tiny(2);
            c.latent_channels = 3;
            c
        }];
        for c in configs {
            let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
            let side = c.latent_side();
            let mut g = Graph::new();
            let z = g.constant(randn(&[2, side, side, c.latent_channels], &mut rng));
            let cond = ConditioningInputs::from_classes(&c, &[1, 3]);
            let out = model_forward(&mut g, &p, &c, z, &[0.3, 0.9], &cond).unwrap();
            assert_eq!(g.shape(out), g.shape(z));
            let null = ConditioningInputs::null(&c, 2);
            let out = model_forward(&mut g, &p, &c, z, &[0.3, 0.9], &null).unwrap();
            assert!(g.value(out).is_finite());
        }
    }

    #[test]
    fn rejects_bad_time_and_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = ModelConfig::points(1);
        let p = init_params::<f64, _>(&c, ParamInit::Standard, &mut rng).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let cond = ConditioningInputs::from_classes(&c, &[0]);
        assert!(matches!(model_forward(&mut g, &p, &c, z, &[1.5], &cond), Err(Error::Contract(_))));
        assert!(matches!(model_forward(&mut g, &p, &c, z, &[0.5, 0.5], &cond), Err(Error::Contract(_))));
    }

    #[test]
    fn standard_init_is_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = tiny(1);
        let p = init_params::<f64, _>(&c, ParamInit::Standard, &mut rng).unwrap();
        let mut g = Graph::new();
        let z = g.constant(randn(&[1, 8, 8, 1], &mut rng));
        let out = model_forward(&mut g, &p, &c, z, &[0.5], &ConditioningInputs::from_classes(&c, &[2])).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gates_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = tiny(2);
        let mut p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let h = c.hidden;
        // Zero the gamma and zeta columns (chunks 2 and 5) of block 0's modulation.
        for s in ["c", "x"] {
            for (suffix, cols) in [("w", 6 * h), ("b", 6 * h)] {
                let t = p.get_mut(&format!("blocks.0.{s}.mod.{suffix}")).unwrap();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let chunk = (i % cols) / h;
                    if chunk == 2 || chunk == 5 {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut g = Graph::new();
        let cx = g.constant(randn(&[2, 3, h], &mut rng));
        let xx = g.constant(randn(&[2, 4, h], &mut rng));
        let y = g.constant(randn(&[2, h], &mut rng));
        let out = mmdit_block(&mut g, &p, &c, 0, &[("c", cx), ("x", xx)], y).unwrap();
        assert_eq!(g.value(out[0]), g.value(cx));
        assert_eq!(g.value(out[1]), g.value(xx));
    }

    #[test]
    fn swapping_streams_and_weights_swaps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = tiny(2);
        let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let mut swapped = p.clone();
        for name in p.names().filter(|n| n.starts_with("blocks.0.")) {
            let other = if name.contains(".c.") { name.replacen(".c.", ".x.", 1) } else { name.replacen(".x.", ".c.", 1) };
            *swapped.get_mut(name).unwrap() = p.get(&other).unwrap().clone();
        }
        let h = c.hidden;
        let a = randn(&[1, 3, h], &mut rng);
        let b = randn(&[1, 3, h], &mut rng);
        let yv = randn(&[1, h], &mut rng);
        let mut g = Graph::new();
        let (av, bv, y) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(yv.clone()));
        let out = mmdit_block(&mut g, &p, &c, 0, &[("c", av), ("x", bv)], y).unwrap();
        let mut g2 = Graph::new();
        let (av2, bv2, y2) = (g2.constant(a), g2.constant(b), g2.constant(yv));
        let out2 = mmdit_block(&mut g2, &swapped, &c, 0, &[("c", bv2), ("x", av2)], y2).unwrap();
        // Attention is permutation-equivariant, so swapping which stream comes
        // first permutes keys but not results.
        for (u, v) in g.value(out[0]).data().iter().zip(g2.value(out2[1]).data()) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in g.value(out[1]).data().iter().zip(g2.value(out2[0]).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stream_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = tiny(1);
        let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let mut g = Graph::new();
        let cx = g.constant(randn(&[1, 2, c.hidden], &mut rng));
        let xx = g.constant(Tensor::zeros(&[1, 0, c.hidden]));
        assert!(matches!(joint_attention(&mut g, &p, &c, "blocks.0", &[("c", cx), ("x", xx)]), Err(Error::Contract(_))));
    }

    #[test]
    fn block_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = tiny(2);
        c.context_dim = 4;
        let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let h = c.hidden;
        let cx = randn::<f64>(&[1, 2, h], &mut rng);
        let xx = randn::<f64>(&[1, 3, h], &mut rng);
        let yv = randn::<f64>(&[1, h], &mut rng);
        let f = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let (a, b, y) = (g.constant(cx.clone()), g.constant(xx.clone()), g.constant(yv.clone()));
            let out = mmdit_block(g, p, &c, 0, &[("c", a), ("x", b)], y)?;
            let s0 = g.mul(out[0], out[0])?;
            let s1 = g.mul(out[1], out[1])?;
            let (s0, s1) = (g.mean(s0), g.mean(s1));
            g.add(s0, s1)
        };
        let r = finite_diff_check(f, &p, 1e-5, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn attention_entropy_positive_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = tiny(2);
        let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let mut g = Graph::new();
        let cx = g.constant(randn(&[2, 3, c.hidden], &mut rng));
        let xx = g.constant(randn(&[2, 5, c.hidden], &mut rng));
        let a = joint_attention(&mut g, &p, &c, "blocks.0", &[("c", cx), ("x", xx)]).unwrap();
        let h = attention_entropy(g.value(a.probs));
        assert!(h.is_finite() && h > 0.0 && h <= max_entropy(8) + 1e-12);
    }

    #[test]
    fn tie_streams_copies_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = tiny(2);
        let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
        let t = tie_streams(&c, &p).unwrap();
        assert_eq!(t.get("blocks.0.c.qkv.w").unwrap(), t.get("blocks.0.x.qkv.w").unwrap());
        let last = t.get("blocks.1.c.mod.w").unwrap();
        let full = t.get("blocks.1.x.mod.w").unwrap();
        assert_eq!(last.data()[..2 * c.hidden], full.data()[..2 * c.hidden]);
        assert_eq!(last.data()[2 * c.hidden], full.data()[6 * c.hidden]);
    }

    #[test]
    fn tied_streams_reduce_to_concatenated_dit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in [tiny(2), { let mut c = tiny(3); c.three_streams = true; c }] {
            let p = init_params::<f64, _>(&c, ParamInit::Dense, &mut rng).unwrap();
            let tied = tie_streams(&c, &p).unwrap();
            let z = randn::<f64>(&[2, 8, 8, 1], &mut rng);
            let cond = ConditioningInputs::from_classes(&c, &[0, 4]);
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let a = model_forward(&mut g, &tied, &c, zv, &[0.2, 0.7], &cond).unwrap();
            let zv2 = g.constant(z);
            let b = dit_reference_forward(&mut g, &tied, &c, zv2, &[0.2, 0.7], &cond).unwrap();
            assert_eq!(g.value(a), g.value(b));
        }
    }
}
