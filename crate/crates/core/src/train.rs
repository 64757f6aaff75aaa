//! Conditional flow matching training over any variant: synthetic datasets,
//! the CFM loss in the variant's native output space, AdamW with linear
//! warmup, EMA, per-source CFG dropout and stratified validation.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::VariantSpec;
use crate::mmdit::{init_params, model_forward, ConditioningInputs, ModelConfig, ParamInit};
use crate::par::{derive_seed, map_range, Exec};
use crate::sample::shift_time_alpha;
use crate::tensor::{Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use crate::trajectories::{TRAIN_T_MAX, TRAIN_T_MIN};

/// Procedural datasets with class labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyDataset {
    /// Uniform on the 8 dark cells of a 4x4 board over `[-2, 2]^2`; class = cell.
    Checkerboard2D,
    /// 8 Gaussians (std 0.2) evenly spaced on a circle of radius 2; class = component.
    GaussMix2D,
    /// 16x16 grayscale circles, squares and triangles in `{-1, +1}`; class = shape.
    ShapesImage,
}

pub const GAUSSMIX_RADIUS: f64 = 2.0;
pub const GAUSSMIX_STD: f64 = 0.2;
pub const SHAPES_SIDE: usize = 16;

impl ToyDataset {
    pub fn name(self) -> &'static str {
        match self {
            ToyDataset::Checkerboard2D => "checkerboard2d",
            ToyDataset::GaussMix2D => "gaussmix2d",
            ToyDataset::ShapesImage => "shapesimage",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ToyDataset::Checkerboard2D | ToyDataset::GaussMix2D => 8,
            ToyDataset::ShapesImage => 3,
        }
    }

    /// `[h, w, c]` of one sample.
    pub fn latent_shape(self) -> [usize; 3] {
        match self {
            ToyDataset::Checkerboard2D | ToyDataset::GaussMix2D => [1, 1, 2],
            ToyDataset::ShapesImage => [SHAPES_SIDE, SHAPES_SIDE, 1],
        }
    }

    pub fn dim(self) -> usize {
        self.latent_shape().iter().product()
    }

    /// Default model for this dataset at `depth`.
    pub fn model_config(self, depth: usize) -> ModelConfig {
        match self {
            ToyDataset::ShapesImage => ModelConfig::images(depth),
            _ => ModelConfig::points(depth),
        }
    }

    /// Appends one sample of `class` to `out`.
    pub fn sample_class<R: Rng + ?Sized>(self, class: usize, rng: &mut R, out: &mut Vec<f64>) {
        match self {
            ToyDataset::GaussMix2D => {
                let a = 2.0 * PI * class as f64 / 8.0;
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                out.push(GAUSSMIX_RADIUS * a.cos() + GAUSSMIX_STD * nx);
                out.push(GAUSSMIX_RADIUS * a.sin() + GAUSSMIX_STD * ny);
            }
            ToyDataset::Checkerboard2D => {
                let row = class / 2;
                let col = 2 * (class % 2) + row % 2;
                out.push(-2.0 + col as f64 + rng.random::<f64>());
                out.push(-2.0 + row as f64 + rng.random::<f64>());
            }
            ToyDataset::ShapesImage => {
                let cy = rng.random_range(5.5..9.5);
                let cx = rng.random_range(5.5..9.5);
                let r = rng.random_range(3.5..5.0);
                for i in 0..SHAPES_SIDE {
                    for j in 0..SHAPES_SIDE {
                        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                        let inside = match class {
                            0 => dx * dx + dy * dy <= r * r,
                            1 => dx.abs().max(dy.abs()) <= 0.8 * r,
                            _ => (-r..=0.7 * r).contains(&dy) && dx.abs() <= 0.5 * (dy + r),
                        };
                        out.push(if inside { 1.0 } else { -1.0 });
                    }
                }
            }
        }
    }

    /// `n` samples with uniformly drawn classes.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> DataBatch {
        let mut x = Vec::with_capacity(n * self.dim());
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..self.num_classes());
            self.sample_class(k, rng, &mut x);
            classes.push(k);
        }
        DataBatch { x, classes }
    }

    /// `per_class` samples of every class, grouped by class.
    pub fn sample_balanced<R: Rng + ?Sized>(self, per_class: usize, rng: &mut R) -> DataBatch {
        let mut x = Vec::with_capacity(per_class * self.num_classes() * self.dim());
        let mut classes = Vec::new();
        for k in 0..self.num_classes() {
            for _ in 0..per_class {
                self.sample_class(k, rng, &mut x);
                classes.push(k);
            }
        }
        DataBatch { x, classes }
    }
}

/// Flattened samples and their classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    pub x: Vec<f64>,
    pub classes: Vec<usize>,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Replaces each conditioning source by zeros with probability `p`.
pub fn cfg_dropout<R: Rng + ?Sized>(cond: &ConditioningInputs, p: f64, rng: &mut R) -> Result<ConditioningInputs> {
    check_probability("cfg_drop", p)?;
    let mut out = cond.clone();
    for k in out.keep.iter_mut() {
        if rng.random::<f64>() < p {
            *k = false;
        }
    }
    Ok(out)
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::parameter(format!("{what} must be a probability, got {p}")));
    }
    Ok(())
}

/// One CFM regression problem: model inputs, times, targets and per-sample
/// loss factors, all flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmBatch {
    pub t: Vec<f64>,
    pub eps: Vec<f64>,
    /// `z_t`, before any input preconditioning.
    pub z: Vec<f64>,
    /// What the network sees: `c_in(t) z_t`.
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub factor: Vec<f64>,
}

/// Builds the regression problem for `x0` (rows of `dim`) at times `t`,
/// drawing the noise from `rng`.
pub fn cfm_batch_at<R: Rng + ?Sized>(variant: &VariantSpec, x0: &[f64], dim: usize, t: &[f64], rng: &mut R) -> Result<CfmBatch> {
    if dim == 0 || x0.len() != dim * t.len() {
        return Err(Error::contract(format!("cfm batch: {} values for {} times of dim {dim}", x0.len(), t.len())));
    }
    let mut eps = Vec::with_capacity(x0.len());
    let mut z = Vec::with_capacity(x0.len());
    let mut input = Vec::with_capacity(x0.len());
    let mut target = Vec::with_capacity(x0.len());
    let mut factor = Vec::with_capacity(t.len());
    let p = variant.parameterization;
    for (i, &ti) in t.iter().enumerate() {
        let c = variant.schedule.coeffs(ti)?;
        let c_in = variant.schedule.input_scale(ti)?;
        factor.push(variant.loss_factor(ti)?);
        for &x in &x0[i * dim..(i + 1) * dim] {
            let e: f64 = StandardNormal.sample(rng);
            let zi = c.a * x + c.b * e;
            eps.push(e);
            z.push(zi);
            input.push(c_in * zi);
            target.push(p.from_pair(x, e, zi, &c)?);
        }
    }
    Ok(CfmBatch { t: t.to_vec(), eps, z, input, target, factor })
}

/// Draws `t ~ pi` (pushed through the shift map when `shift != 1`), clamps it
/// to the training interval and builds the regression problem.
pub fn cfm_batch<R: Rng + ?Sized>(variant: &VariantSpec, x0: &[f64], dim: usize, shift: f64, rng: &mut R) -> Result<CfmBatch> {
    if dim == 0 || !x0.len().is_multiple_of(dim) {
        return Err(Error::contract("cfm batch: data length is not a multiple of dim"));
    }
    let n = x0.len() / dim;
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let u = variant.density.sample(rng);
        t.push(shift_time_alpha(u, shift)?.clamp(TRAIN_T_MIN, TRAIN_T_MAX));
    }
    // Times first, then noise, so the stream layout is independent of dim.
    cfm_batch_at(variant, x0, dim, &t, rng)
}

/// `mean_i factor_i * mean_j (pred_ij - target_ij)^2` with the prediction
/// produced by `model(graph, input, t)`. `shape` is the full latent shape
/// including the batch axis.
pub fn cfm_loss<T, F>(g: &mut Graph<T>, batch: &CfmBatch, shape: &[usize], model: F) -> Result<Var>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, Var, &[f64]) -> Result<Var>,
{
    let input = g.constant(Tensor::from_f64(shape, &batch.input)?);
    let pred = model(g, input, &batch.t)?;
    let target = g.constant(Tensor::from_f64(shape, &batch.target)?);
    let w = g.constant(Tensor::from_f64(&[batch.t.len()], &batch.factor)?);
    g.weighted_mse(pred, target, w)
}

/// Per-level validation losses and the aggregate over all but the top level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValLoss {
    pub t: Vec<f64>,
    pub levels: Vec<f64>,
    pub aggregate: f64,
}

/// Equispaced levels `(k + 1/2) / L` in `(0, 1)`.
pub fn validation_levels(levels: usize) -> Vec<f64> {
    (0..levels).map(|k| (k as f64 + 0.5) / levels as f64).collect()
}

/// CFM loss at fixed, equispaced times. Level `k` draws its noise from a
/// stream seeded by `(seed, k)`, so repeated calls return identical values.
pub fn stratified_validation_loss<T, F>(
    variant: &VariantSpec,
    val: &DataBatch,
    shape: [usize; 3],
    levels: usize,
    seed: u64,
    exec: Exec,
    model: F,
) -> Result<ValLoss>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var, &[f64]) -> Result<Var> + Sync,
{
    if levels < 2 {
        return Err(Error::contract(format!("stratified validation needs at least 2 levels, got {levels}")));
    }
    if val.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    let dim: usize = shape.iter().product();
    let ts = validation_levels(levels);
    let full = [val.len(), shape[0], shape[1], shape[2]];
    let losses = map_range(exec, levels, |k| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let t = vec![ts[k]; val.len()];
        let batch = cfm_batch_at(variant, &val.x, dim, &t, &mut rng)?;
        let mut g = Graph::new();
        let loss = cfm_loss(&mut g, &batch, &full, &model)?;
        Ok(g.value(loss).data()[0].as_f64())
    });
    let levels_out = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    let head = &levels_out[..levels - 1];
    let aggregate = head.iter().sum::<f64>() / head.len() as f64;
    Ok(ValLoss { t: ts, levels: levels_out, aggregate })
}

/// `ema <- decay ema + (1 - decay) params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if !ema.same_layout(params) {
        return Err(Error::contract("ema_update: EMA and parameter registries differ"));
    }
    check_probability("ema decay", decay)?;
    let (d, e) = (T::from_f64(decay), T::from_f64(1.0 - decay));
    for ((_, m), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (a, &b) in m.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + e * b;
        }
    }
    Ok(())
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut s = ParamStore::new();
            for (n, t) in p.iter() {
                s.insert(n, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { beta1, beta2, eps, weight_decay, m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &crate::tensor::Gradients<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let f = T::from_f64;
        let (b1, b2, eps, wd, lr) = (f(self.beta1), f(self.beta2), f(self.eps), f(self.weight_decay), f(lr));
        let (bc1, bc2) = (f(bc1), f(bc2));
        let one = T::one();
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name)?;
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = self.v.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let step = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *pi = *pi - lr * (step + wd * *pi);
            }
        }
        Ok(())
    }
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-4
}
fn default_warmup() -> u64 {
    1000
}
fn default_ema_decay() -> f64 {
    0.99
}
fn default_ema_period() -> u64 {
    100
}
fn default_one() -> u64 {
    1
}
fn default_cfg_drop() -> f64 {
    0.464
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_shift() -> f64 {
    1.0
}
fn default_levels() -> usize {
    8
}
fn default_val_size() -> usize {
    256
}
fn default_val_every() -> u64 {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Training run description, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: VariantSpec,
    pub dataset: ToyDataset,
    pub steps: u64,
    #[serde(default = "default_one")]
    pub depth: u64,
    /// Overrides the dataset's default model.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// EMA decay per `ema_period` steps; applied every `ema_every` steps with
    /// the matching fractional power.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_ema_period")]
    pub ema_period: u64,
    #[serde(default = "default_one")]
    pub ema_every: u64,
    #[serde(default = "default_cfg_drop")]
    pub cfg_drop: f64,
    /// Timestep shift applied to training times (1 = none).
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_levels")]
    pub val_levels: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Validation cadence in steps; 0 disables validation.
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: VariantSpec, dataset: ToyDataset, steps: u64) -> Self {
        Self {
            variant,
            dataset,
            steps,
            depth: 1,
            model: None,
            batch: default_batch(),
            lr: default_lr(),
            warmup: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            ema_decay: default_ema_decay(),
            ema_period: default_ema_period(),
            ema_every: 1,
            cfg_drop: default_cfg_drop(),
            shift: default_shift(),
            val_levels: default_levels(),
            val_size: default_val_size(),
            val_every: default_val_every(),
            precision: Precision::F64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("cfg_drop", self.cfg_drop)?;
        check_probability("ema_decay", self.ema_decay)?;
        check_probability("beta1", self.beta1)?;
        check_probability("beta2", self.beta2)?;
        if self.batch == 0 {
            return Err(Error::parameter("batch must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::parameter("lr and weight_decay must be non-negative and adam_eps positive"));
        }
        if self.ema_every == 0 || self.ema_period == 0 {
            return Err(Error::parameter("ema_every and ema_period must be positive"));
        }
        if !(self.shift > 0.0) {
            return Err(Error::parameter(format!("shift must be positive, got {}", self.shift)));
        }
        if self.val_every > 0 && (self.val_levels < 2 || self.val_size == 0) {
            return Err(Error::parameter("validation needs at least 2 levels and a non-empty set"));
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = match &self.model {
            Some(m) => m.clone(),
            None => self.dataset.model_config(self.depth as usize),
        };
        let [h, w, c] = self.dataset.latent_shape();
        if c != m.latent_channels || h % m.patch != 0 || w % m.patch != 0 {
            return Err(Error::parameter(format!(
                "model expects {} channels with patch {}, dataset is {h}x{w}x{c}",
                m.latent_channels, m.patch
            )));
        }
        Ok(m)
    }

    /// Decay applied at each EMA update.
    pub fn ema_step_decay(&self) -> f64 {
        self.ema_decay.powf(self.ema_every as f64 / self.ema_period as f64)
    }

    /// Linear warmup: 0 at step 0, full `lr` from step `warmup` on.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup as f64
        }
    }
}

/// Scalars reported after each step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub opt: AdamW<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// A training run: config, model, state and the fixed validation set.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub state: TrainState<T>,
    pub val: DataBatch,
    pub exec: Exec,
}

/// Stream offsets used to derive independent seeds from the run seed.
const INIT_STREAM: u64 = 1 << 40;
const VAL_DATA_STREAM: u64 = 2 << 40;
const VAL_NOISE_STREAM: u64 = 3 << 40;

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model_config()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
        let params: ParamStore<T> = init_params(&model, ParamInit::Standard, &mut init_rng)?;
        let opt = AdamW::new(&params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        let val = Self::validation_set(&config);
        let state = TrainState {
            ema: params.clone(),
            params,
            opt,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        Ok(Self { config, model, state, val, exec: Exec::default() })
    }

    fn validation_set(config: &TrainConfig) -> DataBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, VAL_DATA_STREAM));
        config.dataset.sample(config.val_size, &mut rng)
    }

    fn shape(&self, n: usize) -> [usize; 4] {
        let [h, w, c] = self.config.dataset.latent_shape();
        [n, h, w, c]
    }

    /// One optimizer update on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let cfg = &self.config;
        let k = self.state.step;
        let rng = &mut self.state.rng;
        let data = cfg.dataset.sample(cfg.batch, rng);
        let cond = ConditioningInputs::from_classes(&self.model, &data.classes);
        let cond = cfg_dropout(&cond, cfg.cfg_drop, rng)?;
        let batch = cfm_batch(&cfg.variant, &data.x, cfg.dataset.dim(), cfg.shift, rng)?;

        let (params, model) = (&self.state.params, &self.model);
        let mut g = Graph::new();
        let loss = cfm_loss(&mut g, &batch, &self.shape(cfg.batch), |g, z, t| {
            model_forward(g, params, model, z, t, &cond)
        })?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::numerical(format!("step {k}: non-finite loss {loss_value}")));
        }
        let mut grads = g.backward(loss)?;
        grads.fill_missing(params);
        for (name, gr) in grads.iter() {
            if !gr.is_finite() {
                return Err(Error::numerical(format!("step {k}: non-finite gradient in parameter `{name}`")));
            }
        }
        let grad_norm = grads.norm();
        let lr = cfg.lr_at(k + 1);
        self.state.opt.update(&mut self.state.params, &grads, lr)?;
        self.state.step += 1;
        if self.state.step.is_multiple_of(cfg.ema_every) {
            ema_update(&mut self.state.ema, &self.state.params, cfg.ema_step_decay())?;
        }
        Ok(StepMetrics { step: self.state.step, loss: loss_value, lr, grad_norm })
    }

    /// Stratified validation loss with the raw or the EMA weights.
    pub fn validate(&self, use_ema: bool) -> Result<ValLoss> {
        let params = if use_ema { &self.state.ema } else { &self.state.params };
        let model = &self.model;
        let cond = ConditioningInputs::from_classes(model, &self.val.classes);
        stratified_validation_loss(
            &self.config.variant,
            &self.val,
            self.config.dataset.latent_shape(),
            self.config.val_levels,
            derive_seed(self.config.seed, VAL_NOISE_STREAM),
            self.exec,
            |g, z, t| model_forward(g, params, model, z, t, &cond),
        )
    }

    /// Trains until `config.steps`, streaming one CSV row per step.
    pub fn run<W: Write>(&mut self, csv: &mut MetricsCsv<W>) -> Result<()> {
        while self.state.step < self.config.steps {
            let m = self.step()?;
            let every = self.config.val_every;
            let val = if every > 0 && (m.step % every == 0 || m.step == self.config.steps) {
                Some(self.validate(false)?)
            } else {
                None
            };
            csv.row(&m, val.as_ref())?;
        }
        Ok(())
    }

    /// Parameters, EMA, optimizer moments, step, RNG position and config.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_store("params.", &self.state.params);
        ck.insert_store("ema.", &self.state.ema);
        ck.insert_store("adam.m.", &self.state.opt.m);
        ck.insert_store("adam.v.", &self.state.opt.v);
        let rng = &self.state.rng;
        let meta = &mut ck.metadata;
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("step".into(), self.state.step.into());
        meta.insert("adam_t".into(), self.state.opt.t.into());
        meta.insert("rng_seed".into(), hex(&rng.get_seed()).into());
        meta.insert("rng_stream".into(), rng.get_stream().to_string().into());
        meta.insert("rng_word_pos".into(), rng.get_word_pos().to_string().into());
        Ok(ck)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.metadata.get(k).ok_or_else(|| Error::parse(format!("checkpoint lacks `{k}`")));
        let config: TrainConfig = serde_json::from_value(meta("config")?.clone())?;
        let mut t = Self::new(config)?;
        let num = |k: &str| -> Result<u64> { meta(k)?.as_u64().ok_or_else(|| Error::parse(format!("`{k}` is not an integer"))) };
        let text = |k: &str| -> Result<String> {
            meta(k)?.as_str().map(str::to_string).ok_or_else(|| Error::parse(format!("`{k}` is not a string")))
        };
        let params = ck.get_store("params.")?;
        if !params.same_layout(&t.state.params) {
            return Err(Error::parse("checkpoint parameters do not match the configured model"));
        }
        t.state.params = params;
        t.state.ema = ck.get_store("ema.")?;
        t.state.opt.m = ck.get_store("adam.m.")?;
        t.state.opt.v = ck.get_store("adam.v.")?;
        t.state.opt.t = num("adam_t")?;
        t.state.step = num("step")?;
        let seed = unhex(&text("rng_seed")?)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(text("rng_stream")?.parse().map_err(|_| Error::parse("bad rng_stream"))?);
        rng.set_word_pos(text("rng_word_pos")?.parse().map_err(|_| Error::parse("bad rng_word_pos"))?);
        t.state.rng = rng;
        Ok(t)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    if s.len() != 64 {
        return Err(Error::parse("rng seed must be 64 hex digits"));
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| Error::parse("bad hex in rng seed"))?;
    }
    Ok(out)
}

/// Append-only metrics CSV: `step,loss,lr,grad_norm,val_0..,val_agg`.
/// Validation columns are empty on rows without a validation pass.
pub struct MetricsCsv<W> {
    out: W,
    levels: usize,
}

impl<W: Write> MetricsCsv<W> {
    pub fn new(mut out: W, levels: usize, header: bool) -> Result<Self> {
        if header {
            let mut h = String::from("step,loss,lr,grad_norm");
            for k in 0..levels {
                h.push_str(&format!(",val_{k}"));
            }
            h.push_str(",val_agg\n");
            out.write_all(h.as_bytes())?;
        }
        Ok(Self { out, levels })
    }

    pub fn row(&mut self, m: &StepMetrics, val: Option<&ValLoss>) -> Result<()> {
        let mut s = format!("{},{:?},{:?},{:?}", m.step, m.loss, m.lr, m.grad_norm);
        match val {
            Some(v) => {
                for l in &v.levels {
                    s.push_str(&format!(",{l:?}"));
                }
                s.push_str(&format!(",{:?}", v.aggregate));
            }
            None => s.push_str(&",".repeat(self.levels + 1)),
        }
        s.push('\n');
        self.out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
