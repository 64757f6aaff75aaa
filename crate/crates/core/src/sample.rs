//! Deterministic ODE sampling: Euler integration, classifier-free guidance,
//! resolution-dependent timestep shifting and the path-length diagnostic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::evalrank::VariantSpec;
use crate::mmdit::{model_forward, ConditioningInputs, ModelConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};
use crate::timesamplers::TimestepDensity;
use crate::trajectories::{Parameterization, Schedule};

/// Shift used for 1024^2 images.
pub const PAPER_SHIFT: f64 = 3.0;

/// `t_m = alpha t / (1 + (alpha - 1) t)`.
pub fn shift_time_alpha(t: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::parameter(format!("shift must be positive and finite, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("shift_time: t = {t} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(t);
    }
    Ok(alpha * t / (1.0 + (alpha - 1.0) * t))
}

/// Maps a time at resolution `n` pixels to resolution `m` with equal
/// per-pixel uncertainty; `alpha = sqrt(m / n)`.
pub fn shift_time(t_n: f64, n: f64, m: f64) -> Result<f64> {
    if !(n > 0.0 && m > 0.0) {
        return Err(Error::parameter(format!("pixel counts must be positive, got ({n}, {m})")));
    }
    shift_time_alpha(t_n, (m / n).sqrt())
}

/// `sigma(t, n) = t / (1 - t) / sqrt(n)`.
pub fn uncertainty_sigma(t: f64, n: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::domain(format!("uncertainty_sigma needs t in [0, 1), got {t}")));
    }
    if !(n >= 1.0) {
        return Err(Error::parameter(format!("pixel count must be at least 1, got {n}")));
    }
    Ok(t / (1.0 - t) / n.sqrt())
}

/// Density of `shift(u, alpha)` for `u ~ density`: the base density at the
/// preimage `shift(t, 1/alpha)` times its derivative
/// `(1/alpha) / (1 + (1/alpha - 1) t)^2`.
pub fn shifted_pdf(density: &TimestepDensity, t: f64, alpha: f64) -> Result<f64> {
    let inv = 1.0 / alpha;
    let u = shift_time_alpha(t, inv)?;
    let jac = inv / (1.0 + (inv - 1.0) * t).powi(2);
    Ok(density.pdf(u)? * jac)
}

/// `v_uncond + scale (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    ensure_same_len("cfg_combine", v_cond.len(), v_uncond.len())?;
    Ok(v_cond.iter().zip(v_uncond).map(|(c, u)| u + scale * (c - u)).collect())
}

/// Steps, guidance scale and timestep shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    #[serde(default = "one")]
    pub shift: f64,
}

fn one() -> f64 {
    1.0
}

impl SamplerConfig {
    pub fn new(steps: usize, guidance: f64) -> Self {
        Self { steps, guidance, shift: 1.0 }
    }

    /// Shift chosen to move from `n` to `m` pixels.
    pub fn for_resolution(steps: usize, guidance: f64, n: f64, m: f64) -> Result<Self> {
        if !(n > 0.0 && m > 0.0) {
            return Err(Error::parameter("pixel counts must be positive"));
        }
        Ok(Self { steps, guidance, shift: (m / n).sqrt() })
    }
}

/// `steps + 1` descending times: uniform on `[0, 1]`, shifted, then mapped
/// linearly onto the schedule's sampling interval.
pub fn time_grid(schedule: &Schedule, steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::parameter("sampler needs at least one step"));
    }
    let (hi, lo) = schedule.sampling_interval()?;
    (0..=steps)
        .map(|k| {
            let u = shift_time_alpha(1.0 - k as f64 / steps as f64, shift)?;
            Ok(if u == 1.0 { hi } else if u == 0.0 { lo } else { lo + (hi - lo) * u })
        })
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::contract("time grid needs at least two points"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::contract("time grid must be strictly decreasing within [0, 1]"));
    }
    Ok(())
}

/// Final state and, when requested, every intermediate state.
#[derive(Clone, Debug, PartialEq)]
pub struct Integration {
    pub z: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Runs `step(z_k, t_k, t_{k+1}) -> z_{k+1}` along `grid`.
pub fn integrate<F>(z1: Vec<f64>, grid: &[f64], keep: bool, mut step: F) -> Result<Integration>
where
    F: FnMut(&[f64], f64, f64) -> Result<Vec<f64>>,
{
    check_grid(grid)?;
    let mut states = Vec::new();
    let mut z = z1;
    for (k, w) in grid.windows(2).enumerate() {
        if keep {
            states.push(z.clone());
        }
        let next = step(&z, w[0], w[1])?;
        ensure_same_len("integrate", next.len(), z.len())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("integration produced a non-finite state at step {k} (t = {})", w[0])));
        }
        z = next;
    }
    if keep {
        states.push(z.clone());
    }
    Ok(Integration { z, states })
}

/// `z_{k+1} = z_k + (t_{k+1} - t_k) v(z_k, t_k)`.
pub fn euler_integrate<F>(mut v: F, z1: Vec<f64>, grid: &[f64], keep: bool) -> Result<Integration>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    integrate(z1, grid, keep, |z, t, t_next| {
        let vel = v(z, t)?;
        ensure_same_len("euler velocity", vel.len(), z.len())?;
        Ok(z.iter().zip(&vel).map(|(z, v)| z + (t_next - t) * v).collect())
    })
}

/// Sum of the Euclidean norms of successive state increments.
pub fn path_length(states: &[Vec<f64>]) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::contract("path length needs at least two states"));
    }
    Ok(states
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
        .sum())
}

/// Per-sample path length over trajectories of `n` samples with `dim`
/// coordinates each, and the per-sample straight-line distance.
pub fn sample_path_lengths(states: &[Vec<f64>], dim: usize) -> Result<Vec<(f64, f64)>> {
    let first = states.first().ok_or_else(|| Error::contract("empty trajectory"))?;
    if dim == 0 || first.len() % dim != 0 {
        return Err(Error::contract("state length is not a multiple of dim"));
    }
    let last = states.last().expect("non-empty");
    (0..first.len() / dim)
        .map(|i| {
            let r = i * dim..(i + 1) * dim;
            let traj: Vec<Vec<f64>> = states.iter().map(|s| s[r.clone()].to_vec()).collect();
            let straight = first[r.clone()].iter().zip(&last[r.clone()]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok((path_length(&traj)?, straight))
        })
        .collect()
}

/// Evaluates the network on `z` at time `t` for each row of the batch,
/// with and without conditioning when guidance is active, and returns the
/// guided prediction in the variant's output space.
fn guided_prediction<T: Scalar>(
    variant: &VariantSpec,
    config: &ModelConfig,
    params: &ParamStore<T>,
    cond: &ConditioningInputs,
    shape: [usize; 3],
    z: &[f64],
    t: f64,
    guidance: f64,
) -> Result<Vec<f64>> {
    let n = cond.batch(config);
    let c_in = variant.schedule.input_scale(t)?;
    let input: Vec<f64> = z.iter().map(|v| c_in * v).collect();
    let guided = guidance != 1.0;
    let (rows, conds) = if guided {
        let null = ConditioningInputs::null(config, n);
        let mut both = cond.clone();
        both.ids.extend(null.ids);
        both.keep.extend(null.keep);
        let mut x = input.clone();
        x.extend_from_slice(&input);
        (2 * n, (both, x))
    } else {
        (n, (cond.clone(), input))
    };
    let mut g = Graph::<T>::new();
    let zin = g.constant(Tensor::from_f64(&[rows, shape[0], shape[1], shape[2]], &conds.1)?);
    let out = model_forward(&mut g, params, config, zin, &vec![t; rows], &conds.0)?;
    let pred = g.value(out).to_f64_vec();
    if guided {
        let (c, u) = pred.split_at(z.len());
        cfg_combine(c, u, guidance)
    } else {
        Ok(pred)
    }
}

/// Advances `z` from `t` to `t_next` given a prediction in `variant`'s space.
///
/// Rectified flow takes a plain Euler step with the predicted velocity. The
/// other families step as `a(t') x_hat + b(t') eps_hat`, which is Euler in
/// `(z/a, b/a)` coordinates and coincides with the plain step for rectified
/// flow; it stays stable where `b'` is huge (EDM near `sigma = 80`).
pub fn variant_step(variant: &VariantSpec, z: &[f64], pred: &[f64], t: f64, t_next: f64) -> Result<Vec<f64>> {
    ensure_same_len("variant_step", z.len(), pred.len())?;
    let s = &variant.schedule;
    if *s == Schedule::RectifiedFlow && variant.parameterization == Parameterization::Velocity {
        return Ok(z.iter().zip(pred).map(|(z, v)| z + (t_next - t) * v).collect());
    }
    let (c, cn) = (s.coeffs(t)?, s.coeffs(t_next)?);
    z.iter()
        .zip(pred)
        .map(|(&z, &p)| {
            let (x, e) = variant.parameterization.to_pair(p, z, &c)?;
            Ok(cn.a * x + cn.b * e)
        })
        .collect()
}

/// Samples drawn by a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Vec<f64>,
    pub classes: Vec<usize>,
    pub states: Vec<Vec<f64>>,
}

/// Draws one sample per entry of `classes`, starting from `b(t_max) eps`.
#[allow(clippy::too_many_arguments)]
pub fn sample_model<T: Scalar, R: Rng + ?Sized>(
    variant: &VariantSpec,
    config: &ModelConfig,
    params: &ParamStore<T>,
    shape: [usize; 3],
    classes: &[usize],
    sampler: &SamplerConfig,
    keep: bool,
    rng: &mut R,
) -> Result<Samples> {
    let cond = ConditioningInputs::from_classes(config, classes);
    sample_with_conditioning(variant, config, params, shape, &cond, sampler, keep, rng).map(|(x, states)| Samples {
        x,
        classes: classes.to_vec(),
        states,
    })
}

/// As [`sample_model`] with explicit conditioning.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_conditioning<T: Scalar, R: Rng + ?Sized>(
    variant: &VariantSpec,
    config: &ModelConfig,
    params: &ParamStore<T>,
    shape: [usize; 3],
    cond: &ConditioningInputs,
    sampler: &SamplerConfig,
    keep: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let grid = time_grid(&variant.schedule, sampler.steps, sampler.shift)?;
    let dim: usize = shape.iter().product();
    let n = cond.batch(config);
    let b1 = variant.schedule.coeffs(grid[0])?.b;
    let z1: Vec<f64> = (0..n * dim).map(|_| b1 * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    let out = integrate(z1, &grid, keep, |z, t, t_next| {
        let pred = guided_prediction(variant, config, params, cond, shape, z, t, sampler.guidance)?;
        variant_step(variant, z, &pred, t, t_next)
    })?;
    Ok((out.z, out.states))
}
