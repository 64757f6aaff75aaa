//! Forward processes `z_t = a(t) x0 + b(t) eps` and their log-SNR algebra.
//!
//! Every family exposes `a`, `b` and their time derivatives on `[0, 1]`
//! (`t = 0` is data, `t = 1` is noise). Log-SNR `lambda = 2 ln(a/b)` and its
//! derivative are derived from those four numbers, as are the conversions
//! between prediction spaces and the loss weightings.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};
use crate::stats::{gaussian_pdf, normal_pdf, normal_quantile, sech};
use crate::timesamplers::TimestepDensity;

/// Data standard deviation assumed by the EDM preconditioning (`0.5^2` in the
/// EDM weighting).
pub const EDM_SIGMA_DATA: f64 = 0.5;

/// Clamp applied to `t` inside training-loss paths only.
pub const TRAIN_T_MIN: f64 = 1e-5;
pub const TRAIN_T_MAX: f64 = 1.0 - 1e-5;

/// `a`, `b` and their derivatives at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coeffs {
    pub a: f64,
    pub b: f64,
    pub da: f64,
    pub db: f64,
}

impl Coeffs {
    /// `a'/a`, the coefficient of `z` in the conditional velocity.
    pub fn drift(&self, t: f64) -> Result<f64> {
        if self.a == 0.0 {
            return Err(Error::domain(format!("a(t) = 0 at t = {t}: a'/a has a pole")));
        }
        Ok(self.da / self.a)
    }
}

/// One log-SNR evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrPoint {
    pub t: f64,
    pub lambda: f64,
    pub lambda_prime: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LdmVariant {
    /// `beta` linear in the index.
    Ddpm,
    /// `sqrt(beta)` linear in the index.
    Ldm,
}

/// Discrete variance-preserving table `a_k = prod_{s<=k} (1 - beta_s)^(1/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmTable {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl LdmTable {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Table index for continuous `t`: `t (T-1)` rounded to nearest with ties
    /// going down (2.5 -> 2).
    pub fn index(&self, t: f64) -> Result<usize> {
        check_unit("ldm table lookup", t)?;
        let x = t * (self.len() - 1) as f64;
        Ok(((x - 0.5).ceil().max(0.0)) as usize)
    }

    /// Piecewise-constant `a(t)`.
    pub fn a_at(&self, t: f64) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn b_at(&self, t: f64) -> Result<f64> {
        let a = self.a_at(t)?;
        Ok((1.0 - a * a).sqrt())
    }
}

/// Builds the DDPM / LDM discrete table.
pub fn ldm_linear_coeffs(beta0: f64, beta_end: f64, steps: usize, variant: LdmVariant) -> Result<LdmTable> {
    if !(beta0 > 0.0 && beta0 < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "betas must lie in (0, 1), got beta0 = {beta0}, beta_end = {beta_end}"
        )));
    }
    if beta0 > beta_end {
        return Err(Error::parameter(format!("beta0 = {beta0} exceeds beta_end = {beta_end}")));
    }
    if steps < 2 {
        return Err(Error::parameter(format!("need at least 2 steps, got {steps}")));
    }
    let last = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            let f = k as f64 / last;
            match variant {
                LdmVariant::Ddpm => beta0 + f * (beta_end - beta0),
                LdmVariant::Ldm => {
                    let r = beta0.sqrt() + f * (beta_end.sqrt() - beta0.sqrt());
                    r * r
                }
            }
        })
        .collect();
    let mut log_prod = 0.0;
    let alphas = betas
        .iter()
        .map(|&beta| {
            log_prod += (1.0 - beta).ln();
            (0.5 * log_prod).exp()
        })
        .collect();
    Ok(LdmTable { betas, alphas })
}

/// Natural cubic spline through `(k, y_k)`, `k = 0..n`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CubicSpline {
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub(crate) fn new(y: Vec<f64>) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system h=1: m_{i-1} + 4 m_i + m_{i+1} = 6 (y_{i+1} - 2 y_i + y_{i-1}).
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
                if i == 0 {
                    c[0] = 1.0 / 4.0;
                    d[0] = rhs / 4.0;
                } else {
                    let denom = 4.0 - c[i - 1];
                    c[i] = 1.0 / denom;
                    d[i] = (rhs - d[i - 1]) / denom;
                }
            }
            for i in (0..k).rev() {
                m[i + 1] = if i + 1 == k { d[i] } else { d[i] - c[i] * m[i + 2] };
            }
        }
        Self { y, m }
    }

    /// Value and derivative at `x` in `[0, n-1]`.
    pub(crate) fn eval(&self, x: f64) -> (f64, f64) {
        let n = self.y.len();
        let i = (x.floor() as usize).min(n - 2);
        let u = x - i as f64;
        let w = 1.0 - u;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1]);
        let value = m0 * w * w * w / 6.0
            + m1 * u * u * u / 6.0
            + (y0 - m0 / 6.0) * w
            + (y1 - m1 / 6.0) * u;
        let slope = -m0 * w * w / 2.0 + m1 * u * u / 2.0 - (y0 - m0 / 6.0) + (y1 - m1 / 6.0);
        (value, slope)
    }
}

/// LDM-Linear in continuous time: `ln a^2` is interpolated by a natural cubic
/// spline through the table nodes at `t = k / (T-1)`, so it agrees with the
/// discrete table at every node and has a continuous derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearVp {
    pub table: LdmTable,
    pub beta0: f64,
    pub beta_end: f64,
    pub variant: LdmVariant,
    spline: CubicSpline,
}

impl LinearVp {
    pub fn new(beta0: f64, beta_end: f64, steps: usize, variant: LdmVariant) -> Result<Self> {
        let table = ldm_linear_coeffs(beta0, beta_end, steps, variant)?;
        let log_a2 = table.alphas.iter().map(|a| 2.0 * a.ln()).collect();
        Ok(Self { table, beta0, beta_end, variant, spline: CubicSpline::new(log_a2) })
    }

    /// The LDM defaults: 1000 steps, beta from 0.00085 to 0.012, sqrt-linear.
    pub fn ldm_default() -> Self {
        Self::new(0.000_85, 0.012, 1000, LdmVariant::Ldm).expect("valid defaults")
    }

    fn coeffs(&self, t: f64) -> Coeffs {
        let span = (self.table.len() - 1) as f64;
        let (log_a2, slope) = self.spline.eval(t * span);
        let a = (0.5 * log_a2).exp();
        let da = a * 0.5 * slope * span;
        let b = (1.0 - a * a).sqrt();
        let db = -a * da / b;
        Coeffs { a, b, da, db }
    }
}

/// A forward process.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// `z_t = (1-t) x0 + t eps`.
    RectifiedFlow,
    /// `z_t = x0 + exp(F^-1(t | p_mean, p_std^2)) eps`.
    Edm { p_mean: f64, p_std: f64 },
    /// `z_t = cos(pi t / 2) x0 + sin(pi t / 2) eps`.
    Cosine,
    /// Variance preserving DDPM/LDM linear schedule.
    LdmLinear(Arc<LinearVp>),
    /// EDM-form (`a = 1`) schedule whose log-SNR equals the target's.
    MatchedEdm(Arc<Schedule>),
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::RectifiedFlow => write!(f, "rf"),
            Schedule::Edm { p_mean, p_std } => write!(f, "edm({p_mean:.2},{p_std:.2})"),
            Schedule::Cosine => write!(f, "cos"),
            Schedule::LdmLinear(_) => write!(f, "linear"),
            Schedule::MatchedEdm(target) => write!(f, "edm/{target}"),
        }
    }
}

fn check_unit(what: &str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("{what}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

impl Schedule {
    pub fn edm(p_mean: f64, p_std: f64) -> Result<Self> {
        if !(p_std > 0.0) || !p_mean.is_finite() {
            return Err(Error::parameter(format!(
                "edm requires finite P_m and P_s > 0, got ({p_mean}, {p_std})"
            )));
        }
        Ok(Schedule::Edm { p_mean, p_std })
    }

    pub fn ldm_linear() -> Self {
        Schedule::LdmLinear(Arc::new(LinearVp::ldm_default()))
    }

    /// `a`, `b`, `a'`, `b'` at `t`.
    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        check_unit("schedule", t)?;
        match self {
            Schedule::RectifiedFlow => Ok(Coeffs { a: 1.0 - t, b: t, da: -1.0, db: 1.0 }),
            Schedule::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                // cos(pi/2) is not exactly zero in floating point.
                let c = if t == 1.0 { 0.0 } else { c };
                let s = if t == 1.0 { 1.0 } else { s };
                Ok(Coeffs { a: c, b: s, da: -FRAC_PI_2 * s, db: FRAC_PI_2 * c })
            }
            Schedule::Edm { p_mean, p_std } => {
                if t == 0.0 || t == 1.0 {
                    return Err(Error::domain(format!(
                        "edm: b(t) = exp(quantile) diverges at t = {t}"
                    )));
                }
                let q = normal_quantile(t);
                let b = (p_mean + p_std * q).exp();
                let db = b * p_std / normal_pdf(q);
                Ok(Coeffs { a: 1.0, b, da: 0.0, db })
            }
            Schedule::LdmLinear(vp) => Ok(vp.coeffs(t)),
            Schedule::MatchedEdm(target) => {
                let snr = target.snr(t)?;
                let b = (-0.5 * snr.lambda).exp();
                Ok(Coeffs { a: 1.0, b, da: 0.0, db: -0.5 * b * snr.lambda_prime })
            }
        }
    }

    /// Log-SNR and its derivative. Fails at poles (`a = 0` or `b = 0`).
    pub fn snr(&self, t: f64) -> Result<SnrPoint> {
        let c = self.coeffs(t)?;
        if c.a == 0.0 || c.b == 0.0 {
            return Err(Error::domain(format!(
                "log-SNR pole of {self} at t = {t} (a = {}, b = {})",
                c.a, c.b
            )));
        }
        let lambda = 2.0 * (c.a / c.b).ln();
        let lambda_prime = 2.0 * (c.da / c.a - c.db / c.b);
        if !lambda.is_finite() || !lambda_prime.is_finite() {
            return Err(Error::domain(format!("log-SNR of {self} not finite at t = {t}")));
        }
        Ok(SnrPoint { t, lambda, lambda_prime })
    }

    /// EDM-style input preconditioning `c_in`; 1 for the other families.
    pub fn input_scale(&self, t: f64) -> Result<f64> {
        match self {
            Schedule::Edm { .. } | Schedule::MatchedEdm(_) => {
                let c = self.coeffs(t)?;
                Ok(1.0 / (c.b * c.b + EDM_SIGMA_DATA * EDM_SIGMA_DATA).sqrt())
            }
            _ => Ok(1.0),
        }
    }

    /// Time interval `(t_start, t_end)` an ODE sampler integrates over.
    ///
    /// Families with finite endpoints use `(1, 0)`. EDM-form schedules run
    /// between noise levels `sigma = 80` and `sigma = 0.002`; cosine stops just
    /// short of `t = 1` where `a` vanishes.
    pub fn sampling_interval(&self) -> Result<(f64, f64)> {
        match self {
            Schedule::RectifiedFlow | Schedule::LdmLinear(_) => Ok((1.0, 0.0)),
            Schedule::Cosine => Ok((1.0 - 1e-3, 0.0)),
            Schedule::Edm { .. } | Schedule::MatchedEdm(_) => {
                let hi = self.time_for_noise_level(80.0)?;
                let lo = self.time_for_noise_level(0.002)?;
                Ok((hi, lo))
            }
        }
    }

    /// Solves `b(t)/a(t) = sigma` by bisection on `(0, 1)`.
    pub fn time_for_noise_level(&self, sigma: f64) -> Result<f64> {
        if let Schedule::Edm { p_mean, p_std } = self {
            return Ok(crate::stats::normal_cdf((sigma.ln() - p_mean) / p_std));
        }
        let ratio = |t: f64| -> Result<f64> {
            let c = self.coeffs(t)?;
            Ok(c.b / c.a)
        };
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
        if ratio(lo)? > sigma || ratio(hi)? < sigma {
            return Err(Error::domain(format!("noise level {sigma} not reached by {self}")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid)? < sigma {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// `z_t = a(t) x0 + b(t) eps`.
pub fn forward_sample(schedule: &Schedule, x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_same_len("forward_sample", x0.len(), eps.len())?;
    let c = schedule.coeffs(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| c.a * x + c.b * e).collect())
}

pub fn snr_eval(schedule: &Schedule, t: f64) -> Result<SnrPoint> {
    schedule.snr(t)
}

/// Conditional velocity `u_t(z | eps) = (a'/a) z - (b/2) lambda' eps`.
///
/// `(b/2) lambda'` is evaluated as `b a'/a - b'`, which stays finite where
/// `b = 0`; only `a = 0` is a pole.
pub fn conditional_velocity(schedule: &Schedule, z: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_same_len("conditional_velocity", z.len(), eps.len())?;
    let c = schedule.coeffs(t)?;
    let drift = c.drift(t)?;
    let noise_coef = c.b * drift - c.db;
    Ok(z.iter().zip(eps).map(|(z, e)| drift * z - noise_coef * e).collect())
}

/// Marginal velocity `u_t(z)` when the data is `N(mean, std^2)` in each
/// coordinate: `a' E[x0|z] + b' E[eps|z]` with Gaussian posteriors.
///
/// `std = 0` gives a point mass, whose paths are straight lines.
pub fn gaussian_marginal_velocity(schedule: &Schedule, z: f64, t: f64, mean: f64, std: f64) -> Result<f64> {
    let c = schedule.coeffs(t)?;
    let var = c.a * c.a * std * std + c.b * c.b;
    if var == 0.0 {
        return Err(Error::domain(format!("degenerate marginal at t = {t}")));
    }
    let r = (z - c.a * mean) / var;
    let x_hat = mean + c.a * std * std * r;
    let eps_hat = c.b * r;
    Ok(c.da * x_hat + c.db * eps_hat)
}

/// Network output spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    /// `v = a' x0 + b' eps`, the ODE velocity.
    Velocity,
    /// The noise `eps`.
    EpsPrediction,
    /// `v = a eps - b x0`.
    VPrediction,
    /// EDM's preconditioned `F` with `x0 = c_skip z/a + c_out F`.
    FPrediction,
}

fn edm_precond(c: &Coeffs) -> (f64, f64) {
    let sigma = c.b / c.a;
    let sd2 = EDM_SIGMA_DATA * EDM_SIGMA_DATA;
    let c_skip = sd2 / (sigma * sigma + sd2);
    let c_out = sigma * EDM_SIGMA_DATA / (sigma * sigma + sd2).sqrt();
    (c_skip, c_out)
}

const SINGULAR: f64 = 1e-300;

impl Parameterization {
    /// Recovers `(x0_hat, eps_hat)` from a prediction at state `z`.
    pub fn to_pair(self, value: f64, z: f64, c: &Coeffs) -> Result<(f64, f64)> {
        match self {
            Parameterization::Velocity => {
                let det = c.a * c.db - c.b * c.da;
                if det.abs() < SINGULAR {
                    return Err(Error::numerical("singular conversion from velocity: lambda' b = 0"));
                }
                Ok(((c.db * z - c.b * value) / det, (c.a * value - c.da * z) / det))
            }
            Parameterization::EpsPrediction => {
                if c.a == 0.0 {
                    return Err(Error::numerical("singular conversion from eps: a = 0"));
                }
                Ok(((z - c.b * value) / c.a, value))
            }
            Parameterization::VPrediction => {
                let det = c.a * c.a + c.b * c.b;
                Ok(((c.a * z - c.b * value) / det, (c.b * z + c.a * value) / det))
            }
            Parameterization::FPrediction => {
                if c.a == 0.0 || c.b == 0.0 {
                    return Err(Error::numerical("singular conversion from F: a = 0 or b = 0"));
                }
                let (c_skip, c_out) = edm_precond(c);
                let x = c_skip * z / c.a + c_out * value;
                Ok((x, (z - c.a * x) / c.b))
            }
        }
    }

    /// Expresses `(x0, eps)` at state `z` in this parameterization.
    pub fn from_pair(self, x0: f64, eps: f64, z: f64, c: &Coeffs) -> Result<f64> {
        match self {
            Parameterization::Velocity => Ok(c.da * x0 + c.db * eps),
            Parameterization::EpsPrediction => Ok(eps),
            Parameterization::VPrediction => Ok(c.a * eps - c.b * x0),
            Parameterization::FPrediction => {
                if c.a == 0.0 || c.b == 0.0 {
                    return Err(Error::numerical("singular conversion to F: a = 0 or b = 0"));
                }
                let (c_skip, c_out) = edm_precond(c);
                Ok((x0 - c_skip * z / c.a) / c_out)
            }
        }
    }

    /// `d(prediction) / d(eps_hat)` at fixed `z`: the factor by which an error
    /// in eps-space scales in this space.
    pub fn error_scale(self, c: &Coeffs) -> Result<f64> {
        match self {
            Parameterization::Velocity => {
                if c.a == 0.0 {
                    return Err(Error::numerical("velocity error scale: a = 0"));
                }
                Ok(c.db - c.da * c.b / c.a)
            }
            Parameterization::EpsPrediction => Ok(1.0),
            Parameterization::VPrediction => Ok((c.a * c.a + c.b * c.b) / c.a),
            Parameterization::FPrediction => {
                let (_, c_out) = edm_precond(c);
                Ok(-(c.b / c.a) / c_out)
            }
        }
    }
}

/// Converts a prediction between parameterizations at fixed `(z, t)`.
pub fn convert_prediction(
    value: &[f64],
    from: Parameterization,
    to: Parameterization,
    z: &[f64],
    t: f64,
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    ensure_same_len("convert_prediction", value.len(), z.len())?;
    if from == to {
        return Ok(value.to_vec());
    }
    let c = schedule.coeffs(t)?;
    value
        .iter()
        .zip(z)
        .map(|(&v, &z)| {
            let (x, e) = from.to_pair(v, z, &c)?;
            to.from_pair(x, e, z, &c)
        })
        .collect()
}

/// Loss weightings `w_t` of the unified objective
/// `L_w = -1/2 E_t[w_t lambda'_t |eps_hat - eps|^2]`.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightingSpec {
    /// `-1/2 lambda' b^2`: the plain CFM loss in velocity space.
    CfmNative,
    /// `t / (1 - t)`.
    RectifiedFlow,
    /// `N(lambda | -2 P_m, (2 P_s)^2) (e^-lambda + 0.5^2)`.
    Edm { p_mean: f64, p_std: f64 },
    /// EDM weighting with the Gaussian replaced by the log-SNR density the
    /// schedule induces under uniform `t`, `1/|lambda'|`. Used by matched EDM.
    EdmInduced,
    /// `sech(lambda / 2)`.
    CosineEps,
    /// `e^(-lambda / 2)`.
    CosineV,
    /// Unweighted eps-space MSE: `-2 / lambda'`.
    EpsMse,
    /// Unweighted v-space MSE: `-2 (a^2 + b^2)^2 / (a^2 lambda')`.
    VMse,
    /// `t / (1 - t) pi(t)`.
    DensityInduced(TimestepDensity),
}

/// `w_t` for `spec` under `schedule`.
pub fn loss_weight(spec: &WeightingSpec, schedule: &Schedule, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::domain(format!("loss weight requires t in (0, 1), got {t}")));
    }
    let sd2 = EDM_SIGMA_DATA * EDM_SIGMA_DATA;
    let w = match spec {
        WeightingSpec::RectifiedFlow => t / (1.0 - t),
        WeightingSpec::DensityInduced(d) => t / (1.0 - t) * d.pdf(t)?,
        _ => {
            let c = schedule.coeffs(t)?;
            let snr = schedule.snr(t)?;
            let (lam, dlam) = (snr.lambda, snr.lambda_prime);
            match spec {
                WeightingSpec::CfmNative => -0.5 * dlam * c.b * c.b,
                WeightingSpec::Edm { p_mean, p_std } => {
                    gaussian_pdf(lam, -2.0 * p_mean, 2.0 * p_std) * ((-lam).exp() + sd2)
                }
                WeightingSpec::EdmInduced => ((-lam).exp() + sd2) / dlam.abs(),
                WeightingSpec::CosineEps => sech(lam / 2.0),
                WeightingSpec::CosineV => (-lam / 2.0).exp(),
                WeightingSpec::EpsMse => -2.0 / dlam,
                WeightingSpec::VMse => {
                    let n = c.a * c.a + c.b * c.b;
                    -2.0 * n * n / (c.a * c.a * dlam)
                }
                WeightingSpec::RectifiedFlow | WeightingSpec::DensityInduced(_) => unreachable!(),
            }
        }
    };
    if !w.is_finite() {
        return Err(Error::numerical(format!("non-finite loss weight at t = {t}")));
    }
    Ok(w)
}

/// Multiplier on `|pred - target|^2` in `param` space that realises `spec`:
/// `-1/2 w_t lambda'_t / kappa^2`, with `kappa` the parameterization's error
/// scale.
pub fn native_loss_factor(
    spec: &WeightingSpec,
    param: Parameterization,
    schedule: &Schedule,
    t: f64,
) -> Result<f64> {
    let w = loss_weight(spec, schedule, t)?;
    let c = schedule.coeffs(t)?;
    let snr = schedule.snr(t)?;
    let kappa = param.error_scale(&c)?;
    let f = -0.5 * w * snr.lambda_prime / (kappa * kappa);
    if !f.is_finite() {
        return Err(Error::numerical(format!("non-finite loss factor at t = {t}")));
    }
    Ok(f)
}

/// EDM-form schedule with `b(t) = exp(-lambda_target(t) / 2)`.
pub fn matched_edm_schedule(target: &Schedule) -> Schedule {
    Schedule::MatchedEdm(Arc::new(target.clone()))
}

/// `pi / 2`, handy for the cosine family's closed forms.
pub const HALF_PI: f64 = PI / 2.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<Schedule> {
        vec![
            Schedule::RectifiedFlow,
            Schedule::Cosine,
            Schedule::edm(0.0, 1.0).unwrap(),
            Schedule::edm(-1.2, 1.2).unwrap(),
            Schedule::ldm_linear(),
            Schedule::LdmLinear(Arc::new(
                LinearVp::new(0.0001, 0.02, 1000, LdmVariant::Ddpm).unwrap(),
            )),
            matched_edm_schedule(&Schedule::RectifiedFlow),
            matched_edm_schedule(&Schedule::Cosine),
        ]
    }

    #[test]
    fn forward_sample_examples() {
        let rf = Schedule::RectifiedFlow;
        assert_eq!(forward_sample(&rf, &[2.0], &[0.5], 0.0).unwrap(), vec![2.0]);
        assert_eq!(forward_sample(&rf, &[2.0], &[0.5], 0.25).unwrap(), vec![1.625]);
        let z = forward_sample(&Schedule::Cosine, &[3.0, -1.0], &[0.7, 0.2], 1.0).unwrap();
        assert_eq!(z, vec![0.7, 0.2]);
        assert!(matches!(
            forward_sample(&rf, &[1.0, 2.0], &[1.0], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn snr_examples() {
        let p = snr_eval(&Schedule::RectifiedFlow, 0.5).unwrap();
        assert_eq!(p.lambda, 0.0);
        assert!((p.lambda_prime + 8.0).abs() < 1e-12);
        let edm = Schedule::edm(0.0, 1.0).unwrap();
        let c = edm.coeffs(0.5).unwrap();
        assert_eq!(c.b, 1.0);
        assert_eq!(snr_eval(&edm, 0.5).unwrap().lambda, 0.0);
        assert!(snr_eval(&Schedule::Cosine, 0.5).unwrap().lambda.abs() < 1e-15);
        for t in [0.0, 1.0] {
            let err = snr_eval(&Schedule::RectifiedFlow, t).unwrap_err();
            assert!(err.to_string().contains("pole"), "{err}");
        }
    }

    #[test]
    fn rf_lambda_prime_closed_form() {
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let p = snr_eval(&Schedule::RectifiedFlow, t).unwrap();
            assert!((p.lambda_prime + 2.0 / (t * (1.0 - t))).abs() < 1e-9 * p.lambda_prime.abs());
        }
    }

    #[test]
    fn gaussian_marginal_examples() {
        let rf = Schedule::RectifiedFlow;
        // Standard-normal data: u = (2t - 1) z / ((1-t)^2 + t^2).
        let u = gaussian_marginal_velocity(&rf, 0.8, 0.3, 0.0, 1.0).unwrap();
        assert!((u - (-0.4 * 0.8 / 0.58)).abs() < 1e-14);
        // Point mass: velocity points straight from mean to z.
        let u = gaussian_marginal_velocity(&rf, 1.5, 0.5, 0.5, 0.0).unwrap();
        assert!((u - ((1.5 - 0.25) / 0.5 - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn conditional_velocity_examples() {
        let rf = Schedule::RectifiedFlow;
        let u = conditional_velocity(&rf, &[1.625], &[0.5], 0.25).unwrap();
        assert!((u[0] + 1.5).abs() < 1e-15);
        for s in families() {
            let t = 0.37;
            let c = s.coeffs(t).unwrap();
            let u = conditional_velocity(&s, &[c.a * 1.3], &[0.0], t).unwrap();
            assert!((u[0] - c.da * 1.3).abs() < 1e-12 * (1.0 + c.da.abs()), "{s}");
        }
        // Cosine at t = 0.5 against psi'_t = a' x0 + b' eps directly.
        let cos = Schedule::Cosine;
        let c = cos.coeffs(0.5).unwrap();
        let z = forward_sample(&cos, &[1.0], &[1.0], 0.5).unwrap();
        assert!((z[0] - 2.0_f64.sqrt()).abs() < 1e-15);
        let u = conditional_velocity(&cos, &z, &[1.0], 0.5).unwrap();
        assert!((u[0] - (c.da + c.db)).abs() < 1e-10);
        assert!(conditional_velocity(&rf, &[0.3], &[0.3], 1.0).is_err());
    }

    #[test]
    fn conversion_examples() {
        let rf = Schedule::RectifiedFlow;
        let eps = convert_prediction(
            &[-1.5],
            Parameterization::Velocity,
            Parameterization::EpsPrediction,
            &[1.625],
            0.25,
            &rf,
        )
        .unwrap();
        assert!((eps[0] - 0.5).abs() < 1e-15);

        // Cited formula eps = -2 / (lambda' b) (v - a'/a z).
        for s in families() {
            let t = 0.41;
            let c = s.coeffs(t).unwrap();
            let snr = s.snr(t).unwrap();
            let (z, v) = (0.8, -0.3);
            let eps = convert_prediction(&[v], Parameterization::Velocity, Parameterization::EpsPrediction, &[z], t, &s)
                .unwrap()[0];
            let cited = -2.0 / (snr.lambda_prime * c.b) * (v - c.da / c.a * z);
            assert!((eps - cited).abs() < 1e-9 * (1.0 + cited.abs()), "{s}: {eps} vs {cited}");
        }
    }

    #[test]
    fn v_prediction_at_equal_snr_matches_linear_solve() {
        // Cosine at t = 0.5 has a = b. Oracle: solve [a b; a' b'] [x; e] = [z; u]
        // by Cramer's rule, then form v = a e - b x.
        let cos = Schedule::Cosine;
        let c = cos.coeffs(0.5).unwrap();
        let (x0, eps) = (0.9, -0.4);
        let z = c.a * x0 + c.b * eps;
        let u = c.da * x0 + c.db * eps;
        let det = c.a * c.db - c.b * c.da;
        let x = (z * c.db - c.b * u) / det;
        let e = (c.a * u - c.da * z) / det;
        let v_oracle = c.a * e - c.b * x;
        let v = convert_prediction(&[u], Parameterization::Velocity, Parameterization::VPrediction, &[z], 0.5, &cos)
            .unwrap()[0];
        assert!((v - v_oracle).abs() < 1e-12);
        assert!((v - (eps - x0) / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rf_velocity_conversion_finite_at_endpoints() {
        // det = a b' - b a' = 1 for RF, so both endpoints convert exactly.
        let rf = Schedule::RectifiedFlow;
        let (x0, eps) = (0.7, -1.1);
        for t in [0.0, 1.0] {
            let z = forward_sample(&rf, &[x0], &[eps], t).unwrap();
            let v = [eps - x0];
            let e = convert_prediction(&v, Parameterization::Velocity, Parameterization::EpsPrediction, &z, t, &rf)
                .unwrap();
            assert!((e[0] - eps).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_conversions_are_errors() {
        // lambda' = 0 makes velocity carry no information about eps.
        let flat = Coeffs { a: 0.6, b: 0.6, da: -0.3, db: -0.3 };
        assert!(Parameterization::Velocity.to_pair(1.0, 0.5, &flat).is_err());
        let no_signal = Coeffs { a: 0.0, b: 1.0, da: -1.0, db: 0.0 };
        assert!(Parameterization::EpsPrediction.to_pair(1.0, 0.5, &no_signal).is_err());
        assert!(Parameterization::FPrediction.from_pair(1.0, 0.5, 0.2, &no_signal).is_err());
    }

    #[test]
    fn weight_examples() {
        let rf = Schedule::RectifiedFlow;
        assert_eq!(loss_weight(&WeightingSpec::RectifiedFlow, &rf, 0.5).unwrap(), 1.0);
        assert!((loss_weight(&WeightingSpec::CfmNative, &rf, 0.5).unwrap() - 1.0).abs() < 1e-15);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let a = loss_weight(&WeightingSpec::CfmNative, &rf, t).unwrap();
            let b = loss_weight(&WeightingSpec::RectifiedFlow, &rf, t).unwrap();
            assert!((a - b).abs() < 1e-12 * b, "t={t}");
        }
        assert!((loss_weight(&WeightingSpec::CosineEps, &Schedule::Cosine, 0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_positive_and_finite() {
        let delta = 1e-4;
        let specs = [
            WeightingSpec::CfmNative,
            WeightingSpec::RectifiedFlow,
            WeightingSpec::Edm { p_mean: -1.2, p_std: 1.2 },
            WeightingSpec::EdmInduced,
            WeightingSpec::CosineEps,
            WeightingSpec::CosineV,
            WeightingSpec::EpsMse,
            WeightingSpec::VMse,
            WeightingSpec::DensityInduced(TimestepDensity::LogitNormal { m: 0.0, s: 1.0 }),
        ];
        for s in families() {
            for spec in &specs {
                for i in 0..=200 {
                    let t = delta + (1.0 - 2.0 * delta) * i as f64 / 200.0;
                    let w = loss_weight(spec, &s, t).unwrap();
                    assert!(w.is_finite() && w > 0.0, "{s} {spec:?} t={t} w={w}");
                }
            }
        }
    }

    #[test]
    fn native_factors_are_the_expected_constants() {
        let cases: Vec<(Schedule, WeightingSpec, Parameterization, f64)> = vec![
            (Schedule::RectifiedFlow, WeightingSpec::CfmNative, Parameterization::Velocity, 1.0),
            (Schedule::ldm_linear(), WeightingSpec::EpsMse, Parameterization::EpsPrediction, 1.0),
            (Schedule::ldm_linear(), WeightingSpec::VMse, Parameterization::VPrediction, 1.0),
            (Schedule::Cosine, WeightingSpec::CosineEps, Parameterization::EpsPrediction, PI),
            (Schedule::Cosine, WeightingSpec::CosineV, Parameterization::VPrediction, PI / 2.0),
            (
                Schedule::edm(-1.2, 1.2).unwrap(),
                WeightingSpec::Edm { p_mean: -1.2, p_std: 1.2 },
                Parameterization::FPrediction,
                EDM_SIGMA_DATA * EDM_SIGMA_DATA / 2.0,
            ),
            (
                matched_edm_schedule(&Schedule::RectifiedFlow),
                WeightingSpec::EdmInduced,
                Parameterization::FPrediction,
                EDM_SIGMA_DATA * EDM_SIGMA_DATA / 2.0,
            ),
        ];
        for (s, spec, p, want) in cases {
            for i in 1..50 {
                let t = i as f64 / 50.0;
                let f = native_loss_factor(&spec, p, &s, t).unwrap();
                assert!((f - want).abs() < 1e-8 * want, "{s} {spec:?} t={t}: {f} vs {want}");
            }
        }
    }

    #[test]
    fn edm_gaussian_weight_equals_induced_density() {
        // The printed N(lambda | -2P_m, (2P_s)^2) is the density of lambda under
        // uniform t, i.e. 1/|lambda'(t)|.
        let s = Schedule::edm(0.3, 0.9).unwrap();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let g = loss_weight(&WeightingSpec::Edm { p_mean: 0.3, p_std: 0.9 }, &s, t).unwrap();
            let ind = loss_weight(&WeightingSpec::EdmInduced, &s, t).unwrap();
            assert!((g - ind).abs() < 1e-9 * g, "t={t}");
        }
    }

    #[test]
    fn matched_edm_examples() {
        let m = matched_edm_schedule(&Schedule::RectifiedFlow);
        let mc = matched_edm_schedule(&Schedule::Cosine);
        for i in 1..=101 {
            let t = (i as f64 - 0.5) / 102.0;
            let c = m.coeffs(t).unwrap();
            assert!((c.b - t / (1.0 - t)).abs() < 1e-12 * c.b);
            let l1 = m.snr(t).unwrap().lambda;
            let l0 = Schedule::RectifiedFlow.snr(t).unwrap().lambda;
            assert!((l1 - l0).abs() < 1e-9);
            let cc = mc.coeffs(t).unwrap();
            assert!((cc.b - (HALF_PI * t).tan()).abs() < 1e-12 * cc.b.max(1.0));
            let l1 = mc.snr(t).unwrap().lambda;
            let l0 = Schedule::Cosine.snr(t).unwrap().lambda;
            assert!((l1 - l0).abs() < 1e-9);
        }
        assert!((m.coeffs(0.5).unwrap().b - 1.0).abs() < 1e-15);
        assert!(m.coeffs(0.0).is_err());
    }

    #[test]
    fn ldm_table_examples() {
        let t = ldm_linear_coeffs(0.1, 0.3, 2, LdmVariant::Ddpm).unwrap();
        assert!((t.alphas[0] - 0.9_f64.sqrt()).abs() < 1e-15);
        assert!((t.alphas[1] - 0.63_f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.a_at(0.0).unwrap(), t.alphas[0]);
        let flat_ldm = ldm_linear_coeffs(0.02, 0.02, 50, LdmVariant::Ldm).unwrap();
        let flat_ddpm = ldm_linear_coeffs(0.02, 0.02, 50, LdmVariant::Ddpm).unwrap();
        for (a, b) in flat_ldm.alphas.iter().zip(&flat_ddpm.alphas) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ldm_linear_coeffs(0.0, 0.3, 10, LdmVariant::Ddpm).is_err());
        assert!(ldm_linear_coeffs(0.1, 1.0, 10, LdmVariant::Ddpm).is_err());
        assert!(ldm_linear_coeffs(0.1, 0.2, 1, LdmVariant::Ddpm).is_err());
    }

    #[test]
    fn ldm_rounding_ties_go_down() {
        let t = ldm_linear_coeffs(0.1, 0.3, 6, LdmVariant::Ddpm).unwrap();
        // t (T-1) = 2.5 -> index 2; 2.51 -> 3.
        assert_eq!(t.index(0.5).unwrap(), 2);
        assert_eq!(t.index(2.51 / 5.0).unwrap(), 3);
        assert_eq!(t.index(1.0).unwrap(), 5);
    }

    #[test]
    fn continuous_linear_hits_table_nodes() {
        let vp = LinearVp::ldm_default();
        let s = Schedule::LdmLinear(Arc::new(vp.clone()));
        for k in [0usize, 1, 10, 500, 999] {
            let t = k as f64 / 999.0;
            let a = s.coeffs(t).unwrap().a;
            assert!((a - vp.table.alphas[k]).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn boundary_conventions() {
        for s in [Schedule::RectifiedFlow, Schedule::Cosine, Schedule::ldm_linear()] {
            let c0 = s.coeffs(0.0).unwrap();
            let c1 = s.coeffs(1.0).unwrap();
            assert!((c0.a - 1.0).abs() < 1e-3 && c0.b < 0.03, "{s}");
            assert!(c1.a < 0.1, "{s}");
        }
        let e = Schedule::edm(-1.2, 1.2).unwrap();
        assert!(e.snr(1e-4).unwrap().lambda > e.snr(1.0 - 1e-4).unwrap().lambda + 10.0);
    }

    #[test]
    fn lambda_strictly_decreasing() {
        for s in families() {
            let mut prev = f64::INFINITY;
            for i in 1..1000 {
                let t = i as f64 / 1000.0;
                let l = s.snr(t).unwrap().lambda;
                assert!(l < prev, "{s} not decreasing at t={t}");
                prev = l;
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for s in families() {
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let c = s.coeffs(t).unwrap();
                let (p, m) = (s.coeffs(t + h).unwrap(), s.coeffs(t - h).unwrap());
                let fd_a = (p.a - m.a) / (2.0 * h);
                let fd_b = (p.b - m.b) / (2.0 * h);
                let rel = |fd: f64, ex: f64| (fd - ex).abs() / ex.abs().max(1e-8);
                assert!(
                    c.da == 0.0 && fd_a == 0.0 || rel(fd_a, c.da) < 1e-6,
                    "{s} a' at t={t}: fd {fd_a} vs {}",
                    c.da
                );
                assert!(rel(fd_b, c.db) < 1e-6, "{s} b' at t={t}: fd {fd_b} vs {}", c.db);
            }
        }
    }

    #[test]
    fn edm_noise_level_inverse() {
        let e = Schedule::edm(-1.2, 1.2).unwrap();
        let t = e.time_for_noise_level(2.0).unwrap();
        assert!((e.coeffs(t).unwrap().b - 2.0).abs() < 1e-10);
        let m = matched_edm_schedule(&Schedule::RectifiedFlow);
        let t = m.time_for_noise_level(80.0).unwrap();
        assert!((t - 80.0 / 81.0).abs() < 1e-12);
    }
}
