//! Timestep densities `pi(t)` on `(0, 1)` for rectified-flow training.
//!
//! Each density has an exact pdf and CDF and an exact sampler (inverse-CDF
//! or pushforward of a normal draw). Training draws `t ~ pi` with an
//! unweighted CFM loss; `induced_weight` reports the equivalent loss
//! weighting under uniform `t` for analysis.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::{logistic, logit, normal_cdf, normal_pdf};

/// Upper end of the admissible mode-sampler scale, `2 / (pi - 2)`.
pub const MODE_S_MAX: f64 = 2.0 / (PI - 2.0);
pub const MODE_S_MIN: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepDensity {
    Uniform,
    LogitNormal { m: f64, s: f64 },
    Mode { s: f64 },
    CosMap,
}

impl fmt::Display for TimestepDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimestepDensity::Uniform => write!(f, "rf"),
            TimestepDensity::LogitNormal { m, s } => write!(f, "rf/lognorm({m:.2},{s:.2})"),
            TimestepDensity::Mode { s } => write!(f, "rf/mode({s:.2})"),
            TimestepDensity::CosMap => write!(f, "rf/cosmap"),
        }
    }
}

fn check_mode_scale(s: f64) -> Result<()> {
    if !(MODE_S_MIN..=MODE_S_MAX).contains(&s) {
        return Err(Error::parameter(format!(
            "mode scale s = {s} outside the monotonic range [-1, 2/(pi-2) = {MODE_S_MAX:.6}]"
        )));
    }
    Ok(())
}

impl TimestepDensity {
    pub fn logit_normal(m: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) || !m.is_finite() {
            return Err(Error::parameter(format!("logit-normal needs finite m and s > 0, got ({m}, {s})")));
        }
        Ok(TimestepDensity::LogitNormal { m, s })
    }

    pub fn mode(s: f64) -> Result<Self> {
        check_mode_scale(s)?;
        Ok(TimestepDensity::Mode { s })
    }

    pub fn pdf(&self, t: f64) -> Result<f64> {
        match *self {
            TimestepDensity::Uniform => {
                if (0.0..=1.0).contains(&t) {
                    Ok(1.0)
                } else {
                    Ok(0.0)
                }
            }
            TimestepDensity::LogitNormal { m, s } => Ok(logit_normal_pdf(t, m, s)),
            TimestepDensity::Mode { s } => mode_pdf(t, s),
            TimestepDensity::CosMap => Ok(cosmap_pdf(t)),
        }
    }

    pub fn cdf(&self, t: f64) -> Result<f64> {
        let t = t.clamp(0.0, 1.0);
        match *self {
            TimestepDensity::Uniform => Ok(t),
            TimestepDensity::LogitNormal { m, s } => Ok(if t == 0.0 {
                0.0
            } else if t == 1.0 {
                1.0
            } else {
                normal_cdf((logit(t) - m) / s)
            }),
            // f_mode is decreasing, so P(f(u) <= t) = 1 - f^-1(t).
            TimestepDensity::Mode { s } => Ok(1.0 - mode_inverse(t, s)?),
            TimestepDensity::CosMap => Ok(if t == 1.0 {
                1.0
            } else {
                (2.0 / PI) * (t / (1.0 - t)).atan()
            }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimestepDensity::Uniform => rng.random::<f64>(),
            TimestepDensity::LogitNormal { m, s } => logit_normal_sample(m, s, rng),
            TimestepDensity::Mode { s } => {
                mode_map(rng.random::<f64>(), s).expect("scale validated at construction")
            }
            TimestepDensity::CosMap => cosmap_map(rng.random::<f64>()),
        }
    }
}

/// Logit-normal density; 0 at the endpoints by continuity.
pub fn logit_normal_pdf(t: f64, m: f64, s: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let z = (logit(t) - m) / s;
    normal_pdf(z) / (s * t * (1.0 - t))
}

pub fn logit_normal_sample<R: Rng + ?Sized>(m: f64, s: f64, rng: &mut R) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    logistic(m + s * n)
}

/// `f_mode(u; s) = 1 - u - s (cos^2(pi u / 2) - 1 + u)`.
pub fn mode_map(u: f64, s: f64) -> Result<f64> {
    check_mode_scale(s)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::domain(format!("mode map needs u in [0, 1], got {u}")));
    }
    // Rewritten in w = 1 - u as (1 + s) w - s sin^2(pi w / 2), which keeps
    // relative precision as t -> 0.
    let w = 1.0 - u;
    let sw = (FRAC_PI_2 * w).sin();
    Ok((1.0 + s) * w - s * sw * sw)
}

fn mode_map_derivative(u: f64, s: f64) -> f64 {
    -1.0 - s * (1.0 - FRAC_PI_2 * (PI * u).sin())
}

/// `f_mode^-1(t)` by bisection on the decreasing map.
fn mode_inverse(t: f64, s: f64) -> Result<f64> {
    check_mode_scale(s)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("mode inverse needs t in [0, 1], got {t}")));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mode_map(mid, s)? > t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Implied density `|d/dt f_mode^-1(t)| = 1 / |f'_mode(u*)|`.
pub fn mode_pdf(t: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Ok(0.0);
    }
    let u = mode_inverse(t, s)?;
    let d = mode_map_derivative(u, s);
    if d.abs() < 1e-14 {
        return Err(Error::numerical(format!(
            "mode density degenerate at t = {t} (f'(u*) = {d:e})"
        )));
    }
    Ok(1.0 / d.abs())
}

/// `t = 1 - 1 / (tan(pi u / 2) + 1)`.
pub fn cosmap_map(u: f64) -> f64 {
    if u >= 1.0 {
        return 1.0;
    }
    if u <= 0.0 {
        return 0.0;
    }
    1.0 - 1.0 / ((FRAC_PI_2 * u).tan() + 1.0)
}

pub fn cosmap_pdf(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    2.0 / (PI - 2.0 * PI * t + 2.0 * PI * t * t)
}

/// Loss weight equivalent to sampling `t ~ density`: `t / (1 - t) pi(t)`.
pub fn induced_weight(density: &TimestepDensity, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::domain(format!("induced weight requires t in (0, 1), got {t}")));
    }
    Ok(t / (1.0 - t) * density.pdf(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Adaptive Simpson oracle.
    fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
            let m = 0.5 * (a + b);
            let fm = f(m);
            (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
        }
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            fa: f64,
            b: f64,
            fb: f64,
            m: f64,
            fm: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let (lm, flm, left) = simpson(f, a, fa, m, fm);
            let (rm, frm, right) = simpson(f, m, fm, b, fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            let tol = (tol / 2.0).max(1e-15);
            rec(f, a, fa, m, fm, lm, flm, left, tol, depth - 1)
                + rec(f, m, fm, b, fb, rm, frm, right, tol, depth - 1)
        }
        let (fa, fb) = (f(a), f(b));
        let (m, fm, whole) = simpson(f, a, fa, b, fb);
        rec(f, a, fa, b, fb, m, fm, whole, tol, 40)
    }

    #[test]
    fn logit_normal_examples() {
        let v = logit_normal_pdf(0.5, 0.0, 1.0);
        assert!((v - 4.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((v - 1.595_769_121_605_731).abs() < 1e-12);
        for &t in &[0.01, 0.2, 0.45] {
            assert!((logit_normal_pdf(t, 0.0, 0.7) - logit_normal_pdf(1.0 - t, 0.0, 0.7)).abs() < 1e-12);
        }
        let v = logit_normal_pdf(0.5, 1.0, 1.0);
        assert!((v - (-0.5_f64).exp() / (2.0 * PI).sqrt() / 0.25).abs() < 1e-15);
        assert_eq!(logit_normal_pdf(0.0, 0.0, 1.0), 0.0);
        assert_eq!(logit_normal_pdf(1.0, 0.0, 1.0), 0.0);
        assert!(logit_normal_pdf(1e-9, 0.0, 1.0) < 1e-30);
    }

    #[test]
    fn logit_normal_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| logit(logit_normal_sample(0.0, 1.0, &mut rng))).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(0.7) - 1.0 / (1.0 + (-0.7_f64).exp())).abs() < 1e-16);
    }

    #[test]
    fn mode_map_examples() {
        assert!((mode_map(0.3, 0.0).unwrap() - 0.7).abs() < 1e-15);
        for s in [-1.0, -0.3, 0.0, 0.8, 1.29, 1.75] {
            assert!((mode_map(0.0, s).unwrap() - 1.0).abs() < 1e-15);
            assert!(mode_map(1.0, s).unwrap().abs() < 1e-15);
        }
        assert!((mode_map(0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let err = mode_map(0.5, 2.5).unwrap_err().to_string();
        assert!(err.contains("2/(pi-2)"), "{err}");
        assert!(mode_map(0.5, -1.01).is_err());
        assert!(mode_map(0.5, MODE_S_MAX).is_ok());
    }

    #[test]
    fn mode_pdf_examples() {
        for &t in &[0.1, 0.5, 0.9] {
            assert!((mode_pdf(t, 0.0).unwrap() - 1.0).abs() < 1e-9);
        }
        // f'(0.5) = pi/2 - 2 at s = 1.
        let want = 1.0 / (2.0 - FRAC_PI_2);
        assert!((mode_pdf(0.5, 1.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 2.3299).abs() < 1e-4);
        // At the boundary scale f'(0.5) = 0: either flagged or a tall spike.
        assert!(mode_pdf(0.5, MODE_S_MAX).map_or(true, |p| p > 1e6));
    }

    #[test]
    fn mode_map_strictly_decreasing() {
        for s in [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 1.75] {
            let mut prev = f64::INFINITY;
            for i in 0..=10_000 {
                let v = mode_map(i as f64 / 10_000.0, s).unwrap();
                assert!(v < prev, "s={s} i={i}");
                prev = v;
            }
        }
    }

    #[test]
    fn cosmap_examples() {
        assert!((cosmap_map(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(cosmap_map(0.0), 0.0);
        assert_eq!(cosmap_map(1.0), 1.0);
        assert!((cosmap_pdf(0.5) - 4.0 / PI).abs() < 1e-15);
        for &t in &[0.05, 0.3] {
            assert!((cosmap_pdf(t) - cosmap_pdf(1.0 - t)).abs() < 1e-15);
        }
        let total = integrate(&cosmap_pdf, 0.0, 1.0, 1e-13);
        assert!((total - 1.0).abs() < 1e-9, "{total}");
        for i in 1..=101 {
            let u = (i as f64 - 0.5) / 102.0;
            let t = cosmap_map(u);
            let lhs = 2.0 * ((FRAC_PI_2 * u).cos() / (FRAC_PI_2 * u).sin()).ln();
            let rhs = 2.0 * ((1.0 - t) / t).ln();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn induced_weight_examples() {
        assert_eq!(induced_weight(&TimestepDensity::Uniform, 0.5).unwrap(), 1.0);
        let ln = TimestepDensity::logit_normal(0.0, 1.0).unwrap();
        assert!((induced_weight(&ln, 0.5).unwrap() - 1.595_77).abs() < 1e-5);
        assert!((induced_weight(&TimestepDensity::CosMap, 0.5).unwrap() - 4.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn densities_normalise() {
        let cases = [
            TimestepDensity::Uniform,
            TimestepDensity::logit_normal(0.0, 1.0).unwrap(),
            TimestepDensity::logit_normal(1.0, 0.6).unwrap(),
            TimestepDensity::logit_normal(-0.5, 2.2).unwrap(),
            TimestepDensity::mode(-1.0).unwrap(),
            TimestepDensity::mode(0.5).unwrap(),
            TimestepDensity::mode(1.29).unwrap(),
            TimestepDensity::mode(1.75).unwrap(),
            TimestepDensity::CosMap,
        ];
        // Quadrature over [lo, hi] must match the CDF difference, and the CDF
        // must run from 0 to 1. Stopping short of the endpoints avoids t
        // rounding to 0 or 1, where mode(-1) has an integrable 1/sqrt spike.
        // t = sin^2(pi v / 2) flattens that spike; split at the midpoint,
        // where mode densities peak.
        let (lo, hi) = (1e-6, 1.0 - 1e-6);
        for d in cases {
            let f = |v: f64| {
                let t = (FRAC_PI_2 * v).sin().powi(2);
                d.pdf(t).unwrap() * FRAC_PI_2 * (PI * v).sin()
            };
            let total = integrate(&f, lo, 0.5, 1e-11) + integrate(&f, 0.5, hi, 1e-11);
            let t_lo = (FRAC_PI_2 * lo).sin().powi(2);
            let t_hi = (FRAC_PI_2 * hi).sin().powi(2);
            let want = d.cdf(t_hi).unwrap() - d.cdf(t_lo).unwrap();
            assert!((total - want).abs() < 1e-8, "{d}: {total} vs {want}");
            assert!(d.cdf(0.0).unwrap().abs() < 1e-11 && (d.cdf(1.0).unwrap() - 1.0).abs() < 1e-11, "{d}");
            assert!((want - 1.0).abs() < 1e-4, "{d}: mass {want}");
        }
    }

    #[test]
    fn mode_tails_strictly_positive() {
        for s in [-1.0, -0.5] {
            let d = TimestepDensity::mode(s).unwrap();
            assert!(d.pdf(1e-6).unwrap() > 0.0);
            assert!(d.pdf(1.0 - 1e-6).unwrap() > 0.0);
        }
    }

    #[test]
    fn labels() {
        assert_eq!(TimestepDensity::logit_normal(0.0, 1.0).unwrap().to_string(), "rf/lognorm(0.00,1.00)");
        assert_eq!(TimestepDensity::mode(1.75).unwrap().to_string(), "rf/mode(1.75)");
        assert_eq!(TimestepDensity::CosMap.to_string(), "rf/cosmap");
    }
}
