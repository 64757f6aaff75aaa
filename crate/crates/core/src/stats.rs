//! Scalar probability helpers: the standard normal and the logistic maps.

use std::f64::consts::{PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Density of N(mean, var) at `x`.
pub fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    normal_pdf((x - mean) / std) / std
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Quantile of the standard normal.
///
/// Acklam's rational approximation (relative error below 1.15e-9) polished by
/// one Halley step against `erfc`, which brings it to a few ulps in the body
/// and keeps the derivative consistent with `1 / normal_pdf(q)`.
/// Returns `-inf`/`+inf` at 0 and 1.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley step. Upper tail uses the complementary form to keep precision.
    let e = if p > 0.5 {
        (1.0 - p) - 0.5 * libm::erfc(x / SQRT_2)
    } else {
        0.5 * libm::erfc(-x / SQRT_2) - p
    };
    let u = e * (2.0 * PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

pub fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub fn sech(x: f64) -> f64 {
    1.0 / x.cosh()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let q = normal_quantile(p);
            assert!((normal_cdf(q) - p).abs() < 1e-15, "p={p}");
        }
        for &p in &[1e-12, 1e-8, 1e-4, 1.0 - 1e-4, 1.0 - 1e-8] {
            let q = normal_quantile(p);
            let back = if p > 0.5 { 1.0 - normal_cdf(-q) } else { normal_cdf(q) };
            assert!(((back - p) / p.min(1.0 - p)).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn quantile_known_values() {
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        assert!((normal_quantile(0.025) + 1.959_963_984_540_054).abs() < 1e-14);
        assert_eq!(normal_quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(normal_quantile(1.0), f64::INFINITY);
    }

    #[test]
    fn quantile_derivative_matches_density() {
        let h = 1e-6;
        for &p in &[0.01, 0.1, 0.3, 0.5, 0.8, 0.99] {
            let fd = (normal_quantile(p + h) - normal_quantile(p - h)) / (2.0 * h);
            let exact = 1.0 / normal_pdf(normal_quantile(p));
            assert!(((fd - exact) / exact).abs() < 1e-7, "p={p}");
        }
    }

    #[test]
    fn logistic_inverts_logit() {
        for &t in &[0.01, 0.25, 0.5, 0.9] {
            assert!((logistic(logit(t)) - t).abs() < 1e-15);
        }
        assert_eq!(logistic(0.0), 0.5);
    }
}
