//! Statistical primitives for certification: exact binomial lower confidence
//! bounds, the inverse normal CDF, and counter-based Gaussian noise streams.
//!
//! The noise construction is the piece the rest of the pipeline leans on:
//! every draw is a pure function of (seed, point_index, sample_index), so
//! cold-start and serialized certification consume byte-identical noise and
//! their outcomes can be compared sample by sample.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use serde::{Deserialize, Serialize};

/// Failure budget for a certification run. The budget is split in half
/// between the two estimated quantities (vote lower bound and misalignment
/// upper bound), so each side is bounded at level alpha/2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    alpha: f64,
}

impl ConfidenceSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Argument(format!("alpha must be in (0,1), got {alpha}")));
        }
        Ok(ConfidenceSpec { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per-side failure level, exactly alpha/2.
    pub fn alpha_tilde(&self) -> f64 {
        self.alpha / 2.0
    }

    /// Confidence level used for each one-sided bound.
    pub fn side_confidence(&self) -> f64 {
        1.0 - self.alpha_tilde()
    }
}

// ---------------------------------------------------------------------------
// Clopper-Pearson one-sided lower bound
// ---------------------------------------------------------------------------

/// Largest p such that P[Binomial(n, p) >= k] <= 1 - confidence, found by
/// bisection on the exact binomial upper tail (log-space terms). Absolute
/// tolerance 1e-10 on p; the feasible endpoint is returned, so the bound
/// errs on the conservative side. k = 0 returns 0.
pub fn lower_conf_bound(k: u64, n: u64, confidence: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("lower_conf_bound needs n >= 1".into()));
    }
    if k > n {
        return Err(Error::Argument(format!("k={k} exceeds n={n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Argument(format!(
            "confidence must be in (0,1), got {confidence}"
        )));
    }
    if k == 0 {
        return Ok(0.0);
    }

    let alpha = 1.0 - confidence;
    let ln_fact = ln_factorial_table(n as usize);
    let nf = n as f64;

    // P[Bin(n,p) >= k]. Sums the shorter side of the distribution: above the
    // mode the terms decay geometrically and the loop exits early.
    let tail = |p: f64| -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        let ln_p = p.ln();
        let ln_q = (-p).ln_1p();
        let ln_choose = |j: u64| {
            ln_fact[n as usize] - ln_fact[j as usize] - ln_fact[(n - j) as usize]
        };
        let term = |j: u64| {
            let jf = j as f64;
            (ln_choose(j) + jf * ln_p + (nf - jf) * ln_q).exp()
        };
        let mode = (nf + 1.0) * p;
        if (k as f64) > mode {
            // sum upward from k; terms decrease
            let mut acc = 0.0;
            let mut prev = f64::INFINITY;
            for j in k..=n {
                let t = term(j);
                acc += t;
                if t <= prev && t < acc * 1e-17 {
                    break;
                }
                prev = t;
            }
            acc
        } else {
            // complement: sum P[X <= k-1] downward from k-1
            let mut acc = 0.0;
            let mut prev = f64::INFINITY;
            for j in (0..k).rev() {
                let t = term(j);
                acc += t;
                if t <= prev && t < acc * 1e-17 {
                    break;
                }
                prev = t;
            }
            (1.0 - acc).max(0.0)
        }
    };

    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn ln_factorial_table(n: usize) -> Vec<f64> {
    // Kahan-compensated prefix sums of ln(j) keep the table accurate for
    // desk-scale n (error stays near machine epsilon instead of n*epsilon).
    let mut table = Vec::with_capacity(n + 1);
    table.push(0.0);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for j in 1..=n {
        let y = (j as f64).ln() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        table.push(sum);
    }
    table
}

// ---------------------------------------------------------------------------
// Normal CDF and its inverse
// ---------------------------------------------------------------------------

/// Standard normal CDF, accurate in both tails (relative accuracy through
/// the complementary error function).
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

// Maclaurin series; alternating, kept Kahan-compensated. Only used for
// x <= 2.5 where the largest term stays O(1) and no precision is lost.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut s = x; // (-1)^n x^(2n+1) / n!
    let mut acc = x;
    let mut comp = 0.0f64;
    for n in 1..200 {
        s *= -x2 / n as f64;
        let term = s / (2 * n + 1) as f64;
        let y = term - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
        if term.abs() < acc.abs() * 1e-18 {
            break;
        }
    }
    acc * std::f64::consts::FRAC_2_SQRT_PI
}

// Legendre continued fraction, modified Lentz evaluation. Relative accuracy
// near machine epsilon for x >= 2.5, which keeps Phi exact in the far tail.
fn erfc_continued_fraction(x: f64) -> f64 {
    let mut f = x;
    let mut c = x;
    let mut d = 0.0f64;
    for n in 1..300 {
        let a = n as f64 / 2.0;
        d = x + a * d;
        if d == 0.0 {
            d = 1e-300;
        }
        c = x + a / c;
        if c == 0.0 {
            c = 1e-300;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Inverse standard normal CDF. Rational initial guess refined by two
/// Halley steps against `norm_cdf`; absolute error stays below 1e-9 across
/// (0, 1) including the far tails.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("p must be in (0,1), got {p}")));
    }
    let mut z = rational_guess(p);
    for _ in 0..2 {
        let e = norm_cdf(z) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (z * z / 2.0).exp();
        z -= u / (1.0 + z * u / 2.0);
    }
    Ok(z)
}

// Rational approximation with distinct central and tail branches
// (relative error ~1e-9 before refinement).
fn rational_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (-p).ln_1p()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

// ---------------------------------------------------------------------------
// Counter-based noise
// ---------------------------------------------------------------------------

/// Addresses one Monte Carlo sample's noise: the draw depends on nothing but
/// these three values, so any consumer can regenerate any sample on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub point_index: u64,
    pub sample_index: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, point_index: u64, sample_index: u64) -> Self {
        NoiseStream { seed, point_index, sample_index }
    }

    fn key(&self, domain: u64) -> u64 {
        let mut h = mix64(self.seed ^ domain);
        h = mix64(h ^ self.point_index.wrapping_mul(ABSORB));
        h = mix64(h ^ self.sample_index.wrapping_mul(ABSORB));
        h
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const ABSORB: u64 = 0xBF58_476D_1CE4_E5B9;
const DOMAIN_GAUSS: u64 = 0x6761_7573_7331_3031;
const DOMAIN_UNIFORM: u64 = 0x756E_6966_6F72_6D31;

// splitmix64 finalizer: full-avalanche bijection on u64
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// j-th raw word of the stream addressed by `key`
fn raw(key: u64, j: u64) -> u64 {
    mix64(key.wrapping_add(j.wrapping_mul(GOLDEN)))
}

// maps to the open interval (0,1): never 0, never 1, so ln stays finite
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Draws `dim` iid N(0, sigma^2) values for the given stream via Box-Muller
/// over counter-indexed uniforms. sigma = 0 yields exactly the zero vector.
pub fn gaussian_draw(stream: &NoiseStream, dim: usize, sigma: f64) -> Vector {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    let key = stream.key(DOMAIN_GAUSS);
    let mut out = Vec::with_capacity(dim);
    let mut c = 0u64;
    while out.len() < dim {
        let u1 = unit_open(raw(key, c));
        let u2 = unit_open(raw(key, c + 1));
        c += 2;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, co) = (std::f64::consts::TAU * u2).sin_cos();
        out.push(sigma * r * co);
        if out.len() < dim {
            out.push(sigma * r * s);
        }
    }
    Vector::new(out).expect("Box-Muller over (0,1) uniforms is finite")
}

/// Deterministic uniform integer in [0, bound) for the given stream, used by
/// reservoir sampling. Lives in a separate key domain so it never aliases
/// the Gaussian draws.
pub fn uniform_index(stream: &NoiseStream, bound: u64) -> u64 {
    assert!(bound > 0, "bound must be positive");
    let bits = raw(stream.key(DOMAIN_UNIFORM), 0);
    ((bits as u128 * bound as u128) >> 64) as u64
}
