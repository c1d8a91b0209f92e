//! Sampling helpers that stay well behaved for tiny Dirichlet shapes and far
//! truncation tails.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::kernels::{Support, TruncNormAtom};
use crate::normal;

pub type ChainRng = ChaCha20Rng;

/// Builds the RNG for a chain from a seed and a stream index, so that chains
/// and replicates draw from disjoint streams.
pub fn chain_rng(seed: u64, stream: u64) -> ChainRng {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on the open interval (0, 1).
#[inline]
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// ln of a Gamma(shape, 1) draw. For shape < 1 uses
/// G(a) = G(a + 1) · U^{1/a}, keeping the result finite when G itself
/// would underflow.
pub fn ln_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        g.ln() + open_unit(rng).ln() / shape
    }
}

pub fn gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    ln_gamma_draw(shape, rng).exp() / rate
}

/// Inverse-gamma with shape `a` and scale `b` (density ∝ x^{-a-1} e^{-b/x}).
pub fn inv_gamma<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    b / gamma(a, 1.0, rng)
}

/// Inverse-gamma truncated to [lo, hi] by inverting the gamma CDF of 1/x.
pub fn inv_gamma_truncated<R: Rng + ?Sized>(a: f64, b: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    // 1/x ~ Gamma(a, rate b) restricted to [1/hi, 1/lo]
    let p_lo = gamma_cdf(a, b / hi);
    let p_hi = gamma_cdf(a, b / lo);
    if p_hi - p_lo > 1e-3 {
        for _ in 0..1000 {
            let x = inv_gamma(a, b, rng);
            if x >= lo && x <= hi {
                return x;
            }
        }
    }
    let u = p_lo + open_unit(rng) * (p_hi - p_lo);
    let g = gamma_quantile(a, u).max(b / hi).min(b / lo);
    b / g
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_cdf(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let ln_pre = a * x.ln() - x - libm::lgamma(a);
    if x < a + 1.0 {
        // series
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (ln_pre.exp() * sum).min(1.0)
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - ln_pre.exp() * h).max(0.0)
    }
}

/// Quantile of Gamma(a, 1) by bisection on `gamma_cdf`.
fn gamma_quantile(a: f64, u: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = a.max(1.0);
    while gamma_cdf(a, hi) < u {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_cdf(a, mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Dirichlet draw computed in log space and normalized with log-sum-exp.
pub fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = alpha.iter().map(|&a| ln_gamma_draw(a, rng)).collect();
    normalize_log(&mut out);
    out
}

/// In-place exp-normalize of log weights. All -∞ inputs yield a uniform vector.
pub fn normalize_log(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Index drawn with probability proportional to `weights` (nonnegative, not
/// necessarily normalized). Returns `None` when all weights are zero.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(k);
            }
            u -= w;
            last = Some(k);
        }
    }
    last
}

/// Draw from N(mu, var) truncated to [lo, hi] by inverse CDF.
pub fn trunc_normal<R: Rng + ?Sized>(mu: f64, var: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi == f64::INFINITY {
        let sd = var.sqrt();
        let a = (lo - mu) / sd;
        if a < -5.0 {
            loop {
                let x = mu + sd * std_normal(rng);
                if x >= lo {
                    return x;
                }
            }
        }
        // S(ξ) = u·S(a)
        let ln_q = normal::ln_sf(a) + open_unit(rng).ln();
        let xi = if ln_q > -700.0 { normal::quantile_upper(ln_q.exp()) } else { a };
        return (mu + sd * xi).max(lo);
    }
    match Support::new(lo, hi).and_then(|s| TruncNormAtom::new(mu, var, s)) {
        Ok(atom) => atom.inv_cdf(open_unit(rng)).value,
        // mass underflow: the nearer end point carries essentially everything
        Err(_) => {
            if mu > hi {
                hi
            } else {
                lo
            }
        }
    }
}

/// ln of the N(mu, var) density truncated to [lo, hi] at x.
pub fn trunc_normal_ln_pdf(x: f64, mu: f64, var: f64, lo: f64, hi: f64) -> f64 {
    if x < lo || x > hi {
        return f64::NEG_INFINITY;
    }
    let sd = var.sqrt();
    let ln_mass = if hi == f64::INFINITY {
        normal::ln_sf((lo - mu) / sd)
    } else {
        match Support::new(lo, hi).and_then(|s| TruncNormAtom::new(mu, var, s)) {
            Ok(atom) => atom.ln_mass(),
            Err(_) => return f64::NEG_INFINITY,
        }
    };
    normal::ln_pdf((x - mu) / sd) - sd.ln() - ln_mass
}
