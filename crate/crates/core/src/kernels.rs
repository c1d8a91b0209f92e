//! Mixture kernels: truncated normals for the latent marginals, mean-zero
//! two-component normal atoms for the scaled errors, and finite mixtures of
//! either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Closed interval [lower, upper] that the latent values live on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lower: f64,
    pub upper: f64,
}

impl Support {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidConfig(format!("support [{lower}, {upper}] is empty")));
        }
        Ok(Support { lower, upper })
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

impl Default for Support {
    fn default() -> Self {
        Support { lower: 0.0, upper: 10.0 }
    }
}

/// Result of an inverse-CDF evaluation. `clamped` is set when the requested
/// probability sat on (or beyond) {0, 1} and the value was pinned to an end
/// of the support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantile {
    pub value: f64,
    pub clamped: bool,
}

/// A univariate density with a CDF. Implemented by the atoms and by mixtures
/// of them, so inverse transforms and copula maps can take any of these.
pub trait Kernel {
    fn pdf(&self, x: f64) -> f64;
    fn ln_pdf(&self, x: f64) -> f64 {
        self.pdf(x).ln()
    }
    fn cdf(&self, x: f64) -> f64;
    /// Interval outside of which the CDF is 0 or 1 to double precision.
    fn bracket(&self) -> (f64, f64);
}

/// Which tail the truncation interval is evaluated in.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Tail {
    /// Interval straddles or sits below the mean: work with Φ.
    Lower,
    /// Interval sits entirely above the mean: work with 1 − Φ.
    Upper,
}

/// Normal(μ, σ²) restricted to a [`Support`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncNormAtom {
    mu: f64,
    var: f64,
    sd: f64,
    support: Support,
    alpha: f64,
    beta: f64,
    tail: Tail,
    // ln of the untruncated tail probability at the two ends, in the
    // orientation picked by `tail`.
    ln_tail_lo: f64,
    ln_tail_hi: f64,
    ln_mass: f64,
    // ln σ + ln mass, the log normalizer of the density.
    ln_norm: f64,
    // Untruncated tail probability at the lower end and the mass, used for a
    // log-free CDF when the mass is not tiny.
    base: f64,
    mass: f64,
}

const DIRECT_MIN_MASS: f64 = 1e-8;

const LN_MIN_MASS: f64 = -690.775_527_898_213_7; // ln(1e-300)

impl TruncNormAtom {
    pub fn new(mu: f64, var: f64, support: Support) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("truncated normal needs finite μ and σ² > 0, got ({mu}, {var})")));
        }
        let sd = var.sqrt();
        let alpha = (support.lower - mu) / sd;
        let beta = (support.upper - mu) / sd;
        let (tail, ln_tail_lo, ln_tail_hi) = if alpha > 0.0 {
            (Tail::Upper, normal::ln_sf(alpha), normal::ln_sf(beta))
        } else {
            (Tail::Lower, normal::ln_cdf(alpha), normal::ln_cdf(beta))
        };
        let ln_mass = match tail {
            // S(α) − S(β) = S(α)(1 − e^{ln S(β) − ln S(α)})
            Tail::Upper => ln_tail_lo + ln_1m_exp(ln_tail_hi - ln_tail_lo),
            Tail::Lower => ln_tail_hi + ln_1m_exp(ln_tail_lo - ln_tail_hi),
        };
        if !(ln_mass >= LN_MIN_MASS) {
            return Err(Error::NumericalUnderflow { mu, sd, lower: support.lower, upper: support.upper });
        }
        let mass = ln_mass.exp();
        let base = ln_tail_lo.exp();
        let ln_norm = sd.ln() + ln_mass;
        Ok(TruncNormAtom { mu, var, sd, support, alpha, beta, tail, ln_tail_lo, ln_tail_hi, ln_mass, ln_norm, base, mass })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// ln of the normal mass retained by the truncation.
    pub fn ln_mass(&self) -> f64 {
        self.ln_mass
    }

    /// Mean of the truncated distribution.
    pub fn mean(&self) -> f64 {
        let num = normal::ln_pdf(self.alpha) - self.ln_mass;
        let num_b = normal::ln_pdf(self.beta) - self.ln_mass;
        self.mu + self.sd * (num.exp() - num_b.exp())
    }

    pub fn inv_cdf(&self, u: f64) -> Quantile {
        if u.is_nan() || u <= 0.0 {
            return Quantile { value: self.support.lower, clamped: true };
        }
        if u >= 1.0 {
            return Quantile { value: self.support.upper, clamped: true };
        }
        let xi = match self.tail {
            Tail::Upper => {
                // S(ξ) = S(α) − u (S(α) − S(β))
                let frac = 1.0 - u * (-(self.ln_tail_hi - self.ln_tail_lo).exp_m1());
                quantile_upper_ln(self.ln_tail_lo + frac.ln())
            }
            Tail::Lower => {
                // Φ(ξ) = Φ(α) + u (Φ(β) − Φ(α))
                let ratio = (self.ln_tail_lo - self.ln_tail_hi).exp();
                let frac = ratio + u * (1.0 - ratio);
                -quantile_upper_ln(self.ln_tail_hi + frac.ln())
            }
        };
        let value = self.support.clamp(self.mu + self.sd * xi);
        Quantile { value, clamped: false }
    }
}

/// ln(1 − eˣ) for x ≤ 0.
#[inline]
fn ln_1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// ξ with ln(1 − Φ(ξ)) = ln_q.
fn quantile_upper_ln(ln_q: f64) -> f64 {
    if ln_q > -700.0 {
        return normal::quantile_upper(ln_q.exp());
    }
    // Deep tail: Newton on ln S(ξ) starting from the leading asymptotic term.
    let mut xi = (-2.0 * ln_q).sqrt();
    for _ in 0..50 {
        let f = normal::ln_sf(xi) - ln_q;
        // d/dξ ln S(ξ) = −φ(ξ)/S(ξ)
        let slope = -(normal::ln_pdf(xi) - normal::ln_sf(xi)).exp();
        let step = f / slope;
        xi -= step;
        if step.abs() < 1e-14 * xi.abs() {
            break;
        }
    }
    xi
}

impl Kernel for TruncNormAtom {
    #[inline]
    fn pdf(&self, x: f64) -> f64 {
        if !self.support.contains(x) {
            return 0.0;
        }
        self.ln_pdf(x).exp()
    }

    #[inline]
    fn ln_pdf(&self, x: f64) -> f64 {
        if !self.support.contains(x) {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mu) / self.sd;
        normal::ln_pdf(z) - self.ln_norm
    }

    fn cdf(&self, x: f64) -> f64 {
        if x <= self.support.lower {
            return 0.0;
        }
        if x >= self.support.upper {
            return 1.0;
        }
        let z = (x - self.mu) / self.sd;
        if self.mass >= DIRECT_MIN_MASS {
            let v = match self.tail {
                Tail::Upper => (self.base - normal::sf(z)) / self.mass,
                Tail::Lower => (normal::cdf(z) - self.base) / self.mass,
            };
            return v.clamp(0.0, 1.0);
        }
        let v = match self.tail {
            Tail::Upper => {
                // (S(α) − S(z)) / (S(α) − S(β))
                let num = -(normal::ln_sf(z) - self.ln_tail_lo).exp_m1();
                let den = -(self.ln_tail_hi - self.ln_tail_lo).exp_m1();
                num / den
            }
            Tail::Lower => {
                let num = (normal::ln_cdf(z) - self.ln_tail_hi).exp() - (self.ln_tail_lo - self.ln_tail_hi).exp();
                let den = -(self.ln_tail_lo - self.ln_tail_hi).exp_m1();
                num / den
            }
        };
        v.clamp(0.0, 1.0)
    }

    fn bracket(&self) -> (f64, f64) {
        (self.support.lower, self.support.upper)
    }
}

pub fn tn_pdf(x: f64, atom: &TruncNormAtom) -> f64 {
    atom.pdf(x)
}

pub fn tn_cdf(x: f64, atom: &TruncNormAtom) -> f64 {
    atom.cdf(x)
}

pub fn tn_inv_cdf(u: f64, atom: &TruncNormAtom) -> Quantile {
    atom.inv_cdf(u)
}

/// Two-component normal mixture constrained to have mean zero:
/// p·N(c₁μ, σ₁²) + (1−p)·N(c₂μ, σ₂²) with c₁ = (1−p)/√(p²+(1−p)²),
/// c₂ = −p/√(p²+(1−p)²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairParams", into = "PairParams")]
pub struct CenteredPairAtom {
    p: f64,
    mu: f64,
    var1: f64,
    var2: f64,
    mu1: f64,
    mu2: f64,
    sd1: f64,
    sd2: f64,
    // ln p − ln σ₁ and ln(1 − p) − ln σ₂
    ln_c1: f64,
    ln_c2: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct PairParams {
    p: f64,
    mu: f64,
    var1: f64,
    var2: f64,
}

impl TryFrom<PairParams> for CenteredPairAtom {
    type Error = Error;
    fn try_from(v: PairParams) -> Result<Self> {
        CenteredPairAtom::new(v.p, v.mu, v.var1, v.var2)
    }
}

impl From<CenteredPairAtom> for PairParams {
    fn from(a: CenteredPairAtom) -> Self {
        PairParams { p: a.p, mu: a.mu, var1: a.var1, var2: a.var2 }
    }
}

impl CenteredPairAtom {
    pub fn new(p: f64, mu: f64, var1: f64, var2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !mu.is_finite() || !(var1 > 0.0 && var1.is_finite()) || !(var2 > 0.0 && var2.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid error atom (p={p}, μ={mu}, σ₁²={var1}, σ₂²={var2})")));
        }
        let (c1, c2) = Self::coefficients(p);
        Ok(CenteredPairAtom {
            p,
            mu,
            var1,
            var2,
            mu1: c1 * mu,
            mu2: c2 * mu,
            sd1: var1.sqrt(),
            sd2: var2.sqrt(),
            ln_c1: p.ln() - 0.5 * var1.ln(),
            ln_c2: (1.0 - p).ln() - 0.5 * var2.ln(),
        })
    }

    /// The standard normal special case (p, μ, σ₁², σ₂²) = (0.5, 0, 1, 1).
    pub fn standard() -> Self {
        Self::new(0.5, 0.0, 1.0, 1.0).expect("valid constants")
    }

    /// (c₁, c₂) for a given p.
    pub fn coefficients(p: f64) -> (f64, f64) {
        let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
        ((1.0 - p) / norm, -p / norm)
    }

    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn var1(&self) -> f64 {
        self.var1
    }
    pub fn var2(&self) -> f64 {
        self.var2
    }
    /// Component locations (μ₁, μ₂).
    pub fn locations(&self) -> (f64, f64) {
        (self.mu1, self.mu2)
    }

    pub fn mean(&self) -> f64 {
        self.p * self.mu1 + (1.0 - self.p) * self.mu2
    }

    pub fn variance(&self) -> f64 {
        self.p * (self.var1 + self.mu1 * self.mu1) + (1.0 - self.p) * (self.var2 + self.mu2 * self.mu2)
    }
}

impl Kernel for CenteredPairAtom {
    #[inline]
    fn pdf(&self, x: f64) -> f64 {
        let a = if self.p > 0.0 { self.p * normal::pdf((x - self.mu1) / self.sd1) / self.sd1 } else { 0.0 };
        let b = if self.p < 1.0 { (1.0 - self.p) * normal::pdf((x - self.mu2) / self.sd2) / self.sd2 } else { 0.0 };
        a + b
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        let a = self.ln_c1 + normal::ln_pdf((x - self.mu1) / self.sd1);
        let b = self.ln_c2 + normal::ln_pdf((x - self.mu2) / self.sd2);
        log_add_exp(a, b)
    }

    fn cdf(&self, x: f64) -> f64 {
        let a = if self.p > 0.0 { self.p * normal::cdf((x - self.mu1) / self.sd1) } else { 0.0 };
        let b = if self.p < 1.0 { (1.0 - self.p) * normal::cdf((x - self.mu2) / self.sd2) } else { 0.0 };
        a + b
    }

    fn bracket(&self) -> (f64, f64) {
        let lo = (self.mu1 - 40.0 * self.sd1).min(self.mu2 - 40.0 * self.sd2);
        let hi = (self.mu1 + 40.0 * self.sd1).max(self.mu2 + 40.0 * self.sd2);
        (lo, hi)
    }
}

pub fn ceps_pdf(eps: f64, atom: &CenteredPairAtom) -> f64 {
    atom.pdf(eps)
}

pub fn ceps_cdf(eps: f64, atom: &CenteredPairAtom) -> f64 {
    atom.cdf(eps)
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Checks that `weights` is a probability vector matching `n_atoms`.
pub fn check_weights(weights: &[f64], n_atoms: usize) -> Result<()> {
    if weights.len() != n_atoms {
        return Err(Error::InvalidWeights(format!("{} weights for {} atoms", weights.len(), n_atoms)));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidWeights(format!("entry {w} is not a nonnegative number")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("weights sum to {total}")));
    }
    Ok(())
}

/// A finite mixture viewed through borrowed atoms and weights. The atoms are
/// shared; only the weights depend on the covariate cell.
#[derive(Clone, Copy, Debug)]
pub struct MarginalMixture<'a, K> {
    atoms: &'a [K],
    weights: &'a [f64],
}

impl<'a, K: Kernel> MarginalMixture<'a, K> {
    pub fn new(atoms: &'a [K], weights: &'a [f64]) -> Result<Self> {
        check_weights(weights, atoms.len())?;
        Ok(MarginalMixture { atoms, weights })
    }

    /// Skips weight validation; for hot loops over weights the sampler
    /// itself maintains on the simplex.
    pub fn new_unchecked(atoms: &'a [K], weights: &'a [f64]) -> Self {
        debug_assert_eq!(atoms.len(), weights.len());
        MarginalMixture { atoms, weights }
    }

    pub fn atoms(&self) -> &'a [K] {
        self.atoms
    }

    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    pub fn inv_cdf(&self, u: f64) -> Quantile {
        invert_monotone(self, u, 1e-10)
    }
}

impl<K: Kernel> Kernel for MarginalMixture<'_, K> {
    #[inline]
    fn pdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .zip(self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, &w)| w * a.pdf(x))
            .sum()
    }

    fn cdf(&self, x: f64) -> f64 {
        let v: f64 = self
            .atoms
            .iter()
            .zip(self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, &w)| w * a.cdf(x))
            .sum();
        v.clamp(0.0, 1.0)
    }

    fn bracket(&self) -> (f64, f64) {
        self.atoms
            .iter()
            .zip(self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, _)| a.bracket())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)))
    }
}

pub fn mix_pdf<K: Kernel>(x: f64, atoms: &[K], weights: &[f64]) -> Result<f64> {
    Ok(MarginalMixture::new(atoms, weights)?.pdf(x))
}

pub fn mix_cdf<K: Kernel>(x: f64, atoms: &[K], weights: &[f64]) -> Result<f64> {
    Ok(MarginalMixture::new(atoms, weights)?.cdf(x))
}

pub fn mix_inv_cdf<K: Kernel>(u: f64, atoms: &[K], weights: &[f64]) -> Result<Quantile> {
    Ok(MarginalMixture::new(atoms, weights)?.inv_cdf(u))
}

/// Inverts a continuous CDF by safeguarded Newton iteration inside a
/// shrinking bisection bracket.
pub fn invert_monotone<K: Kernel + ?Sized>(kernel: &K, u: f64, xtol: f64) -> Quantile {
    let (mut lo, mut hi) = kernel.bracket();
    if u.is_nan() || u <= 0.0 {
        return Quantile { value: lo, clamped: true };
    }
    if u >= 1.0 {
        return Quantile { value: hi, clamped: true };
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..300 {
        let f = kernel.cdf(x) - u;
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = kernel.pdf(x);
        let newton = if d > 0.0 { x - f / d } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= xtol * 1e-3 * (1.0 + x.abs()) || hi - lo <= xtol * 1e-3 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    Quantile { value: x, clamped: false }
}
