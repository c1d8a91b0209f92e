//! Correlation matrices through the spherical-coordinate Cholesky
//! parameterization, Gaussian copula densities, and the grid
//! Metropolis–Hastings moves for the coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::normal;
use crate::random;

const F_CLAMP: f64 = 1e-12;

/// Lower-triangular Cholesky factor V of a correlation matrix, row-major
/// packed.
#[derive(Clone, Debug, PartialEq)]
pub struct CholFactor {
    d: usize,
    v: Vec<f64>,
    ln_det: f64,
}

impl CholFactor {
    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.v[Self::idx(i, j)]
        }
    }

    /// ln det R = 2 Σ ln v_ℓℓ.
    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    /// Dense R = V Vᵀ.
    pub fn correlation(&self) -> Vec<Vec<f64>> {
        let d = self.d;
        let mut r = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                r[i][j] = s;
                r[j][i] = s;
            }
        }
        r
    }

    /// Solves V z = y in place.
    pub fn forward_solve(&self, y: &mut [f64]) {
        for i in 0..self.d {
            let row = &self.v[Self::idx(i, 0)..=Self::idx(i, i)];
            let s: f64 = row[..i].iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / row[i];
        }
    }

    /// yᵀ R⁻¹ y.
    pub fn quad_inv(&self, y: &[f64]) -> f64 {
        let mut buf = [0.0; 16];
        let mut heap;
        let z: &mut [f64] = if self.d <= 16 {
            &mut buf[..self.d]
        } else {
            heap = vec![0.0; self.d];
            &mut heap
        };
        z.copy_from_slice(y);
        self.forward_solve(z);
        z.iter().map(|v| v * v).sum()
    }

    /// tr(R⁻¹ S) for symmetric S given row-major.
    pub fn trace_inv(&self, s: &[f64]) -> f64 {
        let d = self.d;
        // tr(R⁻¹ S) = tr(W S Wᵀ) with W = V⁻¹
        let mut w = vec![0.0; d * d];
        for c in 0..d {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            self.forward_solve(&mut e);
            for r in 0..d {
                w[r * d + c] = e[r];
            }
        }
        let mut tr = 0.0;
        for r in 0..d {
            for a in 0..d {
                let wa = w[r * d + a];
                if wa == 0.0 {
                    continue;
                }
                for b in 0..d {
                    tr += wa * s[a * d + b] * w[r * d + b];
                }
            }
        }
        tr
    }
}

/// Builds V from the spherical coordinates: row 1 is (1); row 2 is
/// (b₁, √(1−b₁²)); row ℓ ≥ 3 spreads b_{ℓ−1} over its first ℓ−1 entries with
/// angles θ_{i₁(ℓ)}, …, θ_{i₂(ℓ)} and ends with √(1−b_{ℓ−1}²).
pub fn spherical_to_cholesky(b: &[f64], theta: &[f64], d: usize) -> Result<CholFactor> {
    if b.len() + 1 != d.max(1) || theta.len() != n_angles(d) {
        return Err(Error::InvalidConfig(format!(
            "need {} radial and {} angular coordinates for d = {d}, got {} and {}",
            d.saturating_sub(1),
            n_angles(d),
            b.len(),
            theta.len()
        )));
    }
    let mut v = vec![0.0; d * (d + 1) / 2];
    let mut ln_det = 0.0;
    if d > 0 {
        v[0] = 1.0;
    }
    for l in 1..d {
        // 0-based row l has l off-diagonal entries and l − 1 angles
        let bl = b[l - 1];
        let start = (l - 1) * l.saturating_sub(2) / 2;
        let angles = &theta[start..start + l - 1];
        let mut prefix = bl;
        for k in 0..l {
            let val = if k < angles.len() {
                let e = prefix * angles[k].sin();
                prefix *= angles[k].cos();
                e
            } else {
                prefix
            };
            v[CholFactor::idx(l, k)] = val;
        }
        let diag = (1.0 - bl * bl).sqrt();
        v[CholFactor::idx(l, l)] = diag;
        ln_det += (1.0 - bl * bl).ln();
    }
    Ok(CholFactor { d, v, ln_det })
}

pub fn n_angles(d: usize) -> usize {
    if d < 3 {
        0
    } else {
        (d - 1) * (d - 2) / 2
    }
}

/// ln c(y) = −½ ln det R − ½ yᵀ(R⁻¹ − I)y.
pub fn copula_logdensity(y: &[f64], chol: &CholFactor) -> Result<f64> {
    if chol.ln_det() < (1e-12f64).ln() {
        return Err(Error::SingularCorrelation { det: chol.ln_det().exp() });
    }
    Ok(copula_logdensity_unchecked(y, chol))
}

#[inline]
pub fn copula_logdensity_unchecked(y: &[f64], chol: &CholFactor) -> f64 {
    let yy: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * chol.ln_det() - 0.5 * (chol.quad_inv(y) - yy)
}

/// y = Φ⁻¹(F), with F clamped to [1e-12, 1 − 1e-12].
#[inline]
pub fn latent_from_cdf(f: f64) -> f64 {
    normal::quantile(f.clamp(F_CLAMP, 1.0 - F_CLAMP))
}

pub fn to_latent<K: Kernel + ?Sized>(value: f64, marginal: &K) -> f64 {
    latent_from_cdf(marginal.cdf(value))
}

pub fn from_latent<K: Kernel + ?Sized>(y: f64, marginal: &K) -> f64 {
    crate::kernels::invert_monotone(marginal, normal::cdf(y), 1e-12).value
}

/// Values of the radial and angular grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGrid {
    pub m: usize,
}

impl CorrelationGrid {
    pub fn b_value(&self, idx: usize) -> f64 {
        -0.99 + 2.0 * 0.99 * idx as f64 / (self.m - 1) as f64
    }

    pub fn theta_value(&self, idx: usize) -> f64 {
        -3.14 + 2.0 * 3.14 * idx as f64 / (self.m - 1) as f64
    }

    pub fn zero_index(&self) -> usize {
        (self.m - 1) / 2
    }
}

/// Grid indices of the spherical coordinates of one correlation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub d: usize,
    pub grid: CorrelationGrid,
    pub b: Vec<usize>,
    pub theta: Vec<usize>,
}

impl CorrelationParams {
    /// The grid point with every coordinate zero, i.e. R = I.
    pub fn identity(d: usize, m: usize) -> Self {
        let grid = CorrelationGrid { m };
        CorrelationParams { d, grid, b: vec![grid.zero_index(); d.saturating_sub(1)], theta: vec![grid.zero_index(); n_angles(d)] }
    }

    pub fn b_values(&self) -> Vec<f64> {
        self.b.iter().map(|&i| self.grid.b_value(i)).collect()
    }

    pub fn theta_values(&self) -> Vec<f64> {
        self.theta.iter().map(|&i| self.grid.theta_value(i)).collect()
    }

    pub fn cholesky(&self) -> CholFactor {
        spherical_to_cholesky(&self.b_values(), &self.theta_values(), self.d).expect("lengths fixed at construction")
    }

    pub fn correlation(&self) -> Vec<Vec<f64>> {
        self.cholesky().correlation()
    }
}

/// Σ y yᵀ and the number of vectors, enough for the MVN(0, R) likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelStats {
    pub d: usize,
    pub n: f64,
    pub s: Vec<f64>,
}

impl PanelStats {
    pub fn new(d: usize) -> Self {
        PanelStats { d, n: 0.0, s: vec![0.0; d * d] }
    }

    pub fn add(&mut self, y: &[f64]) {
        self.n += 1.0;
        for a in 0..self.d {
            for b in 0..self.d {
                self.s[a * self.d + b] += y[a] * y[b];
            }
        }
    }

    /// Σ ln MVN(y | 0, R) without the constant −(d/2) ln 2π per vector.
    pub fn log_lik(&self, chol: &CholFactor) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        -0.5 * self.n * chol.ln_det() - 0.5 * chol.trace_inv(&self.s)
    }
}

/// Which coordinate a grid move targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridParam {
    B(usize),
    Theta(usize),
}

/// Proposal over {current, neighbours}: uniform over three points in the
/// interior and over two at either end of the grid.
fn propose_neighbor<R: Rng + ?Sized>(idx: usize, m: usize, rng: &mut R) -> (usize, f64) {
    let set: Vec<usize> = [idx.checked_sub(1), Some(idx), (idx + 1 < m).then_some(idx + 1)].into_iter().flatten().collect();
    let new = set[rng.random_range(0..set.len())];
    let size = |i: usize| if i == 0 || i + 1 == m { 2.0f64 } else { 3.0 };
    // ln q(new → old) − ln q(old → new)
    let ln_ratio = size(idx).ln() - size(new).ln();
    (new, ln_ratio)
}

/// One grid move for a single coordinate under the panel likelihood.
/// Returns true on acceptance of a different grid point.
pub fn mh_update_grid_param<R: Rng + ?Sized>(params: &mut CorrelationParams, which: GridParam, stats: &PanelStats, rng: &mut R) -> bool {
    let m = params.grid.m;
    let slot = match which {
        GridParam::B(t) => &mut params.b[t],
        GridParam::Theta(s) => &mut params.theta[s],
    };
    let old = *slot;
    let (new, ln_q) = propose_neighbor(old, m, rng);
    if new == old {
        return false;
    }
    let ll_old = stats.log_lik(&params.cholesky());
    set_slot(params, which, new);
    let ll_new = stats.log_lik(&params.cholesky());
    let ln_a = ll_new - ll_old + ln_q;
    if ln_a >= 0.0 || random::open_unit(rng).ln() < ln_a {
        true
    } else {
        set_slot(params, which, old);
        false
    }
}

fn set_slot(params: &mut CorrelationParams, which: GridParam, v: usize) {
    match which {
        GridParam::B(t) => params.b[t] = v,
        GridParam::Theta(s) => params.theta[s] = v,
    }
}

/// One move for each radial, then each angular coordinate. Returns the
/// number of accepted moves.
pub fn update_correlation<R: Rng + ?Sized>(params: &mut CorrelationParams, stats: &PanelStats, rng: &mut R) -> usize {
    let mut accepted = 0;
    for t in 0..params.b.len() {
        accepted += mh_update_grid_param(params, GridParam::B(t), stats, rng) as usize;
    }
    for s in 0..params.theta.len() {
        accepted += mh_update_grid_param(params, GridParam::Theta(s), stats, rng) as usize;
    }
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = spherical_to_cholesky(&[0.0], &[], 2).unwrap();
        assert_eq!(c.correlation(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = spherical_to_cholesky(&[0.5], &[], 2).unwrap();
        let r = c.correlation();
        assert!((r[0][1] - 0.5).abs() < 1e-15);
        assert!((c.ln_det().exp() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn third_row_layout() {
        let c = spherical_to_cholesky(&[0.3, 0.6], &[0.4], 3).unwrap();
        assert!((c.get(2, 0) - 0.6 * 0.4f64.sin()).abs() < 1e-15);
        assert!((c.get(2, 1) - 0.6 * 0.4f64.cos()).abs() < 1e-15);
        assert!((c.get(2, 2) - (1.0 - 0.36f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn copula_closed_form() {
        let c = spherical_to_cholesky(&[0.7], &[], 2).unwrap();
        let v = copula_logdensity(&[0.0, 0.0], &c).unwrap();
        assert!((v - (-0.5 * 0.51f64.ln())).abs() < 1e-12);
        assert!((v - 0.336_672_28).abs() < 1e-8);
        let id = spherical_to_cholesky(&[0.0, 0.0], &[0.0], 3).unwrap();
        assert_eq!(copula_logdensity(&[1.0, -2.0, 0.3], &id).unwrap(), 0.0);
    }

    #[test]
    fn grid_contains_zero_and_ends() {
        let g = CorrelationGrid { m: 41 };
        assert!((g.b_value(0) + 0.99).abs() < 1e-15);
        assert!((g.b_value(40) - 0.99).abs() < 1e-15);
        assert_eq!(g.b_value(20), 0.0);
        assert_eq!(g.theta_value(20), 0.0);
        let id = CorrelationParams::identity(3, 41);
        assert_eq!(id.correlation(), vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    }

    #[test]
    fn boundary_proposal_ratio() {
        let mut rng = crate::random::chain_rng(1, 0);
        for _ in 0..200 {
            let (new, r) = propose_neighbor(0, 41, &mut rng);
            assert!(new <= 1);
            if new == 1 {
                assert!((r - (2.0f64.ln() - 3.0f64.ln())).abs() < 1e-15);
            }
            let (new, r) = propose_neighbor(1, 41, &mut rng);
            if new == 0 {
                assert!((r - (3.0f64.ln() - 2.0f64.ln())).abs() < 1e-15);
            }
        }
    }
}
