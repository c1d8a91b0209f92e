//! Variance functions v(x) = Σ_j b_j(x) exp(ϑ_j) on a B-spline basis with a
//! second-difference smoothness prior.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::ReplicateDataset;
use crate::error::{Error, Result};
use crate::kernels::Support;
use crate::random;

/// Nonzero basis values at one point: functions `start..start + q + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalBasis {
    pub start: usize,
    pub values: [f64; 4],
    pub len: usize,
    pub clamped: bool,
}

impl LocalBasis {
    #[inline]
    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values[..self.len].iter().zip(&coef[self.start..]).map(|(b, c)| b * c).sum()
    }
}

/// Degree-q B-splines on uniform knots extended beyond [A, B], with
/// J − q equal intervals inside the support.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis {
    support: Support,
    degree: usize,
    n_basis: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(support: Support, n_basis: usize, degree: usize) -> Result<Self> {
        if degree > 3 || n_basis <= degree {
            return Err(Error::InvalidConfig(format!("unsupported spline basis: J = {n_basis}, q = {degree}")));
        }
        let intervals = n_basis - degree;
        let h = support.width() / intervals as f64;
        let knots = (0..n_basis + degree + 1).map(|i| support.lower + (i as f64 - degree as f64) * h).collect();
        Ok(SplineBasis { support, degree, n_basis, knots })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Nonzero basis values at x, by the triangular Cox–de Boor scheme.
    /// Points outside the support are clamped to it.
    pub fn eval_local(&self, x: f64) -> LocalBasis {
        let clamped = !self.support.contains(x);
        let x = self.support.clamp(x);
        let q = self.degree;
        // knot span: t[span] ≤ x < t[span + 1], last interior span at x = B
        let h = self.knots[1] - self.knots[0];
        let mut span = q + ((x - self.support.lower) / h).floor() as usize;
        span = span.min(self.n_basis - 1);
        while span > q && x < self.knots[span] {
            span -= 1;
        }
        while span < self.n_basis - 1 && x >= self.knots[span + 1] {
            span += 1;
        }
        let t = &self.knots;
        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=q {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        LocalBasis { start: span - q, values: n, len: q + 1, clamped }
    }

    /// All J basis values at x.
    pub fn basis_eval(&self, x: f64) -> Vec<f64> {
        let local = self.eval_local(x);
        let mut out = vec![0.0; self.n_basis];
        out[local.start..local.start + local.len].copy_from_slice(&local.values[..local.len]);
        out
    }

    /// v(x) = Σ b_j(x) exp(ϑ_j).
    pub fn var_eval(&self, x: f64, theta: &[f64]) -> f64 {
        let local = self.eval_local(x);
        local.values[..local.len].iter().zip(&theta[local.start..]).map(|(b, t)| b * t.exp()).sum()
    }
}

/// (J − 2) × J second-difference operator.
pub fn second_difference(j: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(j.saturating_sub(2), j);
    for r in 0..j.saturating_sub(2) {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d
}

/// Smoothness prior ϑ ~ MVN(0, (Σ₀⁻¹ + P/σ²)⁻¹) with Σ₀ = s₀·I and
/// P = DᵀD, plus an inverse-gamma hyperprior on σ².
#[derive(Clone, Debug)]
pub struct SmoothnessPrior {
    pub penalty: DMatrix<f64>,
    eigen: Vec<f64>,
    pub prior_var: f64,
    pub a: f64,
    pub b: f64,
}

impl SmoothnessPrior {
    pub fn new(n_basis: usize, prior_var: f64, a: f64, b: f64) -> Self {
        let d = second_difference(n_basis);
        let penalty = d.transpose() * d;
        let eigen = penalty.clone().symmetric_eigen().eigenvalues.iter().map(|e| e.max(0.0)).collect();
        SmoothnessPrior { penalty, eigen, prior_var, a, b }
    }

    pub fn n_basis(&self) -> usize {
        self.penalty.nrows()
    }

    /// ϑᵀPϑ = ‖Dϑ‖².
    pub fn penalty_form(theta: &[f64]) -> f64 {
        theta.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).powi(2)).sum()
    }

    /// ln |Σ₀⁻¹ + P/σ²|.
    pub fn ln_det_precision(&self, sigma2: f64) -> f64 {
        self.eigen.iter().map(|e| (1.0 / self.prior_var + e / sigma2).ln()).sum()
    }

    pub fn precision(&self, sigma2: f64) -> DMatrix<f64> {
        let j = self.n_basis();
        DMatrix::identity(j, j) / self.prior_var + &self.penalty / sigma2
    }

    pub fn log_prior(&self, theta: &[f64], sigma2: f64) -> f64 {
        let j = theta.len() as f64;
        let sq: f64 = theta.iter().map(|t| t * t).sum();
        0.5 * self.ln_det_precision(sigma2)
            - 0.5 * (sq / self.prior_var + Self::penalty_form(theta) / sigma2)
            - 0.5 * j * (2.0 * std::f64::consts::PI).ln()
    }

    /// Shape and scale of the inverse-gamma that matches the σ²-conditional
    /// up to the |Σ₀⁻¹ + P/σ²|^{1/2} term.
    pub fn smoothness_proposal(&self, theta: &[f64]) -> (f64, f64) {
        let rank = self.n_basis().saturating_sub(2) as f64;
        (self.a + 0.5 * rank, self.b + 0.5 * Self::penalty_form(theta))
    }

    /// Independence Metropolis–Hastings draw of σ² | ϑ from the proposal of
    /// [`Self::smoothness_proposal`]; the ratio corrects for the
    /// determinant term, so the draw targets the exact conditional.
    pub fn sample_smoothness<R: Rng + ?Sized>(&self, theta: &[f64], current: f64, rng: &mut R) -> (f64, bool) {
        let (shape, scale) = self.smoothness_proposal(theta);
        let proposed = random::inv_gamma(shape, scale, rng);
        let rank = self.n_basis().saturating_sub(2) as f64;
        let ln_h = |s2: f64| 0.5 * self.ln_det_precision(s2) + 0.5 * rank * s2.ln();
        let ln_a = ln_h(proposed) - ln_h(current);
        if proposed.is_finite() && proposed > 0.0 && (ln_a >= 0.0 || random::open_unit(rng).ln() < ln_a) {
            (proposed, true)
        } else {
            (current, false)
        }
    }

    /// Lower Cholesky factor of the prior covariance at σ².
    pub fn prior_cov_chol(&self, sigma2: f64) -> DMatrix<f64> {
        let cov = self.precision(sigma2).try_inverse().expect("prior precision is positive definite");
        let cov = (&cov + cov.transpose()) * 0.5;
        cov.cholesky().expect("prior covariance is positive definite").l()
    }
}

/// Random-walk Metropolis–Hastings step ϑ' = ϑ + L z on the target
/// ln p₀(ϑ) + `log_lik`(ϑ). `current_ll` is `log_lik(theta)`, passed in so
/// callers can cache it. Returns the new log-likelihood on acceptance.
pub fn mh_update_coefficients<R, F>(
    theta: &mut [f64],
    current_ll: f64,
    sigma2: f64,
    prior: &SmoothnessPrior,
    chol: &DMatrix<f64>,
    mut log_lik: F,
    rng: &mut R,
) -> Option<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    let j = theta.len();
    let z = DVector::from_iterator(j, (0..j).map(|_| random::std_normal(rng)));
    let step = chol * z;
    let proposed: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
    if proposed == theta {
        return Some(current_ll);
    }
    let new_ll = log_lik(&proposed);
    let ln_a = prior.log_prior(&proposed, sigma2) + new_ll - prior.log_prior(theta, sigma2) - current_ll;
    if new_ll.is_finite() && (ln_a >= 0.0 || random::open_unit(rng).ln() < ln_a) {
        theta.copy_from_slice(&proposed);
        Some(new_ll)
    } else {
        None
    }
}

/// Per-subject inputs of the initialization objective.
struct PseudoLik<'a> {
    basis: Vec<LocalBasis>,
    ss: Vec<f64>,
    dof: Vec<f64>,
    prior: &'a SmoothnessPrior,
    sigma2: f64,
}

impl PseudoLik<'_> {
    /// Negative penalized pseudo-log-likelihood and its gradient.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let e: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let mut obj = 0.0;
        let mut g = vec![0.0; theta.len()];
        for ((b, &ss), &dof) in self.basis.iter().zip(&self.ss).zip(&self.dof) {
            let v = b.dot(&e);
            obj += 0.5 * dof * v.ln() + 0.5 * ss / v;
            let dv = 0.5 * dof / v - 0.5 * ss / (v * v);
            for r in 0..b.len {
                g[b.start + r] += dv * b.values[r] * e[b.start + r];
            }
        }
        obj += 0.5 * SmoothnessPrior::penalty_form(theta) / self.sigma2;
        obj += 0.5 * theta.iter().map(|t| t * t).sum::<f64>() / self.prior.prior_var;
        if let Some(grad) = grad {
            let pt = &self.prior.penalty * DVector::from_column_slice(theta);
            for k in 0..theta.len() {
                grad[k] = g[k] + pt[k] / self.sigma2 + theta[k] / self.prior.prior_var;
            }
        }
        obj
    }
}

impl CostFunction for PseudoLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p, None))
    }
}

impl Gradient for PseudoLik<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let mut g = vec![0.0; p.len()];
        self.eval(p, Some(&mut g));
        Ok(g)
    }
}

/// Starting coefficients for component `l`: maximizer of
/// −ϑᵀPϑ/(2σ²) − Σ_i [(m_i − 1)/2 · ln v(w̄_i) + Σ_j (w_ij − w̄_i)² / (2 v(w̄_i))],
/// the replicate-deviation pseudo-likelihood of the variance function at
/// the subject means. Falls back to a constant equal to the pooled
/// within-subject variance if the optimizer fails.
pub fn init_coefficients(ds: &ReplicateDataset, l: usize, basis: &SplineBasis, prior: &SmoothnessPrior, sigma2: f64) -> Vec<f64> {
    let j = basis.n_basis();
    let mut locals = Vec::new();
    let mut ss = Vec::new();
    let mut dof = Vec::new();
    for i in 0..ds.n() {
        let r = ds.replicates(l, i);
        if r.len() < 2 {
            continue;
        }
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        locals.push(basis.eval_local(mean));
        ss.push(r.iter().map(|w| (w - mean).powi(2)).sum());
        dof.push((r.len() - 1) as f64);
    }
    let total_dof: f64 = dof.iter().sum();
    let pooled = if total_dof > 0.0 { ss.iter().sum::<f64>() / total_dof } else { 1.0 };
    let fallback = vec![pooled.max(1e-8).ln(); j];
    if total_dof == 0.0 {
        return fallback;
    }
    let problem = PseudoLik { basis: locals, ss, dof, prior, sigma2 };
    let mut best = (problem.eval(&fallback, None), fallback.clone());
    for start in [vec![0.0; j], fallback.clone()] {
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7);
        let run = Executor::new(&problem, solver).configure(|s| s.param(start).max_iters(500)).run();
        match run {
            Ok(res) => {
                if let Some(p) = res.state().get_best_param() {
                    let v = problem.eval(p, None);
                    if v.is_finite() && v < best.0 && p.iter().all(|t| t.is_finite()) {
                        best = (v, p.clone());
                    }
                }
            }
            Err(e) => log::debug!("variance-function initialization did not converge: {e}"),
        }
    }
    best.1
}

impl CostFunction for &PseudoLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        (*self).cost(p)
    }
}

impl Gradient for &PseudoLik<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        (*self).gradient(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> SplineBasis {
        SplineBasis::new(Support::new(0.0, 10.0).unwrap(), 12, 2).unwrap()
    }

    /// Textbook recursive Cox–de Boor definition.
    fn cox_de_boor(t: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let a = (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(t, i, k - 1, x);
        let b = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(t, i + 1, k - 1, x);
        a + b
    }

    #[test]
    fn matches_recursive_definition() {
        let b = basis();
        for s in 0..997 {
            let x = s as f64 * 0.01003;
            let v = b.basis_eval(x);
            for (j, vj) in v.iter().enumerate() {
                assert!((vj - cox_de_boor(b.knots(), j, 2, x)).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn local_support_at_ends() {
        let b = basis();
        let v = b.basis_eval(0.0);
        assert!(v[3..].iter().all(|&x| x == 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let v = b.basis_eval(10.0);
        assert!(v[..9].iter().all(|&x| x == 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(b.eval_local(11.0).clamped);
    }

    #[test]
    fn constant_coefficients() {
        let b = basis();
        assert!((b.var_eval(3.3, &[0.0; 12]) - 1.0).abs() < 1e-14);
        assert!((b.var_eval(7.1, &[0.5; 12]) - 0.5f64.exp()).abs() < 1e-13);
    }

    #[test]
    fn penalty_null_space() {
        let affine: Vec<f64> = (0..12).map(|j| 3.0 - 2.0 * j as f64).collect();
        assert_eq!(SmoothnessPrior::penalty_form(&affine), 0.0);
        let scaled: Vec<f64> = affine.iter().map(|v| v * 0.1).collect();
        assert!(SmoothnessPrior::penalty_form(&scaled) < 1e-28);
        let p = SmoothnessPrior::new(12, 100.0, 10.0, 1.0);
        let zeros = p.eigen.iter().filter(|e| **e < 1e-9).count();
        assert_eq!(zeros, 2);
        let d = second_difference(12) * DVector::from_vec(affine);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_prior_matches_dense_mvn() {
        let p = SmoothnessPrior::new(12, 100.0, 10.0, 1.0);
        let theta: Vec<f64> = (0..12).map(|j| (j as f64 * 0.7).sin()).collect();
        let q = p.precision(0.3);
        let t = DVector::from_vec(theta.clone());
        let dense = 0.5 * q.determinant().ln() - 0.5 * (t.transpose() * &q * &t)[(0, 0)] - 6.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((p.log_prior(&theta, 0.3) - dense).abs() < 1e-9);
    }
}
