//! Synthetic benchmark: categorical covariates, Gaussian-copula-linked
//! truncated-normal mixture truths, standardized error marginals, and
//! surrogates w = x + s(x)ε with s(x) proportional to x.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ReplicateDataset;
use crate::error::{Error, Result};
use crate::kernels::{invert_monotone, CenteredPairAtom, Kernel, MarginalMixture, Support, TruncNormAtom};
use crate::normal;
use crate::quadrature::integrate_with_breaks;
use crate::random::{self, ChainRng};

/// Raw (unstandardized) error mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ErrorFamily {
    /// Mixture of mean-zero pair atoms, each (p, μ, σ₁², σ₂²).
    Pair { weights: Vec<f64>, atoms: Vec<[f64; 4]> },
    Laplace { weights: Vec<f64>, location: Vec<f64>, scale: Vec<f64> },
}

impl ErrorFamily {
    fn pair_atoms(atoms: &[[f64; 4]]) -> Vec<CenteredPairAtom> {
        atoms.iter().map(|a| CenteredPairAtom::new(a[0], a[1], a[2], a[3]).expect("design atoms are valid")).collect()
    }

    fn pdf(&self, e: f64) -> f64 {
        match self {
            ErrorFamily::Pair { weights, atoms } => {
                Self::pair_atoms(atoms).iter().zip(weights).map(|(a, w)| w * a.pdf(e)).sum()
            }
            ErrorFamily::Laplace { weights, location, scale } => {
                weights.iter().zip(location).zip(scale).map(|((w, m), b)| w * (-(e - m).abs() / b).exp() / (2.0 * b)).sum()
            }
        }
    }

    fn cdf(&self, e: f64) -> f64 {
        match self {
            ErrorFamily::Pair { weights, atoms } => {
                Self::pair_atoms(atoms).iter().zip(weights).map(|(a, w)| w * a.cdf(e)).sum()
            }
            ErrorFamily::Laplace { weights, location, scale } => weights
                .iter()
                .zip(location)
                .zip(scale)
                .map(|((w, m), b)| {
                    let z = (e - m) / b;
                    w * if z < 0.0 { 0.5 * z.exp() } else { 1.0 - 0.5 * (-z).exp() }
                })
                .sum(),
        }
    }

    /// Points where the density has a kink or a narrow peak.
    fn breaks(&self) -> Vec<f64> {
        match self {
            ErrorFamily::Pair { atoms, .. } => {
                let mut b: Vec<f64> = Self::pair_atoms(atoms).iter().flat_map(|a| [a.locations().0, a.locations().1]).collect();
                b.push(0.0);
                b
            }
            ErrorFamily::Laplace { location, .. } => location.clone(),
        }
    }

    /// Rough half-width beyond which the density is negligible.
    fn reach(&self) -> f64 {
        match self {
            ErrorFamily::Pair { atoms, .. } => atoms.iter().map(|a| a[1].abs() * 2.0 + 40.0 * a[2].max(a[3]).sqrt()).fold(0.0, f64::max),
            ErrorFamily::Laplace { location, scale, .. } => {
                location.iter().zip(scale).map(|(m, b)| m.abs() + 80.0 * b).fold(0.0, f64::max)
            }
        }
    }
}

/// Error marginal affinely standardized to mean zero and unit variance;
/// the constants come from quadrature of the raw density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMarginal {
    pub family: ErrorFamily,
    pub raw_mean: f64,
    pub raw_sd: f64,
}

impl ErrorMarginal {
    pub fn new(family: ErrorFamily) -> Self {
        let r = family.reach();
        let br = family.breaks();
        let q = |f: &dyn Fn(f64) -> f64| integrate_with_breaks(f, -r, r, &br, 1e-13);
        let mean = q(&|e| e * family.pdf(e));
        let var = q(&|e| (e - mean).powi(2) * family.pdf(e));
        ErrorMarginal { family, raw_mean: mean, raw_sd: var.sqrt() }
    }

    /// Inverse CDF; exact for a single Laplace component.
    pub fn inv_cdf(&self, u: f64) -> f64 {
        if let ErrorFamily::Laplace { weights, location, scale } = &self.family {
            if weights.len() == 1 {
                let raw = location[0] - scale[0] * (u - 0.5).signum() * (1.0 - 2.0 * (u - 0.5).abs()).ln();
                return (raw - self.raw_mean) / self.raw_sd;
            }
        }
        invert_monotone(self, u, 1e-12).value
    }
}

impl Kernel for ErrorMarginal {
    fn pdf(&self, e: f64) -> f64 {
        self.raw_sd * self.family.pdf(self.raw_mean + self.raw_sd * e)
    }

    fn ln_pdf(&self, e: f64) -> f64 {
        self.pdf(e).ln()
    }

    fn cdf(&self, e: f64) -> f64 {
        self.family.cdf(self.raw_mean + self.raw_sd * e)
    }

    fn bracket(&self) -> (f64, f64) {
        let r = self.family.reach() / self.raw_sd;
        (-r, r)
    }
}

/// Parameters of the synthetic benchmark. The x densities depend only on
/// the component and on covariate `x_covariate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationDesign {
    pub n: usize,
    pub m: usize,
    pub covariate_names: Vec<String>,
    pub level_probs: Vec<Vec<f64>>,
    pub support_lower: f64,
    pub support_upper: f64,
    /// Atom locations per component, `x_means[ℓ][k]`.
    pub x_means: Vec<Vec<f64>>,
    pub x_var: f64,
    pub x_covariate: usize,
    /// Atom weights per level of `x_covariate`.
    pub x_weights: Vec<Vec<f64>>,
    pub r_x: Vec<Vec<f64>>,
    pub r_eps: Vec<Vec<f64>>,
    pub eps: Vec<ErrorFamily>,
    /// s(x) = s_slope·x.
    pub s_slope: f64,
    /// Emit the truths themselves, one replicate per subject.
    pub error_free: bool,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        SimulationDesign {
            n: 965,
            m: 3,
            covariate_names: vec!["sex".into(), "ethnicity".into(), "age".into()],
            level_probs: vec![vec![0.5; 2], vec![0.2; 5], vec![1.0 / 6.0; 6]],
            support_lower: 0.0,
            support_upper: 10.0,
            x_means: vec![vec![1.5, 1.5, 3.0, 5.0], vec![2.0, 2.0, 4.0, 5.0], vec![2.0, 3.0, 4.0, 5.0]],
            x_var: 0.75 * 0.75,
            x_covariate: 0,
            x_weights: vec![vec![0.10, 0.40, 0.20, 0.30], vec![0.40, 0.40, 0.00, 0.20]],
            r_x: vec![vec![1.0, 0.7, 0.49], vec![0.7, 1.0, 0.7], vec![0.49, 0.7, 1.0]],
            r_eps: vec![vec![1.0, 0.5, 0.25], vec![0.5, 1.0, 0.5], vec![0.25, 0.5, 1.0]],
            eps: vec![
                ErrorFamily::Pair { weights: vec![0.25, 0.5, 0.25], atoms: vec![[0.4, 2.0, 2.0, 1.0]; 3] },
                ErrorFamily::Pair {
                    weights: vec![0.25, 0.5, 0.25],
                    atoms: vec![[0.5, 0.0, 0.25, 0.25], [0.5, 0.0, 0.25, 0.25], [0.5, 0.0, 5.0, 5.0]],
                },
                ErrorFamily::Laplace { weights: vec![1.0], location: vec![0.0], scale: vec![1.0] },
            ],
            s_slope: 1.0 / 3.0,
            error_free: false,
        }
    }
}

impl SimulationDesign {
    /// The design for density estimation without measurement error.
    pub fn error_free() -> Self {
        SimulationDesign { error_free: true, m: 1, ..Default::default() }
    }

    pub fn d(&self) -> usize {
        self.x_means.len()
    }

    pub fn support(&self) -> Support {
        Support { lower: self.support_lower, upper: self.support_upper }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let d = self.d();
        if self.n == 0 || self.m == 0 || d == 0 {
            return bad("design needs subjects, replicates and components".into());
        }
        for (h, p) in self.level_probs.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("level probabilities of covariate {h} are not a simplex"));
            }
        }
        if self.covariate_names.len() != self.level_probs.len() {
            return bad("one name per covariate required".into());
        }
        if self.x_covariate >= self.level_probs.len() || self.x_weights.len() != self.level_probs[self.x_covariate].len() {
            return bad("x weights must be given for every level of the x covariate".into());
        }
        let k = self.x_means[0].len();
        if self.x_means.iter().any(|r| r.len() != k) || self.x_weights.iter().any(|w| w.len() != k) {
            return bad("x atom tables have inconsistent sizes".into());
        }
        if self.r_x.len() != d || self.r_eps.len() != d || self.eps.len() != d {
            return bad("correlations and error marginals must match the number of components".into());
        }
        for r in [&self.r_x, &self.r_eps] {
            if DMatrix::from_fn(d, d, |a, b| r[a][b]).cholesky().is_none() {
                return bad("design correlation matrix is not positive definite".into());
            }
        }
        Support::new(self.support_lower, self.support_upper)?;
        Ok(())
    }

    fn x_atoms(&self, l: usize) -> Vec<TruncNormAtom> {
        self.x_means[l].iter().map(|&mu| TruncNormAtom::new(mu, self.x_var, self.support()).expect("design atoms are valid")).collect()
    }

    /// True density of component `l` at level `level` of the x covariate.
    pub fn x_density(&self, l: usize, level: usize, x: f64) -> f64 {
        let atoms = self.x_atoms(l);
        MarginalMixture::new_unchecked(&atoms, &self.x_weights[level]).pdf(x)
    }

    pub fn x_cdf(&self, l: usize, level: usize, x: f64) -> f64 {
        let atoms = self.x_atoms(l);
        MarginalMixture::new_unchecked(&atoms, &self.x_weights[level]).cdf(x)
    }

    /// Standardized error marginals.
    pub fn error_marginals(&self) -> Vec<ErrorMarginal> {
        self.eps.iter().cloned().map(ErrorMarginal::new).collect()
    }

    /// True variance function v(x) = s(x)².
    pub fn variance(&self, x: f64) -> f64 {
        (self.s_slope * x).powi(2)
    }
}

fn mvn_chol(r: &[Vec<f64>]) -> DMatrix<f64> {
    let d = r.len();
    DMatrix::from_fn(d, d, |a, b| r[a][b]).cholesky().expect("validated positive definite").l()
}

fn correlated_uniforms(l: &DMatrix<f64>, rng: &mut ChainRng) -> Vec<f64> {
    let d = l.nrows();
    let z = DVector::from_iterator(d, (0..d).map(|_| random::std_normal(rng)));
    (l * z).iter().map(|&y| normal::cdf(y)).collect()
}

/// Independent categorical draws, `c[h][i]`.
pub fn gen_covariates(design: &SimulationDesign, rng: &mut ChainRng) -> Vec<Vec<usize>> {
    design
        .level_probs
        .iter()
        .map(|p| (0..design.n).map(|_| random::categorical(p, rng).expect("simplex has mass")).collect())
        .collect()
}

/// Latent truths `x[ℓ][i]`: Gaussian-copula scores pushed through the
/// inverse CDF of each subject's truncated-normal mixture.
pub fn gen_x(design: &SimulationDesign, covariates: &[Vec<usize>], rng: &mut ChainRng) -> Vec<Vec<f64>> {
    let d = design.d();
    let n = covariates.first().map_or(design.n, Vec::len);
    let chol = mvn_chol(&design.r_x);
    let atoms: Vec<Vec<TruncNormAtom>> = (0..d).map(|l| design.x_atoms(l)).collect();
    let mut x = vec![vec![0.0; n]; d];
    for i in 0..n {
        let u = correlated_uniforms(&chol, rng);
        let level = covariates[design.x_covariate][i];
        for l in 0..d {
            x[l][i] = MarginalMixture::new_unchecked(&atoms[l], &design.x_weights[level]).inv_cdf(u[l]).value;
        }
    }
    x
}

/// Scaled errors `ε[ℓ][i][j]` for `n` subjects with `m` replicates each.
pub fn gen_eps(design: &SimulationDesign, n: usize, m: usize, rng: &mut ChainRng) -> Vec<Vec<Vec<f64>>> {
    let d = design.d();
    let chol = mvn_chol(&design.r_eps);
    let marginals = design.error_marginals();
    let mut eps = vec![vec![vec![0.0; m]; n]; d];
    for i in 0..n {
        for j in 0..m {
            let u = correlated_uniforms(&chol, rng);
            for l in 0..d {
                eps[l][i][j] = marginals[l].inv_cdf(u[l]);
            }
        }
    }
    eps
}

/// Truth tables on fixed grids, written alongside simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub design: SimulationDesign,
    pub x_grid: Vec<f64>,
    /// `x_density[ℓ][level][k]` for each level of the x covariate.
    pub x_density: Vec<Vec<Vec<f64>>>,
    pub eps_grid: Vec<f64>,
    pub eps_density: Vec<Vec<f64>>,
    pub varfun: Vec<f64>,
    /// Standardization constants (mean, sd) of each raw error marginal.
    pub eps_standardization: Vec<(f64, f64)>,
}

impl GroundTruth {
    pub fn new(design: &SimulationDesign, n_grid: usize) -> Self {
        let s = design.support();
        let x_grid: Vec<f64> = (0..n_grid).map(|k| s.lower + s.width() * k as f64 / (n_grid - 1) as f64).collect();
        let eps_grid: Vec<f64> = (0..n_grid).map(|k| -6.0 + 12.0 * k as f64 / (n_grid - 1) as f64).collect();
        let marg = design.error_marginals();
        GroundTruth {
            x_density: (0..design.d())
                .map(|l| (0..design.x_weights.len()).map(|lv| x_grid.iter().map(|&x| design.x_density(l, lv, x)).collect()).collect())
                .collect(),
            eps_density: marg.iter().map(|m| eps_grid.iter().map(|&e| m.pdf(e)).collect()).collect(),
            varfun: x_grid.iter().map(|&x| design.variance(x)).collect(),
            eps_standardization: marg.iter().map(|m| (m.raw_mean, m.raw_sd)).collect(),
            design: design.clone(),
            x_grid,
            eps_grid,
        }
    }
}

/// Covariates, truths and surrogates for one replicate data set, plus the
/// latent truths themselves.
pub fn gen_dataset(design: &SimulationDesign, rng: &mut ChainRng) -> Result<(ReplicateDataset, Vec<Vec<f64>>, GroundTruth)> {
    design.validate()?;
    let d = design.d();
    let cov = gen_covariates(design, rng);
    let x = gen_x(design, &cov, rng);
    let m = if design.error_free { 1 } else { design.m };
    let eps = if design.error_free { vec![vec![vec![0.0; 1]; design.n]; d] } else { gen_eps(design, design.n, m, rng) };
    let values: Vec<Vec<Vec<f64>>> = (0..design.n)
        .map(|i| (0..m).map(|j| (0..d).map(|l| x[l][i] + design.s_slope * x[l][i] * eps[l][i][j]).collect()).collect())
        .collect();
    let levels = design.level_probs.iter().map(Vec::len).collect();
    let mut ds = ReplicateDataset::from_parts(&values, d, cov, levels)?;
    ds.covariate_names = design.covariate_names.clone();
    Ok((ds, x, GroundTruth::new(design, 201)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_with_breaks;
    use crate::random::chain_rng;

    #[test]
    fn standardized_errors_have_unit_moments() {
        for m in SimulationDesign::default().error_marginals() {
            let br: Vec<f64> = m.family.breaks().iter().map(|b| (b - m.raw_mean) / m.raw_sd).collect();
            let (lo, hi) = m.bracket();
            let mass = integrate_with_breaks(|e| m.pdf(e), lo, hi, &br, 1e-12);
            let mean = integrate_with_breaks(|e| e * m.pdf(e), lo, hi, &br, 1e-12);
            let var = integrate_with_breaks(|e| e * e * m.pdf(e), lo, hi, &br, 1e-12);
            assert!((mass - 1.0).abs() < 1e-8, "{mass}");
            assert!(mean.abs() < 1e-8, "{mean}");
            assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
    }

    #[test]
    fn standardization_matches_closed_forms() {
        let m = SimulationDesign::default().error_marginals();
        let pair = CenteredPairAtom::new(0.4, 2.0, 2.0, 1.0).unwrap();
        assert!((m[0].raw_sd - pair.variance().sqrt()).abs() < 1e-10);
        assert!((m[1].raw_sd - (0.75f64 * 0.25 + 0.25 * 5.0).sqrt()).abs() < 1e-10);
        assert!((m[2].raw_sd - 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn inverse_cdf_round_trip() {
        for m in SimulationDesign::default().error_marginals() {
            for &u in &[1e-6, 0.01, 0.3, 0.5, 0.77, 0.999] {
                let e = m.inv_cdf(u);
                assert!((m.cdf(e) - u).abs() < 1e-9, "u={u} e={e}");
            }
        }
    }

    #[test]
    fn effective_mixtures_match_design_table() {
        // (component, sex) → probabilities on the distinct means 1.5, 2, 3, 4, 5
        let table = [
            [[0.5, 0.0, 0.2, 0.0, 0.3], [0.8, 0.0, 0.0, 0.0, 0.2]],
            [[0.0, 0.5, 0.0, 0.2, 0.3], [0.0, 0.8, 0.0, 0.0, 0.2]],
            [[0.0, 0.1, 0.4, 0.2, 0.3], [0.0, 0.4, 0.4, 0.0, 0.2]],
        ];
        let distinct = [1.5, 2.0, 3.0, 4.0, 5.0];
        let des = SimulationDesign::default();
        for l in 0..3 {
            for sex in 0..2 {
                let mut eff = [0.0; 5];
                for (mu, w) in des.x_means[l].iter().zip(&des.x_weights[sex]) {
                    eff[distinct.iter().position(|v| v == mu).unwrap()] += w;
                }
                for (a, b) in eff.iter().zip(&table[l][sex]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn x_at_three_has_unit_error_sd() {
        assert!((SimulationDesign::default().variance(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let des = SimulationDesign { n: 50, ..Default::default() };
        let (a, xa, _) = gen_dataset(&des, &mut chain_rng(9, 0)).unwrap();
        let (b, _, _) = gen_dataset(&des, &mut chain_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_replicates(), 150);
        assert!(xa.iter().flatten().all(|v| (0.0..=10.0).contains(v)));
    }

    #[test]
    fn zero_errors_reproduce_truth() {
        let des = SimulationDesign { n: 20, ..SimulationDesign::error_free() };
        let (ds, x, _) = gen_dataset(&des, &mut chain_rng(2, 0)).unwrap();
        assert_eq!(ds.w, x);
    }
}
