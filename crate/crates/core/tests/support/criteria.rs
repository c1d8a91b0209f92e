//! Checks shared by the integration tests and the acceptance target. Every
//! check computes its reference value independently of the code under test
//! (closed forms, quadrature, exhaustive enumeration or statrs) and reports
//! what it measured.

#![allow(dead_code)]

use deconforge_core::config::{Hyperparameters, McmcConfig, Mode};
use deconforge_core::copula::{CorrelationGrid, CorrelationParams};
use deconforge_core::data::ReplicateDataset;
use deconforge_core::eval::{median, replicate_ises, selected_covariates, DensityGrid};
use deconforge_core::kernels::{mix_cdf, mix_inv_cdf, CenteredPairAtom, Kernel, Support, TruncNormAtom};
use deconforge_core::quadrature::integrate_with_breaks;
use deconforge_core::random::{chain_rng, open_unit, std_normal, ChainRng};
use deconforge_core::sampler::{fit, Chain, Model, Posterior};
use deconforge_core::spline::SplineBasis;
use deconforge_core::synth::{gen_dataset, SimulationDesign};
use deconforge_core::tensor::{log_marginal_allocations, ln_partition_prior, ln_stirling2_row, n_clusters, CellCounts, ComboCounts, TensorMixture};
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, InverseGamma, Normal};

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check { name: name.to_owned(), passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "ok  " } else { "FAIL" }, self.name, self.detail)
    }
}

fn log_uniform(lo: f64, hi: f64, rng: &mut ChainRng) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * open_unit(rng)).exp()
}

pub fn random_tn_atom(rng: &mut ChainRng) -> TruncNormAtom {
    let mu = -3.0 + 16.0 * open_unit(rng);
    let var = log_uniform(0.01, 25.0, rng);
    TruncNormAtom::new(mu, var, Support::default()).expect("valid atom")
}

pub fn random_pair_atom(rng: &mut ChainRng) -> CenteredPairAtom {
    let p = open_unit(rng);
    let mu = 2.0 * std_normal(rng);
    CenteredPairAtom::new(p, mu, log_uniform(0.01, 10.0, rng), log_uniform(0.01, 10.0, rng)).expect("valid atom")
}

/// Quadrature range and break points covering a pair atom to 40 sd.
fn pair_range(a: &CenteredPairAtom) -> (f64, f64, Vec<f64>) {
    let (m1, m2) = a.locations();
    let sd = a.var1().max(a.var2()).sqrt();
    let lo = m1.min(m2) - 40.0 * sd;
    let hi = m1.max(m2) + 40.0 * sd;
    (lo, hi, vec![m1, m2])
}

pub fn tn_normalization() -> Check {
    let mut rng = chain_rng(101, 0);
    let s = Support::default();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let a = random_tn_atom(&mut rng);
        let sd = a.sd();
        let breaks = [a.mu(), s.lower + sd, s.upper - sd, a.mu() - sd, a.mu() + sd];
        let total = integrate_with_breaks(|x| a.pdf(x), s.lower, s.upper, &breaks, 1e-12);
        worst = worst.max((total - 1.0).abs());
    }
    Check::new("truncated-normal atoms integrate to one", worst <= 1e-8, format!("max |∫f − 1| = {worst:.2e} over 500 atoms"))
}

pub fn pair_normalization_and_mean() -> Check {
    let mut rng = chain_rng(102, 0);
    let (mut mass, mut mean): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let a = random_pair_atom(&mut rng);
        let (lo, hi, br) = pair_range(&a);
        mass = mass.max((integrate_with_breaks(|e| a.pdf(e), lo, hi, &br, 1e-12) - 1.0).abs());
        mean = mean.max(integrate_with_breaks(|e| e * a.pdf(e), lo, hi, &br, 1e-12).abs());
    }
    let ok = mass <= 1e-8 && mean <= 1e-8;
    Check::new("error atoms are normalized with mean zero", ok, format!("max |∫f − 1| = {mass:.2e}, max |∫εf| = {mean:.2e} over 1000 atoms"))
}

pub fn partition_of_unity() -> Check {
    let basis = SplineBasis::new(Support::default(), 12, 2).expect("basis");
    let mut rng = chain_rng(103, 0);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    let pts = (0..10_000).map(|_| 10.0 * open_unit(&mut rng)).chain([0.0, 10.0]).chain(basis.knots().iter().copied().filter(|k| (0.0..=10.0).contains(k)));
    for x in pts {
        let b = basis.basis_eval(x);
        negative |= b.iter().any(|v| *v < 0.0);
        worst = worst.max((b.iter().sum::<f64>() - 1.0).abs());
    }
    Check::new("spline basis is a nonnegative partition of unity", worst <= 1e-12 && !negative, format!("max |Σ B − 1| = {worst:.2e}"))
}

/// Correlation matrices from random grid points: symmetric, unit diagonal,
/// positive definite, with determinant Π(1 − b²).
pub fn correlation_validity(points: usize) -> Check {
    let d = 4;
    let grid = CorrelationGrid { m: 41 };
    let mut rng = chain_rng(104, 0);
    let mut failures = 0;
    let mut worst_det: f64 = 0.0;
    for _ in 0..points {
        let mut p = CorrelationParams::identity(d, grid.m);
        p.b.iter_mut().chain(p.theta.iter_mut()).for_each(|v| *v = (open_unit(&mut rng) * grid.m as f64) as usize % grid.m);
        let r = p.correlation();
        let m = DMatrix::from_fn(d, d, |i, j| r[i][j]);
        let unit = (0..d).all(|i| (m[(i, i)] - 1.0).abs() <= 1e-12);
        let sym = (0..d).all(|i| (0..d).all(|j| m[(i, j)] == m[(j, i)] && m[(i, j)].abs() <= 1.0 + 1e-12));
        let det_expected: f64 = p.b_values().iter().map(|b| 1.0 - b * b).product();
        let pd = m.clone().cholesky().is_some();
        worst_det = worst_det.max((m.determinant() - det_expected).abs() / det_expected);
        if !(unit && sym && pd) {
            failures += 1;
        }
    }
    let ok = failures == 0 && worst_det < 1e-8;
    Check::new("grid correlations are valid", ok, format!("{failures} invalid of {points}, max relative det error {worst_det:.1e}"))
}

pub fn cdf_round_trips() -> Check {
    let mut rng = chain_rng(105, 0);
    let mut worst: f64 = 0.0;
    let mut track = |u: f64, f: f64| worst = worst.max((u - f).abs());
    for _ in 0..200 {
        let a = random_tn_atom(&mut rng);
        for _ in 0..20 {
            let u = open_unit(&mut rng);
            let q = a.inv_cdf(u);
            if !q.clamped {
                track(u, a.cdf(q.value));
            }
        }
    }
    for _ in 0..100 {
        let tn: Vec<TruncNormAtom> = (0..3).map(|_| random_tn_atom(&mut rng)).collect();
        let pairs: Vec<CenteredPairAtom> = (0..3).map(|_| random_pair_atom(&mut rng)).collect();
        let raw: Vec<f64> = (0..3).map(|_| open_unit(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        for _ in 0..20 {
            let u = open_unit(&mut rng);
            let q = mix_inv_cdf(u, &tn, &w).expect("valid mixture");
            if !q.clamped {
                track(u, mix_cdf(q.value, &tn, &w).expect("valid mixture"));
            }
            let q = mix_inv_cdf(u, &pairs, &w).expect("valid mixture");
            if !q.clamped {
                track(u, mix_cdf(q.value, &pairs, &w).expect("valid mixture"));
            }
        }
    }
    for marginal in SimulationDesign::default().error_marginals() {
        for k in 1..200 {
            let u = k as f64 / 200.0;
            track(u, marginal.cdf(marginal.inv_cdf(u)));
        }
    }
    Check::new("inverse CDFs round-trip", worst <= 1e-7, format!("max |F(F⁻¹(u)) − u| = {worst:.2e}"))
}

/// ln of the probability of one allocation sequence under the Pólya urn with
/// base weights `a`, counting as the sequence is consumed.
pub fn urn_sequence_ln_prob(seq: &[usize], a: &[f64]) -> f64 {
    let total: f64 = a.iter().sum();
    let mut seen = vec![0.0; a.len()];
    let mut lp = 0.0;
    for (t, &k) in seq.iter().enumerate() {
        lp += ((a[k] + seen[k]) / (total + t as f64)).ln();
        seen[k] += 1.0;
    }
    lp
}

/// Every count vector over `k` atoms with total at most `max_total`.
pub fn count_vectors(k: usize, max_total: u32) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|v: Vec<u32>| {
                let used: u32 = v.iter().sum();
                (0..=max_total - used).map(move |c| {
                    let mut w = v.clone();
                    w.push(c);
                    w
                })
            })
            .collect();
    }
    out
}

fn sequence_of(counts: &[u32]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c as usize)).collect()
}

/// Closed-form marginal of the allocations against the sequential urn, for
/// every count vector with at most six observations, in one and two cells.
pub fn marginal_likelihood_oracle() -> Check {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for base in [[0.05, 0.05, 0.1], [0.5, 0.3, 0.2], [3.0, 1.5, 3.0]] {
        let vectors = count_vectors(3, 6);
        for (v, counts) in vectors.iter().enumerate() {
            let mut cells = CellCounts::new();
            cells.insert(0, counts.clone());
            let oracle = urn_sequence_ln_prob(&sequence_of(counts), &base);
            worst = worst.max((log_marginal_allocations(&cells, &base) - oracle).abs());
            // pair it with another vector in a second cell
            let other = &vectors[(v * 37 + 11) % vectors.len()];
            cells.insert(5, other.clone());
            let oracle = oracle + urn_sequence_ln_prob(&sequence_of(other), &base);
            worst = worst.max((log_marginal_allocations(&cells, &base) - oracle).abs());
            cases += 2;
        }
    }
    Check::new("allocation marginal matches the urn oracle", worst <= 1e-10, format!("max |Δ ln p| = {worst:.2e} over {cases} cases"))
}

/// Exact posterior over the set partitions of covariate 1 with fixed counts.
/// `counts[level]` are the atom counts per level of that covariate.
pub fn exact_partition_posterior(tensor: &TensorMixture, combos: &ComboCounts, maps: &[Vec<usize>]) -> Vec<f64> {
    let d = tensor.dims()[1];
    let ln_s = ln_stirling2_row(d);
    let mut t = tensor.clone();
    let lp: Vec<f64> = maps
        .iter()
        .map(|m| {
            t.set_map(1, m.clone());
            t.log_marginal(combos) + ln_partition_prior(n_clusters(m), &ln_s, t.phi)
        })
        .collect();
    let top = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Canonical maps (set partitions) of `d` levels.
pub fn set_partitions(d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for _ in 1..d {
        out = out
            .into_iter()
            .flat_map(|m: Vec<usize>| {
                let k = n_clusters(&m);
                (0..=k).map(move |z| {
                    let mut v = m.clone();
                    v.push(z);
                    v
                })
            })
            .collect();
    }
    out
}

/// Split/merge frequencies over `sweeps` steps against the enumerated
/// posterior; returns the total-variation distance.
pub fn split_merge_tv(level_counts: &[Vec<u32>], phi: f64, sweeps: usize, seed: u64) -> f64 {
    let d = level_counts.len();
    let k_atoms = level_counts[0].len();
    let mut tensor = TensorMixture::new(k_atoms, vec![1, d], 1.0, 1.0, phi).expect("tensor");
    let tuples: Vec<Vec<usize>> = (0..d).map(|c| vec![0, c]).collect();
    let mut combos = ComboCounts::new(tuples, k_atoms);
    for (c, counts) in level_counts.iter().enumerate() {
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                combos.add(c, k);
            }
        }
    }
    let maps = set_partitions(d);
    let exact = exact_partition_posterior(&tensor, &combos, &maps);
    let mut rng = chain_rng(seed, 0);
    let mut freq = vec![0.0; maps.len()];
    for _ in 0..sweeps {
        tensor.split_merge_step(&combos, &mut rng);
        let at = maps.iter().position(|m| m == &tensor.maps()[1]).expect("canonical map");
        freq[at] += 1.0 / sweeps as f64;
    }
    0.5 * freq.iter().zip(&exact).map(|(f, e)| (f - e).abs()).sum::<f64>()
}

pub fn split_merge_enumeration() -> Check {
    let scenarios: [&[Vec<u32>]; 3] = [&[vec![3, 1], vec![1, 3]], &[vec![2, 2], vec![2, 2]], &[vec![4, 0], vec![1, 2]]];
    let tvs: Vec<f64> = scenarios.iter().enumerate().map(|(s, c)| split_merge_tv(c, 1.0, 100_000, 200 + s as u64)).collect();
    let worst = tvs.iter().copied().fold(0.0, f64::max);
    Check::new("split/merge matches the enumerated posterior", worst <= 0.02, format!("TV per scenario {tvs:.4?}"))
}

pub fn property_suite() -> Vec<Check> {
    vec![
        tn_normalization(),
        pair_normalization_and_mean(),
        partition_of_unity(),
        correlation_validity(100_000),
        cdf_round_trips(),
        marginal_likelihood_oracle(),
        split_merge_enumeration(),
    ]
}

/// Two-sided Kolmogorov–Smirnov distance of a sample from `cdf`.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Small dataset whose shape (three components, covariates with two and
/// four levels) fixes the tensor dimensions; its values are never used.
pub fn prior_dataset() -> ReplicateDataset {
    let values: Vec<Vec<Vec<f64>>> = (0..8).map(|i| vec![vec![1.0 + i as f64 * 0.5, 2.0, 3.0]; 2]).collect();
    let covariates = vec![(0..8).map(|i| i % 2).collect(), (0..8).map(|i| i % 4).collect()];
    ReplicateDataset::from_parts(&values, 3, covariates, vec![2, 4]).expect("dataset")
}

/// Draws from a likelihood-free run. One value per retained sweep, cycling
/// through atoms and components so consecutive draws come from different
/// chains of exchangeable quantities.
pub struct PriorDraws {
    pub model: Model,
    pub k_x: Vec<Vec<f64>>,
    pub k_eps: Vec<Vec<f64>>,
    pub x_mu: Vec<f64>,
    pub x_var: Vec<f64>,
    pub eps_p: Vec<f64>,
    pub eps_mu: Vec<f64>,
    pub eps_var: Vec<f64>,
    pub sigma2_theta: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    /// Grid index of one copula coordinate per draw, cycling over both
    /// correlation matrices.
    pub grid: Vec<usize>,
}

pub fn prior_hyper() -> Hyperparameters {
    // Wider random-walk steps than the defaults: nothing constrains the
    // atoms without data, and the prior ranges are broad.
    Hyperparameters {
        prop_x_mu: 4.0,
        prop_x_sigma2: 1.0,
        prop_eps_p: 0.25,
        prop_eps_mu: 1.0,
        prop_eps_sigma2: 4.0,
        prop_theta_prior_shape: true,
        ..Default::default()
    }
}

pub fn run_prior(draws: usize, thin: usize, seed: u64) -> PriorDraws {
    let burn = 1000;
    let mcmc = McmcConfig { n_iter: burn + draws * thin, burn_in: burn, thin, seed, prior_only: true, ..Default::default() };
    let model = Model::new(&prior_dataset(), &prior_hyper(), &mcmc).expect("model");
    let mut out = PriorDraws {
        k_x: vec![Vec::new(); 3],
        k_eps: vec![Vec::new(); 3],
        x_mu: Vec::new(),
        x_var: Vec::new(),
        eps_p: Vec::new(),
        eps_mu: Vec::new(),
        eps_var: Vec::new(),
        sigma2_theta: Vec::new(),
        theta: Vec::new(),
        grid: Vec::new(),
        model: model.clone(),
    };
    let mut chain = Chain::new(&model, 0).expect("chain");
    for t in 0..burn {
        chain.sweep().expect("sweep");
        if (t + 1) % 50 == 0 {
            chain.adapt();
        }
    }
    for r in 0..draws {
        for _ in 0..thin {
            chain.sweep().expect("sweep");
        }
        let st = &chain.state;
        let em = st.em.as_ref().expect("deconvolution mode");
        for h in 0..3 {
            out.k_x[h].push(n_clusters(&st.xm.tensor.maps()[h]) as f64);
            out.k_eps[h].push(n_clusters(&em.tensor.maps()[h]) as f64);
        }
        let a = r % model.k_x;
        out.x_mu.push(st.xm.atoms[a].mu());
        out.x_var.push(st.xm.atoms[a].var());
        let e = &em.atoms[r % model.k_eps];
        out.eps_p.push(e.p());
        out.eps_mu.push(e.mu());
        out.eps_var.push(e.var1());
        out.sigma2_theta.push(st.sigma2_theta[r % 3]);
        out.theta.push(st.theta[r % 3].clone());
        let coords: Vec<usize> = [&st.r_x, &st.r_eps].iter().flat_map(|p| p.b.iter().chain(&p.theta).copied()).collect();
        out.grid.push(coords[r % coords.len()]);
    }
    out
}

/// e^{−φk} on k = 1..=d, normalized.
pub fn truncated_exponential_pmf(d: usize, phi: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=d).map(|k| (-phi * k as f64).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn tv_from_pmf(sample: &[f64], pmf: &[f64]) -> f64 {
    let n = sample.len() as f64;
    0.5 * pmf.iter().enumerate().map(|(i, p)| (sample.iter().filter(|&&k| k == (i + 1) as f64).count() as f64 / n - p).abs()).sum::<f64>()
}

pub fn prior_reproduction(draws: usize) -> Vec<Check> {
    let run = run_prior(draws, 10, 7);
    let hp = &run.model.hyper;
    let dims = run.model.dims();
    let mut checks = Vec::new();

    let mut tv = Vec::new();
    for (h, &dh) in dims.iter().enumerate() {
        let pmf_x = truncated_exponential_pmf(dh, hp.phi_x);
        let pmf_e = truncated_exponential_pmf(dh, hp.phi_eps);
        tv.push(tv_from_pmf(&run.k_x[h], &pmf_x));
        tv.push(tv_from_pmf(&run.k_eps[h], &pmf_e));
    }
    let worst = tv.iter().copied().fold(0.0, f64::max);
    checks.push(Check::new("prior cluster counts", worst <= 0.02, format!("max TV {worst:.4} over x and error maps with {dims:?} levels")));

    let s = run.model.support;
    let mu_prior = Normal::new(hp.mu_x0(), hp.sigma2_x0().sqrt()).expect("normal");
    let (flo, fhi) = (mu_prior.cdf(s.lower), mu_prior.cdf(s.upper));
    let ks_mu = ks_distance(&run.x_mu, |v| (mu_prior.cdf(v) - flo) / (fhi - flo));
    let var_prior = InverseGamma::new(hp.a_x_sigma2, hp.b_x_sigma2).expect("inverse gamma");
    let (glo, ghi) = (var_prior.cdf(hp.lower_x_sigma2), var_prior.cdf(hp.upper_x_sigma2));
    let ks_var = ks_distance(&run.x_var, |v| (var_prior.cdf(v) - glo) / (ghi - glo));
    let ks_p = ks_distance(&run.eps_p, |v| v.clamp(0.0, 1.0));
    let eps_mu_prior = Normal::new(0.0, hp.sigma2_eps_mu.sqrt()).expect("normal");
    let ks_emu = ks_distance(&run.eps_mu, |v| eps_mu_prior.cdf(v));
    let eps_var_prior = InverseGamma::new(hp.a_eps, hp.b_eps).expect("inverse gamma");
    let ks_evar = ks_distance(&run.eps_var, |v| eps_var_prior.cdf(v));
    let atom_ks = [ks_mu, ks_var, ks_p, ks_emu, ks_evar];
    let worst = atom_ks.iter().copied().fold(0.0, f64::max);
    checks.push(Check::new(
        "prior atoms",
        worst < 0.05,
        format!("KS x location {ks_mu:.4}, x variance {ks_var:.4}, error p {ks_p:.4}, error location {ks_emu:.4}, error variance {ks_evar:.4}"),
    ));

    let s2_prior = InverseGamma::new(hp.a_theta, hp.b_theta).expect("inverse gamma");
    let ks_s2 = ks_distance(&run.sigma2_theta, |v| s2_prior.cdf(v));
    let m = run.model.hyper.grid_size;
    let mut grid_ks: f64 = 0.0;
    let mut below = 0;
    for i in 0..m {
        below += run.grid.iter().filter(|&&g| g == i).count();
        grid_ks = grid_ks.max((below as f64 / run.grid.len() as f64 - (i + 1) as f64 / m as f64).abs());
    }
    checks.push(Check::new("prior correlation grid", grid_ks < 0.05, format!("KS {grid_ks:.4} against the uniform law on {m} points")));

    checks.push(Check::new("prior smoothness variance", ks_s2 < 0.05, format!("KS {ks_s2:.4} over {} draws", run.sigma2_theta.len())));
    checks
}

/// One covariate-free component, normal errors of constant variance and a
/// two-atom truncated-normal truth; ISE of the posterior mean density.
pub fn univariate_oracle(seed: u64) -> Check {
    let sup = Support::default();
    let atoms = [TruncNormAtom::new(3.0, 0.64, sup).expect("atom"), TruncNormAtom::new(6.5, 1.0, sup).expect("atom")];
    let truth = |x: f64| 0.6 * atoms[0].pdf(x) + 0.4 * atoms[1].pdf(x);
    let mut rng = chain_rng(seed, 7);
    let values: Vec<Vec<Vec<f64>>> = (0..500)
        .map(|_| {
            let a = &atoms[usize::from(open_unit(&mut rng) >= 0.6)];
            let x = loop {
                let v = a.mu() + a.sd() * std_normal(&mut rng);
                if sup.contains(v) {
                    break v;
                }
            };
            (0..3).map(|_| vec![x + 0.8 * std_normal(&mut rng)]).collect()
        })
        .collect();
    let ds = ReplicateDataset::from_parts(&values, 1, vec![], vec![]).expect("dataset");
    let mcmc = McmcConfig { n_iter: 2000, burn_in: 1000, thin: 5, seed, scale: false, ..Default::default() };
    let post = fit(&ds, &Hyperparameters::default(), &mcmc).expect("fit");
    let m = &post.marginals()[0];
    let h = m.x[1] - m.x[0];
    // trapezoid weights, independent of the evaluation module
    let ise: f64 = m.x.iter().zip(&m.mean).enumerate().map(|(k, (x, v))| {
        let w = if k == 0 || k + 1 == m.x.len() { 0.5 } else { 1.0 };
        w * h * (v - truth(*x)).powi(2)
    }).sum();
    Check::new("univariate deconvolution", ise < 5e-3, format!("ISE {ise:.5} (n = 500, m = 3, 2000 sweeps)"))
}

fn estimates(post: &Posterior) -> Vec<DensityGrid> {
    post.marginals().into_iter().map(|m| DensityGrid::new(m.component, m.group, m.x, m.mean).expect("grid")).collect()
}

fn median_cells(ises: &[std::collections::BTreeMap<(String, String), f64>]) -> Vec<(String, f64)> {
    let mut cells: std::collections::BTreeMap<(String, String), Vec<f64>> = Default::default();
    for rep in ises {
        for (k, v) in rep {
            cells.entry(k.clone()).or_default().push(1000.0 * v);
        }
    }
    cells.into_iter().map(|((c, g), v)| (format!("{c}/{g}"), median(&v))).collect()
}

/// The benchmark design at desk scale: median ISE per (component, sex) cell
/// and covariate selection over `reps` replicates.
pub fn simulation_recovery(reps: u64, n: usize) -> Vec<Check> {
    let design = SimulationDesign { n, ..Default::default() };
    let mut ises = Vec::new();
    let mut hits = 0;
    for rep in 0..reps {
        let (ds, _, _) = gen_dataset(&design, &mut chain_rng(rep, 1000)).expect("dataset");
        let mcmc = McmcConfig { n_iter: 2000, burn_in: 1000, thin: 5, seed: rep, scale: false, ..Default::default() };
        let post = fit(&ds, &Hyperparameters::default(), &mcmc).expect("fit");
        ises.push(replicate_ises(&design, &estimates(&post)).expect("ise"));
        let inc = post.inclusion();
        let x = selected_covariates(&inc, "x");
        let e = selected_covariates(&inc, "eps");
        hits += usize::from(x == ["component", "sex"] && e == ["component"]);
    }
    let cells = median_cells(&ises);
    let worst = cells.iter().map(|c| c.1).fold(0.0, f64::max);
    let table: Vec<String> = cells.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
    vec![
        Check::new("benchmark recovery", cells.len() == 6 && worst <= 25.0, format!("median ISE x 1000: {}", table.join(", "))),
        Check::new("benchmark selection", hits * 10 >= 8 * reps as usize, format!("{hits}/{reps} replicates select exactly the true covariates")),
    ]
}

/// Density estimation without measurement error on the benchmark truths.
pub fn density_recovery(reps: u64, n: usize) -> Check {
    let design = SimulationDesign { n, ..SimulationDesign::error_free() };
    let mut ises = Vec::new();
    for rep in 0..reps {
        let (ds, _, _) = gen_dataset(&design, &mut chain_rng(rep, 2000)).expect("dataset");
        let mcmc = McmcConfig { n_iter: 2000, burn_in: 1000, thin: 5, seed: rep, scale: false, mode: Mode::DensityRegression, ..Default::default() };
        let post = fit(&ds, &Hyperparameters::default(), &mcmc).expect("fit");
        ises.push(replicate_ises(&design, &estimates(&post)).expect("ise"));
    }
    let cells = median_cells(&ises);
    let worst = cells.iter().map(|c| c.1).fold(0.0, f64::max);
    let table: Vec<String> = cells.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    Check::new("density estimation", cells.len() == 6 && worst <= 0.6, format!("median ISE x 1000: {}", table.join(", ")))
}
