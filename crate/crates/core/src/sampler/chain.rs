use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::copula::{copula_logdensity_unchecked, latent_from_cdf, update_correlation, CorrelationParams, PanelStats};
use crate::error::{Error, Result};
use crate::kernels::{CenteredPairAtom, Kernel, TruncNormAtom};
use crate::normal;
use crate::random::{self, chain_rng, ChainRng};
use crate::spline::{init_coefficients, mh_update_coefficients, LocalBasis};
use crate::tensor::{sample_allocation, ComboCounts, TensorMixture};

/// Sweeps between proposal-scale adjustments before burn-in ends.
pub const ADAPT_INTERVAL: usize = 50;

/// Mixture weights below this are skipped when evaluating densities in the
/// latent-value and copula blocks.
const NEGLIGIBLE_WEIGHT: f64 = 1e-15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub accepted: u64,
    pub proposed: u64,
}

impl Rate {
    #[inline]
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Acceptance counts per block over the whole run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub x_atoms: Rate,
    pub x_split_merge: Rate,
    pub eps_atoms: Rate,
    pub eps_split_merge: Rate,
    pub theta: Rate,
    pub sigma2_theta: Rate,
    pub latent_x: Rate,
    pub copula: Rate,
}

impl BlockStats {
    pub fn summary(&self) -> String {
        format!(
            "acceptance x-atoms {:.2} x-maps {:.3} eps-atoms {:.2} eps-maps {:.3} theta {:.2} latent {:.2} copula {:.2}",
            self.x_atoms.rate(),
            self.x_split_merge.rate(),
            self.eps_atoms.rate(),
            self.eps_split_merge.rate(),
            self.theta.rate(),
            self.latent_x.rate(),
            self.copula.rate()
        )
    }
}

/// Shared atoms with tensor-factorized weights and per-observation labels.
#[derive(Clone, Debug)]
pub struct Mixture<K> {
    pub atoms: Vec<K>,
    pub tensor: TensorMixture,
    pub counts: ComboCounts,
    /// Atom of each observation, `z[ℓ][idx]`.
    pub z: Vec<Vec<usize>>,
    /// Weights of each (component, covariate tuple) combination.
    pub weights: Vec<Vec<f64>>,
}

impl<K: Kernel> Mixture<K> {
    fn refresh_weights(&mut self) {
        let tensor = &self.tensor;
        self.weights = self.counts.tuples.iter().map(|t| tensor.weights(t).to_vec()).collect();
    }

    fn allocate(&mut self, values: &[Vec<f64>], combo: impl Fn(usize, usize) -> usize, rng: &mut ChainRng) {
        let mut ln_lik = vec![0.0; self.atoms.len()];
        let mut scratch = Vec::with_capacity(self.atoms.len());
        for (l, vals) in values.iter().enumerate() {
            for (idx, &v) in vals.iter().enumerate() {
                for (slot, atom) in ln_lik.iter_mut().zip(&self.atoms) {
                    *slot = atom.ln_pdf(v);
                }
                self.z[l][idx] = sample_allocation(&self.weights[combo(l, idx)], &ln_lik, &mut scratch, rng);
            }
        }
    }

    fn recount(&mut self, combo: impl Fn(usize, usize) -> usize) {
        self.counts.clear();
        for (l, zl) in self.z.iter().enumerate() {
            for (idx, &k) in zl.iter().enumerate() {
                self.counts.add(combo(l, idx), k);
            }
        }
    }

    /// λ₀, optionally one split-or-merge move per covariate, then λ.
    fn update_weights(&mut self, split_merge: bool, rng: &mut ChainRng) -> Vec<Option<bool>> {
        self.tensor.update_base_measure(&self.counts, rng);
        let moves = if split_merge { self.tensor.split_merge_step(&self.counts, rng) } else { Vec::new() };
        self.tensor.update_core_tensor(&self.counts, rng);
        self.refresh_weights();
        moves
    }

    /// ln density and CDF of combination `g` at `v`.
    pub fn eval(&self, g: usize, v: f64) -> (f64, f64) {
        let w = &self.weights[g];
        let (mut pdf, mut cdf) = (0.0, 0.0);
        for (atom, &wk) in self.atoms.iter().zip(w) {
            if wk > NEGLIGIBLE_WEIGHT {
                pdf += wk * atom.pdf(v);
                cdf += wk * atom.cdf(v);
            }
        }
        let ln_pdf = if pdf > 0.0 {
            pdf.ln()
        } else {
            // every density underflowed: redo in log space
            let terms: Vec<f64> = self.atoms.iter().zip(w).filter(|(_, &wk)| wk > 0.0).map(|(a, &wk)| wk.ln() + a.ln_pdf(v)).collect();
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m.is_finite() {
                m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            } else {
                m
            }
        };
        (ln_pdf, cdf.min(1.0))
    }
}

/// Everything a sweep updates.
#[derive(Clone, Debug)]
pub struct ChainState {
    /// Latent (or observed) truths `x[ℓ][i]`.
    pub x: Vec<Vec<f64>>,
    pub xm: Mixture<TruncNormAtom>,
    /// Scaled-error mixture; absent in density-regression mode.
    pub em: Option<Mixture<CenteredPairAtom>>,
    /// ε = (w − x)/s(x) per flat replicate index, `eps[ℓ][f]`.
    pub eps: Vec<Vec<f64>>,
    /// s_ℓ(x_{ℓ,i}).
    pub s: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub sigma2_theta: Vec<f64>,
    pub r_x: CorrelationParams,
    pub r_eps: CorrelationParams,
}

/// Marginal log densities and normal scores under the current parameters.
#[derive(Clone, Debug, Default)]
struct LatentCache {
    ln_fx: Vec<Vec<f64>>,
    yx: Vec<f64>,
    cx: Vec<f64>,
    ln_fe: Vec<Vec<f64>>,
    ye: Vec<f64>,
    ce: Vec<f64>,
}

pub struct Chain<'m> {
    pub model: &'m Model,
    pub state: ChainState,
    pub rng: ChainRng,
    /// Latent-x proposal standard deviations per component.
    pub tau: Vec<f64>,
    /// Multiplier of the ϑ proposal covariance per component.
    pub theta_scale: Vec<f64>,
    pub stats: BlockStats,
    window_latent: Vec<Rate>,
    window_theta: Vec<Rate>,
    cache: LatentCache,
}

impl<'m> Chain<'m> {
    /// Starting state: x at subject means (clamped to the support), x atoms
    /// by k-means, standard-normal error atoms, variance functions from the
    /// replicate-deviation fit, identity correlations.
    pub fn new(model: &'m Model, chain_id: u64) -> Result<Chain<'m>> {
        let mut rng = chain_rng(model.mcmc.seed, chain_id);
        let hp = &model.hyper;
        let (d, n) = (model.d(), model.n());
        let ds = &model.ds;
        let support = model.support;
        let dims = model.dims();
        let tuples = model.combo_tuples();

        let x: Vec<Vec<f64>> = match &model.x_obs {
            Some(x) => x.clone(),
            None => ds.subject_means().into_iter().map(|xl| xl.into_iter().map(|v| support.clamp(v)).collect()).collect(),
        };

        let pooled: Vec<f64> = x.iter().flatten().copied().collect();
        let (centers, assign) = kmeans(&pooled, model.k_x, &mut rng);
        let mut atoms = Vec::with_capacity(model.k_x);
        let within: f64 = if pooled.is_empty() {
            1.0
        } else {
            pooled.iter().zip(&assign).map(|(v, &a)| (v - centers[a]).powi(2)).sum::<f64>() / pooled.len() as f64
        };
        for (c, &center) in centers.iter().enumerate() {
            let members: Vec<f64> = pooled.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(v, _)| *v).collect();
            let var = if members.len() >= 2 {
                members.iter().map(|v| (v - center).powi(2)).sum::<f64>() / members.len() as f64
            } else {
                within
            };
            let var = var.clamp(hp.lower_x_sigma2, hp.upper_x_sigma2);
            atoms.push(TruncNormAtom::new(support.clamp(center), var, support)?);
        }
        while atoms.len() < model.k_x {
            atoms.push(draw_x_atom_prior(model, &mut rng)?);
        }
        let z_x: Vec<Vec<usize>> = (0..d).map(|l| assign[l * n..(l + 1) * n].to_vec()).collect();
        let tensor = TensorMixture::new(model.k_x, dims.clone(), hp.alpha_x, hp.alpha0_x, hp.phi_x)?;
        let mut xm = Mixture { atoms, tensor, counts: ComboCounts::new(tuples.clone(), model.k_x), z: z_x, weights: Vec::new() };
        xm.recount(|l, i| model.combo(l, i));
        xm.tensor.update_core_tensor(&xm.counts, &mut rng);
        xm.refresh_weights();

        let n_rep = ds.total_replicates();
        let (em, theta, s, eps) = if model.deconvolution() {
            let tensor = TensorMixture::new(model.k_eps, dims, hp.alpha_eps, hp.alpha0_eps, hp.phi_eps)?;
            let mut em = Mixture {
                atoms: vec![CenteredPairAtom::standard(); model.k_eps],
                tensor,
                counts: ComboCounts::new(tuples, model.k_eps),
                z: vec![vec![0; n_rep]; d],
                weights: Vec::new(),
            };
            em.refresh_weights();
            let theta: Vec<Vec<f64>> = (0..d).map(|l| init_coefficients(ds, l, &model.basis, &model.smooth, hp.sigma2_theta0)).collect();
            let s: Vec<Vec<f64>> = (0..d).map(|l| x[l].iter().map(|&xi| model.basis.var_eval(xi, &theta[l]).sqrt()).collect()).collect();
            let eps = (0..d)
                .map(|l| (0..n_rep).map(|f| (ds.w[l][f] - x[l][model.replicate_subject[f]]) / s[l][model.replicate_subject[f]]).collect())
                .collect();
            (Some(em), theta, s, eps)
        } else {
            (None, Vec::new(), Vec::new(), Vec::new())
        };

        let m = hp.grid_size;
        let state = ChainState {
            x,
            xm,
            em,
            eps,
            s,
            sigma2_theta: vec![hp.sigma2_theta0; theta.len()],
            theta,
            r_x: CorrelationParams::identity(d, m),
            r_eps: CorrelationParams::identity(d, m),
        };
        Ok(Chain {
            model,
            state,
            rng,
            tau: vec![hp.prop_x_latent; d],
            theta_scale: vec![1.0; d],
            stats: BlockStats::default(),
            window_latent: vec![Rate::default(); d],
            window_theta: vec![Rate::default(); d],
            cache: LatentCache::default(),
        })
    }

    /// Passes over the marginal mixtures with x, then the errors, held
    /// fixed; cluster maps stay at their initial values.
    pub fn warm_up(&mut self) {
        for _ in 0..self.model.mcmc.warmup {
            self.x_mixture_block(false);
        }
        if self.state.em.is_some() {
            for _ in 0..self.model.mcmc.warmup {
                self.eps_mixture_block(false);
            }
        }
    }

    pub fn sweep(&mut self) -> Result<()> {
        self.x_mixture_block(true);
        if self.model.deconvolution() {
            self.eps_mixture_block(true);
            self.variance_block();
            self.latent_block();
        } else {
            self.refresh_cache();
        }
        self.copula_block();
        Ok(())
    }

    fn x_mixture_block(&mut self, split_merge: bool) {
        let model = self.model;
        let combo = |l: usize, i: usize| model.combo(l, i);
        let xm = &mut self.state.xm;
        xm.allocate(&self.state.x, combo, &mut self.rng);
        xm.recount(combo);
        for m in xm.update_weights(split_merge, &mut self.rng).into_iter().flatten() {
            self.stats.x_split_merge.record(m);
        }
        self.update_x_atoms();
    }

    fn eps_mixture_block(&mut self, split_merge: bool) {
        let model = self.model;
        let combo = |l: usize, f: usize| model.combo(l, model.replicate_subject[f]);
        let em = self.state.em.as_mut().expect("deconvolution mode");
        em.allocate(&self.state.eps, combo, &mut self.rng);
        em.recount(combo);
        for m in em.update_weights(split_merge, &mut self.rng).into_iter().flatten() {
            self.stats.eps_split_merge.record(m);
        }
        self.update_eps_atoms();
    }

    /// Random-walk MH on each x atom's location, then its variance, under
    /// the truncated-normal likelihood of the allocated values. Atoms with
    /// nothing allocated are drawn from the prior, except in prior-only runs
    /// where the same MH moves are used.
    fn update_x_atoms(&mut self) {
        let model = self.model;
        let hp = &model.hyper;
        let support = model.support;
        let k = model.k_x;
        let mut n = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for (xl, zl) in self.state.x.iter().zip(&self.state.xm.z) {
            for (&v, &a) in xl.iter().zip(zl) {
                n[a] += 1.0;
                s1[a] += v;
                s2[a] += v * v;
            }
        }
        let (mu0, s0) = (hp.mu_x0(), hp.sigma2_x0());
        let ln_prior_mu = |mu: f64| if support.contains(mu) { -(mu - mu0).powi(2) / (2.0 * s0) } else { f64::NEG_INFINITY };
        let ln_prior_var = |v: f64| {
            if v >= hp.lower_x_sigma2 && v <= hp.upper_x_sigma2 {
                -(hp.a_x_sigma2 + 1.0) * v.ln() - hp.b_x_sigma2 / v
            } else {
                f64::NEG_INFINITY
            }
        };
        for a in 0..k {
            if n[a] == 0.0 && !model.mcmc.prior_only {
                self.state.xm.atoms[a] = draw_x_atom_prior(model, &mut self.rng).expect("prior draws lie inside the support");
                continue;
            }
            let ll = |atom: &TruncNormAtom| {
                let (mu, var) = (atom.mu(), atom.var());
                -n[a] * (0.5 * var.ln() + atom.ln_mass()) - (s2[a] - 2.0 * mu * s1[a] + n[a] * mu * mu) / (2.0 * var)
            };
            let cur = self.state.xm.atoms[a];
            let mu_new = cur.mu() + hp.prop_x_mu.sqrt() * random::std_normal(&mut self.rng);
            let mut accepted = false;
            if support.contains(mu_new) {
                if let Ok(prop) = TruncNormAtom::new(mu_new, cur.var(), support) {
                    let ln_a = ll(&prop) - ll(&cur) + ln_prior_mu(mu_new) - ln_prior_mu(cur.mu());
                    if accept(ln_a, &mut self.rng) {
                        self.state.xm.atoms[a] = prop;
                        accepted = true;
                    }
                }
            }
            self.stats.x_atoms.record(accepted);

            let cur = self.state.xm.atoms[a];
            let v = cur.var();
            let window = |c: f64| ((c - 1.0).max(0.0), c + 1.0);
            let (lo, hi) = window(v);
            let v_new = random::trunc_normal(v, hp.prop_x_sigma2, lo, hi, &mut self.rng);
            let mut accepted = false;
            if v_new > 0.0 && ln_prior_var(v_new).is_finite() {
                if let Ok(prop) = TruncNormAtom::new(cur.mu(), v_new, support) {
                    let (lo_r, hi_r) = window(v_new);
                    let ln_q = random::trunc_normal_ln_pdf(v, v_new, hp.prop_x_sigma2, lo_r, hi_r)
                        - random::trunc_normal_ln_pdf(v_new, v, hp.prop_x_sigma2, lo, hi);
                    let ln_a = ll(&prop) - ll(&cur) + ln_prior_var(v_new) - ln_prior_var(v) + ln_q;
                    if accept(ln_a, &mut self.rng) {
                        self.state.xm.atoms[a] = prop;
                        accepted = true;
                    }
                }
            }
            self.stats.x_atoms.record(accepted);
        }
    }

    /// Joint random-walk MH on (p, μ, σ₁², σ₂²) of each error atom.
    fn update_eps_atoms(&mut self) {
        let model = self.model;
        let hp = &model.hyper;
        let k = model.k_eps;
        let em = self.state.em.as_mut().expect("deconvolution mode");
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (el, zl) in self.state.eps.iter().zip(&em.z) {
            for (&v, &a) in el.iter().zip(zl) {
                members[a].push(v);
            }
        }
        let ln_prior = |atom: &CenteredPairAtom| {
            let ig = |v: f64| -(hp.a_eps + 1.0) * v.ln() - hp.b_eps / v;
            -atom.mu().powi(2) / (2.0 * hp.sigma2_eps_mu) + ig(atom.var1()) + ig(atom.var2())
        };
        for a in 0..k {
            if members[a].is_empty() && !model.mcmc.prior_only {
                em.atoms[a] = draw_eps_atom_prior(model, &mut self.rng);
                continue;
            }
            let cur = em.atoms[a];
            let p = random::trunc_normal(cur.p(), hp.prop_eps_p, 0.0, 1.0, &mut self.rng);
            let mu = cur.mu() + hp.prop_eps_mu.sqrt() * random::std_normal(&mut self.rng);
            let v1 = random::trunc_normal(cur.var1(), hp.prop_eps_sigma2, 0.0, f64::INFINITY, &mut self.rng);
            let v2 = random::trunc_normal(cur.var2(), hp.prop_eps_sigma2, 0.0, f64::INFINITY, &mut self.rng);
            let mut accepted = false;
            if let Ok(prop) = CenteredPairAtom::new(p, mu, v1, v2) {
                let ll = |atom: &CenteredPairAtom| members[a].iter().map(|&e| atom.ln_pdf(e)).sum::<f64>();
                let q = |to: f64, from: f64, var: f64, hi: f64| random::trunc_normal_ln_pdf(to, from, var, 0.0, hi);
                let ln_q = q(cur.p(), p, hp.prop_eps_p, 1.0) - q(p, cur.p(), hp.prop_eps_p, 1.0)
                    + q(cur.var1(), v1, hp.prop_eps_sigma2, f64::INFINITY)
                    - q(v1, cur.var1(), hp.prop_eps_sigma2, f64::INFINITY)
                    + q(cur.var2(), v2, hp.prop_eps_sigma2, f64::INFINITY)
                    - q(v2, cur.var2(), hp.prop_eps_sigma2, f64::INFINITY);
                let ln_a = ll(&prop) - ll(&cur) + ln_prior(&prop) - ln_prior(&cur) + ln_q;
                if accept(ln_a, &mut self.rng) {
                    em.atoms[a] = prop;
                    accepted = true;
                }
            }
            self.stats.eps_atoms.record(accepted);
        }
    }

    /// Random-walk MH on each component's spline coefficients under
    /// ∏ f_ε((w − x)/s(x))/s(x) with the allocated error atoms, then the
    /// smoothness variance.
    fn variance_block(&mut self) {
        let model = self.model;
        let ds = &model.ds;
        let j = model.basis.n_basis();
        for l in 0..model.d() {
            let st = &mut self.state;
            let em = st.em.as_ref().expect("deconvolution mode");
            let xl = &st.x[l];
            let locals: Vec<LocalBasis> = xl.iter().map(|&v| model.basis.eval_local(v)).collect();
            let log_lik = |theta: &[f64]| {
                let e: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
                let mut total = 0.0;
                for (i, b) in locals.iter().enumerate() {
                    let v = b.dot(&e);
                    if !(v > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    let s = v.sqrt();
                    let range = ds.offsets[i]..ds.offsets[i + 1];
                    total -= 0.5 * v.ln() * range.len() as f64;
                    for f in range {
                        total += em.atoms[em.z[l][f]].ln_pdf((ds.w[l][f] - xl[i]) / s);
                    }
                }
                total
            };
            let sigma2 = st.sigma2_theta[l];
            let chol = if model.hyper.prop_theta_prior_shape {
                model.smooth.prior_cov_chol(sigma2) * self.theta_scale[l].sqrt()
            } else {
                DMatrix::from_diagonal_element(j, j, (model.hyper.prop_theta * self.theta_scale[l]).sqrt())
            };
            let current = log_lik(&st.theta[l]);
            let moved = mh_update_coefficients(&mut st.theta[l], current, sigma2, &model.smooth, &chol, log_lik, &mut self.rng).is_some();
            self.stats.theta.record(moved);
            self.window_theta[l].record(moved);
            if moved {
                let theta = &st.theta[l];
                for i in 0..model.n() {
                    st.s[l][i] = model.basis.var_eval(st.x[l][i], theta).sqrt();
                    for f in ds.offsets[i]..ds.offsets[i + 1] {
                        st.eps[l][f] = (ds.w[l][f] - st.x[l][i]) / st.s[l][i];
                    }
                }
            }
            let (s2, acc) = model.smooth.sample_smoothness(&st.theta[l], sigma2, &mut self.rng);
            st.sigma2_theta[l] = s2;
            self.stats.sigma2_theta.record(acc);
        }
    }

    /// Recomputes marginal log densities, normal scores and copula terms.
    fn refresh_cache(&mut self) {
        let model = self.model;
        let (d, n) = (model.d(), model.n());
        let st = &self.state;
        let c = &mut self.cache;
        let chol_x = st.r_x.cholesky();
        c.ln_fx = vec![vec![0.0; n]; d];
        c.yx = vec![0.0; n * d];
        for l in 0..d {
            for i in 0..n {
                let (lf, cdf) = st.xm.eval(model.combo(l, i), st.x[l][i]);
                c.ln_fx[l][i] = lf;
                c.yx[i * d + l] = latent_from_cdf(cdf);
            }
        }
        c.cx = (0..n).map(|i| copula_logdensity_unchecked(&c.yx[i * d..(i + 1) * d], &chol_x)).collect();
        if let Some(em) = &st.em {
            let n_rep = model.ds.total_replicates();
            let chol_e = st.r_eps.cholesky();
            c.ln_fe = vec![vec![0.0; n_rep]; d];
            c.ye = vec![0.0; n_rep * d];
            for l in 0..d {
                for f in 0..n_rep {
                    let (lf, cdf) = em.eval(model.combo(l, model.replicate_subject[f]), st.eps[l][f]);
                    c.ln_fe[l][f] = lf;
                    c.ye[f * d + l] = latent_from_cdf(cdf);
                }
            }
            c.ce = (0..n_rep).map(|f| copula_logdensity_unchecked(&c.ye[f * d..(f + 1) * d], &chol_e)).collect();
        }
    }

    /// Componentwise MH on each latent x with truncated-normal proposals
    /// under the full conditional, copula factors included.
    fn latent_block(&mut self) {
        self.refresh_cache();
        let model = self.model;
        let ds = &model.ds;
        let support = model.support;
        let d = model.d();
        let chol_x = self.state.r_x.cholesky();
        let chol_e = self.state.r_eps.cholesky();
        let mut y = vec![0.0; d];
        let max_m = ds.max_replicates();
        let mut new_ln_fe = vec![0.0; max_m];
        let mut new_ye = vec![0.0; max_m];
        let mut new_ce = vec![0.0; max_m];
        let mut new_eps = vec![0.0; max_m];
        for i in 0..model.n() {
            let range = ds.offsets[i]..ds.offsets[i + 1];
            for l in 0..d {
                let st = &mut self.state;
                let em = st.em.as_ref().expect("deconvolution mode");
                let c = &mut self.cache;
                let tau = self.tau[l];
                let x_old = st.x[l][i];
                let x_new = random::trunc_normal(x_old, tau * tau, support.lower, support.upper, &mut self.rng);
                let g = model.combo(l, i);

                let (lf_new, cdf_new) = st.xm.eval(g, x_new);
                let yx_new = latent_from_cdf(cdf_new);
                y.copy_from_slice(&c.yx[i * d..(i + 1) * d]);
                y[l] = yx_new;
                let cx_new = copula_logdensity_unchecked(&y, &chol_x);
                let s_new = model.basis.var_eval(x_new, &st.theta[l]).sqrt();
                let mut ln_new = cx_new + lf_new;
                let mut ln_old = c.cx[i] + c.ln_fx[l][i];
                let (ln_s_old, ln_s_new) = (st.s[l][i].ln(), s_new.ln());
                for (r, f) in range.clone().enumerate() {
                    let e = (ds.w[l][f] - x_new) / s_new;
                    let (lf, cdf) = em.eval(g, e);
                    y.copy_from_slice(&c.ye[f * d..(f + 1) * d]);
                    y[l] = latent_from_cdf(cdf);
                    let ce = copula_logdensity_unchecked(&y, &chol_e);
                    new_eps[r] = e;
                    new_ln_fe[r] = lf;
                    new_ye[r] = y[l];
                    new_ce[r] = ce;
                    ln_new += ce + lf - ln_s_new;
                    ln_old += c.ce[f] + c.ln_fe[l][f] - ln_s_old;
                }
                // ln q(old | new) − ln q(new | old): only the truncation masses differ
                let mass = |center: f64| normal::interval_mass((support.lower - center) / tau, (support.upper - center) / tau).ln();
                let ln_a = ln_new - ln_old + mass(x_old) - mass(x_new);
                let ok = ln_new.is_finite() && accept(ln_a, &mut self.rng);
                self.stats.latent_x.record(ok);
                self.window_latent[l].record(ok);
                if ok {
                    st.x[l][i] = x_new;
                    st.s[l][i] = s_new;
                    c.ln_fx[l][i] = lf_new;
                    c.yx[i * d + l] = yx_new;
                    c.cx[i] = cx_new;
                    for (r, f) in range.clone().enumerate() {
                        st.eps[l][f] = new_eps[r];
                        c.ln_fe[l][f] = new_ln_fe[r];
                        c.ye[f * d + l] = new_ye[r];
                        c.ce[f] = new_ce[r];
                    }
                }
            }
        }
    }

    /// Grid MH on the spherical coordinates of R_x, then R_ε, from the
    /// normal scores of the current cache.
    fn copula_block(&mut self) {
        let d = self.model.d();
        if d < 2 {
            return;
        }
        let mut stats = PanelStats::new(d);
        for y in self.cache.yx.chunks(d) {
            stats.add(y);
        }
        let tries = (self.state.r_x.b.len() + self.state.r_x.theta.len()) as u64;
        let acc = update_correlation(&mut self.state.r_x, &stats, &mut self.rng) as u64;
        self.stats.copula.accepted += acc;
        self.stats.copula.proposed += tries;
        if self.state.em.is_some() {
            let mut stats = PanelStats::new(d);
            for y in self.cache.ye.chunks(d) {
                stats.add(y);
            }
            let acc = update_correlation(&mut self.state.r_eps, &stats, &mut self.rng) as u64;
            self.stats.copula.accepted += acc;
            self.stats.copula.proposed += tries;
        }
    }

    /// Scales latent-x proposals toward 30–40% acceptance and ϑ proposals
    /// toward 20–30%, from the acceptance since the previous call.
    pub fn adapt(&mut self) {
        for l in 0..self.model.d() {
            let w = &mut self.window_latent[l];
            if w.proposed > 0 {
                let r = w.rate();
                if r < 0.30 {
                    self.tau[l] *= 0.8;
                } else if r > 0.40 {
                    self.tau[l] *= 1.25;
                }
                self.tau[l] = self.tau[l].clamp(1e-4, self.model.support.width());
            }
            *w = Rate::default();
            let w = &mut self.window_theta[l];
            if w.proposed > 0 {
                let r = w.rate();
                if r < 0.20 {
                    self.theta_scale[l] *= 0.7;
                } else if r > 0.30 {
                    self.theta_scale[l] *= 1.4;
                }
                self.theta_scale[l] = self.theta_scale[l].clamp(1e-6, 1e4);
            }
            *w = Rate::default();
        }
    }

    /// Checks the state invariants; an error names the offending block.
    pub fn audit(&self) -> Result<()> {
        let model = self.model;
        let st = &self.state;
        let bad = |block: &str, detail: String| Err(Error::InvariantViolation { block: block.into(), detail });
        st.xm.tensor.check()?;
        for (l, xl) in st.x.iter().enumerate() {
            if let Some((i, v)) = xl.iter().enumerate().find(|(_, v)| !model.support.contains(**v)) {
                return bad("latent x", format!("x[{l}][{i}] = {v} outside the support"));
            }
        }
        if st.xm.atoms.iter().any(|a| !(a.mu().is_finite() && a.var() > 0.0)) {
            return bad("x atoms", "non-finite atom".into());
        }
        if let Some(em) = &st.em {
            em.tensor.check()?;
            let ds = &model.ds;
            for l in 0..model.d() {
                for i in 0..model.n() {
                    let s = model.basis.var_eval(st.x[l][i], &st.theta[l]).sqrt();
                    if (s - st.s[l][i]).abs() > 1e-12 * s.max(1.0) {
                        return bad("variance function", format!("stored s[{l}][{i}] = {} but recomputed {s}", st.s[l][i]));
                    }
                    for f in ds.offsets[i]..ds.offsets[i + 1] {
                        let e = (ds.w[l][f] - st.x[l][i]) / s;
                        if (e - st.eps[l][f]).abs() > 1e-12 * e.abs().max(1.0) {
                            return bad("latent x", format!("stored eps[{l}][{f}] = {} but recomputed {e}", st.eps[l][f]));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Mixture weights of the x marginal for component `l`, averaged over a
    /// group; λ₀ for an empty group.
    pub fn group_weights<K: Kernel>(&self, mix: &Mixture<K>, l: usize, fractions: &[f64]) -> Vec<f64> {
        let nt = self.model.subject_tuples.len();
        if fractions.iter().all(|f| *f == 0.0) {
            return mix.tensor.lambda0().to_vec();
        }
        let mut w = vec![0.0; mix.atoms.len()];
        for (t, &frac) in fractions.iter().enumerate() {
            if frac > 0.0 {
                for (o, v) in w.iter_mut().zip(&mix.weights[l * nt + t]) {
                    *o += frac * v;
                }
            }
        }
        w
    }
}

#[inline]
fn accept(ln_a: f64, rng: &mut ChainRng) -> bool {
    ln_a >= 0.0 || (ln_a > f64::NEG_INFINITY && random::open_unit(rng).ln() < ln_a)
}

fn draw_x_atom_prior(model: &Model, rng: &mut ChainRng) -> Result<TruncNormAtom> {
    let hp = &model.hyper;
    let s = model.support;
    let mu = random::trunc_normal(hp.mu_x0(), hp.sigma2_x0(), s.lower, s.upper, rng);
    let var = random::inv_gamma_truncated(hp.a_x_sigma2, hp.b_x_sigma2, hp.lower_x_sigma2, hp.upper_x_sigma2, rng);
    TruncNormAtom::new(mu, var, s)
}

fn draw_eps_atom_prior(model: &Model, rng: &mut ChainRng) -> CenteredPairAtom {
    let hp = &model.hyper;
    loop {
        let p = rng.random::<f64>();
        let mu = hp.sigma2_eps_mu.sqrt() * random::std_normal(rng);
        let v1 = random::inv_gamma(hp.a_eps, hp.b_eps, rng);
        let v2 = random::inv_gamma(hp.a_eps, hp.b_eps, rng);
        if let Ok(a) = CenteredPairAtom::new(p, mu, v1, v2) {
            return a;
        }
    }
}

/// Lloyd's algorithm in one dimension with k-means++ seeding. Uses at most
/// as many clusters as there are distinct values.
pub(crate) fn kmeans<R: Rng + ?Sized>(values: &[f64], k: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = k.min(distinct.len());
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut centers = vec![values[rng.random_range(0..values.len())]];
    let mut d2 = vec![0.0; values.len()];
    while centers.len() < k {
        for (slot, v) in d2.iter_mut().zip(values) {
            *slot = centers.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min);
        }
        match random::categorical(&d2, rng) {
            Some(j) => centers.push(values[j]),
            None => break,
        }
    }
    let nearest = |v: f64, centers: &[f64]| {
        let mut best = 0;
        for (c, &m) in centers.iter().enumerate() {
            if (v - m).abs() < (v - centers[best]).abs() {
                best = c;
            }
        }
        best
    };
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(v, &centers)).collect();
    for _ in 0..100 {
        let mut sum = vec![0.0; centers.len()];
        let mut cnt = vec![0usize; centers.len()];
        for (&v, &a) in values.iter().zip(&assign) {
            sum[a] += v;
            cnt[a] += 1;
        }
        for c in 0..centers.len() {
            if cnt[c] > 0 {
                centers[c] = sum[c] / cnt[c] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    (centers, assign)
}
