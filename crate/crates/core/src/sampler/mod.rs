//! Metropolis-within-Gibbs sampler. Blocks per sweep, in order:
//! x mixture (allocations, λ₀, cluster maps, λ, atoms), the same for the
//! scaled errors, variance-function coefficients, latent x, and finally the
//! two copula correlation matrices. The marginal blocks use the likelihood
//! without copula factors; latent x and the copulas use the full one.

mod archive;
mod chain;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Hyperparameters, McmcConfig, Mode};
use crate::data::{preprocess_scale, ReplicateDataset};
use crate::error::{Error, Result};
use crate::kernels::Support;
use crate::spline::{SmoothnessPrior, SplineBasis};

pub use archive::{Archive, MarginalEstimate, TraceRow};
pub use chain::{BlockStats, Chain, ChainState, Mixture, Rate};

/// Subjects pooled for a reported density: every subject, or those at one
/// level of one covariate. Mixture weights are averaged over members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    /// Share of members in each distinct covariate tuple.
    pub fractions: Vec<f64>,
    pub size: usize,
}

/// Fixed inputs shared by every chain.
#[derive(Clone, Debug)]
pub struct Model {
    pub ds: ReplicateDataset,
    pub hyper: Hyperparameters,
    pub mcmc: McmcConfig,
    pub support: Support,
    pub basis: SplineBasis,
    pub smooth: SmoothnessPrior,
    /// Distinct covariate tuples in sorted order, and each subject's index into it.
    pub subject_tuples: Vec<Vec<usize>>,
    pub subject_combo: Vec<usize>,
    /// Subject owning each flat replicate index.
    pub replicate_subject: Vec<usize>,
    pub k_x: usize,
    pub k_eps: usize,
    pub groups: Vec<Group>,
    /// Observed truths in density-regression mode, `[ℓ][i]`.
    pub x_obs: Option<Vec<Vec<f64>>>,
}

impl Model {
    /// Validates the configuration and prepares the data: rescaled in
    /// deconvolution mode when `mcmc.scale` is set, emptied when
    /// `mcmc.prior_only` is set.
    pub fn new(ds: &ReplicateDataset, hyper: &Hyperparameters, mcmc: &McmcConfig) -> Result<Model> {
        hyper.validate()?;
        mcmc.validate()?;
        if ds.d == 0 {
            return Err(Error::IncompatibleData("dataset has no components".into()));
        }
        let support = hyper.support();
        let mut ds = if mcmc.prior_only { ds.subset(&[]) } else { ds.clone() };
        let x_obs = match mcmc.mode {
            Mode::DensityRegression => {
                let x = ds.single_observations()?;
                for (l, xl) in x.iter().enumerate() {
                    if let Some(v) = xl.iter().find(|v| !support.contains(**v)) {
                        return Err(Error::IncompatibleData(format!(
                            "component {} has value {v} outside the support [{}, {}]",
                            ds.component_names[l], support.lower, support.upper
                        )));
                    }
                }
                Some(x)
            }
            Mode::Deconvolution => {
                if mcmc.scale && ds.n() > 0 {
                    ds = preprocess_scale(&ds)?;
                }
                None
            }
        };
        let basis = SplineBasis::new(support, hyper.n_basis, hyper.spline_degree)?;
        let smooth = SmoothnessPrior::new(hyper.n_basis, hyper.theta_prior_var, hyper.a_theta, hyper.b_theta);

        let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for i in 0..ds.n() {
            index.insert(ds.covariate_tuple(i), 0);
        }
        for (k, v) in index.values_mut().enumerate() {
            *v = k;
        }
        let subject_combo: Vec<usize> = (0..ds.n()).map(|i| index[&ds.covariate_tuple(i)]).collect();
        let subject_tuples: Vec<Vec<usize>> = index.into_keys().collect();
        let replicate_subject = (0..ds.n()).flat_map(|i| std::iter::repeat_n(i, ds.m(i))).collect();

        let n_tuples = subject_tuples.len();
        let group_of = |name: String, members: &mut dyn Iterator<Item = usize>| {
            let mut fractions = vec![0.0; n_tuples];
            let mut size = 0;
            for i in members {
                fractions[subject_combo[i]] += 1.0;
                size += 1;
            }
            if size > 0 {
                fractions.iter_mut().for_each(|f| *f /= size as f64);
            }
            Group { name, fractions, size }
        };
        let mut groups = vec![group_of("all".into(), &mut (0..ds.n()))];
        for h in 0..ds.p() {
            for lv in 0..ds.levels[h] {
                let name = format!("{}={}", ds.covariate_names[h], ds.level_labels[h][lv]);
                let g = group_of(name, &mut (0..ds.n()).filter(|&i| ds.covariates[h][i] == lv));
                if g.size > 0 {
                    groups.push(g);
                }
            }
        }

        Ok(Model {
            k_x: hyper.k_x(ds.d),
            k_eps: hyper.k_eps(ds.d),
            hyper: hyper.clone(),
            mcmc: mcmc.clone(),
            support,
            basis,
            smooth,
            subject_tuples,
            subject_combo,
            replicate_subject,
            groups,
            x_obs,
            ds,
        })
    }

    pub fn d(&self) -> usize {
        self.ds.d
    }

    pub fn n(&self) -> usize {
        self.ds.n()
    }

    pub fn deconvolution(&self) -> bool {
        self.mcmc.mode == Mode::Deconvolution
    }

    /// Tensor level counts: the component label first, then the covariates.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.d()).chain(self.ds.levels.iter().copied()).collect()
    }

    /// Index of the (component, covariate tuple) combination of subject `i`.
    #[inline]
    pub fn combo(&self, l: usize, i: usize) -> usize {
        l * self.subject_tuples.len() + self.subject_combo[i]
    }

    /// Full tensor tuples of every combination, in [`Self::combo`] order.
    pub fn combo_tuples(&self) -> Vec<Vec<usize>> {
        (0..self.d())
            .flat_map(|l| self.subject_tuples.iter().map(move |t| std::iter::once(l).chain(t.iter().copied()).collect()))
            .collect()
    }
}

/// Names and units needed to report a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub component_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub scale: Vec<f64>,
    pub mode: Mode,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub n_chains: usize,
    pub retained: usize,
    pub runtime_seconds: f64,
    pub hyper: Hyperparameters,
    pub mcmc: McmcConfig,
    pub acceptance: Vec<BlockStats>,
}

/// Result of [`fit`]: the merged archive of all chains.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub layout: Layout,
    pub archive: Archive,
    pub meta: FitMeta,
}

/// Runs `mcmc.n_chains` chains (in parallel on the current rayon pool) and
/// merges their archives in chain order.
pub fn fit(ds: &ReplicateDataset, hyper: &Hyperparameters, mcmc: &McmcConfig) -> Result<Posterior> {
    let start = Instant::now();
    let model = Model::new(ds, hyper, mcmc)?;
    let runs: Vec<Result<(Archive, BlockStats)>> = (0..mcmc.n_chains).into_par_iter().map(|c| run_chain(&model, c)).collect();
    let mut merged: Option<Archive> = None;
    let mut acceptance = Vec::new();
    for run in runs {
        let (archive, stats) = run?;
        acceptance.push(stats);
        match merged.as_mut() {
            None => merged = Some(archive),
            Some(m) => m.merge(archive),
        }
    }
    let archive = merged.expect("at least one chain");
    Ok(Posterior {
        layout: Layout {
            component_names: model.ds.component_names.clone(),
            covariate_names: model.ds.covariate_names.clone(),
            scale: model.ds.scale.clone(),
            mode: mcmc.mode,
            n: model.n(),
        },
        meta: FitMeta {
            seed: mcmc.seed,
            n_chains: mcmc.n_chains,
            retained: archive.n_retained,
            runtime_seconds: start.elapsed().as_secs_f64(),
            hyper: hyper.clone(),
            mcmc: mcmc.clone(),
            acceptance,
        },
        archive,
    })
}

/// Initialization, warm-up and the main loop of one chain.
pub fn run_chain(model: &Model, chain_id: usize) -> Result<(Archive, BlockStats)> {
    let cfg = &model.mcmc;
    let mut chain = Chain::new(model, chain_id as u64)?;
    chain.warm_up();
    let mut archive = Archive::new(model, chain_id);
    for t in 0..cfg.n_iter {
        chain.sweep()?;
        if cfg.adapt && t < cfg.burn_in && (t + 1) % chain::ADAPT_INTERVAL == 0 {
            chain.adapt();
        }
        if (t + 1) % 100 == 0 {
            log::info!("chain {chain_id} sweep {}: {}", t + 1, chain.stats.summary());
        }
        if t >= cfg.burn_in && (t + 1 - cfg.burn_in) % cfg.thin == 0 {
            archive.retain(&chain, t + 1);
            if archive.n_retained % 50 == 0 {
                chain.audit()?;
            }
        }
    }
    Ok((archive, chain.stats.clone()))
}
