//! Hyperparameters and run configuration, readable from JSON with every field
//! optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Support;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Atom counts; `None` means max(5d, 20).
    pub k_x: Option<usize>,
    pub k_eps: Option<usize>,
    pub alpha_x: f64,
    pub alpha_eps: f64,
    pub alpha0_x: f64,
    pub alpha0_eps: f64,
    pub phi_x: f64,
    pub phi_eps: f64,
    /// TN(μ₀, σ₀², [A, B]) prior on x-atom locations; `None` gives the
    /// midpoint of the support and ((B − A)/4)².
    pub mu_x0: Option<f64>,
    pub sigma2_x0: Option<f64>,
    pub a_x_sigma2: f64,
    pub b_x_sigma2: f64,
    pub lower_x_sigma2: f64,
    pub upper_x_sigma2: f64,
    pub sigma2_eps_mu: f64,
    pub a_eps: f64,
    pub b_eps: f64,
    pub n_basis: usize,
    pub spline_degree: usize,
    pub a_theta: f64,
    pub b_theta: f64,
    pub sigma2_theta0: f64,
    /// Diagonal of the proper part Σ₀ of the spline prior covariance.
    pub theta_prior_var: f64,
    pub support_lower: f64,
    pub support_upper: f64,
    pub grid_size: usize,
    pub prop_x_mu: f64,
    pub prop_x_sigma2: f64,
    pub prop_eps_p: f64,
    pub prop_eps_mu: f64,
    pub prop_eps_sigma2: f64,
    pub prop_theta: f64,
    /// Random-walk covariance proportional to the current prior covariance of
    /// ϑ instead of `prop_theta`·I.
    pub prop_theta_prior_shape: bool,
    pub prop_x_latent: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            k_x: None,
            k_eps: None,
            alpha_x: 1.0,
            alpha_eps: 1.0,
            alpha0_x: 1.0,
            alpha0_eps: 1.0,
            phi_x: 1.0,
            phi_eps: 1.0,
            mu_x0: None,
            sigma2_x0: None,
            a_x_sigma2: 2.1,
            b_x_sigma2: 1.0,
            lower_x_sigma2: 0.01,
            upper_x_sigma2: 25.0,
            sigma2_eps_mu: 1.0,
            a_eps: 1.0,
            b_eps: 1.0,
            n_basis: 12,
            spline_degree: 2,
            a_theta: 10.0,
            b_theta: 1.0,
            sigma2_theta0: 0.1,
            theta_prior_var: 100.0,
            support_lower: 0.0,
            support_upper: 10.0,
            grid_size: 41,
            prop_x_mu: 0.04,
            prop_x_sigma2: 0.04,
            prop_eps_p: 0.01,
            prop_eps_mu: 0.04,
            prop_eps_sigma2: 0.04,
            prop_theta: 0.01,
            prop_theta_prior_shape: false,
            prop_x_latent: 0.25,
        }
    }
}

impl Hyperparameters {
    pub fn support(&self) -> Support {
        Support { lower: self.support_lower, upper: self.support_upper }
    }

    pub fn k_x(&self, d: usize) -> usize {
        self.k_x.unwrap_or((5 * d).max(20))
    }

    pub fn k_eps(&self, d: usize) -> usize {
        self.k_eps.unwrap_or((5 * d).max(20))
    }

    pub fn mu_x0(&self) -> f64 {
        self.mu_x0.unwrap_or(0.5 * (self.support_lower + self.support_upper))
    }

    pub fn sigma2_x0(&self) -> f64 {
        self.sigma2_x0.unwrap_or(((self.support_upper - self.support_lower) / 4.0).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.support_lower < self.support_upper) {
            return bad(format!("support [{}, {}] is empty", self.support_lower, self.support_upper));
        }
        for (name, k) in [("k_x", self.k_x), ("k_eps", self.k_eps)] {
            if matches!(k, Some(k) if k < 2) {
                return bad(format!("{name} must be at least 2"));
            }
        }
        if self.grid_size < 3 || self.grid_size % 2 == 0 {
            return bad(format!("grid_size must be odd and at least 3, got {}", self.grid_size));
        }
        if self.n_basis < self.spline_degree + 2 || self.n_basis < 3 {
            return bad(format!("n_basis {} too small for degree {}", self.n_basis, self.spline_degree));
        }
        let positive = [
            ("alpha_x", self.alpha_x),
            ("alpha_eps", self.alpha_eps),
            ("alpha0_x", self.alpha0_x),
            ("alpha0_eps", self.alpha0_eps),
            ("sigma2_x0", self.sigma2_x0()),
            ("a_x_sigma2", self.a_x_sigma2),
            ("b_x_sigma2", self.b_x_sigma2),
            ("lower_x_sigma2", self.lower_x_sigma2),
            ("sigma2_eps_mu", self.sigma2_eps_mu),
            ("a_eps", self.a_eps),
            ("b_eps", self.b_eps),
            ("a_theta", self.a_theta),
            ("b_theta", self.b_theta),
            ("sigma2_theta0", self.sigma2_theta0),
            ("theta_prior_var", self.theta_prior_var),
            ("prop_x_mu", self.prop_x_mu),
            ("prop_x_sigma2", self.prop_x_sigma2),
            ("prop_eps_p", self.prop_eps_p),
            ("prop_eps_mu", self.prop_eps_mu),
            ("prop_eps_sigma2", self.prop_eps_sigma2),
            ("prop_theta", self.prop_theta),
            ("prop_x_latent", self.prop_x_latent),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.phi_x >= 0.0 && self.phi_eps >= 0.0) {
            return bad("phi_x and phi_eps must be nonnegative".into());
        }
        if !(self.upper_x_sigma2 > self.lower_x_sigma2) {
            return bad("upper_x_sigma2 must exceed lower_x_sigma2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Replicated error-prone surrogates; latent truths are sampled.
    Deconvolution,
    /// Error-free observations; only the x mixtures and R_x are fitted.
    DensityRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub mode: Mode,
    pub n_chains: usize,
    /// Warm-up passes over the marginal blocks before the main loop.
    pub warmup: usize,
    /// Tune proposal scales before burn-in ends.
    pub adapt: bool,
    /// Number of points of the marginal density grid.
    pub density_grid: usize,
    /// Side of the pairwise joint density grid; 0 disables joint output.
    pub joint_grid: usize,
    /// Rescale surrogates so the largest becomes 20 before fitting
    /// (deconvolution mode only).
    pub scale: bool,
    /// Ignore the observations and sample from the prior.
    pub prior_only: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 5000,
            burn_in: 3000,
            thin: 5,
            seed: 0,
            mode: Mode::Deconvolution,
            n_chains: 1,
            warmup: 100,
            adapt: true,
            density_grid: 201,
            joint_grid: 101,
            scale: true,
            prior_only: false,
        }
    }
}

impl McmcConfig {
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::InvalidConfig(format!("burn_in {} must be below n_iter {}", self.burn_in, self.n_iter)));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidConfig("n_chains must be at least 1".into()));
        }
        if self.density_grid < 2 {
            return Err(Error::InvalidConfig("density_grid needs at least 2 points".into()));
        }
        if self.retained() == 0 {
            return Err(Error::InvalidConfig("no samples would be retained".into()));
        }
        Ok(())
    }
}

/// Contents of a JSON configuration file: both sections optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hyper: Hyperparameters,
    pub mcmc: McmcConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.hyper.validate()?;
        cfg.mcmc.validate()?;
        Ok(cfg)
    }
}
