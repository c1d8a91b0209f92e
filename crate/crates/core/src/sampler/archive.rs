use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Chain, Group, Model, Posterior};
use crate::config::Mode;
use crate::copula::latent_from_cdf;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::tensor::inclusion_probability;

/// Range of the scaled-error density grid.
const EPS_RANGE: (f64, f64) = (-6.0, 6.0);

/// Scalar summaries of one retained draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub iteration: usize,
    pub k_x: Vec<usize>,
    pub k_eps: Vec<usize>,
    pub sigma2_theta: Vec<f64>,
    /// Upper-triangle entries of R_x and R_ε, row by row.
    pub r_x: Vec<f64>,
    pub r_eps: Vec<f64>,
}

/// Posterior summary of one marginal density on the grid, in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub component: String,
    pub group: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
}

/// Retained draws of the density grids plus running sums, all in the
/// internal (possibly rescaled) units.
#[derive(Clone, Debug)]
pub struct Archive {
    pub x_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub joint_grid: Vec<f64>,
    pub groups: Vec<Group>,
    /// `x_draws[ℓ][g]`: retained densities, one grid after another.
    pub x_draws: Vec<Vec<Vec<f64>>>,
    pub eps_draws: Vec<Vec<Vec<f64>>>,
    pub joint_pairs: Vec<(usize, usize)>,
    pub joint_sum: Vec<Vec<f64>>,
    pub varfun_sum: Vec<Vec<f64>>,
    pub r_x_sum: Vec<Vec<f64>>,
    pub r_eps_sum: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
    pub n_retained: usize,
    chain_id: usize,
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn upper(r: &[Vec<f64>]) -> Vec<f64> {
    let d = r.len();
    (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).map(|(a, b)| r[a][b]).collect()
}

impl Archive {
    pub fn new(model: &Model, chain_id: usize) -> Archive {
        let d = model.d();
        let s = model.support;
        let joint_n = model.mcmc.joint_grid;
        let joint_pairs: Vec<(usize, usize)> =
            if joint_n >= 2 { (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect() } else { Vec::new() };
        let deconv = model.deconvolution();
        let ng = model.groups.len();
        Archive {
            x_grid: grid(s.lower, s.upper, model.mcmc.density_grid),
            eps_grid: if deconv { grid(EPS_RANGE.0, EPS_RANGE.1, model.mcmc.density_grid) } else { Vec::new() },
            joint_grid: if joint_n >= 2 { grid(s.lower, s.upper, joint_n) } else { Vec::new() },
            groups: model.groups.clone(),
            x_draws: vec![vec![Vec::new(); ng]; d],
            eps_draws: if deconv { vec![vec![Vec::new(); ng]; d] } else { Vec::new() },
            joint_sum: vec![vec![0.0; joint_n * joint_n]; joint_pairs.len()],
            joint_pairs,
            varfun_sum: if deconv { vec![vec![0.0; model.mcmc.density_grid]; d] } else { Vec::new() },
            r_x_sum: vec![vec![0.0; d]; d],
            r_eps_sum: if deconv { vec![vec![0.0; d]; d] } else { Vec::new() },
            trace: Vec::new(),
            n_retained: 0,
            chain_id,
        }
    }

    /// Records the chain's current state as a retained draw.
    pub fn retain(&mut self, chain: &Chain<'_>, iteration: usize) {
        let st = &chain.state;
        let d = chain.model.d();
        let x_pdf: Vec<Vec<f64>> = st.xm.atoms.iter().map(|a| self.x_grid.iter().map(|&x| a.pdf(x)).collect()).collect();
        for l in 0..d {
            for (g, group) in self.groups.iter().enumerate() {
                let w = chain.group_weights(&st.xm, l, &group.fractions);
                push_density(&mut self.x_draws[l][g], &w, &x_pdf, self.x_grid.len());
            }
        }
        if let Some(em) = &st.em {
            let e_pdf: Vec<Vec<f64>> = em.atoms.iter().map(|a| self.eps_grid.iter().map(|&e| a.pdf(e)).collect()).collect();
            for l in 0..d {
                for (g, group) in self.groups.iter().enumerate() {
                    let w = chain.group_weights(em, l, &group.fractions);
                    push_density(&mut self.eps_draws[l][g], &w, &e_pdf, self.eps_grid.len());
                }
                for (acc, &x) in self.varfun_sum[l].iter_mut().zip(&self.x_grid) {
                    *acc += chain.model.basis.var_eval(x, &st.theta[l]);
                }
            }
        }

        let r_x = st.r_x.correlation();
        if !self.joint_pairs.is_empty() {
            let all = &self.groups[0].fractions;
            // marginal density and normal score of each component on the joint grid
            let margins: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
                .map(|l| {
                    let w = chain.group_weights(&st.xm, l, all);
                    self.joint_grid
                        .iter()
                        .map(|&x| {
                            let (pdf, cdf) = st.xm.atoms.iter().zip(&w).fold((0.0, 0.0), |(p, c), (a, &wk)| (p + wk * a.pdf(x), c + wk * a.cdf(x)));
                            (pdf, latent_from_cdf(cdf.min(1.0)))
                        })
                        .unzip()
                })
                .collect();
            let n = self.joint_grid.len();
            for (pair, &(a, b)) in self.joint_pairs.iter().enumerate() {
                let r = r_x[a][b];
                let one_m = 1.0 - r * r;
                let norm = one_m.sqrt().recip();
                for u in 0..n {
                    let (fa, ya) = (margins[a].0[u], margins[a].1[u]);
                    for v in 0..n {
                        let (fb, yb) = (margins[b].0[v], margins[b].1[v]);
                        let c = norm * (-(r * r * (ya * ya + yb * yb) - 2.0 * r * ya * yb) / (2.0 * one_m)).exp();
                        self.joint_sum[pair][u * n + v] += c * fa * fb;
                    }
                }
            }
        }

        add_matrix(&mut self.r_x_sum, &r_x);
        let r_eps = if st.em.is_some() {
            let r = st.r_eps.correlation();
            add_matrix(&mut self.r_eps_sum, &r);
            upper(&r)
        } else {
            Vec::new()
        };
        self.trace.push(TraceRow {
            chain: self.chain_id,
            iteration,
            k_x: st.xm.tensor.cluster_counts(),
            k_eps: st.em.as_ref().map_or_else(Vec::new, |em| em.tensor.cluster_counts()),
            sigma2_theta: st.sigma2_theta.clone(),
            r_x: upper(&r_x),
            r_eps,
        });
        self.n_retained += 1;
    }

    /// Appends another chain's draws.
    pub fn merge(&mut self, other: Archive) {
        for (mine, theirs) in self.x_draws.iter_mut().flatten().zip(other.x_draws.into_iter().flatten()) {
            mine.extend(theirs);
        }
        for (mine, theirs) in self.eps_draws.iter_mut().flatten().zip(other.eps_draws.into_iter().flatten()) {
            mine.extend(theirs);
        }
        for (mine, theirs) in self.joint_sum.iter_mut().zip(&other.joint_sum) {
            add_slice(mine, theirs);
        }
        for (mine, theirs) in self.varfun_sum.iter_mut().zip(&other.varfun_sum) {
            add_slice(mine, theirs);
        }
        add_matrix(&mut self.r_x_sum, &other.r_x_sum);
        add_matrix(&mut self.r_eps_sum, &other.r_eps_sum);
        self.trace.extend(other.trace);
        self.n_retained += other.n_retained;
    }

    fn summarize(&self, draws: &[f64], n_grid: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ns = self.n_retained;
        let mut mean = vec![0.0; n_grid];
        let mut q05 = vec![0.0; n_grid];
        let mut q95 = vec![0.0; n_grid];
        let mut col = vec![0.0; ns];
        for k in 0..n_grid {
            for (s, slot) in col.iter_mut().enumerate() {
                *slot = draws[s * n_grid + k];
            }
            mean[k] = col.iter().sum::<f64>() / ns as f64;
            col.sort_by(f64::total_cmp);
            q05[k] = quantile_sorted(&col, 0.05);
            q95[k] = quantile_sorted(&col, 0.95);
        }
        (mean, q05, q95)
    }

    /// Posterior mean density of component `l` for group `g`, internal units.
    pub fn mean_density(&self, l: usize, g: usize) -> Vec<f64> {
        let n = self.x_grid.len();
        let mut mean = vec![0.0; n];
        for draw in self.x_draws[l][g].chunks(n) {
            add_slice(&mut mean, draw);
        }
        mean.iter_mut().for_each(|m| *m /= self.n_retained as f64);
        mean
    }

    pub fn mean_correlation(&self, which_eps: bool) -> Vec<Vec<f64>> {
        let sum = if which_eps { &self.r_eps_sum } else { &self.r_x_sum };
        sum.iter().map(|row| row.iter().map(|v| v / self.n_retained as f64).collect()).collect()
    }
}

fn push_density(out: &mut Vec<f64>, w: &[f64], pdf: &[Vec<f64>], n: usize) {
    let start = out.len();
    out.resize(start + n, 0.0);
    let slot = &mut out[start..];
    for (wk, row) in w.iter().zip(pdf) {
        if *wk > 0.0 {
            for (o, p) in slot.iter_mut().zip(row) {
                *o += wk * p;
            }
        }
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn add_matrix(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        add_slice(ra, rb);
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl Posterior {
    /// Marginal x densities in original units, by component then group.
    pub fn marginals(&self) -> Vec<MarginalEstimate> {
        let a = &self.archive;
        let n = a.x_grid.len();
        let mut out = Vec::new();
        for (l, name) in self.layout.component_names.iter().enumerate() {
            let sc = self.layout.scale[l];
            for (g, group) in a.groups.iter().enumerate() {
                let (mean, q05, q95) = a.summarize(&a.x_draws[l][g], n);
                let back = |v: Vec<f64>| v.into_iter().map(|d| d / sc).collect();
                out.push(MarginalEstimate {
                    component: name.clone(),
                    group: group.name.clone(),
                    x: a.x_grid.iter().map(|x| x * sc).collect(),
                    mean: back(mean),
                    q05: back(q05),
                    q95: back(q95),
                });
            }
        }
        out
    }

    /// Inclusion summaries per covariate (component label first) for the x
    /// and error mixtures.
    pub fn inclusion(&self) -> serde_json::Value {
        let names: Vec<String> = std::iter::once("component".to_string()).chain(self.layout.covariate_names.iter().cloned()).collect();
        let block = |get: &dyn Fn(&TraceRow) -> &Vec<usize>| {
            names
                .iter()
                .enumerate()
                .map(|(h, name)| {
                    let ks: Vec<usize> = self.archive.trace.iter().map(|t| get(t)[h]).collect();
                    let (prob, selected) = inclusion_probability(&ks);
                    let max = ks.iter().copied().max().unwrap_or(1);
                    let dist: Vec<f64> = (1..=max).map(|k| ks.iter().filter(|&&v| v == k).count() as f64 / ks.len() as f64).collect();
                    json!({"covariate": name, "probability": prob, "selected": selected, "k_distribution": dist})
                })
                .collect::<Vec<_>>()
        };
        let mut out = json!({"x": block(&|t: &TraceRow| &t.k_x)});
        if self.layout.mode == Mode::Deconvolution {
            out["eps"] = json!(block(&|t: &TraceRow| &t.k_eps));
        }
        out
    }

    /// Writes every output file into `dir`, which must exist.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let a = &self.archive;
        let names = &self.layout.component_names;
        let scale = &self.layout.scale;

        let path = dir.join("densities_marginal.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["component", "combo", "x", "mean", "q05", "q95"]).map_err(|e| Error::csv(&path, e))?;
        for m in self.marginals() {
            for k in 0..m.x.len() {
                w.write_record([
                    m.component.clone(),
                    m.group.clone(),
                    fmt(m.x[k]),
                    fmt(m.mean[k]),
                    fmt(m.q05[k]),
                    fmt(m.q95[k]),
                ])
                .map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(io_err(&path))?;

        if !a.eps_grid.is_empty() {
            let path = dir.join("densities_error.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            w.write_record(["component", "combo", "eps", "mean", "q05", "q95"]).map_err(|e| Error::csv(&path, e))?;
            let n = a.eps_grid.len();
            for (l, name) in names.iter().enumerate() {
                for (g, group) in a.groups.iter().enumerate() {
                    let (mean, q05, q95) = a.summarize(&a.eps_draws[l][g], n);
                    for k in 0..n {
                        w.write_record([name.clone(), group.name.clone(), fmt(a.eps_grid[k]), fmt(mean[k]), fmt(q05[k]), fmt(q95[k])])
                            .map_err(|e| Error::csv(&path, e))?;
                    }
                }
            }
            w.flush().map_err(io_err(&path))?;
        }

        let n = a.joint_grid.len();
        for (pair, &(l1, l2)) in a.joint_pairs.iter().enumerate() {
            let path = dir.join(format!("densities_joint_{}_{}_all.csv", l1 + 1, l2 + 1));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            w.write_record(["x1", "x2", "density"]).map_err(|e| Error::csv(&path, e))?;
            let jac = scale[l1] * scale[l2];
            for u in 0..n {
                for v in 0..n {
                    let dens = a.joint_sum[pair][u * n + v] / a.n_retained as f64 / jac;
                    w.write_record([fmt(a.joint_grid[u] * scale[l1]), fmt(a.joint_grid[v] * scale[l2]), fmt(dens)])
                        .map_err(|e| Error::csv(&path, e))?;
                }
            }
            w.flush().map_err(io_err(&path))?;
        }

        write_json(&dir.join("inclusion.json"), &self.inclusion())?;
        let mut corr = json!({"r_x": a.mean_correlation(false)});
        if !a.r_eps_sum.is_empty() {
            corr["r_eps"] = json!(a.mean_correlation(true));
        }
        write_json(&dir.join("correlations.json"), &corr)?;

        if !a.varfun_sum.is_empty() {
            let path = dir.join("varfun.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            w.write_record(["component", "x", "v"]).map_err(|e| Error::csv(&path, e))?;
            for (l, name) in names.iter().enumerate() {
                for (k, &x) in a.x_grid.iter().enumerate() {
                    let v = a.varfun_sum[l][k] / a.n_retained as f64 * scale[l] * scale[l];
                    w.write_record([name.clone(), fmt(x * scale[l]), fmt(v)]).map_err(|e| Error::csv(&path, e))?;
                }
            }
            w.flush().map_err(io_err(&path))?;
        }

        let path = dir.join("trace_k.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let cov: Vec<String> = std::iter::once("component".to_string()).chain(self.layout.covariate_names.iter().cloned()).collect();
        let d = names.len();
        let pairs: Vec<String> = (0..d).flat_map(|a| (a + 1..d).map(move |b| format!("{}{}", a + 1, b + 1))).collect();
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(cov.iter().map(|c| format!("k_x_{c}")));
        let deconv = self.layout.mode == Mode::Deconvolution;
        if deconv {
            header.extend(cov.iter().map(|c| format!("k_eps_{c}")));
            header.extend(names.iter().map(|c| format!("sigma2_theta_{c}")));
        }
        header.extend(pairs.iter().map(|p| format!("r_x_{p}")));
        if deconv {
            header.extend(pairs.iter().map(|p| format!("r_eps_{p}")));
        }
        w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
        for t in &a.trace {
            let mut row = vec![t.chain.to_string(), t.iteration.to_string()];
            row.extend(t.k_x.iter().map(usize::to_string));
            row.extend(t.k_eps.iter().map(usize::to_string));
            row.extend(t.sigma2_theta.iter().map(|v| fmt(*v)));
            row.extend(t.r_x.iter().map(|v| fmt(*v)));
            row.extend(t.r_eps.iter().map(|v| fmt(*v)));
            w.write_record(&row).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(io_err(&path))?;

        let meta = json!({
            "seed": self.meta.seed,
            "mode": self.layout.mode,
            "n_subjects": self.layout.n,
            "components": names,
            "covariates": self.layout.covariate_names,
            "scale": scale,
            "n_chains": self.meta.n_chains,
            "retained": self.meta.retained,
            "runtime_seconds": self.meta.runtime_seconds,
            "config": {"hyper": self.meta.hyper, "mcmc": self.meta.mcmc},
            "acceptance": self.meta.acceptance,
        });
        write_json(&dir.join("meta.json"), &meta)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.write_all(b"\n").map_err(io_err(path))
}
