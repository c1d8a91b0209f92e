//! Integrated squared error against known truths, medians over replicates,
//! covariate-selection frequencies and the split-chain R̂ diagnostic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SimulationDesign;

/// Density values on a strictly increasing grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub component: String,
    pub group: String,
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(component: impl Into<String>, group: impl Into<String>, x: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if x.len() != values.len() || x.len() < 2 {
            return Err(Error::GridMismatch(format!("{} grid points for {} values", x.len(), values.len())));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("grid is not strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::GridMismatch(format!("density value {v} is not a finite nonnegative number")));
        }
        Ok(DensityGrid { component: component.into(), group: group.into(), x, values })
    }

    /// Trapezoid spacings Δ_m: half the distance between the neighbours.
    pub fn spacings(&self) -> Vec<f64> {
        let n = self.x.len();
        (0..n)
            .map(|k| {
                let lo = if k == 0 { self.x[0] } else { self.x[k - 1] };
                let hi = if k + 1 == n { self.x[n - 1] } else { self.x[k + 1] };
                0.5 * (hi - lo)
            })
            .collect()
    }
}

/// Σ_m (f(x_m) − f̂(x_m))² Δ_m.
pub fn ise(truth: &DensityGrid, estimate: &DensityGrid) -> Result<f64> {
    let same = truth.x.len() == estimate.x.len()
        && truth.x.iter().zip(&estimate.x).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())));
    if !same {
        return Err(Error::GridMismatch(format!(
            "truth grid ({} points) differs from estimate grid ({} points) for {} / {}",
            truth.x.len(),
            estimate.x.len(),
            estimate.component,
            estimate.group
        )));
    }
    Ok(truth.spacings().iter().zip(truth.values.iter().zip(&estimate.values)).map(|(dx, (f, g))| (f - g).powi(2) * dx).sum())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median ISE over replicates.
pub fn mise(ises: &[f64]) -> f64 {
    median(ises)
}

/// Share of `true` flags.
pub fn selection_frequency(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return f64::NAN;
    }
    flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
}

/// Posterior-mean x densities from a `densities_marginal.csv`.
pub fn read_marginals(path: &Path) -> Result<Vec<DensityGrid>> {
    #[derive(Deserialize)]
    struct Row {
        component: String,
        combo: String,
        x: f64,
        mean: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut by_key: BTreeMap<(String, String), (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row.map_err(|e| Error::csv(path, e))?;
        let n = by_key.len();
        let e = by_key.entry((row.component, row.combo)).or_insert((n, Vec::new(), Vec::new()));
        e.1.push(row.x);
        e.2.push(row.mean);
    }
    let mut grids: Vec<(usize, DensityGrid)> = Vec::new();
    for ((c, g), (order, x, v)) in by_key {
        grids.push((order, DensityGrid::new(c, g, x, v)?));
    }
    grids.sort_by_key(|(o, _)| *o);
    Ok(grids.into_iter().map(|(_, g)| g).collect())
}

/// The true density matching an estimate reported for group
/// `<covariate>=<level label>` of the covariate that drives x, evaluated on
/// the estimate's grid. `None` for groups the truth does not resolve.
pub fn truth_for(design: &SimulationDesign, estimate: &DensityGrid) -> Option<DensityGrid> {
    let l = estimate.component.parse::<usize>().ok()?.checked_sub(1)?;
    let (name, label) = estimate.group.split_once('=')?;
    if name != design.covariate_names[design.x_covariate] || l >= design.d() {
        return None;
    }
    let level = label.parse::<usize>().ok()?.checked_sub(1)?;
    if level >= design.x_weights.len() {
        return None;
    }
    let values = estimate.x.iter().map(|&x| design.x_density(l, level, x)).collect();
    DensityGrid::new(estimate.component.clone(), estimate.group.clone(), estimate.x.clone(), values).ok()
}

/// ISE of every estimate the truth resolves, keyed by (component, group).
pub fn replicate_ises(design: &SimulationDesign, estimates: &[DensityGrid]) -> Result<BTreeMap<(String, String), f64>> {
    let mut out = BTreeMap::new();
    for est in estimates {
        if let Some(truth) = truth_for(design, est) {
            out.insert((est.component.clone(), est.group.clone()), ise(&truth, est)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiseRow {
    pub component: String,
    pub group: String,
    pub mise_x1000: f64,
    pub replicates: usize,
}

/// Median ISE × 1000 per (component, group) across replicates.
pub fn mise_table(replicates: &[BTreeMap<(String, String), f64>]) -> Vec<MiseRow> {
    let mut pooled: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for rep in replicates {
        for (k, v) in rep {
            pooled.entry(k.clone()).or_default().push(*v);
        }
    }
    pooled
        .into_iter()
        .map(|((component, group), v)| MiseRow { component, group, mise_x1000: 1000.0 * mise(&v), replicates: v.len() })
        .collect()
}

/// Selected covariates (by name) of the x and error mixtures from an
/// `inclusion.json` value.
pub fn selected_covariates(inclusion: &serde_json::Value, target: &str) -> Vec<String> {
    inclusion[target]
        .as_array()
        .map(|rows| {
            rows.iter()
                .filter(|r| r["selected"].as_bool() == Some(true))
                .filter_map(|r| r["covariate"].as_str().map(str::to_owned))
                .collect()
        })
        .unwrap_or_default()
}

/// Split-chain potential scale reduction of a scalar trace. Each chain is
/// halved; returns 1 for constant traces and NaN when too short.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return f64::NAN;
    }
    let pieces: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[c.len() - half..]]).collect();
    let m = pieces.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = pieces.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = pieces.iter().zip(&means).map(|(p, mu)| p.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sum::<f64>() / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| 10.0 * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn ise_examples() {
        let x = uniform_grid(201);
        let truth = DensityGrid::new("1", "all", x.clone(), vec![0.1; 201]).unwrap();
        assert_eq!(ise(&truth, &truth).unwrap(), 0.0);
        let shifted = DensityGrid::new("1", "all", x.clone(), vec![0.11; 201]).unwrap();
        assert!((ise(&truth, &shifted).unwrap() - 1e-3).abs() < 1e-12);
        let half: Vec<f64> = x.iter().map(|&v| if v <= 5.0 { 0.2 } else { 0.0 }).collect();
        let half = DensityGrid::new("1", "all", x, half).unwrap();
        assert!((ise(&truth, &half).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch() {
        let a = DensityGrid::new("1", "all", uniform_grid(11), vec![0.1; 11]).unwrap();
        let b = DensityGrid::new("1", "all", uniform_grid(21), vec![0.1; 21]).unwrap();
        assert!(matches!(ise(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn medians_and_frequencies() {
        assert_eq!(mise(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(mise(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(selection_frequency(&[true, true, false, true]), 0.75);
    }

    #[test]
    fn rhat_of_identical_chains_is_near_one() {
        let c: Vec<f64> = (0..400).map(|k| ((k * 7919) % 101) as f64).collect();
        let r = split_rhat(&[c.clone(), c]);
        assert!((r - 1.0).abs() < 0.05, "{r}");
        let shifted = split_rhat(&[vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![5.0, 6.0, 5.0, 6.0, 5.0, 6.0]]);
        assert!(shifted > 2.0);
    }
}
