use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use deconforge_core::config::{Mode, RunConfig};
use deconforge_core::data::ReplicateDataset;
use deconforge_core::eval::{self, DensityGrid, MiseRow};
use deconforge_core::random::chain_rng;
use deconforge_core::sampler;
use deconforge_core::synth::{self, GroundTruth, SimulationDesign};
use deconforge_core::Error;

use crate::manifest::{prepare_output, write_json, RunManifest};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON design; fields left out keep the benchmark defaults.
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Number of replicate data sets B.
    #[arg(long, short = 'B', default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of subjects.
    #[arg(long)]
    pub n: Option<usize>,
    /// Write the true x values, one replicate per subject.
    #[arg(long)]
    pub error_free: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Deconv,
    Density,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Long-format CSV: subject,component,replicate,value.
    #[arg(long)]
    pub data: PathBuf,
    /// CSV: subject followed by one column per covariate.
    #[arg(long)]
    pub covariates: PathBuf,
    /// JSON with optional `hyper` and `mcmc` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only the first n subjects (in sorted subject order).
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Fit the surrogates in their original units.
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Output directory of `simulate`.
    #[arg(long)]
    pub truths: PathBuf,
    /// Directory holding one fitted archive per replicate, named like the
    /// replicate directories.
    #[arg(long)]
    pub archives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    /// Output directory of `fit`.
    #[arg(long)]
    pub archive: PathBuf,
}

pub fn replicate_name(b: usize) -> String {
    format!("rep_{:03}", b + 1)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.replicates == 0 {
        return Err(Error::InvalidReplicateCount.into());
    }
    let mut design: SimulationDesign = match &a.design {
        Some(p) => read_json(p)?,
        None => SimulationDesign::default(),
    };
    if let Some(n) = a.n {
        design.n = n;
    }
    if a.error_free {
        design.error_free = true;
        design.m = 1;
    }
    design.validate()?;
    prepare_output(&a.out, a.force)?;
    RunManifest::new("simulate", a.design.as_deref(), Vec::new(), &a.out, Some(a.seed), &design)?.write(&a.out)?;

    (0..a.replicates).into_par_iter().try_for_each(|b| -> Result<()> {
        let dir = a.out.join(replicate_name(b));
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let (ds, _, truth) = synth::gen_dataset(&design, &mut chain_rng(a.seed, b as u64))?;
        ds.write_csv(&dir)?;
        write_json(&dir.join("truth.json"), &truth)
    })?;
    log::info!("wrote {} replicate data sets to {}", a.replicates, a.out.display());
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    let m = &mut cfg.mcmc;
    if let Some(mode) = a.mode {
        m.mode = match mode {
            ModeArg::Deconv => Mode::Deconvolution,
            ModeArg::Density => Mode::DensityRegression,
        };
    }
    if let Some(c) = a.chains {
        m.n_chains = c;
    }
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(n) = a.iters {
        m.n_iter = n;
        if a.burn_in.is_none() && m.burn_in >= n {
            m.burn_in = n / 2;
        }
    }
    if let Some(b) = a.burn_in {
        m.burn_in = b;
    }
    if let Some(t) = a.thin {
        m.thin = t;
    }
    if a.no_scale {
        m.scale = false;
    }
    cfg.hyper.validate()?;
    cfg.mcmc.validate()?;

    let mut ds = ReplicateDataset::read_csv(&a.data, &a.covariates)?;
    if let Some(n) = a.subsample {
        if n == 0 || n > ds.n() {
            return Err(Error::InvalidConfig(format!("--subsample {n} outside 1..={}", ds.n())).into());
        }
        ds = ds.subset(&(0..n).collect::<Vec<_>>());
    }
    prepare_output(&a.out, a.force)?;
    RunManifest::new("fit", a.config.as_deref(), vec![a.data.clone(), a.covariates.clone()], &a.out, Some(cfg.mcmc.seed), &cfg)?
        .write(&a.out)?;
    log::info!(
        "fitting {} subjects, {} components, {} covariates: {} sweeps, {} chain(s)",
        ds.n(),
        ds.d,
        ds.p(),
        cfg.mcmc.n_iter,
        cfg.mcmc.n_chains
    );
    let post = sampler::fit(&ds, &cfg.hyper, &cfg.mcmc)?;
    post.write(&a.out)?;
    log::info!("{} draws retained in {:.1}s; archive in {}", post.meta.retained, post.meta.runtime_seconds, a.out.display());
    Ok(())
}

/// Subdirectories of `root` that contain `marker`, by name.
fn replicate_dirs(root: &Path, marker: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let entry = entry?;
        if entry.path().join(marker).is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct SelectionRow {
    target: String,
    covariate: String,
    frequency: f64,
    replicates: usize,
}

#[derive(Serialize)]
struct IseRow<'a> {
    replicate: &'a str,
    component: &'a str,
    group: &'a str,
    ise: f64,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let truths = replicate_dirs(&a.truths, "truth.json")?;
    let fits = replicate_dirs(&a.archives, "densities_marginal.csv")?;
    if truths.is_empty() {
        bail!("no replicate directories with truth.json under {}", a.truths.display());
    }
    if let Some(r) = truths.iter().find(|r| !fits.contains(r)) {
        bail!("replicate {r}: no fitted archive under {}", a.archives.display());
    }
    if let Some(r) = fits.iter().find(|r| !truths.contains(r)) {
        bail!("replicate {r}: archive has no matching truth under {}", a.truths.display());
    }
    prepare_output(&a.out, a.force)?;
    let inputs = vec![a.truths.clone(), a.archives.clone()];
    RunManifest::new("evaluate", None, inputs, &a.out, None, &truths)?.write(&a.out)?;

    let results = truths
        .par_iter()
        .map(|r| -> Result<(BTreeMap<(String, String), f64>, Value)> {
            let truth: GroundTruth = read_json(&a.truths.join(r).join("truth.json"))?;
            let est = eval::read_marginals(&a.archives.join(r).join("densities_marginal.csv"))?;
            let ises = eval::replicate_ises(&truth.design, &est).with_context(|| format!("replicate {r}"))?;
            if ises.is_empty() {
                bail!("replicate {r}: no estimated density matches a group of the truth");
            }
            let inclusion: Value = read_json(&a.archives.join(r).join("inclusion.json"))?;
            Ok((ises, inclusion))
        })
        .collect::<Result<Vec<_>>>()?;

    let path = a.out.join("ise_by_replicate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (r, (ises, _)) in truths.iter().zip(&results) {
        for ((component, group), ise) in ises {
            w.serialize(IseRow { replicate: r, component, group, ise: *ise })?;
        }
    }
    w.flush()?;

    let per_rep: Vec<_> = results.iter().map(|(i, _)| i.clone()).collect();
    let table: Vec<MiseRow> = eval::mise_table(&per_rep);
    let path = a.out.join("mise_table.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &table {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut selection = Vec::new();
    for target in ["x", "eps"] {
        let Some(rows) = results[0].1[target].as_array() else { continue };
        for row in rows {
            let Some(cov) = row["covariate"].as_str() else { continue };
            let flags: Vec<bool> = results.iter().map(|(_, inc)| eval::selected_covariates(inc, target).iter().any(|c| c == cov)).collect();
            selection.push(SelectionRow {
                target: target.into(),
                covariate: cov.into(),
                frequency: eval::selection_frequency(&flags),
                replicates: flags.len(),
            });
        }
    }
    let path = a.out.join("selection_table.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &selection {
        w.serialize(row)?;
    }
    w.flush()?;

    println!("{:<10} {:<16} {:>12}", "component", "group", "MISE x 1000");
    for row in &table {
        println!("{:<10} {:<16} {:>12.3}", row.component, row.group, row.mise_x1000);
    }
    for row in &selection {
        println!("selected {:<4} {:<12} in {:.0}% of {} replicates", row.target, row.covariate, 100.0 * row.frequency, row.replicates);
    }
    Ok(())
}

/// x at which the normalized trapezoid CDF of a density grid reaches q.
fn grid_quantile(g: &DensityGrid, q: f64) -> f64 {
    let mut cdf = vec![0.0; g.x.len()];
    for k in 1..g.x.len() {
        cdf[k] = cdf[k - 1] + 0.5 * (g.values[k] + g.values[k - 1]) * (g.x[k] - g.x[k - 1]);
    }
    let total = *cdf.last().unwrap();
    if total <= 0.0 {
        return f64::NAN;
    }
    let target = q * total;
    let k = cdf.partition_point(|&c| c < target).clamp(1, g.x.len() - 1);
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    let t = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
    g.x[k - 1] + t * (g.x[k] - g.x[k - 1])
}

/// Split-R̂ of every numeric trace column, per column name.
fn trace_rhats(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let chain_col = header.iter().position(|h| h == "chain").context("trace has no chain column")?;
    // per column, per chain
    let mut traces: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let chain = rec[chain_col].to_owned();
        for (c, field) in rec.iter().enumerate() {
            if let Ok(v) = field.parse::<f64>() {
                traces[c].entry(chain.clone()).or_default().push(v);
            }
        }
    }
    Ok(header
        .iter()
        .zip(traces)
        .filter(|(h, _)| *h != "chain" && *h != "iteration")
        .map(|(h, by_chain)| (h.clone(), eval::split_rhat(&by_chain.into_values().collect::<Vec<_>>())))
        .collect())
}

pub fn summarize(a: &SummarizeArgs) -> Result<()> {
    let dir = &a.archive;
    let inclusion: Value = read_json(&dir.join("inclusion.json"))?;
    let mut report = String::new();

    writeln!(report, "Covariate inclusion (selected when P(k >= 2) >= 0.5)")?;
    for target in ["x", "eps"] {
        let Some(rows) = inclusion[target].as_array() else { continue };
        for row in rows {
            let mark = if row["selected"].as_bool() == Some(true) { "selected" } else { "" };
            writeln!(
                report,
                "  {target:<4} {:<16} {:>6.3}  {mark}",
                row["covariate"].as_str().unwrap_or("?"),
                row["probability"].as_f64().unwrap_or(f64::NAN)
            )?;
        }
    }
    for target in ["x", "eps"] {
        let sel = eval::selected_covariates(&inclusion, target);
        if inclusion.get(target).is_some() {
            writeln!(report, "  {target} depends on: {}", if sel.is_empty() { "nothing".to_string() } else { sel.join(", ") })?;
        }
    }

    writeln!(report, "\nPosterior mean densities, quantiles 5% / 50% / 95%")?;
    for g in eval::read_marginals(&dir.join("densities_marginal.csv"))? {
        let [q05, q50, q95] = [0.05, 0.5, 0.95].map(|q| grid_quantile(&g, q));
        writeln!(report, "  {:<8} {:<20} {q05:>10.4} {q50:>10.4} {q95:>10.4}", g.component, g.group)?;
    }

    let corr: Value = read_json(&dir.join("correlations.json"))?;
    writeln!(report, "\nPosterior mean correlations")?;
    for key in ["r_x", "r_eps"] {
        if let Some(rows) = corr[key].as_array() {
            writeln!(report, "  {key}")?;
            for row in rows {
                let vals: Vec<String> = row.as_array().into_iter().flatten().map(|v| format!("{:>7.3}", v.as_f64().unwrap_or(f64::NAN))).collect();
                writeln!(report, "    {}", vals.join(" "))?;
            }
        }
    }

    writeln!(report, "\nSplit-chain R-hat of scalar traces")?;
    for (name, r) in trace_rhats(&dir.join("trace_k.csv"))? {
        if r.is_finite() {
            writeln!(report, "  {name:<24} {r:>7.3}")?;
        } else {
            writeln!(report, "  {name:<24} {:>7}", "n/a")?;
        }
    }

    print!("{report}");
    let path = dir.join("summary.txt");
    fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
