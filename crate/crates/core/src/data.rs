//! Replicated surrogate data: ingestion from long-format records, validation,
//! and the shared-support rescaling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value every component's maximum is mapped to by [`preprocess_scale`].
pub const SCALE_TARGET: f64 = 20.0;

/// One row of `data.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject: String,
    pub component: String,
    pub replicate: String,
    pub value: f64,
}

/// One row of `covariates.csv`: a subject id followed by its level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateRow {
    pub subject: String,
    pub levels: Vec<String>,
}

/// Surrogates `w[ℓ][i][j]` with per-subject categorical covariates.
///
/// Levels are stored 0-based (`0..levels[h]`). Replicates of subject `i` sit
/// at `offsets[i]..offsets[i + 1]` of every component's value vector, so each
/// replicate is a full d-vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateDataset {
    pub d: usize,
    pub levels: Vec<usize>,
    pub offsets: Vec<usize>,
    pub w: Vec<Vec<f64>>,
    pub covariates: Vec<Vec<usize>>,
    /// Original value = stored value × scale.
    pub scale: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub component_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub level_labels: Vec<Vec<String>>,
}

/// Ordering used for every label dictionary: numeric labels by value, then
/// the rest lexicographically. Makes ingestion independent of row order.
pub fn label_cmp(a: &str, b: &str) -> Ordering {
    match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn sorted_labels<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = it.collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_owned).collect();
    v.sort_by(|a, b| label_cmp(a, b));
    v
}

fn index_of(labels: &[String], key: &str) -> usize {
    labels.binary_search_by(|l| label_cmp(l, key)).expect("label from the same dictionary")
}

impl ReplicateDataset {
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn p(&self) -> usize {
        self.levels.len()
    }

    pub fn m(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn total_replicates(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn max_replicates(&self) -> usize {
        (0..self.n()).map(|i| self.m(i)).max().unwrap_or(0)
    }

    /// Replicate values of component `l` for subject `i`.
    pub fn replicates(&self, l: usize, i: usize) -> &[f64] {
        &self.w[l][self.offsets[i]..self.offsets[i + 1]]
    }

    /// Covariate levels of subject `i`, one per external covariate.
    pub fn covariate_tuple(&self, i: usize) -> Vec<usize> {
        self.covariates.iter().map(|c| c[i]).collect()
    }

    pub fn subject_means(&self) -> Vec<Vec<f64>> {
        (0..self.d)
            .map(|l| {
                (0..self.n())
                    .map(|i| {
                        let r = self.replicates(l, i);
                        r.iter().sum::<f64>() / r.len() as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Builds a dataset from subject-major arrays. `values[i][j][l]` is
    /// replicate j of component l for subject i.
    pub fn from_parts(values: &[Vec<Vec<f64>>], d: usize, covariates: Vec<Vec<usize>>, levels: Vec<usize>) -> Result<Self> {
        let n = values.len();
        let mut offsets = vec![0];
        let mut w = vec![Vec::new(); d];
        for (i, subj) in values.iter().enumerate() {
            if subj.is_empty() {
                return Err(Error::InvalidRecord { row: i, reason: "subject has no replicates".into() });
            }
            for rep in subj {
                if rep.len() != d {
                    return Err(Error::InvalidRecord { row: i, reason: format!("expected {d} components, got {}", rep.len()) });
                }
                for (l, &v) in rep.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::InvalidRecord { row: i, reason: format!("value {v} is not finite") });
                    }
                    w[l].push(v);
                }
            }
            offsets.push(offsets[i] + subj.len());
        }
        if covariates.len() != levels.len() {
            return Err(Error::InvalidConfig("covariate columns and level counts differ in length".into()));
        }
        for (h, (col, &dh)) in covariates.iter().zip(&levels).enumerate() {
            if dh == 0 {
                return Err(Error::EmptyCovariate { name: format!("c{}", h + 1) });
            }
            if col.len() != n {
                return Err(Error::InvalidConfig(format!("covariate c{} has {} entries for {n} subjects", h + 1, col.len())));
            }
            if let Some(row) = col.iter().position(|&c| c >= dh) {
                return Err(Error::InvalidRecord { row, reason: format!("level {} of c{} exceeds {dh} levels", col[row], h + 1) });
            }
        }
        Ok(ReplicateDataset {
            d,
            offsets,
            w,
            scale: vec![1.0; d],
            subject_ids: (1..=n).map(|i| i.to_string()).collect(),
            component_names: (1..=d).map(|l| l.to_string()).collect(),
            covariate_names: (1..=levels.len()).map(|h| format!("c{h}")).collect(),
            level_labels: levels.iter().map(|&dh| (1..=dh).map(|v| v.to_string()).collect()).collect(),
            levels,
            covariates,
        })
    }

    /// Keeps the listed subjects, in the given order.
    pub fn subset(&self, subjects: &[usize]) -> Self {
        let mut offsets = vec![0];
        let mut w = vec![Vec::new(); self.d];
        for &i in subjects {
            for (l, wl) in w.iter_mut().enumerate() {
                wl.extend_from_slice(self.replicates(l, i));
            }
            offsets.push(offsets.last().unwrap() + self.m(i));
        }
        ReplicateDataset {
            d: self.d,
            levels: self.levels.clone(),
            offsets,
            w,
            covariates: self.covariates.iter().map(|c| subjects.iter().map(|&i| c[i]).collect()).collect(),
            scale: self.scale.clone(),
            subject_ids: subjects.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            component_names: self.component_names.clone(),
            covariate_names: self.covariate_names.clone(),
            level_labels: self.level_labels.clone(),
        }
    }

    /// Observed values as latent truths, for fits without measurement error.
    /// Requires exactly one replicate per subject.
    pub fn single_observations(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(i) = (0..self.n()).find(|&i| self.m(i) != 1) {
            return Err(Error::IncompatibleData(format!(
                "density mode needs one value per subject and component; subject `{}` has {}",
                self.subject_ids[i],
                self.m(i)
            )));
        }
        Ok(self.w.clone())
    }

    pub fn read_csv(data: &Path, covariates: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(data).map_err(|e| Error::csv(data, e))?;
        let mut records = Vec::new();
        for rec in rdr.deserialize() {
            records.push(rec.map_err(|e| Error::csv(data, e))?);
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(covariates).map_err(|e| Error::csv(covariates, e))?;
        let header = rdr.headers().map_err(|e| Error::csv(covariates, e))?.clone();
        let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(covariates, e))?;
            if rec.len() != header.len() {
                return Err(Error::InvalidRecord { row: r + 1, reason: format!("{} fields, header has {}", rec.len(), header.len()) });
            }
            rows.push(CovariateRow { subject: rec[0].to_owned(), levels: rec.iter().skip(1).map(str::to_owned).collect() });
        }
        ingest(&records, &rows, &names)
    }

    /// Writes `data.csv` and `covariates.csv` in original units.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let path = dir.join("data.csv");
        let mut wtr = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        wtr.write_record(["subject", "component", "replicate", "value"]).map_err(|e| Error::csv(&path, e))?;
        for i in 0..self.n() {
            for l in 0..self.d {
                for (j, v) in self.replicates(l, i).iter().enumerate() {
                    let value = v * self.scale[l];
                    wtr.write_record([self.subject_ids[i].as_str(), &self.component_names[l], &(j + 1).to_string(), &value.to_string()])
                        .map_err(|e| Error::csv(&path, e))?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("covariates.csv");
        let mut wtr = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let mut header = vec!["subject".to_owned()];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header).map_err(|e| Error::csv(&path, e))?;
        for i in 0..self.n() {
            let mut row = vec![self.subject_ids[i].clone()];
            for h in 0..self.p() {
                row.push(self.level_labels[h][self.covariates[h][i]].clone());
            }
            wtr.write_record(&row).map_err(|e| Error::csv(&path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Validates long-format records against the covariate table and packs them
/// into a [`ReplicateDataset`]. Subjects, components, replicates and levels
/// are all ordered by [`label_cmp`], so any permutation of the input rows
/// produces the same dataset.
pub fn ingest(records: &[Record], covariates: &[CovariateRow], covariate_names: &[String]) -> Result<ReplicateDataset> {
    if records.is_empty() {
        return Err(Error::InvalidRecord { row: 0, reason: "no data records".into() });
    }
    let p = covariate_names.len();
    let mut cov_by_subject: BTreeMap<&str, &CovariateRow> = BTreeMap::new();
    for (r, row) in covariates.iter().enumerate() {
        if row.levels.len() != p {
            return Err(Error::InvalidRecord { row: r + 1, reason: format!("{} covariate values, expected {p}", row.levels.len()) });
        }
        if cov_by_subject.insert(row.subject.as_str(), row).is_some() {
            return Err(Error::InvalidRecord { row: r + 1, reason: format!("subject `{}` listed twice in covariates", row.subject) });
        }
    }
    for (r, rec) in records.iter().enumerate() {
        if !rec.value.is_finite() {
            return Err(Error::InvalidRecord { row: r + 1, reason: format!("value {} is not finite", rec.value) });
        }
        if !cov_by_subject.contains_key(rec.subject.as_str()) {
            return Err(Error::MissingCovariate { subject: rec.subject.clone(), row: r + 1 });
        }
    }

    let subjects = sorted_labels(records.iter().map(|r| r.subject.as_str()));
    let components = sorted_labels(records.iter().map(|r| r.component.as_str()));
    let d = components.len();

    // subject -> replicate -> component -> value
    let mut table: Vec<BTreeMap<String, Vec<Option<f64>>>> = vec![BTreeMap::new(); subjects.len()];
    for (r, rec) in records.iter().enumerate() {
        let i = index_of(&subjects, &rec.subject);
        let l = index_of(&components, &rec.component);
        let slot = table[i].entry(rec.replicate.clone()).or_insert_with(|| vec![None; d]);
        if slot[l].replace(rec.value).is_some() {
            return Err(Error::InvalidRecord {
                row: r + 1,
                reason: format!("duplicate value for subject `{}`, component `{}`, replicate `{}`", rec.subject, rec.component, rec.replicate),
            });
        }
    }

    let mut values = Vec::with_capacity(subjects.len());
    for (i, reps) in table.into_iter().enumerate() {
        let mut keys: Vec<String> = reps.keys().cloned().collect();
        keys.sort_by(|a, b| label_cmp(a, b));
        let mut subj = Vec::with_capacity(keys.len());
        for key in keys {
            let rep = &reps[&key];
            let mut row = Vec::with_capacity(d);
            for (l, v) in rep.iter().enumerate() {
                match v {
                    Some(v) => row.push(*v),
                    None => {
                        return Err(Error::InvalidRecord {
                            row: 0,
                            reason: format!("subject `{}` replicate `{key}` lacks component `{}`", subjects[i], components[l]),
                        })
                    }
                }
            }
            subj.push(row);
        }
        values.push(subj);
    }

    let mut level_labels = Vec::with_capacity(p);
    let mut coded = Vec::with_capacity(p);
    for (h, name) in covariate_names.iter().enumerate() {
        let labels = sorted_labels(subjects.iter().map(|s| cov_by_subject[s.as_str()].levels[h].as_str()));
        if labels.is_empty() {
            return Err(Error::EmptyCovariate { name: name.clone() });
        }
        coded.push(subjects.iter().map(|s| index_of(&labels, &cov_by_subject[s.as_str()].levels[h])).collect());
        level_labels.push(labels);
    }

    let levels = level_labels.iter().map(Vec::len).collect();
    let mut ds = ReplicateDataset::from_parts(&values, d, coded, levels)?;
    ds.subject_ids = subjects;
    ds.component_names = components;
    ds.covariate_names = covariate_names.to_vec();
    ds.level_labels = level_labels;
    Ok(ds)
}

/// Rescales each component so its largest value is [`SCALE_TARGET`],
/// accumulating the factor in `scale`. A constant (nonzero) component is
/// rescaled and logged.
pub fn preprocess_scale(ds: &ReplicateDataset) -> Result<ReplicateDataset> {
    let mut out = ds.clone();
    for l in 0..ds.d {
        let max = ds.w[l].iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return Err(Error::DegenerateComponent { component: l + 1 });
        }
        let min = ds.w[l].iter().copied().fold(f64::INFINITY, f64::min);
        if min == max {
            log::warn!("component {} has no variation", ds.component_names[l]);
        }
        if max == SCALE_TARGET {
            continue;
        }
        let f = SCALE_TARGET / max;
        // the maximum lands on the target exactly so a second pass is a no-op
        out.w[l].iter_mut().for_each(|v| *v = if *v == max { SCALE_TARGET } else { *v * f });
        out.scale[l] = ds.scale[l] / f;
    }
    Ok(out)
}
