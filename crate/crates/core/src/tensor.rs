//! Covariate-dependent mixture probabilities through a conditional tensor
//! factorization with hard level-to-cluster maps.
//!
//! Covariate 0 is the component label. Each covariate h has a map z_h from its
//! d_h levels onto k_h clusters; an observation with covariate tuple c uses the
//! weight vector λ of cell (z_0(c_0), …, z_p(c_p)). Maps are kept in canonical
//! form (clusters labelled by first appearance), so a map is a set partition
//! of the levels.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::log_add_exp;
use crate::random;

/// Relabels clusters in order of first appearance.
pub fn canonicalize(map: &mut [usize]) {
    let mut relabel: Vec<Option<usize>> = vec![None; map.len() + 1];
    let mut next = 0;
    for z in map.iter_mut() {
        let slot = &mut relabel[*z];
        let new = *slot.get_or_insert_with(|| {
            next += 1;
            next - 1
        });
        *z = new;
    }
}

pub fn n_clusters(map: &[usize]) -> usize {
    map.iter().max().map_or(0, |m| m + 1)
}

fn cluster_sizes(map: &[usize]) -> Vec<usize> {
    let mut sizes = vec![0; n_clusters(map)];
    for &z in map {
        sizes[z] += 1;
    }
    sizes
}

/// ln S(d, k) for Stirling numbers of the second kind, k = 0..=d.
pub fn ln_stirling2_row(d: usize) -> Vec<f64> {
    let mut row = vec![f64::NEG_INFINITY; d + 1];
    row[0] = 0.0;
    for n in 1..=d {
        let mut next = vec![f64::NEG_INFINITY; d + 1];
        for k in 1..=n {
            let stay = if row[k] == f64::NEG_INFINITY { f64::NEG_INFINITY } else { (k as f64).ln() + row[k] };
            next[k] = log_add_exp(stay, row[k - 1]);
        }
        row = next;
    }
    row
}

/// Unnormalized log prior of a partition of d levels into k clusters:
/// p₀(k) ∝ e^{−φk}, uniform over the S(d, k) partitions with k blocks.
pub fn ln_partition_prior(k: usize, ln_stirling: &[f64], phi: f64) -> f64 {
    -phi * k as f64 - ln_stirling[k]
}

/// Probabilities of proposing a split and a merge from a map with k of d
/// clusters.
fn move_probs(k: usize, d: usize) -> (f64, f64) {
    match (k > 1, k < d) {
        (true, true) => (0.5, 0.5),
        (false, true) => (1.0, 0.0),
        (true, false) => (0.0, 1.0),
        (false, false) => (0.0, 0.0),
    }
}

/// ln q(from → to) for the split/merge proposal, or `None` if `to` is not
/// reachable from `from` in one move. Both maps must be canonical.
pub fn proposal_ln_prob(from: &[usize], to: &[usize]) -> Option<f64> {
    let d = from.len();
    let (kf, kt) = (n_clusters(from), n_clusters(to));
    let (p_split, p_merge) = move_probs(kf, d);
    if kt == kf + 1 && p_split > 0.0 {
        // `to` must refine `from`, splitting exactly one cluster in two
        let mut parent = vec![usize::MAX; kt];
        for (&a, &b) in from.iter().zip(to) {
            if parent[b] == usize::MAX {
                parent[b] = a;
            } else if parent[b] != a {
                return None;
            }
        }
        let mut children = vec![0; kf];
        parent.iter().for_each(|&a| children[a] += 1);
        let split = children.iter().position(|&c| c == 2)?;
        let sizes = cluster_sizes(from);
        let splittable = sizes.iter().filter(|&&s| s >= 2).count();
        let s = sizes[split] as i32;
        Some(p_split.ln() - (splittable as f64).ln() - (2f64.powi(s - 1) - 1.0).ln())
    } else if kt + 1 == kf && p_merge > 0.0 {
        // `from` must refine `to`
        proposal_ln_prob(to, from)?;
        let pairs = (kf * (kf - 1) / 2) as f64;
        Some(p_merge.ln() - pairs.ln())
    } else {
        None
    }
}

/// A proposed map with ln q(new → old) − ln q(old → new).
#[derive(Clone, Debug, PartialEq)]
pub struct MapProposal {
    pub map: Vec<usize>,
    pub ln_ratio: f64,
}

/// Draws a split or merge of a canonical map: a split picks a cluster with at
/// least two levels uniformly and sends each level to one of two children by
/// a fair coin, redrawing if a child is empty; a merge picks an unordered pair
/// of clusters uniformly. `None` when the map has a single level.
pub fn propose_map<R: Rng + ?Sized>(map: &[usize], rng: &mut R) -> Option<MapProposal> {
    let d = map.len();
    let k = n_clusters(map);
    let (p_split, _) = move_probs(k, d);
    if d < 2 {
        return None;
    }
    let split = p_split == 1.0 || (p_split > 0.0 && rng.random::<f64>() < p_split);
    let mut new = map.to_vec();
    if split {
        let sizes = cluster_sizes(map);
        let candidates: Vec<usize> = (0..k).filter(|&c| sizes[c] >= 2).collect();
        let target = candidates[rng.random_range(0..candidates.len())];
        let members: Vec<usize> = (0..d).filter(|&i| map[i] == target).collect();
        loop {
            let coins: Vec<bool> = members.iter().map(|_| rng.random::<bool>()).collect();
            if coins.iter().any(|&c| c) && coins.iter().any(|&c| !c) {
                for (&i, &c) in members.iter().zip(&coins) {
                    new[i] = if c { k } else { target };
                }
                break;
            }
        }
    } else {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let (keep, drop) = (a.min(b), a.max(b));
        new.iter_mut().filter(|z| **z == drop).for_each(|z| *z = keep);
    }
    canonicalize(&mut new);
    let fwd = proposal_ln_prob(map, &new).expect("proposal reachable");
    let rev = proposal_ln_prob(&new, map).expect("reverse reachable");
    Some(MapProposal { map: new, ln_ratio: rev - fwd })
}

/// Allocation counts per observed covariate tuple. The tuple list is fixed;
/// counts are refreshed after each allocation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ComboCounts {
    pub tuples: Vec<Vec<usize>>,
    pub counts: Vec<Vec<u32>>,
}

impl ComboCounts {
    pub fn new(tuples: Vec<Vec<usize>>, k_atoms: usize) -> Self {
        let counts = vec![vec![0; k_atoms]; tuples.len()];
        ComboCounts { tuples, counts }
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0));
    }

    #[inline]
    pub fn add(&mut self, combo: usize, k: usize) {
        self.counts[combo][k] += 1;
    }

    /// Total count of each atom.
    pub fn atom_totals(&self) -> Vec<u32> {
        let k = self.counts.first().map_or(0, Vec::len);
        let mut out = vec![0; k];
        for c in &self.counts {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }
}

/// Counts aggregated to latent cells, keyed by cell.
pub type CellCounts = BTreeMap<u64, Vec<u32>>;

/// Σ over cells of ln B(αλ₀ + n_cell) − ln B(αλ₀): the probability of the
/// allocations with every λ cell integrated out.
pub fn log_marginal_allocations(cells: &CellCounts, alpha_lambda0: &[f64]) -> f64 {
    let alpha: f64 = alpha_lambda0.iter().sum();
    let ln_gamma_alpha = libm::lgamma(alpha);
    let mut total = 0.0;
    for counts in cells.values() {
        let n: u32 = counts.iter().sum();
        if n == 0 {
            continue;
        }
        for (&c, &a) in counts.iter().zip(alpha_lambda0) {
            if c > 0 {
                total += libm::lgamma(a + c as f64) - libm::lgamma(a);
            }
        }
        total -= libm::lgamma(alpha + n as f64) - ln_gamma_alpha;
    }
    total
}

/// Number of occupied tables for `n` customers at concentration `a`
/// (sum of independent Bernoulli(a / (s − 1 + a)), s = 1..n).
pub fn crt_draw<R: Rng + ?Sized>(n: u32, a: f64, rng: &mut R) -> u32 {
    (1..=n).filter(|&s| rng.random::<f64>() < a / (s as f64 - 1.0 + a)).count() as u32
}

/// Draws an atom index with probability ∝ weights[k]·exp(ln_lik[k]). If the
/// product underflows everywhere, falls back to the weights alone.
pub fn sample_allocation<R: Rng + ?Sized>(weights: &[f64], ln_lik: &[f64], scratch: &mut Vec<f64>, rng: &mut R) -> usize {
    scratch.clear();
    let m = ln_lik.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    if m.is_finite() {
        scratch.extend(weights.iter().zip(ln_lik).map(|(&w, &l)| w * (l - m).exp()));
        if let Some(k) = random::categorical(scratch, rng) {
            return k;
        }
    }
    log::warn!("allocation likelihoods underflow for every atom; drawing from the cell weights");
    random::categorical(weights, rng).unwrap_or(0)
}

/// Snapshot of the cluster structure stored with each retained sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSnapshot {
    pub maps: Vec<Vec<usize>>,
    pub lambda0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorMixture {
    k_atoms: usize,
    dims: Vec<usize>,
    strides: Vec<u64>,
    maps: Vec<Vec<usize>>,
    ln_stirling: Vec<Vec<f64>>,
    pub alpha: f64,
    pub alpha0: f64,
    pub phi: f64,
    lambda0: Vec<f64>,
    lambda: BTreeMap<u64, Vec<f64>>,
}

impl TensorMixture {
    /// Starts with the component label fully resolved (identity map) and all
    /// other covariates collapsed to one cluster; λ₀ uniform and no cells.
    pub fn new(k_atoms: usize, dims: Vec<usize>, alpha: f64, alpha0: f64, phi: f64) -> Result<Self> {
        if k_atoms == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("tensor needs atoms and nonempty level sets, got K={k_atoms}, dims={dims:?}")));
        }
        let mut strides = Vec::with_capacity(dims.len());
        let mut acc: u64 = 1;
        for &dh in &dims {
            strides.push(acc);
            acc = acc
                .checked_mul(dh as u64)
                .ok_or_else(|| Error::InvalidConfig("too many covariate combinations to index".into()))?;
        }
        let maps = dims
            .iter()
            .enumerate()
            .map(|(h, &dh)| if h == 0 { (0..dh).collect() } else { vec![0; dh] })
            .collect();
        let ln_stirling = dims.iter().map(|&dh| ln_stirling2_row(dh)).collect();
        Ok(TensorMixture {
            k_atoms,
            strides,
            maps,
            ln_stirling,
            alpha,
            alpha0,
            phi,
            lambda0: vec![1.0 / k_atoms as f64; k_atoms],
            lambda: BTreeMap::new(),
            dims,
        })
    }

    pub fn k_atoms(&self) -> usize {
        self.k_atoms
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn maps(&self) -> &[Vec<usize>] {
        &self.maps
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.maps.iter().map(|m| n_clusters(m)).collect()
    }

    pub fn lambda0(&self) -> &[f64] {
        &self.lambda0
    }

    pub fn cells(&self) -> &BTreeMap<u64, Vec<f64>> {
        &self.lambda
    }

    /// Replaces a map; used by tests and by restoring a stored state.
    pub fn set_map(&mut self, h: usize, mut map: Vec<usize>) {
        assert_eq!(map.len(), self.dims[h]);
        canonicalize(&mut map);
        self.maps[h] = map;
    }

    pub fn set_lambda0(&mut self, lambda0: Vec<f64>) {
        assert_eq!(lambda0.len(), self.k_atoms);
        self.lambda0 = lambda0;
    }

    pub fn set_cell(&mut self, key: u64, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.k_atoms);
        self.lambda.insert(key, weights);
    }

    fn key_with(&self, maps: &[Vec<usize>], tuple: &[usize]) -> u64 {
        tuple.iter().zip(maps).zip(&self.strides).map(|((&c, z), &s)| z[c] as u64 * s).sum()
    }

    pub fn cell_key(&self, tuple: &[usize]) -> u64 {
        self.key_with(&self.maps, tuple)
    }

    /// Mixture weights for covariate tuple `tuple`. Cells with no observed
    /// tuple carry no draw; their prior mean λ₀ is returned.
    pub fn weights(&self, tuple: &[usize]) -> &[f64] {
        self.lambda.get(&self.cell_key(tuple)).map_or(&self.lambda0, Vec::as_slice)
    }

    pub fn cond_prob(&self, k: usize, tuple: &[usize]) -> f64 {
        self.weights(tuple)[k]
    }

    fn cell_counts_with(&self, maps: &[Vec<usize>], combos: &ComboCounts) -> CellCounts {
        let mut cells = CellCounts::new();
        for (tuple, counts) in combos.tuples.iter().zip(&combos.counts) {
            let entry = cells.entry(self.key_with(maps, tuple)).or_insert_with(|| vec![0; self.k_atoms]);
            for (e, c) in entry.iter_mut().zip(counts) {
                *e += c;
            }
        }
        cells
    }

    pub fn cell_counts(&self, combos: &ComboCounts) -> CellCounts {
        self.cell_counts_with(&self.maps, combos)
    }

    fn alpha_lambda0(&self) -> Vec<f64> {
        self.lambda0.iter().map(|l| self.alpha * l).collect()
    }

    pub fn log_marginal(&self, combos: &ComboCounts) -> f64 {
        log_marginal_allocations(&self.cell_counts(combos), &self.alpha_lambda0())
    }

    /// Draws every cell reached by an observed tuple from
    /// Dir(αλ₀ + n_cell); cells no tuple reaches are dropped.
    pub fn update_core_tensor<R: Rng + ?Sized>(&mut self, combos: &ComboCounts, rng: &mut R) {
        let cells = self.cell_counts(combos);
        let base = self.alpha_lambda0();
        self.lambda.clear();
        for (key, counts) in cells {
            let shape: Vec<f64> = base.iter().zip(&counts).map(|(a, &c)| a + c as f64).collect();
            self.lambda.insert(key, random::dirichlet(&shape, rng));
        }
    }

    /// λ₀ | allocations with the cells integrated out: table counts by the
    /// Chinese-restaurant auxiliary draws, then Dir(α₀/K + m₀).
    pub fn update_base_measure<R: Rng + ?Sized>(&mut self, combos: &ComboCounts, rng: &mut R) {
        let cells = self.cell_counts(combos);
        let mut m0 = vec![0u32; self.k_atoms];
        for counts in cells.values() {
            for (k, &n) in counts.iter().enumerate() {
                if n > 0 {
                    m0[k] += crt_draw(n, self.alpha * self.lambda0[k], rng);
                }
            }
        }
        let a = self.alpha0 / self.k_atoms as f64;
        let shape: Vec<f64> = m0.iter().map(|&m| a + m as f64).collect();
        self.lambda0 = random::dirichlet(&shape, rng);
        // a zero entry would make αλ₀ invalid as a Dirichlet parameter
        if self.lambda0.iter().any(|&l| l <= 0.0) {
            let floor = f64::MIN_POSITIVE;
            self.lambda0.iter_mut().for_each(|l| *l = l.max(floor));
            let s: f64 = self.lambda0.iter().sum();
            self.lambda0.iter_mut().for_each(|l| *l /= s);
        }
    }

    /// One split-or-merge Metropolis–Hastings move per covariate, in order
    /// h = 0..=p. Returns per covariate whether a move was accepted (`None`
    /// for single-level covariates). λ must be redrawn afterwards.
    pub fn split_merge_step<R: Rng + ?Sized>(&mut self, combos: &ComboCounts, rng: &mut R) -> Vec<Option<bool>> {
        let base = self.alpha_lambda0();
        let mut current = log_marginal_allocations(&self.cell_counts(combos), &base);
        let mut out = Vec::with_capacity(self.dims.len());
        for h in 0..self.dims.len() {
            let Some(prop) = propose_map(&self.maps[h], rng) else {
                out.push(None);
                continue;
            };
            let old_map = std::mem::replace(&mut self.maps[h], prop.map);
            let proposed = log_marginal_allocations(&self.cell_counts(combos), &base);
            let k_old = n_clusters(&old_map);
            let k_new = n_clusters(&self.maps[h]);
            let ln_prior = ln_partition_prior(k_new, &self.ln_stirling[h], self.phi)
                - ln_partition_prior(k_old, &self.ln_stirling[h], self.phi);
            let ln_a = proposed - current + ln_prior + prop.ln_ratio;
            if ln_a >= 0.0 || random::open_unit(rng).ln() < ln_a {
                current = proposed;
                out.push(Some(true));
            } else {
                self.maps[h] = old_map;
                out.push(Some(false));
            }
        }
        out
    }

    pub fn snapshot(&self) -> TensorSnapshot {
        TensorSnapshot { maps: self.maps.clone(), lambda0: self.lambda0.clone() }
    }

    /// Checks simplex and surjectivity invariants.
    pub fn check(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvariantViolation { block: "tensor".into(), detail });
        for (h, map) in self.maps.iter().enumerate() {
            let sizes = cluster_sizes(map);
            if sizes.contains(&0) || sizes.len() > self.dims[h] {
                return bad(format!("map {h} is not a canonical surjection: {map:?}"));
            }
        }
        let s: f64 = self.lambda0.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return bad(format!("λ₀ sums to {s}"));
        }
        for (key, w) in &self.lambda {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 || w.iter().any(|v| !(*v >= 0.0)) {
                return bad(format!("cell {key} weights sum to {s}"));
            }
        }
        Ok(())
    }
}

/// Fraction of samples with k_h ≥ 2 and whether it reaches one half.
pub fn inclusion_probability(k_samples: &[usize]) -> (f64, bool) {
    if k_samples.is_empty() {
        return (0.0, false);
    }
    let frac = k_samples.iter().filter(|&&k| k >= 2).count() as f64 / k_samples.len() as f64;
    (frac, frac >= 0.5)
}
