//! Cost plumbing: ParEGO weight lattice, augmented Tchebycheff scalarization,
//! running cost normalization and the Pareto archive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RHO: f64 = 0.05;
pub const DEFAULT_LATTICE_GRANULARITY: usize = 4;
const NORMALIZE_EPS: f64 = 1e-12;
/// Lattices larger than this are refused rather than enumerated.
const MAX_LATTICE_SIZE: u128 = 10_000_000;

/// Costs of one evaluation; lower is better in every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub costs: Vec<f64>,
    pub budget: u64,
}

impl CostVector {
    pub fn new(costs: Vec<f64>, budget: u64) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::Empty("cost vector needs at least one objective".into()));
        }
        if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
            return Err(Error::param(format!("cost {c} is not finite")));
        }
        Ok(Self { costs, budget })
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// `1 - correct / total`.
pub fn accuracy_cost(correct: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::param("accuracy over zero samples"));
    }
    if correct > total {
        return Err(Error::param(format!("{correct} correct out of {total}")));
    }
    Ok(1.0 - correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLattice {
    pub k: usize,
    pub granularity: usize,
    pub vectors: Vec<Vec<f64>>,
}

fn lattice_size(k: usize, s: usize) -> Result<u128> {
    // C(s + k - 1, k - 1)
    let (n, r) = ((s + k - 1) as u128, (k - 1) as u128);
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| Error::Overflow(format!("weight lattice for k={k}, s={s}")))?
            / (i + 1);
    }
    Ok(acc)
}

/// Every weight vector whose entries are multiples of `1/s` and sum to one,
/// in lexicographic order of the integer numerators.
pub fn weight_lattice(k: usize, s: usize) -> Result<WeightLattice> {
    if k == 0 || s == 0 {
        return Err(Error::param("weight lattice needs k >= 1 and s >= 1"));
    }
    let size = lattice_size(k, s)?;
    if size > MAX_LATTICE_SIZE {
        return Err(Error::Overflow(format!("weight lattice with {size} vectors")));
    }
    let mut vectors = Vec::with_capacity(size as usize);
    let mut parts = vec![0usize; k];
    fn fill(pos: usize, left: usize, s: usize, parts: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if pos + 1 == parts.len() {
            parts[pos] = left;
            out.push(parts.iter().map(|p| *p as f64 / s as f64).collect());
            return;
        }
        for v in 0..=left {
            parts[pos] = v;
            fill(pos + 1, left - v, s, parts, out);
        }
    }
    fill(0, s, s, &mut parts, &mut vectors);
    Ok(WeightLattice { k, granularity: s, vectors })
}

/// `max_j(λ_j c_j) + ρ Σ_j λ_j c_j` over normalized costs.
pub fn tchebycheff_aggregate(costs: &[f64], lambda: &[f64], rho: f64) -> Result<f64> {
    if costs.len() != lambda.len() {
        return Err(Error::shape(format!(
            "{} costs but {} weights",
            costs.len(),
            lambda.len()
        )));
    }
    if costs.is_empty() {
        return Err(Error::Empty("no objectives to aggregate".into()));
    }
    let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
    for (c, l) in costs.iter().zip(lambda) {
        let v = l * c;
        max = max.max(v);
        sum += v;
    }
    Ok(max + rho * sum)
}

/// Running per-objective min/max used to map raw costs into [0, 1].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostNormalizer {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl CostNormalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_fitted(&self) -> bool {
        !self.min.is_empty()
    }

    pub fn observe(&mut self, costs: &[f64]) {
        if self.min.is_empty() {
            self.min = costs.to_vec();
            self.max = costs.to_vec();
            return;
        }
        for (j, c) in costs.iter().enumerate().take(self.min.len()) {
            self.min[j] = self.min[j].min(*c);
            self.max[j] = self.max[j].max(*c);
        }
    }

    /// `(c - min) / (max - min + ε)`, clamped to [0, 1]. Unfitted stats map everything to 0.
    pub fn normalize(&self, costs: &[f64]) -> Vec<f64> {
        costs
            .iter()
            .enumerate()
            .map(|(j, c)| match (self.min.get(j), self.max.get(j)) {
                (Some(lo), Some(hi)) => ((c - lo) / (hi - lo + NORMALIZE_EPS)).clamp(0.0, 1.0),
                _ => 0.0,
            })
            .collect()
    }

    /// Normalizes against the current statistics, then folds the observation in.
    pub fn normalize_then_observe(&mut self, costs: &[f64]) -> Vec<f64> {
        if !self.is_fitted() {
            self.observe(costs);
        }
        let out = self.normalize(costs);
        self.observe(costs);
        out
    }
}

/// `a` dominates `b`: no worse anywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub trial_id: u64,
    pub config: Vec<f64>,
    pub costs: CostVector,
}

/// Mutually non-dominated full-budget observations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParetoArchive {
    entries: Vec<ParetoEntry>,
}

/// One exported row of the Pareto front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub config_ref: u64,
    pub costs: Vec<f64>,
    pub budget: u64,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ParetoEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts `candidate` iff nothing in the archive dominates it, evicting what it
    /// dominates. A configuration already present is not inserted twice.
    pub fn update(&mut self, candidate: ParetoEntry) -> bool {
        let c = &candidate.costs.costs;
        if self
            .entries
            .iter()
            .any(|e| e.config == candidate.config || dominates(&e.costs.costs, c))
        {
            return false;
        }
        self.entries.retain(|e| !dominates(c, &e.costs.costs));
        self.entries.push(candidate);
        true
    }

    pub fn rows(&self) -> Vec<ParetoRow> {
        self.entries
            .iter()
            .map(|e| ParetoRow {
                config_ref: e.trial_id,
                costs: e.costs.costs.clone(),
                budget: e.costs.budget,
            })
            .collect()
    }
}

/// Free-function form of [`ParetoArchive::update`].
pub fn update_pareto(mut archive: ParetoArchive, candidate: ParetoEntry) -> ParetoArchive {
    archive.update(candidate);
    archive
}
