//! The configuration-space abstraction the optimizer searches over.
//!
//! Configurations travel as fixed-length real vectors; each space decodes them
//! into its own recipe type.

use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Lfs,
    Dis,
    Sfs,
    Grid,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::Lfs => "lfs",
            SpaceKind::Dis => "dis",
            SpaceKind::Sfs => "sfs",
            SpaceKind::Grid => "grid",
        })
    }
}

pub trait SearchSpace: Send + Sync {
    fn kind(&self) -> SpaceKind;

    /// Length of every encoded configuration.
    fn dim(&self) -> usize;

    /// A uniformly random configuration, already canonical.
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// A random local move away from `x`.
    fn neighbor(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// Maps any vector to the encoding of the configuration it decodes to.
    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    /// Whether the configuration may be evaluated at all (e.g. the layer cap).
    fn is_feasible(&self, _x: &[f64]) -> bool {
        true
    }

    /// Configurations evaluated before any surrogate-guided proposal.
    fn initial_design(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// Human-readable document for the configuration (recipe, plan, ...).
    fn describe(&self, x: &[f64]) -> Result<serde_json::Value>;
}

/// A finite lattice `{0, .., n_0 - 1} x .. x {0, .., n_{d-1} - 1}`, scaled to [0, 1].
///
/// Small enough to enumerate exhaustively; used for brute-force checks of the optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpace {
    levels: Vec<usize>,
}

impl GridSpace {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::param("grid levels must be non-empty and positive"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn size(&self) -> usize {
        self.levels.iter().product()
    }

    /// Integer coordinates of an encoded point.
    pub fn coords(&self, x: &[f64]) -> Vec<usize> {
        x.iter()
            .zip(&self.levels)
            .map(|(v, n)| {
                if *n == 1 {
                    0
                } else {
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    (v * (*n - 1) as f64).round() as usize
                }
            })
            .collect()
    }

    pub fn encode(&self, coords: &[usize]) -> Vec<f64> {
        coords
            .iter()
            .zip(&self.levels)
            .map(|(c, n)| if *n == 1 { 0.0 } else { *c.min(&(n - 1)) as f64 / (*n - 1) as f64 })
            .collect()
    }

    /// Every point of the lattice in row-major order.
    pub fn enumerate(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.size());
        let mut coords = vec![0usize; self.levels.len()];
        loop {
            out.push(self.encode(&coords));
            let mut i = self.levels.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                coords[i] += 1;
                if coords[i] < self.levels[i] {
                    break;
                }
                coords[i] = 0;
            }
        }
    }
}

impl SearchSpace for GridSpace {
    fn kind(&self) -> SpaceKind {
        SpaceKind::Grid
    }

    fn dim(&self) -> usize {
        self.levels.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let coords: Vec<usize> = self.levels.iter().map(|n| rng.gen_range(0..*n)).collect();
        self.encode(&coords)
    }

    fn neighbor(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut coords = self.coords(x);
        let i = rng.gen_range(0..coords.len());
        let n = self.levels[i];
        if n > 1 {
            let step = rng.gen_range(1..=2usize.min(n - 1));
            coords[i] = if rng.gen_bool(0.5) {
                (coords[i] + step).min(n - 1)
            } else {
                coords[i].saturating_sub(step)
            };
        }
        self.encode(&coords)
    }

    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        self.encode(&self.coords(x))
    }

    fn describe(&self, x: &[f64]) -> Result<serde_json::Value> {
        Ok(serde_json::json!({ "coords": self.coords(x) }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_enumerates_every_point_once() {
        let g = GridSpace::new(vec![3, 4]).unwrap();
        let all = g.enumerate();
        assert_eq!(all.len(), 12);
        let coords: std::collections::BTreeSet<Vec<usize>> = all.iter().map(|x| g.coords(x)).collect();
        assert_eq!(coords.len(), 12);
        for x in &all {
            assert_eq!(&g.canonicalize(x), x);
        }
    }
}
