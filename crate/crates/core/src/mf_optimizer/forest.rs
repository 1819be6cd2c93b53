//! Weighted random-forest regression with across-tree variance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub min_leaf: usize,
    /// Features considered per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 64,
            min_leaf: 3,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    w: &'a [f64],
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let first = self.y[idx[0]];
        if idx.iter().all(|i| self.y[*i] == first) {
            return first;
        }
        let (sw, swy) = idx.iter().fold((0.0, 0.0), |(a, b), i| (a + self.w[*i], b + self.w[*i] * self.y[*i]));
        swy / sw
    }

    /// Best (weighted SSE, threshold) split on one feature, if any is admissible.
    fn best_split(&self, idx: &mut [usize], feature: usize) -> Option<(f64, f64)> {
        idx.sort_by(|a, b| self.x[*a][feature].total_cmp(&self.x[*b][feature]).then(a.cmp(b)));
        let (tw, twy, twyy) = idx.iter().fold((0.0, 0.0, 0.0), |(a, b, c), i| {
            let (w, y) = (self.w[*i], self.y[*i]);
            (a + w, b + w * y, c + w * y * y)
        });
        let (mut lw, mut lwy, mut lwyy) = (0.0, 0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        for pos in 0..idx.len() - 1 {
            let i = idx[pos];
            let (w, y) = (self.w[i], self.y[i]);
            lw += w;
            lwy += w * y;
            lwyy += w * y * y;
            let left_n = pos + 1;
            if left_n < self.min_leaf || idx.len() - left_n < self.min_leaf {
                continue;
            }
            let (a, b) = (self.x[i][feature], self.x[idx[pos + 1]][feature]);
            if a == b {
                continue;
            }
            let rw = tw - lw;
            if lw <= 0.0 || rw <= 0.0 {
                continue;
            }
            let sse = (lwyy - lwy * lwy / lw) + ((twyy - lwyy) - (twy - lwy).powi(2) / rw);
            if best.is_none_or(|(s, _)| sse < s) {
                best = Some((sse, a + (b - a) / 2.0));
            }
        }
        best
    }

    fn build(&mut self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(idx)));
        let first = self.y[idx[0]];
        if idx.len() < 2 * self.min_leaf || idx.iter().all(|i| self.y[*i] == first) {
            return id;
        }
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, f) in features.into_iter().enumerate() {
            // keep looking past `mtry` only while nothing admissible was found
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some((sse, thr)) = self.best_split(idx, f) {
                if best.is_none_or(|(s, _, _)| sse < s) {
                    best = Some((sse, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };
        idx.sort_by(|a, b| self.x[*a][feature].total_cmp(&self.x[*b][feature]).then(a.cmp(b)));
        let cut = idx.partition_point(|i| self.x[*i][feature] <= threshold);
        if cut == 0 || cut == idx.len() {
            return id;
        }
        let (l, r) = idx.split_at_mut(cut);
        let left = self.build(l, rng);
        let right = self.build(r, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<Tree>,
    dim: usize,
}

impl RandomForest {
    /// Fits on rows `x` with targets `y` and non-negative sample weights `w`;
    /// zero-weight rows are ignored.
    pub fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], params: &ForestParams, seed: u64) -> Result<Self> {
        if x.len() != y.len() || x.len() != w.len() {
            return Err(Error::shape("forest inputs have different lengths"));
        }
        let rows: Vec<usize> = (0..x.len()).filter(|i| w[*i] > 0.0).collect();
        if rows.is_empty() {
            return Err(Error::Empty("no weighted training rows".into()));
        }
        let dim = x[rows[0]].len();
        if rows.iter().any(|i| x[*i].len() != dim || !y[*i].is_finite()) {
            return Err(Error::shape("ragged or non-finite training rows"));
        }
        let mtry = params
            .max_features
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim.max(1));
        let trees = (0..params.trees.max(1))
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let mut idx: Vec<usize> = if params.bootstrap {
                    (0..rows.len()).map(|_| rows[rng.gen_range(0..rows.len())]).collect()
                } else {
                    rows.clone()
                };
                let mut b = Builder {
                    x,
                    y,
                    w,
                    min_leaf: params.min_leaf.max(1),
                    mtry,
                    nodes: Vec::new(),
                };
                if dim == 0 {
                    b.nodes.push(Node::Leaf(b.leaf_value(&idx)));
                } else {
                    b.build(&mut idx, &mut rng);
                }
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { trees, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean and variance of the per-tree predictions.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let n = preds.len() as f64;
        if preds.iter().all(|p| *p == preds[0]) {
            return (preds[0], 0.0);
        }
        let mean = preds.iter().sum::<f64>() / n;
        let var = preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        (mean, var.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_targets() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let f = RandomForest::fit(&x, &[0.7; 20], &[1.0; 20], &ForestParams::default(), 1).unwrap();
        for q in [[0.0, 0.0], [100.0, -3.0]] {
            assert_eq!(f.predict(&q), (0.7, 0.0));
        }
    }

    #[test]
    fn separates_clusters_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            x.push(vec![c + rng.gen::<f64>(), c + rng.gen::<f64>()]);
            y.push(if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let w = vec![1.0; 60];
        let f = RandomForest::fit(&x, &y, &w, &ForestParams::default(), 5).unwrap();
        assert!(f.predict(&[0.5, 0.5]).0.abs() < 0.2);
        assert!((f.predict(&[10.5, 10.5]).0 - 1.0).abs() < 0.2);
        let g = RandomForest::fit(&x, &y, &w, &ForestParams::default(), 5).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn zero_weights_are_ignored() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(RandomForest::fit(&x, &[1.0, 2.0], &[0.0, 0.0], &ForestParams::default(), 0).is_err());
        let f = RandomForest::fit(&x, &[1.0, 2.0], &[0.0, 1.0], &ForestParams::default(), 0).unwrap();
        assert_eq!(f.predict(&[0.0]).0, 2.0);
    }
}
