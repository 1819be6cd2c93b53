//! Tensor-level merging kernels.
//!
//! Every kernel works on flattened f32 buffers, accumulates in f64 and rounds
//! the result back to f32 once per coordinate.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
pub const TIES_K_RANGE: (f64, f64) = (0.1, 0.99);
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
const SLERP_COLINEAR_SIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    TaskArithmetic,
    Ties,
    Slerp,
    Linear,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::TaskArithmetic,
        MethodKind::Ties,
        MethodKind::Slerp,
        MethodKind::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::TaskArithmetic => "task_arithmetic",
            MethodKind::Ties => "ties",
            MethodKind::Slerp => "slerp",
            MethodKind::Linear => "linear",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        MethodKind::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Whether the base checkpoint enters as the shared origin of task vectors.
    pub fn uses_task_vectors(self) -> bool {
        matches!(self, MethodKind::TaskArithmetic | MethodKind::Ties)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A merging method together with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeMethod {
    TaskArithmetic { lambda: f64 },
    Ties { lambda: f64, k: f64 },
    Slerp { t: f64 },
    Linear { weights: Vec<f64> },
}

impl MergeMethod {
    pub fn kind(&self) -> MethodKind {
        match self {
            MergeMethod::TaskArithmetic { .. } => MethodKind::TaskArithmetic,
            MergeMethod::Ties { .. } => MethodKind::Ties,
            MergeMethod::Slerp { .. } => MethodKind::Slerp,
            MergeMethod::Linear { .. } => MethodKind::Linear,
        }
    }

    /// Lists every range violation of the hyperparameters.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let unit = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name}={v} outside [0, 1]"));
            }
        };
        match self {
            MergeMethod::TaskArithmetic { lambda } => unit("lambda", *lambda, &mut out),
            MergeMethod::Ties { lambda, k } => {
                unit("lambda", *lambda, &mut out);
                if !(TIES_K_RANGE.0..=TIES_K_RANGE.1).contains(k) {
                    out.push(format!("k={k} outside [{}, {}]", TIES_K_RANGE.0, TIES_K_RANGE.1));
                }
            }
            MergeMethod::Slerp { t } => unit("t", *t, &mut out),
            MergeMethod::Linear { weights } => {
                if let Err(e) = check_simplex(weights) {
                    out.push(e.to_string());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::param(v)),
        }
    }

    /// Applies the method to one tensor. `base` is only read by the task-vector methods.
    pub fn apply(&self, base: &[f32], sources: &[&[f32]]) -> Result<Vec<f32>> {
        match self {
            MergeMethod::TaskArithmetic { lambda } => task_arithmetic_merge(base, sources, *lambda),
            MergeMethod::Ties { lambda, k } => ties_merge(base, sources, *k, *lambda),
            MergeMethod::Slerp { t } => match sources {
                [a, b] => slerp(a, b, *t),
                _ => Err(Error::param(format!("slerp needs exactly 2 sources, got {}", sources.len()))),
            },
            MergeMethod::Linear { weights } => linear_merge(sources, weights),
        }
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::param("linear weights are empty"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::param(format!("linear weight {w} is negative or not finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::param(format!("linear weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_lengths(base: &[f32], others: &[&[f32]]) -> Result<()> {
    if others.is_empty() {
        return Err(Error::Empty("no source tensors".into()));
    }
    if let Some((i, t)) = others.iter().enumerate().find(|(_, t)| t.len() != base.len()) {
        return Err(Error::shape(format!(
            "source {i} has {} elements, expected {}",
            t.len(),
            base.len()
        )));
    }
    Ok(())
}

/// `base + lambda * sum_t (finetuned_t - base)`.
pub fn task_arithmetic_merge(base: &[f32], finetuned: &[&[f32]], lambda: f64) -> Result<Vec<f32>> {
    check_lengths(base, finetuned)?;
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let b = f64::from(b);
            let sum: f64 = finetuned.iter().map(|t| f64::from(t[i]) - b).sum();
            (b + lambda * sum) as f32
        })
        .collect())
}

/// Number of entries TIES keeps out of `n`.
pub fn ties_retained(n: usize, k: f64) -> usize {
    ((k * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Zeroes all but the `ties_retained(n, k)` largest-magnitude entries; ties at the
/// threshold keep the lower index.
pub fn ties_trim(task_vector: &[f64], k: f64) -> Vec<f64> {
    let n = task_vector.len();
    if n == 0 {
        return Vec::new();
    }
    let r = ties_retained(n, k);
    let mut order: Vec<usize> = (0..n).collect();
    let by_magnitude = |a: &usize, b: &usize| -> Ordering {
        task_vector[*b]
            .abs()
            .total_cmp(&task_vector[*a].abs())
            .then_with(|| a.cmp(b))
    };
    if r < n {
        order.select_nth_unstable_by(r - 1, by_magnitude);
    }
    let mut out = vec![0.0; n];
    for &i in &order[..r] {
        out[i] = task_vector[i];
    }
    out
}

/// TIES merging: per-tensor magnitude trim, elected sign (`sgn(0) = +1`), and a
/// disjoint mean over the nonzero retained entries that agree with the elected sign.
pub fn ties_merge(base: &[f32], finetuned: &[&[f32]], k: f64, lambda: f64) -> Result<Vec<f32>> {
    check_lengths(base, finetuned)?;
    if !(TIES_K_RANGE.0..=TIES_K_RANGE.1).contains(&k) {
        return Err(Error::param(format!("ties k={k} outside [0.1, 0.99]")));
    }
    let trimmed: Vec<Vec<f64>> = finetuned
        .iter()
        .map(|t| {
            let tv: Vec<f64> = t.iter().zip(base).map(|(x, b)| f64::from(*x) - f64::from(*b)).collect();
            ties_trim(&tv, k)
        })
        .collect();
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let total: f64 = trimmed.iter().map(|t| t[i]).sum();
            let positive = total >= 0.0;
            let (sum, count) = trimmed
                .iter()
                .map(|t| t[i])
                .filter(|v| *v != 0.0 && (*v > 0.0) == positive)
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            let merged = if count == 0 { 0.0 } else { sum / count as f64 };
            (f64::from(b) + lambda * merged) as f32
        })
        .collect())
}

/// Spherical interpolation over the flattened tensors, falling back to linear
/// interpolation when the inputs are (anti-)colinear.
pub fn slerp(a: &[f32], b: &[f32], t: f64) -> Result<Vec<f32>> {
    check_lengths(a, &[b])?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(format!("slerp t={t} outside [0, 1]")));
    }
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::param("slerp input has zero norm"));
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    let sin_omega = omega.sin();
    let (ca, cb) = if sin_omega < SLERP_COLINEAR_SIN {
        (1.0 - t, t)
    } else {
        (((1.0 - t) * omega).sin() / sin_omega, (t * omega).sin() / sin_omega)
    };
    Ok(a
        .iter()
        .zip(b)
        .map(|(x, y)| (ca * f64::from(*x) + cb * f64::from(*y)) as f32)
        .collect())
}

/// Weighted average `sum_t w_t * models_t` with `w` on the probability simplex.
pub fn linear_merge(models: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    if models.len() != weights.len() {
        return Err(Error::param(format!(
            "{} models but {} linear weights",
            models.len(),
            weights.len()
        )));
    }
    check_simplex(weights)?;
    check_lengths(models[0], models)?;
    Ok((0..models[0].len())
        .map(|i| {
            models
                .iter()
                .zip(weights)
                .map(|(m, w)| w * f64::from(m[i]))
                .sum::<f64>() as f32
        })
        .collect())
}

pub fn check_scale(scale: f64) -> Result<()> {
    if (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&scale) {
        Ok(())
    } else {
        Err(Error::param(format!("scale {scale} outside [0.5, 1.5]")))
    }
}

/// Multiplies every weight by `weight_scale`.
pub fn sfs_scale(tensor: &[f32], weight_scale: f64) -> Result<Vec<f32>> {
    check_scale(weight_scale)?;
    Ok(tensor.iter().map(|x| (f64::from(*x) * weight_scale) as f32).collect())
}
