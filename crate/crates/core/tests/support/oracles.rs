//! Independent straight-line reference implementations used as test oracles.
//!
//! These deliberately avoid the library's helpers: plain loops, full sorts and
//! brute-force enumeration, so an error in the optimized code cannot hide in a
//! shared routine.
#![allow(dead_code)]

use std::collections::BTreeSet;

pub fn task_arithmetic(base: &[f32], ft: &[Vec<f32>], lambda: f64) -> Vec<f32> {
    let mut out = Vec::new();
    for i in 0..base.len() {
        let mut acc = 0.0f64;
        for t in ft {
            acc += t[i] as f64 - base[i] as f64;
        }
        out.push((base[i] as f64 + lambda * acc) as f32);
    }
    out
}

/// Top-`r` by magnitude with `r = max(1, round(k n))`, lower index wins ties.
pub fn ties_keep(tv: &[f64], k: f64) -> Vec<f64> {
    let n = tv.len();
    let mut r = (k * n as f64).round() as usize;
    if r < 1 {
        r = 1;
    }
    if r > n {
        r = n;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // stable sort by descending magnitude keeps lower indices first on ties
    idx.sort_by(|a, b| tv[*b].abs().partial_cmp(&tv[*a].abs()).unwrap());
    let mut out = vec![0.0; n];
    for &i in idx.iter().take(r) {
        out[i] = tv[i];
    }
    out
}

pub fn ties(base: &[f32], ft: &[Vec<f32>], k: f64, lambda: f64) -> Vec<f32> {
    let n = base.len();
    let kept: Vec<Vec<f64>> = ft
        .iter()
        .map(|t| {
            let tv: Vec<f64> = (0..n).map(|i| t[i] as f64 - base[i] as f64).collect();
            ties_keep(&tv, k)
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..n {
        let mut total = 0.0;
        for v in &kept {
            total += v[i];
        }
        let sign = if total >= 0.0 { 1.0 } else { -1.0 };
        let mut sum = 0.0;
        let mut count = 0;
        for v in &kept {
            if v[i] != 0.0 && v[i].signum() == sign {
                sum += v[i];
                count += 1;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        out.push((base[i] as f64 + lambda * mean) as f32);
    }
    out
}

pub fn slerp(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    if t == 0.0 {
        return a.to_vec();
    }
    if t == 1.0 {
        return b.to_vec();
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += (a[i] as f64).powi(2);
        nb += (b[i] as f64).powi(2);
    }
    let mut cos = dot / (na.sqrt() * nb.sqrt());
    if cos > 1.0 {
        cos = 1.0;
    }
    if cos < -1.0 {
        cos = -1.0;
    }
    let w = cos.acos();
    let (ca, cb) = if w.sin() < 1e-6 {
        (1.0 - t, t)
    } else {
        (((1.0 - t) * w).sin() / w.sin(), (t * w).sin() / w.sin())
    };
    (0..a.len()).map(|i| (ca * a[i] as f64 + cb * b[i] as f64) as f32).collect()
}

pub fn linear(models: &[Vec<f32>], w: &[f64]) -> Vec<f32> {
    let mut out = Vec::new();
    for i in 0..models[0].len() {
        let mut acc = 0.0;
        for (m, wt) in models.iter().zip(w) {
            acc += wt * m[i] as f64;
        }
        out.push(acc as f32);
    }
    out
}

pub fn scale(t: &[f32], s: f64) -> Vec<f32> {
    t.iter().map(|x| (*x as f64 * s) as f32).collect()
}

/// `|got - want| <= tol * |want|`, with an absolute floor for values near zero.
pub fn close_rel(got: &[f32], want: &[f32], tol: f64) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            let (g, w) = (*g as f64, *w as f64);
            (g - w).abs() <= tol * w.abs().max(1e-6)
        })
}

/// Every distinct arrangement of the multiset `{(m, d) x R}`, in lexicographic order.
pub fn multiset_arrangements(depth: usize, models: usize, repeat: usize) -> Vec<Vec<(usize, usize)>> {
    let mut items = Vec::new();
    for m in 0..models {
        for d in 0..depth {
            for _ in 0..repeat {
                items.push((m, d));
            }
        }
    }
    let mut all = BTreeSet::new();
    permute(&mut items, 0, &mut all);
    all.into_iter().collect()
}

fn permute(items: &mut Vec<(usize, usize)>, k: usize, out: &mut BTreeSet<Vec<(usize, usize)>>) {
    if k == items.len() {
        out.insert(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, out);
        items.swap(k, i);
    }
}

pub fn factorial(n: u128) -> u128 {
    (1..=n).product()
}

/// Binomial coefficient by multiplicative formula.
pub fn binomial(n: u64, k: u64) -> u64 {
    let mut r = 1u64;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Weight vectors with entries in `{0, 1/s, .., 1}` summing to one, by nested enumeration.
pub fn lattice_brute(k: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; k];
    fn rec(i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[i] = v;
            rec(i + 1, left - v, cur, out);
        }
    }
    rec(0, s, &mut cur, &mut out);
    out
}

pub fn dominated_by(a: &[f64], b: &[f64]) -> bool {
    // b dominates a
    let mut strictly = false;
    for i in 0..a.len() {
        if b[i] > a[i] {
            return false;
        }
        if b[i] < a[i] {
            strictly = true;
        }
    }
    strictly
}

/// Indices of the non-dominated points, O(n^2).
pub fn non_dominated(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|i| !points.iter().any(|q| dominated_by(&points[*i], q)))
        .collect()
}

pub fn tchebycheff(costs: &[f64], lambda: &[f64], rho: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for i in 0..costs.len() {
        let v = lambda[i] * costs[i];
        if v > mx {
            mx = v;
        }
        sum += v;
    }
    mx + rho * sum
}

/// Standard normal density at zero.
pub fn phi0() -> f64 {
    1.0 / (2.0 * std::f64::consts::PI).sqrt()
}
