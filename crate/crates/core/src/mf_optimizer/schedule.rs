use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many configurations each bracket starts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketSizing {
    /// `ceil((s_max + 1) / (s + 1) * η^(r - 1))`, the usual Hyperband allocation.
    #[default]
    Hyperband,
    /// `floor(η^(r - 1) * η / (η - 1))`.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    /// Configurations sampled at the first round.
    pub n0: usize,
    /// Budget of every round, ending at `b_max`.
    pub budgets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub b_min: u64,
    pub b_max: u64,
    pub eta: f64,
    pub s_max: usize,
    pub sizing: BracketSizing,
    /// Distinct budget levels, ascending; the last is `b_max`.
    pub levels: Vec<u64>,
    pub brackets: Vec<Bracket>,
}

impl BudgetSchedule {
    /// The next budget after `b`, or `None` once `b_max` is reached.
    pub fn next_budget(&self, b: u64) -> Option<u64> {
        self.levels.iter().copied().find(|l| *l > b)
    }

    /// Upper bound on evaluator samples spent by one bracket.
    pub fn bracket_spend_bound(&self, bracket: &Bracket) -> u64 {
        (self.s_max as u64 + 1) * self.b_max * bracket.n0 as u64
    }
}

pub fn make_schedule(b_min: u64, b_max: u64, eta: f64) -> Result<BudgetSchedule> {
    make_schedule_with(b_min, b_max, eta, BracketSizing::Hyperband)
}

/// Builds the bracket structure.
///
/// Budgets climb geometrically from `b_min`; the top level is always `b_max`,
/// and a geometric level within half a log-step of `b_max` is replaced by it
/// rather than kept as a near-duplicate (so 100/1000/η=3 gives 100, 300, 1000).
pub fn make_schedule_with(b_min: u64, b_max: u64, eta: f64, sizing: BracketSizing) -> Result<BudgetSchedule> {
    if b_min == 0 || b_min > b_max {
        return Err(Error::param(format!("need 1 <= b_min <= b_max, got {b_min} and {b_max}")));
    }
    if !(eta > 1.0) || !eta.is_finite() {
        return Err(Error::param(format!("eta must be a finite number > 1, got {eta}")));
    }
    let ratio = (b_max as f64 / b_min as f64).ln() / eta.ln();
    let s_max = (ratio + 1e-9).floor() as usize;
    let steps = (ratio + 0.5 - 1e-9).floor().max(0.0) as usize;
    let mut levels: Vec<u64> = (0..steps)
        .map(|i| (b_min as f64 * eta.powi(i as i32)).round() as u64)
        .collect();
    levels.push(b_max);
    levels.dedup();
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(format!(
            "eta {eta} is too small to separate budget levels between {b_min} and {b_max}"
        )));
    }
    let brackets = (0..=s_max)
        .map(|s| {
            let budgets = levels[s.min(levels.len() - 1)..].to_vec();
            let rounds = budgets.len() as i32;
            let n0 = match sizing {
                BracketSizing::Hyperband => {
                    ((s_max + 1) as f64 / (s + 1) as f64 * eta.powi(rounds - 1) - 1e-9).ceil()
                }
                BracketSizing::Geometric => (eta.powi(rounds - 1) * eta / (eta - 1.0) + 1e-9).floor(),
            };
            Bracket {
                s,
                n0: (n0 as usize).max(1),
                budgets,
            }
        })
        .collect();
    Ok(BudgetSchedule {
        b_min,
        b_max,
        eta,
        s_max,
        sizing,
        levels,
        brackets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_levels() {
        let s = make_schedule(100, 1000, 3.0).unwrap();
        assert_eq!(s.s_max, 2);
        assert_eq!(s.levels, vec![100, 300, 1000]);
        let n: Vec<usize> = s.brackets.iter().map(|b| b.n0).collect();
        assert_eq!(n, vec![27, 5, 1]);

        let s = make_schedule(100, 700, 3.0).unwrap();
        assert_eq!(s.s_max, 1);
        assert_eq!(s.levels, vec![100, 300, 700]);
        assert_eq!(s.brackets[0].budgets, vec![100, 300, 700]);
        assert_eq!(s.brackets[1].budgets, vec![300, 700]);
    }

    #[test]
    fn single_level() {
        let s = make_schedule(500, 500, 3.0).unwrap();
        assert_eq!(s.s_max, 0);
        assert_eq!(s.brackets.len(), 1);
        assert_eq!(s.brackets[0].budgets, vec![500]);
        assert_eq!(s.brackets[0].n0, 1);
    }

    #[test]
    fn exact_powers() {
        let s = make_schedule(1, 27, 3.0).unwrap();
        assert_eq!(s.s_max, 3);
        assert_eq!(s.levels, vec![1, 3, 9, 27]);
        assert_eq!(s.next_budget(9), Some(27));
        assert_eq!(s.next_budget(27), None);
    }

    #[test]
    fn geometric_sizing() {
        let s = make_schedule_with(100, 1000, 3.0, BracketSizing::Geometric).unwrap();
        let n: Vec<usize> = s.brackets.iter().map(|b| b.n0).collect();
        assert_eq!(n, vec![13, 4, 1]);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_schedule(0, 10, 3.0).is_err());
        assert!(make_schedule(20, 10, 3.0).is_err());
        assert!(make_schedule(1, 10, 1.0).is_err());
        assert!(make_schedule(1, 10, f64::NAN).is_err());
    }
}
