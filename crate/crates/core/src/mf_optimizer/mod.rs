//! Multi-fidelity search: Hyperband brackets run by successive halving, with
//! configurations proposed through a random-forest surrogate and expected
//! improvement. Several objectives are scalarized (ParEGO) with a fresh weight
//! vector per proposal; promotion then uses non-dominated sorting.

pub mod forest;
mod schedule;
mod trial_log;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::objectives::{
    dominates, tchebycheff_aggregate, weight_lattice, CostNormalizer, CostVector, ParetoArchive, ParetoEntry, WeightLattice, DEFAULT_LATTICE_GRANULARITY,
    DEFAULT_RHO,
};
use crate::space::SearchSpace;

pub use forest::{ForestParams, RandomForest};
pub use schedule::{make_schedule, make_schedule_with, Bracket, BracketSizing, BudgetSchedule};
pub use trial_log::{
    budget_report, incumbent_trajectory, load_trial_log, read_trial_log, trial_log_line, BudgetRow, TrajectoryPoint,
    TrialLogWriter, TrialRecord, TrialStatus,
};

/// Something that turns a configuration into costs at a given sample budget.
pub trait Objective: Send + Sync {
    fn num_objectives(&self) -> usize;

    /// `trial_id` is unique per call and may be used to name artifacts.
    fn evaluate(&self, config: &[f64], budget: u64, trial_id: u64) -> Result<Vec<f64>>;
}

/// Closed-form Gaussian expected improvement for minimization.
pub fn expected_improvement(mu: f64, sigma: f64, incumbent: f64) -> f64 {
    let gain = incumbent - mu;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (gain * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

const LOG_FLOOR: f64 = 1e-12;

/// Monotone log transform that stays finite at and below zero.
fn log_cost(c: f64) -> f64 {
    if c >= 0.0 {
        (c + LOG_FLOOR).ln()
    } else {
        LOG_FLOOR.ln() + c / LOG_FLOOR
    }
}

fn survivor_count(n: usize, eta: f64) -> usize {
    (n as f64 / eta + 1e-9).floor() as usize
}

/// Keeps the `floor(n / η)` lowest-cost trials; ties go to the earlier trial.
/// Non-finite costs (failed or infeasible trials) never advance.
pub fn sh_advance(ranked: &[(u64, f64)], eta: f64) -> Result<Vec<u64>> {
    if ranked.is_empty() {
        return Err(Error::Empty("successive halving over an empty round".into()));
    }
    let mut order: Vec<(u64, f64)> = ranked.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(order
        .into_iter()
        .take(survivor_count(ranked.len(), eta))
        .filter(|(_, c)| c.is_finite())
        .map(|(id, _)| id)
        .collect())
}

/// Forest over `config ⊕ budget / b_max`, queried at full budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    forest: RandomForest,
}

impl Surrogate {
    /// Predicted mean and standard deviation at full budget.
    pub fn predict(&self, config: &[f64]) -> (f64, f64) {
        let mut x = config.to_vec();
        x.push(1.0);
        let (mu, var) = self.forest.predict(&x);
        (mu, var.sqrt())
    }
}

/// Fits the surrogate on successful trials; each row is weighted by
/// `budget / b_max`, so higher-fidelity observations count more.
pub fn fit_surrogate<F>(trials: &[TrialRecord], b_max: u64, scalarize: F, params: &ForestParams, seed: u64) -> Result<Surrogate>
where
    F: Fn(&[f64]) -> f64,
{
    let ok: Vec<&TrialRecord> = trials.iter().filter(|t| t.is_ok() && t.budget > 0).collect();
    if ok.is_empty() {
        return Err(Error::Empty("no successful trials to fit a surrogate on".into()));
    }
    let x: Vec<Vec<f64>> = ok
        .iter()
        .map(|t| {
            let mut row = t.config.clone();
            row.push(t.budget as f64 / b_max as f64);
            row
        })
        .collect();
    let y: Vec<f64> = ok.iter().map(|t| scalarize(t.costs.as_deref().expect("ok trial"))).collect();
    let w: Vec<f64> = ok.iter().map(|t| t.budget as f64 / b_max as f64).collect();
    Ok(Surrogate {
        forest: RandomForest::fit(&x, &y, &w, params, seed)?,
    })
}

pub(crate) fn config_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Ranking keys for successive halving: the first cost for one objective;
/// otherwise the position in non-dominated order, most isolated first within
/// each front. Failed trials rank last.
fn rank_round(records: &[TrialRecord], k: usize) -> Vec<(u64, f64)> {
    fn cost(r: &TrialRecord) -> Option<&[f64]> {
        r.costs.as_deref().filter(|_| r.is_ok())
    }
    if k == 1 {
        return records
            .iter()
            .map(|r| (r.trial_id, cost(r).map_or(f64::INFINITY, |c| c[0])))
            .collect();
    }
    let ok: Vec<(u64, &[f64])> = records.iter().filter_map(|r| cost(r).map(|c| (r.trial_id, c))).collect();
    let mut order: Vec<u64> = Vec::with_capacity(ok.len());
    let mut left: Vec<usize> = (0..ok.len()).collect();
    while !left.is_empty() {
        let (front, rest): (Vec<usize>, Vec<usize>) = left
            .iter()
            .partition(|i| !left.iter().any(|j| dominates(ok[*j].1, ok[**i].1)));
        let crowd = crowding_distance(&front.iter().map(|i| ok[*i].1).collect::<Vec<_>>());
        let mut by_crowd: Vec<(f64, u64)> = front.iter().zip(crowd).map(|(i, c)| (c, ok[*i].0)).collect();
        by_crowd.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.extend(by_crowd.into_iter().map(|(_, id)| id));
        left = rest;
    }
    let mut ranked: Vec<(u64, f64)> = order.into_iter().enumerate().map(|(pos, id)| (id, pos as f64)).collect();
    ranked.extend(records.iter().filter(|r| cost(r).is_none()).map(|r| (r.trial_id, f64::INFINITY)));
    ranked
}

/// Crowding distance of each point within one front; extremes are infinite.
fn crowding_distance(points: &[&[f64]]) -> Vec<f64> {
    let n = points.len();
    let mut dist = vec![0.0; n];
    if n == 0 {
        return dist;
    }
    for m in 0..points[0].len() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|a, b| points[*a][m].total_cmp(&points[*b][m]).then(a.cmp(b)));
        let (lo, hi) = (points[idx[0]][m], points[idx[n - 1]][m]);
        dist[idx[0]] = f64::INFINITY;
        dist[idx[n - 1]] = f64::INFINITY;
        if hi > lo {
            for w in idx.windows(3) {
                dist[w[1]] += (points[w[2]][m] - points[w[0]][m]) / (hi - lo);
            }
        }
    }
    dist
}

/// Inputs to [`propose_configs`] beyond the space itself.
pub struct ProposalContext<'a> {
    pub surrogate: Option<&'a Surrogate>,
    /// Cost to beat.
    pub incumbent: f64,
    /// Configurations whose neighbourhoods are added to the candidate pool.
    pub anchors: &'a [Vec<f64>],
    /// Canonical configurations that must not be proposed again.
    pub exclude: &'a HashSet<Vec<u64>>,
    /// Pool size per requested configuration.
    pub pool_factor: usize,
}

fn random_distinct(space: &dyn SearchSpace, n: usize, taken: &mut HashSet<Vec<u64>>, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        let x = space.canonicalize(&space.sample(rng));
        tries += 1;
        // small spaces may run out of fresh points; repeats are then allowed
        if taken.insert(config_key(&x)) || tries > 100 * n.max(1) {
            out.push(x);
        }
    }
    out
}

/// Length scale of the batch-diversity penalty, in encoding units.
const DIVERSITY_SCALE: f64 = 0.05;

/// Greedy batch selection: after each pick, scores of nearby pool members are
/// damped so one basin cannot take the whole batch.
fn diverse_top(pool: &[Vec<f64>], mut scores: Vec<f64>, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut alive: Vec<bool> = vec![true; pool.len()];
    while out.len() < n {
        let Some(best) = (0..pool.len())
            .filter(|i| alive[*i])
            .max_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(b.cmp(a)))
        else {
            break;
        };
        alive[best] = false;
        let pick = &pool[best];
        for (i, x) in pool.iter().enumerate() {
            if alive[i] {
                let d2: f64 = x.iter().zip(pick).map(|(a, b)| (a - b).powi(2)).sum();
                scores[i] *= 1.0 - (-d2 / (2.0 * DIVERSITY_SCALE * DIVERSITY_SCALE)).exp();
            }
        }
        out.push(pick.clone());
    }
    out
}

/// The `n` pool members with the highest expected improvement; random samples
/// when there is no surrogate yet.
pub fn propose_configs(space: &dyn SearchSpace, n: usize, ctx: &ProposalContext<'_>, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let mut taken = ctx.exclude.clone();
    let Some(surrogate) = ctx.surrogate else {
        return random_distinct(space, n, &mut taken, rng);
    };
    let pool_size = ctx.pool_factor.max(1) * n;
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(2 * pool_size);
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut push = |x: Vec<f64>, pool: &mut Vec<Vec<f64>>| {
        let key = config_key(&x);
        if !taken.contains(&key) && seen.insert(key) {
            pool.push(x);
        }
    };
    for _ in 0..pool_size {
        let x = space.canonicalize(&space.sample(rng));
        push(x, &mut pool);
    }
    if !ctx.anchors.is_empty() {
        for i in 0..pool_size {
            let anchor = &ctx.anchors[i % ctx.anchors.len()];
            let mut x = space.neighbor(anchor, rng);
            // occasionally walk a second step
            if rng.gen_bool(0.25) {
                x = space.neighbor(&x, rng);
            }
            push(space.canonicalize(&x), &mut pool);
        }
    }
    let scores: Vec<f64> = pool
        .par_iter()
        .map(|x| {
            let (mu, sigma) = surrogate.predict(x);
            expected_improvement(mu, sigma, ctx.incumbent)
        })
        .collect();
    let mut out = diverse_top(&pool, scores, n);
    for x in &out {
        taken.insert(config_key(x));
    }
    let missing = n - out.len();
    out.extend(random_distinct(space, missing, &mut taken, rng));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub schedule: BudgetSchedule,
    pub t_max: usize,
    pub seed: u64,
    /// Parallel evaluations per round; 0 uses every core.
    pub workers: usize,
    pub rho: f64,
    pub lattice_granularity: usize,
    /// Stop after this many brackets in total (including resumed ones).
    pub max_brackets: Option<usize>,
    /// Stop after this many full-budget trials without progress.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Share of each bracket's proposals drawn uniformly at random.
    pub random_fraction: f64,
    pub pool_factor: usize,
    /// Number of best configurations whose neighbourhoods seed the pool.
    pub anchors: usize,
    pub forest: ForestParams,
    /// Fit the surrogate on log-costs; helps when costs span many decades.
    pub log_targets: bool,
    pub record_wall_time: bool,
}

impl SearchOptions {
    pub fn new(schedule: BudgetSchedule) -> Self {
        Self {
            schedule,
            t_max: 500,
            seed: 0,
            workers: 1,
            rho: DEFAULT_RHO,
            lattice_granularity: DEFAULT_LATTICE_GRANULARITY,
            max_brackets: None,
            plateau_window: 100,
            plateau_tol: 1e-6,
            random_fraction: 0.2,
            pool_factor: 100,
            anchors: 5,
            forest: ForestParams::default(),
            log_targets: true,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TrialBudget,
    ScheduleComplete,
    Plateau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Every trial, resumed ones included, in log order.
    pub trials: Vec<TrialRecord>,
    /// Best full-budget trial (single objective only).
    pub incumbent: Option<TrialRecord>,
    pub pareto: ParetoArchive,
    pub stop: StopReason,
    /// Evaluator calls made by this invocation.
    pub evaluations: usize,
}

struct Engine<'a> {
    space: &'a dyn SearchSpace,
    objective: &'a dyn Objective,
    opts: &'a SearchOptions,
    k: usize,
    trials: Vec<TrialRecord>,
    normalizer: CostNormalizer,
    pareto: ParetoArchive,
    full_keys: HashSet<Vec<u64>>,
    best_full: f64,
    stale_full: usize,
    evaluations: usize,
}

impl<'a> Engine<'a> {
    fn b_max(&self) -> u64 {
        self.opts.schedule.b_max
    }

    fn absorb(&mut self, rec: TrialRecord) {
        if let (true, Some(costs)) = (rec.is_ok(), rec.costs.as_ref()) {
            self.normalizer.observe(costs);
            if rec.budget == self.b_max() {
                self.full_keys.insert(config_key(&rec.config));
                let progressed = if self.k == 1 {
                    let improved = costs[0] < self.best_full - self.opts.plateau_tol || self.best_full.is_infinite();
                    self.best_full = self.best_full.min(costs[0]);
                    improved
                } else {
                    self.pareto.update(ParetoEntry {
                        trial_id: rec.trial_id,
                        config: rec.config.clone(),
                        costs: CostVector {
                            costs: costs.clone(),
                            budget: rec.budget,
                        },
                    })
                };
                self.stale_full = if progressed { 0 } else { self.stale_full + 1 };
            }
        }
        self.trials.push(rec);
    }

    fn scalarizer(&self, lambda: &[f64]) -> impl Fn(&[f64]) -> f64 + '_ {
        let lambda = lambda.to_vec();
        move |costs: &[f64]| {
            if self.k == 1 {
                costs[0]
            } else {
                tchebycheff_aggregate(&self.normalizer.normalize(costs), &lambda, self.opts.rho)
                    .expect("cost arity checked on insert")
            }
        }
    }

    /// Best scalarized cost at full budget, else at the highest budget seen.
    fn incumbent_cost(&self, scal: &dyn Fn(&[f64]) -> f64) -> f64 {
        let ok = || self.trials.iter().filter(|t| t.is_ok());
        let Some(top) = ok().map(|t| t.budget).max() else {
            return f64::INFINITY;
        };
        let level = if ok().any(|t| t.budget == self.b_max()) { self.b_max() } else { top };
        ok().filter(|t| t.budget == level)
            .map(|t| scal(t.costs.as_deref().expect("ok trial")))
            .fold(f64::INFINITY, f64::min)
    }

    /// The incumbent followed by the evaluated configurations the surrogate
    /// rates best at full budget.
    fn anchors(&self, scal: &dyn Fn(&[f64]) -> f64, surrogate: &Surrogate) -> Vec<Vec<f64>> {
        let ok: Vec<&TrialRecord> = self.trials.iter().filter(|t| t.is_ok()).collect();
        let top = ok.iter().map(|t| t.budget).max().unwrap_or(0);
        let incumbent = ok
            .iter()
            .filter(|t| t.budget == top)
            .min_by(|a, b| {
                scal(a.costs.as_deref().expect("ok trial"))
                    .total_cmp(&scal(b.costs.as_deref().expect("ok trial")))
                    .then(a.trial_id.cmp(&b.trial_id))
            });
        let mut seen = HashSet::new();
        let mut rated: Vec<(f64, u64, &[f64])> = ok
            .iter()
            .filter(|t| seen.insert(config_key(&t.config)))
            .map(|t| (surrogate.predict(&t.config).0, t.trial_id, t.config.as_slice()))
            .collect();
        rated.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<Vec<f64>> = incumbent.map(|t| t.config.clone()).into_iter().collect();
        for (_, _, x) in rated {
            if out.len() >= self.opts.anchors.max(1) {
                break;
            }
            if !out.iter().any(|o| o.as_slice() == x) {
                out.push(x.to_vec());
            }
        }
        out.truncate(self.opts.anchors);
        out
    }

    fn propose(&self, n: usize, bracket_idx: u64, lattice: &WeightLattice, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut taken = self.full_keys.clone();
        if self.trials.is_empty() {
            for x in self.space.initial_design() {
                let x = self.space.canonicalize(&x);
                if out.len() < n && taken.insert(config_key(&x)) {
                    out.push(x);
                }
            }
        }
        let remaining = n - out.len();
        if remaining == 0 {
            return Ok(out);
        }
        let has_data = self.trials.iter().any(|t| t.is_ok());
        if !has_data {
            out.extend(random_distinct(self.space, remaining, &mut taken, rng));
            return Ok(out);
        }
        let n_random = (0..remaining).filter(|_| rng.gen_bool(self.opts.random_fraction.clamp(0.0, 1.0))).count();
        // one scalarization per guided slot, grouped so each distinct weight
        // vector costs a single surrogate fit
        let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..remaining - n_random {
            let i = if self.k == 1 { 0 } else { rng.gen_range(0..lattice.vectors.len()) };
            *groups.entry(i).or_default() += 1;
        }
        let log = self.opts.log_targets;
        for (i, count) in groups {
            let lambda = if self.k == 1 { vec![1.0] } else { lattice.vectors[i].clone() };
            let scal = self.scalarizer(&lambda);
            let target = |c: &[f64]| if log { log_cost(scal(c)) } else { scal(c) };
            let seed = self.opts.seed ^ bracket_idx.rotate_left(17) ^ (i as u64).rotate_left(40);
            let surrogate = fit_surrogate(&self.trials, self.b_max(), target, &self.opts.forest, seed)?;
            let anchors = self.anchors(&scal, &surrogate);
            let incumbent = self.incumbent_cost(&scal);
            let ctx = ProposalContext {
                surrogate: Some(&surrogate),
                incumbent: if log { log_cost(incumbent) } else { incumbent },
                anchors: &anchors,
                exclude: &taken,
                pool_factor: self.opts.pool_factor,
            };
            let guided = propose_configs(self.space, count, &ctx, rng);
            for x in &guided {
                taken.insert(config_key(x));
            }
            out.extend(guided);
        }
        out.extend(random_distinct(self.space, n_random, &mut taken, rng));
        Ok(out)
    }

    fn evaluate_batch(
        &self,
        pool: &rayon::ThreadPool,
        configs: &[Vec<f64>],
        budget: u64,
        bracket: u64,
        round: u32,
    ) -> Vec<TrialRecord> {
        let first = self.trials.len() as u64;
        let kind = self.space.kind();
        pool.install(|| {
            configs
                .par_iter()
                .enumerate()
                .map(|(i, config)| {
                    let trial_id = first + i as u64;
                    let mut rec = TrialRecord {
                        trial_id,
                        space: kind,
                        config: config.clone(),
                        budget,
                        costs: None,
                        status: TrialStatus::Ok,
                        bracket,
                        round,
                        wall_time: None,
                        error: None,
                    };
                    if !self.space.is_feasible(config) {
                        rec.budget = 0;
                        rec.status = TrialStatus::Infeasible;
                        return rec;
                    }
                    let start = Instant::now();
                    match self.objective.evaluate(config, budget, trial_id) {
                        Ok(c) if c.len() == self.k && c.iter().all(|v| v.is_finite()) => rec.costs = Some(c),
                        Ok(c) => {
                            rec.status = TrialStatus::Failed;
                            rec.error = Some(format!("evaluator returned {} costs, expected {} finite values", c.len(), self.k));
                        }
                        Err(e) => {
                            rec.status = TrialStatus::Failed;
                            rec.error = Some(e.to_string());
                        }
                    }
                    if self.opts.record_wall_time {
                        rec.wall_time = Some(start.elapsed().as_secs_f64());
                    }
                    rec
                })
                .collect()
        })
    }

    fn plateaued(&self) -> bool {
        self.opts.plateau_window > 0 && self.stale_full >= self.opts.plateau_window
    }
}

pub fn run_search(space: &dyn SearchSpace, objective: &dyn Objective, opts: &SearchOptions) -> Result<SearchOutcome> {
    run_search_with(space, objective, opts, &[], &mut |_| Ok(()))
}

/// Runs brackets until `t_max` trials exist, `max_brackets` brackets have run,
/// or progress plateaus. `resume` replays an earlier log (its trials count
/// toward `t_max`); `sink` sees every new trial as soon as its round finishes.
pub fn run_search_with(
    space: &dyn SearchSpace,
    objective: &dyn Objective,
    opts: &SearchOptions,
    resume: &[TrialRecord],
    sink: &mut dyn FnMut(&TrialRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    let k = objective.num_objectives();
    if k == 0 {
        return Err(Error::param("objective reports zero costs"));
    }
    if opts.t_max == 0 {
        return Err(Error::param("t_max must be at least 1"));
    }
    let lattice = weight_lattice(k, opts.lattice_granularity)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))?;
    let mut engine = Engine {
        space,
        objective,
        opts,
        k,
        trials: Vec::with_capacity(opts.t_max),
        normalizer: CostNormalizer::new(),
        pareto: ParetoArchive::new(),
        full_keys: HashSet::new(),
        best_full: f64::INFINITY,
        stale_full: 0,
        evaluations: 0,
    };
    for (i, rec) in resume.iter().enumerate() {
        if rec.space != space.kind() || rec.config.len() != space.dim() || rec.trial_id != i as u64 {
            return Err(Error::config(format!("resumed trial {} does not belong to this search", rec.trial_id)));
        }
        if rec.costs.as_ref().is_some_and(|c| c.len() != k) {
            return Err(Error::config(format!("resumed trial {} has the wrong number of costs", rec.trial_id)));
        }
        engine.absorb(rec.clone());
    }

    let brackets = &opts.schedule.brackets;
    let mut bracket_idx = resume.last().map_or(0, |t| t.bracket + 1);
    let stop = 'outer: loop {
        if engine.trials.len() >= opts.t_max {
            break StopReason::TrialBudget;
        }
        if opts.max_brackets.is_some_and(|m| bracket_idx >= m as u64) {
            break StopReason::ScheduleComplete;
        }
        if engine.plateaued() {
            break StopReason::Plateau;
        }
        let bracket = &brackets[(bracket_idx % brackets.len() as u64) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(bracket_idx + 1);
        let mut configs = engine.propose(bracket.n0, bracket_idx, &lattice, &mut rng)?;
        for (round, &budget) in bracket.budgets.iter().enumerate() {
            let room = opts.t_max - engine.trials.len();
            let truncated = configs.len() > room;
            configs.truncate(room);
            let records = engine.evaluate_batch(&pool, &configs, budget, bracket_idx, round as u32);
            engine.evaluations += records.iter().filter(|r| r.status != TrialStatus::Infeasible).count();
            let ranked = rank_round(&records, k);
            for rec in records {
                sink(&rec)?;
                engine.absorb(rec);
            }
            if truncated {
                break 'outer StopReason::TrialBudget;
            }
            if budget >= opts.schedule.b_max || ranked.is_empty() {
                break;
            }
            let survivors = sh_advance(&ranked, opts.schedule.eta)?;
            configs = survivors
                .iter()
                .map(|id| engine.trials[*id as usize].config.clone())
                .collect();
            if configs.is_empty() {
                break;
            }
        }
        bracket_idx += 1;
    };

    let incumbent = if k == 1 {
        let ok = || engine.trials.iter().filter(|t| t.is_ok());
        ok().map(|t| t.budget).max().and_then(|top| {
            let level = if ok().any(|t| t.budget == opts.schedule.b_max) { opts.schedule.b_max } else { top };
            ok().filter(|t| t.budget == level)
                .min_by(|a, b| {
                    let (ca, cb) = (a.costs.as_ref().expect("ok")[0], b.costs.as_ref().expect("ok")[0]);
                    ca.total_cmp(&cb).then(a.trial_id.cmp(&b.trial_id))
                })
                .cloned()
        })
    } else {
        None
    };
    Ok(SearchOutcome {
        trials: engine.trials,
        incumbent,
        pareto: engine.pareto,
        stop,
        evaluations: engine.evaluations,
    })
}
