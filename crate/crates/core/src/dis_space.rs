//! Depth-wise integration search: per-block layer selection, ordering and
//! output scale over unmodified source layers.
//!
//! Slot `(m, d, r)` of a block (model `m`, depth offset `d`, repeat `r`) has
//! index `(m * D + d) * R + r`. The permutation index orders the multiset of
//! `(m, d)` items, each with multiplicity `R`; the `j`-th occurrence of an item
//! stands for repeat slot `r = j`. Only selected slots are emitted.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge_kernels::{check_scale, SCALE_RANGE};
use crate::space::{SearchSpace, SpaceKind};
use crate::tensor_store::WeightStore;

pub const DEFAULT_MAX_LAYERS: usize = 50;

fn binomial(n: u128, k: u128) -> Result<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| Error::Overflow("binomial coefficient exceeds u128".into()))?
            / (i + 1);
    }
    Ok(acc)
}

/// Number of distinct orderings of a multiset with the given item counts.
pub fn multiset_permutations(counts: &[usize]) -> Result<u128> {
    let mut total: u128 = 0;
    let mut acc: u128 = 1;
    for &c in counts {
        total += c as u128;
        acc = acc
            .checked_mul(binomial(total, c as u128)?)
            .ok_or_else(|| Error::Overflow("permutation count exceeds u128".into()))?;
    }
    Ok(acc)
}

/// `(D * M * R)! / (R!)^(M * D)`.
pub fn permutation_count(depth: usize, models: usize, repeat: usize) -> Result<u128> {
    if depth == 0 || models == 0 || repeat == 0 {
        return Err(Error::param("D, M and R must all be at least 1"));
    }
    multiset_permutations(&vec![repeat; depth * models])
}

/// Item `(model, depth slot)` of the ordered multiset.
pub type OrderItem = (usize, usize);

/// The `p`-th ordering (lexicographic rank) of the multiset of `(m, d)` items.
pub fn unrank_permutation(p: u128, depth: usize, models: usize, repeat: usize) -> Result<Vec<OrderItem>> {
    let total = permutation_count(depth, models, repeat)?;
    if p >= total {
        return Err(Error::param(format!("permutation index {p} out of range [0, {total})")));
    }
    let mut counts = vec![repeat; depth * models];
    let mut rest = p;
    let n = depth * models * repeat;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = None;
        for t in 0..counts.len() {
            if counts[t] == 0 {
                continue;
            }
            counts[t] -= 1;
            let block = multiset_permutations(&counts)?;
            if rest < block {
                chosen = Some(t);
                break;
            }
            rest -= block;
            counts[t] += 1;
        }
        let t = chosen.expect("rank below the multiset count");
        out.push((t / depth, t % depth));
    }
    Ok(out)
}

/// Inverse of [`unrank_permutation`].
pub fn rank_permutation(ordering: &[OrderItem], depth: usize, models: usize, repeat: usize) -> Result<u128> {
    let mut counts = vec![repeat; depth * models];
    if ordering.len() != depth * models * repeat {
        return Err(Error::param("ordering length does not match D * M * R"));
    }
    let mut rank: u128 = 0;
    for &(m, d) in ordering {
        if m >= models || d >= depth {
            return Err(Error::param(format!("item ({m}, {d}) outside the candidate grid")));
        }
        let t = m * depth + d;
        if counts[t] == 0 {
            return Err(Error::param(format!("item ({m}, {d}) appears more than {repeat} times")));
        }
        for smaller in 0..t {
            if counts[smaller] > 0 {
                counts[smaller] -= 1;
                rank += multiset_permutations(&counts)?;
                counts[smaller] += 1;
            }
        }
        counts[t] -= 1;
    }
    Ok(rank)
}

/// Active slots sorted by descending priority, ties by ascending slot index.
pub fn priority_ordering(priorities: &[f64], selection: &[bool]) -> Vec<usize> {
    let mut active: Vec<usize> = (0..priorities.len().min(selection.len()))
        .filter(|i| selection[*i])
        .collect();
    active.sort_by(|a, b| priorities[*b].total_cmp(&priorities[*a]).then(a.cmp(b)));
    active
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOrdering {
    Index(u128),
    Priority(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockDoc", into = "BlockDoc")]
pub struct BlockSpec {
    pub selection: Vec<bool>,
    pub ordering: BlockOrdering,
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    selection: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perm_index: Option<u128>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    priorities: Option<Vec<f64>>,
    scale: f64,
}

impl From<BlockSpec> for BlockDoc {
    fn from(b: BlockSpec) -> Self {
        let (perm_index, priorities) = match b.ordering {
            BlockOrdering::Index(p) => (Some(p), None),
            BlockOrdering::Priority(v) => (None, Some(v)),
        };
        BlockDoc {
            selection: b.selection.iter().map(|s| u8::from(*s)).collect(),
            perm_index,
            priorities,
            scale: b.scale,
        }
    }
}

impl TryFrom<BlockDoc> for BlockSpec {
    type Error = String;

    fn try_from(doc: BlockDoc) -> std::result::Result<Self, String> {
        let selection = doc
            .selection
            .iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(format!("selection bit {other} is not 0 or 1")),
            })
            .collect::<std::result::Result<_, _>>()?;
        let ordering = match (doc.perm_index, doc.priorities) {
            (Some(p), None) => BlockOrdering::Index(p),
            (None, Some(v)) => BlockOrdering::Priority(v),
            _ => return Err("block needs exactly one of `perm_index` or `priorities`".into()),
        };
        Ok(BlockSpec {
            selection,
            ordering,
            scale: doc.scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisConfig {
    pub base_model: String,
    /// Candidate models, in slot order (`M = models.len()`).
    pub models: Vec<String>,
    pub layer_count: usize,
    pub depth: usize,
    pub repeat: usize,
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    pub blocks: Vec<BlockSpec>,
}

fn default_max_layers() -> usize {
    DEFAULT_MAX_LAYERS
}

impl DisConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn slot_count(&self) -> usize {
        self.models.len() * self.depth * self.repeat
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.depth == 0 || self.repeat == 0 || self.models.is_empty() {
            out.push("D, R and the number of candidate models must be at least 1".into());
            return out;
        }
        if self.layer_count % self.depth != 0 {
            out.push(format!("layer count {} is not divisible by D={}", self.layer_count, self.depth));
        }
        let expected_blocks = self.layer_count / self.depth;
        if self.blocks.len() != expected_blocks {
            out.push(format!("{} blocks, expected L/D = {expected_blocks}", self.blocks.len()));
        }
        let p_total = permutation_count(self.depth, self.models.len(), self.repeat);
        let n = self.slot_count();
        for (i, block) in self.blocks.iter().enumerate() {
            if block.selection.len() != n {
                out.push(format!("block {i}: selection has {} bits, expected {n}", block.selection.len()));
            }
            match &block.ordering {
                BlockOrdering::Index(p) => match &p_total {
                    Ok(total) if p >= total => {
                        out.push(format!("block {i}: perm_index {p} >= P = {total}"))
                    }
                    Err(e) => out.push(format!("block {i}: {e}")),
                    _ => {}
                },
                BlockOrdering::Priority(v) => {
                    if v.len() != n {
                        out.push(format!("block {i}: {} priorities, expected {n}", v.len()));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        out.push(format!("block {i}: priorities must be finite"));
                    }
                }
            }
            if check_scale(block.scale).is_err() {
                out.push(format!("block {i}: scale {} outside [0.5, 1.5]", block.scale));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }

    /// Active slots of block `i` in execution order.
    pub fn ordered_active_slots(&self, block: &BlockSpec) -> Result<Vec<usize>> {
        let (d_, m_, r_) = (self.depth, self.models.len(), self.repeat);
        match &block.ordering {
            BlockOrdering::Priority(v) => Ok(priority_ordering(v, &block.selection)),
            BlockOrdering::Index(p) => {
                let order = unrank_permutation(*p, d_, m_, r_)?;
                let mut seen = vec![0usize; d_ * m_];
                let mut out = Vec::new();
                for (m, d) in order {
                    let t = m * d_ + d;
                    let slot = t * r_ + seen[t];
                    seen[t] += 1;
                    if block.selection.get(slot).copied().unwrap_or(false) {
                        out.push(slot);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Number of layers the realized plan would execute.
    pub fn realized_depth(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let active = b.selection.iter().filter(|s| **s).count();
                if active == 0 {
                    self.depth
                } else {
                    active
                }
            })
            .sum()
    }

    pub fn is_feasible(&self) -> bool {
        self.realized_depth() <= self.max_layers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanStep {
    pub model: String,
    pub layer: usize,
    pub block: usize,
}

/// A realized layer sequence with one output scale per block.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyPlan {
    pub base_model: String,
    pub depth: usize,
    pub models: usize,
    pub repeat: usize,
    pub steps: Vec<PlanStep>,
    pub block_scales: Vec<f64>,
    /// Set when the plan exceeds the configured layer cap.
    pub infeasible: bool,
}

impl AssemblyPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks that every referenced layer exists in its source store.
    pub fn check_against(&self, stores: &BTreeMap<String, WeightStore>) -> Result<()> {
        for step in &self.steps {
            let store = stores
                .get(&step.model)
                .ok_or_else(|| Error::MissingModel(step.model.clone()))?;
            if step.layer >= store.layer_count() {
                return Err(Error::config(format!(
                    "model `{}` has {} layers, plan references layer {}",
                    step.model,
                    store.layer_count(),
                    step.layer
                )));
            }
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> PlanManifest {
        let mut blocks: Vec<ManifestBlock> = self
            .block_scales
            .iter()
            .map(|s| ManifestBlock {
                layers: Vec::new(),
                scale: *s,
            })
            .collect();
        for step in &self.steps {
            blocks[step.block].layers.push(ManifestLayer {
                model: step.model.clone(),
                layer: step.layer,
            });
        }
        PlanManifest {
            base_model: self.base_model.clone(),
            depth: self.depth,
            models: self.models,
            repeat: self.repeat,
            blocks,
        }
    }

    pub fn from_manifest(manifest: &PlanManifest) -> Result<Self> {
        let v = manifest.violations();
        if !v.is_empty() {
            return Err(Error::config(v.join("; ")));
        }
        let steps: Vec<PlanStep> = manifest
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(b, block)| {
                block.layers.iter().map(move |l| PlanStep {
                    model: l.model.clone(),
                    layer: l.layer,
                    block: b,
                })
            })
            .collect();
        if steps.is_empty() {
            return Err(Error::Empty("plan manifest has no layers".into()));
        }
        Ok(Self {
            base_model: manifest.base_model.clone(),
            depth: manifest.depth,
            models: manifest.models,
            repeat: manifest.repeat,
            steps,
            block_scales: manifest.blocks.iter().map(|b| b.scale).collect(),
            infeasible: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub model: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestBlock {
    pub layers: Vec<ManifestLayer>,
    pub scale: f64,
}

/// Exported plan document for external inference engines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanManifest {
    pub base_model: String,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "M")]
    pub models: usize,
    #[serde(rename = "R")]
    pub repeat: usize,
    pub blocks: Vec<ManifestBlock>,
}

impl PlanManifest {
    /// Structural checks: block `b` may only use layers `b*D .. (b+1)*D`, each
    /// at most `R` times per model, and base layers are never mixed with
    /// candidate layers.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.depth == 0 || self.models == 0 || self.repeat == 0 {
            out.push("D, M and R must be at least 1".into());
            return out;
        }
        let mut candidates = BTreeSet::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let lo = b * self.depth;
            let mut uses: BTreeMap<(&str, usize), usize> = BTreeMap::new();
            for l in &block.layers {
                if l.layer < lo || l.layer >= lo + self.depth {
                    out.push(format!(
                        "block {b}: layer {} of `{}` outside [{lo}, {}]",
                        l.layer,
                        l.model,
                        lo + self.depth - 1
                    ));
                }
                *uses.entry((l.model.as_str(), l.layer)).or_default() += 1;
                if l.model != self.base_model {
                    candidates.insert(l.model.as_str());
                }
            }
            for ((m, l), n) in &uses {
                if *n > self.repeat {
                    out.push(format!("block {b}: layer {l} of `{m}` used {n} times, R = {}", self.repeat));
                }
            }
            let base = block.layers.iter().filter(|l| l.model == self.base_model).count();
            if base > 0 && base < block.layers.len() {
                out.push(format!("block {b}: mixes base-model layers with candidate layers"));
            }
            if !block.scale.is_finite() || check_scale(block.scale).is_err() {
                out.push(format!("block {b}: scale {} outside [0.5, 1.5]", block.scale));
            }
        }
        if candidates.len() > self.models {
            out.push(format!("{} candidate models referenced, M = {}", candidates.len(), self.models));
        }
        out
    }
}

pub fn export_plan(plan: &AssemblyPlan) -> Result<String> {
    if plan.is_empty() {
        return Err(Error::Empty("cannot export a plan without steps".into()));
    }
    Ok(serde_json::to_string_pretty(&plan.to_manifest())?)
}

pub fn import_plan(text: &str) -> Result<AssemblyPlan> {
    let manifest: PlanManifest = serde_json::from_str(text)?;
    AssemblyPlan::from_manifest(&manifest)
}

/// Realizes a configuration. Blocks without any selected slot keep the base
/// model's own layers. When `stores` is given, every referenced layer is checked.
pub fn build_dis_plan(config: &DisConfig, stores: Option<&BTreeMap<String, WeightStore>>) -> Result<AssemblyPlan> {
    config.validate()?;
    let (d_, r_) = (config.depth, config.repeat);
    let mut steps = Vec::new();
    for (i, block) in config.blocks.iter().enumerate() {
        let active = config.ordered_active_slots(block)?;
        if active.is_empty() {
            steps.extend((0..d_).map(|d| PlanStep {
                model: config.base_model.clone(),
                layer: i * d_ + d,
                block: i,
            }));
        } else {
            steps.extend(active.into_iter().map(|slot| {
                let t = slot / r_;
                PlanStep {
                    model: config.models[t / d_].clone(),
                    layer: i * d_ + t % d_,
                    block: i,
                }
            }));
        }
    }
    let plan = AssemblyPlan {
        base_model: config.base_model.clone(),
        depth: d_,
        models: config.models.len(),
        repeat: r_,
        infeasible: steps.len() > config.max_layers,
        steps,
        block_scales: config.blocks.iter().map(|b| b.scale).collect(),
    };
    if let Some(stores) = stores {
        if !stores.contains_key(&config.base_model) {
            return Err(Error::MissingModel(config.base_model.clone()));
        }
        plan.check_against(stores)?;
    }
    Ok(plan)
}

/// Runs activations through the plan; each block's output is multiplied by its scale.
pub fn execute_plan<F>(plan: &AssemblyPlan, input: &[f64], mut layer_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&str, usize, &[f64]) -> Result<Vec<f64>>,
{
    let mut x = input.to_vec();
    let mut steps = plan.steps.iter().peekable();
    for (b, scale) in plan.block_scales.iter().enumerate() {
        while let Some(step) = steps.next_if(|s| s.block == b) {
            let y = layer_fn(&step.model, step.layer, &x)?;
            if y.len() != x.len() {
                return Err(Error::shape(format!(
                    "layer {} of `{}` returned {} values for a {}-dim activation",
                    step.layer,
                    step.model,
                    y.len(),
                    x.len()
                )));
            }
            x = y;
        }
        x.iter_mut().for_each(|v| *v *= scale);
    }
    if steps.next().is_some() {
        return Err(Error::config("plan steps are not grouped by ascending block"));
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    /// Factorial permutation index per block.
    Index,
    /// One sort key per slot; linear in `M * D * R`.
    Priority,
}

/// Search-space definition for DIS configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct DisSpace {
    pub base_model: String,
    pub models: Vec<String>,
    pub layer_count: usize,
    pub depth: usize,
    pub repeat: usize,
    pub max_layers: usize,
    pub ordering: OrderingMode,
    /// Probability that a random configuration activates a slot.
    pub select_prob: f64,
    perm_total: u128,
}

impl DisSpace {
    pub fn new(
        base_model: impl Into<String>,
        models: Vec<String>,
        layer_count: usize,
        depth: usize,
        repeat: usize,
        max_layers: usize,
        ordering: OrderingMode,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::param("DIS needs at least one candidate model"));
        }
        if depth == 0 || layer_count == 0 || layer_count % depth != 0 {
            return Err(Error::param(format!("layer count {layer_count} is not divisible by D={depth}")));
        }
        let perm_total = permutation_count(depth, models.len(), repeat)?;
        Ok(Self {
            base_model: base_model.into(),
            models,
            layer_count,
            depth,
            repeat,
            max_layers,
            ordering,
            select_prob: 0.5,
            perm_total,
        })
    }

    pub fn with_select_prob(mut self, p: f64) -> Self {
        self.select_prob = p.clamp(0.0, 1.0);
        self
    }

    pub fn blocks(&self) -> usize {
        self.layer_count / self.depth
    }

    pub fn slots(&self) -> usize {
        self.models.len() * self.depth * self.repeat
    }

    fn block_width(&self) -> usize {
        let order = match self.ordering {
            OrderingMode::Index => 1,
            OrderingMode::Priority => self.slots(),
        };
        self.slots() + order + 1
    }

    fn config_from_blocks(&self, blocks: Vec<BlockSpec>) -> DisConfig {
        DisConfig {
            base_model: self.base_model.clone(),
            models: self.models.clone(),
            layer_count: self.layer_count,
            depth: self.depth,
            repeat: self.repeat,
            max_layers: self.max_layers,
            blocks,
        }
    }

    pub fn encode(&self, config: &DisConfig) -> Result<Vec<f64>> {
        if config.blocks.len() != self.blocks() {
            return Err(Error::config("configuration does not match the DIS space"));
        }
        let n = self.slots();
        let mut out = Vec::with_capacity(self.dim());
        for block in &config.blocks {
            if block.selection.len() != n {
                return Err(Error::config("selection length does not match the DIS space"));
            }
            out.extend(block.selection.iter().map(|s| if *s { 1.0 } else { 0.0 }));
            match (&block.ordering, self.ordering) {
                (BlockOrdering::Index(p), OrderingMode::Index) => {
                    out.push((*p as f64 + 0.5) / self.perm_total as f64)
                }
                (BlockOrdering::Priority(v), OrderingMode::Priority) if v.len() == n => out.extend(v),
                _ => return Err(Error::config("block ordering does not match the DIS space")),
            }
            out.push(block.scale);
        }
        Ok(out)
    }

    pub fn decode(&self, x: &[f64]) -> Result<DisConfig> {
        if x.len() != self.dim() {
            return Err(Error::config(format!(
                "encoded DIS vector has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let n = self.slots();
        let blocks = x
            .chunks(self.block_width())
            .map(|c| {
                let selection = c[..n].iter().map(|v| *v >= 0.5).collect();
                let ordering = match self.ordering {
                    OrderingMode::Index => {
                        let f = if c[n].is_nan() { 0.0 } else { c[n].clamp(0.0, 1.0) };
                        let p = (f * self.perm_total as f64).floor() as u128;
                        BlockOrdering::Index(p.min(self.perm_total - 1))
                    }
                    OrderingMode::Priority => {
                        BlockOrdering::Priority(c[n..2 * n].iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect())
                    }
                };
                let s = *c.last().expect("scale slot");
                let scale = if s.is_nan() { 1.0 } else { s.clamp(SCALE_RANGE.0, SCALE_RANGE.1) };
                BlockSpec {
                    selection,
                    ordering,
                    scale,
                }
            })
            .collect();
        Ok(self.config_from_blocks(blocks))
    }

    fn random_ordering<R: Rng + ?Sized>(&self, rng: &mut R) -> BlockOrdering {
        match self.ordering {
            OrderingMode::Index => BlockOrdering::Index(rng.gen_range(0..self.perm_total)),
            OrderingMode::Priority => BlockOrdering::Priority((0..self.slots()).map(|_| rng.gen()).collect()),
        }
    }

    pub fn sample_config<R: Rng + ?Sized>(&self, rng: &mut R) -> DisConfig {
        let blocks = (0..self.blocks())
            .map(|_| BlockSpec {
                selection: (0..self.slots()).map(|_| rng.gen_bool(self.select_prob)).collect(),
                ordering: self.random_ordering(rng),
                scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            })
            .collect();
        self.config_from_blocks(blocks)
    }

    fn identity_ordering(&self) -> BlockOrdering {
        match self.ordering {
            OrderingMode::Index => BlockOrdering::Index(0),
            OrderingMode::Priority => BlockOrdering::Priority(vec![0.0; self.slots()]),
        }
    }

    /// The base model (pure retention) and each candidate's own layer stack.
    pub fn initial_configs(&self) -> Vec<DisConfig> {
        let n = self.slots();
        let mut out = vec![self.config_from_blocks(
            (0..self.blocks())
                .map(|_| BlockSpec {
                    selection: vec![false; n],
                    ordering: self.identity_ordering(),
                    scale: 1.0,
                })
                .collect(),
        )];
        for m in 0..self.models.len() {
            let mut selection = vec![false; n];
            for d in 0..self.depth {
                selection[(m * self.depth + d) * self.repeat] = true;
            }
            out.push(self.config_from_blocks(
                (0..self.blocks())
                    .map(|_| BlockSpec {
                        selection: selection.clone(),
                        ordering: self.identity_ordering(),
                        scale: 1.0,
                    })
                    .collect(),
            ));
        }
        out
    }
}

impl SearchSpace for DisSpace {
    fn kind(&self) -> SpaceKind {
        SpaceKind::Dis
    }

    fn dim(&self) -> usize {
        self.blocks() * self.block_width()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.encode(&self.sample_config(rng)).expect("sampled config encodes")
    }

    fn neighbor(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut config = self.decode(x).expect("vector from this space");
        let b = rng.gen_range(0..config.blocks.len());
        let block = &mut config.blocks[b];
        match rng.gen_range(0..3) {
            0 => {
                let i = rng.gen_range(0..block.selection.len());
                block.selection[i] = !block.selection[i];
            }
            1 => block.ordering = self.random_ordering(rng),
            _ => {
                let sigma = *[0.1, 0.02].choose(rng).expect("non-empty");
                let n = Normal::new(0.0, sigma).expect("positive sigma");
                block.scale = (block.scale + n.sample(rng)).clamp(SCALE_RANGE.0, SCALE_RANGE.1);
            }
        }
        self.encode(&config).expect("mutated config encodes")
    }

    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        match self.decode(x) {
            Ok(c) => self.encode(&c).expect("decoded config encodes"),
            Err(_) => x.to_vec(),
        }
    }

    fn is_feasible(&self, x: &[f64]) -> bool {
        self.decode(x).map(|c| c.is_feasible()).unwrap_or(false)
    }

    fn initial_design(&self) -> Vec<Vec<f64>> {
        self.initial_configs()
            .iter()
            .map(|c| self.encode(c).expect("initial config encodes"))
            .collect()
    }

    fn describe(&self, x: &[f64]) -> Result<serde_json::Value> {
        let config = self.decode(x)?;
        let plan = build_dis_plan(&config, None)?;
        Ok(serde_json::json!({
            "config": config,
            "plan": plan.to_manifest(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(models: usize, layers: usize, depth: usize, repeat: usize, blocks: Vec<BlockSpec>) -> DisConfig {
        DisConfig {
            base_model: "base".into(),
            models: (0..models).map(|m| format!("m{m}")).collect(),
            layer_count: layers,
            depth,
            repeat,
            max_layers: DEFAULT_MAX_LAYERS,
            blocks,
        }
    }

    fn block(bits: &[u8], p: u128, scale: f64) -> BlockSpec {
        BlockSpec {
            selection: bits.iter().map(|b| *b == 1).collect(),
            ordering: BlockOrdering::Index(p),
            scale,
        }
    }

    #[test]
    fn counts() {
        assert_eq!(permutation_count(1, 3, 1).unwrap(), 6);
        assert_eq!(permutation_count(1, 1, 2).unwrap(), 1);
        assert_eq!(permutation_count(2, 2, 1).unwrap(), 24);
        assert_eq!(permutation_count(1, 2, 2).unwrap(), 6);
        assert!(permutation_count(0, 1, 1).is_err());
        assert!(permutation_count(8, 8, 1).is_err());
    }

    #[test]
    fn rank_zero_is_sorted() {
        assert_eq!(unrank_permutation(0, 1, 2, 1).unwrap(), vec![(0, 0), (1, 0)]);
        assert_eq!(unrank_permutation(5, 1, 3, 1).unwrap(), vec![(2, 0), (1, 0), (0, 0)]);
        assert!(unrank_permutation(6, 1, 3, 1).is_err());
    }

    #[test]
    fn rank_rejects_bad_orderings() {
        assert!(rank_permutation(&[(0, 0), (0, 0)], 1, 2, 1).is_err());
        assert!(rank_permutation(&[(0, 0)], 1, 2, 1).is_err());
        assert!(rank_permutation(&[(0, 0), (2, 0)], 1, 2, 1).is_err());
    }

    #[test]
    fn priority_examples() {
        assert_eq!(priority_ordering(&[0.9, 0.1, 0.5], &[true; 3]), vec![0, 2, 1]);
        assert_eq!(priority_ordering(&[0.3, 0.3, 0.3], &[true; 3]), vec![0, 1, 2]);
        assert_eq!(priority_ordering(&[0.3, 0.9, 0.1], &[false, false, true]), vec![2]);
    }

    #[test]
    fn retention_and_ordering() {
        // block 0 retains, block 1 selects m1 then m0 (p = 1), block 2 only m0
        let c = config(2, 3, 1, 1, vec![block(&[0, 0], 0, 1.0), block(&[1, 1], 1, 0.9), block(&[1, 0], 1, 1.1)]);
        let plan = build_dis_plan(&c, None).unwrap();
        let seq: Vec<(&str, usize, usize)> = plan.steps.iter().map(|s| (s.model.as_str(), s.layer, s.block)).collect();
        assert_eq!(seq, vec![("base", 0, 0), ("m1", 1, 1), ("m0", 1, 1), ("m0", 2, 2)]);
        assert_eq!(plan.block_scales, vec![1.0, 0.9, 1.1]);
        assert!(!plan.infeasible);
    }

    #[test]
    fn depth_two_blocks_map_to_consecutive_layers() {
        // D=2, M=1, R=1: slots (m0,d0), (m0,d1); p=1 swaps them
        let c = config(1, 4, 2, 1, vec![block(&[1, 1], 1, 1.0), block(&[0, 1], 0, 1.0)]);
        let plan = build_dis_plan(&c, None).unwrap();
        let seq: Vec<usize> = plan.steps.iter().map(|s| s.layer).collect();
        assert_eq!(seq, vec![1, 0, 3]);
    }

    #[test]
    fn repeats_emit_same_layer_twice() {
        let c = config(1, 1, 1, 2, vec![block(&[1, 1], 0, 1.0)]);
        let plan = build_dis_plan(&c, None).unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.steps.iter().all(|s| s.model == "m0" && s.layer == 0));
    }

    #[test]
    fn layer_cap_flags_infeasible() {
        let c = config(3, 40, 1, 1, (0..40).map(|_| block(&[1, 1, 1], 0, 1.0)).collect());
        let plan = build_dis_plan(&c, None).unwrap();
        assert_eq!(plan.len(), 120);
        assert!(plan.infeasible);
        assert!(!c.is_feasible());
    }

    #[test]
    fn violations() {
        let mut c = config(3, 2, 1, 1, vec![block(&[0, 0, 0], 6, 1.0), block(&[0, 1], 0, 2.0)]);
        let v = c.violations();
        assert!(v.iter().any(|m| m.contains("perm_index 6 >= P = 6")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("selection has 2 bits")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("scale 2")), "{v:?}");
        c.layer_count = 3;
        c.depth = 2;
        assert!(c.violations().iter().any(|m| m.contains("not divisible")));
    }

    #[test]
    fn execute_scales_per_block() {
        let c = config(1, 2, 1, 1, vec![block(&[0], 0, 1.0), block(&[0], 0, 1.0)]);
        // scales beyond the search range are still honoured at execution time
        let plan = AssemblyPlan {
            block_scales: vec![2.0, 3.0],
            ..build_dis_plan(&c, None).unwrap()
        };
        let out = execute_plan(&plan, &[1.0, -2.0], |_, _, x| Ok(x.to_vec())).unwrap();
        assert_eq!(out, vec![6.0, -12.0]);
        let err = execute_plan(&plan, &[1.0], |_, _, _| Ok(vec![0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn manifest_round_trip_and_empty() {
        let c = config(2, 3, 1, 1, vec![block(&[0, 0], 0, 1.0), block(&[1, 1], 1, 0.9), block(&[1, 0], 0, 1.1)]);
        let plan = build_dis_plan(&c, None).unwrap();
        let text = export_plan(&plan).unwrap();
        assert_eq!(import_plan(&text).unwrap(), plan);
        let empty = AssemblyPlan {
            steps: vec![],
            ..plan
        };
        assert!(export_plan(&empty).is_err());
        assert!(import_plan(r#"{"base_model":"b","D":1,"M":1,"R":1,"blocks":[{"layers":[],"scale":1.0}]}"#).is_err());
    }

    #[test]
    fn space_encoding_round_trips() {
        for mode in [OrderingMode::Index, OrderingMode::Priority] {
            let s = DisSpace::new("base", vec!["a".into(), "b".into(), "c".into()], 6, 2, 1, 50, mode).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..50 {
                let c = s.sample_config(&mut rng);
                assert!(c.violations().is_empty(), "{:?}", c.violations());
                let x = s.encode(&c).unwrap();
                assert_eq!(x.len(), s.dim());
                assert_eq!(s.decode(&x).unwrap(), c);
                let y = s.neighbor(&x, &mut rng);
                assert_eq!(s.canonicalize(&y), y);
            }
        }
    }

    #[test]
    fn initial_design_reproduces_sources() {
        let s = DisSpace::new("base", vec!["a".into(), "b".into()], 4, 2, 2, 50, OrderingMode::Index).unwrap();
        let configs = s.initial_configs();
        assert_eq!(configs.len(), 3);
        let plan = build_dis_plan(&configs[0], None).unwrap();
        assert!(plan.steps.iter().enumerate().all(|(i, st)| st.model == "base" && st.layer == i));
        let plan = build_dis_plan(&configs[2], None).unwrap();
        assert!(plan.steps.iter().enumerate().all(|(i, st)| st.model == "b" && st.layer == i));
    }
}
