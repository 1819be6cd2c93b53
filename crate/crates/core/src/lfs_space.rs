//! Layer-wise fusion search: per (layer group, component) cells that choose a
//! merging method, its hyperparameters and the source models.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge_kernels::{MergeMethod, MethodKind, TIES_K_RANGE};
use crate::space::SearchSpace;
use crate::tensor_store::{classify_parameter, ComponentClass, TensorRecord, WeightStore};

/// Cell key inside a layer group. `Layer` is the single key used when C = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKey {
    Mlp,
    Att,
    Other,
    Layer,
}

impl CellKey {
    pub fn for_components(components: usize) -> &'static [CellKey] {
        if components == 1 {
            &[CellKey::Layer]
        } else {
            &[CellKey::Mlp, CellKey::Att, CellKey::Other]
        }
    }

    pub fn for_class(class: ComponentClass, components: usize) -> CellKey {
        if components == 1 {
            return CellKey::Layer;
        }
        match class {
            ComponentClass::Mlp => CellKey::Mlp,
            ComponentClass::Att => CellKey::Att,
            ComponentClass::Norm | ComponentClass::Global => CellKey::Other,
        }
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKey::Mlp => "mlp",
            CellKey::Att => "att",
            CellKey::Other => "other",
            CellKey::Layer => "layer",
        })
    }
}

/// Splits `layer_count` layers into `groups` consecutive ranges whose sizes differ
/// by at most one; the earlier groups absorb the remainder.
pub fn assign_layer_groups(layer_count: usize, groups: usize) -> Result<Vec<RangeInclusive<usize>>> {
    if groups == 0 || groups > layer_count {
        return Err(Error::param(format!(
            "cannot split {layer_count} layers into {groups} groups"
        )));
    }
    let (size, rem) = (layer_count / groups, layer_count % groups);
    let mut start = 0;
    Ok((0..groups)
        .map(|g| {
            let len = size + usize::from(g < rem);
            let range = start..=start + len - 1;
            start += len;
            range
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CellDoc", into = "CellDoc")]
pub struct CellSpec {
    pub method: MergeMethod,
    pub sources: Vec<String>,
}

impl CellSpec {
    pub fn new(method: MergeMethod, sources: Vec<impl Into<String>>) -> Self {
        Self {
            method,
            sources: sources.into_iter().map(Into::into).collect(),
        }
    }

    pub fn violations(&self, base_model: &str) -> Vec<String> {
        let mut out = self.method.violations();
        if self.sources.is_empty() {
            out.push("sources are empty".into());
        }
        let unique: BTreeSet<&String> = self.sources.iter().collect();
        if unique.len() != self.sources.len() {
            out.push("sources contain duplicates".into());
        }
        match &self.method {
            MergeMethod::Slerp { .. } if self.sources.len() != 2 => {
                out.push(format!("slerp needs exactly 2 sources, got {}", self.sources.len()))
            }
            MergeMethod::Linear { weights } if weights.len() != self.sources.len() => out.push(format!(
                "linear has {} weights for {} sources",
                weights.len(),
                self.sources.len()
            )),
            m if m.kind().uses_task_vectors() && self.sources.iter().any(|s| s == base_model) => {
                out.push(format!("{} sources must not include the base model", m.kind()))
            }
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    method: String,
    params: ParamsDoc,
    sources: Vec<String>,
}

impl From<CellSpec> for CellDoc {
    fn from(cell: CellSpec) -> Self {
        let mut params = ParamsDoc::default();
        match cell.method {
            MergeMethod::TaskArithmetic { lambda } => params.lambda = Some(lambda),
            MergeMethod::Ties { lambda, k } => {
                params.lambda = Some(lambda);
                params.k = Some(k);
            }
            MergeMethod::Slerp { t } => params.t = Some(t),
            MergeMethod::Linear { ref weights } => params.weights = Some(weights.clone()),
        }
        CellDoc {
            method: cell.method.kind().name().to_string(),
            params,
            sources: cell.sources,
        }
    }
}

impl TryFrom<CellDoc> for CellSpec {
    type Error = String;

    fn try_from(doc: CellDoc) -> std::result::Result<Self, String> {
        let kind = MethodKind::parse(&doc.method).ok_or_else(|| format!("unknown method `{}`", doc.method))?;
        let p = doc.params;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("{kind} requires param `{name}`"));
        let method = match kind {
            MethodKind::TaskArithmetic => MergeMethod::TaskArithmetic {
                lambda: need(p.lambda, "lambda")?,
            },
            MethodKind::Ties => MergeMethod::Ties {
                lambda: need(p.lambda, "lambda")?,
                k: need(p.k, "k")?,
            },
            MethodKind::Slerp => MergeMethod::Slerp { t: need(p.t, "t")? },
            MethodKind::Linear => MergeMethod::Linear {
                weights: p.weights.ok_or("linear requires param `weights`")?,
            },
        };
        Ok(CellSpec {
            method,
            sources: doc.sources,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGroup {
    /// Inclusive layer range `[first, last]`.
    pub range: [usize; 2],
    pub cells: BTreeMap<CellKey, CellSpec>,
}

impl LayerGroup {
    fn contains(&self, layer: usize) -> bool {
        self.range[0] <= layer && layer <= self.range[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfsRecipe {
    pub base_model: String,
    pub component_count: usize,
    pub groups: Vec<LayerGroup>,
    /// Settings for tensors outside any layer; defaults to group 0's `other` cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub globals: Option<CellSpec>,
}

impl LfsRecipe {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every violated invariant. `layer_count`, when known, pins the covered range.
    pub fn violations(&self, layer_count: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if self.component_count != 1 && self.component_count != 3 {
            out.push(format!("component_count must be 1 or 3, got {}", self.component_count));
        }
        if self.groups.is_empty() {
            out.push("recipe has no layer groups".into());
        }
        let mut next = 0usize;
        for (g, group) in self.groups.iter().enumerate() {
            let [first, last] = group.range;
            if first != next || last < first {
                out.push(format!("group {g} range [{first}, {last}] does not continue at layer {next}"));
            }
            next = last.saturating_add(1);
            let expected: BTreeSet<CellKey> = CellKey::for_components(self.component_count).iter().copied().collect();
            let present: BTreeSet<CellKey> = group.cells.keys().copied().collect();
            if expected != present {
                out.push(format!("group {g} cells {present:?} do not match {expected:?}"));
            }
            for (key, cell) in &group.cells {
                out.extend(
                    cell.violations(&self.base_model)
                        .into_iter()
                        .map(|v| format!("group {g} cell {key:?}: {v}")),
                );
            }
        }
        if let Some(cell) = &self.globals {
            out.extend(cell.violations(&self.base_model).into_iter().map(|v| format!("globals: {v}")));
        }
        if let Some(l) = layer_count {
            if !self.groups.is_empty() && next != l {
                out.push(format!("groups cover {next} layers, model has {l}"));
            }
        }
        out
    }

    pub fn validate(&self, layer_count: Option<usize>) -> Result<()> {
        let v = self.violations(layer_count);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }

    /// Every model id the recipe reads, base first.
    pub fn referenced_models(&self) -> Vec<String> {
        let mut ids = vec![self.base_model.clone()];
        let cells = self.groups.iter().flat_map(|g| g.cells.values()).chain(self.globals.iter());
        for cell in cells {
            for s in &cell.sources {
                if !ids.contains(s) {
                    ids.push(s.clone());
                }
            }
        }
        ids
    }

    fn cell_for(&self, name: &str) -> Option<&CellSpec> {
        let (layer, class) = classify_parameter(name);
        match layer {
            Some(layer) => self
                .groups
                .iter()
                .find(|g| g.contains(layer))
                .and_then(|g| g.cells.get(&CellKey::for_class(class, self.component_count))),
            None => self.globals.as_ref().or_else(|| {
                self.groups
                    .first()
                    .and_then(|g| g.cells.get(&CellKey::for_class(ComponentClass::Global, self.component_count)))
            }),
        }
    }
}

/// Materializes a recipe into a merged store with the base store's names, shapes and dtypes.
pub fn build_lfs_model(recipe: &LfsRecipe, stores: &BTreeMap<String, WeightStore>) -> Result<WeightStore> {
    let base = stores
        .get(&recipe.base_model)
        .ok_or_else(|| Error::MissingModel(recipe.base_model.clone()))?;
    recipe.validate(Some(base.layer_count()))?;
    for id in recipe.referenced_models() {
        let store = stores.get(&id).ok_or_else(|| Error::MissingModel(id.clone()))?;
        if !store.same_architecture(base) {
            return Err(Error::shape(format!(
                "model `{id}` does not match the architecture of `{}`",
                recipe.base_model
            )));
        }
    }

    let names: Vec<&TensorRecord> = base.tensors().collect();
    let merged: Result<Vec<TensorRecord>> = names
        .par_iter()
        .map(|record| {
            let cell = recipe
                .cell_for(record.name())
                .ok_or_else(|| Error::config(format!("no cell covers tensor `{}`", record.name())))?;
            let base_values = record.to_f32();
            let source_values: Vec<Vec<f32>> = cell
                .sources
                .iter()
                .map(|s| stores[s].get(record.name()).expect("architecture checked").to_f32())
                .collect();
            let refs: Vec<&[f32]> = source_values.iter().map(Vec::as_slice).collect();
            let out = cell.method.apply(&base_values, &refs)?;
            TensorRecord::from_f32(record.name(), record.dtype(), record.shape().to_vec(), &out)
        })
        .collect();
    WeightStore::new(base.model_id(), merged?)
}

/// Search-space definition for LFS recipes and their fixed-length encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LfsSpace {
    pub base_model: String,
    pub candidates: Vec<String>,
    pub layer_count: usize,
    pub groups: usize,
    pub components: usize,
    pub methods: Vec<MethodKind>,
    ranges: Vec<RangeInclusive<usize>>,
}

impl LfsSpace {
    pub fn new(
        base_model: impl Into<String>,
        candidates: Vec<String>,
        layer_count: usize,
        groups: usize,
        components: usize,
        methods: Vec<MethodKind>,
    ) -> Result<Self> {
        let base_model = base_model.into();
        if components != 1 && components != 3 {
            return Err(Error::param(format!("components must be 1 or 3, got {components}")));
        }
        let candidates: Vec<String> = candidates.into_iter().filter(|c| *c != base_model).collect();
        if candidates.is_empty() {
            return Err(Error::param("LFS needs at least one candidate model besides the base"));
        }
        let mut seen = BTreeSet::new();
        if !candidates.iter().all(|c| seen.insert(c)) {
            return Err(Error::param("duplicate candidate model ids"));
        }
        let mut methods = methods;
        methods.sort();
        methods.dedup();
        if methods.is_empty() {
            return Err(Error::param("no merging methods enabled"));
        }
        let ranges = assign_layer_groups(layer_count, groups)?;
        Ok(Self {
            base_model,
            candidates,
            layer_count,
            groups,
            components,
            methods,
            ranges,
        })
    }

    fn cells_per_group(&self) -> usize {
        CellKey::for_components(self.components).len()
    }

    fn hyper_len(&self, kind: MethodKind) -> usize {
        match kind {
            MethodKind::TaskArithmetic | MethodKind::Slerp => 1,
            MethodKind::Ties => 2,
            MethodKind::Linear => self.candidates.len(),
        }
    }

    /// Width of one encoded cell: method one-hot, hyperparameter slots, source mask.
    pub fn cell_width(&self) -> usize {
        self.methods.len()
            + self.methods.iter().map(|m| self.hyper_len(*m)).sum::<usize>()
            + self.candidates.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.groups * self.cells_per_group() * self.cell_width()
    }

    fn hyper_offset(&self, kind: MethodKind) -> usize {
        self.methods.len()
            + self
                .methods
                .iter()
                .take_while(|m| **m != kind)
                .map(|m| self.hyper_len(*m))
                .sum::<usize>()
    }

    fn mask_offset(&self) -> usize {
        self.cell_width() - self.candidates.len()
    }

    fn sampleable_methods(&self) -> Vec<MethodKind> {
        self.methods
            .iter()
            .copied()
            .filter(|m| *m != MethodKind::Slerp || self.candidates.len() >= 2)
            .collect()
    }

    fn recipe_from_cells(&self, mut cells: Vec<CellSpec>) -> LfsRecipe {
        let keys = CellKey::for_components(self.components);
        let groups = self
            .ranges
            .iter()
            .map(|r| LayerGroup {
                range: [*r.start(), *r.end()],
                cells: keys.iter().map(|k| (*k, cells.remove(0))).collect(),
            })
            .collect();
        LfsRecipe {
            base_model: self.base_model.clone(),
            component_count: self.components,
            groups,
            globals: None,
        }
    }

    fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> CellSpec {
        let methods = self.sampleable_methods();
        let kind = *methods.choose(rng).expect("at least one sampleable method");
        self.sample_cell_of(kind, rng)
    }

    fn sample_cell_of<R: Rng + ?Sized>(&self, kind: MethodKind, rng: &mut R) -> CellSpec {
        let n = self.candidates.len();
        let mut idx: Vec<usize> = if kind == MethodKind::Slerp {
            rand::seq::index::sample(rng, n, 2).into_vec()
        } else {
            loop {
                let picked: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
                if !picked.is_empty() {
                    break picked;
                }
            }
        };
        idx.sort_unstable();
        let method = match kind {
            MethodKind::TaskArithmetic => MergeMethod::TaskArithmetic { lambda: rng.gen() },
            MethodKind::Ties => MergeMethod::Ties {
                lambda: rng.gen(),
                k: rng.gen_range(TIES_K_RANGE.0..=TIES_K_RANGE.1),
            },
            MethodKind::Slerp => MergeMethod::Slerp { t: rng.gen() },
            MethodKind::Linear => {
                let raw: Vec<f64> = idx.iter().map(|_| Exp1.sample(rng)).collect();
                let sum: f64 = raw.iter().sum();
                MergeMethod::Linear {
                    weights: raw.iter().map(|w| w / sum).collect(),
                }
            }
        };
        CellSpec {
            method,
            sources: idx.iter().map(|i| self.candidates[*i].clone()).collect(),
        }
    }

    /// Draws a uniformly random valid recipe.
    pub fn sample_recipe<R: Rng + ?Sized>(&self, rng: &mut R) -> LfsRecipe {
        let cells = (0..self.groups * self.cells_per_group())
            .map(|_| self.sample_cell(rng))
            .collect();
        self.recipe_from_cells(cells)
    }

    /// Encodes a recipe produced for this space. Sources are canonicalized to
    /// candidate order; a reversed slerp pair is stored as `t -> 1 - t`.
    pub fn encode(&self, recipe: &LfsRecipe) -> Result<Vec<f64>> {
        if recipe.groups.len() != self.groups || recipe.component_count != self.components {
            return Err(Error::config("recipe shape does not match the LFS space"));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        for group in &recipe.groups {
            for key in CellKey::for_components(self.components) {
                let cell = group
                    .cells
                    .get(key)
                    .ok_or_else(|| Error::config(format!("missing cell {key:?}")))?;
                out.extend(self.encode_cell(cell)?);
            }
        }
        Ok(out)
    }

    fn encode_cell(&self, cell: &CellSpec) -> Result<Vec<f64>> {
        let kind = cell.method.kind();
        let m = self
            .methods
            .iter()
            .position(|k| *k == kind)
            .ok_or_else(|| Error::config(format!("method {kind} is not enabled in this space")))?;
        let mut v = vec![0.0; self.cell_width()];
        v[m] = 1.0;
        for method in &self.methods {
            let off = self.hyper_offset(*method);
            match method {
                MethodKind::TaskArithmetic | MethodKind::Slerp => v[off] = 0.5,
                MethodKind::Ties => {
                    v[off] = 0.5;
                    v[off + 1] = (TIES_K_RANGE.0 + TIES_K_RANGE.1) / 2.0;
                }
                MethodKind::Linear => v[off..off + self.candidates.len()].fill(0.5),
            }
        }
        let positions: Vec<usize> = cell
            .sources
            .iter()
            .map(|s| {
                self.candidates
                    .iter()
                    .position(|c| c == s)
                    .ok_or_else(|| Error::config(format!("source `{s}` is not a candidate of this space")))
            })
            .collect::<Result<_>>()?;
        let mask = self.mask_offset();
        for p in &positions {
            v[mask + p] = 1.0;
        }
        let off = self.hyper_offset(kind);
        match &cell.method {
            MergeMethod::TaskArithmetic { lambda } => v[off] = *lambda,
            MergeMethod::Ties { lambda, k } => {
                v[off] = *lambda;
                v[off + 1] = *k;
            }
            MergeMethod::Slerp { t } => {
                v[off] = if positions.len() == 2 && positions[0] > positions[1] { 1.0 - t } else { *t };
            }
            MergeMethod::Linear { weights } => {
                for (p, w) in positions.iter().zip(weights) {
                    v[off + p] = *w;
                }
            }
        }
        Ok(v)
    }

    /// Decodes any vector of the right length into the nearest valid recipe.
    pub fn decode(&self, x: &[f64]) -> Result<LfsRecipe> {
        if x.len() != self.encoded_len() {
            return Err(Error::config(format!(
                "encoded LFS vector has length {}, expected {}",
                x.len(),
                self.encoded_len()
            )));
        }
        let cells = x.chunks(self.cell_width()).map(|c| self.decode_cell(c)).collect();
        Ok(self.recipe_from_cells(cells))
    }

    fn decode_cell(&self, v: &[f64]) -> CellSpec {
        let sampleable = self.sampleable_methods();
        let kind = self
            .methods
            .iter()
            .enumerate()
            .filter(|(_, k)| sampleable.contains(k))
            .fold(None::<(usize, f64)>, |best, (i, _)| match best {
                Some((_, bv)) if bv >= v[i] => best,
                _ => Some((i, v[i])),
            })
            .map(|(i, _)| self.methods[i])
            .expect("at least one sampleable method");
        let n = self.candidates.len();
        let mask = &v[self.mask_offset()..];
        let mut idx: Vec<usize> = if kind == MethodKind::Slerp {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| mask[*b].total_cmp(&mask[*a]).then(a.cmp(b)));
            order.truncate(2);
            order
        } else {
            let on: Vec<usize> = (0..n).filter(|i| mask[*i] >= 0.5).collect();
            if on.is_empty() {
                vec![(0..n).fold(0, |best, i| if mask[i] > mask[best] { i } else { best })]
            } else {
                on
            }
        };
        idx.sort_unstable();
        let off = self.hyper_offset(kind);
        let unit = |x: f64| if x.is_nan() { 0.5 } else { x.clamp(0.0, 1.0) };
        let method = match kind {
            MethodKind::TaskArithmetic => MergeMethod::TaskArithmetic { lambda: unit(v[off]) },
            MethodKind::Ties => MergeMethod::Ties {
                lambda: unit(v[off]),
                k: if v[off + 1].is_nan() {
                    0.545
                } else {
                    v[off + 1].clamp(TIES_K_RANGE.0, TIES_K_RANGE.1)
                },
            },
            MethodKind::Slerp => MergeMethod::Slerp { t: unit(v[off]) },
            MethodKind::Linear => {
                let mut weights: Vec<f64> = idx.iter().map(|i| unit(v[off + i])).collect();
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > crate::merge_kernels::WEIGHT_SUM_TOLERANCE {
                    if sum > 0.0 {
                        weights.iter_mut().for_each(|w| *w /= sum);
                    } else {
                        let u = 1.0 / weights.len() as f64;
                        weights.iter_mut().for_each(|w| *w = u);
                    }
                }
                MergeMethod::Linear { weights }
            }
        };
        CellSpec {
            method,
            sources: idx.iter().map(|i| self.candidates[*i].clone()).collect(),
        }
    }

    fn identity_cell(&self, kind: MethodKind, source: Option<usize>) -> Option<CellSpec> {
        match (kind, source) {
            (MethodKind::TaskArithmetic, None) => Some(CellSpec {
                method: MergeMethod::TaskArithmetic { lambda: 0.0 },
                sources: self.candidates.clone(),
            }),
            (MethodKind::Linear, Some(i)) => Some(CellSpec {
                method: MergeMethod::Linear { weights: vec![1.0] },
                sources: vec![self.candidates[i].clone()],
            }),
            (MethodKind::TaskArithmetic, Some(i)) => Some(CellSpec {
                method: MergeMethod::TaskArithmetic { lambda: 1.0 },
                sources: vec![self.candidates[i].clone()],
            }),
            _ => None,
        }
    }

    /// Recipes reproducing the base model and each candidate, where the enabled
    /// methods can express them.
    pub fn initial_recipes(&self) -> Vec<LfsRecipe> {
        let n_cells = self.groups * self.cells_per_group();
        let mut out = Vec::new();
        if let Some(cell) = self.methods.contains(&MethodKind::TaskArithmetic).then(|| self.identity_cell(MethodKind::TaskArithmetic, None)).flatten() {
            out.push(self.recipe_from_cells(vec![cell; n_cells]));
        }
        for i in 0..self.candidates.len() {
            let cell = [MethodKind::Linear, MethodKind::TaskArithmetic]
                .into_iter()
                .filter(|k| self.methods.contains(k))
                .find_map(|k| self.identity_cell(k, Some(i)));
            if let Some(cell) = cell {
                out.push(self.recipe_from_cells(vec![cell; n_cells]));
            }
        }
        out
    }

    fn mutate_cell<R: Rng + ?Sized>(&self, cell: &CellSpec, rng: &mut R) -> CellSpec {
        let roll: f64 = rng.gen();
        if roll < 0.2 {
            return self.sample_cell(rng);
        }
        if roll < 0.4 {
            // toggle one candidate in or out, keeping the method's arity valid
            let mut v = self.encode_cell(cell).expect("cell from this space");
            let mask = self.mask_offset();
            let i = rng.gen_range(0..self.candidates.len());
            if cell.method.kind() == MethodKind::Slerp {
                let on: Vec<usize> = (0..self.candidates.len()).filter(|j| v[mask + j] >= 0.5).collect();
                if !on.contains(&i) {
                    let drop = *on.choose(rng).expect("two slerp sources");
                    v[mask + drop] = 0.0;
                    v[mask + i] = 1.0;
                }
            } else {
                v[mask + i] = if v[mask + i] >= 0.5 { 0.0 } else { 1.0 };
                if let MethodKind::Linear = cell.method.kind() {
                    let off = self.hyper_offset(MethodKind::Linear);
                    if v[mask + i] >= 0.5 {
                        v[off + i] = rng.gen_range(0.0..0.5);
                    }
                    let active: Vec<usize> = (0..self.candidates.len()).filter(|j| v[mask + j] >= 0.5).collect();
                    let sum: f64 = active.iter().map(|j| v[off + j]).sum();
                    if sum > 0.0 {
                        active.iter().for_each(|j| v[off + j] /= sum);
                    }
                }
            }
            return self.decode_cell(&v);
        }
        let scale = [0.1, 0.02, 0.004][rng.gen_range(0..3)];
        let mut jitter = |x: f64, lo: f64, hi: f64| {
            let n = Normal::new(0.0, scale * (hi - lo)).expect("positive sigma");
            (x + n.sample(rng)).clamp(lo, hi)
        };
        let method = match &cell.method {
            MergeMethod::TaskArithmetic { lambda } => MergeMethod::TaskArithmetic {
                lambda: jitter(*lambda, 0.0, 1.0),
            },
            MergeMethod::Ties { lambda, k } => MergeMethod::Ties {
                lambda: jitter(*lambda, 0.0, 1.0),
                k: jitter(*k, TIES_K_RANGE.0, TIES_K_RANGE.1),
            },
            MergeMethod::Slerp { t } => MergeMethod::Slerp { t: jitter(*t, 0.0, 1.0) },
            MergeMethod::Linear { weights } => {
                let raw: Vec<f64> = weights.iter().map(|w| jitter(*w, 0.0, 1.0)).collect();
                let sum: f64 = raw.iter().sum();
                let weights = if sum > 0.0 {
                    raw.iter().map(|w| w / sum).collect()
                } else {
                    vec![1.0 / raw.len() as f64; raw.len()]
                };
                MergeMethod::Linear { weights }
            }
        };
        CellSpec {
            method,
            sources: cell.sources.clone(),
        }
    }
}

impl SearchSpace for LfsSpace {
    fn kind(&self) -> crate::space::SpaceKind {
        crate::space::SpaceKind::Lfs
    }

    fn dim(&self) -> usize {
        self.encoded_len()
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let recipe = self.sample_recipe(rng);
        self.encode(&recipe).expect("sampled recipe encodes")
    }

    fn neighbor(&self, x: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let recipe = self.decode(x).expect("vector from this space");
        let mut cells: Vec<CellSpec> = recipe
            .groups
            .iter()
            .flat_map(|g| CellKey::for_components(self.components).iter().map(move |k| g.cells[k].clone()))
            .collect();
        let changes = if rng.gen_bool(0.3) { 2 } else { 1 };
        for _ in 0..changes {
            let i = rng.gen_range(0..cells.len());
            cells[i] = self.mutate_cell(&cells[i], rng);
        }
        self.encode(&self.recipe_from_cells(cells)).expect("mutated recipe encodes")
    }

    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        match self.decode(x) {
            Ok(r) => self.encode(&r).expect("decoded recipe encodes"),
            Err(_) => x.to_vec(),
        }
    }

    fn initial_design(&self) -> Vec<Vec<f64>> {
        self.initial_recipes()
            .iter()
            .map(|r| self.encode(r).expect("initial recipe encodes"))
            .collect()
    }

    fn describe(&self, x: &[f64]) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.decode(x)?)?)
    }
}
