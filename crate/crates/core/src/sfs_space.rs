//! Scale-factor search: per (layer group, component) weight scales plus one
//! output scale per layer, applied to a single model. Used as an ablation to
//! separate rescaling from genuine layer recombination.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dis_space::{AssemblyPlan, PlanStep};
use crate::error::{Error, Result};
use crate::lfs_space::{assign_layer_groups, CellKey};
use crate::merge_kernels::{check_scale, sfs_scale, SCALE_RANGE};
use crate::space::{SearchSpace, SpaceKind};
use crate::tensor_store::{classify_parameter, TensorRecord, WeightStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfsConfig {
    pub base_model: String,
    pub component_count: usize,
    /// Inclusive layer range per group.
    pub groups: Vec<[usize; 2]>,
    /// Row-major `[group][cell]` weight scales.
    pub weight_scales: Vec<f64>,
    /// One output scale per layer.
    pub output_scales: Vec<f64>,
}

impl SfsConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.component_count != 1 && self.component_count != 3 {
            out.push(format!("component_count must be 1 or 3, got {}", self.component_count));
        }
        let cells = CellKey::for_components(self.component_count).len();
        if self.weight_scales.len() != self.groups.len() * cells {
            out.push(format!(
                "{} weight scales, expected {}",
                self.weight_scales.len(),
                self.groups.len() * cells
            ));
        }
        let mut next = 0;
        for (g, [first, last]) in self.groups.iter().enumerate() {
            if *first != next || last < first {
                out.push(format!("group {g} range [{first}, {last}] does not continue at layer {next}"));
            }
            next = last.saturating_add(1);
        }
        if next != self.output_scales.len() {
            out.push(format!("groups cover {next} layers, {} output scales given", self.output_scales.len()));
        }
        for (i, s) in self.weight_scales.iter().enumerate() {
            if check_scale(*s).is_err() {
                out.push(format!("weight scale {i} = {s} outside [0.5, 1.5]"));
            }
        }
        for (i, s) in self.output_scales.iter().enumerate() {
            if check_scale(*s).is_err() {
                out.push(format!("output scale of layer {i} = {s} outside [0.5, 1.5]"));
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

    fn weight_scale_for(&self, name: &str) -> f64 {
        let (layer, class) = classify_parameter(name);
        let Some(layer) = layer else { return 1.0 };
        let cells = CellKey::for_components(self.component_count);
        let key = CellKey::for_class(class, self.component_count);
        let g = self
            .groups
            .iter()
            .position(|[a, b]| *a <= layer && layer <= *b)
            .expect("validated coverage");
        let c = cells.iter().position(|k| *k == key).expect("known cell");
        self.weight_scales[g * cells.len() + c]
    }
}

/// Scales the base store's layer weights and returns it with an identity plan
/// carrying the per-layer output scales. Global tensors are left untouched.
pub fn build_sfs_model(config: &SfsConfig, stores: &BTreeMap<String, WeightStore>) -> Result<(WeightStore, AssemblyPlan)> {
    config.validate()?;
    let base = stores
        .get(&config.base_model)
        .ok_or_else(|| Error::MissingModel(config.base_model.clone()))?;
    if base.layer_count() != config.output_scales.len() {
        return Err(Error::config(format!(
            "model `{}` has {} layers, configuration covers {}",
            config.base_model,
            base.layer_count(),
            config.output_scales.len()
        )));
    }
    let scaled: Result<Vec<TensorRecord>> = base
        .tensors()
        .map(|r| {
            let out = sfs_scale(&r.to_f32(), config.weight_scale_for(r.name()))?;
            TensorRecord::from_f32(r.name(), r.dtype(), r.shape().to_vec(), &out)
        })
        .collect();
    let store = WeightStore::new(base.model_id(), scaled?)?;
    let plan = AssemblyPlan {
        base_model: config.base_model.clone(),
        depth: 1,
        models: 1,
        repeat: 1,
        steps: (0..base.layer_count())
            .map(|l| PlanStep {
                model: config.base_model.clone(),
                layer: l,
                block: l,
            })
            .collect(),
        block_scales: config.output_scales.clone(),
        infeasible: false,
    };
    Ok((store, plan))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfsSpace {
    pub base_model: String,
    pub layer_count: usize,
    pub groups: usize,
    pub components: usize,
    ranges: Vec<[usize; 2]>,
}

impl SfsSpace {
    pub fn new(base_model: impl Into<String>, layer_count: usize, groups: usize, components: usize) -> Result<Self> {
        if components != 1 && components != 3 {
            return Err(Error::param(format!("components must be 1 or 3, got {components}")));
        }
        let ranges = assign_layer_groups(layer_count, groups)?
            .into_iter()
            .map(|r| [*r.start(), *r.end()])
            .collect();
        Ok(Self {
            base_model: base_model.into(),
            layer_count,
            groups,
            components,
            ranges,
        })
    }

    fn weight_len(&self) -> usize {
        self.groups * CellKey::for_components(self.components).len()
    }

    pub fn encode(&self, config: &SfsConfig) -> Result<Vec<f64>> {
        if config.weight_scales.len() != self.weight_len() || config.output_scales.len() != self.layer_count {
            return Err(Error::config("configuration does not match the SFS space"));
        }
        Ok(config.weight_scales.iter().chain(&config.output_scales).copied().collect())
    }

    pub fn decode(&self, x: &[f64]) -> Result<SfsConfig> {
        if x.len() != self.dim() {
            return Err(Error::config(format!(
                "encoded SFS vector has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let clamp = |v: &f64| if v.is_nan() { 1.0 } else { v.clamp(SCALE_RANGE.0, SCALE_RANGE.1) };
        let (w, o) = x.split_at(self.weight_len());
        Ok(SfsConfig {
            base_model: self.base_model.clone(),
            component_count: self.components,
            groups: self.ranges.clone(),
            weight_scales: w.iter().map(clamp).collect(),
            output_scales: o.iter().map(clamp).collect(),
        })
    }
}

impl SearchSpace for SfsSpace {
    fn kind(&self) -> SpaceKind {
        SpaceKind::Sfs
    }

    fn dim(&self) -> usize {
        self.weight_len() + self.layer_count
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1)).collect()
    }

    fn neighbor(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut y = self.canonicalize(x);
        let i = rng.gen_range(0..y.len());
        let n = Normal::new(0.0, 0.1).expect("positive sigma");
        y[i] = (y[i] + n.sample(rng)).clamp(SCALE_RANGE.0, SCALE_RANGE.1);
        y
    }

    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        match self.decode(x) {
            Ok(c) => self.encode(&c).expect("decoded config encodes"),
            Err(_) => x.to_vec(),
        }
    }

    fn initial_design(&self) -> Vec<Vec<f64>> {
        vec![vec![1.0; self.dim()]]
    }

    fn describe(&self, x: &[f64]) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.decode(x)?)?)
    }
}
