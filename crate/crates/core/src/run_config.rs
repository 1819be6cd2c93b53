//! Search run configuration document.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dis_space::{DisSpace, OrderingMode, DEFAULT_MAX_LAYERS};
use crate::error::{Error, Result};
use crate::evaluator::{Backend, ExternalCommand, FamilyParams, MergeSpace, SyntheticFamily, BASE_MODEL, MEAN_TASK};
use crate::lfs_space::LfsSpace;
use crate::merge_kernels::MethodKind;
use crate::mf_optimizer::{make_schedule_with, BracketSizing, BudgetSchedule, SearchOptions};
use crate::objectives::{DEFAULT_LATTICE_GRANULARITY, DEFAULT_RHO};
use crate::sfs_space::SfsSpace;
use crate::space::SpaceKind;
use crate::tensor_store::{load_store_as, WeightStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfsParams {
    pub groups: usize,
    pub components: usize,
    pub methods: Vec<MethodKind>,
}

impl Default for LfsParams {
    fn default() -> Self {
        Self {
            groups: 4,
            components: 3,
            methods: MethodKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisParams {
    pub depth: usize,
    pub repeat: usize,
    pub max_layers: usize,
    pub ordering: OrderingMode,
    pub select_prob: f64,
}

impl Default for DisParams {
    fn default() -> Self {
        Self {
            depth: 1,
            repeat: 1,
            max_layers: DEFAULT_MAX_LAYERS,
            ordering: OrderingMode::Index,
            select_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfsParams {
    pub groups: usize,
    pub components: usize,
}

impl Default for SfsParams {
    fn default() -> Self {
        Self { groups: 4, components: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub b_min: u64,
    pub b_max: u64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub sizing: BracketSizing,
}

fn default_eta() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveParams {
    /// Task ids; one cost per task. Empty means a single unnamed objective.
    pub tasks: Vec<String>,
    pub s_lambda: usize,
    pub rho: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            s_lambda: DEFAULT_LATTICE_GRANULARITY,
            rho: DEFAULT_RHO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Synthetic {
        layers: usize,
        dim: usize,
        models: usize,
        #[serde(default)]
        seed: u64,
        /// Defaults to `b_max`.
        #[serde(default)]
        probes: Option<usize>,
        #[serde(default)]
        delta_scale: Option<f64>,
    },
    External {
        program: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        keep_artifacts: bool,
    },
}

fn default_timeout() -> u64 {
    crate::evaluator::DEFAULT_TIMEOUT.as_secs()
}

fn default_t_max() -> usize {
    500
}

fn default_plateau() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceKind,
    #[serde(default)]
    pub lfs: LfsParams,
    #[serde(default)]
    pub dis: DisParams,
    #[serde(default)]
    pub sfs: SfsParams,
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub objectives: ObjectiveParams,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub seed: u64,
    /// Parallel evaluations; absent means every core.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub max_brackets: Option<usize>,
    #[serde(default = "default_plateau")]
    pub plateau_window: usize,
    pub evaluator: EvaluatorSpec,
    /// Base model id; `base` for synthetic runs.
    #[serde(default)]
    pub base_model: Option<String>,
    /// Candidate ids; defaults to every model except the base.
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    /// Weight files by model id (external evaluator only).
    #[serde(default)]
    pub models: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn objective_count(&self) -> usize {
        self.objectives.tasks.len().max(1)
    }

    pub fn base_model_id(&self) -> String {
        match (&self.base_model, &self.evaluator) {
            (Some(b), _) => b.clone(),
            (None, EvaluatorSpec::Synthetic { .. }) => BASE_MODEL.to_string(),
            (None, EvaluatorSpec::External { .. }) => String::new(),
        }
    }

    /// Checks that need no model files.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.space == SpaceKind::Grid {
            out.push("space must be one of lfs, dis, sfs".into());
        }
        if self.t_max == 0 {
            out.push("t_max must be at least 1".into());
        }
        if let Err(e) = self.schedule() {
            out.push(e.to_string());
        }
        if self.objectives.s_lambda == 0 {
            out.push("objectives.s_lambda must be at least 1".into());
        }
        if !(self.objectives.rho > 0.0) || !self.objectives.rho.is_finite() {
            out.push("objectives.rho must be a positive number".into());
        }
        if self.workers == Some(0) {
            out.push("workers must be at least 1".into());
        }
        match self.space {
            SpaceKind::Lfs => {
                if self.lfs.components != 1 && self.lfs.components != 3 {
                    out.push(format!("lfs.components must be 1 or 3, got {}", self.lfs.components));
                }
                if self.lfs.groups == 0 {
                    out.push("lfs.groups must be at least 1".into());
                }
                if self.lfs.methods.is_empty() {
                    out.push("lfs.methods must enable at least one method".into());
                }
            }
            SpaceKind::Dis => {
                if self.dis.depth == 0 || self.dis.repeat == 0 || self.dis.max_layers == 0 {
                    out.push("dis.depth, dis.repeat and dis.max_layers must be at least 1".into());
                }
                if !(0.0..=1.0).contains(&self.dis.select_prob) {
                    out.push("dis.select_prob must lie in [0, 1]".into());
                }
            }
            SpaceKind::Sfs => {
                if self.sfs.components != 1 && self.sfs.components != 3 {
                    out.push(format!("sfs.components must be 1 or 3, got {}", self.sfs.components));
                }
                if self.sfs.groups == 0 {
                    out.push("sfs.groups must be at least 1".into());
                }
            }
            SpaceKind::Grid => {}
        }
        match &self.evaluator {
            EvaluatorSpec::Synthetic {
                layers,
                dim,
                models,
                probes,
                ..
            } => {
                if *layers == 0 || *dim == 0 || *models == 0 {
                    out.push("synthetic layers, dim and models must be at least 1".into());
                }
                if probes.is_some_and(|p| (p as u64) < self.schedule.b_max) {
                    out.push("synthetic probe pool is smaller than b_max".into());
                }
                let known: Vec<String> = std::iter::once(MEAN_TASK.to_string())
                    .chain((0..*models).map(|j| format!("m{j}")))
                    .collect();
                for t in &self.objectives.tasks {
                    if !known.contains(t) {
                        out.push(format!("unknown synthetic task `{t}` (known: {})", known.join(", ")));
                    }
                }
            }
            EvaluatorSpec::External { program, .. } => {
                if program.is_empty() {
                    out.push("external evaluator program is empty".into());
                }
                match &self.base_model {
                    None => out.push("external runs need `base_model`".into()),
                    Some(b) if !self.models.contains_key(b) => {
                        out.push(format!("base model `{b}` has no entry in `models`"))
                    }
                    _ => {}
                }
            }
        }
        if let Some(c) = &self.candidates {
            if c.is_empty() {
                out.push("candidates must not be empty".into());
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

    pub fn schedule(&self) -> Result<BudgetSchedule> {
        make_schedule_with(self.schedule.b_min, self.schedule.b_max, self.schedule.eta, self.schedule.sizing)
    }

    pub fn search_options(&self) -> Result<SearchOptions> {
        let mut opts = SearchOptions::new(self.schedule()?);
        opts.t_max = self.t_max;
        opts.seed = self.seed;
        opts.workers = self.workers.unwrap_or(0);
        opts.rho = self.objectives.rho;
        opts.lattice_granularity = self.objectives.s_lambda;
        opts.max_brackets = self.max_brackets;
        opts.plateau_window = self.plateau_window;
        Ok(opts)
    }

    pub fn synthetic_family(&self) -> Result<Option<SyntheticFamily>> {
        let EvaluatorSpec::Synthetic {
            layers,
            dim,
            models,
            seed,
            probes,
            delta_scale,
        } = &self.evaluator
        else {
            return Ok(None);
        };
        let mut params = FamilyParams::new(*layers, *dim, *models, *seed);
        params.probes = probes.unwrap_or(self.schedule.b_max as usize);
        if let Some(d) = delta_scale {
            params.delta_scale = *d;
        }
        SyntheticFamily::new(params).map(Some)
    }

    /// Loads every listed weight file under its configured id.
    pub fn load_stores(&self) -> Result<BTreeMap<String, WeightStore>> {
        self.models
            .iter()
            .map(|(id, path)| Ok((id.clone(), load_store_as(path, id.clone())?)))
            .collect()
    }

    /// Space over the given stores; checks that all of them share one depth.
    pub fn build_space(&self, stores: &BTreeMap<String, WeightStore>) -> Result<MergeSpace> {
        self.validate()?;
        let base = self.base_model_id();
        let base_store = stores.get(&base).ok_or_else(|| Error::MissingModel(base.clone()))?;
        let layers = base_store.layer_count();
        let candidates: Vec<String> = match &self.candidates {
            Some(c) => c.clone(),
            None => stores.keys().filter(|k| **k != base).cloned().collect(),
        };
        for c in &candidates {
            let s = stores.get(c).ok_or_else(|| Error::MissingModel(c.clone()))?;
            if s.layer_count() != layers {
                return Err(Error::config(format!(
                    "model `{c}` has {} layers, base `{base}` has {layers}",
                    s.layer_count()
                )));
            }
        }
        Ok(match self.space {
            SpaceKind::Lfs => MergeSpace::Lfs(LfsSpace::new(
                base,
                candidates,
                layers,
                self.lfs.groups,
                self.lfs.components,
                self.lfs.methods.clone(),
            )?),
            SpaceKind::Dis => {
                if layers % self.dis.depth != 0 {
                    return Err(Error::config(format!(
                        "layer count {layers} is not divisible by D={}",
                        self.dis.depth
                    )));
                }
                MergeSpace::Dis(
                    DisSpace::new(
                        base,
                        candidates,
                        layers,
                        self.dis.depth,
                        self.dis.repeat,
                        self.dis.max_layers,
                        self.dis.ordering,
                    )?
                    .with_select_prob(self.dis.select_prob),
                )
            }
            SpaceKind::Sfs => MergeSpace::Sfs(SfsSpace::new(base, layers, self.sfs.groups, self.sfs.components)?),
            SpaceKind::Grid => return Err(Error::config("grid spaces are not runnable from a config")),
        })
    }

    /// Evaluation backend plus the stores it evaluates over.
    pub fn backend(&self) -> Result<(Backend, BTreeMap<String, WeightStore>)> {
        match &self.evaluator {
            EvaluatorSpec::Synthetic { .. } => {
                let family = self.synthetic_family()?.expect("synthetic evaluator");
                let stores = family.stores().clone();
                Ok((Backend::Synthetic(Arc::new(family)), stores))
            }
            EvaluatorSpec::External {
                program,
                args,
                timeout_secs,
                keep_artifacts,
            } => {
                let stores = self.load_stores()?;
                let backend = Backend::External {
                    command: ExternalCommand {
                        program: program.clone(),
                        args: args.clone(),
                        timeout_secs: *timeout_secs,
                    },
                    artifact_dir: self.output_dir.join("artifacts"),
                    stores: Arc::new(stores.clone()),
                    keep_artifacts: *keep_artifacts,
                };
                Ok((backend, stores))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "space": "lfs",
        "schedule": {"b_min": 100, "b_max": 1000},
        "evaluator": {"kind": "synthetic", "layers": 4, "dim": 4, "models": 2},
        "output_dir": "out"
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert!(c.violations().is_empty(), "{:?}", c.violations());
        assert_eq!(c.t_max, 500);
        assert_eq!(c.schedule.eta, 3.0);
        assert_eq!(c.lfs, LfsParams::default());
        assert_eq!(c.base_model_id(), "base");
        let (_, stores) = c.backend().unwrap();
        let space = c.build_space(&stores).unwrap();
        assert!(matches!(space, MergeSpace::Lfs(ref s) if s.candidates == vec!["m0", "m1"]));
    }

    #[test]
    fn reports_violations() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.schedule.b_min = 2000;
        c.objectives.tasks = vec!["nope".into()];
        c.lfs.components = 2;
        let v = c.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(RunConfig::from_json(r#"{"space": "lfs", "bogus": 1}"#).is_err());
    }

    #[test]
    fn dis_divisibility() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.space = SpaceKind::Dis;
        c.dis.depth = 3;
        let (_, stores) = c.backend().unwrap();
        assert!(c.build_space(&stores).unwrap_err().to_string().contains("not divisible"));
    }
}
