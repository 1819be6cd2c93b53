//! Document sniffing and validation for `validate` and `merge`.

use std::collections::BTreeMap;
use std::fmt;

use mergesearch::dis_space::{import_plan, DisConfig};
use mergesearch::lfs_space::LfsRecipe;
use mergesearch::run_config::{EvaluatorSpec, RunConfig};
use mergesearch::sfs_space::SfsConfig;
use mergesearch::tensor_store::WeightStore;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocKind {
    LfsRecipe,
    SfsConfig,
    DisConfig,
    PlanManifest,
    RunConfig,
}

impl fmt::Display for DocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocKind::LfsRecipe => "LFS recipe",
            DocKind::SfsConfig => "SFS config",
            DocKind::DisConfig => "DIS config",
            DocKind::PlanManifest => "plan manifest",
            DocKind::RunConfig => "run config",
        })
    }
}

/// Guesses the document type from its top-level keys.
pub fn detect(doc: &Value) -> Option<DocKind> {
    let obj = doc.as_object()?;
    let has = |k: &str| obj.contains_key(k);
    Some(if has("evaluator") || has("schedule") {
        DocKind::RunConfig
    } else if has("D") || has("M") || has("R") {
        DocKind::PlanManifest
    } else if has("blocks") {
        DocKind::DisConfig
    } else if has("weight_scales") || has("output_scales") {
        DocKind::SfsConfig
    } else if has("groups") {
        DocKind::LfsRecipe
    } else {
        return None;
    })
}

fn missing_models<'a>(ids: impl IntoIterator<Item = &'a String>, stores: &BTreeMap<String, WeightStore>) -> Vec<String> {
    if stores.is_empty() {
        return Vec::new();
    }
    ids.into_iter()
        .filter(|id| !stores.contains_key(*id))
        .map(|id| format!("model `{id}` is not among the provided models"))
        .collect()
}

/// Every schema and domain violation; empty means valid.
pub fn violations(kind: DocKind, doc: Value, stores: &BTreeMap<String, WeightStore>, layers: Option<usize>) -> Vec<String> {
    match kind {
        DocKind::LfsRecipe => match serde_json::from_value::<LfsRecipe>(doc) {
            Err(e) => vec![e.to_string()],
            Ok(r) => {
                let mut v = r.violations(layers);
                v.extend(missing_models(&r.referenced_models(), stores));
                v
            }
        },
        DocKind::SfsConfig => match serde_json::from_value::<SfsConfig>(doc) {
            Err(e) => vec![e.to_string()],
            Ok(c) => {
                let mut v = c.violations();
                if let Some(l) = layers.filter(|l| *l != c.output_scales.len()) {
                    v.push(format!("{} output scales for {l} layers", c.output_scales.len()));
                }
                v.extend(missing_models([&c.base_model], stores));
                v
            }
        },
        DocKind::DisConfig => match serde_json::from_value::<DisConfig>(doc) {
            Err(e) => vec![e.to_string()],
            Ok(c) => {
                let mut v = c.violations();
                v.extend(missing_models(std::iter::once(&c.base_model).chain(&c.models), stores));
                v
            }
        },
        DocKind::PlanManifest => match import_plan(&doc.to_string()) {
            Err(e) => vec![e.to_string()],
            Ok(plan) if !stores.is_empty() => plan.check_against(stores).err().map(|e| e.to_string()).into_iter().collect(),
            Ok(_) => Vec::new(),
        },
        DocKind::RunConfig => match serde_json::from_value::<RunConfig>(doc) {
            Err(e) => vec![e.to_string()],
            Ok(c) => {
                let mut v = c.violations();
                // synthetic runs are cheap to instantiate, which also checks the space
                if v.is_empty() && matches!(c.evaluator, EvaluatorSpec::Synthetic { .. }) {
                    if let Err(e) = c.backend().and_then(|(_, s)| c.build_space(&s)) {
                        v.push(e.to_string());
                    }
                }
                v
            }
        },
    }
}
