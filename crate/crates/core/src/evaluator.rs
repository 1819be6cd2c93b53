//! Evaluation boundary: a one-line JSON child-process protocol for real
//! harnesses, and a synthetic residual-network family whose costs can be
//! verified by brute force.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dis_space::{build_dis_plan, execute_plan, export_plan, AssemblyPlan, DisSpace};
use crate::error::{Error, Result};
use crate::lfs_space::{build_lfs_model, LfsSpace};
use crate::merge_kernels::linear_merge;
use crate::mf_optimizer::Objective;
use crate::objectives::CostVector;
use crate::sfs_space::{build_sfs_model, SfsSpace};
use crate::space::{SearchSpace, SpaceKind};
use crate::tensor_store::{save_store, Dtype, TensorRecord, WeightStore};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

/// One request line sent to an external evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub artifact: String,
    pub budget: u64,
    pub tasks: Vec<String>,
}

impl EvalRequest {
    /// The exact bytes written to the child's stdin, newline included.
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    /// Number of costs the reply must carry.
    pub fn arity(&self) -> usize {
        self.tasks.len().max(1)
    }
}

#[derive(Deserialize)]
struct EvalReply {
    costs: Vec<f64>,
}

/// Parses a reply line and checks it carries `expected` non-negative costs.
pub fn parse_eval_reply(line: &str, expected: usize) -> Result<Vec<f64>> {
    let reply: EvalReply = serde_json::from_str(line.trim())
        .map_err(|e| Error::Protocol(format!("reply is not a {{\"costs\": [...]}} object: {e}")))?;
    if reply.costs.len() != expected {
        return Err(Error::Protocol(format!(
            "reply has {} costs, {expected} requested",
            reply.costs.len()
        )));
    }
    if let Some(c) = reply.costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::Protocol(format!("cost {c} is not a finite non-negative number")));
    }
    Ok(reply.costs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT.as_secs()
}

impl ExternalCommand {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout_secs: default_timeout_secs(),
        }
    }
}

fn drain<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Runs the command once: one request line in, one reply line out.
pub fn evaluate_external(request: &EvalRequest, command: &ExternalCommand) -> Result<CostVector> {
    let line = request.to_line()?;
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Evaluator(format!("cannot start `{}`: {e}", command.program)))?;
    let stdout = drain(child.stdout.take().expect("piped stdout"));
    let stderr = drain(child.stderr.take().expect("piped stderr"));
    if let Some(mut stdin) = child.stdin.take() {
        match stdin.write_all(line.as_bytes()) {
            // a child that exits without reading its request is judged by its reply
            Err(e) if e.kind() != ErrorKind::BrokenPipe => return Err(e.into()),
            _ => {}
        }
    }
    let timeout = Duration::from_secs(command.timeout_secs);
    let deadline = Instant::now() + timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Timeout(timeout));
        }
        thread::sleep(Duration::from_millis(5));
    };
    let out = stdout.join().unwrap_or_default();
    if !status.success() {
        let err = stderr.join().unwrap_or_default();
        return Err(Error::Evaluator(format!(
            "`{}` exited with {status}: {}",
            command.program,
            err.trim()
        )));
    }
    let reply = out
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Protocol("evaluator wrote no reply".into()))?;
    let costs = parse_eval_reply(reply, request.arity())?;
    CostVector::new(costs, request.budget)
}

/// One residual layer `x + n ⊙ (W_mlp (W_att x + b_att) + b_mlp)`.
#[derive(Debug, Clone, PartialEq)]
struct LayerMap {
    w_att: Vec<f64>,
    b_att: Vec<f64>,
    w_mlp: Vec<f64>,
    b_mlp: Vec<f64>,
    norm: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

impl LayerMap {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = matvec(&self.w_att, x);
        h.iter_mut().zip(&self.b_att).for_each(|(v, b)| *v += b);
        let mut y = matvec(&self.w_mlp, &h);
        y.iter_mut().zip(&self.b_mlp).for_each(|(v, b)| *v += b);
        x.iter().zip(y).zip(&self.norm).map(|((xi, yi), n)| xi + n * yi).collect()
    }
}

/// The network a synthetic weight store describes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticNet {
    dim: usize,
    layers: Vec<LayerMap>,
    final_norm: Vec<f64>,
}

fn layer_tensor_names(l: usize) -> [String; 5] {
    [
        format!("model.layers.{l}.self_attn.weight"),
        format!("model.layers.{l}.self_attn.bias"),
        format!("model.layers.{l}.mlp.weight"),
        format!("model.layers.{l}.mlp.bias"),
        format!("model.layers.{l}.input_layernorm.weight"),
    ]
}

const FINAL_NORM: &str = "model.norm.weight";

impl SyntheticNet {
    pub fn from_store(store: &WeightStore, dim: usize) -> Result<Self> {
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
            let rec = store
                .get(name)
                .ok_or_else(|| Error::shape(format!("`{}` lacks tensor `{name}`", store.model_id())))?;
            if rec.numel() != len {
                return Err(Error::shape(format!(
                    "tensor `{name}` has {} elements, expected {len}",
                    rec.numel()
                )));
            }
            Ok(rec.to_f32().into_iter().map(f64::from).collect())
        };
        let layers = (0..store.layer_count())
            .map(|l| {
                let [wa, ba, wm, bm, n] = layer_tensor_names(l);
                Ok(LayerMap {
                    w_att: fetch(&wa, dim * dim)?,
                    b_att: fetch(&ba, dim)?,
                    w_mlp: fetch(&wm, dim * dim)?,
                    b_mlp: fetch(&bm, dim)?,
                    norm: fetch(&n, dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            layers,
            final_norm: fetch(FINAL_NORM, dim)?,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn apply_layer(&self, layer: usize, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(format!("input has {} values, network width is {}", x.len(), self.dim)));
        }
        let map = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::shape(format!("layer {layer} out of range")))?;
        Ok(map.apply(x))
    }

    pub fn apply_final_norm(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.final_norm).map(|(a, n)| a * n).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for l in 0..self.layers.len() {
            h = self.apply_layer(l, &h)?;
        }
        Ok(self.apply_final_norm(&h))
    }
}

/// Runs a layer plan over synthetic stores, finishing with the base model's final norm.
pub fn run_plan(plan: &AssemblyPlan, nets: &BTreeMap<String, SyntheticNet>, x: &[f64]) -> Result<Vec<f64>> {
    let h = execute_plan(plan, x, |model, layer, h| {
        nets.get(model)
            .ok_or_else(|| Error::MissingModel(model.to_string()))?
            .apply_layer(layer, h)
    })?;
    let base = nets
        .get(&plan.base_model)
        .ok_or_else(|| Error::MissingModel(plan.base_model.clone()))?;
    Ok(base.apply_final_norm(&h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyParams {
    pub layers: usize,
    pub dim: usize,
    pub models: usize,
    pub seed: u64,
    pub probes: usize,
    /// Standard deviation of each finetuned model's offset from the base, relative to the base weights' scale.
    pub delta_scale: f64,
}

impl FamilyParams {
    pub fn new(layers: usize, dim: usize, models: usize, seed: u64) -> Self {
        Self {
            layers,
            dim,
            models,
            seed,
            probes: 1000,
            delta_scale: 0.5,
        }
    }
}

/// Base model, finetuned variants and target functions sharing one architecture.
///
/// Model ids are `base` and `m0..m{M-1}`. Task `mean` targets the elementwise
/// average of the variants (so a uniform linear merge is an exact optimum);
/// task `m{i}` targets variant `i` itself.
#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub params: FamilyParams,
    stores: BTreeMap<String, WeightStore>,
    nets: BTreeMap<String, SyntheticNet>,
    probes: Vec<Vec<f64>>,
    reference: BTreeMap<String, Vec<Vec<f64>>>,
}

pub const BASE_MODEL: &str = "base";
pub const MEAN_TASK: &str = "mean";

pub fn make_synthetic_family(layers: usize, dim: usize, models: usize, seed: u64) -> Result<SyntheticFamily> {
    SyntheticFamily::new(FamilyParams::new(layers, dim, models, seed))
}

impl SyntheticFamily {
    pub fn new(params: FamilyParams) -> Result<Self> {
        let FamilyParams {
            layers: l,
            dim: d,
            models: m,
            seed,
            probes,
            delta_scale,
        } = params.clone();
        if l == 0 || d == 0 || m == 0 || probes == 0 {
            return Err(Error::param("layers, dim, models and probes must all be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |sd: f64| -> f32 { (sd * rng.sample::<f64, _>(StandardNormal)) as f32 };
        let w_sd = 0.5 / (d as f64).sqrt();
        // (name, shape, base values, offset sd)
        let mut base: Vec<(String, Vec<usize>, Vec<f32>, f64)> = Vec::new();
        for layer in 0..l {
            let [wa, ba, wm, bm, n] = layer_tensor_names(layer);
            base.push((wa, vec![d, d], (0..d * d).map(|_| normal(w_sd)).collect(), w_sd));
            base.push((ba, vec![d], (0..d).map(|_| normal(0.1)).collect(), 0.1));
            base.push((wm, vec![d, d], (0..d * d).map(|_| normal(w_sd)).collect(), w_sd));
            base.push((bm, vec![d], (0..d).map(|_| normal(0.1)).collect(), 0.1));
            base.push((n, vec![d], (0..d).map(|_| 1.0 + normal(0.1)).collect(), 0.1));
        }
        base.push((FINAL_NORM.into(), vec![d], (0..d).map(|_| 1.0 + normal(0.1)).collect(), 0.1));

        let build = |id: &str, values: &dyn Fn(usize, &[f32], f64) -> Vec<f32>| -> Result<WeightStore> {
            let records = base
                .iter()
                .enumerate()
                .map(|(i, (name, shape, v, sd))| TensorRecord::from_f32(name, Dtype::F32, shape.clone(), &values(i, v, *sd)))
                .collect::<Result<Vec<_>>>()?;
            WeightStore::new(id, records)
        };
        let mut stores = BTreeMap::new();
        stores.insert(BASE_MODEL.to_string(), build(BASE_MODEL, &|_, v, _| v.to_vec())?);
        let offsets: Vec<Vec<Vec<f32>>> = (0..m)
            .map(|_| {
                base.iter()
                    .map(|(_, _, v, sd)| v.iter().map(|_| normal(delta_scale * sd)).collect())
                    .collect()
            })
            .collect();
        for (j, off) in offsets.iter().enumerate() {
            let id = format!("m{j}");
            let store = build(&id, &|i, v, _| v.iter().zip(&off[i]).map(|(a, b)| a + b).collect())?;
            stores.insert(id, store);
        }

        let variants: Vec<&WeightStore> = (0..m).map(|j| &stores[&format!("m{j}")]).collect();
        let uniform = vec![1.0 / m as f64; m];
        let mean_records = variants[0]
            .tensors()
            .map(|rec| {
                let vals: Vec<Vec<f32>> = variants.iter().map(|s| s.get(rec.name()).expect("same layout").to_f32()).collect();
                let refs: Vec<&[f32]> = vals.iter().map(Vec::as_slice).collect();
                TensorRecord::from_f32(rec.name(), rec.dtype(), rec.shape().to_vec(), &linear_merge(&refs, &uniform)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = WeightStore::new(MEAN_TASK, mean_records)?;

        let mut nets: BTreeMap<String, SyntheticNet> = stores
            .iter()
            .map(|(id, s)| Ok((id.clone(), SyntheticNet::from_store(s, d)?)))
            .collect::<Result<_>>()?;
        let mean_net = SyntheticNet::from_store(&mean, d)?;

        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        prng.set_stream(1);
        let probe_set: Vec<Vec<f64>> = (0..probes)
            .map(|_| (0..d).map(|_| prng.sample(StandardNormal)).collect())
            .collect();
        let mut reference = BTreeMap::new();
        reference.insert(
            MEAN_TASK.to_string(),
            probe_set.iter().map(|x| mean_net.forward(x)).collect::<Result<Vec<_>>>()?,
        );
        for j in 0..m {
            let id = format!("m{j}");
            let net = &nets[&id];
            reference.insert(id, probe_set.iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?);
        }
        nets.insert(MEAN_TASK.to_string(), mean_net);
        Ok(Self {
            params,
            stores,
            nets,
            probes: probe_set,
            reference,
        })
    }

    /// Base and variant stores keyed by model id.
    pub fn stores(&self) -> &BTreeMap<String, WeightStore> {
        &self.stores
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        (0..self.params.models).map(|j| format!("m{j}")).collect()
    }

    pub fn tasks(&self) -> Vec<String> {
        self.reference.keys().cloned().collect()
    }

    pub fn probes(&self) -> &[Vec<f64>] {
        &self.probes
    }

    /// Reference outputs of task `task` on the probe pool.
    pub fn reference(&self, task: &str) -> Option<&[Vec<f64>]> {
        self.reference.get(task).map(Vec::as_slice)
    }

    /// Network of a family member or task target (`mean`).
    pub fn net(&self, id: &str) -> Option<&SyntheticNet> {
        self.nets.get(id)
    }

    fn costs_of(&self, outputs: impl Fn(&[f64]) -> Result<Vec<f64>>, tasks: &[String], budget: u64) -> Result<CostVector> {
        let b = budget as usize;
        if b == 0 || b > self.probes.len() {
            return Err(Error::param(format!(
                "budget {budget} outside the probe pool of {}",
                self.probes.len()
            )));
        }
        let refs: Vec<&[Vec<f64>]> = tasks
            .iter()
            .map(|t| self.reference(t).ok_or_else(|| Error::config(format!("unknown synthetic task `{t}`"))))
            .collect::<Result<_>>()?;
        let mut sums = vec![0.0; tasks.len()];
        for (i, x) in self.probes[..b].iter().enumerate() {
            let y = outputs(x)?;
            if y.len() != self.params.dim {
                return Err(Error::shape("candidate output width differs from the family"));
            }
            for (s, r) in sums.iter_mut().zip(&refs) {
                *s += y.iter().zip(&r[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        let n = (b * self.params.dim) as f64;
        CostVector::new(sums.into_iter().map(|s| s / n).collect(), budget)
    }
}

/// What a search trial materializes into.
pub enum Candidate<'a> {
    Store(&'a WeightStore),
    Plan {
        plan: &'a AssemblyPlan,
        stores: &'a BTreeMap<String, WeightStore>,
    },
}

/// Mean squared output error against each task's target over the first `budget` probes.
pub fn synthetic_evaluate(candidate: &Candidate<'_>, family: &SyntheticFamily, tasks: &[String], budget: u64) -> Result<CostVector> {
    let d = family.params.dim;
    match candidate {
        Candidate::Store(store) => {
            let net = SyntheticNet::from_store(store, d)?;
            family.costs_of(|x| net.forward(x), tasks, budget)
        }
        Candidate::Plan { plan, stores } => {
            let mut nets = BTreeMap::new();
            for id in plan.steps.iter().map(|s| &s.model).chain(std::iter::once(&plan.base_model)) {
                if !nets.contains_key(id) {
                    let store = stores.get(id).ok_or_else(|| Error::MissingModel(id.clone()))?;
                    nets.insert(id.clone(), SyntheticNet::from_store(store, d)?);
                }
            }
            family.costs_of(|x| run_plan(plan, &nets, x), tasks, budget)
        }
    }
}

/// One of the three merge search spaces.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeSpace {
    Lfs(LfsSpace),
    Dis(DisSpace),
    Sfs(SfsSpace),
}

impl MergeSpace {
    fn inner(&self) -> &dyn SearchSpace {
        match self {
            MergeSpace::Lfs(s) => s,
            MergeSpace::Dis(s) => s,
            MergeSpace::Sfs(s) => s,
        }
    }
}

impl SearchSpace for MergeSpace {
    fn kind(&self) -> SpaceKind {
        self.inner().kind()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.inner().sample(rng)
    }

    fn neighbor(&self, x: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.inner().neighbor(x, rng)
    }

    fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        self.inner().canonicalize(x)
    }

    fn is_feasible(&self, x: &[f64]) -> bool {
        self.inner().is_feasible(x)
    }

    fn initial_design(&self) -> Vec<Vec<f64>> {
        self.inner().initial_design()
    }

    fn describe(&self, x: &[f64]) -> Result<serde_json::Value> {
        self.inner().describe(x)
    }
}

/// A configuration turned into something evaluable.
pub enum Materialized {
    Store(WeightStore),
    Plan(AssemblyPlan),
    ScaledPlan(WeightStore, AssemblyPlan),
}

impl MergeSpace {
    pub fn materialize(&self, x: &[f64], stores: &BTreeMap<String, WeightStore>) -> Result<Materialized> {
        match self {
            MergeSpace::Lfs(s) => Ok(Materialized::Store(build_lfs_model(&s.decode(x)?, stores)?)),
            MergeSpace::Dis(s) => Ok(Materialized::Plan(build_dis_plan(&s.decode(x)?, Some(stores))?)),
            MergeSpace::Sfs(s) => {
                let (store, plan) = build_sfs_model(&s.decode(x)?, stores)?;
                Ok(Materialized::ScaledPlan(store, plan))
            }
        }
    }
}

/// Writes the artifact an external harness receives and returns its path.
/// Plans reference models by id, except scaled plans, whose steps name the
/// written weight file.
pub fn write_artifact(materialized: &Materialized, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    match materialized {
        Materialized::Store(store) => {
            let path = dir.join(format!("{stem}.safetensors"));
            save_store(store, &path)?;
            Ok(path)
        }
        Materialized::Plan(plan) => {
            let path = dir.join(format!("{stem}.plan.json"));
            std::fs::write(&path, export_plan(plan)?)?;
            Ok(path)
        }
        Materialized::ScaledPlan(store, plan) => {
            let weights = dir.join(format!("{stem}.safetensors"));
            save_store(store, &weights)?;
            let id = weights.to_string_lossy().into_owned();
            let mut plan = plan.clone();
            plan.base_model = id.clone();
            plan.steps.iter_mut().for_each(|s| s.model = id.clone());
            let path = dir.join(format!("{stem}.plan.json"));
            std::fs::write(&path, export_plan(&plan)?)?;
            Ok(path)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Synthetic(Arc<SyntheticFamily>),
    External {
        command: ExternalCommand,
        artifact_dir: PathBuf,
        stores: Arc<BTreeMap<String, WeightStore>>,
        keep_artifacts: bool,
    },
}

/// Binds a merge space to an evaluation backend.
pub struct SpaceObjective<'a> {
    pub space: &'a MergeSpace,
    pub backend: Backend,
    pub tasks: Vec<String>,
}

impl SpaceObjective<'_> {
    fn stores(&self) -> &BTreeMap<String, WeightStore> {
        match &self.backend {
            Backend::Synthetic(f) => f.stores(),
            Backend::External { stores, .. } => stores,
        }
    }
}

impl Objective for SpaceObjective<'_> {
    fn num_objectives(&self) -> usize {
        self.tasks.len().max(1)
    }

    fn evaluate(&self, config: &[f64], budget: u64, trial_id: u64) -> Result<Vec<f64>> {
        let m = self.space.materialize(config, self.stores())?;
        match &self.backend {
            Backend::Synthetic(family) => {
                let tasks = if self.tasks.is_empty() { vec![MEAN_TASK.to_string()] } else { self.tasks.clone() };
                let cost = match &m {
                    Materialized::Store(s) => synthetic_evaluate(&Candidate::Store(s), family, &tasks, budget)?,
                    Materialized::Plan(plan) => synthetic_evaluate(
                        &Candidate::Plan {
                            plan,
                            stores: family.stores(),
                        },
                        family,
                        &tasks,
                        budget,
                    )?,
                    Materialized::ScaledPlan(store, plan) => {
                        let mut stores = family.stores().clone();
                        stores.insert(plan.base_model.clone(), store.clone());
                        synthetic_evaluate(&Candidate::Plan { plan, stores: &stores }, family, &tasks, budget)?
                    }
                };
                Ok(cost.costs)
            }
            Backend::External {
                command,
                artifact_dir,
                keep_artifacts,
                ..
            } => {
                let path = write_artifact(&m, artifact_dir, &format!("trial-{trial_id}"))?;
                let request = EvalRequest {
                    artifact: path.to_string_lossy().into_owned(),
                    budget,
                    tasks: self.tasks.clone(),
                };
                let result = evaluate_external(&request, command);
                if !keep_artifacts {
                    let _ = std::fs::remove_file(&path);
                    let _ = std::fs::remove_file(path.with_extension("").with_extension("safetensors"));
                }
                Ok(result?.costs)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_eval_reply(r#"{"costs":[0.5]}"#, 1).unwrap(), vec![0.5]);
        assert!(matches!(parse_eval_reply(r#"{"costs":[0.5,0.1]}"#, 3), Err(Error::Protocol(_))));
        assert!(matches!(parse_eval_reply(r#"{"costs":[-1]}"#, 1), Err(Error::Protocol(_))));
        assert!(matches!(parse_eval_reply("nope", 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn request_line_is_compact() {
        let r = EvalRequest {
            artifact: "/tmp/a.safetensors".into(),
            budget: 100,
            tasks: vec!["gsm8k".into()],
        };
        assert_eq!(
            r.to_line().unwrap(),
            "{\"artifact\":\"/tmp/a.safetensors\",\"budget\":100,\"tasks\":[\"gsm8k\"]}\n"
        );
        assert_eq!(EvalRequest { tasks: vec![], ..r }.arity(), 1);
    }

    #[test]
    fn family_is_deterministic_and_mean_is_exact() {
        let a = make_synthetic_family(2, 3, 2, 7).unwrap();
        let b = make_synthetic_family(2, 3, 2, 7).unwrap();
        assert_eq!(a.stores(), b.stores());
        assert_eq!(a.probes(), b.probes());
        let tasks = vec![MEAN_TASK.to_string()];
        let base = synthetic_evaluate(&Candidate::Store(&a.stores()[BASE_MODEL]), &a, &tasks, 50).unwrap();
        assert!(base.costs[0] > 0.0);
        let m0 = synthetic_evaluate(&Candidate::Store(&a.stores()["m0"]), &a, &["m0".to_string()], 50).unwrap();
        assert_eq!(m0.costs, vec![0.0]);
        assert!(synthetic_evaluate(&Candidate::Store(&a.stores()["m0"]), &a, &tasks, 1001).is_err());
    }
}
