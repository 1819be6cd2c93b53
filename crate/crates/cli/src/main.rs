use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mergesearch::dis_space::{build_dis_plan, export_plan, DisConfig};
use mergesearch::evaluator::{MergeSpace, SpaceObjective};
use mergesearch::lfs_space::{build_lfs_model, LfsRecipe};
use mergesearch::mf_optimizer::{
    budget_report, incumbent_trajectory, load_trial_log, run_search_with, StopReason, TrialLogWriter, TrialRecord,
};
use mergesearch::run_config::{EvaluatorSpec, RunConfig};
use mergesearch::sfs_space::{build_sfs_model, SfsConfig};
use mergesearch::space::{SearchSpace, SpaceKind};
use mergesearch::tensor_store::{classify_parameter, load_store_as, save_store, WeightStore};
use serde_json::{json, Value};

mod docs;

use docs::{detect, DocKind};

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mergesearch", version, about = "Search-based model merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build merged weights (or a layer plan) from a recipe document.
    Merge(MergeArgs),
    /// Run a multi-fidelity search described by a run config.
    Search(SearchArgs),
    /// Summarize a trial log: budget distribution and incumbent trajectory.
    Report(ReportArgs),
    /// Check a recipe, plan, DIS/SFS config or run config.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Weight file for a model id, as `id=path`; repeatable.
    #[arg(long = "model", value_name = "ID=PATH")]
    models: Vec<String>,
    /// Directory whose `*.safetensors` files are loaded under their file stems.
    #[arg(long)]
    models_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    recipe: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    /// Output path: a weight file, or a plan manifest for DIS configs.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Lfs,
    Dis,
    Sfs,
}

#[derive(Args)]
struct SearchArgs {
    config: PathBuf,
    #[arg(long)]
    b_min: Option<u64>,
    #[arg(long)]
    b_max: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    space: Option<SpaceArg>,
    #[arg(long)]
    max_layers: Option<usize>,
    /// Parallel evaluations; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from an existing trial log.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    log: PathBuf,
    /// Budget treated as full fidelity; defaults to the largest in the log.
    #[arg(long)]
    b_max: Option<u64>,
}

#[derive(Args)]
struct ValidateArgs {
    document: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    /// Layer count to check recipes against when no models are given.
    #[arg(long)]
    layers: Option<usize>,
}

/// A document or argument that failed validation (exit code 2).
#[derive(Debug)]
struct Invalid(Vec<String>);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0.as_slice() {
            [one] => write!(f, "{one}"),
            many => {
                write!(f, "{} violations:", many.len())?;
                for v in many {
                    write!(f, "\n  - {v}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(vec![msg.into()]).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use mergesearch::Error as E;
    if err.downcast_ref::<Invalid>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return EXIT_INVALID;
    }
    match err.downcast_ref::<E>() {
        Some(E::Io(_) | E::Evaluator(_) | E::Protocol(_) | E::Timeout(_)) | None => EXIT_RUNTIME,
        Some(_) => EXIT_INVALID,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(&a),
        Command::Search(a) => cmd_search(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_models(args: &ModelArgs) -> anyhow::Result<BTreeMap<String, WeightStore>> {
    let mut stores = BTreeMap::new();
    if let Some(dir) = &args.models_dir {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let store = load_store_as(&p, id.clone()).with_context(|| format!("loading {}", p.display()))?;
            stores.insert(id, store);
        }
    }
    for spec in &args.models {
        let Some((id, path)) = spec.split_once('=') else {
            return Err(invalid(format!("--model expects ID=PATH, got `{spec}`")));
        };
        let store = load_store_as(path, id).with_context(|| format!("loading {path}"))?;
        stores.insert(id.to_string(), store);
    }
    Ok(stores)
}

fn ensure_models(stores: &BTreeMap<String, WeightStore>, ids: impl IntoIterator<Item = String>) -> anyhow::Result<()> {
    let missing: Vec<String> = ids
        .into_iter()
        .filter(|id| !stores.contains_key(id))
        .map(|id| format!("model `{id}` is referenced but was not provided"))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Invalid(missing).into())
    }
}

fn tensors_in_layers(store: &WeightStore, range: [usize; 2]) -> usize {
    store
        .tensors()
        .filter(|t| classify_parameter(t.name()).0.is_some_and(|l| (range[0]..=range[1]).contains(&l)))
        .count()
}

fn cmd_merge(args: &MergeArgs) -> anyhow::Result<()> {
    let doc = read_json(&args.recipe)?;
    let stores = load_models(&args.models)?;
    match detect(&doc) {
        Some(DocKind::LfsRecipe) => {
            let recipe: LfsRecipe = serde_json::from_value(doc).map_err(|e| invalid(e.to_string()))?;
            ensure_models(&stores, recipe.referenced_models())?;
            let layers = stores[&recipe.base_model].layer_count();
            let v = recipe.violations(Some(layers));
            if !v.is_empty() {
                return Err(Invalid(v).into());
            }
            let merged = build_lfs_model(&recipe, &stores)?;
            save_store(&merged, &args.out)?;
            println!("LFS recipe: {} groups over {layers} layers", recipe.groups.len());
            for (i, g) in recipe.groups.iter().enumerate() {
                let cells: Vec<String> = g
                    .cells
                    .iter()
                    .map(|(k, c)| format!("{k}={}({})", c.method.kind().name(), c.sources.join(",")))
                    .collect();
                println!(
                    "  group {i} layers {}-{}: {} [{} tensors]",
                    g.range[0],
                    g.range[1],
                    cells.join(" "),
                    tensors_in_layers(&merged, g.range)
                );
            }
            println!("wrote {} tensors to {}", merged.len(), args.out.display());
        }
        Some(DocKind::SfsConfig) => {
            let config: SfsConfig = serde_json::from_value(doc).map_err(|e| invalid(e.to_string()))?;
            ensure_models(&stores, [config.base_model.clone()])?;
            let (store, plan) = build_sfs_model(&config, &stores)?;
            save_store(&store, &args.out)?;
            let manifest = args.out.with_extension("plan.json");
            let id = args.out.to_string_lossy().into_owned();
            let mut plan = plan;
            plan.base_model = id.clone();
            plan.steps.iter_mut().for_each(|s| s.model = id.clone());
            std::fs::write(&manifest, export_plan(&plan)?)?;
            println!("SFS config: {} groups, {} output scales", config.groups.len(), config.output_scales.len());
            for (i, g) in config.groups.iter().enumerate() {
                println!("  group {i} layers {}-{}: [{} tensors]", g[0], g[1], tensors_in_layers(&store, *g));
            }
            println!("wrote {} tensors to {} and plan {}", store.len(), args.out.display(), manifest.display());
        }
        Some(DocKind::DisConfig) => {
            let config: DisConfig = serde_json::from_value(doc).map_err(|e| invalid(e.to_string()))?;
            let v = config.violations();
            if !v.is_empty() {
                return Err(Invalid(v).into());
            }
            let plan = build_dis_plan(&config, if stores.is_empty() { None } else { Some(&stores) })?;
            if plan.infeasible {
                eprintln!("warning: plan has {} layers, above the cap of {}", plan.len(), config.max_layers);
            }
            std::fs::write(&args.out, export_plan(&plan)?)?;
            println!(
                "DIS config: {} blocks, {} layers assembled",
                plan.block_scales.len(),
                plan.len()
            );
            println!("wrote plan to {}", args.out.display());
        }
        Some(other) => return Err(invalid(format!("cannot merge a {other}"))),
        None => return Err(invalid("unrecognized document")),
    }
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, a: &SearchArgs) {
    if let Some(v) = a.b_min {
        config.schedule.b_min = v;
    }
    if let Some(v) = a.b_max {
        config.schedule.b_max = v;
    }
    if let Some(v) = a.eta {
        config.schedule.eta = v;
    }
    if let Some(v) = a.t_max {
        config.t_max = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.space {
        config.space = match v {
            SpaceArg::Lfs => SpaceKind::Lfs,
            SpaceArg::Dis => SpaceKind::Dis,
            SpaceArg::Sfs => SpaceKind::Sfs,
        };
    }
    if let Some(v) = a.max_layers {
        config.dis.max_layers = v;
    }
    if let Some(v) = a.workers {
        config.workers = Some(v);
    }
    if let Some(v) = &a.output_dir {
        config.output_dir = v.clone();
    }
}

fn trial_summary(space: &MergeSpace, t: &TrialRecord) -> anyhow::Result<Value> {
    Ok(json!({
        "trial_id": t.trial_id,
        "budget": t.budget,
        "costs": t.costs,
        "config": space.describe(&t.config)?,
    }))
}

fn cmd_search(args: &SearchArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = RunConfig::from_json(&text).map_err(|e| invalid(format!("{}: {e}", args.config.display())))?;
    apply_overrides(&mut config, args);
    let v = config.violations();
    if !v.is_empty() {
        return Err(Invalid(v).into());
    }
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out)?;

    let (backend, stores) = config.backend()?;
    let space = config.build_space(&stores)?;
    let resumed = match &args.resume {
        Some(p) => load_trial_log(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };

    // Synthetic runs export their models so the directory is self-contained.
    if matches!(config.evaluator, EvaluatorSpec::Synthetic { .. }) {
        let dir = out.join("models");
        std::fs::create_dir_all(&dir)?;
        for (id, store) in &stores {
            save_store(store, dir.join(format!("{id}.safetensors")))?;
        }
    }
    std::fs::write(out.join("run_config.json"), config.to_json_pretty()?)?;

    let log_path = out.join("trials.jsonl");
    let same_log = args
        .resume
        .as_ref()
        .is_some_and(|p| p.canonicalize().ok() == log_path.canonicalize().ok());
    let mut writer = if same_log {
        TrialLogWriter::append(&log_path)?
    } else {
        let mut w = TrialLogWriter::create(&log_path)?;
        for r in &resumed {
            w.write(r)?;
        }
        w
    };

    let objective = SpaceObjective {
        space: &space,
        backend,
        tasks: config.objectives.tasks.clone(),
    };
    let opts = config.search_options()?;
    let mut sink = |r: &TrialRecord| {
        if let Some(e) = &r.error {
            eprintln!("trial {} failed: {e}", r.trial_id);
        }
        writer.write(r)
    };
    let outcome = run_search_with(&space, &objective, &opts, &resumed, &mut sink)?;

    let new = outcome.trials.len() - resumed.len();
    let stop = match outcome.stop {
        StopReason::TrialBudget => "trial budget reached",
        StopReason::ScheduleComplete => "schedule complete",
        StopReason::Plateau => "plateau",
    };
    println!(
        "{} trials ({new} new, {} evaluator calls); stopped: {stop}",
        outcome.trials.len(),
        outcome.evaluations
    );
    if config.objective_count() == 1 {
        match &outcome.incumbent {
            Some(inc) => {
                // DIS descriptions bundle config and plan; `merge` wants the config alone
                let doc = match &space {
                    MergeSpace::Dis(s) => serde_json::to_value(s.decode(&inc.config)?)?,
                    _ => space.describe(&inc.config)?,
                };
                std::fs::write(out.join("incumbent.json"), serde_json::to_string_pretty(&doc)?)?;
                std::fs::write(out.join("incumbent_trial.json"), serde_json::to_string_pretty(&trial_summary(&space, inc)?)?)?;
                if let MergeSpace::Dis(s) = &space {
                    let plan = build_dis_plan(&s.decode(&inc.config)?, Some(&stores))?;
                    std::fs::write(out.join("incumbent.plan.json"), export_plan(&plan)?)?;
                }
                let cost = inc.costs.as_ref().and_then(|c| c.first()).copied().unwrap_or(f64::NAN);
                println!("incumbent: trial {} cost {cost:.6e}", inc.trial_id);
            }
            None => println!("no full-budget trial completed; no incumbent written"),
        }
    } else {
        let entries: Vec<Value> = outcome
            .pareto
            .entries()
            .iter()
            .map(|e| {
                Ok(json!({
                    "trial_id": e.trial_id,
                    "budget": e.costs.budget,
                    "costs": e.costs.costs,
                    "config": space.describe(&e.config)?,
                }))
            })
            .collect::<anyhow::Result<_>>()?;
        std::fs::write(out.join("pareto.json"), serde_json::to_string_pretty(&entries)?)?;
        println!("pareto set: {} entries", entries.len());
    }
    println!("outputs in {}", out.display());
    Ok(())
}

/// Writes to stdout, treating a closed pipe (e.g. `| head`) as success.
fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    use std::fmt::Write;
    let trials = load_trial_log(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    let rows = budget_report(&trials)?;
    let mut s = String::new();
    writeln!(s, "{:>10} {:>8} {:>8}", "budget", "trials", "percent")?;
    for r in &rows {
        writeln!(s, "{:>10} {:>8} {:>7.1}%", r.budget, r.count, r.percent)?;
    }
    writeln!(s, "{:>10} {:>8}", "total", trials.len())?;
    let traj = incumbent_trajectory(&trials, args.b_max);
    writeln!(s)?;
    if traj.is_empty() {
        writeln!(s, "no completed full-budget trials")?;
    } else {
        writeln!(s, "incumbent trajectory:")?;
        writeln!(s, "{:>10} {:>14}", "trial", "cost")?;
        for p in &traj {
            writeln!(s, "{:>10} {:>14.6e}", p.trial_id, p.cost)?;
        }
    }
    emit(&s)
}

fn cmd_validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let doc = read_json(&args.document)?;
    let stores = load_models(&args.models)?;
    let layers = args
        .layers
        .or_else(|| stores.values().next().map(|s| s.layer_count()));
    let Some(kind) = detect(&doc) else {
        return Err(invalid("unrecognized document: not a recipe, plan, DIS/SFS config or run config"));
    };
    let violations = docs::violations(kind, doc, &stores, layers);
    if violations.is_empty() {
        println!("valid {kind}");
        Ok(())
    } else {
        println!("invalid {kind}:");
        for v in &violations {
            println!("  - {v}");
        }
        Err(invalid(format!("{} violation(s) in {}", violations.len(), args.document.display())))
    }
}
