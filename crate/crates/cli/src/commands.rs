//! Command implementations. Each returns a JSON summary for `--json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use snare_core::control::{self, PolicyTrainConfig, Scenario, SnarePolicy};
use snare_core::evaluation::{self, Method, MetricsReport, Predictor};
use snare_core::files::write_atomic;
use snare_core::models::Checkpoint;
use snare_core::problems::{self, oracle, Dataset, FamilyKind, GenerateConfig, Split};
use snare_core::training::{self, EpochStats, Mode, TrainConfig};
use snare_core::{Error, Mlp, RepairConfig};

use crate::config::FileConfig;
use crate::manifest::RunManifest;
use crate::{CompareArgs, EvalArgs, GenerateArgs, RolloutArgs, TrainArgs, TrainFlags};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{context}{source}")]
    Core { context: String, source: Error },
}

impl From<Error> for CliError {
    fn from(source: Error) -> Self {
        CliError::Core {
            context: String::new(),
            source,
        }
    }
}

impl CliError {
    /// 2 for usage and validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core { source, .. } => match source {
                Error::Numerical(_) | Error::Singular(_) | Error::Generation(_) | Error::Contract(_) => 3,
                _ => 2,
            },
        }
    }
}

fn with_seed(seed: u64) -> impl Fn(Error) -> CliError {
    move |source| CliError::Core {
        context: format!("seed {seed}: "),
        source,
    }
}

/// Trained dataset model plus what inference needs to reproduce training.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub mode: Mode,
    pub method: Method,
    pub seed: u64,
    pub repair: RepairConfig,
    pub correction_steps: usize,
    pub correction_step_size: f64,
    pub model: Checkpoint,
}

/// Trained correction network of a control policy.
#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub scenario: String,
    pub seed: u64,
    pub repair: RepairConfig,
    pub model: Checkpoint,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed {what} {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(problems::load_dataset(path)?)
}

fn csv_rows<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn seed_list(flags: &TrainFlags, file: &FileConfig) -> Result<Vec<u64>, CliError> {
    let count = flags.seeds.or(file.seeds).unwrap_or(1);
    if count == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let first = flags.seed.or(file.seed).unwrap_or(0);
    Ok((first..first + count as u64).collect())
}

fn repair_config(flags: &TrainFlags, file: &FileConfig) -> RepairConfig {
    let d = RepairConfig::default();
    RepairConfig {
        lambda: flags.lambda.or(file.lambda).unwrap_or(d.lambda),
        tol: flags.tol.or(file.tol).unwrap_or(d.tol),
        max_iters: flags.max_iters.or(file.max_iters).unwrap_or(d.max_iters),
        ..d
    }
}

fn train_config(mode: Mode, flags: &TrainFlags, file: &FileConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let epochs = flags.epochs.or(file.epochs).unwrap_or(d.epochs);
    let cfg = TrainConfig {
        mode,
        epochs,
        decay_epochs: flags.decay.or(file.decay).unwrap_or(epochs / 2),
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        learning_rate: flags.lr.or(file.lr).unwrap_or(d.learning_rate),
        mu_upper: file.mu_upper.unwrap_or(d.mu_upper),
        mu_lower: file.mu_lower.unwrap_or(d.mu_lower),
        hidden: flags.hidden.clone().or(file.hidden.clone()).unwrap_or(d.hidden.clone()),
        repair: repair_config(flags, file),
        soft_epochs: file.soft_epochs.unwrap_or((epochs / 4).max(1)),
        grad_clip: file.grad_clip.or(d.grad_clip),
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

pub fn generate(a: &GenerateArgs, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    let family = a
        .family
        .clone()
        .or(file.family.clone())
        .ok_or_else(|| CliError::Usage("--family is required (ncp or qcqp)".into()))?;
    let kind: FamilyKind = family.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let cfg = GenerateConfig::new(
        kind,
        a.n.or(file.n).unwrap_or(20),
        a.neq.or(file.neq).unwrap_or(10),
        a.nineq.or(file.nineq).unwrap_or(10),
        a.count.or(file.count).unwrap_or(1000),
        a.seed.or(file.seed).unwrap_or(0),
    );
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut ds = problems::generate(&cfg)?;
    let mut worst_residual = None;
    if !a.no_oracle {
        oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
        worst_residual = ds
            .instances
            .iter()
            .filter_map(|i| i.solution.as_ref())
            .map(|s| s.residual)
            .reduce(f64::max);
    }
    problems::save_dataset(&ds, &a.out)?;
    let config = serde_json::to_value(&cfg).expect("config serializes");
    Ok(json!({
        "message": format!("wrote {} instances to {}", ds.instances.len(), a.out.display()),
        "dataset": a.out,
        "config_hash": crate::manifest::config_hash(&config),
        "instances": ds.instances.len(),
        "worst_oracle_residual": worst_residual,
    }))
}

fn train_dataset_seed(ds: &Dataset, cfg: &TrainConfig, seed: u64, out: &Path, tag: &str) -> Result<(PathBuf, Vec<PathBuf>, Mlp), CliError> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = training::train(ds, &cfg).map_err(with_seed(seed))?;
    let ck = RunCheckpoint {
        mode: cfg.mode,
        method: cfg.mode.method(),
        seed,
        repair: cfg.repair.clone(),
        correction_steps: cfg.correction_steps,
        correction_step_size: cfg.correction_step_size,
        model: outcome.model.to_checkpoint(),
    };
    let ck_path = out.join(format!("{tag}ckpt_seed{seed}.json"));
    write_text(&ck_path, &serde_json::to_string_pretty(&ck).expect("checkpoint serializes"))?;
    let curves_path = out.join(format!("{tag}curves_seed{seed}.csv"));
    write_text(&curves_path, &training::curves_to_csv(&outcome.curves)?)?;
    let stats_path = out.join(format!("{tag}stats_seed{seed}.csv"));
    write_text(&stats_path, &csv_rows::<EpochStats>(&outcome.stats)?)?;
    Ok((ck_path, vec![curves_path, stats_path], outcome.model))
}

pub fn train(a: &TrainArgs, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    if let Some(scenario) = &a.scenario {
        return train_policy(a, scenario, file);
    }
    let dataset = a
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Usage("train needs --dataset or --scenario".into()))?;
    let ds = load_dataset(dataset)?;
    let mode = parse_mode(a.mode.as_deref().or(file.mode.as_deref()).unwrap_or("snare"))?;
    let cfg = train_config(mode, &a.flags, file)?;
    let seeds = seed_list(&a.flags, file)?;
    let config = json!({"dataset": dataset, "seeds": seeds, "train": cfg});
    let mut manifest = RunManifest::new("train", config);
    manifest.seeds = seeds.clone();
    manifest.dataset = Some(dataset.clone());
    for &seed in &seeds {
        let (ck, reports, _) = train_dataset_seed(&ds, &cfg, seed, &a.out, "")?;
        manifest.checkpoints.push(ck);
        manifest.reports.extend(reports);
    }
    let path = manifest.write(&a.out)?;
    Ok(json!({
        "message": format!("trained {} seed(s) in {} mode; manifest {}", seeds.len(), mode, path.display()),
        "manifest": path,
        "config_hash": manifest.config_hash,
        "checkpoints": manifest.checkpoints,
    }))
}

fn train_policy(a: &TrainArgs, scenario_path: &Path, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    let scenario = Scenario::load(scenario_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let d = PolicyTrainConfig::default();
    let base = PolicyTrainConfig {
        epochs: a.flags.epochs.or(file.epochs).unwrap_or(d.epochs),
        samples: file.samples.unwrap_or(d.samples),
        batch_size: a.flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        learning_rate: a.flags.lr.or(file.lr).unwrap_or(d.learning_rate),
        hidden: a.flags.hidden.clone().or(file.hidden.clone()).unwrap_or(d.hidden.clone()),
        repair: repair_config(&a.flags, file),
        ..d
    };
    let seeds = seed_list(&a.flags, file)?;
    let config = json!({"scenario": scenario_path, "seeds": seeds, "policy": base});
    let mut manifest = RunManifest::new("train", config);
    manifest.seeds = seeds.clone();
    let mut final_costs = Vec::new();
    for &seed in &seeds {
        let cfg = PolicyTrainConfig { seed, ..base.clone() };
        let outcome = control::train_policy(&scenario, &cfg).map_err(with_seed(seed))?;
        let model = outcome.policy.correction.as_ref().expect("trained policy has a network");
        let ck = PolicyCheckpoint {
            scenario: scenario.name.clone(),
            seed,
            repair: cfg.repair.clone(),
            model: model.to_checkpoint(),
        };
        let ck_path = a.out.join(format!("policy_seed{seed}.json"));
        write_text(&ck_path, &serde_json::to_string_pretty(&ck).expect("checkpoint serializes"))?;
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            mean_cost: f64,
        }
        let rows: Vec<Row> = outcome
            .losses
            .iter()
            .enumerate()
            .map(|(epoch, &mean_cost)| Row { epoch, mean_cost })
            .collect();
        let loss_path = a.out.join(format!("policy_losses_seed{seed}.csv"));
        write_text(&loss_path, &csv_rows(&rows)?)?;
        final_costs.push(outcome.losses.last().copied());
        manifest.checkpoints.push(ck_path);
        manifest.reports.push(loss_path);
    }
    let path = manifest.write(&a.out)?;
    Ok(json!({
        "message": format!("trained {} policy seed(s) for scenario {}; manifest {}", seeds.len(), scenario.name, path.display()),
        "manifest": path,
        "config_hash": manifest.config_hash,
        "checkpoints": manifest.checkpoints,
        "final_costs": final_costs,
    }))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}` (expected train, valid or test)"))),
    }
}

fn eval_reports(
    ds: &Dataset,
    model: &Mlp,
    method: Method,
    seed: u64,
    repair: RepairConfig,
    correction: (usize, f64),
    split: Split,
    tols: Option<&[f64]>,
) -> Result<Vec<MetricsReport>, CliError> {
    let p = Predictor {
        repair,
        correction_steps: correction.0,
        correction_step_size: correction.1,
        ..Predictor::new(method, model)
    };
    let rows = match tols {
        Some(t) if method == Method::Snare => evaluation::tol_sweep(&p, ds, split, seed, t),
        _ => evaluation::evaluate(&p, ds, split, seed).map(|r| vec![r]),
    };
    rows.map_err(with_seed(seed))
}

pub fn eval(a: &EvalArgs, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    for ck in &a.checkpoints {
        if !ck.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", ck.display())));
        }
    }
    let ds = load_dataset(&a.dataset)?;
    let split = parse_split(&a.split)?;
    let method_override = a
        .method
        .as_deref()
        .map(|m| m.parse::<Method>().map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    let tols = a.tol_sweep.clone().or(file.tol_sweep.clone());
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for path in &a.checkpoints {
        let ck: RunCheckpoint = read_json(path, "checkpoint")?;
        let model = Mlp::from_checkpoint(&ck.model)?;
        let repair = RepairConfig {
            lambda: a.lambda.or(file.lambda).unwrap_or(ck.repair.lambda),
            max_iters: a.max_iters.or(file.eval_max_iters).unwrap_or(ck.repair.max_iters),
            ..ck.repair.clone()
        };
        let method = method_override.unwrap_or(ck.method);
        reports.extend(eval_reports(
            &ds,
            &model,
            method,
            ck.seed,
            repair,
            (ck.correction_steps, ck.correction_step_size),
            split,
            tols.as_deref(),
        )?);
        seeds.push(ck.seed);
    }
    write_text(&a.out, &evaluation::reports_to_csv(&reports)?)?;
    let config = json!({
        "dataset": a.dataset,
        "checkpoints": a.checkpoints,
        "method": method_override,
        "tol_sweep": tols,
        "lambda": a.lambda.or(file.lambda),
        "max_iters": a.max_iters.or(file.eval_max_iters),
        "split": a.split,
    });
    let mut manifest = RunManifest::new("eval", config);
    manifest.seeds = seeds;
    manifest.dataset = Some(a.dataset.clone());
    manifest.checkpoints = a.checkpoints.clone();
    manifest.reports = vec![a.out.clone()];
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let path = manifest.write_named(dir, "eval-manifest.json")?;
    Ok(json!({
        "message": format!("wrote {} report row(s) to {}", reports.len(), a.out.display()),
        "manifest": path,
        "config_hash": manifest.config_hash,
        "reports": reports,
    }))
}

pub fn rollout(a: &RolloutArgs, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    let sc = Scenario::load(&a.scenario).map_err(|e| CliError::Usage(e.to_string()))?;
    let steps = a.steps.or(file.steps).unwrap_or(sc.steps);
    let starts = a.starts.or(file.starts).unwrap_or(1);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let mut policy = SnarePolicy {
        obstacles: sc.obstacles.clone(),
        repair: (!sc.obstacles.is_empty()).then(RepairConfig::default),
        ..SnarePolicy::nominal(sc.nominal)
    };
    if let Some(path) = &a.checkpoint {
        let ck: PolicyCheckpoint = read_json(path, "policy checkpoint")?;
        policy.correction = Some(Mlp::from_checkpoint(&ck.model)?);
        policy.repair = Some(ck.repair);
    }
    if a.no_repair {
        policy.repair = None;
    }
    let config = json!({
        "scenario": a.scenario,
        "checkpoint": a.checkpoint,
        "steps": steps,
        "starts": starts,
        "seed": seed,
        "repair": policy.repair,
    });
    let mut manifest = RunManifest::new("rollout", config);
    manifest.seeds = vec![seed];
    manifest.checkpoints = a.checkpoint.iter().cloned().collect();
    let mut summary = Vec::new();
    for (k, x0) in control::sample_safe_initial_states(starts, seed, &sc).into_iter().enumerate() {
        let traj = control::rollout(&policy, x0, &sc.rollout, steps, &sc.obstacles)?;
        let path = a.out.join(format!("trajectory_{k}.csv"));
        write_text(&path, &control::trajectory_csv(&traj, sc.rollout.dt)?)?;
        let end = traj.states.last().expect("trajectory holds the initial state");
        summary.push(json!({
            "start": x0.to_array(),
            "end": end.to_array(),
            "min_he": traj.min_he,
            "cost": traj.cost,
            "csv": path,
        }));
        manifest.reports.push(path);
    }
    let path = manifest.write(&a.out)?;
    Ok(json!({
        "message": format!("wrote {starts} trajectory file(s) to {}", a.out.display()),
        "manifest": path,
        "config_hash": manifest.config_hash,
        "trajectories": summary,
    }))
}

pub fn compare(a: &CompareArgs, file: &FileConfig) -> Result<serde_json::Value, CliError> {
    let ds = load_dataset(&a.dataset)?;
    let seeds = seed_list(&a.flags, file)?;
    let base = train_config(Mode::Snare, &a.flags, file)?;
    let soft_epochs = a.soft_epochs.or(file.soft_epochs).unwrap_or(base.soft_epochs);
    let eval_repair = RepairConfig {
        max_iters: file.eval_max_iters.unwrap_or(base.repair.max_iters),
        ..base.repair.clone()
    };
    let config = json!({"dataset": a.dataset, "seeds": seeds, "train": base, "soft_epochs": soft_epochs, "eval_repair": eval_repair});
    let mut manifest = RunManifest::new("compare", config);
    manifest.seeds = seeds.clone();
    manifest.dataset = Some(a.dataset.clone());
    let mut reports = Vec::new();
    for mode in [Mode::Snare, Mode::Soft, Mode::SoftEpochsThenHard, Mode::PenaltyGrad] {
        let cfg = TrainConfig {
            mode,
            soft_epochs,
            ..base.clone()
        };
        cfg.validate()?;
        for &seed in &seeds {
            let (ck, curves, model) = train_dataset_seed(&ds, &cfg, seed, &a.out, &format!("{mode}_"))?;
            manifest.checkpoints.push(ck);
            manifest.reports.extend(curves);
            let correction = (cfg.correction_steps, cfg.correction_step_size);
            let methods: &[Method] = if mode == Mode::Soft { &[Method::Soft, Method::Posthoc] } else { &[mode.method()] };
            for &method in methods {
                reports.extend(eval_reports(&ds, &model, method, seed, eval_repair.clone(), correction, Split::Test, None)?);
            }
        }
    }
    let report_path = a.out.join("report.csv");
    write_text(&report_path, &evaluation::reports_to_csv(&reports)?)?;
    let summary = evaluation::summarize(&reports);
    let summary_path = a.out.join("summary.csv");
    write_text(&summary_path, &evaluation::summary_to_csv(&summary)?)?;
    manifest.reports.push(report_path.clone());
    manifest.reports.push(summary_path);
    let path = manifest.write(&a.out)?;
    let gaps: Vec<_> = summary
        .iter()
        .map(|s| json!({"method": s.method, "tol": s.tol, "metrics": s}))
        .collect();
    Ok(json!({
        "message": format!("compared 5 methods over {} seed(s); report {}", seeds.len(), report_path.display()),
        "manifest": path,
        "config_hash": manifest.config_hash,
        "summary": gaps,
    }))
}
