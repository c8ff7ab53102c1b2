//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are printed
//! without `--nocapture`. The process fails when a criterion fails, except for
//! the ones listed in `KNOWN_FAILURES`, which are reported but tolerated; the
//! README explains why each of them cannot be met.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use snare_core::constraints::{box_project, two_disks, Slack};
use snare_core::control::{rollout, sample_safe_initial_states, train_policy, PolicyTrainConfig, Scenario, SnarePolicy};
use snare_core::evaluation::{evaluate, tol_sweep, Method, MetricsReport, Predictor};
use snare_core::problems::{self, oracle, Dataset, FamilyKind, GenerateConfig, SolveStatus, Split};
use snare_core::repair::{hardnet_repair, snare_repair, snare_repair_on, HardNetLayer, RepairConfig};
use snare_core::rng::substream;
use snare_core::training::{init_slack, train, train_from, Mode, TrainConfig};
use snare_core::{Bounds, ConstraintSet, Mlp, Tape, Tensor};

/// Criteria that are expected to print FAIL; see the README.
const KNOWN_FAILURES: &[u32] = &[6];

const SEEDS: [u64; 3] = [0, 1, 2];
const QCQP_LAMBDA: f64 = 10.0;
const EVAL_MAX_ITERS: usize = 1000;

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn report(id: u32, start: Instant, pass: bool, detail: String) -> Verdict {
    let v = Verdict {
        id,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} criterion {}: {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.id,
        v.detail,
        v.seconds
    );
    v
}

fn desk_qcqp() -> Dataset {
    let mut ds = problems::generate(&GenerateConfig::new(FamilyKind::Qcqp, 20, 10, 10, 1000, 7)).expect("generate");
    oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
    ds
}

fn qcqp_train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        epochs: 100,
        decay_epochs: 66,
        track_validation: false,
        repair: RepairConfig {
            lambda: QCQP_LAMBDA,
            ..RepairConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn snare_predictor(model: &Mlp) -> Predictor<'_> {
    Predictor {
        repair: RepairConfig {
            lambda: QCQP_LAMBDA,
            max_iters: EVAL_MAX_ITERS,
            ..RepairConfig::default()
        },
        ..Predictor::new(Method::Snare, model)
    }
}

struct SeedRun {
    sweep: Vec<MetricsReport>,
    snare: MetricsReport,
    penalty_grad: MetricsReport,
    posthoc: MetricsReport,
    snare_seconds: f64,
}

fn qcqp_runs(ds: &Dataset) -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let snare = train(ds, &qcqp_train_config(Mode::Snare, seed)).expect("snare training").model;
            let p = snare_predictor(&snare);
            let sweep = tol_sweep(&p, ds, Split::Test, seed, &[1e-4, 1e-6, 1e-8]).expect("sweep");
            let snare_report = evaluate(&p, ds, Split::Test, seed).expect("snare eval");
            let snare_seconds = t.elapsed().as_secs_f64();

            let pg = train(ds, &qcqp_train_config(Mode::PenaltyGrad, seed)).expect("penalty-grad training").model;
            let penalty_grad = evaluate(&Predictor::new(Method::PenaltyGrad, &pg), ds, Split::Test, seed).expect("pg eval");

            let soft = train(ds, &qcqp_train_config(Mode::Soft, seed)).expect("soft training").model;
            let posthoc = evaluate(&Predictor::new(Method::Posthoc, &soft), ds, Split::Test, seed).expect("posthoc eval");
            SeedRun {
                sweep,
                snare: snare_report,
                penalty_grad,
                posthoc,
                snare_seconds,
            }
        })
        .collect()
}

fn criterion_1(runs: &[SeedRun], start: Instant) -> Verdict {
    let mut pass = true;
    let mut worst = Vec::new();
    for run in runs {
        for r in &run.sweep {
            let tol = r.tol.expect("sweep rows carry tol");
            pass &= r.max_eq_error <= tol && r.max_ineq_error <= tol;
            worst.push(format!("tol {tol:.0e}: eq {:.1e} ineq {:.1e}", r.max_eq_error, r.max_ineq_error));
        }
    }
    let minutes = runs.iter().map(|r| r.snare_seconds).sum::<f64>() / 60.0;
    pass &= minutes < 15.0;
    report(
        1,
        start,
        pass,
        format!("QCQP desk set, 3 seeds, snare training + sweep {minutes:.1} min; {}", worst.join("; ")),
    )
}

fn criterion_6(runs: &[SeedRun], start: Instant) -> Verdict {
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let snare = mean(&|r| r.snare.gmean_opt_gap);
    let posthoc = mean(&|r| r.posthoc.gmean_opt_gap);
    let pg = mean(&|r| r.penalty_grad.gmean_opt_gap);
    let pg_eq = mean(&|r| r.penalty_grad.max_eq_error);
    report(
        6,
        start,
        snare < posthoc && snare < pg,
        format!(
            "gmean gap snare {snare:.3e} vs posthoc {posthoc:.3e} ({}) vs penalty-grad {pg:.3e} ({}; its max eq error {pg_eq:.1e})",
            if snare < posthoc { "lower" } else { "not lower" },
            if snare < pg { "lower" } else { "not lower" },
        ),
    )
}

fn random_full_row_rank(rng: &mut impl Rng) -> (Tensor, Bounds) {
    loop {
        let n = rng.random_range(2..=6);
        let m = rng.random_range(1..n);
        let a: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
        let a = Tensor::matrix(m, n, a).expect("shape");
        let mut lower = Vec::with_capacity(m);
        let mut upper = Vec::with_capacity(m);
        for _ in 0..m {
            let lo: f64 = rng.random_range(-1.0..0.5);
            let hi = lo + rng.random_range(0.0..1.5);
            lower.push(if rng.random_bool(0.2) { f64::NEG_INFINITY } else { lo });
            upper.push(if rng.random_bool(0.2) { f64::INFINITY } else { hi });
        }
        let bounds = Bounds::new(lower, upper).expect("ordered bounds");
        if HardNetLayer::new(a.clone(), bounds.clone()).is_ok() {
            return (a, bounds);
        }
    }
}

fn criterion_2(start: Instant) -> Verdict {
    let mut rng = substream(2, "hardnet-reduction");
    let cfg = RepairConfig {
        lambda: 0.0,
        ..RepairConfig::default()
    };
    let (mut worst_diff, mut worst_case, mut bad_iters) = (0.0f64, 0.0f64, 0);
    let mut systems = 0;
    while systems < 1000 {
        let (a, bounds) = random_full_row_rank(&mut rng);
        let n = a.cols();
        let y_hat: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let cs = ConstraintSet::linear(a.clone(), bounds.clone()).expect("set");
        if cs.is_feasible(&y_hat, cfg.tol) {
            continue;
        }
        systems += 1;
        let (y, trace) = snare_repair(&y_hat, &cs, &cfg).expect("repair");
        let h = hardnet_repair(&y_hat, &a, &bounds).expect("hardnet");
        if trace.corrective_iterations() != 1 {
            bad_iters += 1;
        }
        worst_diff = y.iter().zip(&h).fold(worst_diff, |w, (p, q)| w.max((p - q).abs()));
        // row by row: inside rows keep their value, violated rows land on the violated bound
        let before = cs.eval(&y_hat);
        let after = cs.eval(&h);
        for i in 0..before.len() {
            let want = before[i].clamp(bounds.lower()[i], bounds.upper()[i]);
            worst_case = worst_case.max((after[i] - want).abs());
        }
    }
    report(
        2,
        start,
        bad_iters == 0 && worst_diff <= 1e-10 && worst_case <= 1e-9,
        format!(
            "1000 systems: {bad_iters} not in one iteration, max |snare − hardnet| {worst_diff:.1e}, max row case error {worst_case:.1e}"
        ),
    )
}

fn criterion_3(start: Instant) -> Verdict {
    let cs = two_disks::<f64>();
    let z = box_project(&cs.eval(&[-1.0, 0.0]), cs.bounds(), &Slack::zero());
    let exact = z == vec![0.0, 2.25];

    let residual = |y: &[f64]| -> f64 {
        let g = cs.eval(y);
        ((g[0] - z[0]).powi(2) + (g[1] - z[1]).powi(2)).sqrt()
    };
    let mut rng = substream(3, "preimage");
    let mut sampled = f64::INFINITY;
    for _ in 0..100_000 {
        let y = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        sampled = sampled.min(residual(&y));
    }
    // descent on ‖g(y) − z‖² from 100 starts
    let mut descended = f64::INFINITY;
    for _ in 0..100 {
        let mut y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        for _ in 0..5000 {
            let g = cs.eval(&y);
            let j = cs.jacobian(&y);
            let r = [g[0] - z[0], g[1] - z[1]];
            let grad = [
                2.0 * (j.at(0, 0) * r[0] + j.at(1, 0) * r[1]),
                2.0 * (j.at(0, 1) * r[0] + j.at(1, 1) * r[1]),
            ];
            let obj = r[0] * r[0] + r[1] * r[1];
            let mut step = 0.1;
            loop {
                let trial = [y[0] - step * grad[0], y[1] - step * grad[1]];
                let rt = residual(&trial);
                if rt * rt <= obj - 1e-4 * step * (grad[0] * grad[0] + grad[1] * grad[1]) || step < 1e-12 {
                    y = trial;
                    break;
                }
                step *= 0.5;
            }
        }
        descended = descended.min(residual(&y));
    }
    let cfg = RepairConfig {
        lambda: 0.1,
        tol: 1e-8,
        ..RepairConfig::default()
    };
    let (y, trace) = snare_repair(&[-1.0, 0.0], &cs, &cfg).expect("repair");
    let g = cs.eval(&y);
    let feasible = trace.converged() && g.iter().all(|&v| v <= 2.25 + 1e-8);
    report(
        3,
        start,
        exact && sampled >= 0.1 && descended >= 0.1 && feasible,
        format!(
            "box projection {z:?}; min residual sampled {sampled:.3}, descended {descended:.3}; repaired g = ({:.10}, {:.10}) in {} iterations",
            g[0],
            g[1],
            trace.corrective_iterations()
        ),
    )
}

fn criterion_4(start: Instant) -> Verdict {
    let cs = two_disks::<f64>();
    let mut model = Mlp::init(&[3, 6, 2], 4).expect("mlp");
    // shift the output into the region where the right disk is violated
    {
        let mut params = model.params_mut();
        let bias = params.pop().expect("bias");
        bias.data_mut().copy_from_slice(&[-1.2, 0.3]);
    }
    let x = [0.3, -0.7, 0.5];
    let cfg = RepairConfig {
        lambda: 0.1,
        tol: 1e-300,
        step_tol: 0.0,
        max_iters: 5,
        ..RepairConfig::default()
    };
    let loss_of = |m: &Mlp| -> f64 {
        let tape = Tape::new();
        let (y_hat, _) = m.forward_on(tape.vector_const(&x)).expect("forward");
        let y = snare_repair_on(y_hat, cs.map(), cs.bounds(), &cfg).expect("repair").output;
        (y.squared_norm() + y.sum()).item()
    };
    let tape = Tape::new();
    let (y_hat, bound) = model.forward_on(tape.vector_const(&x)).expect("forward");
    let rep = snare_repair_on(y_hat, cs.map(), cs.bounds(), &cfg).expect("repair");
    let active = rep.trace.violations[0] > 0.0;
    let loss = rep.output.squared_norm() + rep.output.sum();
    let grads = bound.gradients(&tape.backward(loss).expect("backward"));

    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let base = model.params()[k].data().to_vec();
        let fd = common::central_diff(
            |theta| {
                let mut m = model.clone();
                m.params_mut()[k].data_mut().copy_from_slice(theta);
                loss_of(&m)
            },
            &base,
            1e-6,
        );
        worst = worst.max(common::rel_err(g.data(), &fd, 1e-12));
    }
    report(
        4,
        start,
        active && worst < 1e-4,
        format!("widths [3, 6, 2], two disks, repair active = {active}; worst per-tensor relative error {worst:.2e}"),
    )
}

fn criterion_5(start: Instant) -> Verdict {
    let mut ds = problems::generate(&GenerateConfig::new(FamilyKind::Ncp, 20, 10, 10, 1000, 5)).expect("generate");
    oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
    let cfg = TrainConfig {
        mode: Mode::Snare,
        epochs: 50,
        decay_epochs: 25,
        seed: 0,
        ..TrainConfig::default()
    };
    let init = Mlp::init(&cfg.widths(10, 20), 11).expect("mlp").zero_last_layer();
    let train_idx = ds.indices(Split::Train);
    let eps0 = init_slack(&init, &ds, &train_idx).expect("slack");
    let mut noop_violations = 0;
    for (k, &i) in train_idx.iter().enumerate() {
        let cs = ds.constraint_set(i).expect("set");
        let y_hat = init.forward(&ds.instances[i].x).expect("forward");
        let (_, trace) = snare_repair(&y_hat, &cs, &cfg.repair.with_slack(Slack::Uniform(eps0[k]))).expect("repair");
        noop_violations += (trace.corrective_iterations() != 0) as usize;
    }
    let out = train_from(&ds, &cfg, init).expect("training");
    let schedule = out.schedule.expect("snare schedule");
    let same_eps0 = schedule.initial == eps0;
    let mut monotone = true;
    for k in 0..eps0.len() {
        for t in 1..cfg.epochs {
            monotone &= schedule.slack(k, t) <= schedule.slack(k, t - 1);
        }
        for t in cfg.decay_epochs..cfg.epochs {
            monotone &= schedule.slack(k, t) == 0.0;
        }
    }
    let post = out.stats[cfg.decay_epochs..]
        .iter()
        .fold(0.0f64, |w, s| w.max(s.max_output_violation));
    report(
        5,
        start,
        noop_violations == 0 && same_eps0 && monotone && post <= cfg.repair.tol,
        format!(
            "NCP desk run, 50 epochs, T_d 25: {noop_violations} instances repaired at init, schedule monotone and zero after T_d = {monotone}, worst post-horizon training violation {post:.1e} (tol {:.0e})",
            cfg.repair.tol
        ),
    )
}

fn criterion_7(start: Instant) -> Verdict {
    let mut ds = problems::generate(&GenerateConfig::new(FamilyKind::Ncp, 20, 10, 60, 500, 9)).expect("generate");
    oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
    let rejected = (0..ds.instances.len())
        .all(|i| HardNetLayer::from_constraints(&ds.constraint_set(i).expect("set")).is_err());
    let cfg = TrainConfig {
        mode: Mode::Snare,
        epochs: 10,
        decay_epochs: 5,
        track_validation: false,
        ..TrainConfig::default()
    };
    let model = train(&ds, &cfg).expect("training").model;
    let p = Predictor {
        repair: RepairConfig {
            tol: 1e-4,
            max_iters: EVAL_MAX_ITERS,
            ..RepairConfig::default()
        },
        ..Predictor::new(Method::Snare, &model)
    };
    let r = evaluate(&p, &ds, Split::Test, 0).expect("eval");
    let feasible = r.max_ineq_error <= 1e-4 && r.max_eq_error <= 1e-4;
    report(
        7,
        start,
        rejected && feasible,
        format!(
            "NCP n=20, 60 inequalities, {} test instances: closed-form layer rejects all = {rejected}; snare max ineq {:.1e}, max eq {:.1e}",
            ds.indices(Split::Test).len(),
            r.max_ineq_error,
            r.max_eq_error
        ),
    )
}

fn criterion_8(start: Instant) -> Verdict {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", "three_obstacles.json"].iter().collect();
    let sc = Scenario::load(&path).expect("scenario");
    let trained = train_policy(
        &sc,
        &PolicyTrainConfig {
            seed: 1,
            ..PolicyTrainConfig::default()
        },
    )
    .expect("policy training")
    .policy;
    let mut worst = f64::INFINITY;
    let mut nominal_hits = 0;
    for x0 in sample_safe_initial_states(20, 0, &sc) {
        let t = rollout(&trained, x0, &sc.rollout, sc.steps, &sc.obstacles).expect("rollout");
        worst = t.min_he.iter().fold(worst, |w, &h| w.min(h));
        let bare = rollout(&SnarePolicy::nominal(sc.nominal), x0, &sc.rollout, sc.steps, &sc.obstacles).expect("rollout");
        nominal_hits += bare.min_he.iter().any(|&h| h < 0.0) as usize;
    }
    report(
        8,
        start,
        worst >= -1e-3 && nominal_hits > 0,
        format!("3 obstacles, 20 starts: trained policy worst min h_e {worst:.3e}; nominal enters an obstacle on {nominal_hits} starts"),
    )
}

fn criterion_9(qcqp: &Dataset, start: Instant) -> Verdict {
    let mut worst_grid = 0.0f64;
    for kind in [FamilyKind::Ncp, FamilyKind::Qcqp] {
        let ds = problems::generate(&GenerateConfig::new(kind, 2, 1, 2, 50, 13)).expect("generate");
        for (i, inst) in ds.instances.iter().enumerate() {
            let sol = oracle::solve(&ds.family, &inst.x, i as u64, &oracle::OracleConfig::default());
            let (f_grid, _) = common::line_grid_min(&ds.family, &inst.x, 20.0).expect("feasible line");
            worst_grid = worst_grid.max((sol.objective - f_grid).abs());
        }
    }
    let kkt = qcqp
        .instances
        .iter()
        .map(|inst| inst.solution.as_ref().expect("solved"))
        .fold(0.0f64, |w, s| w.max(s.residual));
    let statuses_ok = qcqp
        .instances
        .iter()
        .all(|inst| inst.solution.as_ref().is_some_and(|s| s.status == SolveStatus::Optimal));
    report(
        9,
        start,
        worst_grid <= 1e-3 && kkt <= 1e-8 && statuses_ok,
        format!("2-D grid search worst |Δf| {worst_grid:.1e} over 100 instances; desk QCQP worst KKT residual {kkt:.1e}"),
    )
}

fn main() {
    println!("acceptance suite");
    let mut verdicts = Vec::new();
    verdicts.push(criterion_2(Instant::now()));
    verdicts.push(criterion_3(Instant::now()));
    verdicts.push(criterion_4(Instant::now()));

    let start = Instant::now();
    let qcqp = desk_qcqp();
    verdicts.push(criterion_9(&qcqp, start));
    let start = Instant::now();
    let runs = qcqp_runs(&qcqp);
    verdicts.push(criterion_1(&runs, start));
    verdicts.push(criterion_6(&runs, Instant::now()));

    verdicts.push(criterion_5(Instant::now()));
    verdicts.push(criterion_7(Instant::now()));
    verdicts.push(criterion_8(Instant::now()));

    verdicts.sort_by_key(|v| v.id);
    println!("summary");
    let mut unexpected = Vec::new();
    for v in &verdicts {
        let known = KNOWN_FAILURES.contains(&v.id);
        println!(
            "  {} criterion {}{}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            if !v.pass && known { " (known, see README)" } else { "" }
        );
        if !v.pass && !known {
            unexpected.push(v.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
