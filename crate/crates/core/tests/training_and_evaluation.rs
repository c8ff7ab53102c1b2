use rand::Rng;
use snare_core::constraints::Slack;
use snare_core::control::sample_initial_states;
use snare_core::evaluation::{instance_metrics, Prediction};
use snare_core::problems::{self, oracle, Dataset, Family, FamilyKind, GenerateConfig, Inequalities, Instance, Split};
use snare_core::repair::snare_repair;
use snare_core::rng::substream;
use snare_core::training::{init_slack, soft_loss, train, Mode, TrainConfig};
use snare_core::{Mlp, RepairConfig, Tape, Tensor};

/// `y₁ ≤ 1` and `y₂ = x` on two variables, one instance at `x = 0`.
fn half_plane() -> Dataset {
    let family = Family::new(
        Tensor::identity(2),
        vec![0.0, 0.0],
        Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        Inequalities::Linear {
            a: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            b: vec![1.0],
        },
        0,
    )
    .unwrap();
    let instances = vec![Instance {
        x: vec![0.0],
        split: Split::Train,
        solution: None,
    }];
    Dataset { family, instances }
}

fn constant_model(output: [f64; 2]) -> Mlp {
    let mut m = Mlp::init(&[1, 4, 2], 0).unwrap().zero_last_layer();
    m.params_mut().pop().unwrap().data_mut().copy_from_slice(&output);
    m
}

#[test]
fn initial_slack_is_the_raw_violation() {
    let ds = half_plane();
    let model = constant_model([4.5, 0.0]);
    assert_eq!(init_slack(&model, &ds, &[0]).unwrap(), vec![3.5]);
    assert_eq!(init_slack(&constant_model([0.5, 0.0]), &ds, &[0]).unwrap(), vec![0.0]);

    // relaxed by its own initial slack, the raw output needs no repair
    let cs = ds.constraint_set(0).unwrap();
    let cfg = RepairConfig::default().with_slack(Slack::Uniform(3.5));
    let (y, trace) = snare_repair(&[4.5, 0.0], &cs, &cfg).unwrap();
    assert_eq!(trace.corrective_iterations(), 0);
    assert_eq!(y, vec![4.5, 0.0]);
}

#[test]
fn soft_loss_adds_the_weighted_squared_excess() {
    let cs = half_plane().constraint_set(0).unwrap();
    let tape = Tape::new();
    // y₁ exceeds its bound by 0.5: 1 + 2·0.5² = 1.5
    let y = tape.vector_var(&[1.5, 0.0]);
    assert_eq!(soft_loss(y, &cs, tape.scalar_const(1.0), 2.0, 7.0).item(), 1.5);
    let y = tape.vector_var(&[0.5, 0.0]);
    assert_eq!(soft_loss(y, &cs, tape.scalar_const(1.0), 2.0, 7.0).item(), 1.0);
}

#[test]
fn zero_penalty_soft_training_never_repairs() {
    // with μ = 0 soft mode is plain regression on the objective
    let mut ds = problems::generate(&GenerateConfig::new(FamilyKind::Qcqp, 4, 1, 1, 40, 3)).unwrap();
    oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
    let cfg = TrainConfig {
        mode: Mode::Soft,
        epochs: 3,
        decay_epochs: 1,
        hidden: vec![8],
        mu_upper: 0.0,
        mu_lower: 0.0,
        track_validation: false,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    assert!(out.stats.iter().all(|s| s.corrective_iterations == 0));
    assert!(out.schedule.is_none());
}

#[test]
fn oracle_predictions_have_no_gap_and_feasible_ones_no_negative_gap() {
    let mut ds = problems::generate(&GenerateConfig::new(FamilyKind::Qcqp, 6, 2, 3, 20, 41)).unwrap();
    oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
    let mut rng = substream(41, "feasible-predictions");
    let cfg = RepairConfig {
        lambda: 0.1,
        tol: 1e-10,
        max_iters: 500,
        ..RepairConfig::default()
    };
    let mut checked = 0;
    for k in 0..ds.instances.len() {
        let sol = ds.solution(k).unwrap().clone();
        let at_oracle = Prediction {
            y: sol.y.clone(),
            corrective_iterations: 0,
            seconds: 0.0,
        };
        let m = instance_metrics(&ds, k, &at_oracle, true).unwrap();
        assert_eq!(m.gap, Some(0.0));
        assert!(m.eq_max <= 1e-8 && m.ineq_max <= 1e-8);

        // any feasible point of a convex instance costs at least f*
        let cs = ds.constraint_set(k).unwrap();
        let start: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (y, trace) = snare_repair(&start, &cs, &cfg).unwrap();
        if trace.converged() {
            checked += 1;
            let gap = ds.family.objective(&y) - sol.objective;
            assert!(gap >= -1e-8, "instance {k}: feasible point beats the oracle by {gap}");
        }
    }
    assert!(checked > 10, "only {checked} repairs converged");
}

#[test]
fn initial_states_fill_their_boxes_uniformly() {
    use std::f64::consts::PI;
    let states = sample_initial_states(10_000, 5);
    let count = states.len() as f64;
    let check = |values: Vec<f64>, lo: f64, hi: f64| {
        assert!(values.iter().all(|v| (lo..=hi).contains(v)));
        let mean = values.iter().sum::<f64>() / count;
        let sigma = (hi - lo) / 12f64.sqrt() / count.sqrt();
        assert!((mean - 0.5 * (lo + hi)).abs() < 3.0 * sigma, "mean {mean} on [{lo}, {hi}]");
    };
    check(states.iter().map(|s| s.px).collect(), -12.0, 2.0);
    check(states.iter().map(|s| s.py).collect(), -2.0, 10.0);
    check(states.iter().map(|s| s.theta).collect(), -PI / 4.0, -PI / 8.0);
    assert!(states.iter().all(|s| s.v == 0.0 && s.w == 0.0));
    assert_eq!(sample_initial_states(50, 5), sample_initial_states(50, 5));
}
