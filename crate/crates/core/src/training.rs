//! Self-supervised training of an [`Mlp`] on a problem family.
//!
//! In snare mode every output passes through LM repair whose bounds are
//! relaxed per instance by `ε_x^(t) = ε₀_x · max(0, 1 − t/T_d)`, where `ε₀_x`
//! is the violation of the untrained network on `x`; the loss is the family
//! objective at the repaired output. Baseline modes train with the soft
//! penalty loss instead.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::constraints::{self, Bounds, ConstraintSet, Slack, TapeMap};
use crate::error::{Error, Result};
use crate::evaluation::{self, hard_layer, InstanceMetrics, Method, Predictor};
use crate::models::Mlp;
use crate::problems::{Dataset, Split};
use crate::repair::{self, gradient_correction_on, RepairConfig};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Snare,
    Soft,
    SoftEpochsThenHard,
    PenaltyGrad,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Snare => "snare",
            Mode::Soft => "soft",
            Mode::SoftEpochsThenHard => "soft-epochs-then-hard",
            Mode::PenaltyGrad => "penalty-grad",
        }
    }

    /// The inference method matching this training mode.
    pub fn method(self) -> Method {
        match self {
            Mode::Snare => Method::Snare,
            Mode::Soft => Method::Soft,
            Mode::SoftEpochsThenHard => Method::SoftEpochsThenHard,
            Mode::PenaltyGrad => Method::PenaltyGrad,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snare" => Ok(Mode::Snare),
            "soft" => Ok(Mode::Soft),
            "soft-epochs-then-hard" => Ok(Mode::SoftEpochsThenHard),
            "penalty-grad" => Ok(Mode::PenaltyGrad),
            other => Err(Error::Config(format!(
                "unknown training mode `{other}` (expected snare, soft, soft-epochs-then-hard or penalty-grad)"
            ))),
        }
    }
}

/// What the loss compares the final output against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Minimize the family objective `f_x(y̌)`.
    #[default]
    Objective,
    /// Regress onto cached oracle solutions, `‖y̌ − y*‖²`.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub target: Target,
    pub epochs: usize,
    /// Relaxation horizon `T_d`; slack is exactly zero from this epoch on.
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mu_upper: f64,
    pub mu_lower: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub repair: RepairConfig<f64>,
    /// Epochs without the hard layer in soft-epochs-then-hard mode.
    pub soft_epochs: usize,
    pub correction_steps: usize,
    pub correction_step_size: f64,
    /// Compute validation curves every epoch (needs oracle solutions for gaps).
    pub track_validation: bool,
    /// Start from a network whose last layer is zero, so `ŷ = 0` for every
    /// input and `ε₀` is the violation of the origin.
    pub zero_output_init: bool,
    /// Rescale each batch gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Snare,
            target: Target::Objective,
            epochs: 200,
            decay_epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            mu_upper: 10.0,
            mu_lower: 10.0,
            hidden: vec![200, 200],
            seed: 0,
            repair: RepairConfig::default(),
            soft_epochs: 50,
            correction_steps: 10,
            correction_step_size: 0.01,
            track_validation: true,
            zero_output_init: true,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.mode == Mode::Snare && self.decay_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "decay horizon ({}) must be shorter than the run ({} epochs) so the last epochs train with exact feasibility",
                self.decay_epochs, self.epochs
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.mu_upper >= 0.0) || !(self.mu_lower >= 0.0) {
            return Err(Error::Config("learning rate and penalty weights must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.repair.validate()
    }

    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(output);
        w
    }
}

/// Per-instance slack `ε₀_x` with linear decay to zero at `T_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSchedule {
    pub initial: Vec<f64>,
    pub decay_epochs: usize,
}

impl RelaxationSchedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epochs {
            0.0
        } else {
            1.0 - epoch as f64 / self.decay_epochs as f64
        }
    }

    pub fn slack(&self, k: usize, epoch: usize) -> f64 {
        let f = self.factor(epoch);
        if f == 0.0 {
            0.0
        } else {
            self.initial[k] * f
        }
    }

    pub fn slacks(&self, epoch: usize) -> Vec<f64> {
        (0..self.initial.len()).map(|k| self.slack(k, epoch)).collect()
    }
}

/// `ε₀_x`: max violation of the model's raw output on each listed instance.
pub fn init_slack(model: &Mlp<f64>, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .par_iter()
        .map(|&i| {
            let x = &ds.instances[i].x;
            let y = model.forward(x)?;
            Ok(ds.family.constraint_set(x)?.max_violation(&y, &Slack::zero()))
        })
        .collect()
}

/// `μ_u‖ReLU(g(ŷ) − u)‖² + μ_ℓ‖ReLU(ℓ − g(ŷ))‖²` on the tape.
pub fn soft_penalty<'t, M: TapeMap<'t, f64> + ?Sized>(
    y: Var<'t, f64>,
    map: &M,
    bounds: &Bounds<f64>,
    mu_upper: f64,
    mu_lower: f64,
) -> Var<'t, f64> {
    let tape = y.tape();
    let g = map.eval_on(y);
    // infinite bounds contribute nothing; replace them by huge finite values
    // so the masks stay finite
    let finite = |v: &[f64], fill: f64| -> Vec<f64> { v.iter().map(|&b| if b.is_finite() { b } else { fill }).collect() };
    let upper = tape.vector_const(&finite(bounds.upper(), f64::MAX));
    let lower = tape.vector_const(&finite(bounds.lower(), -f64::MAX));
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().map(|b| if b.is_finite() { 1.0 } else { 0.0 }).collect() };
    let over = (g - upper).relu() * tape.vector_const(&mask(bounds.upper()));
    let under = (lower - g).relu() * tape.vector_const(&mask(bounds.lower()));
    over.squared_norm().scale(mu_upper) + under.squared_norm().scale(mu_lower)
}

/// Base loss plus [`soft_penalty`].
pub fn soft_loss<'t>(
    y: Var<'t, f64>,
    cs: &ConstraintSet<f64>,
    base: Var<'t, f64>,
    mu_upper: f64,
    mu_lower: f64,
) -> Var<'t, f64> {
    base + soft_penalty(y, cs.map(), cs.bounds(), mu_upper, mu_lower)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the validation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    pub gmean_opt_gap: f64,
    pub max_opt_gap: f64,
    pub gmean_ineq_viol: f64,
    pub max_ineq_viol: f64,
    pub gmean_eq_viol: f64,
    pub max_eq_viol: f64,
}

/// Training-set diagnostics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub max_slack: f64,
    /// LM updates summed over every training output of the epoch.
    pub corrective_iterations: usize,
    /// Worst violation of the final training outputs against the original bounds.
    pub max_output_violation: f64,
}

pub struct TrainOutcome {
    pub model: Mlp<f64>,
    pub curves: Vec<EpochRecord>,
    pub stats: Vec<EpochStats>,
    /// `None` outside snare mode.
    pub schedule: Option<RelaxationSchedule>,
    /// Slack of the validation instances at epoch 0.
    pub valid_slack: Option<Vec<f64>>,
}

struct Sample {
    loss: f64,
    grads: Vec<Tensor<f64>>,
    iterations: usize,
    violation: f64,
}

fn train_sample(
    model: &Mlp<f64>,
    ds: &Dataset,
    index: usize,
    cfg: &TrainConfig,
    epoch: usize,
    slack: f64,
) -> Result<Sample> {
    let inst = &ds.instances[index];
    let cs = ds.family.constraint_set(&inst.x)?;
    let tape = Tape::new();
    let x = tape.vector_const(&inst.x);
    let (y_hat, bound) = model.forward_on(x)?;
    let mut iterations = 0;
    let soft_phase = match cfg.mode {
        Mode::Soft | Mode::PenaltyGrad => true,
        Mode::SoftEpochsThenHard => epoch < cfg.soft_epochs,
        Mode::Snare => false,
    };
    let y = match cfg.mode {
        Mode::Soft => y_hat,
        Mode::Snare => {
            let rep = repair::snare_repair_on(y_hat, cs.map(), cs.bounds(), &cfg.repair.with_slack(Slack::Uniform(slack)))?;
            iterations = rep.trace.corrective_iterations();
            rep.output
        }
        Mode::SoftEpochsThenHard if soft_phase => y_hat,
        Mode::SoftEpochsThenHard => match hard_layer(&cs) {
            Some(layer) => layer.apply_on(y_hat),
            None => {
                let rep = repair::snare_repair_on(y_hat, cs.map(), cs.bounds(), &cfg.repair.with_slack(Slack::zero()))?;
                iterations = rep.trace.corrective_iterations();
                rep.output
            }
        },
        Mode::PenaltyGrad => gradient_correction_on(y_hat, cs.map(), cs.bounds(), cfg.correction_steps, cfg.correction_step_size),
    };
    let base = match cfg.target {
        Target::Objective => ds.family.objective_on(y),
        Target::Supervised => {
            let star = tape.vector_const(&ds.solution(index)?.y);
            (y - star).squared_norm()
        }
    };
    let loss = if soft_phase {
        soft_loss(y, &cs, base, cfg.mu_upper, cfg.mu_lower)
    } else {
        base
    };
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "loss is {value} on training instance {index} in epoch {epoch}"
        )));
    }
    let grads = bound.gradients(&tape.backward(loss)?);
    let violation = constraints::max_violation(&cs.eval(&y.to_vec()), cs.bounds(), &Slack::zero());
    Ok(Sample {
        loss: value,
        grads,
        iterations,
        violation,
    })
}

fn predictor<'a>(model: &'a Mlp<f64>, cfg: &TrainConfig, epoch: usize) -> Predictor<'a> {
    let mut method = cfg.mode.method();
    if cfg.mode == Mode::SoftEpochsThenHard && epoch < cfg.soft_epochs {
        method = Method::Soft;
    }
    Predictor {
        repair: cfg.repair.clone(),
        correction_steps: cfg.correction_steps,
        correction_step_size: cfg.correction_step_size,
        ..Predictor::new(method, model)
    }
}

fn curve_row(epoch: usize, seed: u64, rows: &[InstanceMetrics]) -> Result<EpochRecord> {
    let r = evaluation::aggregate(Method::Soft, seed, None, rows)?;
    Ok(EpochRecord {
        epoch,
        seed,
        gmean_opt_gap: r.gmean_opt_gap,
        max_opt_gap: r.max_opt_gap,
        gmean_ineq_viol: r.gmean_ineq_error,
        max_ineq_viol: r.max_ineq_error,
        gmean_eq_viol: r.gmean_eq_error,
        max_eq_viol: r.max_eq_error,
    })
}

/// Train from a fresh initialization derived from `cfg.seed`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let widths = cfg.widths(ds.family.n_eq(), ds.family.n());
    let init_seed = {
        use rand::Rng;
        substream(cfg.seed, "init").random::<u64>()
    };
    let mut model = Mlp::init(&widths, init_seed)?;
    if cfg.zero_output_init {
        model = model.zero_last_layer();
    }
    train_from(ds, cfg, model)
}

/// Train starting from `model`.
pub fn train_from(ds: &Dataset, cfg: &TrainConfig, mut model: Mlp<f64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    let valid_idx = ds.indices(Split::Valid);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training instances".into()));
    }
    let snare = cfg.mode == Mode::Snare;
    let schedule = if snare {
        Some(RelaxationSchedule {
            initial: init_slack(&model, ds, &train_idx)?,
            decay_epochs: cfg.decay_epochs,
        })
    } else {
        None
    };
    let valid_schedule = if snare {
        Some(RelaxationSchedule {
            initial: init_slack(&model, ds, &valid_idx)?,
            decay_epochs: cfg.decay_epochs,
        })
    } else {
        None
    };
    // position of each dataset index inside the training list
    let mut slot = vec![usize::MAX; ds.instances.len()];
    for (k, &i) in train_idx.iter().enumerate() {
        slot[i] = k;
    }

    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut order = train_idx.clone();
    let mut curves = Vec::new();
    let mut stats = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut iterations = 0;
        let mut worst = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample> = batch
                .par_iter()
                .map(|&i| {
                    let slack = schedule.as_ref().map_or(0.0, |s| s.slack(slot[i], epoch));
                    train_sample(&model, ds, i, cfg, epoch, slack)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor<f64>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for s in &samples {
                loss_sum += s.loss;
                iterations += s.iterations;
                worst = worst.max(s.violation);
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    acc.add_assign(&g.map(|v| v * scale));
                }
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let k = clip / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
                }
            }
            adam.step(model.params_mut(), &grads);
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / train_idx.len() as f64,
            max_slack: schedule
                .as_ref()
                .map_or(0.0, |s| s.slacks(epoch).into_iter().fold(0.0, f64::max)),
            corrective_iterations: iterations,
            max_output_violation: worst,
        });
        if cfg.track_validation && !valid_idx.is_empty() {
            let slacks = valid_schedule.as_ref().map(|s| s.slacks(epoch));
            let p = predictor(&model, cfg, epoch);
            let rows = evaluation::evaluate_indices(&p, ds, &valid_idx, slacks.as_deref(), false)?;
            curves.push(curve_row(epoch, cfg.seed, &rows)?);
        }
    }
    Ok(TrainOutcome {
        model,
        curves,
        stats,
        schedule,
        valid_slack: valid_schedule.map(|s| s.initial),
    })
}

/// Validation curve CSV with the fixed column order of [`EpochRecord`].
pub fn curves_to_csv(rows: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "seed",
            "gmean_opt_gap",
            "max_opt_gap",
            "gmean_ineq_viol",
            "max_ineq_viol",
            "gmean_eq_viol",
            "max_eq_viol",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate, oracle, FamilyKind, GenerateConfig};

    #[test]
    fn schedule_decays_linearly_to_zero() {
        let s = RelaxationSchedule {
            initial: vec![2.0, 0.0],
            decay_epochs: 4,
        };
        let got: Vec<f64> = (0..7).map(|t| s.slack(0, t)).collect();
        assert_eq!(got, vec![2.0, 1.5, 1.0, 0.5, 0.0, 0.0, 0.0]);
        assert!((0..7).all(|t| s.slack(1, t) == 0.0));
    }

    #[test]
    fn soft_penalty_by_hand() {
        // one upper bound violated by v = 0.5 with μ_u = 2 adds 2·0.25
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cs = ConstraintSet::linear(a, Bounds::new(vec![f64::NEG_INFINITY, -1.0], vec![1.0, 1.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let y = tape.vector_var(&[1.5, 0.0]);
        let base = tape.scalar_const(3.0);
        assert_eq!(soft_loss(y, &cs, base, 2.0, 7.0).item(), 3.5);
        let feasible = tape.vector_var(&[0.0, 0.0]);
        assert_eq!(soft_loss(feasible, &cs, base, 2.0, 7.0).item(), 3.0);
        assert_eq!(soft_loss(y, &cs, base, 0.0, 0.0).item(), 3.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let mut adam = Adam::new(0.1);
        adam.step(vec![&mut p], &[Tensor::vector(vec![3.0, -0.5])]);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 0.9).abs() < 1e-7);
    }

    fn small_dataset() -> Dataset {
        let mut ds = generate(&GenerateConfig::new(FamilyKind::Ncp, 6, 3, 3, 40, 5)).unwrap();
        oracle::solve_dataset(&mut ds, &oracle::OracleConfig::default());
        ds
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            decay_epochs: 0,
            learning_rate: 0.0,
            hidden: vec![8],
            ..Default::default()
        };
        let init = Mlp::init(&cfg.widths(3, 6), 1).unwrap();
        let out = train_from(&ds, &cfg, init.clone()).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.curves.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            decay_epochs: 2,
            hidden: vec![8],
            batch_size: 8,
            ..Default::default()
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curves, b.curves);
    }

    #[test]
    fn snare_mode_is_feasible_after_horizon() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 6,
            decay_epochs: 3,
            hidden: vec![16],
            batch_size: 8,
            ..Default::default()
        };
        let out = train(&ds, &cfg).unwrap();
        for s in &out.stats[3..] {
            assert_eq!(s.max_slack, 0.0);
            assert!(s.max_output_violation <= cfg.repair.tol, "{s:?}");
        }
        for r in &out.curves[3..] {
            assert!(r.max_ineq_viol <= 1e-6 && r.max_eq_viol <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn decay_must_end_before_last_epoch() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            epochs: 5,
            decay_epochs: 5,
            ..Default::default()
        };
        assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
    }
}
