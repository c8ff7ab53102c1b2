//! Unicycle navigation with elliptical obstacles and higher-order control
//! barrier functions.
//!
//! State `(p_x, p_y, θ, v, w)`, control `(a, α)`, dynamics `ẋ = F(x) + Gu`
//! with `F = (v cosθ, v sinθ, w, 0, 0)` and `G` feeding `u` into `(v̇, ẇ)`.
//! Each obstacle contributes `h = ḣ_e + κh_e` and the constraint
//! `∇hᵀ(F + Gu) ≥ −αh`, which is affine in `u`.
//!
//! The formulas are written once over [`Expr`] so the same code runs on plain
//! floats and on the tape.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::constraints::{Bounds, ConstraintKind, ConstraintSet, LinearMap, Slack, TapeMap};
use crate::error::{Error, Result};
use crate::models::{BoundMlp, Mlp};
use crate::repair::{self, RepairConfig};
use crate::rng::substream;
use crate::scalar::Expr;
use crate::tensor::Tensor;
use crate::training::Adam;

pub const STATE_DIM: usize = 5;
pub const CONTROL_DIM: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnicycleState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v: f64,
    pub w: f64,
}

impl UnicycleState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64, w: f64) -> Self {
        UnicycleState { px, py, theta, v, w }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.px, self.py, self.theta, self.v, self.w]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        UnicycleState::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `F(x) + Gu`.
pub fn dynamics_expr<E: Expr<f64>>(s: [E; STATE_DIM], u: [E; CONTROL_DIM]) -> [E; STATE_DIM] {
    let [_, _, theta, v, w] = s;
    [v * theta.cos(), v * theta.sin(), w, u[0], u[1]]
}

pub fn dynamics(x: &UnicycleState, u: [f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
    dynamics_expr(x.to_array(), u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalObstacle {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    #[serde(default)]
    pub lookahead: f64,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl EllipticalObstacle {
    pub fn new(cx: f64, cy: f64, rx: f64, ry: f64) -> Self {
        EllipticalObstacle {
            cx,
            cy,
            rx,
            ry,
            lookahead: 0.0,
            kappa: 1.0,
            alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rx > 0.0 && self.ry > 0.0 && self.kappa > 0.0 && self.alpha > 0.0;
        if !ok || ![self.cx, self.cy, self.lookahead].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "obstacle needs positive axes and gains with finite center, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// CBF quantities of one obstacle at one state.
#[derive(Clone, Copy, Debug)]
pub struct CbfTerms<E> {
    pub he: E,
    pub he_dot: E,
    /// `h = ḣ_e + κh_e`.
    pub h: E,
    /// `∇h` with respect to the state.
    pub grad: [E; STATE_DIM],
    /// `∇hᵀG`, the constraint row acting on `u`.
    pub row: [E; CONTROL_DIM],
    /// `∇hᵀF + αh`; the constraint reads `row·u + offset ≥ 0`.
    pub offset: E,
}

pub fn cbf_terms<E: Expr<f64>>(s: [E; STATE_DIM], ob: &EllipticalObstacle) -> CbfTerms<E> {
    let [px, py, theta, v, w] = s;
    let (l, k) = (ob.lookahead, ob.kappa);
    let (rx, ry) = (ob.rx, ob.ry);
    let (c, sn) = (theta.cos(), theta.sin());
    // h_e = ((c_x − p_x + ℓcosθ)/r_x)² + ((c_y − p_y + ℓsinθ)/r_y)² − 1
    let a = (c * l - px + ob.cx) * (1.0 / rx);
    let b = (sn * l - py + ob.cy) * (1.0 / ry);
    let he = a.square() + b.square() - 1.0;
    // partials of h_e in p_x, p_y, θ
    let dpx = a * (-2.0 / rx);
    let dpy = b * (-2.0 / ry);
    let dth = a * sn * (-2.0 * l / rx) + b * c * (2.0 * l / ry);
    let he_dot = dpx * v * c + dpy * v * sn + dth * w;
    let h = he_dot + he * k;

    let dh_dv = dpx * c + dpy * sn;
    let dh_dw = dth;
    let dh_dpx = v * c * (2.0 / (rx * rx)) + w * sn * (2.0 * l / (rx * rx)) + dpx * k;
    let dh_dpy = v * sn * (2.0 / (ry * ry)) - w * c * (2.0 * l / (ry * ry)) + dpy * k;
    let ddpx_dth = sn * (2.0 * l / (rx * rx));
    let ddpy_dth = c * (-2.0 * l / (ry * ry));
    let ddth_dth = (sn.square() * (l / rx) - a * c) * (2.0 * l / rx) + (c.square() * (l / ry) - b * sn) * (2.0 * l / ry);
    let dh_dth = v * c * ddpx_dth - dpx * v * sn + v * sn * ddpy_dth + dpy * v * c + w * ddth_dth + dth * k;

    let grad = [dh_dpx, dh_dpy, dh_dth, dh_dv, dh_dw];
    let drift = dh_dpx * v * c + dh_dpy * v * sn + dh_dth * w;
    CbfTerms {
        he,
        he_dot,
        h,
        grad,
        row: [dh_dv, dh_dw],
        offset: drift + h * ob.alpha,
    }
}

impl<E: Expr<f64>> CbfTerms<E> {
    /// Row and offset divided by `sqrt(‖row‖² + 1e-12)`. The half-plane is
    /// unchanged, but rows of very different magnitude no longer dominate the
    /// `JᵀJ` of the repair step.
    pub fn normalized(&self) -> ([E; CONTROL_DIM], E) {
        let scale = (self.row[0].square() + self.row[1].square() + 1e-12).sqrt().recip();
        ([self.row[0] * scale, self.row[1] * scale], self.offset * scale)
    }
}

/// `h_e` of the lookahead point.
pub fn ellipse_value(x: &UnicycleState, ob: &EllipticalObstacle) -> f64 {
    cbf_terms(x.to_array(), ob).he
}

/// `h = ḣ_e + κh_e`.
pub fn cbf_value(x: &UnicycleState, ob: &EllipticalObstacle) -> f64 {
    cbf_terms(x.to_array(), ob).h
}

/// One lower-bounded row per obstacle: `∇h_jᵀG u ≥ −αh_j − ∇h_jᵀF`, each
/// row scaled by a positive factor (see [`CbfTerms::normalized`]).
pub fn cbf_constraint_set(x: &UnicycleState, obstacles: &[EllipticalObstacle]) -> Result<ConstraintSet<f64>> {
    let k = obstacles.len();
    let mut rows = Vec::with_capacity(k * CONTROL_DIM);
    let mut lower = Vec::with_capacity(k);
    for ob in obstacles {
        let (row, offset) = cbf_terms(x.to_array(), ob).normalized();
        rows.extend(row);
        lower.push(-offset);
    }
    let a = Tensor::matrix(k, CONTROL_DIM, rows)?;
    ConstraintSet::new(
        Arc::new(LinearMap::new(a)?),
        Bounds::lower_only(lower)?,
        vec![ConstraintKind::Cbf; k],
    )
}

/// `g(u) = Au + c ≥ 0` with `A` and `c` recorded on the tape, so gradients
/// reach the state through the constraint data.
pub struct CbfTapeMap<'t> {
    a: Var<'t, f64>,
    c: Var<'t, f64>,
}

impl<'t> CbfTapeMap<'t> {
    pub fn new(state: [Var<'t, f64>; STATE_DIM], obstacles: &[EllipticalObstacle]) -> Result<(Self, Bounds<f64>)> {
        let tape = state[0].tape();
        let mut rows = Vec::new();
        let mut offsets = Vec::new();
        for ob in obstacles {
            let (row, offset) = cbf_terms(state, ob).normalized();
            rows.extend(row);
            offsets.push(offset);
        }
        let a = tape.concat(&rows).reshape(&[obstacles.len(), CONTROL_DIM])?;
        let c = tape.concat(&offsets);
        Ok((CbfTapeMap { a, c }, Bounds::lower_only(vec![0.0; obstacles.len()])?))
    }
}

impl<'t> TapeMap<'t, f64> for CbfTapeMap<'t> {
    fn eval_on(&self, u: Var<'t, f64>) -> Var<'t, f64> {
        self.a.matmul(u).expect("control length matches") + self.c
    }

    fn jacobian_on(&self, _u: Var<'t, f64>) -> Var<'t, f64> {
        self.a
    }
}

/// Gains of the obstacle-unaware controller
/// `a = −k₁(p_x cosθ + p_y sinθ) − k₂v`, `α = k₃(p_x sinθ − p_y cosθ) − k₄w`:
/// accelerate along the heading toward the origin and turn toward it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

impl Default for NominalGains {
    fn default() -> Self {
        NominalGains {
            k1: 2.0,
            k2: 3.0,
            k3: 4.0,
            k4: 4.0,
        }
    }
}

impl NominalGains {
    pub fn zero() -> Self {
        NominalGains {
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            k4: 0.0,
        }
    }

    pub fn control_expr<E: Expr<f64>>(&self, s: [E; STATE_DIM]) -> [E; CONTROL_DIM] {
        let [px, py, theta, v, w] = s;
        let (c, sn) = (theta.cos(), theta.sin());
        let along = px * c + py * sn;
        let across = px * sn - py * c;
        [along * -self.k1 - v * self.k2, across * self.k3 - w * self.k4]
    }

    pub fn control(&self, x: &UnicycleState) -> [f64; CONTROL_DIM] {
        self.control_expr(x.to_array())
    }
}

/// Cost and integration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub dt: f64,
    /// Steps of the training horizon `n_t`.
    pub horizon: usize,
    /// Diagonal of the state cost.
    pub q: [f64; STATE_DIM],
    /// Control-effort weight.
    pub c: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            dt: 0.05,
            horizon: 10,
            q: [100.0, 100.0, 0.0, 0.1, 0.1],
            c: 0.1,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("rollout step must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    fn stage_cost<E: Expr<f64>>(&self, s: [E; STATE_DIM], u: [E; CONTROL_DIM]) -> E {
        let mut acc = u[0].square() * self.c + u[1].square() * self.c;
        for (si, &qi) in s.iter().zip(&self.q) {
            if qi != 0.0 {
                acc = acc + si.square() * qi;
            }
        }
        acc * self.dt
    }
}

/// Obstacles, controller gains and cost of a navigation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Free-form description of how the layout was chosen.
    #[serde(default)]
    pub note: String,
    pub obstacles: Vec<EllipticalObstacle>,
    #[serde(default)]
    pub nominal: NominalGains,
    #[serde(default)]
    pub rollout: RolloutConfig,
    /// Steps of inference rollouts.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    150
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.rollout.validate()?;
        self.obstacles.iter().try_for_each(EllipticalObstacle::validate)
    }

    /// Whether every obstacle has `h_e > 0` and `h > 0` at `x`.
    pub fn is_safe_start(&self, x: &UnicycleState) -> bool {
        self.obstacles.iter().all(|ob| {
            let t = cbf_terms(x.to_array(), ob);
            t.he > 0.0 && t.h > 0.0
        })
    }
}

/// `π(x) = π_nom(x) + M(x)`, optionally passed through LM repair onto the
/// CBF constraints of `obstacles`.
#[derive(Clone, Debug)]
pub struct SnarePolicy {
    pub nominal: NominalGains,
    pub correction: Option<Mlp<f64>>,
    pub obstacles: Vec<EllipticalObstacle>,
    /// `None` disables the safety repair.
    pub repair: Option<RepairConfig<f64>>,
}

impl SnarePolicy {
    /// Nominal controller only, no repair.
    pub fn nominal(gains: NominalGains) -> Self {
        SnarePolicy {
            nominal: gains,
            correction: None,
            obstacles: Vec::new(),
            repair: None,
        }
    }

    pub fn control(&self, x: &UnicycleState) -> Result<([f64; CONTROL_DIM], usize)> {
        let mut u = self.nominal.control(x);
        if let Some(m) = &self.correction {
            let d = m.forward(&x.to_array())?;
            u[0] += d[0];
            u[1] += d[1];
        }
        match &self.repair {
            Some(cfg) if !self.obstacles.is_empty() => {
                let cs = cbf_constraint_set(x, &self.obstacles)?;
                let (y, trace) = repair::snare_repair(&u, &cs, cfg)?;
                Ok(([y[0], y[1]], trace.corrective_iterations()))
            }
            _ => Ok((u, 0)),
        }
    }

    /// Repaired control on the tape; `bound` holds the correction network's parameters.
    pub fn control_on<'t>(
        &self,
        state: [Var<'t, f64>; STATE_DIM],
        bound: Option<&BoundMlp<'t, f64>>,
    ) -> Result<Var<'t, f64>> {
        let tape = state[0].tape();
        let mut u = tape.concat(&self.nominal.control_expr(state));
        if let Some(b) = bound {
            u = u + b.forward(tape.concat(&state))?;
        }
        match &self.repair {
            Some(cfg) if !self.obstacles.is_empty() => {
                let (map, bounds) = CbfTapeMap::new(state, &self.obstacles)?;
                Ok(repair::snare_repair_on(u, &map, &bounds, &cfg.with_slack(Slack::zero()))?.output)
            }
            _ => Ok(u),
        }
    }
}

/// States, controls and obstacle margins of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<UnicycleState>,
    /// Control evaluated at each state (the last one is not applied).
    pub controls: Vec<[f64; CONTROL_DIM]>,
    /// `h_e` of each obstacle at each state.
    pub he: Vec<Vec<f64>>,
    pub min_he: Vec<f64>,
    pub cost: f64,
    pub repair_iterations: Vec<usize>,
}

/// Explicit Euler rollout of `steps` steps under `policy`, reporting margins
/// for `obstacles`.
pub fn rollout(
    policy: &SnarePolicy,
    x0: UnicycleState,
    cfg: &RolloutConfig,
    steps: usize,
    obstacles: &[EllipticalObstacle],
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut x = x0;
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        he: Vec::with_capacity(steps + 1),
        min_he: vec![f64::INFINITY; obstacles.len()],
        cost: 0.0,
        repair_iterations: Vec::with_capacity(steps + 1),
    };
    for i in 0..=steps {
        if !x.is_finite() {
            return Err(Error::Numerical(format!("rollout state became nonfinite at step {i}")));
        }
        let (u, iters) = policy.control(&x)?;
        let he: Vec<f64> = obstacles.iter().map(|ob| ellipse_value(&x, ob)).collect();
        for (m, &v) in traj.min_he.iter_mut().zip(&he) {
            *m = m.min(v);
        }
        traj.cost += cfg.stage_cost(x.to_array(), u);
        traj.states.push(x);
        traj.controls.push(u);
        traj.he.push(he);
        traj.repair_iterations.push(iters);
        if i < steps {
            let d = dynamics(&x, u);
            let mut next = x.to_array();
            for (s, ds) in next.iter_mut().zip(d) {
                *s += cfg.dt * ds;
            }
            x = UnicycleState::from_array(next);
        }
    }
    Ok(traj)
}

/// Horizon cost `Δt Σᵢ xᵢᵀQxᵢ + c‖π(xᵢ)‖²` recorded on the tape.
pub fn rollout_cost_on<'t>(
    tape: &'t Tape<f64>,
    policy: &SnarePolicy,
    bound: Option<&BoundMlp<'t, f64>>,
    x0: &UnicycleState,
    cfg: &RolloutConfig,
) -> Result<Var<'t, f64>> {
    let mut state = x0.to_array().map(|v| tape.scalar_const(v));
    let mut cost = tape.scalar_const(0.0);
    for i in 0..=cfg.horizon {
        let u = policy.control_on(state, bound)?;
        let uu = [u.entry(0), u.entry(1)];
        cost = cost + cfg.stage_cost(state, uu);
        if i < cfg.horizon {
            let d = dynamics_expr(state, uu);
            for (s, ds) in state.iter_mut().zip(d) {
                *s = *s + ds * cfg.dt;
            }
        }
    }
    Ok(cost)
}

/// Uniform initial states: `p_x ∈ [−12, 2]`, `p_y ∈ [−2, 10]`,
/// `θ ∈ [−π/4, −π/8]`, zero velocities.
pub fn sample_initial_states(count: usize, seed: u64) -> Vec<UnicycleState> {
    let mut rng = substream(seed, "initial-states");
    (0..count).map(|_| draw_state(&mut rng)).collect()
}

fn draw_state(rng: &mut impl Rng) -> UnicycleState {
    use std::f64::consts::PI;
    UnicycleState::new(
        rng.random_range(-12.0..=2.0),
        rng.random_range(-2.0..=10.0),
        rng.random_range(-PI / 4.0..=-PI / 8.0),
        0.0,
        0.0,
    )
}

/// Like [`sample_initial_states`] but redraws states that start inside (or
/// on the boundary of) an obstacle.
pub fn sample_safe_initial_states(count: usize, seed: u64, scenario: &Scenario) -> Vec<UnicycleState> {
    let mut rng = substream(seed, "initial-states");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = draw_state(&mut rng);
        if scenario.is_safe_start(&x) {
            out.push(x);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub repair: RepairConfig<f64>,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            epochs: 20,
            samples: 256,
            batch_size: 32,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            seed: 0,
            repair: RepairConfig::default(),
        }
    }
}

pub struct PolicyTrainOutcome {
    pub policy: SnarePolicy,
    /// Mean horizon cost per epoch.
    pub losses: Vec<f64>,
}

/// Train the correction network by minimizing the horizon cost through the
/// repaired controls. The last layer starts at zero, so training begins from
/// the repaired nominal controller.
pub fn train_policy(scenario: &Scenario, cfg: &PolicyTrainConfig) -> Result<PolicyTrainOutcome> {
    scenario.validate()?;
    if cfg.epochs == 0 || cfg.samples == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs, samples and batch_size must be at least 1".into()));
    }
    cfg.repair.validate()?;
    let mut widths = vec![STATE_DIM];
    widths.extend(&cfg.hidden);
    widths.push(CONTROL_DIM);
    let init_seed: u64 = substream(cfg.seed, "init").random();
    let mut policy = SnarePolicy {
        nominal: scenario.nominal,
        correction: Some(Mlp::init(&widths, init_seed)?.zero_last_layer()),
        obstacles: scenario.obstacles.clone(),
        repair: Some(cfg.repair.clone()),
    };
    let starts = sample_safe_initial_states(cfg.samples, cfg.seed, scenario);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let mut shuffle = substream(cfg.seed, "shuffle");
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model = policy.correction.as_ref().expect("correction network");
            let results: Vec<(f64, Vec<Tensor<f64>>)> = batch
                .par_iter()
                .map(|&k| {
                    let tape = Tape::new();
                    let bound = model.bind(&tape);
                    let cost = rollout_cost_on(&tape, &policy, Some(&bound), &starts[k], &scenario.rollout)?;
                    let value = cost.item();
                    if !value.is_finite() {
                        return Err(Error::Numerical(format!(
                            "rollout cost is {value} for initial state {k} in epoch {epoch}"
                        )));
                    }
                    Ok((value, bound.gradients(&tape.backward(cost)?)))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor<f64>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (v, g) in &results {
                total += v;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(&gi.map(|x| x * scale));
                }
            }
            let model = policy.correction.as_mut().expect("correction network");
            adam.step(model.params_mut(), &grads);
        }
        losses.push(total / starts.len() as f64);
    }
    Ok(PolicyTrainOutcome { policy, losses })
}

/// CSV with `t, px, py, theta, v, w, a, alpha`, then `he_j` and the running
/// minimum `min_he_j` for each obstacle.
pub fn trajectory_csv(traj: &Trajectory, dt: f64) -> Result<String> {
    let k = traj.min_he.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["t", "px", "py", "theta", "v", "w", "a", "alpha"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|j| format!("he_{j}")));
    header.extend((0..k).map(|j| format!("min_he_{j}")));
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(err)?;
    let mut running = vec![f64::INFINITY; k];
    for (i, (x, u)) in traj.states.iter().zip(&traj.controls).enumerate() {
        let mut rec = vec![(i as f64 * dt).to_string()];
        rec.extend(x.to_array().iter().map(|v| v.to_string()));
        rec.extend(u.iter().map(|v| v.to_string()));
        for (m, &h) in running.iter_mut().zip(&traj.he[i]) {
            *m = m.min(h);
        }
        rec.extend(traj.he[i].iter().map(|v| v.to_string()));
        rec.extend(running.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
