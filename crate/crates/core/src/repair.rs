//! Repair layers mapping a raw prediction `ŷ` to a (relaxed-)feasible `y̌`.
//!
//! * [`snare_repair_on`] / [`snare_repair`]: Levenberg–Marquardt iterations
//!   `y ← y − (JᵀJ + λI)⁻¹Jᵀ(g(y) − z)` with `z` the clamp of `g(y)` into the
//!   slack-relaxed box. Recorded on the tape by unrolling the executed
//!   iterations, so `∂y̌/∂ŷ` is exact for the path actually taken.
//! * [`HardNetLayer`]: the closed form `ŷ + A⁺δ(Aŷ)` for linear constraints
//!   with full row rank.
//! * [`posthoc_project`]: off-tape Euclidean projection by an augmented
//!   Lagrangian method, for post-processing baselines.
//! * [`gradient_correction_on`]: fixed-count gradient steps on the squared
//!   violation, a simplified stand-in for correction-style baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::constraints::{self, box_excess_on, Bounds, ConstraintSet, Slack, TapeMap};
use crate::error::{Error, Result};
use crate::linalg::{self, Qr, SpdFactor};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Parameters of the LM repair iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig<T> {
    /// LM regularization weight `λ ≥ 0`.
    pub lambda: T,
    /// Stop once the max violation against the relaxed bounds is at most `tol`.
    pub tol: T,
    /// Stop once `‖y^{k+1} − y^k‖∞ ≤ step_tol`.
    pub step_tol: T,
    pub max_iters: usize,
    pub slack: Slack<T>,
}

impl<T: Real> Default for RepairConfig<T> {
    fn default() -> Self {
        RepairConfig {
            lambda: T::of(0.01),
            tol: T::of(1e-6),
            step_tol: T::of(1e-12),
            max_iters: 50,
            slack: Slack::zero(),
        }
    }
}

impl<T: Real> RepairConfig<T> {
    pub fn with_slack(&self, slack: Slack<T>) -> Self {
        RepairConfig {
            slack,
            ..self.clone()
        }
    }

    pub fn with_tol(&self, tol: T) -> Self {
        RepairConfig { tol, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(Error::Config(format!("repair tol must be positive, got {}", self.tol)));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("repair max_iters must be at least 1".into()));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("LM weight must be nonnegative, got {}", self.lambda)));
        }
        if !(self.step_tol >= T::zero()) {
            return Err(Error::Config("step_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Why the repair iterations stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    TolMet,
    StepSmall,
    IterCap,
}

/// Iterates and per-iterate violations of one repair call.
#[derive(Clone, Debug, PartialEq)]
pub struct RepairTrace<T> {
    pub iterates: Vec<Vec<T>>,
    /// Max violation of each iterate against the relaxed bounds.
    pub violations: Vec<T>,
    pub termination: Termination,
}

/// JSON view of a [`RepairTrace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterates: usize,
    pub violations: Vec<f64>,
    pub termination: Termination,
}

impl<T: Real> RepairTrace<T> {
    /// Number of LM updates performed (0 when `ŷ` was already feasible).
    pub fn corrective_iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn final_violation(&self) -> T {
        self.violations.last().copied().unwrap_or(T::zero())
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::TolMet
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            iterates: self.iterates.len(),
            violations: self.violations.iter().map(|v| v.as_f64()).collect(),
            termination: self.termination,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.summary()).expect("trace serializes")
    }
}

/// Output of [`snare_repair_on`].
pub struct Repaired<'t, T: Real> {
    pub output: Var<'t, T>,
    pub trace: RepairTrace<T>,
}

/// LM repair recorded on the tape.
///
/// Returns the last iterate with [`Termination::IterCap`] when the cap is hit
/// before reaching `tol`; it does not fail in that case. A singular solve at
/// `λ = 0` is an error.
pub fn snare_repair_on<'t, T: Real, M: TapeMap<'t, T> + ?Sized>(
    y_hat: Var<'t, T>,
    map: &M,
    bounds: &Bounds<T>,
    cfg: &RepairConfig<T>,
) -> Result<Repaired<'t, T>> {
    cfg.validate()?;
    cfg.slack.validate(bounds.len())?;
    let tape = y_hat.tape();
    let mut y = y_hat;
    let mut iterates = vec![y.to_vec()];
    let mut violations = Vec::new();
    let mut termination = Termination::IterCap;
    for k in 0..=cfg.max_iters {
        let g = map.eval_on(y);
        let viol = constraints::max_violation(g.value().data(), bounds, &cfg.slack);
        violations.push(viol);
        if viol <= cfg.tol {
            termination = Termination::TolMet;
            break;
        }
        if k == cfg.max_iters {
            break;
        }
        let residual = box_excess_on(g, bounds, &cfg.slack);
        let jac = map.jacobian_on(y);
        let step = tape.regularized_solve(jac, residual, cfg.lambda)?;
        let step_size = linalg::norm_inf(step.value().data());
        y = y - step;
        iterates.push(y.to_vec());
        if step_size <= cfg.step_tol {
            let g = map.eval_on(y);
            violations.push(constraints::max_violation(g.value().data(), bounds, &cfg.slack));
            termination = Termination::StepSmall;
            break;
        }
    }
    Ok(Repaired {
        output: y,
        trace: RepairTrace {
            iterates,
            violations,
            termination,
        },
    })
}

/// Off-tape LM repair.
pub fn snare_repair<T: Real>(
    y_hat: &[T],
    cs: &ConstraintSet<T>,
    cfg: &RepairConfig<T>,
) -> Result<(Vec<T>, RepairTrace<T>)> {
    cfg.validate()?;
    cfg.slack.validate(cs.num_constraints())?;
    if y_hat.len() != cs.num_vars() {
        return Err(Error::shape(
            "snare_repair",
            format!("prediction has length {}, constraints act on {}", y_hat.len(), cs.num_vars()),
        ));
    }
    let bounds = cs.bounds();
    let (lo, hi) = bounds.relaxed(&cfg.slack);
    let mut y = y_hat.to_vec();
    let mut iterates = vec![y.clone()];
    let mut violations = Vec::new();
    let mut termination = Termination::IterCap;
    for k in 0..=cfg.max_iters {
        let g = cs.eval(&y);
        let viol = constraints::max_violation(&g, bounds, &cfg.slack);
        violations.push(viol);
        if viol <= cfg.tol {
            termination = Termination::TolMet;
            break;
        }
        if k == cfg.max_iters {
            break;
        }
        let residual: Vec<T> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| {
                if lo[i].is_finite() && gi < lo[i] {
                    gi - lo[i]
                } else if hi[i].is_finite() && gi > hi[i] {
                    gi - hi[i]
                } else {
                    T::zero()
                }
            })
            .collect();
        let step = linalg::regularized_solve(&cs.jacobian(&y), &residual, cfg.lambda)?.step;
        for (yi, si) in y.iter_mut().zip(&step) {
            *yi -= *si;
        }
        iterates.push(y.clone());
        if linalg::norm_inf(&step) <= cfg.step_tol {
            violations.push(cs.max_violation(&y, &cfg.slack));
            termination = Termination::StepSmall;
            break;
        }
    }
    Ok((
        y,
        RepairTrace {
            iterates,
            violations,
            termination,
        },
    ))
}

/// Closed-form repair `R(ŷ) = ŷ + A⁺δ(Aŷ; ℓ, u)` for linear constraints.
///
/// Rows violated below land on `ℓᵢ`, rows violated above on `uᵢ`, satisfied
/// rows keep `aᵢᵀŷ`. Requires full row rank (checked once, at construction,
/// with singular-value threshold `1e-10·σ_max`).
#[derive(Clone, Debug)]
pub struct HardNetLayer<T: Real> {
    a: Tensor<T>,
    pinv: Tensor<T>,
    bounds: Bounds<T>,
}

impl<T: Real> HardNetLayer<T> {
    pub fn new(a: Tensor<T>, bounds: Bounds<T>) -> Result<Self> {
        let (m, n) = (a.rows(), a.cols());
        if a.rank() != 2 || bounds.len() != m {
            return Err(Error::shape(
                "hardnet",
                format!("matrix {:?} with {} bounds", a.shape(), bounds.len()),
            ));
        }
        let rank = linalg::numerical_rank(&a, T::of(1e-10));
        if rank < m {
            return Err(Error::Precondition(format!(
                "the closed-form layer needs full row rank, but the {m}x{n} constraint matrix has rank {rank}; use the LM repair layer instead"
            )));
        }
        // Aᵀ = QR  ⇒  A⁺ = Aᵀ(AAᵀ)⁻¹ = Q R⁻ᵀ
        let at = linalg::transpose(&a);
        let qr = Qr::factor(at.data(), n, m)?;
        let mut pinv = vec![T::zero(); n * m];
        for j in 0..m {
            let mut e = vec![T::zero(); m];
            e[j] = T::one();
            let mut v = qr.rt_solve(&e);
            v.resize(n, T::zero());
            let col = qr.q_apply(&v);
            for i in 0..n {
                pinv[i * m + j] = col[i];
            }
        }
        Ok(HardNetLayer {
            a,
            pinv: Tensor::matrix(n, m, pinv)?,
            bounds,
        })
    }

    pub fn from_constraints(cs: &ConstraintSet<T>) -> Result<Self> {
        if !cs.is_linear() {
            return Err(Error::Precondition(
                "the closed-form layer only handles linear constraints; use the LM repair layer".into(),
            ));
        }
        let a = cs.jacobian(&vec![T::zero(); cs.num_vars()]);
        Self::new(a, cs.bounds().clone())
    }

    pub fn pseudo_inverse(&self) -> &Tensor<T> {
        &self.pinv
    }

    pub fn apply(&self, y_hat: &[T]) -> Vec<T> {
        let (m, n) = (self.a.rows(), self.a.cols());
        let ay = linalg::matvec_raw(self.a.data(), m, n, y_hat);
        let delta = constraints::correction_vector(&ay, &self.bounds);
        let fix = linalg::matvec_raw(self.pinv.data(), n, m, &delta);
        y_hat.iter().zip(fix).map(|(&y, f)| y + f).collect()
    }

    pub fn apply_on<'t>(&self, y_hat: Var<'t, T>) -> Var<'t, T> {
        let tape = y_hat.tape();
        let ay = tape.constant(self.a.clone()).matmul(y_hat).expect("shape checked");
        // δ(z) = P(z) − z = −(z − P(z))
        let delta = -box_excess_on(ay, &self.bounds, &Slack::zero());
        let fix = tape.constant(self.pinv.clone()).matmul(delta).expect("shape checked");
        y_hat + fix
    }
}

/// Closed-form repair for a single call; see [`HardNetLayer`].
pub fn hardnet_repair<T: Real>(y_hat: &[T], a: &Tensor<T>, bounds: &Bounds<T>) -> Result<Vec<T>> {
    Ok(HardNetLayer::new(a.clone(), bounds.clone())?.apply(y_hat))
}

/// Settings for [`posthoc_project`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig<T> {
    pub outer_rounds: usize,
    pub penalty_init: T,
    pub penalty_growth: T,
    pub penalty_max: T,
    pub inner_iters: usize,
    /// Required max violation of the returned point.
    pub feasibility_tol: T,
}

impl<T: Real> Default for ProjectionConfig<T> {
    fn default() -> Self {
        ProjectionConfig {
            outer_rounds: 20,
            penalty_init: T::of(10.0),
            penalty_growth: T::of(10.0),
            penalty_max: T::of(1e10),
            inner_iters: 200,
            feasibility_tol: T::of(1e-6),
        }
    }
}

/// Result of [`posthoc_project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub point: Vec<T>,
    pub max_violation: T,
    /// False when the solver stalled above `feasibility_tol`; `point` is then
    /// the least-violating iterate seen.
    pub feasible: bool,
}

#[derive(Clone, Copy)]
enum RowRole<T> {
    Equality(T),
    Upper(T),
    Lower(T),
}

/// Approximate Euclidean projection of `ŷ` onto `{y : ℓ ≤ g(y) ≤ u}` by an
/// augmented Lagrangian method. Off the tape: this is post-processing only.
///
/// Inner minimization uses damped Gauss–Newton directions `(I + ρJ_AᵀJ_A)⁻¹∇L`
/// over the active rows with Armijo backtracking.
pub fn posthoc_project<T: Real>(y_hat: &[T], cs: &ConstraintSet<T>, cfg: &ProjectionConfig<T>) -> Projection<T> {
    let n = y_hat.len();
    let bounds = cs.bounds();
    let mut roles: Vec<(usize, RowRole<T>)> = Vec::new();
    for i in 0..bounds.len() {
        let (l, u) = (bounds.lower()[i], bounds.upper()[i]);
        if l == u {
            roles.push((i, RowRole::Equality(u)));
        } else {
            if u.is_finite() {
                roles.push((i, RowRole::Upper(u)));
            }
            if l.is_finite() {
                roles.push((i, RowRole::Lower(l)));
            }
        }
    }
    let mut mult = vec![T::zero(); roles.len()];
    let mut rho = cfg.penalty_init;
    let mut y = y_hat.to_vec();
    let zero = Slack::zero();
    let mut best = (cs.max_violation(&y, &zero), y.clone());
    if best.0 <= cfg.feasibility_tol {
        return Projection {
            point: y,
            max_violation: best.0,
            feasible: true,
        };
    }
    let mut prev_viol = best.0;

    // c(y) for each role: equality h = g − b, upper g − u ≤ 0, lower ℓ − g ≤ 0
    let role_values = |g: &[T]| -> Vec<T> {
        roles
            .iter()
            .map(|&(i, r)| match r {
                RowRole::Equality(b) | RowRole::Upper(b) => g[i] - b,
                RowRole::Lower(b) => b - g[i],
            })
            .collect()
    };
    let sign = |r: RowRole<T>| match r {
        RowRole::Lower(_) => -T::one(),
        _ => T::one(),
    };

    for _round in 0..cfg.outer_rounds {
        // inner: minimize the augmented Lagrangian in y
        let merit = |y: &[T], rho: T| -> T {
            let c = role_values(&cs.eval(y));
            let mut val = T::of(0.5) * y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
            for (k, &(_, r)) in roles.iter().enumerate() {
                val += match r {
                    RowRole::Equality(_) => mult[k] * c[k] + T::of(0.5) * rho * c[k] * c[k],
                    _ => {
                        let t = (mult[k] + rho * c[k]).max(T::zero());
                        (t * t - mult[k] * mult[k]) / (T::of(2.0) * rho)
                    }
                };
            }
            val
        };
        for _ in 0..cfg.inner_iters {
            let g = cs.eval(&y);
            let c = role_values(&g);
            let jac = cs.jacobian(&y);
            let mut grad: Vec<T> = y.iter().zip(y_hat).map(|(&a, &b)| a - b).collect();
            let mut normal = vec![T::zero(); n * n];
            for i in 0..n {
                normal[i * n + i] = T::one();
            }
            for (k, &(row, r)) in roles.iter().enumerate() {
                let weight = match r {
                    RowRole::Equality(_) => mult[k] + rho * c[k],
                    _ => (mult[k] + rho * c[k]).max(T::zero()),
                };
                let active = matches!(r, RowRole::Equality(_)) || weight > T::zero();
                if !active {
                    continue;
                }
                let s = sign(r);
                let jrow = jac.row(row);
                for (gi, &jv) in grad.iter_mut().zip(jrow) {
                    *gi += weight * s * jv;
                }
                for a in 0..n {
                    let ja = jrow[a];
                    if ja == T::zero() {
                        continue;
                    }
                    for b in 0..n {
                        normal[a * n + b] += rho * ja * jrow[b];
                    }
                }
            }
            let gnorm = linalg::norm_inf(&grad);
            if gnorm <= T::of(1e-13) * (T::one() + linalg::norm_inf(&y)) {
                break;
            }
            let Some(factor) = SpdFactor::cholesky(&normal, n) else { break };
            let dir: Vec<T> = factor.solve(&grad).into_iter().map(|v| -v).collect();
            let slope = linalg::dot(&grad, &dir);
            let f0 = merit(&y, rho);
            let mut t = T::one();
            let mut moved = false;
            for _ in 0..60 {
                let trial: Vec<T> = y.iter().zip(&dir).map(|(&a, &d)| a + t * d).collect();
                if merit(&trial, rho) <= f0 + T::of(1e-4) * t * slope {
                    y = trial;
                    moved = true;
                    break;
                }
                t *= T::of(0.5);
            }
            if !moved {
                break;
            }
        }
        let c = role_values(&cs.eval(&y));
        for (k, &(_, r)) in roles.iter().enumerate() {
            mult[k] = match r {
                RowRole::Equality(_) => mult[k] + rho * c[k],
                _ => (mult[k] + rho * c[k]).max(T::zero()),
            };
        }
        let viol = cs.max_violation(&y, &zero);
        if viol < best.0 {
            best = (viol, y.clone());
        }
        if viol <= cfg.feasibility_tol * T::of(1e-3) {
            break;
        }
        if viol > T::of(0.25) * prev_viol {
            rho = (rho * cfg.penalty_growth).min(cfg.penalty_max);
        }
        prev_viol = viol;
    }
    let final_viol = cs.max_violation(&y, &zero);
    let (point, max_violation) = if final_viol <= cfg.feasibility_tol || final_viol <= best.0 {
        (y, final_viol)
    } else {
        (best.1, best.0)
    };
    Projection {
        feasible: max_violation <= cfg.feasibility_tol,
        point,
        max_violation,
    }
}

/// `steps` gradient steps `y ← y − η Jᵀ(g(y) − P(g(y)))` on the squared
/// violation, recorded on the tape.
pub fn gradient_correction_on<'t, T: Real, M: TapeMap<'t, T> + ?Sized>(
    y_hat: Var<'t, T>,
    map: &M,
    bounds: &Bounds<T>,
    steps: usize,
    step_size: T,
) -> Var<'t, T> {
    let mut y = y_hat;
    for _ in 0..steps {
        let g = map.eval_on(y);
        let excess = box_excess_on(g, bounds, &Slack::zero());
        let grad = map.jacobian_on(y).t().matmul(excess).expect("shapes agree");
        y = y - grad * step_size;
    }
    y
}
