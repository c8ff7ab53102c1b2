//! Input-dependent constraint systems `ℓ ≤ g(y) ≤ u`.
//!
//! A [`ConstraintSet`] pairs a differentiable map `g` with its [`Bounds`].
//! Equality constraints are rows with `ℓᵢ = uᵢ`; one-sided rows use IEEE
//! infinities, which are masked explicitly and never enter arithmetic.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Elementwise bounds `ℓ ≤ z ≤ u`; `±∞` marks a missing side.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> Bounds<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::shape(
                "bounds",
                format!("{} lower bounds but {} upper bounds", lower.len(), upper.len()),
            ));
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l == T::infinity() || u == T::neg_infinity() || l > u {
                return Err(Error::Precondition(format!(
                    "invalid bounds at row {i}: [{l}, {u}]"
                )));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn upper_only(upper: Vec<T>) -> Result<Self> {
        let lower = vec![T::neg_infinity(); upper.len()];
        Self::new(lower, upper)
    }

    pub fn lower_only(lower: Vec<T>) -> Result<Self> {
        let upper = vec![T::infinity(); lower.len()];
        Self::new(lower, upper)
    }

    pub fn equality(values: Vec<T>) -> Result<Self> {
        Self::new(values.clone(), values)
    }

    pub fn empty() -> Self {
        Bounds {
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &Self) -> Self {
        let mut lower = self.lower.clone();
        lower.extend_from_slice(&other.lower);
        let mut upper = self.upper.clone();
        upper.extend_from_slice(&other.upper);
        Bounds { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn is_equality(&self, i: usize) -> bool {
        self.lower[i] == self.upper[i]
    }

    /// `[ℓ − ε, u + ε]` with infinite sides left untouched.
    pub fn relaxed(&self, slack: &Slack<T>) -> (Vec<T>, Vec<T>) {
        let lo = self
            .lower
            .iter()
            .enumerate()
            .map(|(i, &l)| if l.is_finite() { l - slack.at(i) } else { l })
            .collect();
        let hi = self
            .upper
            .iter()
            .enumerate()
            .map(|(i, &u)| if u.is_finite() { u + slack.at(i) } else { u })
            .collect();
        (lo, hi)
    }
}

/// Nonnegative relaxation applied symmetrically to finite bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Slack<T> {
    Uniform(T),
    PerConstraint(Vec<T>),
}

impl<T: Real> Default for Slack<T> {
    fn default() -> Self {
        Slack::Uniform(T::zero())
    }
}

impl<T: Real> Slack<T> {
    pub fn zero() -> Self {
        Slack::Uniform(T::zero())
    }

    pub fn at(&self, i: usize) -> T {
        match self {
            Slack::Uniform(e) => *e,
            Slack::PerConstraint(v) => v[i],
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let ok = |e: &T| e.is_finite() && *e >= T::zero();
        match self {
            Slack::Uniform(e) if ok(e) => Ok(()),
            Slack::PerConstraint(v) if v.len() == m && v.iter().all(ok) => Ok(()),
            Slack::PerConstraint(v) if v.len() != m => Err(Error::shape(
                "slack",
                format!("{} slack entries for {m} constraints", v.len()),
            )),
            _ => Err(Error::Config("slack must be finite and nonnegative".into())),
        }
    }
}

/// Clamp of `z` into `[ℓ − ε, u + ε]`.
pub fn box_project<T: Real>(z: &[T], bounds: &Bounds<T>, slack: &Slack<T>) -> Vec<T> {
    let (lo, hi) = bounds.relaxed(slack);
    z.iter()
        .zip(lo.iter().zip(&hi))
        .map(|(&zi, (&l, &u))| {
            if l.is_finite() && zi < l {
                l
            } else if u.is_finite() && zi > u {
                u
            } else {
                zi
            }
        })
        .collect()
}

/// `δ(z; ℓ, u) = ReLU(ℓ − z) − ReLU(z − u)`, the displacement taking `z` into the box.
pub fn correction_vector<T: Real>(z: &[T], bounds: &Bounds<T>) -> Vec<T> {
    z.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&zi, (&l, &u))| {
            let below = if l.is_finite() { (l - zi).max(T::zero()) } else { T::zero() };
            let above = if u.is_finite() { (zi - u).max(T::zero()) } else { T::zero() };
            below - above
        })
        .collect()
}

/// Per-row violation `max(ReLU(z − u), ReLU(ℓ − z))`.
pub fn violation<T: Real>(z: &[T], bounds: &Bounds<T>) -> Vec<T> {
    relaxed_violation(z, bounds, &Slack::zero())
}

/// Per-row violation against `[ℓ − ε, u + ε]`.
pub fn relaxed_violation<T: Real>(z: &[T], bounds: &Bounds<T>, slack: &Slack<T>) -> Vec<T> {
    let (lo, hi) = bounds.relaxed(slack);
    z.iter()
        .zip(lo.iter().zip(&hi))
        .map(|(&zi, (&l, &u))| {
            let below = if l.is_finite() { (l - zi).max(T::zero()) } else { T::zero() };
            let above = if u.is_finite() { (zi - u).max(T::zero()) } else { T::zero() };
            below.max(above)
        })
        .collect()
}

pub fn max_violation<T: Real>(z: &[T], bounds: &Bounds<T>, slack: &Slack<T>) -> T {
    linalg::norm_inf(&relaxed_violation(z, bounds, slack))
}

/// Records `z − P(z)` on the tape, where `P` clamps into `[ℓ − ε, u + ε]`.
///
/// The adjoint passes through rows outside the box and is zero inside.
pub fn box_excess_on<'t, T: Real>(z: Var<'t, T>, bounds: &Bounds<T>, slack: &Slack<T>) -> Var<'t, T> {
    let zv = z.value();
    let (lo, hi) = bounds.relaxed(slack);
    let mut mask = vec![false; zv.len()];
    let data: Vec<T> = zv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &zi)| {
            if lo[i].is_finite() && zi < lo[i] {
                mask[i] = true;
                zi - lo[i]
            } else if hi[i].is_finite() && zi > hi[i] {
                mask[i] = true;
                zi - hi[i]
            } else {
                T::zero()
            }
        })
        .collect();
    z.tape().custom(Tensor::vector(data), &[z], move |g| {
        let gz = g
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { x } else { T::zero() })
            .collect();
        vec![Some(Tensor::vector(gz))]
    })
}

/// Family tag of a constraint row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Linear,
    Quadratic,
    Cbf,
    Custom,
}

/// A differentiable map `g: ℝⁿ → ℝᵐ` with its Jacobian, evaluable on plain
/// values and on a tape.
pub trait ConstraintMap<T: Real>: Send + Sync {
    fn num_constraints(&self) -> usize;
    fn num_vars(&self) -> usize;
    fn eval(&self, y: &[T]) -> Vec<T>;
    /// `m × n` Jacobian at `y`.
    fn jacobian(&self, y: &[T]) -> Tensor<T>;
    fn eval_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T>;
    /// Jacobian recorded as a function of `y`, so gradients flow through it.
    fn jacobian_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T>;
}

/// A constraint map tied to a specific tape.
///
/// Every [`ConstraintMap`] is a `TapeMap` for any tape. Maps whose data
/// themselves live on a tape (e.g. state-dependent barrier constraints during
/// training) implement this trait directly for that tape's lifetime.
pub trait TapeMap<'t, T: Real> {
    fn eval_on(&self, y: Var<'t, T>) -> Var<'t, T>;
    fn jacobian_on(&self, y: Var<'t, T>) -> Var<'t, T>;
}

impl<'t, T: Real, M: ConstraintMap<T> + ?Sized> TapeMap<'t, T> for M {
    fn eval_on(&self, y: Var<'t, T>) -> Var<'t, T> {
        ConstraintMap::eval_on(self, y)
    }

    fn jacobian_on(&self, y: Var<'t, T>) -> Var<'t, T> {
        ConstraintMap::jacobian_on(self, y)
    }
}

/// `g(y) = A y`.
#[derive(Clone, Debug)]
pub struct LinearMap<T> {
    a: Tensor<T>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(a: Tensor<T>) -> Result<Self> {
        if a.rank() != 2 {
            return Err(Error::shape("linear map", format!("expected a matrix, got {:?}", a.shape())));
        }
        Ok(LinearMap { a })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.a
    }
}

impl<T: Real> ConstraintMap<T> for LinearMap<T> {
    fn num_constraints(&self) -> usize {
        self.a.rows()
    }

    fn num_vars(&self) -> usize {
        self.a.cols()
    }

    fn eval(&self, y: &[T]) -> Vec<T> {
        linalg::matvec_raw(self.a.data(), self.a.rows(), self.a.cols(), y)
    }

    fn jacobian(&self, _y: &[T]) -> Tensor<T> {
        self.a.clone()
    }

    fn eval_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        y.tape()
            .constant(self.a.clone())
            .matmul(y)
            .expect("linear map dimensions checked at construction")
    }

    fn jacobian_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        y.tape().constant(self.a.clone())
    }
}

/// `gᵢ(y) = yᵀHᵢy + qᵢᵀy + cᵢ` for each row `i`.
#[derive(Clone, Debug)]
pub struct QuadraticMap<T> {
    n: usize,
    quad: Vec<Tensor<T>>,
    /// `Hᵢ + Hᵢᵀ`, the Hessian of row `i`.
    sym: Arc<Vec<Tensor<T>>>,
    lin: Tensor<T>,
    offset: Vec<T>,
}

impl<T: Real> QuadraticMap<T> {
    /// `quad[i]` is `Hᵢ` (n × n), `lin` stacks the `qᵢ` as rows (m × n).
    pub fn new(quad: Vec<Tensor<T>>, lin: Tensor<T>, offset: Vec<T>) -> Result<Self> {
        let m = quad.len();
        let n = lin.cols();
        if lin.rank() != 2 || lin.rows() != m || offset.len() != m {
            return Err(Error::shape(
                "quadratic map",
                format!("{m} quadratic terms, linear part {:?}, {} offsets", lin.shape(), offset.len()),
            ));
        }
        for (i, h) in quad.iter().enumerate() {
            if h.shape() != [n, n] {
                return Err(Error::shape(
                    "quadratic map",
                    format!("H[{i}] has shape {:?}, expected [{n}, {n}]", h.shape()),
                ));
            }
        }
        let sym = quad
            .iter()
            .map(|h| h.zip_map(&linalg::transpose(h), |a, b| a + b))
            .collect();
        Ok(QuadraticMap {
            n,
            quad,
            sym: Arc::new(sym),
            lin,
            offset,
        })
    }

    pub fn quadratic_terms(&self) -> &[Tensor<T>] {
        &self.quad
    }

    pub fn linear_terms(&self) -> &Tensor<T> {
        &self.lin
    }

    pub fn offsets(&self) -> &[T] {
        &self.offset
    }

    fn row_values(&self, y: &[T]) -> Vec<T> {
        let n = self.n;
        self.quad
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let hy = linalg::matvec_raw(h.data(), n, n, y);
                linalg::dot(y, &hy) + linalg::dot(self.lin.row(i), y) + self.offset[i]
            })
            .collect()
    }

    fn jacobian_values(&self, y: &[T]) -> Vec<T> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.quad.len() * n);
        for (i, s) in self.sym.iter().enumerate() {
            let sy = linalg::matvec_raw(s.data(), n, n, y);
            out.extend(sy.iter().zip(self.lin.row(i)).map(|(&a, &b)| a + b));
        }
        out
    }
}

impl<T: Real> ConstraintMap<T> for QuadraticMap<T> {
    fn num_constraints(&self) -> usize {
        self.quad.len()
    }

    fn num_vars(&self) -> usize {
        self.n
    }

    fn eval(&self, y: &[T]) -> Vec<T> {
        self.row_values(y)
    }

    fn jacobian(&self, y: &[T]) -> Tensor<T> {
        Tensor::matrix(self.quad.len(), self.n, self.jacobian_values(y)).expect("shape")
    }

    fn eval_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        let yv = y.value();
        let value = Tensor::vector(self.row_values(yv.data()));
        let jac = self.jacobian_values(yv.data());
        let (m, n) = (self.quad.len(), self.n);
        y.tape().custom(value, &[y], move |g| {
            // ȳ = Jᵀ ḡ
            vec![Some(Tensor::vector(linalg::matvec_t_raw(&jac, m, n, g.data())))]
        })
    }

    fn jacobian_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        let yv = y.value();
        let (m, n) = (self.quad.len(), self.n);
        let value = Tensor::matrix(m, n, self.jacobian_values(yv.data())).expect("shape");
        let sym = Arc::clone(&self.sym);
        y.tape().custom(value, &[y], move |g| {
            // row i is Sᵢ y + qᵢ, so ȳ = Σᵢ Sᵢ ḡᵢ (Sᵢ symmetric)
            let mut gy = vec![T::zero(); n];
            for (i, s) in sym.iter().enumerate() {
                let gi = &g.data()[i * n..(i + 1) * n];
                for (acc, v) in gy.iter_mut().zip(linalg::matvec_raw(s.data(), n, n, gi)) {
                    *acc += v;
                }
            }
            vec![Some(Tensor::vector(gy))]
        })
    }
}

/// Row-wise concatenation of several maps over the same variables.
#[derive(Clone)]
pub struct StackedMap<T: Real> {
    parts: Vec<Arc<dyn ConstraintMap<T>>>,
}

impl<T: Real> StackedMap<T> {
    pub fn new(parts: Vec<Arc<dyn ConstraintMap<T>>>) -> Result<Self> {
        if let Some(first) = parts.first() {
            let n = first.num_vars();
            if let Some(bad) = parts.iter().find(|p| p.num_vars() != n) {
                return Err(Error::shape(
                    "stacked map",
                    format!("parts act on {n} and {} variables", bad.num_vars()),
                ));
            }
        }
        Ok(StackedMap { parts })
    }

    pub fn parts(&self) -> &[Arc<dyn ConstraintMap<T>>] {
        &self.parts
    }
}

impl<T: Real> ConstraintMap<T> for StackedMap<T> {
    fn num_constraints(&self) -> usize {
        self.parts.iter().map(|p| p.num_constraints()).sum()
    }

    fn num_vars(&self) -> usize {
        self.parts.first().map_or(0, |p| p.num_vars())
    }

    fn eval(&self, y: &[T]) -> Vec<T> {
        self.parts.iter().flat_map(|p| p.eval(y)).collect()
    }

    fn jacobian(&self, y: &[T]) -> Tensor<T> {
        let data = self
            .parts
            .iter()
            .flat_map(|p| p.jacobian(y).into_data())
            .collect();
        Tensor::matrix(self.num_constraints(), self.num_vars(), data).expect("shape")
    }

    fn eval_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        let parts: Vec<_> = self.parts.iter().map(|p| p.eval_on(y)).collect();
        y.tape().concat(&parts)
    }

    fn jacobian_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        let parts: Vec<_> = self.parts.iter().map(|p| p.jacobian_on(y)).collect();
        y.tape()
            .concat(&parts)
            .reshape(&[self.num_constraints(), self.num_vars()])
            .expect("shape")
    }
}

type TapeFn<T> = dyn for<'t> Fn(Var<'t, T>) -> Var<'t, T> + Send + Sync;

/// User-supplied `g` written against the tape. Its Jacobian comes from
/// reverse-mode AD and is recorded as a constant, so second-order terms
/// through the Jacobian are not differentiated.
#[derive(Clone)]
pub struct FnMap<T: Real> {
    m: usize,
    n: usize,
    f: Arc<TapeFn<T>>,
}

impl<T: Real> FnMap<T> {
    pub fn new(
        num_constraints: usize,
        num_vars: usize,
        f: impl for<'t> Fn(Var<'t, T>) -> Var<'t, T> + Send + Sync + 'static,
    ) -> Self {
        FnMap {
            m: num_constraints,
            n: num_vars,
            f: Arc::new(f),
        }
    }
}

impl<T: Real> ConstraintMap<T> for FnMap<T> {
    fn num_constraints(&self) -> usize {
        self.m
    }

    fn num_vars(&self) -> usize {
        self.n
    }

    fn eval(&self, y: &[T]) -> Vec<T> {
        let tape = Tape::new();
        (self.f)(tape.vector_const(y)).to_vec()
    }

    fn jacobian(&self, y: &[T]) -> Tensor<T> {
        let f = Arc::clone(&self.f);
        autodiff::jacobian(move |v| f(v), y).expect("scalar outputs")
    }

    fn eval_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        (self.f)(y)
    }

    fn jacobian_on<'t>(&self, y: Var<'t, T>) -> Var<'t, T> {
        let j = self.jacobian(y.value().data());
        y.tape().constant(j)
    }
}

/// `ℓ ≤ g(y) ≤ u` with per-row kind tags.
#[derive(Clone)]
pub struct ConstraintSet<T: Real> {
    map: Arc<dyn ConstraintMap<T>>,
    bounds: Bounds<T>,
    kinds: Vec<ConstraintKind>,
}

impl<T: Real> fmt::Debug for ConstraintSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSet")
            .field("num_constraints", &self.num_constraints())
            .field("num_vars", &self.num_vars())
            .field("bounds", &self.bounds)
            .field("kinds", &self.kinds)
            .finish()
    }
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(map: Arc<dyn ConstraintMap<T>>, bounds: Bounds<T>, kinds: Vec<ConstraintKind>) -> Result<Self> {
        let m = map.num_constraints();
        if bounds.len() != m || kinds.len() != m {
            return Err(Error::shape(
                "constraint set",
                format!("map has {m} rows, bounds {}, kinds {}", bounds.len(), kinds.len()),
            ));
        }
        Ok(ConstraintSet { map, bounds, kinds })
    }

    pub fn linear(a: Tensor<T>, bounds: Bounds<T>) -> Result<Self> {
        let m = a.rows();
        Self::new(Arc::new(LinearMap::new(a)?), bounds, vec![ConstraintKind::Linear; m])
    }

    pub fn quadratic(map: QuadraticMap<T>, bounds: Bounds<T>) -> Result<Self> {
        let m = map.num_constraints();
        Self::new(Arc::new(map), bounds, vec![ConstraintKind::Quadratic; m])
    }

    /// No constraints over `n` variables; every point is feasible.
    pub fn unconstrained(n: usize) -> Self {
        let map = LinearMap::new(Tensor::zeros(&[0, n])).expect("matrix");
        ConstraintSet {
            map: Arc::new(map),
            bounds: Bounds::empty(),
            kinds: Vec::new(),
        }
    }

    /// Rows of every set in order.
    pub fn stack(sets: &[ConstraintSet<T>]) -> Result<Self> {
        let map = StackedMap::new(sets.iter().map(|s| Arc::clone(&s.map)).collect())?;
        let bounds = sets
            .iter()
            .fold(Bounds::empty(), |acc, s| acc.stack(&s.bounds));
        let kinds = sets.iter().flat_map(|s| s.kinds.iter().copied()).collect();
        Self::new(Arc::new(map), bounds, kinds)
    }

    pub fn map(&self) -> &dyn ConstraintMap<T> {
        &*self.map
    }

    pub fn bounds(&self) -> &Bounds<T> {
        &self.bounds
    }

    pub fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    pub fn num_constraints(&self) -> usize {
        self.map.num_constraints()
    }

    pub fn num_vars(&self) -> usize {
        self.map.num_vars()
    }

    pub fn is_linear(&self) -> bool {
        self.kinds
            .iter()
            .all(|k| matches!(k, ConstraintKind::Linear | ConstraintKind::Cbf))
    }

    pub fn eval(&self, y: &[T]) -> Vec<T> {
        self.map.eval(y)
    }

    pub fn jacobian(&self, y: &[T]) -> Tensor<T> {
        self.map.jacobian(y)
    }

    /// Jacobian of [`ConstraintMap::eval_on`] by reverse-mode AD, for cross-checking
    /// the analytic Jacobian.
    pub fn ad_jacobian(&self, y: &[T]) -> Result<Tensor<T>> {
        let map = Arc::clone(&self.map);
        autodiff::jacobian(move |v| map.eval_on(v), y)
    }

    pub fn violation(&self, y: &[T]) -> Vec<T> {
        violation(&self.eval(y), &self.bounds)
    }

    pub fn max_violation(&self, y: &[T], slack: &Slack<T>) -> T {
        max_violation(&self.eval(y), &self.bounds, slack)
    }

    pub fn is_feasible(&self, y: &[T], tol: T) -> bool {
        self.max_violation(y, &Slack::zero()) <= tol
    }
}

/// Two disks of radius 3/2 centred at (−1, 0) and (1, 0), as `gᵢ(y) = ‖y − cᵢ‖² ≤ 9/4`.
///
/// The point (−1, 0) satisfies the first constraint and violates the second;
/// the box projection of its image, (0, 9/4), has no preimage under `g`.
pub fn two_disks<T: Real>() -> ConstraintSet<T> {
    let quad = vec![Tensor::identity(2), Tensor::identity(2)];
    let lin = Tensor::from_rows(&[vec![T::of(2.0), T::zero()], vec![T::of(-2.0), T::zero()]]).expect("rows");
    let map = QuadraticMap::new(quad, lin, vec![T::one(), T::one()]).expect("shapes");
    let bounds = Bounds::upper_only(vec![T::of(2.25), T::of(2.25)]).expect("finite bounds");
    ConstraintSet::quadratic(map, bounds).expect("shapes")
}
