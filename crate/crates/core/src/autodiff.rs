//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; [`Tape::backward`]
//! replays the record in reverse and accumulates adjoints. Nodes that depend
//! only on constants are stored without a backward rule, so gradients are
//! computed only along paths that reach a differentiable leaf.
//!
//! A tape is single-threaded. Independent examples can be processed on
//! independent tapes in parallel.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{self, GramSide};
use crate::scalar::{Expr, Real};
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    Sum(usize),
    Dot(usize, usize),
    SquaredNorm(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Reshape(usize),
    Custom { parents: Vec<usize>, backward: BackwardFn<T> },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &*self.value())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, needs_grad) = if needs_grad { (op, true) } else { (Op::Leaf, false) };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn vector_var(&self, data: &[T]) -> Var<'_, T> {
        self.var(Tensor::vector(data.to_vec()))
    }

    pub fn vector_const(&self, data: &[T]) -> Var<'_, T> {
        self.constant(Tensor::vector(data.to_vec()))
    }

    pub fn scalar_var(&self, value: T) -> Var<'_, T> {
        self.var(Tensor::scalar(value))
    }

    pub fn scalar_const(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        let mut data = Vec::new();
        let mut needs = false;
        for p in parts {
            data.extend_from_slice(p.value().data());
            needs |= self.needs_grad(p.id);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::vector(data), Op::Concat(ids), needs)
    }

    /// Records an operation with a hand-written adjoint.
    ///
    /// `backward` receives the output adjoint and returns one optional adjoint
    /// per parent, in order. `None` means no contribution.
    pub fn custom<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let needs = parents.iter().any(|p| self.needs_grad(p.id));
        let op = Op::Custom {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Box::new(backward),
        };
        self.push(value, op, needs)
    }

    /// Solves `(JᵀJ + λI) s = Jᵀ r` for `s`, differentiable in `J` and `r`
    /// (`λ` is a constant).
    ///
    /// See [`linalg::regularized_solve`] for the factorization strategy. The
    /// adjoint reuses the forward factorization.
    pub fn regularized_solve<'t>(&'t self, j: Var<'t, T>, r: Var<'t, T>, lambda: T) -> Result<Var<'t, T>> {
        let jv = j.value();
        let rv = r.value();
        let sol = linalg::regularized_solve(&jv, rv.data(), lambda)?;
        let (m, n) = (jv.rows(), jv.cols());
        let step = sol.step.clone();
        let value = Tensor::vector(step.clone());
        let factor = sol.factor;
        let side = sol.side;
        let multiplier = sol.multiplier;
        Ok(self.custom(value, &[j, r], move |g| {
            let jd = jv.data();
            let gs = g.data();
            match side {
                GramSide::Columns => {
                    // w = M⁻¹ ḡ;  r̄ = J w;  J̄ = (r − J s) wᵀ − (J w) sᵀ
                    let w = factor.solve(gs);
                    let jw = linalg::matvec_raw(jd, m, n, &w);
                    let js = linalg::matvec_raw(jd, m, n, &step);
                    let mut gj = vec![T::zero(); m * n];
                    for a in 0..m {
                        let res = rv.data()[a] - js[a];
                        for b in 0..n {
                            gj[a * n + b] = res * w[b] - jw[a] * step[b];
                        }
                    }
                    vec![
                        Some(Tensor::matrix(m, n, gj).expect("shape")),
                        Some(Tensor::vector(jw)),
                    ]
                }
                GramSide::Rows => {
                    // q = N⁻¹ J ḡ;  r̄ = q;  J̄ = w ḡᵀ − q sᵀ − w (Jᵀq)ᵀ
                    let jg = linalg::matvec_raw(jd, m, n, gs);
                    let q = factor.solve(&jg);
                    let jtq = linalg::matvec_t_raw(jd, m, n, &q);
                    let mut gj = vec![T::zero(); m * n];
                    for a in 0..m {
                        for b in 0..n {
                            gj[a * n + b] =
                                multiplier[a] * (gs[b] - jtq[b]) - q[a] * step[b];
                        }
                    }
                    vec![
                        Some(Tensor::matrix(m, n, gj).expect("shape")),
                        Some(Tensor::vector(q)),
                    ]
                }
            }
        }))
    }

    /// Computes adjoints of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(Tensor::filled(root_value.shape(), T::one()));

        let accumulate = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, t: Tensor<T>| {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };

        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |id: usize| &nodes[id].value;
            let wants = |id: usize| nodes[id].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let t = reshape_like(g.zip_map(&flat_like(val(*b), &g), |x, y| x * y), val(*a));
                        accumulate(&mut grads, *a, t);
                    }
                    if wants(*b) {
                        let t = reshape_like(g.zip_map(&flat_like(val(*a), &g), |x, y| x * y), val(*b));
                        accumulate(&mut grads, *b, t);
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Shift(a) => accumulate(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = (av.rows(), av.cols());
                    if bv.rank() == 1 {
                        if wants(*a) {
                            let mut ga = vec![T::zero(); m * k];
                            for r in 0..m {
                                let gr = g.data()[r];
                                for c in 0..k {
                                    ga[r * k + c] = gr * bv.data()[c];
                                }
                            }
                            accumulate(&mut grads, *a, Tensor::matrix(m, k, ga).expect("shape"));
                        }
                        if wants(*b) {
                            let gb = linalg::matvec_t_raw(av.data(), m, k, g.data());
                            accumulate(&mut grads, *b, Tensor::vector(gb));
                        }
                    } else {
                        let n = bv.cols();
                        if wants(*a) {
                            let bt = linalg::transpose_raw(bv.data(), k, n);
                            let ga = linalg::matmul_raw(g.data(), &bt, m, n, k);
                            accumulate(&mut grads, *a, Tensor::matrix(m, k, ga).expect("shape"));
                        }
                        if wants(*b) {
                            let at = linalg::transpose_raw(av.data(), m, k);
                            let gb = linalg::matmul_raw(&at, g.data(), k, m, n);
                            accumulate(&mut grads, *b, Tensor::matrix(k, n, gb).expect("shape"));
                        }
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, linalg::transpose(&g)),
                Op::AddRow(a, b) => {
                    if wants(*b) {
                        let n = val(*b).len();
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (acc, &x) in gb.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::vector(gb));
                    }
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sin(a) => {
                    let t = g.zip_map(val(*a), |x, v| x * v.cos());
                    accumulate(&mut grads, *a, t);
                }
                Op::Cos(a) => {
                    let t = g.zip_map(val(*a), |x, v| -x * v.sin());
                    accumulate(&mut grads, *a, t);
                }
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let t = g.zip_map(val(*a), |x, v| if v > T::zero() { x } else { T::zero() });
                    accumulate(&mut grads, *a, t);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::Dot(a, b) => {
                    let gv = g.item();
                    if wants(*a) {
                        accumulate(&mut grads, *a, val(*b).map(|x| x * gv));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, val(*a).map(|x| x * gv));
                    }
                }
                Op::SquaredNorm(a) => {
                    let two_g = T::of(2.0) * g.item();
                    accumulate(&mut grads, *a, val(*a).map(|x| x * two_g));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let len = pv.len();
                        if wants(p) {
                            let t = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                                .expect("shape");
                            accumulate(&mut grads, p, t);
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, start } => {
                    let sv = val(*src);
                    let mut full = Tensor::zeros(sv.shape());
                    full.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *src, full);
                }
                Op::Reshape(a) => {
                    let t = Tensor::new(val(*a).shape().to_vec(), g.data().to_vec()).expect("shape");
                    accumulate(&mut grads, *a, t);
                }
                Op::Custom { parents, backward } => {
                    for (p, t) in parents.iter().zip(backward(&g)) {
                        if let Some(t) = t {
                            accumulate(&mut grads, *p, t);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn flat_like<T: Real>(v: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), v.data().to_vec()).expect("equal lengths")
}

fn reshape_like<T: Real>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    t.reshape(like.shape().to_vec()).expect("equal lengths")
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `var`; zeros when no path connects it to the root.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    /// The single entry of a one-element value.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().data().to_vec()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.tape.needs_grad(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        self.tape.push(value, op, needs)
    }

    fn elementwise(self, other: Self, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(
            a.len(),
            b.len(),
            "{what}: operand lengths differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        );
        a.zip_map(&flat_like(&b, &a), f)
    }

    pub fn sin(self) -> Self {
        let v = self.value().map(|x| x.sin());
        self.unary(v, Op::Sin(self.id))
    }

    pub fn cos(self) -> Self {
        let v = self.value().map(|x| x.cos());
        self.unary(v, Op::Cos(self.id))
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|x| x.sqrt());
        let root = v.clone();
        self.tape.custom(v, &[self], move |g| {
            vec![Some(g.zip_map(&root, |gi, ri| gi * T::of(0.5) / ri))]
        })
    }

    pub fn recip(self) -> Self {
        let v = self.value().map(|x| x.recip());
        let inv = v.clone();
        self.tape
            .custom(v, &[self], move |g| vec![Some(g.zip_map(&inv, |gi, ii| -gi * ii * ii))])
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn shift(self, c: T) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    pub fn sum(self) -> Self {
        let v = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(v), Op::Sum(self.id))
    }

    pub fn squared_norm(self) -> Self {
        let v = linalg::dot(self.value().data(), self.value().data());
        self.unary(Tensor::scalar(v), Op::SquaredNorm(self.id))
    }

    pub fn dot(self, other: Self) -> Self {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.len(), b.len(), "dot: operand lengths differ");
        let v = linalg::dot(a.data(), b.data());
        self.binary(other, Tensor::scalar(v), Op::Dot(self.id, other.id))
    }

    /// Matrix product with a matrix or vector right-hand side.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let v = linalg::matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Self {
        let v = linalg::transpose(&self.value());
        self.unary(v, Op::Transpose(self.id))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(self, bias: Self) -> Result<Self> {
        let a = self.value();
        let b = bias.value();
        if a.rank() != 2 || a.cols() != b.len() {
            return Err(Error::shape(
                "add_row",
                format!("cannot add bias of length {} to rows of {:?}", b.len(), a.shape()),
            ));
        }
        let n = b.len();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        let v = Tensor::new(a.shape().to_vec(), data).expect("shape");
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Contiguous range of the flattened value, as a vector.
    pub fn slice(self, start: usize, len: usize) -> Self {
        let v = self.value();
        assert!(start + len <= v.len(), "slice {start}..{} out of range for length {}", start + len, v.len());
        let data = v.data()[start..start + len].to_vec();
        self.unary(Tensor::vector(data), Op::Slice { src: self.id, start })
    }

    /// Single entry of the flattened value as a scalar.
    pub fn entry(self, i: usize) -> Self {
        let v = self.value();
        assert!(i < v.len(), "entry {i} out of range for length {}", v.len());
        self.unary(Tensor::scalar(v.data()[i]), Op::Slice { src: self.id, start: i })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

impl<'t, T: Real> Add for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let v = self.elementwise(rhs, "add", |a, b| a + b);
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'t, T: Real> Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let v = self.elementwise(rhs, "sub", |a, b| a - b);
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t, T: Real> Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let v = self.elementwise(rhs, "mul", |a, b| a * b);
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t, T: Real> Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }
}

impl<'t, T: Real> Add<T> for Var<'t, T> {
    type Output = Self;
    fn add(self, rhs: T) -> Self {
        self.shift(rhs)
    }
}

impl<'t, T: Real> Sub<T> for Var<'t, T> {
    type Output = Self;
    fn sub(self, rhs: T) -> Self {
        self.shift(-rhs)
    }
}

impl<'t, T: Real> Mul<T> for Var<'t, T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        self.scale(rhs)
    }
}

impl<'t, T: Real> Expr<T> for Var<'t, T> {
    fn sin(self) -> Self {
        Var::sin(self)
    }

    fn cos(self) -> Self {
        Var::cos(self)
    }

    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }

    fn recip(self) -> Self {
        Var::recip(self)
    }
}

/// Jacobian of a vector-valued tape function by one reverse pass per output.
pub fn jacobian<T, F>(f: F, y: &[T]) -> Result<Tensor<T>>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Var<'t, T>,
{
    let tape = Tape::new();
    let yv = tape.vector_var(y);
    let out = f(yv);
    let m = out.len();
    let n = y.len();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let gi = tape.backward(out.entry(i))?;
        data.extend_from_slice(gi.wrt(yv).data());
    }
    Tensor::matrix(m, n, data)
}
