//! Parametric optimization families used as learning benchmarks.
//!
//! Both families minimize over `y ∈ ℝⁿ` subject to `Cy = x`, with `x ∈ ℝ^{n_eq}`
//! the instance input:
//!
//! * NCP: `½yᵀQy + pᵀsin(y)` s.t. `Ay ≤ b` (nonconvex objective, linear rows)
//! * QCQP: `½yᵀQy + pᵀy` s.t. `yᵀHᵢy + gᵢᵀy ≤ hᵢ` (convex)

mod generate;
mod io;
pub mod oracle;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use generate::{generate, witness_point, GenerateConfig};
pub use io::{dataset_from_json, dataset_to_json, load_dataset, save_dataset};

use crate::autodiff::Var;
use crate::constraints::{Bounds, ConstraintKind, ConstraintMap, ConstraintSet, LinearMap, QuadraticMap, StackedMap};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Ncp,
    Qcqp,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyKind::Ncp => "ncp",
            FamilyKind::Qcqp => "qcqp",
        })
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncp" => Ok(FamilyKind::Ncp),
            "qcqp" => Ok(FamilyKind::Qcqp),
            other => Err(Error::Config(format!("unknown problem family `{other}` (expected ncp or qcqp)"))),
        }
    }
}

/// The inequality rows of a family, in `cᵢ(y) ≤ 0` form after subtracting the
/// right-hand side.
#[derive(Clone, Debug, PartialEq)]
pub enum Inequalities {
    Linear { a: Tensor<f64>, b: Vec<f64> },
    Quadratic { h: Vec<Tensor<f64>>, g: Tensor<f64>, rhs: Vec<f64> },
}

impl Inequalities {
    pub fn len(&self) -> usize {
        match self {
            Inequalities::Linear { b, .. } => b.len(),
            Inequalities::Quadratic { rhs, .. } => rhs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rhs(&self) -> &[f64] {
        match self {
            Inequalities::Linear { b, .. } => b,
            Inequalities::Quadratic { rhs, .. } => rhs,
        }
    }
}

/// Problem data shared by every instance of a family.
#[derive(Clone)]
pub struct Family {
    kind: FamilyKind,
    q: Tensor<f64>,
    p: Vec<f64>,
    c: Tensor<f64>,
    ineq: Inequalities,
    seed: u64,
    ineq_map: Arc<dyn ConstraintMap<f64>>,
    eq_map: Arc<dyn ConstraintMap<f64>>,
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Family")
            .field("kind", &self.kind)
            .field("n", &self.n())
            .field("n_eq", &self.n_eq())
            .field("n_ineq", &self.n_ineq())
            .field("seed", &self.seed)
            .finish()
    }
}

impl PartialEq for Family {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.q == other.q
            && self.p == other.p
            && self.c == other.c
            && self.ineq == other.ineq
            && self.seed == other.seed
    }
}

impl Family {
    pub fn new(q: Tensor<f64>, p: Vec<f64>, c: Tensor<f64>, ineq: Inequalities, seed: u64) -> Result<Self> {
        let n = p.len();
        let bad = |what: String| Err(Error::shape("problem family", what));
        if q.shape() != [n, n] {
            return bad(format!("Q has shape {:?}, expected [{n}, {n}]", q.shape()));
        }
        if c.rank() != 2 || c.cols() != n {
            return bad(format!("C has shape {:?}, expected [n_eq, {n}]", c.shape()));
        }
        let (kind, ineq_map): (FamilyKind, Arc<dyn ConstraintMap<f64>>) = match &ineq {
            Inequalities::Linear { a, b } => {
                if a.rank() != 2 || a.cols() != n || a.rows() != b.len() {
                    return bad(format!("A has shape {:?} with {} right-hand sides", a.shape(), b.len()));
                }
                (FamilyKind::Ncp, Arc::new(LinearMap::new(a.clone())?))
            }
            Inequalities::Quadratic { h, g, rhs } => {
                if h.len() != rhs.len() {
                    return bad(format!("{} quadratic terms with {} right-hand sides", h.len(), rhs.len()));
                }
                let map = QuadraticMap::new(h.clone(), g.clone(), vec![0.0; rhs.len()])?;
                if map.num_vars() != n && !rhs.is_empty() {
                    return bad(format!("quadratic rows act on {} variables, expected {n}", map.num_vars()));
                }
                (FamilyKind::Qcqp, Arc::new(map))
            }
        };
        let eq_map = Arc::new(LinearMap::new(c.clone())?);
        Ok(Family {
            kind,
            q,
            p,
            c,
            ineq,
            seed,
            ineq_map,
            eq_map,
        })
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn n_eq(&self) -> usize {
        self.c.rows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn q(&self) -> &Tensor<f64> {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn c(&self) -> &Tensor<f64> {
        &self.c
    }

    pub fn inequalities(&self) -> &Inequalities {
        &self.ineq
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        let n = self.n();
        let qy = linalg::matvec_raw(self.q.data(), n, n, y);
        let smooth = match self.kind {
            FamilyKind::Ncp => self.p.iter().zip(y).map(|(p, v)| p * v.sin()).sum::<f64>(),
            FamilyKind::Qcqp => linalg::dot(&self.p, y),
        };
        0.5 * linalg::dot(y, &qy) + smooth
    }

    /// `∇f(y)`; `Q` is symmetric by construction but the gradient uses `½(Q + Qᵀ)`.
    pub fn objective_grad(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n();
        let qy = linalg::matvec_raw(self.q.data(), n, n, y);
        let qty = linalg::matvec_t_raw(self.q.data(), n, n, y);
        (0..n)
            .map(|i| {
                let lin = match self.kind {
                    FamilyKind::Ncp => self.p[i] * y[i].cos(),
                    FamilyKind::Qcqp => self.p[i],
                };
                0.5 * (qy[i] + qty[i]) + lin
            })
            .collect()
    }

    /// `∇²f(y)`, row-major `n × n`.
    pub fn objective_hessian(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = 0.5 * (self.q.at(i, j) + self.q.at(j, i));
            }
            if self.kind == FamilyKind::Ncp {
                h[i * n + i] -= self.p[i] * y[i].sin();
            }
        }
        h
    }

    /// `f(y)` recorded on the tape.
    pub fn objective_on<'t>(&self, y: Var<'t, f64>) -> Var<'t, f64> {
        let tape = y.tape();
        let qy = tape.constant(self.q.clone()).matmul(y).expect("Q is n x n");
        let p = tape.vector_const(&self.p);
        let smooth = match self.kind {
            FamilyKind::Ncp => p.dot(y.sin()),
            FamilyKind::Qcqp => p.dot(y),
        };
        y.dot(qy).scale(0.5) + smooth
    }

    /// `cᵢ(y)` with `cᵢ ≤ 0` meaning row `i` holds.
    pub fn ineq_values(&self, y: &[f64]) -> Vec<f64> {
        self.ineq_map
            .eval(y)
            .into_iter()
            .zip(self.ineq.rhs())
            .map(|(g, r)| g - r)
            .collect()
    }

    pub fn ineq_jacobian(&self, y: &[f64]) -> Tensor<f64> {
        self.ineq_map.jacobian(y)
    }

    /// Hessian of row `i` (zero for linear rows), row-major `n × n`.
    pub fn ineq_hessian(&self, i: usize) -> Option<Vec<f64>> {
        match &self.ineq {
            Inequalities::Linear { .. } => None,
            Inequalities::Quadratic { h, .. } => {
                let hi = &h[i];
                Some(hi.zip_map(&linalg::transpose(hi), |a, b| a + b).into_data())
            }
        }
    }

    pub fn eq_residual(&self, y: &[f64], x: &[f64]) -> Vec<f64> {
        let cy = linalg::matvec_raw(self.c.data(), self.n_eq(), self.n(), y);
        cy.iter().zip(x).map(|(a, b)| a - b).collect()
    }

    /// Inequality rows `g ≤ rhs` followed by equality rows `Cy = x`.
    pub fn constraint_set(&self, x: &[f64]) -> Result<ConstraintSet<f64>> {
        if x.len() != self.n_eq() {
            return Err(Error::shape(
                "constraint set",
                format!("input has length {}, family has {} equality rows", x.len(), self.n_eq()),
            ));
        }
        let m = self.n_ineq();
        let ineq_kind = match self.kind {
            FamilyKind::Ncp => ConstraintKind::Linear,
            FamilyKind::Qcqp => ConstraintKind::Quadratic,
        };
        let mut lower = vec![f64::NEG_INFINITY; m];
        let mut upper = self.ineq.rhs().to_vec();
        lower.extend_from_slice(x);
        upper.extend_from_slice(x);
        let mut kinds = vec![ineq_kind; m];
        kinds.extend(std::iter::repeat(ConstraintKind::Linear).take(self.n_eq()));
        let map = StackedMap::new(vec![Arc::clone(&self.ineq_map), Arc::clone(&self.eq_map)])?;
        ConstraintSet::new(Arc::new(map), Bounds::new(lower, upper)?, kinds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    /// KKT point of a convex problem, hence globally optimal.
    Optimal,
    /// Best stationary point found by multi-start on a nonconvex problem.
    LocalOptimal,
    /// Residual target not met; the best point found is reported anyway.
    Unconverged,
}

/// Cached oracle result for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub y: Vec<f64>,
    pub objective: f64,
    /// KKT residual (QCQP) or stationarity residual (NCP) at `y`.
    pub residual: f64,
    pub status: SolveStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    pub split: Split,
    pub solution: Option<Solution>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub family: Family,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&i| self.instances[i].split == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.instances.iter().filter(|i| i.split == split).collect()
    }

    pub fn constraint_set(&self, index: usize) -> Result<ConstraintSet<f64>> {
        self.family.constraint_set(&self.instances[index].x)
    }

    /// The cached optimum of instance `index`, or an error naming the fix.
    pub fn solution(&self, index: usize) -> Result<&Solution> {
        self.instances[index]
            .solution
            .as_ref()
            .ok_or(Error::MissingOracle(index))
    }
}

/// 8:1:1 assignment by position.
pub fn split_for(index: usize, count: usize) -> Split {
    let train = count * 8 / 10;
    let valid = count / 10;
    if index < train {
        Split::Train
    } else if index < train + valid {
        Split::Valid
    } else {
        Split::Test
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    pub(crate) fn tiny_qcqp() -> Family {
        let q = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let ineq = Inequalities::Quadratic {
            h: vec![Tensor::identity(2)],
            g: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            rhs: vec![4.0],
        };
        Family::new(q, vec![0.0, 0.0], c, ineq, 0).unwrap()
    }

    #[test]
    fn qcqp_objective_by_hand() {
        // Q = 2I, p = 0, y = (1, 1): ½·(2 + 2) = 2
        let f = tiny_qcqp();
        assert_eq!(f.objective(&[1.0, 1.0]), 2.0);
        let tape = Tape::new();
        let v = f.objective_on(tape.vector_var(&[1.0, 1.0]));
        assert_eq!(v.item(), 2.0);
    }

    #[test]
    fn ncp_objective_at_origin_is_zero() {
        let f = Family::new(
            Tensor::identity(3),
            vec![0.0; 3],
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            Inequalities::Linear {
                a: Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(),
                b: vec![1.0],
            },
            0,
        )
        .unwrap();
        assert_eq!(f.objective(&[0.0; 3]), 0.0);
    }

    #[test]
    fn constraint_set_layout() {
        let f = tiny_qcqp();
        let cs = f.constraint_set(&[0.5]).unwrap();
        assert_eq!(cs.num_constraints(), 2);
        assert_eq!(cs.bounds().lower()[1], 0.5);
        assert_eq!(cs.bounds().upper()[1], 0.5);
        assert_eq!(cs.bounds().upper()[0], 4.0);
        assert!(cs.bounds().lower()[0].is_infinite());
        // Jacobian row of the quadratic: 2y + g
        let j = cs.jacobian(&[1.0, -2.0]);
        assert_eq!(j.row(0), &[3.0, -4.0]);
        assert_eq!(j.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn split_ratio() {
        let counts = (0..1000).fold([0; 3], |mut acc, i| {
            acc[split_for(i, 1000) as usize] += 1;
            acc
        });
        assert_eq!(counts, [800, 100, 100]);
    }

    #[test]
    fn family_kind_parses() {
        assert_eq!("QCQP".parse::<FamilyKind>().unwrap(), FamilyKind::Qcqp);
        assert!("lp".parse::<FamilyKind>().is_err());
    }
}
