//! Reference solutions by a primal-dual interior-point method.
//!
//! Solves `min f(y)` s.t. `cᵢ(y) ≤ 0`, `Cy = x` with slacks `s > 0` and duals
//! `z > 0`. The convex QCQP is solved from the certified witness; the
//! nonconvex NCP is solved from several starts (Hessian shifted until the
//! condensed matrix factors) and the best stationary point is kept.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{witness_point, Dataset, Family, FamilyKind, Solution, SolveStatus};
use crate::linalg::{self, SpdFactor};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Starts for nonconvex families (the witness is always one of them).
    pub starts: usize,
    pub max_iters: usize,
    /// Residual at which an interior-point run stops.
    pub tol: f64,
    /// Residual required to call a convex solution optimal.
    pub kkt_target: f64,
    /// Residual required to call a nonconvex solution stationary.
    pub stationarity_target: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            starts: 8,
            max_iters: 200,
            tol: 1e-11,
            kkt_target: 1e-8,
            stationarity_target: 1e-6,
        }
    }
}

/// Primal-dual point with its residual.
#[derive(Clone, Debug)]
pub struct KktPoint {
    pub y: Vec<f64>,
    /// Inequality multipliers, `z ≥ 0`.
    pub z: Vec<f64>,
    /// Equality multipliers.
    pub nu: Vec<f64>,
    pub residual: f64,
}

/// `max(‖∇f + J_cᵀz + Cᵀν‖∞, ‖max(c, 0)‖∞, ‖Cy − x‖∞, maxᵢ |zᵢcᵢ|)` with
/// negative multipliers counted as dual infeasibility.
pub fn kkt_residual(family: &Family, x: &[f64], y: &[f64], z: &[f64], nu: &[f64]) -> f64 {
    let (n, n_eq) = (family.n(), family.n_eq());
    let c = family.ineq_values(y);
    let jc = family.ineq_jacobian(y);
    let mut rd = family.objective_grad(y);
    for (acc, v) in rd.iter_mut().zip(linalg::matvec_t_raw(jc.data(), c.len(), n, z)) {
        *acc += v;
    }
    for (acc, v) in rd.iter_mut().zip(linalg::matvec_t_raw(family.c().data(), n_eq, n, nu)) {
        *acc += v;
    }
    let mut r = linalg::norm_inf(&rd);
    for (&ci, &zi) in c.iter().zip(z) {
        r = r.max(ci.max(0.0)).max((zi * ci).abs()).max((-zi).max(0.0));
    }
    r.max(linalg::norm_inf(&family.eq_residual(y, x)))
}

fn fraction_to_boundary(v: &[f64], dv: &[f64], tau: f64) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .fold(1.0f64, |a, (&vi, &di)| a.min(-tau * vi / di))
}

/// One interior-point run from `start`.
pub fn interior_point(family: &Family, x: &[f64], start: &[f64], cfg: &OracleConfig) -> KktPoint {
    let (n, n_eq, m) = (family.n(), family.n_eq(), family.n_ineq());
    let convex = family.kind() == FamilyKind::Qcqp;
    let hessians: Vec<Option<Vec<f64>>> = (0..m).map(|i| family.ineq_hessian(i)).collect();
    let mut y = start.to_vec();
    let mut s: Vec<f64> = family.ineq_values(&y).iter().map(|&c| (-c).max(1.0)).collect();
    let mut z = vec![1.0; m];
    let mut nu = vec![0.0; n_eq];
    let mut best = KktPoint {
        residual: kkt_residual(family, x, &y, &z, &nu).max(f64::MIN_POSITIVE),
        y: y.clone(),
        z: z.clone(),
        nu: nu.clone(),
    };
    let dim = n + n_eq;
    for _ in 0..cfg.max_iters {
        let c = family.ineq_values(&y);
        let jc = family.ineq_jacobian(&y);
        let mut rd = family.objective_grad(&y);
        for (acc, v) in rd.iter_mut().zip(linalg::matvec_t_raw(jc.data(), m, n, &z)) {
            *acc += v;
        }
        for (acc, v) in rd.iter_mut().zip(linalg::matvec_t_raw(family.c().data(), n_eq, n, &nu)) {
            *acc += v;
        }
        let rp: Vec<f64> = c.iter().zip(&s).map(|(a, b)| a + b).collect();
        let re = family.eq_residual(&y, x);
        let mu = if m > 0 { linalg::dot(&s, &z) / m as f64 } else { 0.0 };
        let here = kkt_residual(family, x, &y, &z, &nu);
        if here < best.residual {
            best = KktPoint {
                y: y.clone(),
                z: z.clone(),
                nu: nu.clone(),
                residual: here,
            };
        }
        let inner = linalg::norm_inf(&rd).max(linalg::norm_inf(&rp)).max(linalg::norm_inf(&re)).max(mu);
        if here <= cfg.tol && inner <= cfg.tol {
            break;
        }
        let sigma = if mu > 1e-4 { 0.1 } else { 0.01 };
        let rc: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a * b - sigma * mu).collect();

        // condensed Hessian K = ∇²f + Σ zᵢ∇²cᵢ + J_cᵀ diag(z/s) J_c
        let mut k = family.objective_hessian(&y);
        for i in 0..m {
            if let Some(h) = &hessians[i] {
                for (a, b) in k.iter_mut().zip(h) {
                    *a += z[i] * b;
                }
            }
            let w = z[i] / s[i];
            let row = jc.row(i);
            for a in 0..n {
                let ra = w * row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..n {
                    k[a * n + b] += ra * row[b];
                }
            }
        }
        if !convex {
            let mut shift = 0.0;
            while SpdFactor::cholesky(&k, n).is_none() {
                let next = if shift == 0.0 { 1e-8 } else { shift * 10.0 };
                for i in 0..n {
                    k[i * n + i] += next - shift;
                }
                shift = next;
                if shift > 1e8 {
                    break;
                }
            }
        }
        // rhs = −r_d − J_cᵀ((z/s)∘r_p − r_c/s)
        let tmp: Vec<f64> = (0..m).map(|i| (z[i] * rp[i] - rc[i]) / s[i]).collect();
        let jt_tmp = linalg::matvec_t_raw(jc.data(), m, n, &tmp);
        let mut kkt = vec![0.0; dim * dim];
        let mut rhs = vec![0.0; dim];
        for a in 0..n {
            kkt[a * dim..a * dim + n].copy_from_slice(&k[a * n..(a + 1) * n]);
            rhs[a] = -rd[a] - jt_tmp[a];
        }
        for e in 0..n_eq {
            for a in 0..n {
                let v = family.c().at(e, a);
                kkt[a * dim + n + e] = v;
                kkt[(n + e) * dim + a] = v;
            }
            rhs[n + e] = -re[e];
        }
        let Ok(sol) = linalg::lu_solve(&kkt, dim, &rhs) else { break };
        let dy = &sol[..n];
        let dnu = &sol[n..];
        let jdy = linalg::matvec_raw(jc.data(), m, n, dy);
        let ds: Vec<f64> = (0..m).map(|i| -rp[i] - jdy[i]).collect();
        let dz: Vec<f64> = (0..m).map(|i| (z[i] * (jdy[i] + rp[i]) - rc[i]) / s[i]).collect();
        let ap = fraction_to_boundary(&s, &ds, 0.995);
        let ad = fraction_to_boundary(&z, &dz, 0.995);
        for i in 0..n {
            y[i] += ap * dy[i];
        }
        for i in 0..m {
            s[i] += ap * ds[i];
            z[i] += ad * dz[i];
        }
        for e in 0..n_eq {
            nu[e] += ad * dnu[e];
        }
        if !y.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    let last = kkt_residual(family, x, &y, &z, &nu);
    if last <= best.residual {
        KktPoint { y, z, nu, residual: last }
    } else {
        best
    }
}

/// Solve one instance. `seed` drives the extra starts of nonconvex families.
pub fn solve(family: &Family, x: &[f64], seed: u64, cfg: &OracleConfig) -> Solution {
    let witness = witness_point(family, x);
    let (target, status) = match family.kind() {
        FamilyKind::Qcqp => (cfg.kkt_target, SolveStatus::Optimal),
        FamilyKind::Ncp => (cfg.stationarity_target, SolveStatus::LocalOptimal),
    };
    let mut starts = vec![witness.clone()];
    if family.kind() == FamilyKind::Ncp {
        let mut rng = substream(seed, "oracle-starts");
        for _ in 1..cfg.starts.max(1) {
            starts.push(
                witness
                    .iter()
                    .map(|w| w + 2.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
    }
    let mut best: Option<(KktPoint, f64)> = None;
    let mut fallback: Option<KktPoint> = None;
    for start in &starts {
        let pt = interior_point(family, x, start, cfg);
        if pt.residual <= target {
            let f = family.objective(&pt.y);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((pt, f));
            }
        } else if fallback.as_ref().is_none_or(|fb| pt.residual < fb.residual) {
            fallback = Some(pt);
        }
    }
    match best {
        Some((pt, f)) => Solution {
            y: pt.y,
            objective: f,
            residual: pt.residual,
            status,
        },
        None => {
            let pt = fallback.expect("at least one start");
            Solution {
                objective: family.objective(&pt.y),
                residual: pt.residual,
                y: pt.y,
                status: SolveStatus::Unconverged,
            }
        }
    }
}

/// Solve and cache every instance (in parallel).
pub fn solve_dataset(ds: &mut Dataset, cfg: &OracleConfig) {
    let family = &ds.family;
    let seed = family.seed();
    let solutions: Vec<Solution> = ds
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| solve(family, &inst.x, seed.wrapping_add(i as u64), cfg))
        .collect();
    for (inst, sol) in ds.instances.iter_mut().zip(solutions) {
        inst.solution = Some(sol);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate, GenerateConfig, Inequalities};
    use crate::tensor::Tensor;

    #[test]
    fn unconstrained_quadratic_has_zero_optimum() {
        // H = 0, g = 0, rhs = 1: the only row 0 ≤ 1 never binds; C = [1, 0, 0] with x = 0
        let f = Family::new(
            Tensor::identity(3),
            vec![0.0; 3],
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            Inequalities::Quadratic {
                h: vec![Tensor::zeros(&[3, 3])],
                g: Tensor::zeros(&[1, 3]),
                rhs: vec![1.0],
            },
            0,
        )
        .unwrap();
        let s = solve(&f, &[0.0], 0, &OracleConfig::default());
        assert!(s.y.iter().all(|v| v.abs() < 1e-9), "{:?}", s.y);
        assert!(s.objective.abs() < 1e-12);
        assert_eq!(s.status, SolveStatus::Optimal);
    }

    #[test]
    fn equality_pins_one_dimensional_solution() {
        let f = Family::new(
            Tensor::identity(1),
            vec![0.0],
            Tensor::identity(1),
            Inequalities::Linear {
                a: Tensor::zeros(&[0, 1]),
                b: vec![],
            },
            0,
        )
        .unwrap();
        let s = solve(&f, &[2.0], 0, &OracleConfig::default());
        assert!((s.y[0] - 2.0).abs() < 1e-12);
        assert!((s.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generated_qcqp_meets_kkt_target() {
        let mut ds = generate(&GenerateConfig::new(FamilyKind::Qcqp, 10, 5, 5, 20, 2)).unwrap();
        solve_dataset(&mut ds, &OracleConfig::default());
        for inst in &ds.instances {
            let s = inst.solution.as_ref().unwrap();
            assert!(s.residual <= 1e-8, "residual {}", s.residual);
            assert_eq!(s.status, SolveStatus::Optimal);
        }
    }

    #[test]
    fn generated_ncp_is_stationary() {
        let mut ds = generate(&GenerateConfig::new(FamilyKind::Ncp, 10, 5, 5, 20, 2)).unwrap();
        solve_dataset(&mut ds, &OracleConfig::default());
        for inst in &ds.instances {
            let s = inst.solution.as_ref().unwrap();
            assert!(s.residual <= 1e-6, "residual {}", s.residual);
            assert_eq!(s.status, SolveStatus::LocalOptimal);
        }
    }
}
