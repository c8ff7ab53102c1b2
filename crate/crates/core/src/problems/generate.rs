//! Random family construction with certified-feasible instances.
//!
//! `Q = MᵀM + I` (M standard normal), `p` standard normal, `C` with
//! orthogonal rows of norm `√n`. Each instance draws `x ~ U[−1, 1]^{n_eq}` and
//! uses the witness `y₀ = Cᵀx/n` (so `Cy₀ = x`). Inequality right-hand sides are set from
//! probe draws of the witness so that a target fraction of draws is strictly
//! feasible; draws whose witness misses the margin are rejected and redrawn.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_for, Dataset, Family, FamilyKind, Inequalities, Instance};
use crate::error::{Error, Result};
use crate::linalg::{self, Qr};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub kind: FamilyKind,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub count: usize,
    pub seed: u64,
    /// Target probability that a uniform `x` yields a witness meeting every
    /// inequality with margin.
    #[serde(default = "default_acceptance")]
    pub acceptance: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Redraws allowed per instance before giving up.
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_acceptance() -> f64 {
    0.5
}

fn default_margin() -> f64 {
    1e-3
}

fn default_retries() -> usize {
    1000
}

const PROBES: usize = 4096;

impl GenerateConfig {
    pub fn new(kind: FamilyKind, n: usize, n_eq: usize, n_ineq: usize, count: usize, seed: u64) -> Self {
        GenerateConfig {
            kind,
            n,
            n_eq,
            n_ineq,
            count,
            seed,
            acceptance: default_acceptance(),
            margin: default_margin(),
            retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.count == 0 {
            return Err(Error::Config("n and count must be at least 1".into()));
        }
        if self.n_eq == 0 || self.n_eq > self.n {
            return Err(Error::Config(format!(
                "need 1 <= n_eq <= n, got n_eq = {} with n = {}",
                self.n_eq, self.n
            )));
        }
        if !(self.acceptance > 0.0 && self.acceptance <= 1.0) {
            return Err(Error::Config(format!("acceptance must lie in (0, 1], got {}", self.acceptance)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()
}

/// `MᵀM/scale + shift·I` for a square standard normal `M`.
fn gram_plus(rng: &mut impl Rng, n: usize, scale: f64, shift: f64) -> Tensor<f64> {
    let m = normal_matrix(rng, n, n);
    let mt = linalg::transpose(&Tensor::matrix(n, n, m.clone()).expect("square"));
    let mut g = linalg::matmul(&mt, &Tensor::matrix(n, n, m).expect("square")).expect("square");
    for i in 0..n {
        for j in 0..n {
            g.data_mut()[i * n + j] /= scale;
        }
        g.data_mut()[i * n + i] += shift;
    }
    // symmetrize away rounding so Q == Qᵀ bit for bit
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g.at(i, j) + g.at(j, i));
            g.data_mut()[i * n + j] = v;
            g.data_mut()[j * n + i] = v;
        }
    }
    g
}

/// Rows of norm `scale`, mutually orthogonal.
fn orthogonal_rows(rng: &mut impl Rng, rows: usize, n: usize, scale: f64) -> Result<Tensor<f64>> {
    let gt = normal_matrix(rng, n, rows);
    let qr = Qr::factor(&gt, n, rows)?;
    if !qr.is_full_rank(1e-10) {
        return Err(Error::Generation("equality matrix draw is rank deficient".into()));
    }
    let mut c = vec![0.0; rows * n];
    for j in 0..rows {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = qr.q_apply(&e);
        for (dst, v) in c[j * n..(j + 1) * n].iter_mut().zip(col) {
            *dst = scale * v;
        }
    }
    Tensor::matrix(rows, n, c)
}

fn uniform_input(rng: &mut impl Rng, n_eq: usize) -> Vec<f64> {
    (0..n_eq).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

// CCᵀ = nI, so Cᵀx/n solves Cy = x
fn witness(c: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let n = c.cols() as f64;
    linalg::matvec_t_raw(c.data(), c.rows(), c.cols(), x).into_iter().map(|v| v / n).collect()
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = ((v.len() - 1) as f64 * q).round() as usize;
    v[pos.min(v.len() - 1)]
}

/// Draw a family and `count` instances; no oracle solutions are attached.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, n_eq, m) = (cfg.n, cfg.n_eq, cfg.n_ineq);
    let mut rng = substream(cfg.seed, "family");
    let q = gram_plus(&mut rng, n, 1.0, 1.0);
    let p: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let c = orthogonal_rows(&mut rng, n_eq, n, (n as f64).sqrt())?;

    // inequality rows with zero right-hand side, to be calibrated below
    let mut ineq = match cfg.kind {
        FamilyKind::Ncp => Inequalities::Linear {
            a: Tensor::matrix(m, n, normal_matrix(&mut rng, m, n))?,
            b: vec![0.0; m],
        },
        FamilyKind::Qcqp => Inequalities::Quadratic {
            h: (0..m).map(|_| gram_plus(&mut rng, n, n as f64, 0.0)).collect(),
            g: Tensor::matrix(m, n, normal_matrix(&mut rng, m, n))?,
            rhs: vec![0.0; m],
        },
    };
    let uncalibrated = Family::new(q.clone(), p.clone(), c.clone(), ineq.clone(), cfg.seed)?;

    if m > 0 {
        let mut probe_rng = substream(cfg.seed, "calibrate");
        let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(PROBES); m];
        for _ in 0..PROBES {
            let y0 = witness(&c, &uniform_input(&mut probe_rng, n_eq));
            for (row, v) in rows.iter_mut().zip(uncalibrated.ineq_values(&y0)) {
                row.push(v);
            }
        }
        let per_row = cfg.acceptance.powf(1.0 / m as f64);
        let rhs: Vec<f64> = rows.into_iter().map(|r| quantile(r, per_row) + cfg.margin).collect();
        match &mut ineq {
            Inequalities::Linear { b, .. } => *b = rhs,
            Inequalities::Quadratic { rhs: r, .. } => *r = rhs,
        }
    }
    let family = Family::new(q, p, c, ineq, cfg.seed)?;

    let mut rng = substream(cfg.seed, "instances");
    let mut instances = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let mut found = None;
        for _ in 0..cfg.retries.max(1) {
            let x = uniform_input(&mut rng, n_eq);
            let y0 = witness(family.c(), &x);
            let slack_ok = family.ineq_values(&y0).iter().all(|&v| v <= -cfg.margin);
            if slack_ok {
                found = Some(x);
                break;
            }
        }
        let x = found.ok_or_else(|| {
            Error::Generation(format!(
                "instance {index}: no input with a strictly feasible witness after {} draws",
                cfg.retries
            ))
        })?;
        instances.push(Instance {
            x,
            split: split_for(index, cfg.count),
            solution: None,
        });
    }
    Ok(Dataset { family, instances })
}

/// The witness `Cᵀx/n` used to certify an instance.
pub fn witness_point(family: &Family, x: &[f64]) -> Vec<f64> {
    witness(family.c(), x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenerateConfig::new(FamilyKind::Qcqp, 6, 2, 3, 10, 7);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn witnesses_hold_with_margin() {
        for kind in [FamilyKind::Ncp, FamilyKind::Qcqp] {
            let ds = generate(&GenerateConfig::new(kind, 8, 3, 5, 40, 1)).unwrap();
            for inst in &ds.instances {
                let y0 = witness_point(&ds.family, &inst.x);
                assert!(ds.family.ineq_values(&y0).iter().all(|&v| v <= -1e-3));
                assert!(ds.family.eq_residual(&y0, &inst.x).iter().all(|r| r.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn equality_rows_are_orthogonal_with_norm_sqrt_n() {
        let ds = generate(&GenerateConfig::new(FamilyKind::Ncp, 7, 3, 2, 1, 3)).unwrap();
        let c = ds.family.c();
        for i in 0..3 {
            for j in 0..3 {
                let d = linalg::dot(c.row(i), c.row(j));
                assert!((d - if i == j { 7.0 } else { 0.0 }).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn bad_dimensions_rejected() {
        let cfg = GenerateConfig::new(FamilyKind::Ncp, 3, 4, 1, 1, 0);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
