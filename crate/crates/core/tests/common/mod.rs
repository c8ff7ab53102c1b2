//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use snare_core::problems::Family;
use snare_core::ConstraintSet;

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, y: &[f64], h: f64) -> Vec<f64> {
    let mut p = y.to_vec();
    (0..y.len())
        .map(|i| {
            p[i] = y[i] + h;
            let up = f(&p);
            p[i] = y[i] - h;
            let down = f(&p);
            p[i] = y[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(floor)
}

/// Uniform draws from `[lo, hi]²` kept when `cs` holds within `tol`.
pub fn rejection_sample(cs: &ConstraintSet, lo: f64, hi: f64, count: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let y = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        if cs.is_feasible(&y, 0.0) {
            out.push(y);
        }
    }
    out
}

/// Best objective over the feasible part of the line `Cy = x` for a family
/// with `n = 2`, `n_eq = 1`. A coarse scan over `t ∈ [−r, r]` along the line
/// is followed by a fine scan around the coarse winner.
pub fn line_grid_min(family: &Family, x: &[f64], r: f64) -> Option<(f64, [f64; 2])> {
    assert_eq!((family.n(), family.n_eq()), (2, 1));
    let c = family.c().row(0).to_vec();
    let cc = c[0] * c[0] + c[1] * c[1];
    let base = [c[0] * x[0] / cc, c[1] * x[0] / cc];
    let dir = [-c[1] / cc.sqrt(), c[0] / cc.sqrt()];
    let at = |t: f64| [base[0] + t * dir[0], base[1] + t * dir[1]];
    let value = |t: f64| -> Option<f64> {
        let y = at(t);
        family.ineq_values(&y).iter().all(|&g| g <= 0.0).then(|| family.objective(&y))
    };
    let scan = |lo: f64, hi: f64, steps: usize| -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for k in 0..=steps {
            let t = lo + (hi - lo) * k as f64 / steps as f64;
            if let Some(f) = value(t) {
                if best.is_none_or(|(b, _)| f < b) {
                    best = Some((f, t));
                }
            }
        }
        best
    };
    let coarse_step = 2.0 * r / 40_000.0;
    let (_, t0) = scan(-r, r, 40_000)?;
    let (f, t) = scan(t0 - 2.0 * coarse_step, t0 + 2.0 * coarse_step, 40_000)?;
    Some((f, at(t)))
}
