mod common;

use proptest::prelude::*;
use snare_core::constraints::two_disks;
use snare_core::repair::{hardnet_repair, posthoc_project, snare_repair, snare_repair_on, ProjectionConfig};
use snare_core::rng::substream;
use snare_core::{Bounds, ConstraintSet, HardNetLayer, RepairConfig, Tape, Tensor};

/// Disk rows written out directly: `‖y + (1,0)‖²` and `‖y − (1,0)‖²`.
fn disk_values(y: &[f64]) -> [f64; 2] {
    [(y[0] + 1.0).powi(2) + y[1].powi(2), (y[0] - 1.0).powi(2) + y[1].powi(2)]
}

fn disk_violation(y: &[f64]) -> f64 {
    disk_values(y).iter().map(|g| (g - 2.25).max(0.0)).fold(0.0, f64::max)
}

fn linear_system() -> impl Strategy<Value = (Tensor, Bounds, Vec<f64>)> {
    (2usize..6)
        .prop_flat_map(|n| (Just(n), 1..n))
        .prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(-2.0f64..2.0, m * n),
                prop::collection::vec((-1.0f64..0.5, 0.0f64..1.5, 0u8..5), m),
                prop::collection::vec(-4.0f64..4.0, n),
                Just((m, n)),
            )
        })
        .prop_map(|(a, rows, y, (m, n))| {
            // code 0 drops the lower bound, code 1 the upper, code 2 pins the row
            let mut lower = Vec::new();
            let mut upper = Vec::new();
            for (lo, width, code) in rows {
                lower.push(if code == 0 { f64::NEG_INFINITY } else { lo });
                upper.push(match code {
                    1 => f64::INFINITY,
                    2 => lo,
                    _ => lo + width,
                });
            }
            (Tensor::matrix(m, n, a).unwrap(), Bounds::new(lower, upper).unwrap(), y)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn zero_lambda_linear_repair_is_the_closed_form_layer((a, bounds, y_hat) in linear_system()) {
        prop_assume!(HardNetLayer::new(a.clone(), bounds.clone()).is_ok());
        let cs = ConstraintSet::linear(a.clone(), bounds.clone()).unwrap();
        let cfg = RepairConfig { lambda: 0.0, tol: 1e-9, ..RepairConfig::default() };
        prop_assume!(!cs.is_feasible(&y_hat, cfg.tol));
        let (y, trace) = snare_repair(&y_hat, &cs, &cfg).unwrap();
        let h = hardnet_repair(&y_hat, &a, &bounds).unwrap();
        prop_assert_eq!(trace.corrective_iterations(), 1);
        for (p, q) in y.iter().zip(&h) {
            prop_assert!((p - q).abs() < 1e-10, "{:?} vs {:?}", y, h);
        }
    }

    #[test]
    fn repaired_output_is_a_fixed_point(y0 in -3.0f64..3.0, y1 in -3.0f64..3.0) {
        let cs = two_disks::<f64>();
        let cfg = RepairConfig { lambda: 0.1, tol: 1e-10, max_iters: 200, ..RepairConfig::default() };
        let (y, trace) = snare_repair(&[y0, y1], &cs, &cfg).unwrap();
        prop_assume!(trace.converged());
        let (again, second) = snare_repair(&y, &cs, &cfg).unwrap();
        prop_assert_eq!(second.iterates.len(), 1);
        prop_assert_eq!(again, y);
    }

    #[test]
    fn converged_repair_meets_every_tolerance(y0 in -3.0f64..3.0, y1 in -3.0f64..3.0) {
        let cs = two_disks::<f64>();
        for tol in [1e-4, 1e-6, 1e-8, 1e-10, 1e-12] {
            let cfg = RepairConfig { lambda: 0.1, tol, max_iters: 200, ..RepairConfig::default() };
            let (y, trace) = snare_repair(&[y0, y1], &cs, &cfg).unwrap();
            if trace.converged() {
                prop_assert!(disk_violation(&y) <= tol, "tol {tol}: violation {}", disk_violation(&y));
            }
        }
    }

    #[test]
    fn repair_jacobian_matches_differences(y0 in -1.4f64..-0.6, y1 in -0.6f64..0.6, w0 in -1.0f64..1.0, w1 in -1.0f64..1.0) {
        let cs = two_disks::<f64>();
        // a fixed number of updates keeps the map smooth away from active-set changes
        let cfg = RepairConfig { lambda: 0.1, tol: 1e-300, step_tol: 0.0, max_iters: 3, ..RepairConfig::default() };
        let loss = |y_hat: &[f64]| -> f64 {
            let (y, _) = snare_repair(y_hat, &cs, &cfg).unwrap();
            w0 * y[0] + w1 * y[1] + y[0] * y[1]
        };
        let tape = Tape::new();
        let y_hat = tape.vector_var(&[y0, y1]);
        let rep = snare_repair_on(y_hat, cs.map(), cs.bounds(), &cfg).unwrap();
        // every iterate must sit clear of the bound the difference quotient could cross
        prop_assume!(rep.trace.iterates.iter().all(|y| {
            let g = disk_values(y);
            g.iter().all(|v| (v - 2.25).abs() > 1e-4)
        }));
        let out = rep.output;
        let l = out.entry(0).scale(w0) + out.entry(1).scale(w1) + out.entry(0) * out.entry(1);
        let ad = tape.backward(l).unwrap().wrt(y_hat).into_data();
        let fd = common::central_diff(loss, &[y0, y1], 1e-6);
        prop_assert!(common::rel_err(&ad, &fd, 1e-8) < 1e-4, "ad {:?} fd {:?}", ad, fd);
    }
}

#[test]
fn projection_of_disk_fixture_beats_sampled_feasible_points() {
    let cs = two_disks::<f64>();
    let mut rng = substream(21, "feasible-samples");
    let samples = common::rejection_sample(&cs, -2.5, 2.5, 10_000, &mut rng);
    let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let y_hats = [[-1.0, 0.0], [2.0, 2.0], [0.0, 3.0], [-2.6, -0.4], [0.3, 0.1]];
    for y_hat in y_hats {
        let p = posthoc_project(&y_hat, &cs, &ProjectionConfig::default());
        assert!(p.feasible, "{y_hat:?}");
        assert!(disk_violation(&p.point) <= 1e-6);
        let d = dist(&p.point, &y_hat);
        let best = samples.iter().map(|s| dist(s, &y_hat)).fold(f64::INFINITY, f64::min);
        assert!(d <= best + 1e-6, "{y_hat:?}: projection at {d}, a sample at {best}");
    }
    // from (−1, 0) the nearest point of the right disk is (−0.5, 0), inside the left one
    let p = posthoc_project(&[-1.0, 0.0], &cs, &ProjectionConfig::default());
    assert!((p.point[0] + 0.5).abs() < 1e-5 && p.point[1].abs() < 1e-5, "{:?}", p.point);
    assert!((disk_values(&p.point)[1] - 2.25).abs() < 1e-5);
}
