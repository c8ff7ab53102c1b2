//! Test-split metrics: optimality gap, constraint errors, violation counts and
//! timing, with per-seed reports and mean ± std aggregates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::constraints::{ConstraintSet, Slack};
use crate::error::{Error, Result};
use crate::models::Mlp;
use crate::problems::{Dataset, Family, Split};
use crate::repair::{self, gradient_correction_on, HardNetLayer, ProjectionConfig, RepairConfig};

/// Floor applied before taking logs in [`gmean`].
pub const GMEAN_FLOOR: f64 = 1e-16;
/// A (instance, constraint) pair counts as violated above this.
pub const VIOLATION_THRESHOLD: f64 = 1e-4;

/// `exp(mean(log(max(vᵢ, floor))))`.
pub fn gmean(values: &[f64], floor: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("geometric mean of an empty list".into()));
    }
    let s: f64 = values.iter().map(|v| v.max(floor).ln()).sum();
    Ok((s / values.len() as f64).exp())
}

/// How a trained model's raw output becomes a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// LM repair on every output.
    Snare,
    /// Raw network output.
    Soft,
    /// Closed-form layer when the rows are linear with full rank, else LM
    /// repair with zero slack.
    SoftEpochsThenHard,
    /// Fixed gradient steps on the squared violation.
    PenaltyGrad,
    /// Euclidean projection of the raw output, off the tape.
    Posthoc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Snare,
        Method::Soft,
        Method::SoftEpochsThenHard,
        Method::PenaltyGrad,
        Method::Posthoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Snare => "snare",
            Method::Soft => "soft",
            Method::SoftEpochsThenHard => "soft-epochs-then-hard",
            Method::PenaltyGrad => "penalty-grad",
            Method::Posthoc => "posthoc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected one of snare, soft, soft-epochs-then-hard, penalty-grad, posthoc)"
                ))
            })
    }
}

/// Inference settings shared by all methods.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    pub method: Method,
    pub model: &'a Mlp<f64>,
    pub repair: RepairConfig<f64>,
    pub correction_steps: usize,
    pub correction_step_size: f64,
    pub projection: ProjectionConfig<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y: Vec<f64>,
    /// LM updates performed (0 for methods without LM repair).
    pub corrective_iterations: usize,
    /// Forward pass plus repair.
    pub seconds: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(method: Method, model: &'a Mlp<f64>) -> Self {
        Predictor {
            method,
            model,
            repair: RepairConfig::default(),
            correction_steps: 10,
            correction_step_size: 0.01,
            projection: ProjectionConfig::default(),
        }
    }

    /// Predict for input `x`; `slack` relaxes the bounds of LM repair only.
    pub fn predict(&self, family: &Family, x: &[f64], slack: f64) -> Result<Prediction> {
        let cs = family.constraint_set(x)?;
        let start = Instant::now();
        let raw = self.model.forward(x)?;
        let (y, iters) = self.finish(&cs, raw, slack)?;
        let seconds = start.elapsed().as_secs_f64();
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("{} produced a nonfinite prediction", self.method)));
        }
        Ok(Prediction {
            y,
            corrective_iterations: iters,
            seconds,
        })
    }

    fn finish(&self, cs: &ConstraintSet<f64>, raw: Vec<f64>, slack: f64) -> Result<(Vec<f64>, usize)> {
        match self.method {
            Method::Soft => Ok((raw, 0)),
            Method::Snare => {
                let cfg = self.repair.with_slack(Slack::Uniform(slack));
                let (y, trace) = repair::snare_repair(&raw, cs, &cfg)?;
                Ok((y, trace.corrective_iterations()))
            }
            Method::SoftEpochsThenHard => match hard_layer(cs) {
                Some(layer) => Ok((layer.apply(&raw), 0)),
                None => {
                    let (y, trace) = repair::snare_repair(&raw, cs, &self.repair.with_slack(Slack::zero()))?;
                    Ok((y, trace.corrective_iterations()))
                }
            },
            Method::PenaltyGrad => {
                let tape = Tape::new();
                let y = gradient_correction_on(
                    tape.vector_const(&raw),
                    cs.map(),
                    cs.bounds(),
                    self.correction_steps,
                    self.correction_step_size,
                );
                Ok((y.to_vec(), 0))
            }
            Method::Posthoc => Ok((repair::posthoc_project(&raw, cs, &self.projection).point, 0)),
        }
    }
}

/// The closed-form layer for `cs` when it applies.
pub fn hard_layer(cs: &ConstraintSet<f64>) -> Option<HardNetLayer<f64>> {
    if cs.is_linear() {
        HardNetLayer::from_constraints(cs).ok()
    } else {
        None
    }
}

/// Errors of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMetrics {
    /// `f(y) − f*`, signed; `None` without an oracle solution.
    pub gap: Option<f64>,
    pub ineq_max: f64,
    pub ineq_gmean: f64,
    pub eq_max: f64,
    pub eq_gmean: f64,
    pub ineq_violated: usize,
    pub eq_violated: usize,
    pub seconds: f64,
    pub corrective_iterations: usize,
}

pub fn instance_metrics(
    ds: &Dataset,
    index: usize,
    prediction: &Prediction,
    require_oracle: bool,
) -> Result<InstanceMetrics> {
    let inst = &ds.instances[index];
    let gap = match (&inst.solution, require_oracle) {
        (Some(s), _) => Some(ds.family.objective(&prediction.y) - s.objective),
        (None, true) => return Err(Error::MissingOracle(index)),
        (None, false) => None,
    };
    let cs = ds.family.constraint_set(&inst.x)?;
    let viol = cs.violation(&prediction.y);
    let (mut ineq, mut eq) = (Vec::new(), Vec::new());
    for (i, v) in viol.into_iter().enumerate() {
        if cs.bounds().is_equality(i) {
            eq.push(v);
        } else {
            ineq.push(v);
        }
    }
    let stats = |v: &[f64]| -> Result<(f64, f64, usize)> {
        if v.is_empty() {
            return Ok((0.0, 0.0, 0));
        }
        Ok((
            v.iter().fold(0.0f64, |a, &b| a.max(b)),
            gmean(v, GMEAN_FLOOR)?,
            v.iter().filter(|&&x| x > VIOLATION_THRESHOLD).count(),
        ))
    };
    let (ineq_max, ineq_gmean, ineq_violated) = stats(&ineq)?;
    let (eq_max, eq_gmean, eq_violated) = stats(&eq)?;
    Ok(InstanceMetrics {
        gap,
        ineq_max,
        ineq_gmean,
        eq_max,
        eq_gmean,
        ineq_violated,
        eq_violated,
        seconds: prediction.seconds,
        corrective_iterations: prediction.corrective_iterations,
    })
}

/// One row of a report: a method, seed, and (optionally) repair tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seed: u64,
    pub tol: Option<f64>,
    /// Max over instances of the positive part of the gap.
    pub max_opt_gap: f64,
    /// Geometric mean over instances of the positive part of the gap.
    pub gmean_opt_gap: f64,
    pub max_ineq_error: f64,
    pub gmean_ineq_error: f64,
    pub max_eq_error: f64,
    pub gmean_eq_error: f64,
    /// Violated (instance, row) pairs per instance.
    pub n_ineq_violations: f64,
    pub n_eq_violations: f64,
    pub mean_seconds: f64,
    pub mean_corrective_iterations: f64,
}

/// Two-level aggregation: per-instance max/gmean over rows, then max/gmean
/// over instances. Gaps are NaN when no instance has an oracle solution.
pub fn aggregate(method: Method, seed: u64, tol: Option<f64>, rows: &[InstanceMetrics]) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Contract("no instances to aggregate".into()));
    }
    let k = rows.len() as f64;
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap).map(|g| g.max(0.0)).collect();
    let (max_gap, gmean_gap) = if gaps.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (gaps.iter().fold(0.0f64, |a, &b| a.max(b)), gmean(&gaps, GMEAN_FLOOR)?)
    };
    let col = |f: fn(&InstanceMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let max_of = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    Ok(MetricsReport {
        method,
        seed,
        tol,
        max_opt_gap: max_gap,
        gmean_opt_gap: gmean_gap,
        max_ineq_error: max_of(col(|r| r.ineq_max)),
        gmean_ineq_error: gmean(&col(|r| r.ineq_gmean), GMEAN_FLOOR)?,
        max_eq_error: max_of(col(|r| r.eq_max)),
        gmean_eq_error: gmean(&col(|r| r.eq_gmean), GMEAN_FLOOR)?,
        n_ineq_violations: rows.iter().map(|r| r.ineq_violated).sum::<usize>() as f64 / k,
        n_eq_violations: rows.iter().map(|r| r.eq_violated).sum::<usize>() as f64 / k,
        mean_seconds: rows.iter().map(|r| r.seconds).sum::<f64>() / k,
        mean_corrective_iterations: rows.iter().map(|r| r.corrective_iterations).sum::<usize>() as f64 / k,
    })
}

/// Predict and score the given instances, each with its own repair slack.
pub fn evaluate_indices(
    predictor: &Predictor<'_>,
    ds: &Dataset,
    indices: &[usize],
    slacks: Option<&[f64]>,
    require_oracle: bool,
) -> Result<Vec<InstanceMetrics>> {
    indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let slack = slacks.map_or(0.0, |s| s[k]);
            let pred = predictor.predict(&ds.family, &ds.instances[i].x, slack)?;
            instance_metrics(ds, i, &pred, require_oracle)
        })
        .collect()
}

/// Metrics of `predictor` on a split with zero slack.
pub fn evaluate(predictor: &Predictor<'_>, ds: &Dataset, split: Split, seed: u64) -> Result<MetricsReport> {
    let idx = ds.indices(split);
    let rows = evaluate_indices(predictor, ds, &idx, None, true)?;
    let tol = matches!(predictor.method, Method::Snare | Method::SoftEpochsThenHard).then_some(predictor.repair.tol);
    aggregate(predictor.method, seed, tol, &rows)
}

/// One report per repair tolerance.
pub fn tol_sweep(predictor: &Predictor<'_>, ds: &Dataset, split: Split, seed: u64, tols: &[f64]) -> Result<Vec<MetricsReport>> {
    tols.iter()
        .map(|&tol| {
            let p = Predictor {
                repair: predictor.repair.with_tol(tol),
                ..predictor.clone()
            };
            let mut r = evaluate(&p, ds, split, seed)?;
            r.tol = Some(tol);
            Ok(r)
        })
        .collect()
}

const METRIC_NAMES: [&str; 10] = [
    "max_opt_gap",
    "gmean_opt_gap",
    "max_ineq_error",
    "gmean_ineq_error",
    "max_eq_error",
    "gmean_eq_error",
    "n_ineq_violations",
    "n_eq_violations",
    "mean_seconds",
    "mean_corrective_iterations",
];

impl MetricsReport {
    pub fn metrics(&self) -> [f64; 10] {
        [
            self.max_opt_gap,
            self.gmean_opt_gap,
            self.max_ineq_error,
            self.gmean_ineq_error,
            self.max_eq_error,
            self.gmean_eq_error,
            self.n_ineq_violations,
            self.n_eq_violations,
            self.mean_seconds,
            self.mean_corrective_iterations,
        ]
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("report csv: {e}"))
}

/// CSV with columns `method, seed, tol`, then the metrics in field order.
pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r).map_err(csv_err)?;
    }
    if reports.is_empty() {
        let mut header = vec!["method", "seed", "tol"];
        header.extend(METRIC_NAMES);
        w.write_record(&header).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn reports_from_csv(text: &str) -> Result<Vec<MetricsReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Mean ± sample standard deviation across seeds for one method and tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub tol: Option<f64>,
    pub seeds: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut groups: Vec<(Method, Option<f64>, Vec<&MetricsReport>)> = Vec::new();
    for r in reports {
        match groups
            .iter_mut()
            .find(|(m, t, _)| *m == r.method && t.map(f64::to_bits) == r.tol.map(f64::to_bits))
        {
            Some(g) => g.2.push(r),
            None => groups.push((r.method, r.tol, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(method, tol, rs)| {
            let k = rs.len() as f64;
            let mut mean = vec![0.0; METRIC_NAMES.len()];
            for r in &rs {
                for (m, v) in mean.iter_mut().zip(r.metrics()) {
                    *m += v / k;
                }
            }
            let std = (0..METRIC_NAMES.len())
                .map(|j| {
                    if rs.len() < 2 {
                        return 0.0;
                    }
                    let ss: f64 = rs.iter().map(|r| (r.metrics()[j] - mean[j]).powi(2)).sum();
                    (ss / (k - 1.0)).sqrt()
                })
                .collect();
            SummaryRow {
                method,
                tol,
                seeds: rs.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// CSV with `method, tol, seeds` and a `<metric>_mean, <metric>_std` pair per metric.
pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "tol".into(), "seeds".into()];
    for name in METRIC_NAMES {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.method.to_string(),
            r.tol.map(|t| t.to_string()).unwrap_or_default(),
            r.seeds.to_string(),
        ];
        for (m, s) in r.mean.iter().zip(&r.std) {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmean_examples() {
        assert!((gmean(&[1.0, 4.0], GMEAN_FLOOR).unwrap() - 2.0).abs() < 1e-15);
        assert!((gmean(&[2.0, 8.0, 32.0], GMEAN_FLOOR).unwrap() - 8.0).abs() < 1e-13);
        assert!((gmean(&[0.0, 0.0], GMEAN_FLOOR).unwrap() - 1e-16).abs() < 1e-30);
        assert!(matches!(gmean(&[], GMEAN_FLOOR), Err(Error::Contract(_))));
    }

    #[test]
    fn gmean_scales() {
        let v = [0.3, 2.0, 7.5];
        let c = 3.25;
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let lhs = gmean(&scaled, GMEAN_FLOOR).unwrap();
        let rhs = c * gmean(&v, GMEAN_FLOOR).unwrap();
        assert!((lhs - rhs).abs() < 1e-13 * rhs);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    fn report(method: Method, seed: u64, v: f64) -> MetricsReport {
        MetricsReport {
            method,
            seed,
            tol: Some(1e-6),
            max_opt_gap: v,
            gmean_opt_gap: v / 2.0,
            max_ineq_error: 0.0,
            gmean_ineq_error: 1e-16,
            max_eq_error: 1e-9,
            gmean_eq_error: 1e-12,
            n_ineq_violations: 0.19,
            n_eq_violations: 0.0,
            mean_seconds: 1e-4,
            mean_corrective_iterations: 2.5,
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let mut rs = vec![report(Method::Snare, 0, 0.1), report(Method::Posthoc, 1, 1.0 / 3.0)];
        rs[1].tol = None;
        let back = reports_from_csv(&reports_to_csv(&rs).unwrap()).unwrap();
        assert_eq!(back, rs);
        let json = serde_json::to_string(&rs).unwrap();
        assert_eq!(serde_json::from_str::<Vec<MetricsReport>>(&json).unwrap(), rs);
        let header = reports_to_csv(&rs).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("method,seed,tol,max_opt_gap,gmean_opt_gap,max_ineq_error"));
    }

    #[test]
    fn summary_mean_and_std() {
        let rs = [report(Method::Snare, 0, 1.0), report(Method::Snare, 1, 3.0)];
        let s = summarize(&rs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean[0], 2.0);
        assert!((s[0].std[0] - 2f64.sqrt()).abs() < 1e-15);
    }
}
