//! Dataset files: one JSON document per family.
//!
//! ```text
//! {
//!   "format": "snare-dataset/1",
//!   "family": {
//!     "kind": "ncp" | "qcqp", "n", "n_eq", "n_ineq", "seed",
//!     "q": array, "p": array, "c": array,
//!     "a": array, "b": array                (ncp)
//!     "h": [array; n_ineq], "g": array, "rhs": array   (qcqp)
//!   },
//!   "instances": [
//!     { "x": base64, "split": "train" | "valid" | "test",
//!       "solution": null | { "y": base64, "objective", "residual", "status" } }
//!   ]
//! }
//! ```
//!
//! An `array` is `{ "shape": [..], "data": base64 }`; every base64 payload is
//! little-endian `f64`, so values round-trip bit for bit. Scalars are JSON
//! numbers (shortest round-trip representation).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Family, FamilyKind, Inequalities, Instance, Solution, SolveStatus, Split};
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::models::{decode_f64s, encode_f64s};
use crate::tensor::Tensor;

const FORMAT: &str = "snare-dataset/1";

#[derive(Serialize, Deserialize)]
struct Array {
    shape: Vec<usize>,
    data: String,
}

impl Array {
    fn of(t: &Tensor<f64>) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: encode_f64s(t.data()),
        }
    }

    fn vector(v: &[f64]) -> Self {
        Array {
            shape: vec![v.len()],
            data: encode_f64s(v),
        }
    }

    fn tensor(&self) -> Result<Tensor<f64>> {
        Tensor::new(self.shape.clone(), decode_f64s(&self.data)?)
            .map_err(|e| Error::Format(format!("array does not match its shape: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct FamilyRecord {
    kind: FamilyKind,
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    seed: u64,
    q: Array,
    p: Array,
    c: Array,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Array>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Array>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<Vec<Array>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Array>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rhs: Option<Array>,
}

#[derive(Serialize, Deserialize)]
struct SolutionRecord {
    y: String,
    objective: f64,
    residual: f64,
    status: SolveStatus,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    x: String,
    split: Split,
    solution: Option<SolutionRecord>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    family: FamilyRecord,
    instances: Vec<InstanceRecord>,
}

fn family_record(f: &Family) -> FamilyRecord {
    let mut rec = FamilyRecord {
        kind: f.kind(),
        n: f.n(),
        n_eq: f.n_eq(),
        n_ineq: f.n_ineq(),
        seed: f.seed(),
        q: Array::of(f.q()),
        p: Array::vector(f.p()),
        c: Array::of(f.c()),
        a: None,
        b: None,
        h: None,
        g: None,
        rhs: None,
    };
    match f.inequalities() {
        Inequalities::Linear { a, b } => {
            rec.a = Some(Array::of(a));
            rec.b = Some(Array::vector(b));
        }
        Inequalities::Quadratic { h, g, rhs } => {
            rec.h = Some(h.iter().map(Array::of).collect());
            rec.g = Some(Array::of(g));
            rec.rhs = Some(Array::vector(rhs));
        }
    }
    rec
}

fn family_from(rec: &FamilyRecord) -> Result<Family> {
    let missing = |field: &str| Error::Format(format!("{} family is missing `{field}`", rec.kind));
    let ineq = match rec.kind {
        FamilyKind::Ncp => Inequalities::Linear {
            a: rec.a.as_ref().ok_or_else(|| missing("a"))?.tensor()?,
            b: rec.b.as_ref().ok_or_else(|| missing("b"))?.tensor()?.into_data(),
        },
        FamilyKind::Qcqp => Inequalities::Quadratic {
            h: rec
                .h
                .as_ref()
                .ok_or_else(|| missing("h"))?
                .iter()
                .map(Array::tensor)
                .collect::<Result<_>>()?,
            g: rec.g.as_ref().ok_or_else(|| missing("g"))?.tensor()?,
            rhs: rec.rhs.as_ref().ok_or_else(|| missing("rhs"))?.tensor()?.into_data(),
        },
    };
    let family = Family::new(
        rec.q.tensor()?,
        rec.p.tensor()?.into_data(),
        rec.c.tensor()?,
        ineq,
        rec.seed,
    )
    .map_err(|e| Error::Format(format!("inconsistent family data: {e}")))?;
    if (family.n(), family.n_eq(), family.n_ineq()) != (rec.n, rec.n_eq, rec.n_ineq) {
        return Err(Error::Format(format!(
            "declared dims (n={}, n_eq={}, n_ineq={}) disagree with the arrays",
            rec.n, rec.n_eq, rec.n_ineq
        )));
    }
    Ok(family)
}

pub fn dataset_to_json(ds: &Dataset) -> String {
    let file = DatasetFile {
        format: FORMAT.into(),
        family: family_record(&ds.family),
        instances: ds
            .instances
            .iter()
            .map(|inst| InstanceRecord {
                x: encode_f64s(&inst.x),
                split: inst.split,
                solution: inst.solution.as_ref().map(|s| SolutionRecord {
                    y: encode_f64s(&s.y),
                    objective: s.objective,
                    residual: s.residual,
                    status: s.status,
                }),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serializes")
}

pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text)?;
    if file.format != FORMAT {
        return Err(Error::Format(format!("unsupported dataset format `{}`", file.format)));
    }
    let family = family_from(&file.family)?;
    let instances = file
        .instances
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let x = decode_f64s(&rec.x)?;
            if x.len() != family.n_eq() {
                return Err(Error::Format(format!("instance {i}: x has length {}", x.len())));
            }
            let solution = rec
                .solution
                .map(|s| -> Result<Solution> {
                    Ok(Solution {
                        y: decode_f64s(&s.y)?,
                        objective: s.objective,
                        residual: s.residual,
                        status: s.status,
                    })
                })
                .transpose()?;
            Ok(Instance {
                x,
                split: rec.split,
                solution,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { family, instances })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_json(ds).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate, GenerateConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [FamilyKind::Ncp, FamilyKind::Qcqp] {
            let mut ds = generate(&GenerateConfig::new(kind, 5, 2, 3, 6, 4)).unwrap();
            ds.instances[0].solution = Some(Solution {
                y: vec![0.1, -1.0 / 3.0, 1e-300, 2.5, -0.0],
                objective: std::f64::consts::PI,
                residual: 1e-12,
                status: SolveStatus::Optimal,
            });
            let back = dataset_from_json(&dataset_to_json(&ds)).unwrap();
            assert_eq!(back, ds);
            let sol = back.instances[0].solution.as_ref().unwrap();
            assert_eq!(sol.objective.to_bits(), std::f64::consts::PI.to_bits());
            assert_eq!(sol.y[4].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn unknown_format_rejected() {
        let ds = generate(&GenerateConfig::new(FamilyKind::Ncp, 3, 1, 1, 2, 0)).unwrap();
        let text = dataset_to_json(&ds).replace(FORMAT, "other/9");
        assert!(matches!(dataset_from_json(&text), Err(Error::Format(_))));
    }
}
