use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::tensor::Tensor;

use super::OracleError;

/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorError {
    pub name: String,
    pub elements: usize,
    pub max_abs: f64,
    /// `max_abs / max(max |ref|, REL_EPS)`
    pub max_rel: f64,
    /// largest `|a - r| / max(|r|, REL_EPS)` over single elements
    pub max_elem_rel: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub tensors: Vec<TensorError>,
    /// Tensor with the largest `max_rel`.
    pub worst: Option<String>,
}

impl ErrorReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&TensorError> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<16} {:>10} {:>12} {:>12} {:>12} {:>12}\n",
            "tensor", "elements", "max_abs", "max_rel", "elem_rel", "rms"
        );
        for t in &self.tensors {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
                t.name, t.elements, t.max_abs, t.max_rel, t.max_elem_rel, t.rms
            );
        }
        if let Some(w) = &self.worst {
            let _ = writeln!(s, "worst: {w}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares every tensor of `actual` against the same-named tensor of
/// `reference`. Both maps must hold the same names and shapes.
pub fn compare_runs(
    actual: &BTreeMap<String, Tensor<f64>>,
    reference: &BTreeMap<String, Tensor<f64>>,
) -> Result<ErrorReport, OracleError> {
    if actual.keys().ne(reference.keys()) {
        return Err(OracleError::Shape(format!(
            "tensor sets differ: {:?} vs {:?}",
            actual.keys().collect::<Vec<_>>(),
            reference.keys().collect::<Vec<_>>()
        )));
    }
    let mut tensors = Vec::new();
    for (name, a) in actual {
        let r = &reference[name];
        if a.shape() != r.shape() {
            return Err(OracleError::Shape(format!("{name}: {:?} vs {:?}", a.shape(), r.shape())));
        }
        let (mut max_abs, mut max_elem_rel, mut sq, mut ref_max) = (0f64, 0f64, 0f64, 0f64);
        for (&x, &y) in a.data().iter().zip(r.data()) {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            max_elem_rel = max_elem_rel.max(d / y.abs().max(REL_EPS));
            sq += d * d;
            ref_max = ref_max.max(y.abs());
        }
        let n = a.data().len();
        tensors.push(TensorError {
            name: name.clone(),
            elements: n,
            max_abs,
            max_rel: max_abs / ref_max.max(REL_EPS),
            max_elem_rel,
            rms: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
        });
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .map(|t| t.name.clone());
    Ok(ErrorReport { tensors, worst })
}
