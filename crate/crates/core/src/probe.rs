//! Nearest-centroid factor probe over time-averaged features.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidProbe {
    pub factor: String,
    pub centroids: BTreeMap<String, Vec<f64>>,
}

impl CentroidProbe {
    /// Centroid of a class = mean over its samples of their time averages.
    pub fn fit<T: Scalar>(factor: impl Into<String>, samples: &[(&Matrix<T>, &str)]) -> Result<Self> {
        let classes: Vec<&str> = samples.iter().map(|(_, c)| *c).collect();
        Self::fit_declared(factor, &classes, samples)
    }

    /// As [`fit`](Self::fit), but every declared class must have a sample.
    pub fn fit_declared<T: Scalar>(factor: impl Into<String>, classes: &[&str], samples: &[(&Matrix<T>, &str)]) -> Result<Self> {
        let factor = factor.into();
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = classes.iter().map(|c| (c.to_string(), (Vec::new(), 0))).collect();
        for (x, class) in samples {
            if x.rows() == 0 {
                return Err(Error::input("cannot fit a probe on an empty sequence"));
            }
            let mean = x.column_means();
            let (sum, n) = sums.entry(class.to_string()).or_insert_with(|| (Vec::new(), 0));
            if sum.is_empty() {
                *sum = vec![0.0; mean.len()];
            } else if sum.len() != mean.len() {
                return Err(Error::input("probe samples differ in feature width"));
            }
            for (s, m) in sum.iter_mut().zip(&mean) {
                *s += m;
            }
            *n += 1;
        }
        if sums.len() < 2 {
            return Err(Error::input(format!("probe for {factor} needs at least 2 classes")));
        }
        let mut centroids = BTreeMap::new();
        for (class, (sum, n)) in sums {
            if n == 0 {
                return Err(Error::input(format!("class {class} of {factor} has no samples")));
            }
            let c: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite centroid for class {class}")));
            }
            centroids.insert(class, c);
        }
        Ok(Self { factor, centroids })
    }

    pub fn classes(&self) -> Vec<&str> {
        self.centroids.keys().map(String::as_str).collect()
    }

    /// Nearest centroid by Euclidean distance; ties go to the
    /// lexicographically smallest class.
    pub fn classify<T: Scalar>(&self, x: &Matrix<T>) -> &str {
        let mean = x.column_means();
        let mut best: Option<(&str, f64)> = None;
        for (class, c) in &self.centroids {
            let d: f64 = c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((class, d));
            }
        }
        best.expect("probe has classes").0
    }

    /// Fraction of `(sequence, intended class)` pairs classified as intended.
    pub fn transfer_rate<T: Scalar>(&self, outputs: &[(Matrix<T>, String)]) -> f64 {
        if outputs.is_empty() {
            return 0.0;
        }
        let hits = outputs.par_iter().filter(|(x, want)| self.classify(x) == want).count();
        hits as f64 / outputs.len() as f64
    }

    pub fn confusion<T: Scalar>(&self, labelled: &[(&Matrix<T>, &str)]) -> ConfusionMatrix {
        let classes: Vec<String> = self.centroids.keys().cloned().collect();
        let index = |c: &str| classes.iter().position(|k| k == c);
        let predicted: Vec<&str> = labelled.par_iter().map(|(x, _)| self.classify(x)).collect();
        let mut counts = vec![vec![0usize; classes.len()]; classes.len()];
        let mut correct = 0;
        for ((_, truth), pred) in labelled.iter().zip(&predicted) {
            if truth == pred {
                correct += 1;
            }
            if let (Some(i), Some(j)) = (index(truth), index(pred)) {
                counts[i][j] += 1;
            }
        }
        let accuracy = if labelled.is_empty() { 0.0 } else { correct as f64 / labelled.len() as f64 };
        ConfusionMatrix { classes, counts, accuracy }
    }
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    #[serde(skip)]
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub factor: String,
    pub accuracy: f64,
    pub confusion_matrix: ConfusionMatrix,
    pub transfer_rate_by_policy: BTreeMap<String, f64>,
}
