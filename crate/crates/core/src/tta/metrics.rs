use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub domain_index: usize,
    pub pred: usize,
    pub label: usize,
    /// Rotation loss of `x_t` at the parameters held when step `t` began.
    pub ssl_loss: f64,
}

impl StepRecord {
    pub fn correct(&self) -> bool {
        self.pred == self.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain_index: usize,
    pub name: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    pub records: Vec<StepRecord>,
    /// Names of the stream's domains, indexed by `domain_index`.
    pub domains: Vec<String>,
    /// Parameter updates performed.
    pub updates: usize,
}

impl StreamResult {
    pub fn accuracy(&self) -> f64 {
        stream_accuracy(self).0
    }

    pub fn per_domain(&self) -> Vec<DomainAccuracy> {
        stream_accuracy(self).1
    }

    pub fn mean_ssl_loss(&self) -> f64 {
        self.records.iter().map(|r| r.ssl_loss).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// Fraction of correct predictions and the breakdown over the domains that occur.
pub fn stream_accuracy(result: &StreamResult) -> (f64, Vec<DomainAccuracy>) {
    let n = result.records.len();
    let correct = result.records.iter().filter(|r| r.correct()).count();
    let mut per: Vec<DomainAccuracy> = Vec::new();
    for r in &result.records {
        let slot = match per.iter().position(|d| d.domain_index == r.domain_index) {
            Some(i) => i,
            None => {
                per.push(DomainAccuracy {
                    domain_index: r.domain_index,
                    name: result.domains.get(r.domain_index).cloned().unwrap_or_else(|| r.domain_index.to_string()),
                    count: 0,
                    correct: 0,
                    accuracy: 0.0,
                });
                per.len() - 1
            }
        };
        per[slot].count += 1;
        per[slot].correct += r.correct() as usize;
    }
    per.sort_by_key(|d| d.domain_index);
    for d in &mut per {
        d.accuracy = d.correct as f64 / d.count as f64;
    }
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    (acc, per)
}

/// Mean and 95% t-interval half-width `t_{0.975, n−1} · s / √n`, with `s`
/// the sample standard deviation.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Data(format!("confidence interval needs at least 2 runs, got {n}")));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Data(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}
