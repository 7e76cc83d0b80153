use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "metric inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "correlation needs at least 3 samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Contract("metric inputs must be finite".into()));
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("an input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Pearson linear correlation with population moments.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_unchecked(x, y)
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_unchecked(&average_ranks(x), &average_ranks(y))
}

/// Agreement between predicted and reference scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub srocc: f64,
    pub plcc: f64,
}

impl MetricReport {
    pub fn compute(predicted: &[f64], reference: &[f64]) -> Result<Self> {
        Ok(MetricReport {
            n: predicted.len(),
            srocc: srocc(predicted, reference)?,
            plcc: plcc(predicted, reference)?,
        })
    }

    /// Writes the `n,srocc,plcc` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "n,srocc,plcc\n{},{},{}", self.n, self.srocc, self.plcc)
            .map_err(|e| Error::io(path, e))
    }
}
