//! Rank (SRCC) and linear (PLCC) correlation and per-domain evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, DimensionId};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 points, got {}", x.len())));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(v.to_string()));
    }
    Ok(())
}

/// Average (fractional) ranks, 1-based; tied values share the mean of the
/// ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: String,
    pub dimension: String,
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
}

/// Difference between a model's in-domain and cross-domain SRCC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub train_set: String,
    pub eval_domain: String,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub gaps: Vec<GapEntry>,
}

impl EvalReport {
    pub fn row(&self, domain: &str, dimension: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.domain == domain && r.dimension == dimension)
    }

    /// CSV with columns `domain,dimension,n,srcc,plcc`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "domain,dimension,n,srcc,plcc")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.domain, r.dimension, r.n, r.srcc, r.plcc)?;
        }
        Ok(())
    }
}

/// Per-domain, per-dimension SRCC and PLCC of `predictions` against the
/// dataset's ground truth. Dimensions without ground truth in a domain are
/// omitted, as are domains with fewer than two labelled images.
pub fn eval_report(dataset: &Dataset, predictions: &BTreeMap<(String, DimensionId), f64>) -> Result<EvalReport> {
    let schema = dataset.schema();
    let mut rows = Vec::new();
    for domain in dataset.domains() {
        for dim in schema.dimensions() {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for r in dataset.domain_records(domain) {
                let Some(gt) = r.ground_truth(dim) else { continue };
                let p = predictions.get(&(r.image_id.clone(), dim)).ok_or_else(|| Error::MissingPrediction {
                    image_id: r.image_id.clone(),
                    dimension: schema.key(dim).to_string(),
                })?;
                pred.push(*p);
                truth.push(gt);
            }
            if pred.len() < 2 {
                continue;
            }
            rows.push(EvalRow {
                domain: domain.clone(),
                dimension: schema.key(dim).to_string(),
                n: pred.len(),
                srcc: srcc(&pred, &truth)?,
                plcc: plcc(&pred, &truth)?,
            });
        }
    }
    Ok(EvalReport { rows, gaps: Vec::new() })
}
