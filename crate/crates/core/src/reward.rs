//! Fidelity rewards, softmax dimension weights, domain-adaptive scaling and
//! the composite reward of a batch of response groups.
//!
//! For every image `i` of a batch, every response `k` and every dimension
//! `a`, the reward is the mean over opponents `j != i` of
//! `1 - |P_hat - P_star|`, where `P_hat` compares response `k`'s score with
//! the opponent's group and `P_star` compares the ground-truth MOS values.
//! The composite reward mixes the per-dimension rewards with softmax weights
//! whose attribute entries are scaled by a per-domain sigmoid gate and then
//! renormalized.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thurstone::{ground_truth_prob, per_response_prob, ComparisonConfig};
use crate::types::{group_stats, DimensionId, ImageRecord, ResponseGroup};

/// Lower bound on every softmax weight after an adaptive update.
pub const WEIGHT_FLOOR: f64 = 0.01;

/// Softmax logits over the `A + 1` dimensions, overall first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub alpha: Vec<f64>,
}

impl WeightParams {
    /// All logits zero.
    pub fn uniform(num_attributes: usize) -> Self {
        WeightParams {
            alpha: vec![0.0; num_attributes + 1],
        }
    }

    pub fn num_dimensions(&self) -> usize {
        self.alpha.len()
    }
}

/// Per-domain sigmoid logits for the attribute weights (index `a - 1`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainWeightParams {
    pub phi: BTreeMap<String, Vec<f64>>,
}

impl DomainWeightParams {
    /// Every domain registered with zero logits.
    pub fn zeros<I, S>(domains: I, num_attributes: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DomainWeightParams {
            phi: domains
                .into_iter()
                .map(|d| (d.into(), vec![0.0; num_attributes]))
                .collect(),
        }
    }

    pub fn register(&mut self, domain: impl Into<String>, num_attributes: usize) {
        self.phi.entry(domain.into()).or_insert_with(|| vec![0.0; num_attributes]);
    }

    pub fn get(&self, domain: &str) -> Option<&[f64]> {
        self.phi.get(domain).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingGroundTruthPolicy {
    /// A dimension with nonzero weight but no ground truth is an error.
    #[default]
    Error,
    /// Drop the dimension for that record and renormalize its weights.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Fixed,
    /// Exponentiated-gradient updates of the weight and domain logits.
    Eg,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" | "off" => Ok(WeightMode::Fixed),
            "eg" | "on" => Ok(WeightMode::Eg),
            other => Err(Error::Config(format!("unknown weight mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub comparison: ComparisonConfig,
    pub missing_gt: MissingGroundTruthPolicy,
    pub weight_mode: WeightMode,
    /// Step size on the weight logits in [`WeightMode::Eg`].
    pub eg_step: f64,
    /// Step size on the domain logits in [`WeightMode::Eg`].
    pub eg_domain_step: f64,
    /// Number of most recent batches the adaptive update looks at.
    pub eg_window: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            comparison: ComparisonConfig::default(),
            missing_gt: MissingGroundTruthPolicy::Error,
            weight_mode: WeightMode::Fixed,
            eg_step: 1.0,
            eg_domain_step: 1.0,
            eg_window: 4,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        self.comparison.validate()?;
        if !(self.eg_step > 0.0 && self.eg_domain_step >= 0.0) {
            return Err(Error::Config("eg step sizes must be positive".into()));
        }
        if self.eg_window == 0 {
            return Err(Error::Config("eg_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1 - |p_hat - p_star|`.
pub fn fidelity(p_hat: f64, p_star: f64) -> Result<f64> {
    for p in [p_hat, p_star] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::OutOfRangeProbability(p));
        }
    }
    Ok(1.0 - (p_hat - p_star).abs())
}

pub fn softmax_weights(params: &WeightParams) -> Vec<f64> {
    softmax(&params.alpha)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax weights with attribute entries gated by the domain's sigmoid
/// factors, renormalized to sum to one. The overall weight is never gated.
pub fn effective_weights(params: &WeightParams, domain_params: &DomainWeightParams, domain: &str) -> Result<Vec<f64>> {
    let phi = domain_params
        .get(domain)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    let base = softmax_weights(params);
    if phi.len() + 1 != base.len() {
        return Err(Error::Config(format!(
            "domain `{domain}` has {} scaling logits for {} attributes",
            phi.len(),
            base.len() - 1
        )));
    }
    let scaled: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(a, &w)| if a == 0 { w } else { w * sigmoid(phi[a - 1]) })
        .collect();
    let total: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|w| w / total).collect())
}

/// Rewards of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Fidelity reward per dimension; `None` when the dimension has no
    /// ground truth for this image.
    pub per_dimension: Vec<Option<f64>>,
    pub composite: f64,
}

/// Rewards of all responses of one image together with the weights used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub image_id: String,
    pub domain_id: String,
    /// Effective weights after dropping dimensions without ground truth.
    pub weights: Vec<f64>,
    pub responses: Vec<RewardBreakdown>,
}

impl GroupRewards {
    pub fn composites(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.composite).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRewards {
    pub groups: Vec<GroupRewards>,
}

impl BatchRewards {
    pub fn get(&self, image_id: &str, k: usize) -> Option<&RewardBreakdown> {
        self.groups
            .iter()
            .find(|g| g.image_id == image_id)
            .and_then(|g| g.responses.get(k))
    }

    pub fn mean_composite(&self) -> f64 {
        let (sum, n) = self
            .groups
            .iter()
            .flat_map(|g| g.responses.iter())
            .fold((0.0, 0usize), |(s, n), r| (s + r.composite, n + 1));
        sum / n as f64
    }

    /// Per-domain reward matrices of this batch for the adaptive weight update.
    pub fn history_entries(&self) -> Vec<RewardHistoryEntry> {
        let mut by_domain: BTreeMap<&str, Vec<&RewardBreakdown>> = BTreeMap::new();
        for g in &self.groups {
            by_domain.entry(g.domain_id.as_str()).or_default().extend(g.responses.iter());
        }
        by_domain
            .into_iter()
            .filter_map(|(domain, responses)| {
                let dims = responses.first()?.per_dimension.len();
                let complete: Vec<_> = responses
                    .into_iter()
                    .filter(|r| r.per_dimension.iter().all(Option::is_some))
                    .collect();
                if complete.is_empty() {
                    return None;
                }
                let rewards = (0..dims)
                    .map(|a| complete.iter().map(|r| r.per_dimension[a].unwrap_or(0.0)).collect())
                    .collect();
                Some(RewardHistoryEntry {
                    domain_id: domain.to_string(),
                    rewards,
                })
            })
            .collect()
    }
}

/// Per-dimension rewards of the responses of one completed batch, pooled by
/// domain. `rewards[a][n]` is dimension `a`'s reward of response `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHistoryEntry {
    pub domain_id: String,
    pub rewards: Vec<Vec<f64>>,
}

struct DimStats {
    mean: f64,
    var: f64,
}

/// Rewards for every response of every group in the batch.
///
/// Each element pairs an image's ground truth with its sampled group. All
/// groups must have the same size `K >= 2` and carry a score for each of the
/// `A + 1` dimensions of `weights`.
pub fn batch_rewards(
    batch: &[(&ImageRecord, &ResponseGroup)],
    cfg: &RewardConfig,
    weights: &WeightParams,
    domain_params: &DomainWeightParams,
) -> Result<BatchRewards> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let dims = weights.num_dimensions();
    let k = batch[0].1.len();
    for (record, group) in batch {
        if group.len() != k {
            return Err(Error::Config(format!(
                "group `{}` has {} samples, expected {k}",
                group.image_id,
                group.len()
            )));
        }
        if group.samples.iter().any(|s| s.scores.len() != dims) {
            return Err(Error::Config(format!(
                "group `{}` does not score all {dims} dimensions",
                group.image_id
            )));
        }
        if record.attr_mos.len() + 1 != dims {
            return Err(Error::Config(format!(
                "record `{}` has {} attributes, weights cover {}",
                record.image_id,
                record.attr_mos.len(),
                dims - 1
            )));
        }
    }

    let stats: Vec<Vec<DimStats>> = batch
        .iter()
        .map(|(_, group)| {
            (0..dims)
                .map(|a| group_stats(group, DimensionId::new(a)).map(|(mean, var)| DimStats { mean, var }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let groups = (0..b)
        .into_par_iter()
        .map(|i| image_rewards(batch, &stats, i, cfg, weights, domain_params))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchRewards { groups })
}

fn image_rewards(
    batch: &[(&ImageRecord, &ResponseGroup)],
    stats: &[Vec<DimStats>],
    i: usize,
    cfg: &RewardConfig,
    weights: &WeightParams,
    domain_params: &DomainWeightParams,
) -> Result<GroupRewards> {
    let (record, group) = batch[i];
    let dims = weights.num_dimensions();
    let mut w = effective_weights(weights, domain_params, &record.domain_id)?;
    let comparison = &cfg.comparison;

    // Ground-truth comparison probabilities against every opponent, per
    // dimension. `None` marks a dimension this image cannot be rewarded on.
    let mut targets: Vec<Option<Vec<(usize, f64)>>> = Vec::with_capacity(dims);
    for (a, &wa) in w.iter().enumerate() {
        let dim = DimensionId::new(a);
        let Some(own) = record.ground_truth(dim) else {
            targets.push(None);
            continue;
        };
        let mut row = Vec::with_capacity(batch.len() - 1);
        for (j, (other, _)) in batch.iter().enumerate() {
            if j == i {
                continue;
            }
            match other.ground_truth(dim) {
                Some(theirs) => row.push((j, ground_truth_prob(own, theirs, comparison)?)),
                None if cfg.missing_gt == MissingGroundTruthPolicy::Error && wa > 0.0 => {
                    return Err(missing(other, dim));
                }
                None => {}
            }
        }
        targets.push(if row.is_empty() { None } else { Some(row) });
    }

    for (a, (t, wa)) in targets.iter().zip(w.iter_mut()).enumerate() {
        if t.is_none() {
            if cfg.missing_gt == MissingGroundTruthPolicy::Error && *wa > 0.0 {
                return Err(missing(record, DimensionId::new(a)));
            }
            *wa = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(missing(record, DimensionId::OVERALL));
    }
    w.iter_mut().for_each(|x| *x /= total);

    let responses = group
        .samples
        .iter()
        .map(|sample| {
            let per_dimension = targets
                .iter()
                .enumerate()
                .map(|(a, row)| {
                    let Some(row) = row else { return Ok(None) };
                    let score = sample.scores[a];
                    let own_var = stats[i][a].var;
                    let mut sum = 0.0;
                    for &(j, p_star) in row {
                        let opp = &stats[j][a];
                        let p_hat = per_response_prob(score, own_var, opp.mean, opp.var, comparison)?;
                        sum += fidelity(p_hat, p_star)?;
                    }
                    Ok(Some(sum / row.len() as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            let composite = per_dimension
                .iter()
                .zip(&w)
                .map(|(r, w)| r.map_or(0.0, |r| w * r))
                .sum::<f64>()
                .clamp(0.0, 1.0);
            Ok(RewardBreakdown {
                per_dimension,
                composite,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GroupRewards {
        image_id: record.image_id.clone(),
        domain_id: record.domain_id.clone(),
        weights: w,
        responses,
    })
}

fn missing(record: &ImageRecord, dim: DimensionId) -> Error {
    Error::MissingGroundTruth {
        image_id: record.image_id.clone(),
        dimension: dim.to_string(),
    }
}

/// One adaptive step on the weight logits (and the domain logits).
///
/// The objective is the correlation, over the pooled responses of the recent
/// batches, between the composite reward and the overall-dimension reward.
/// Pearson correlation serves as the differentiable surrogate of its rank
/// counterpart. `alpha` takes a gradient-ascent step (a multiplicative update
/// on the weights), each domain's `phi` a step in sigmoid-logit space, and the
/// resulting softmax weights are floored at [`WEIGHT_FLOOR`].
pub fn update_weights(
    params: &WeightParams,
    domain_params: &DomainWeightParams,
    history: &[RewardHistoryEntry],
    cfg: &RewardConfig,
) -> Result<(WeightParams, DomainWeightParams)> {
    if cfg.weight_mode == WeightMode::Fixed {
        return Ok((params.clone(), domain_params.clone()));
    }
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let window = &history[history.len().saturating_sub(cfg.eg_window)..];
    let dims = params.num_dimensions();
    let w = softmax_weights(params);

    let mut grad_alpha = vec![0.0; dims];
    let mut grad_phi: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    let mut used = 0usize;
    for entry in window {
        if entry.rewards.len() != dims {
            return Err(Error::Config(format!(
                "history entry has {} dimensions, weights have {dims}",
                entry.rewards.len()
            )));
        }
        let phi = domain_params
            .get(&entry.domain_id)
            .ok_or_else(|| Error::UnknownDomain(entry.domain_id.clone()))?;
        let gamma: Vec<f64> = std::iter::once(1.0).chain(phi.iter().map(|&p| sigmoid(p))).collect();
        let u: Vec<f64> = w.iter().zip(&gamma).map(|(w, g)| w * g).collect();
        let s: f64 = u.iter().sum();
        let e: Vec<f64> = u.iter().map(|x| x / s).collect();

        let Some(g) = correlation_gradient(&entry.rewards, &e) else {
            continue;
        };
        used += 1;
        let eg: f64 = e.iter().zip(&g).map(|(e, g)| e * g).sum();
        let h: Vec<f64> = g.iter().map(|g| (g - eg) / s).collect();
        let hgw: f64 = (0..dims).map(|c| h[c] * gamma[c] * w[c]).sum();
        for a in 0..dims {
            grad_alpha[a] += gamma[a] * w[a] * h[a] - w[a] * hgw;
        }
        let slot = grad_phi
            .entry(entry.domain_id.as_str())
            .or_insert_with(|| (vec![0.0; dims - 1], 0));
        for a in 1..dims {
            slot.0[a - 1] += h[a] * w[a] * gamma[a] * (1.0 - gamma[a]);
        }
        slot.1 += 1;
    }

    let mut alpha = params.alpha.clone();
    if used > 0 {
        for (a, g) in alpha.iter_mut().zip(&grad_alpha) {
            *a += cfg.eg_step * g / used as f64;
        }
    }
    let floored = floor_weights(&softmax(&alpha), WEIGHT_FLOOR);
    let mean_log = floored.iter().map(|w| w.ln()).sum::<f64>() / dims as f64;
    let alpha = floored.iter().map(|w| w.ln() - mean_log).collect();

    let mut next_domains = domain_params.clone();
    for (domain, (g, n)) in grad_phi {
        if let Some(phi) = next_domains.phi.get_mut(domain) {
            for (p, g) in phi.iter_mut().zip(&g) {
                *p += cfg.eg_domain_step * g / n as f64;
            }
        }
    }
    Ok((WeightParams { alpha }, next_domains))
}

/// Gradient of `corr(sum_a e_a R_a, R_0)` with respect to `e`, or `None` when
/// either side has zero variance.
fn correlation_gradient(rewards: &[Vec<f64>], e: &[f64]) -> Option<Vec<f64>> {
    let n = rewards[0].len();
    if n < 2 {
        return None;
    }
    let centered: Vec<Vec<f64>> = rewards
        .iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / n as f64;
            r.iter().map(|x| x - m).collect()
        })
        .collect();
    let c: Vec<f64> = (0..n)
        .map(|t| centered.iter().zip(e).map(|(r, e)| e * r[t]).sum())
        .collect();
    let y = &centered[0];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let var_c = dot(&c, &c);
    let var_y = dot(y, y);
    if var_c <= 0.0 || var_y <= 0.0 {
        return None;
    }
    let cov_cy = dot(&c, y);
    let sc = var_c.sqrt();
    let sy = var_y.sqrt();
    Some(
        centered
            .iter()
            .map(|r| dot(r, y) / (sc * sy) - cov_cy * dot(r, &c) / (sc * sc * sc * sy))
            .collect(),
    )
}

/// Maps `w` onto `{w >= floor, sum w = 1}` by pinning entries below the
/// floor and rescaling the rest.
fn floor_weights(w: &[f64], floor: f64) -> Vec<f64> {
    let mut out = w.to_vec();
    let mut pinned = vec![false; w.len()];
    loop {
        let mut changed = false;
        for (x, p) in out.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *x < floor {
                *x = floor;
                *p = true;
                changed = true;
            }
        }
        let pinned_mass = floor * pinned.iter().filter(|p| **p).count() as f64;
        let free_mass: f64 = out.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(x, _)| x).sum();
        if free_mass > 0.0 {
            let scale = (1.0 - pinned_mass) / free_mass;
            for (x, p) in out.iter_mut().zip(&pinned) {
                if !*p {
                    *x *= scale;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Correlation objective the adaptive update climbs, averaged over entries.
pub fn weight_objective(params: &WeightParams, domain_params: &DomainWeightParams, history: &[RewardHistoryEntry]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for entry in history {
        let e = effective_weights(params, domain_params, &entry.domain_id)?;
        let len = entry.rewards[0].len();
        let c: Vec<f64> = (0..len)
            .map(|t| entry.rewards.iter().zip(&e).map(|(r, e)| e * r[t]).sum())
            .collect();
        if let Ok(r) = crate::metrics::plcc(&c, &entry.rewards[0]) {
            total += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("no history entry has variance".into()));
    }
    Ok(total / n as f64)
}
