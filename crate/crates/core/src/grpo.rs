//! Group-relative advantages, the clipped KL-penalized GRPO surrogate, and a
//! tabular score policy on which the surrogate can be optimized exactly.
//!
//! The policy keeps one categorical distribution over a shared score grid per
//! `(image, dimension)`. A response is one independent draw per dimension, so
//! its log-probability is the sum of the per-dimension log masses.
//!
//! ```text
//! L = -1/B sum_i 1/K sum_k min(rho_k A_k, clip(rho_k, 1-eps, 1+eps) A_k)
//!     + beta * KL(pi || pi_ref)
//! ```
//!
//! where `rho_k = pi(r_k) / pi_old(r_k)` and the KL term is the exact
//! categorical divergence averaged over the batch's `(image, dimension)` keys.

use std::collections::BTreeMap;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DimensionId, ResponseGroup, ScoreSample, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Responses sampled per image (`K`).
    pub group_size: usize,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Importance-ratio clipping threshold.
    pub eps_clip: f64,
    /// Stabilizer added to the group standard deviation.
    pub eps_adv: f64,
    /// Plain gradient-descent step on the logits. The loss averages over
    /// all `B * K` responses, so steps of order one are needed.
    pub learning_rate: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 6,
            beta: 0.04,
            eps_clip: 0.2,
            eps_adv: 1e-8,
            learning_rate: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group size must be >= 2, got {}", self.group_size)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        for (name, v) in [
            ("eps_clip", self.eps_clip),
            ("eps_adv", self.eps_adv),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Strictly increasing bin centres within `[1, 5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreGrid {
    values: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config("score grid needs at least two bins".into()));
        }
        if values.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Config("score grid must be strictly increasing".into()));
        }
        if values[0] < MIN_SCORE || values[values.len() - 1] > MAX_SCORE {
            return Err(Error::Config("score grid must lie within [1, 5]".into()));
        }
        Ok(ScoreGrid { values })
    }

    /// Evenly spaced grid from 1 to 5.
    pub fn with_step(step: f64) -> Result<Self> {
        if step.is_nan() || step <= 0.0 {
            return Err(Error::Config(format!("grid step must be > 0, got {step}")));
        }
        let n = ((MAX_SCORE - MIN_SCORE) / step + 1e-9).floor() as usize;
        Self::new((0..=n).map(|i| MIN_SCORE + i as f64 * step).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bin whose centre equals `score` (to within 1e-9).
    pub fn index_of(&self, score: f64) -> Option<usize> {
        let pos = self.values.partition_point(|&v| v < score - 1e-9);
        (pos < self.values.len() && (self.values[pos] - score).abs() <= 1e-9).then_some(pos)
    }
}

impl Default for ScoreGrid {
    fn default() -> Self {
        ScoreGrid::with_step(0.25).expect("default grid is valid")
    }
}

impl TryFrom<Vec<f64>> for ScoreGrid {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ScoreGrid::new(values)
    }
}

impl From<ScoreGrid> for Vec<f64> {
    fn from(grid: ScoreGrid) -> Self {
        grid.values
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Categorical score distributions keyed by `(image_id, dimension)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    grid: ScoreGrid,
    num_dimensions: usize,
    /// `logits[image][dimension][bin]`.
    logits: BTreeMap<String, Vec<Vec<f64>>>,
}

impl TabularPolicy {
    /// Uniform distributions (all logits zero) for every image.
    pub fn uniform<I, S>(image_ids: I, num_dimensions: usize, grid: ScoreGrid) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let bins = grid.len();
        let logits = image_ids
            .into_iter()
            .map(|id| (id.into(), vec![vec![0.0; bins]; num_dimensions]))
            .collect();
        TabularPolicy {
            grid,
            num_dimensions,
            logits,
        }
    }

    /// Near-uniform distributions: every logit drawn from `N(0, std)`.
    ///
    /// Images are visited in sorted id order so the result depends only on
    /// the seed and the id set.
    pub fn jittered<I, S>(image_ids: I, num_dimensions: usize, grid: ScoreGrid, std: f64, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut policy = Self::uniform(image_ids, num_dimensions, grid);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for rows in policy.logits.values_mut() {
                for z in rows.iter_mut().flatten() {
                    *z = normal.sample(&mut rng);
                }
            }
        }
        Ok(policy)
    }

    /// Builds a policy from explicit logits. Every row must have one entry per
    /// grid bin and every image the same number of dimensions.
    pub fn from_logits(grid: ScoreGrid, logits: BTreeMap<String, Vec<Vec<f64>>>) -> Result<Self> {
        let num_dimensions = logits.values().next().map_or(0, Vec::len);
        for (id, rows) in &logits {
            if rows.len() != num_dimensions || rows.iter().any(|r| r.len() != grid.len()) {
                return Err(Error::KeyMismatch(format!("logit shape of `{id}` does not match the grid")));
            }
            if rows.iter().flatten().any(|z| z.is_nan()) {
                return Err(Error::NonFiniteInput(format!("logits of `{id}`")));
            }
        }
        Ok(TabularPolicy {
            grid,
            num_dimensions,
            logits,
        })
    }

    pub fn grid(&self) -> &ScoreGrid {
        &self.grid
    }

    pub fn num_dimensions(&self) -> usize {
        self.num_dimensions
    }

    pub fn logits(&self) -> &BTreeMap<String, Vec<Vec<f64>>> {
        &self.logits
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.logits.keys().map(String::as_str)
    }

    fn rows(&self, image_id: &str) -> Result<&Vec<Vec<f64>>> {
        self.logits
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn image_logits_mut(&mut self, image_id: &str) -> Result<&mut Vec<Vec<f64>>> {
        self.logits
            .get_mut(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn log_probs(&self, image_id: &str, dim: DimensionId) -> Result<Vec<f64>> {
        let rows = self.rows(image_id)?;
        let row = rows
            .get(dim.index())
            .ok_or_else(|| Error::KeyMismatch(format!("`{image_id}` has no dimension {dim}")))?;
        Ok(log_softmax(row))
    }

    pub fn probs(&self, image_id: &str, dim: DimensionId) -> Result<Vec<f64>> {
        Ok(self.log_probs(image_id, dim)?.into_iter().map(f64::exp).collect())
    }

    /// Expected score under the categorical for `(image_id, dim)`.
    pub fn mean_score(&self, image_id: &str, dim: DimensionId) -> Result<f64> {
        Ok(self
            .probs(image_id, dim)?
            .iter()
            .zip(self.grid.values())
            .map(|(p, g)| p * g)
            .sum())
    }

    /// Log-probability of a full response (one score per dimension).
    pub fn response_log_prob(&self, image_id: &str, scores: &[f64]) -> Result<f64> {
        if scores.len() != self.num_dimensions {
            return Err(Error::KeyMismatch(format!(
                "response has {} scores, policy has {} dimensions",
                scores.len(),
                self.num_dimensions
            )));
        }
        let mut total = 0.0;
        for (d, &s) in scores.iter().enumerate() {
            let bin = self.bin_of(s)?;
            total += self.log_probs(image_id, DimensionId::new(d))?[bin];
        }
        Ok(total)
    }

    fn bin_of(&self, score: f64) -> Result<usize> {
        self.grid
            .index_of(score)
            .ok_or_else(|| Error::Config(format!("score {score} is not on the policy grid")))
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(self.clone())
    }
}

/// Frozen copy of a policy (the old or reference policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot(TabularPolicy);

impl PolicySnapshot {
    pub fn into_inner(self) -> TabularPolicy {
        self.0
    }
}

impl Deref for PolicySnapshot {
    type Target = TabularPolicy;

    fn deref(&self) -> &TabularPolicy {
        &self.0
    }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Draws `k` responses for `image_id`. All three log-probabilities of each
/// sample are set to its log-probability under `policy`; callers holding
/// distinct old or reference snapshots overwrite them with
/// [`annotate_log_probs`].
pub fn sample_group(policy: &TabularPolicy, image_id: &str, k: usize, seed: u64) -> Result<ResponseGroup> {
    let dims = policy.num_dimensions();
    let logp: Vec<Vec<f64>> = (0..dims)
        .map(|d| policy.log_probs(image_id, DimensionId::new(d)))
        .collect::<Result<_>>()?;
    let probs: Vec<Vec<f64>> = logp.iter().map(|r| r.iter().map(|l| l.exp()).collect()).collect();
    let grid = policy.grid().values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..k)
        .map(|_| {
            let mut scores = Vec::with_capacity(dims);
            let mut lp = 0.0;
            for d in 0..dims {
                let bin = draw(&probs[d], rng.random::<f64>());
                scores.push(grid[bin]);
                lp += logp[d][bin];
            }
            ScoreSample {
                scores,
                logprob_current: lp,
                logprob_old: lp,
                logprob_ref: lp,
            }
        })
        .collect();
    Ok(ResponseGroup::new(image_id, samples))
}

/// Fills `logprob_old` and `logprob_ref` from the given snapshots.
pub fn annotate_log_probs(group: &mut ResponseGroup, old: &PolicySnapshot, reference: &PolicySnapshot) -> Result<()> {
    for s in &mut group.samples {
        s.logprob_old = old.response_log_prob(&group.image_id, &s.scores)?;
        s.logprob_ref = reference.response_log_prob(&group.image_id, &s.scores)?;
    }
    Ok(())
}

/// `(r_k - mean) / (std + eps)` with the population standard deviation.
/// A constant group yields all-zero advantages.
pub fn compute_advantages(rewards: &[f64], eps_adv: f64) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; k]);
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k as f64;
    let denom = var.sqrt() + eps_adv;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Population standard deviation of a group's rewards.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `pi(r) / pi_old(r)` from the sample's recorded log-probabilities.
pub fn importance_ratio(sample: &ScoreSample) -> Result<f64> {
    for lp in [sample.logprob_current, sample.logprob_old] {
        if !lp.is_finite() {
            return Err(Error::NonFiniteLogProb(lp));
        }
    }
    Ok((sample.logprob_current - sample.logprob_old).exp())
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(rho: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (rho * advantage).min(clipped * advantage)
}

/// Exact `KL(p || q)` between two categoricals given as log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mean exact KL divergence over the `(image, dimension)` keys of `image_ids`.
pub fn kl_penalty<'a, I>(policy: &TabularPolicy, reference: &PolicySnapshot, image_ids: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    if policy.grid() != reference.grid() || policy.num_dimensions() != reference.num_dimensions() {
        return Err(Error::KeyMismatch("policy and reference differ in shape".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for id in image_ids {
        if reference.logits().get(id).is_none() {
            return Err(Error::KeyMismatch(format!("reference has no entry for `{id}`")));
        }
        for d in 0..policy.num_dimensions() {
            let dim = DimensionId::new(d);
            total += categorical_kl(&policy.log_probs(id, dim)?, &reference.log_probs(id, dim)?);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

/// A sampled group with its (constant) advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub group: ResponseGroup,
    pub advantages: Vec<f64>,
}

/// Gradient of the GRPO loss with respect to the logits of the batch images.
pub type PolicyGradient = BTreeMap<String, Vec<Vec<f64>>>;

struct ImageTerms {
    loss_pg: f64,
    kl: f64,
    grad: Vec<Vec<f64>>,
}

fn image_terms(
    policy: &TabularPolicy,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    scored: &ScoredGroup,
    cfg: &GrpoConfig,
    batch_size: usize,
) -> Result<ImageTerms> {
    let id = scored.group.image_id.as_str();
    let dims = policy.num_dimensions();
    let k = scored.group.len();
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if scored.advantages.len() != k {
        return Err(Error::LengthMismatch(scored.advantages.len(), k));
    }
    if old.logits().get(id).is_none() || reference.logits().get(id).is_none() {
        return Err(Error::KeyMismatch(format!("snapshot has no entry for `{id}`")));
    }
    let logp: Vec<Vec<f64>> = (0..dims)
        .map(|d| policy.log_probs(id, DimensionId::new(d)))
        .collect::<Result<_>>()?;
    let bins = policy.grid().len();
    let mut grad = vec![vec![0.0; bins]; dims];

    let pg_scale = 1.0 / (batch_size * k) as f64;
    let mut loss_pg = 0.0;
    for (sample, &adv) in scored.group.samples.iter().zip(&scored.advantages) {
        let chosen: Vec<usize> = sample
            .scores
            .iter()
            .map(|&s| policy.bin_of(s))
            .collect::<Result<_>>()?;
        if chosen.len() != dims {
            return Err(Error::KeyMismatch(format!("sample of `{id}` has {} scores", chosen.len())));
        }
        let lp_cur: f64 = chosen.iter().enumerate().map(|(d, &b)| logp[d][b]).sum();
        let lp_old = old.response_log_prob(id, &sample.scores)?;
        if !lp_old.is_finite() {
            return Err(Error::NonFiniteLogProb(lp_old));
        }
        let rho = (lp_cur - lp_old).exp();
        let term = clipped_term(rho, adv, cfg.eps_clip);
        loss_pg -= pg_scale * term;
        let clipped = rho.clamp(1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip);
        if rho * adv <= clipped * adv {
            // d(-rho A)/dz = -A rho (onehot - p)
            let coeff = -pg_scale * adv * rho;
            for d in 0..dims {
                for (c, g) in grad[d].iter_mut().enumerate() {
                    let indicator = if c == chosen[d] { 1.0 } else { 0.0 };
                    *g += coeff * (indicator - logp[d][c].exp());
                }
            }
        }
    }

    let kl_scale = cfg.beta / (batch_size * dims) as f64;
    let mut kl = 0.0;
    for d in 0..dims {
        let lq = reference.log_probs(id, DimensionId::new(d))?;
        let kl_d = categorical_kl(&logp[d], &lq);
        kl += kl_d;
        if kl_scale > 0.0 {
            for c in 0..bins {
                let p = logp[d][c].exp();
                grad[d][c] += kl_scale * p * (logp[d][c] - lq[c] - kl_d);
            }
        }
    }
    Ok(ImageTerms { loss_pg, kl, grad })
}

/// Loss value and gradient of the GRPO objective on a batch.
pub fn grpo_gradient(
    policy: &TabularPolicy,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyGradient)> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall(0));
    }
    let b = batch.len();
    let terms = batch
        .par_iter()
        .map(|g| image_terms(policy, old, reference, g, cfg, b))
        .collect::<Result<Vec<_>>>()?;
    let mut loss_pg = 0.0;
    let mut kl = 0.0;
    let mut grads = PolicyGradient::new();
    for (scored, t) in batch.iter().zip(terms) {
        loss_pg += t.loss_pg;
        kl += t.kl;
        match grads.get_mut(&scored.group.image_id) {
            Some(existing) => {
                for (row, add) in existing.iter_mut().zip(&t.grad) {
                    for (g, a) in row.iter_mut().zip(add) {
                        *g += a;
                    }
                }
            }
            None => {
                grads.insert(scored.group.image_id.clone(), t.grad);
            }
        }
    }
    let dims = policy.num_dimensions();
    let loss = loss_pg + cfg.beta * kl / (b * dims) as f64;
    Ok((loss, grads))
}

/// GRPO loss without the gradient.
pub fn grpo_loss(
    policy: &TabularPolicy,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    cfg: &GrpoConfig,
) -> Result<f64> {
    grpo_gradient(policy, old, reference, batch, cfg).map(|(loss, _)| loss)
}

/// One gradient-descent step on the GRPO loss. Returns the updated policy
/// and the loss evaluated before the step.
pub fn grpo_step(
    policy: &TabularPolicy,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &[ScoredGroup],
    cfg: &GrpoConfig,
) -> Result<(TabularPolicy, f64)> {
    let (loss, grads) = grpo_gradient(policy, old, reference, batch, cfg)?;
    let mut next = policy.clone();
    for (id, grad) in grads {
        let rows = next.image_logits_mut(&id)?;
        for (row, g) in rows.iter_mut().zip(&grad) {
            for (z, g) in row.iter_mut().zip(g) {
                *z -= cfg.learning_rate * g;
            }
        }
    }
    Ok((next, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_seventeen_bins() {
        let grid = ScoreGrid::default();
        assert_eq!(grid.len(), 17);
        assert_eq!(grid.values()[0], 1.0);
        assert_eq!(grid.values()[16], 5.0);
        assert_eq!(grid.index_of(3.0), Some(8));
        assert_eq!(grid.index_of(3.1), None);
    }

    #[test]
    fn defaults_match_stated_hyperparameters() {
        let cfg = GrpoConfig::default();
        assert_eq!((cfg.group_size, cfg.beta, cfg.eps_clip), (6, 0.04, 0.2));
    }

    #[test]
    fn one_hot_policy_samples_its_bin() {
        let grid = ScoreGrid::default();
        let mut row = vec![-1e9; 17];
        row[8] = 0.0;
        let logits = [("img".to_string(), vec![row])].into();
        let policy = TabularPolicy::from_logits(grid, logits).unwrap();
        let group = sample_group(&policy, "img", 6, 1).unwrap();
        for s in &group.samples {
            assert_eq!(s.scores, vec![3.0]);
            assert_eq!(s.logprob_current, 0.0);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_checks_image() {
        let policy = TabularPolicy::jittered(["a"], 3, ScoreGrid::default(), 0.5, 3).unwrap();
        assert_eq!(sample_group(&policy, "a", 6, 9).unwrap(), sample_group(&policy, "a", 6, 9).unwrap());
        assert!(matches!(sample_group(&policy, "zz", 6, 9), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[0.5; 6], 1e-8).unwrap(), vec![0.0; 6]);
        let a = compute_advantages(&[0.2, 0.4, 0.6], 1e-8).unwrap();
        let expected = 1.224_744_871_391_589;
        assert!((a[0] + expected).abs() < 1e-6);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - expected).abs() < 1e-6);
        assert!(matches!(compute_advantages(&[0.3], 1e-8), Err(Error::GroupTooSmall(1))));
    }

    #[test]
    fn ratio_examples() {
        let mut s = ScoreSample::from_scores(vec![3.0]);
        s.logprob_current = -1.3;
        s.logprob_old = -1.3;
        assert_eq!(importance_ratio(&s).unwrap(), 1.0);
        s.logprob_current = s.logprob_old + 2f64.ln();
        assert!((importance_ratio(&s).unwrap() - 2.0).abs() < 1e-15);
        s.logprob_old = f64::NEG_INFINITY;
        assert!(matches!(importance_ratio(&s), Err(Error::NonFiniteLogProb(_))));
    }

    #[test]
    fn clip_branches() {
        assert_eq!(clipped_term(1.0, 1.0, 0.2), 1.0);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        // rho*A = -0.5, clip(0.5)*A = -0.8: the pessimistic branch is the clipped one
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        // upper clip does not bind for negative advantages
        assert!((clipped_term(1.5, -1.0, 0.2) + 1.5).abs() < 1e-15);
        // lower clip does not bind for positive advantages
        assert!((clipped_term(0.5, 1.0, 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_of_explicit_categoricals() {
        let p = [0.5f64, 0.3, 0.2];
        let q = [1.0f64 / 3.0; 3];
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let expected = 0.5 * (1.5f64).ln() + 0.3 * (0.9f64).ln() + 0.2 * (0.6f64).ln();
        assert!((categorical_kl(&lp, &lq) - expected).abs() < 1e-15);
        assert_eq!(categorical_kl(&lp, &lp), 0.0);
    }

    #[test]
    fn kl_penalty_is_zero_against_self_and_checks_keys() {
        let policy = TabularPolicy::jittered(["a", "b"], 2, ScoreGrid::default(), 1.0, 5).unwrap();
        assert_eq!(kl_penalty(&policy, &policy.snapshot(), ["a", "b"]).unwrap(), 0.0);
        let other = TabularPolicy::uniform(["a"], 2, ScoreGrid::default());
        assert!(kl_penalty(&policy, &other.snapshot(), ["a"]).unwrap() > 0.0);
        assert!(matches!(
            kl_penalty(&policy, &other.snapshot(), ["b"]),
            Err(Error::KeyMismatch(_))
        ));
    }

    #[test]
    fn zero_advantages_without_kl_leave_policy_unchanged() {
        let policy = TabularPolicy::jittered(["a", "b"], 2, ScoreGrid::default(), 0.3, 1).unwrap();
        let batch: Vec<ScoredGroup> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| ScoredGroup {
                group: sample_group(&policy, id, 4, i as u64).unwrap(),
                advantages: vec![0.0; 4],
            })
            .collect();
        let cfg = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        let snap = policy.snapshot();
        let (next, loss) = grpo_step(&policy, &snap, &snap, &batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(next, policy);
    }
}
