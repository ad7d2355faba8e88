//! Synthetic multi-domain corpora, the reinforcement training loop over a
//! tabular policy, and two analysis experiments: composite-reward variance
//! and cross-domain transfer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{
    compute_advantages, grpo_step, kl_penalty, population_std, sample_group, GrpoConfig, ScoreGrid, ScoredGroup,
    TabularPolicy,
};
use crate::metrics::{plcc, srcc, EvalReport, EvalRow, GapEntry};
use crate::reward::{
    batch_rewards, softmax_weights, update_weights, DomainWeightParams, RewardConfig, RewardHistoryEntry,
    WeightMode, WeightParams,
};
use crate::types::{Attribute, AttributeSchema, Dataset, DimensionId, ImageRecord, MAX_SCORE, MIN_SCORE};

fn clip_score(v: f64) -> f64 {
    v.clamp(MIN_SCORE, MAX_SCORE)
}

/// Affine relabeling `a * mos + b` of one domain's reported scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub domain_id: String,
    pub scale: f64,
    pub shift: f64,
}

impl DomainTransform {
    pub fn new(domain_id: impl Into<String>, scale: f64, shift: f64) -> Self {
        DomainTransform {
            domain_id: domain_id.into(),
            scale,
            shift,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.scale * v + self.shift
    }

    /// Whether `[1, 5]` maps into itself.
    pub fn is_in_range(&self) -> bool {
        let (lo, hi) = (self.apply(MIN_SCORE), self.apply(MAX_SCORE));
        lo >= MIN_SCORE && hi <= MAX_SCORE
    }
}

/// `n` domains named `domain_0..`, the first one untransformed and the rest
/// distinct in-range relabelings.
pub fn default_domain_transforms(n: usize) -> Vec<DomainTransform> {
    const CYCLE: [(f64, f64); 4] = [(0.5, 1.0), (0.75, 1.0), (0.5, 2.0), (0.75, 0.5)];
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 { (1.0, 0.0) } else { CYCLE[(i - 1) % CYCLE.len()] };
            DomainTransform::new(format!("domain_{i}"), a, b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Contribution of each attribute's latent quality to the overall one.
    pub mixing_weights: Vec<f64>,
    pub noise_sigma: f64,
    pub domains: Vec<DomainTransform>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 64,
            mixing_weights: vec![0.25; 4],
            noise_sigma: 0.1,
            domains: default_domain_transforms(2),
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn num_attributes(&self) -> usize {
        self.mixing_weights.len()
    }

    /// The default four-attribute schema when `A = 4`, else `attr_1..attr_A`.
    pub fn schema(&self) -> Result<AttributeSchema> {
        let a = self.num_attributes();
        if a == 4 {
            return Ok(AttributeSchema::default());
        }
        AttributeSchema::new((1..=a).map(|i| Attribute::named(&format!("attr_{i}"))).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_images == 0 {
            return bad("num_images must be positive".into());
        }
        if self.mixing_weights.is_empty() {
            return bad("mixing_weights is empty".into());
        }
        if self.mixing_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("mixing_weights must be finite and non-negative".into());
        }
        let total: f64 = self.mixing_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixing_weights sum to {total}, not 1"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !(d.scale.is_finite() && d.scale > 0.0 && d.shift.is_finite()) {
                return bad(format!("domain `{}` needs a finite scale > 0", d.domain_id));
            }
            if !seen.insert(d.domain_id.as_str()) {
                return bad(format!("duplicate domain `{}`", d.domain_id));
            }
        }
        Ok(())
    }
}

/// Draws a corpus. Attribute latents are uniform on `[1, 5]`; the overall
/// latent mixes them plus Gaussian noise. Images are assigned to domains
/// round-robin and each reports its domain's relabeling of the overall
/// latent. Latents are kept as the record's features.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = spec.schema()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.num_images.to_string().len().max(3);
    let mut records = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let attrs: Vec<f64> = (0..spec.num_attributes())
            .map(|_| rng.random_range(MIN_SCORE..=MAX_SCORE))
            .collect();
        let mixed: f64 = attrs.iter().zip(&spec.mixing_weights).map(|(q, w)| q * w).sum();
        let latent = clip_score(mixed + noise.sample(&mut rng));
        let domain = &spec.domains[i % spec.domains.len()];
        let mos = clip_score(domain.apply(latent));
        let mut features = Vec::with_capacity(attrs.len() + 1);
        features.push(latent);
        features.extend(&attrs);
        let record = ImageRecord::new(
            format!("img_{i:0width$}"),
            domain.domain_id.clone(),
            mos,
            attrs.into_iter().map(Some).collect(),
        )?;
        records.push(record.with_features(features));
    }
    Dataset::new(schema, records)
}

/// Relabels every ground-truth score (overall and attributes) of the named
/// domains. Transforms must map `[1, 5]` into itself.
pub fn relabel_domains(dataset: &Dataset, transforms: &[DomainTransform]) -> Result<Dataset> {
    for t in transforms {
        if !t.is_in_range() {
            return Err(Error::InvalidSpec(format!(
                "transform of `{}` leaves the score range",
                t.domain_id
            )));
        }
        if !dataset.domains().contains(&t.domain_id) {
            return Err(Error::UnknownDomain(t.domain_id.clone()));
        }
    }
    let records = dataset
        .records()
        .iter()
        .map(|r| {
            let Some(t) = transforms.iter().find(|t| t.domain_id == r.domain_id) else {
                return Ok(r.clone());
            };
            let attrs = r.attr_mos.iter().map(|v| v.map(|v| t.apply(v))).collect();
            let relabeled = ImageRecord::new(r.image_id.clone(), r.domain_id.clone(), t.apply(r.mos), attrs)?;
            Ok(ImageRecord {
                features: r.features.clone(),
                ..relabeled
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.schema().clone(), records)
}

/// Everything that determines a training run apart from its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub batch_size: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Standard deviation of the initial logits around uniform.
    pub init_std: f64,
    pub grid: ScoreGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            batch_size: 8,
            log_every: 10,
            seed: 42,
            init_std: 0.01,
            grid: ScoreGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.reward.validate()?;
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// Number of completed steps.
    pub step: usize,
    /// Mean composite reward of the step's batch.
    pub mean_reward: f64,
    /// Mean within-group standard deviation of the composite reward.
    pub group_std: f64,
    pub kl: f64,
    /// `None` when the policy's mean scores are all equal.
    pub srcc_overall: Option<f64>,
    pub srcc_attributes: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Overall SRCC of the initial policy.
    pub initial_srcc: Option<f64>,
    pub rows: Vec<TrainLogRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl TrainReport {
    pub fn final_srcc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.srcc_overall)
    }

    /// CSV with columns `step,mean_reward,group_std,kl,srcc_overall,srcc_<key>...`.
    pub fn write_csv<W: Write>(&self, schema: &AttributeSchema, out: &mut W) -> std::io::Result<()> {
        write!(out, "step,mean_reward,group_std,kl,srcc_overall")?;
        for dim in schema.dimensions().skip(1) {
            write!(out, ",srcc_{}", schema.key(dim))?;
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.mean_reward,
                r.group_std,
                r.kl,
                opt_cell(r.srcc_overall)
            )?;
            for v in &r.srcc_attributes {
                write!(out, ",{}", opt_cell(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// SRCC between the policy's mean score and the true quality of every image
/// that has one. `None` if either side is constant.
pub fn policy_srcc(policy: &TabularPolicy, dataset: &Dataset, dim: DimensionId) -> Result<Option<f64>> {
    let (pred, truth) = policy_predictions(policy, dataset.records().iter(), dim)?;
    match srcc(&pred, &truth) {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn policy_predictions<'a>(
    policy: &TabularPolicy,
    records: impl Iterator<Item = &'a ImageRecord>,
    dim: DimensionId,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for r in records {
        if let Some(q) = r.true_quality(dim) {
            pred.push(policy.mean_score(&r.image_id, dim)?);
            truth.push(q);
        }
    }
    Ok((pred, truth))
}

/// Domain-homogeneous batches of record indices, shuffled per epoch.
struct Schedule {
    /// Record indices of each domain, in dataset order.
    domains: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
    batches_per_epoch: usize,
    cached: Option<(usize, Vec<Vec<usize>>)>,
}

impl Schedule {
    fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let domains: Vec<Vec<usize>> = dataset
            .domains()
            .iter()
            .map(|d| {
                dataset
                    .records()
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| &r.domain_id == d)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        // a trailing chunk of one image cannot be ranked and is dropped
        let batches_per_epoch = domains
            .iter()
            .map(|d| d.len() / batch_size + usize::from(d.len() % batch_size >= 2))
            .sum();
        if batches_per_epoch == 0 {
            return Err(Error::Config("no domain has enough images for a batch".into()));
        }
        Ok(Schedule {
            domains,
            batch_size,
            seed,
            batches_per_epoch,
            cached: None,
        })
    }

    fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut batches = Vec::with_capacity(self.batches_per_epoch);
        for members in &self.domains {
            let mut order = members.clone();
            order.shuffle(&mut rng);
            batches.extend(order.chunks(self.batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches
    }

    fn batch(&mut self, step: usize) -> Vec<usize> {
        let (epoch, idx) = (step / self.batches_per_epoch, step % self.batches_per_epoch);
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.cached = Some((epoch, self.epoch(epoch)));
        }
        self.cached.as_ref().expect("cached epoch").1[idx].clone()
    }
}

/// Mutable state of a training run: everything a checkpoint must hold.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub policy: TabularPolicy,
    pub reference: TabularPolicy,
    pub weights: WeightParams,
    pub domain_weights: DomainWeightParams,
    /// Word position of the sampling generator.
    pub rng_word_pos: u128,
    /// Recent per-batch rewards feeding the adaptive weight update.
    pub history: Vec<RewardHistoryEntry>,
    pub report: TrainReport,
}

/// A training run in progress over a fixed dataset and configuration.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    schedule: Schedule,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Fresh run: jittered near-uniform policy, which also serves as the
    /// reference policy; uniform dimension weights; zero domain logits.
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let a = dataset.schema().arity();
        let policy = TabularPolicy::jittered(
            dataset.image_ids(),
            a + 1,
            cfg.grid.clone(),
            cfg.init_std,
            cfg.seed,
        )?;
        let report = TrainReport {
            initial_srcc: policy_srcc(&policy, dataset, DimensionId::OVERALL)?,
            rows: Vec::new(),
        };
        let state = TrainState {
            step: 0,
            reference: policy.clone(),
            policy,
            weights: WeightParams::uniform(a),
            domain_weights: DomainWeightParams::zeros(dataset.domains().iter(), a),
            rng_word_pos: 0,
            history: Vec::new(),
            report,
        };
        Self::resume(dataset, cfg, state)
    }

    /// Continues from a saved state.
    pub fn resume(dataset: &'a Dataset, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let dims = dataset.schema().num_dimensions();
        if state.policy.num_dimensions() != dims || state.weights.num_dimensions() != dims {
            return Err(Error::Config(format!(
                "state has {} dimensions, dataset has {dims}",
                state.policy.num_dimensions()
            )));
        }
        if !state.policy.image_ids().eq(dataset_ids_sorted(dataset).iter().map(String::as_str)) {
            return Err(Error::KeyMismatch("policy images differ from the dataset".into()));
        }
        let schedule = Schedule::new(dataset, cfg.batch_size, cfg.seed)?;
        Ok(Trainer {
            dataset,
            cfg,
            schedule,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// One iteration: sample a group per image, score it, normalize the
    /// rewards into advantages, and take a policy step. Returns the batch's
    /// mean composite reward.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let batch = self.schedule.batch(st.step);
        let old = st.policy.snapshot();
        let reference = st.reference.snapshot();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(st.rng_word_pos);
        let records: Vec<&ImageRecord> = batch.iter().map(|&i| &self.dataset.records()[i]).collect();
        let groups = records
            .iter()
            .map(|r| sample_group(&old, &r.image_id, cfg.grpo.group_size, rng.next_u64()))
            .collect::<Result<Vec<_>>>()?;
        st.rng_word_pos = rng.get_word_pos();

        let pairs: Vec<_> = records.iter().copied().zip(&groups).collect();
        let rewards = batch_rewards(&pairs, &cfg.reward, &st.weights, &st.domain_weights)?;
        let mut group_std = 0.0;
        let scored = groups
            .into_iter()
            .zip(&rewards.groups)
            .map(|(group, gr)| {
                let composites = gr.composites();
                group_std += population_std(&composites);
                Ok(ScoredGroup {
                    group,
                    advantages: compute_advantages(&composites, cfg.grpo.eps_adv)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        group_std /= scored.len() as f64;

        let (next, _) = grpo_step(&st.policy, &old, &reference, &scored, &cfg.grpo)?;
        st.policy = next;

        if cfg.reward.weight_mode == WeightMode::Eg {
            st.history.extend(rewards.history_entries());
            let excess = st.history.len().saturating_sub(cfg.reward.eg_window);
            st.history.drain(..excess);
            let (w, dw) = update_weights(&st.weights, &st.domain_weights, &st.history, &cfg.reward)?;
            st.weights = w;
            st.domain_weights = dw;
        }

        st.step += 1;
        let mean_reward = rewards.mean_composite();
        if st.step.is_multiple_of(cfg.log_every) {
            let row = self.log_row(mean_reward, group_std)?;
            self.state.report.rows.push(row);
        }
        Ok(mean_reward)
    }

    fn log_row(&self, mean_reward: f64, group_std: f64) -> Result<TrainLogRow> {
        let st = &self.state;
        let reference = st.reference.snapshot();
        let kl = kl_penalty(&st.policy, &reference, st.policy.image_ids())?;
        let srcc_attributes = self
            .dataset
            .schema()
            .dimensions()
            .skip(1)
            .map(|d| policy_srcc(&st.policy, self.dataset, d))
            .collect::<Result<_>>()?;
        Ok(TrainLogRow {
            step: st.step,
            mean_reward,
            group_std,
            kl,
            srcc_overall: policy_srcc(&st.policy, self.dataset, DimensionId::OVERALL)?,
            srcc_attributes,
        })
    }

    /// Steps until `total_steps` have been completed.
    pub fn run_until(&mut self, total_steps: usize) -> Result<()> {
        while self.state.step < total_steps {
            self.step()?;
        }
        Ok(())
    }
}

fn dataset_ids_sorted(dataset: &Dataset) -> Vec<String> {
    let mut ids: Vec<String> = dataset.image_ids().map(str::to_string).collect();
    ids.sort();
    ids
}

/// Trains from scratch for `steps` iterations.
pub fn run_training(dataset: &Dataset, cfg: &TrainConfig, steps: usize) -> Result<(TabularPolicy, TrainReport)> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    trainer.run_until(steps)?;
    let state = trainer.into_state();
    Ok((state.policy, state.report))
}

/// Generator seed and stream position; the position is a decimal string
/// since it does not fit a JSON number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

/// On-disk training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub grid: ScoreGrid,
    pub logits: BTreeMap<String, Vec<Vec<f64>>>,
    pub ref_logits: BTreeMap<String, Vec<Vec<f64>>>,
    pub weight_params: WeightParams,
    pub domain_params: DomainWeightParams,
    pub rng_state: RngState,
    pub config_echo: TrainConfig,
    pub reward_history: Vec<RewardHistoryEntry>,
    pub report: TrainReport,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            step: state.step,
            grid: state.policy.grid().clone(),
            logits: state.policy.logits().clone(),
            ref_logits: state.reference.logits().clone(),
            weight_params: state.weights.clone(),
            domain_params: state.domain_weights.clone(),
            rng_state: RngState {
                seed: config.seed,
                word_pos: state.rng_word_pos.to_string(),
            },
            config_echo: config.clone(),
            reward_history: state.history.clone(),
            report: state.report.clone(),
        }
    }

    /// Splits into the run configuration and the state to resume from.
    pub fn into_parts(self) -> Result<(TrainConfig, TrainState)> {
        if self.grid != self.config_echo.grid || self.rng_state.seed != self.config_echo.seed {
            return Err(Error::Config("checkpoint grid or seed disagrees with its config".into()));
        }
        let rng_word_pos = self
            .rng_state
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position `{}`", self.rng_state.word_pos)))?;
        let state = TrainState {
            step: self.step,
            policy: TabularPolicy::from_logits(self.grid.clone(), self.logits)?,
            reference: TabularPolicy::from_logits(self.grid, self.ref_logits)?,
            weights: self.weight_params,
            domain_weights: self.domain_params,
            rng_word_pos,
            history: self.reward_history,
            report: self.report,
        };
        Ok((self.config_echo, state))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    pub trials: usize,
    /// Variance of each dimension's reward noise.
    pub noise_var: f64,
    /// Shared latent around which all dimension rewards are drawn.
    pub latent: f64,
    pub seed: u64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            trials: 100_000,
            noise_var: 0.01,
            latent: 0.5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub trials: usize,
    pub weights: Vec<f64>,
    pub var_single: f64,
    pub var_composite: f64,
    /// `var_single - var_composite`.
    pub margin: f64,
    /// Monte-Carlo standard error of `margin`.
    pub margin_se: f64,
    /// `v * (1 - sum w^2)` for i.i.d. rewards of variance `v`.
    pub predicted_margin: f64,
    /// `sum_a w_a^2 Var[delta_a]`, the attribute-noise term of the bound.
    pub attribute_noise_term: f64,
}

impl Prop1Report {
    /// Composite variance does not exceed the single-reward variance beyond
    /// three standard errors.
    pub fn inequality_holds(&self) -> bool {
        self.var_composite <= self.var_single + 3.0 * self.margin_se
    }

    /// Empirical margin within three standard errors of the prediction.
    pub fn matches_prediction(&self) -> bool {
        (self.margin - self.predicted_margin).abs() <= 3.0 * self.margin_se
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Monte-Carlo comparison of the variance of the overall-only reward with
/// that of the weighted composite, for per-dimension rewards drawn
/// independently around one latent quality.
pub fn prop1_experiment(cfg: &Prop1Config, weights: &WeightParams) -> Result<Prop1Report> {
    if cfg.trials < 1000 {
        return Err(Error::Config(format!("prop1 needs at least 1000 trials, got {}", cfg.trials)));
    }
    if !(cfg.noise_var.is_finite() && cfg.noise_var >= 0.0 && cfg.latent.is_finite()) {
        return Err(Error::Config("noise_var must be >= 0 and latent finite".into()));
    }
    let w = softmax_weights(weights);
    let normal = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut single = Vec::with_capacity(cfg.trials);
    let mut composite = Vec::with_capacity(cfg.trials);
    let mut draws = vec![0.0; w.len()];
    for _ in 0..cfg.trials {
        for r in draws.iter_mut() {
            *r = cfg.latent + normal.sample(&mut rng);
        }
        single.push(draws[0]);
        composite.push(w.iter().zip(&draws).map(|(w, r)| w * r).sum());
    }
    let var_single = sample_variance(&single);
    let var_composite = sample_variance(&composite);

    let n = cfg.trials as f64;
    let ms = single.iter().sum::<f64>() / n;
    let mc = composite.iter().sum::<f64>() / n;
    let diffs: Vec<f64> = single
        .iter()
        .zip(&composite)
        .map(|(s, c)| (s - ms).powi(2) - (c - mc).powi(2))
        .collect();
    let margin_se = (sample_variance(&diffs) / n).sqrt();

    let sum_sq: f64 = w.iter().map(|w| w * w).sum();
    Ok(Prop1Report {
        trials: cfg.trials,
        var_single,
        var_composite,
        margin: var_single - var_composite,
        margin_se,
        predicted_margin: cfg.noise_var * (1.0 - sum_sq),
        attribute_noise_term: w[1..].iter().map(|w| w * w * cfg.noise_var).sum(),
        weights: w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub steps: usize,
    /// One row per `(train set, eval domain)`; `domain` is `<train>-><eval>`.
    pub rows: Vec<CrossDomainRow>,
    /// In-domain SRCC of the eval domain's own model minus the train set's SRCC.
    pub gaps: Vec<GapEntry>,
    /// Mean gap of the single-domain models on the domains they were not trained on.
    pub single_gap: f64,
    /// Mean gap of the jointly trained model over all domains.
    pub joint_gap: f64,
    /// `1 - joint_gap / single_gap`.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub train_set: String,
    pub eval_domain: String,
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
}

impl CrossDomainReport {
    /// The rows as an [`EvalReport`] whose domain column names the pair.
    pub fn eval_report(&self) -> EvalReport {
        EvalReport {
            rows: self
                .rows
                .iter()
                .map(|r| EvalRow {
                    domain: format!("{}->{}", r.train_set, r.eval_domain),
                    dimension: "overall".into(),
                    n: r.n,
                    srcc: r.srcc,
                    plcc: r.plcc,
                })
                .collect(),
            gaps: self.gaps.clone(),
        }
    }
}

pub const JOINT_TRAIN_SET: &str = "joint";

fn domain_subset(dataset: &Dataset, domain: &str) -> Result<Dataset> {
    let records = dataset.domain_records(domain).cloned().collect();
    Dataset::new(dataset.schema().clone(), records)
}

/// Trains one model per domain and one on all domains jointly, then scores
/// every model's overall predictions on every domain against the true
/// quality. Images the model never saw keep their initial scores.
pub fn cross_domain_experiment(dataset: &Dataset, cfg: &TrainConfig, steps: usize) -> Result<CrossDomainReport> {
    let domains: Vec<String> = dataset.domains().iter().cloned().collect();
    if domains.len() < 2 {
        return Err(Error::Config(format!("need at least 2 domains, got {}", domains.len())));
    }
    let mut train_sets: Vec<(String, Dataset)> = domains
        .iter()
        .map(|d| Ok((d.clone(), domain_subset(dataset, d)?)))
        .collect::<Result<_>>()?;
    train_sets.push((JOINT_TRAIN_SET.to_string(), dataset.clone()));

    let eval_policy_base = TabularPolicy::jittered(
        dataset.image_ids(),
        dataset.schema().num_dimensions(),
        cfg.grid.clone(),
        cfg.init_std,
        cfg.seed,
    )?;

    let mut rows = Vec::new();
    for (name, train) in &train_sets {
        let (trained, _) = run_training(train, cfg, steps)?;
        // unseen images fall back to an untrained initialization
        let mut logits = eval_policy_base.logits().clone();
        for (id, l) in trained.logits() {
            logits.insert(id.clone(), l.clone());
        }
        let policy = TabularPolicy::from_logits(cfg.grid.clone(), logits)?;
        for d in &domains {
            let (pred, truth) = policy_predictions(&policy, dataset.domain_records(d), DimensionId::OVERALL)?;
            rows.push(CrossDomainRow {
                train_set: name.clone(),
                eval_domain: d.clone(),
                n: pred.len(),
                srcc: srcc(&pred, &truth)?,
                plcc: plcc(&pred, &truth)?,
            });
        }
    }

    let in_domain: BTreeMap<&str, f64> = rows
        .iter()
        .filter(|r| r.train_set == r.eval_domain)
        .map(|r| (r.eval_domain.as_str(), r.srcc))
        .collect();
    let gaps: Vec<GapEntry> = rows
        .iter()
        .map(|r| GapEntry {
            train_set: r.train_set.clone(),
            eval_domain: r.eval_domain.clone(),
            gap: in_domain[r.eval_domain.as_str()] - r.srcc,
        })
        .collect();
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let single_gap = mean(
        gaps.iter()
            .filter(|g| g.train_set != JOINT_TRAIN_SET && g.train_set != g.eval_domain)
            .map(|g| g.gap)
            .collect(),
    );
    let joint_gap = mean(
        gaps.iter()
            .filter(|g| g.train_set == JOINT_TRAIN_SET)
            .map(|g| g.gap)
            .collect(),
    );
    Ok(CrossDomainReport {
        steps,
        rows,
        gaps,
        single_gap,
        joint_gap,
        reduction: 1.0 - joint_gap / single_gap,
    })
}
