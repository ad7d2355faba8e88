//! Multi-granularity ranking rewards for quality-assessment policies.
//!
//! Pairwise Thurstone comparison probabilities turn sampled scores into
//! fidelity rewards per quality dimension; a softmax-weighted composite of
//! those rewards, optionally gated per domain, drives group-relative policy
//! optimization of a tabular score policy. Around that sit a synthetic
//! multi-domain corpus generator, SRCC/PLCC evaluation, and a parser for
//! attribute-structured model responses.

pub mod dataset;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod responsefmt;
pub mod reward;
pub mod simlab;
pub mod thurstone;
pub mod types;

pub use dataset::{load_dataset, save_dataset, DataFormat};
pub use error::{Error, Result};
pub use grpo::{GrpoConfig, PolicySnapshot, ScoreGrid, ScoredGroup, TabularPolicy};
pub use metrics::{plcc, srcc, EvalReport};
pub use responsefmt::{parse_response, render_prompt, serialize_response, ParseError, ParsedResponse};
pub use reward::{DomainWeightParams, RewardConfig, WeightMode, WeightParams};
pub use simlab::{Checkpoint, SyntheticSpec, TrainConfig, TrainReport, Trainer};
pub use thurstone::{ComparisonConfig, GroundTruthMode};
pub use types::{
    group_stats, Attribute, AttributeSchema, Dataset, DimensionId, ImageRecord, ResponseGroup, ScoreSample,
};
