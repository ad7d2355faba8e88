//! Domain types shared by all modules: dimension indexing, the attribute
//! schema, image records, datasets and groups of sampled responses.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

pub(crate) fn check_score(field: &str, value: f64) -> Result<f64> {
    if value.is_finite() && (MIN_SCORE..=MAX_SCORE).contains(&value) {
        Ok(value)
    } else {
        Err(Error::OutOfRangeScore {
            field: field.to_string(),
            value,
        })
    }
}

/// Index of a quality dimension. `0` is the overall score, `1..=A` are the
/// quality attributes of the active [`AttributeSchema`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DimensionId(usize);

impl DimensionId {
    pub const OVERALL: DimensionId = DimensionId(0);

    pub const fn new(index: usize) -> Self {
        DimensionId(index)
    }

    /// Dimension of the 1-based attribute `a`.
    pub const fn attribute(a: usize) -> Self {
        DimensionId(a)
    }

    pub const fn index(self) -> usize {
        self.0
    }

    pub const fn is_overall(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for DimensionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_overall() {
            f.write_str("overall")
        } else {
            write!(f, "attr_{}", self.0)
        }
    }
}

/// One quality attribute.
///
/// `key` names the attribute in data files, `label` is the token used on the
/// score line of a response, `title` and `description` appear in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    pub label: String,
    pub title: String,
    pub description: String,
}

impl Attribute {
    pub fn new(
        key: impl Into<String>,
        label: impl Into<String>,
        title: impl Into<String>,
        description: impl Into<String>,
    ) -> Self {
        Attribute {
            key: key.into(),
            label: label.into(),
            title: title.into(),
            description: description.into(),
        }
    }

    /// Attribute whose key, label and title all derive from `name`.
    pub fn named(name: &str) -> Self {
        let name = name.trim();
        Attribute::new(
            name.to_lowercase().replace(' ', "_"),
            name,
            name,
            format!("Assess {}.", name.to_lowercase()),
        )
    }
}

/// Ordered attribute list shared by every record of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::EmptyAttributeList);
        }
        let mut seen = HashSet::new();
        seen.insert("overall".to_string());
        for attr in &attributes {
            if attr.key.trim().is_empty() || attr.label.trim().is_empty() {
                return Err(Error::Config("attribute names must be non-empty".into()));
            }
            let mut names: Vec<String> = [&attr.key, &attr.label, &attr.title]
                .iter()
                .map(|s| s.trim().to_lowercase())
                .collect();
            names.sort();
            names.dedup();
            for name in names {
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("attribute name `{name}` is not unique")));
                }
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|n| Attribute::named(n.as_ref())).collect())
    }

    /// Number of attributes `A`.
    pub fn arity(&self) -> usize {
        self.attributes.len()
    }

    /// Number of dimensions including overall, `A + 1`.
    pub fn num_dimensions(&self) -> usize {
        self.attributes.len() + 1
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// The 1-based attribute behind `dim`, `None` for overall.
    pub fn attribute(&self, dim: DimensionId) -> Option<&Attribute> {
        dim.index().checked_sub(1).and_then(|i| self.attributes.get(i))
    }

    pub fn dimensions(&self) -> impl Iterator<Item = DimensionId> {
        (0..self.num_dimensions()).map(DimensionId::new)
    }

    /// Data-file key of a dimension (`overall` for index 0).
    pub fn key(&self, dim: DimensionId) -> &str {
        self.attribute(dim).map_or("overall", |a| a.key.as_str())
    }

    /// Score-line label of a dimension (`Overall` for index 0).
    pub fn label(&self, dim: DimensionId) -> &str {
        self.attribute(dim).map_or("Overall", |a| a.label.as_str())
    }

    /// Case-insensitive lookup by key, label or title.
    pub fn lookup(&self, name: &str) -> Option<DimensionId> {
        let name = name.trim();
        if name.eq_ignore_ascii_case("overall") {
            return Some(DimensionId::OVERALL);
        }
        self.attributes.iter().position(|a| {
            a.key.eq_ignore_ascii_case(name)
                || a.label.eq_ignore_ascii_case(name)
                || a.title.eq_ignore_ascii_case(name)
        })
        .map(|i| DimensionId::attribute(i + 1))
    }

    pub fn contains(&self, dim: DimensionId) -> bool {
        dim.index() < self.num_dimensions()
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        AttributeSchema {
            attributes: vec![
                Attribute::new(
                    "sharpness",
                    "Sharpness",
                    "Sharpness",
                    "Assess clarity, edge definition, and detail.",
                ),
                Attribute::new(
                    "color",
                    "Color",
                    "Color Fidelity",
                    "Evaluate color accuracy and naturalness.",
                ),
                Attribute::new(
                    "noise",
                    "Noise",
                    "Noise Level",
                    "Identify noise, artifacts, or compression.",
                ),
                Attribute::new(
                    "composition",
                    "Composition",
                    "Composition",
                    "Judge aesthetic arrangement and balance.",
                ),
            ],
        }
    }
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(value: Vec<Attribute>) -> Result<Self> {
        AttributeSchema::new(value)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(value: AttributeSchema) -> Self {
        value.attributes
    }
}

/// One image: identity, domain label and ground-truth opinion scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub domain_id: String,
    /// Ground-truth overall MOS on `[1, 5]`.
    pub mos: f64,
    /// Per-attribute MOS, indexed by `attribute - 1`. Length is `A`.
    pub attr_mos: Vec<Option<f64>>,
    /// Synthetic latent qualities (overall first, then attributes).
    pub features: Option<Vec<f64>>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        domain_id: impl Into<String>,
        mos: f64,
        attr_mos: Vec<Option<f64>>,
    ) -> Result<Self> {
        check_score("mos", mos)?;
        for (i, v) in attr_mos.iter().enumerate() {
            if let Some(v) = v {
                check_score(&format!("attr_{}", i + 1), *v)?;
            }
        }
        Ok(ImageRecord {
            image_id: image_id.into(),
            domain_id: domain_id.into(),
            mos,
            attr_mos,
            features: None,
        })
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }

    /// Ground-truth score for `dim`, if the record carries one.
    pub fn ground_truth(&self, dim: DimensionId) -> Option<f64> {
        match dim.index() {
            0 => Some(self.mos),
            a => self.attr_mos.get(a - 1).copied().flatten(),
        }
    }

    /// Latent quality for `dim` when present, otherwise the ground truth.
    pub fn true_quality(&self, dim: DimensionId) -> Option<f64> {
        self.features
            .as_ref()
            .and_then(|f| f.get(dim.index()).copied())
            .or_else(|| self.ground_truth(dim))
    }
}

/// A validated collection of image records sharing one attribute schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: AttributeSchema,
    records: Vec<ImageRecord>,
    domains: BTreeSet<String>,
}

impl Dataset {
    pub fn new(schema: AttributeSchema, records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.attr_mos.len() != schema.arity() {
                return Err(Error::Config(format!(
                    "record `{}` has {} attributes, schema has {}",
                    r.image_id,
                    r.attr_mos.len(),
                    schema.arity()
                )));
            }
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateImageId(r.image_id.clone()));
            }
        }
        let domains = records.iter().map(|r| r.domain_id.clone()).collect();
        Ok(Dataset {
            schema,
            records,
            domains,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.image_id.as_str())
    }

    /// Records of one domain, in dataset order.
    pub fn domain_records<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a ImageRecord> {
        self.records.iter().filter(move |r| r.domain_id == domain)
    }
}

/// One sampled response: a score per dimension plus its log-probability
/// under the current, old and reference policies.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    /// Scores indexed by dimension (`scores[0]` is overall).
    pub scores: Vec<f64>,
    pub logprob_current: f64,
    pub logprob_old: f64,
    pub logprob_ref: f64,
}

impl ScoreSample {
    /// Sample with all three log-probabilities set to zero.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        ScoreSample {
            scores,
            logprob_current: 0.0,
            logprob_old: 0.0,
            logprob_ref: 0.0,
        }
    }

    pub fn score(&self, dim: DimensionId) -> f64 {
        self.scores[dim.index()]
    }
}

/// The `K` responses sampled for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGroup {
    pub image_id: String,
    pub samples: Vec<ScoreSample>,
}

impl ResponseGroup {
    pub fn new(image_id: impl Into<String>, samples: Vec<ScoreSample>) -> Self {
        ResponseGroup {
            image_id: image_id.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_dimensions(&self) -> usize {
        self.samples.first().map_or(0, |s| s.scores.len())
    }

    pub fn scores(&self, dim: DimensionId) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| s.score(dim))
    }
}

/// Sample mean and unbiased (`K - 1`) variance of the group's scores on `dim`.
pub fn group_stats(group: &ResponseGroup, dim: DimensionId) -> Result<(f64, f64)> {
    let k = group.len();
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if dim.index() >= group.num_dimensions() {
        return Err(Error::Config(format!(
            "dimension {dim} not present in group `{}`",
            group.image_id
        )));
    }
    let mean = group.scores(dim).sum::<f64>() / k as f64;
    let ss: f64 = group.scores(dim).map(|q| (q - mean) * (q - mean)).sum();
    Ok((mean, ss / (k - 1) as f64))
}
