//! Feature declarations and the JSON schema configuration format.
//!
//! A schema is an ordered list of features. Each feature is either
//! categorical (with an ordered list of class labels) or a positive
//! continuous quantity, belongs to exactly one batch, and batch 0 is the
//! core batch shared by every joint sampling step.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    /// Ordered class labels. `ordinal` marks banded variables (age or income
    /// bands) whose class index distance is meaningful.
    Categorical {
        classes: Vec<String>,
        ordinal: bool,
    },
    ContinuousPositive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    pub batch: usize,
    pub is_core: bool,
}

impl FeatureSchema {
    pub fn categorical(name: &str, classes: &[impl AsRef<str>], batch: usize) -> Self {
        FeatureSchema {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                classes: classes.iter().map(|c| c.as_ref().to_string()).collect(),
                ordinal: false,
            },
            batch,
            is_core: batch == 0,
        }
    }

    pub fn continuous(name: &str, batch: usize) -> Self {
        FeatureSchema { name: name.to_string(), kind: FeatureKind::ContinuousPositive, batch, is_core: batch == 0 }
    }

    pub fn ordinal(mut self) -> Self {
        if let FeatureKind::Categorical { ordinal, .. } = &mut self.kind {
            *ordinal = true;
        }
        self
    }

    pub fn classes(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { classes, .. } => Some(classes),
            FeatureKind::ContinuousPositive => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classes().map(<[String]>::len)
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn is_ordinal(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { ordinal: true, .. })
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes()?.iter().position(|c| c == label)
    }
}

/// One scalar coordinate of the coarse data: a class proportion of a
/// categorical feature or the mean of a continuous feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coordinate {
    pub feature: usize,
    pub class: Option<usize>,
}

/// A validated, ordered collection of features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    features: Vec<FeatureSchema>,
}

impl Schema {
    pub fn new(features: Vec<FeatureSchema>) -> Result<Self> {
        validate(&features)?;
        Ok(Schema { features })
    }

    pub fn features(&self) -> &[FeatureSchema] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature(&self, index: usize) -> &FeatureSchema {
        &self.features[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSchema> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Number of non-core batches (`B`).
    pub fn num_batches(&self) -> usize {
        self.features.iter().map(|f| f.batch).max().unwrap_or(0)
    }

    /// Indices of the core features, in declaration order.
    pub fn core_features(&self) -> Vec<usize> {
        self.batch_features(0)
    }

    pub fn batch_features(&self, batch: usize) -> Vec<usize> {
        (0..self.features.len()).filter(|&i| self.features[i].batch == batch).collect()
    }

    /// Coordinates of the given features, in the order given.
    pub fn coordinates(&self, features: &[usize]) -> Vec<Coordinate> {
        let mut out = Vec::new();
        for &feature in features {
            match self.features[feature].num_classes() {
                Some(c) => out.extend((0..c).map(|class| Coordinate { feature, class: Some(class) })),
                None => out.push(Coordinate { feature, class: None }),
            }
        }
        out
    }

    pub fn coordinate_label(&self, coord: Coordinate) -> String {
        let f = &self.features[coord.feature];
        match (coord.class, f.classes()) {
            (Some(c), Some(classes)) => format!("{}:{}", f.name, classes[c]),
            _ => f.name.clone(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: Vec<RawFeature> = serde_json::from_str(text)?;
        let features = raw.into_iter().map(RawFeature::into_schema).collect::<Result<Vec<_>>>()?;
        Schema::new(features)
    }

    pub fn to_json_string(&self) -> String {
        let raw: Vec<RawFeature> = self.features.iter().map(RawFeature::from_schema).collect();
        serde_json::to_string_pretty(&raw).expect("schema serialization cannot fail")
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for feature in &self.features {
            match &feature.kind {
                FeatureKind::Categorical { classes, .. } => {
                    writeln!(f, "{} (categorical, {} classes, batch {})", feature.name, classes.len(), feature.batch)?
                }
                FeatureKind::ContinuousPositive => {
                    writeln!(f, "{} (continuous, batch {})", feature.name, feature.batch)?
                }
            }
        }
        Ok(())
    }
}

/// Reads a schema configuration file.
pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let path = path.as_ref();
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
        .and_then(|text| Schema::from_json_str(&text))
        .stage("load_schema")
}

fn validate(features: &[FeatureSchema]) -> Result<()> {
    let mut names = HashSet::new();
    for f in features {
        if f.name.is_empty() {
            return Err(Error::Schema("feature with empty name".into()));
        }
        if matches!(f.name.as_str(), "unit_id" | "population" | "person_index") || f.name.contains(':') {
            return Err(Error::Schema(format!("reserved or malformed feature name `{}`", f.name)));
        }
        if !names.insert(f.name.as_str()) {
            return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
        }
        if let FeatureKind::Categorical { classes, .. } = &f.kind {
            if classes.len() < 2 {
                return Err(Error::Schema(format!("categorical feature `{}` needs at least 2 classes", f.name)));
            }
            let unique: HashSet<_> = classes.iter().collect();
            if unique.len() != classes.len() {
                return Err(Error::Schema(format!("feature `{}` has duplicate class labels", f.name)));
            }
        }
        if f.is_core != (f.batch == 0) {
            return Err(Error::Schema(format!("feature `{}`: core flag must be set exactly for batch 0", f.name)));
        }
    }
    if !features.iter().any(|f| f.batch == 0) {
        return Err(Error::Schema("empty core batch".into()));
    }
    let max_batch = features.iter().map(|f| f.batch).max().unwrap_or(0);
    for b in 1..=max_batch {
        if !features.iter().any(|f| f.batch == b) {
            return Err(Error::Schema(format!("batch {b} is empty")));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    name: String,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    classes: Vec<String>,
    batch: usize,
    core: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    ordinal: bool,
}

impl RawFeature {
    fn into_schema(self) -> Result<FeatureSchema> {
        let kind = match self.kind {
            RawKind::Categorical => FeatureKind::Categorical { classes: self.classes, ordinal: self.ordinal },
            RawKind::Continuous => {
                if !self.classes.is_empty() || self.ordinal {
                    return Err(Error::Schema(format!("continuous feature `{}` cannot declare classes", self.name)));
                }
                FeatureKind::ContinuousPositive
            }
        };
        Ok(FeatureSchema { name: self.name, kind, batch: self.batch, is_core: self.core })
    }

    fn from_schema(f: &FeatureSchema) -> Self {
        let (kind, classes, ordinal) = match &f.kind {
            FeatureKind::Categorical { classes, ordinal } => (RawKind::Categorical, classes.clone(), *ordinal),
            FeatureKind::ContinuousPositive => (RawKind::Continuous, Vec::new(), false),
        };
        RawFeature { name: f.name.clone(), kind, classes, batch: f.batch, core: f.is_core, ordinal }
    }
}
