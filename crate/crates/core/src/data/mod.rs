//! Multi-scenario dataset model: schema, samples, stratified splitting and
//! seeded mini-batching.

mod csv_io;
mod synthetic;

pub use csv_io::{load_csv, write_csv};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SCENARIO_FIELD: &str = "scenario";
pub const LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Aware,
    Agnostic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub vocab_size: usize,
    pub kind: FieldKind,
}

/// Categorical field layout. The first field is always the scenario field,
/// and it is scenario-aware.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn new(num_scenarios: usize, mut others: Vec<Field>) -> Result<Self> {
        if num_scenarios == 0 {
            return Err(Error::Config("num_scenarios must be positive".into()));
        }
        others.retain(|f| f.name != SCENARIO_FIELD);
        let mut fields = vec![Field {
            name: SCENARIO_FIELD.into(),
            vocab_size: num_scenarios,
            kind: FieldKind::Aware,
        }];
        fields.extend(others);
        let schema = Self { fields };
        schema.validate()?;
        Ok(schema)
    }

    /// `scenario`, `aware_0..`, `agnostic_0..` with one shared vocab size.
    pub fn uniform(num_scenarios: usize, num_aware: usize, num_agnostic: usize, vocab_size: usize) -> Result<Self> {
        let mut others = Vec::new();
        for k in 0..num_aware {
            others.push(Field {
                name: format!("aware_{k}"),
                vocab_size,
                kind: FieldKind::Aware,
            });
        }
        for k in 0..num_agnostic {
            others.push(Field {
                name: format!("agnostic_{k}"),
                vocab_size,
                kind: FieldKind::Agnostic,
            });
        }
        Self::new(num_scenarios, others)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if f.vocab_size == 0 {
                return Err(Error::Config(format!("field `{}` has zero vocabulary", f.name)));
            }
            if f.name == LABEL_COLUMN || !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate or reserved field name `{}`", f.name)));
            }
        }
        if self.agnostic_fields().next().is_none() && self.aware_fields().count() == 0 {
            return Err(Error::Config("schema has no fields".into()));
        }
        Ok(())
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn num_scenarios(&self) -> usize {
        self.fields[0].vocab_size
    }

    /// Aware fields in sample order (scenario first).
    pub fn aware_fields(&self) -> impl Iterator<Item = &Field> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Aware)
    }

    pub fn agnostic_fields(&self) -> impl Iterator<Item = &Field> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Agnostic)
    }

    pub fn num_aware(&self) -> usize {
        self.aware_fields().count()
    }

    pub fn num_agnostic(&self) -> usize {
        self.agnostic_fields().count()
    }
}

/// One labelled impression. `aware_features[0]` is the scenario id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub scenario_id: usize,
    pub aware_features: Vec<usize>,
    pub agnostic_features: Vec<usize>,
    pub label: u8,
}

/// Persisted string-to-id tables, one per schema field, ids in first-seen
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<Vec<String>>,
    #[serde(skip)]
    index: Vec<HashMap<String, usize>>,
}

impl Vocab {
    pub fn empty(num_fields: usize) -> Self {
        Self {
            tokens: vec![Vec::new(); num_fields],
            index: vec![HashMap::new(); num_fields],
        }
    }

    /// Token `k` maps to id `k` for every field.
    pub fn identity(schema: &Schema) -> Self {
        let tokens: Vec<Vec<String>> = schema
            .fields()
            .iter()
            .map(|f| (0..f.vocab_size).map(|k| k.to_string()).collect())
            .collect();
        let mut v = Self {
            tokens,
            index: Vec::new(),
        };
        v.rebuild_index();
        v
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .map(|ts| ts.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect())
            .collect();
    }

    pub fn num_fields(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, field: usize, id: usize) -> Option<&str> {
        self.tokens.get(field)?.get(id).map(String::as_str)
    }

    pub fn lookup(&self, field: usize, token: &str) -> Option<usize> {
        self.index.get(field)?.get(token).copied()
    }

    /// Existing id for `token`, or the next free id.
    pub(crate) fn intern(&mut self, field: usize, token: &str) -> usize {
        if self.index.len() != self.tokens.len() {
            self.rebuild_index();
        }
        if let Some(&id) = self.index[field].get(token) {
            return id;
        }
        let id = self.tokens[field].len();
        self.tokens[field].push(token.to_string());
        self.index[field].insert(token.to_string(), id);
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn new(schema: Schema, samples: Vec<Sample>, vocab: Vocab) -> Result<Self> {
        let ds = Self {
            schema,
            samples,
            vocab,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let aware: Vec<usize> = self.schema.aware_fields().map(|f| f.vocab_size).collect();
        let agnostic: Vec<usize> = self.schema.agnostic_fields().map(|f| f.vocab_size).collect();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Data(format!("sample {i}: label {} is not binary", s.label)));
            }
            if s.aware_features.len() != aware.len() || s.agnostic_features.len() != agnostic.len() {
                return Err(Error::Data(format!("sample {i}: feature arity does not match schema")));
            }
            if s.aware_features[0] != s.scenario_id {
                return Err(Error::Data(format!("sample {i}: first aware feature must be the scenario id")));
            }
            for (&id, &v) in s
                .aware_features
                .iter()
                .zip(&aware)
                .chain(s.agnostic_features.iter().zip(&agnostic))
            {
                if id >= v {
                    return Err(Error::OutOfRange {
                        what: format!("sample {i} feature id"),
                        index: id,
                        size: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_scenarios(&self) -> usize {
        self.schema.num_scenarios()
    }

    /// Sample indices grouped by scenario id.
    pub fn partition_by_scenario(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.num_scenarios()];
        for (i, s) in self.samples.iter().enumerate() {
            parts[s.scenario_id].push(i);
        }
        parts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn positive_rate(&self) -> f64 {
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.len().max(1) as f64
    }
}

/// Stratified split: each scenario is shuffled and cut at `train_fraction`
/// independently. Returns `(train, eval)` sample indices.
pub fn split_indices(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} must be in (0, 1)")));
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (scenario, mut idx) in dataset.partition_by_scenario().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "scenario {scenario} has {} sample(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let cut = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..cut]);
        eval.extend_from_slice(&idx[cut..]);
    }
    Ok((train, eval))
}

pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, eval) = split_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&eval)))
}

/// Seeded permutation of `0..len` cut into chunks of `batch_size`; the final
/// short chunk is kept.
pub fn batch_indices(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} must be at least 2")));
    }
    let perm = rng.permutation(len);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches<'a>(dataset: &'a Dataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<&'a Sample>>> {
    Ok(batch_indices(dataset.len(), batch_size, rng)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| &dataset.samples[i]).collect())
        .collect())
}
