//! Scenario-heterogeneous synthetic CVR data with retained ground truth.
//!
//! Each scenario `d` owns a hidden weight vector `w_d` over the one-hot
//! encoding of all fields, built as a blend of one shared direction and a
//! scenario-specific one. Labels are `Bernoulli(sigmoid(w_d . phi(x)))`,
//! then flipped with probability `label_noise`.

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Schema, Vocab};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_scenarios: usize,
    pub samples_per_scenario: usize,
    /// Aware fields besides the scenario field.
    pub num_aware_fields: usize,
    pub num_agnostic_fields: usize,
    pub vocab_size: usize,
    pub label_noise: f64,
    /// Standard deviation of each hidden weight.
    pub weight_scale: f64,
    /// Variance share of the direction common to all scenarios.
    pub shared_fraction: f64,
    /// Upper bound on pairwise cosine similarity between scenario weights.
    pub max_cosine: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_scenarios: 4,
            samples_per_scenario: 4000,
            num_aware_fields: 2,
            num_agnostic_fields: 2,
            vocab_size: 32,
            label_noise: 0.05,
            weight_scale: 2.5,
            shared_fraction: 0.3,
            max_cosine: 0.5,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenarios == 0 || self.samples_per_scenario == 0 || self.vocab_size == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.num_aware_fields + self.num_agnostic_fields == 0 {
            return Err(Error::Config("synthetic data needs at least one non-scenario field".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise {} must be in [0, 0.5)", self.label_noise)));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) || !self.weight_scale.is_finite() || self.weight_scale < 0.0 {
            return Err(Error::Config("shared_fraction must be in [0, 1] and weight_scale >= 0".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::uniform(
            self.num_scenarios,
            self.num_aware_fields,
            self.num_agnostic_fields,
            self.vocab_size,
        )
    }
}

/// A generated dataset plus the hidden scenario weights that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub hidden_weights: Vec<Vec<f64>>,
    field_offsets: Vec<usize>,
}

impl SyntheticData {
    /// Index of each field's first one-hot slot.
    pub fn field_offsets(&self) -> &[usize] {
        &self.field_offsets
    }

    pub fn one_hot_width(&self) -> usize {
        self.hidden_weights.first().map_or(0, Vec::len)
    }

    /// Active one-hot slots for a sample, in field order.
    pub fn active_slots(&self, sample: &Sample) -> Vec<usize> {
        sample
            .aware_features
            .iter()
            .chain(&sample.agnostic_features)
            .zip(&self.field_offsets)
            .map(|(id, off)| off + id)
            .collect()
    }

    /// `w_d . phi(x)` under the generating scenario's hidden weights.
    pub fn true_logit(&self, sample: &Sample) -> f64 {
        let w = &self.hidden_weights[sample.scenario_id];
        self.active_slots(sample).into_iter().map(|k| w[k]).sum()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        dot / (na * nb)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut field_offsets = Vec::with_capacity(schema.fields().len());
    let mut width = 0;
    // Aware fields come first in sample order, then agnostic.
    for f in schema.aware_fields().chain(schema.agnostic_fields()) {
        field_offsets.push(width);
        width += f.vocab_size;
    }

    let mut weight_rng = Rng::new(spec.seed).derive(0);
    let shared: Vec<f64> = (0..width).map(|_| weight_rng.normal()).collect();
    let (a, b) = (spec.shared_fraction.sqrt(), (1.0 - spec.shared_fraction).sqrt());
    let mut hidden_weights: Vec<Vec<f64>> = Vec::with_capacity(spec.num_scenarios);
    for d in 0..spec.num_scenarios {
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let w: Vec<f64> = shared
                .iter()
                .map(|s| spec.weight_scale * (a * s + b * weight_rng.normal()))
                .collect();
            if hidden_weights.iter().all(|o| cosine(o, &w) <= spec.max_cosine) {
                accepted = Some(w);
                break;
            }
        }
        match accepted {
            Some(w) => hidden_weights.push(w),
            None => {
                return Err(Error::Config(format!(
                    "could not draw scenario {d} weights with pairwise cosine <= {} after {MAX_REJECTIONS} attempts; \
                     use fewer scenarios, a larger feature space or a smaller shared_fraction",
                    spec.max_cosine
                )))
            }
        }
    }

    let mut sample_rng = Rng::new(spec.seed).derive(1);
    let mut samples = Vec::with_capacity(spec.num_scenarios * spec.samples_per_scenario);
    for d in 0..spec.num_scenarios {
        let w = &hidden_weights[d];
        for _ in 0..spec.samples_per_scenario {
            let mut aware = vec![d];
            aware.extend((0..spec.num_aware_fields).map(|_| sample_rng.below(spec.vocab_size)));
            let agnostic: Vec<usize> = (0..spec.num_agnostic_fields)
                .map(|_| sample_rng.below(spec.vocab_size))
                .collect();
            let logit: f64 = aware
                .iter()
                .chain(&agnostic)
                .zip(&field_offsets)
                .map(|(id, off)| w[off + id])
                .sum();
            let mut label = sample_rng.bernoulli(sigmoid(logit));
            if sample_rng.bernoulli(spec.label_noise) {
                label = !label;
            }
            samples.push(Sample {
                scenario_id: d,
                aware_features: aware,
                agnostic_features: agnostic,
                label: label as u8,
            });
        }
    }
    let vocab = Vocab::identity(&schema);
    Ok(SyntheticData {
        dataset: Dataset::new(schema, samples, vocab)?,
        hidden_weights,
        field_offsets,
    })
}
