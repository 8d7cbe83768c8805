//! Joint objective and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss};
use crate::mir::{model_mi_loss, shuffle_negatives, PROB_EPS};
use crate::model::{Model, ParamCounts};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the MI term; 0 disables it.
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Stop after this many optimizer steps (for inspection runs).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            learning_rate: 1e-3,
            lambda: 1.0,
            seed: 42,
            eval_every: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs and eval_every must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

/// Full binary cross-entropy plus `lambda * l_mi`, predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn cvr_loss(predictions: &[f64], labels: &[u8], l_mi: f64, lambda: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Config(format!(
            "cvr_loss: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(logloss(predictions, labels)? + lambda * l_mi)
}

/// Tape version of the cross-entropy term for `prob: [B, 1]`.
pub fn bce_loss(tape: &mut Tape, prob: Var, labels: &[u8]) -> Result<Var> {
    let n = labels.len();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let shape = tape.shape(prob).to_vec();
    if shape.iter().product::<usize>() != n {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: shape,
            rhs: vec![n],
        });
    }
    let y = tape.constant(shape.clone(), y)?;
    let not_y = tape.constant(shape, not_y)?;
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let ln_q = tape.ln(q);
    let pos = tape.mul(y, ln_p)?;
    let neg = tape.mul(not_y, ln_q)?;
    let both = tape.add(pos, neg)?;
    let mean = tape.mean(both);
    Ok(tape.scale(mean, -1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total objective over the epoch's batches.
    pub train_loss: f64,
    pub train_cvr_loss: f64,
    pub train_mi_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub evaluations: Vec<EvalRecord>,
    /// Total objective at every optimizer step.
    pub step_losses: Vec<f64>,
    pub final_auc: f64,
    pub final_logloss: f64,
    pub param_counts: ParamCounts,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Vec<Vec<f64>>>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl RunReport {
    /// `epoch,train_loss,train_cvr_loss,train_mi_loss,eval_auc,eval_logloss`
    /// rows; eval columns are empty for epochs without evaluation.
    pub fn metric_rows(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_cvr_loss,train_mi_loss,eval_auc,eval_logloss\n");
        for e in &self.epochs {
            let eval = self.evaluations.iter().find(|r| r.epoch == e.epoch);
            let (a, l) = eval.map_or((String::new(), String::new()), |r| (r.auc.to_string(), r.logloss.to_string()));
            out.push_str(&format!(
                "{},{},{},{},{a},{l}\n",
                e.epoch, e.train_loss, e.train_cvr_loss, e.train_mi_loss
            ));
        }
        out
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    let preds = model.predict(&samples)?;
    let labels: Vec<u8> = dataset.samples.iter().map(|s| s.label).collect();
    Ok((auc(&preds, &labels)?, logloss(&preds, &labels)?))
}

/// Trains `model` on `train` with Adam on `BCE + lambda * L_mi`, evaluating on
/// `eval` every `eval_every` epochs and after the last one.
pub fn fit(model: &mut Model, train: &Dataset, eval: &Dataset, config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("training and evaluation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let base = Rng::new(config.seed);
    let mut batch_rng = base.derive(10);
    let mut negative_rng = base.derive(11);
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let use_mir = config.lambda > 0.0 && model.is_modulated();

    let mut tape = Tape::new();
    let mut epochs = Vec::new();
    let mut evaluations = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut stopped = false;
        let (mut total, mut cvr_total, mut mi_total, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in batch_indices(train.len(), config.batch_size, &mut batch_rng)? {
            if config.max_steps.is_some_and(|m| step >= m) {
                stopped = true;
                break;
            }
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();

            tape.reset();
            let binding = model.params().bind(&mut tape);
            let fwd = model.forward_batch(&mut tape, &binding, &samples)?;
            let cvr = bce_loss(&mut tape, fwd.prob, &labels)?;
            let (loss, mi_value) = if use_mir && samples.len() >= 2 {
                let perm = shuffle_negatives(samples.len(), &mut negative_rng)?;
                let mi = model_mi_loss(&mut tape, model, &binding, &fwd, perm)?;
                let weighted = tape.scale(mi, config.lambda);
                (tape.add(cvr, weighted)?, tape.value(mi)[0])
            } else {
                (cvr, 0.0)
            };
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step, loss: loss_value });
            }
            let grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.accumulate(&grads, &binding);
            adam.step(params)?;
            params.zero_grads();

            step_losses.push(loss_value);
            total += loss_value;
            cvr_total += tape.value(cvr)[0];
            mi_total += mi_value;
            count += 1;
            step += 1;
        }
        if count == 0 {
            break;
        }
        let n = count as f64;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / n,
            train_cvr_loss: cvr_total / n,
            train_mi_loss: mi_total / n,
        });
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let (a, l) = evaluate(model, eval)?;
            evaluations.push(EvalRecord {
                epoch,
                auc: a,
                logloss: l,
            });
        }
        if stopped {
            break;
        }
    }
    if evaluations.is_empty() || evaluations.last().map(|r| r.epoch) != epochs.last().map(|e| e.epoch) {
        let (a, l) = evaluate(model, eval)?;
        evaluations.push(EvalRecord {
            epoch: epochs.last().map_or(0, |e| e.epoch),
            auc: a,
            logloss: l,
        });
    }
    let last = evaluations.last().expect("at least one evaluation");
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: serde_json::to_value(config).expect("config serialises"),
        final_auc: last.auc,
        final_logloss: last.logloss,
        epochs,
        evaluations,
        step_losses,
        param_counts: model.count_parameters(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        similarity: None,
    })
}
