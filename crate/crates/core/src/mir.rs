//! Mutual-information regularisation.
//!
//! A discriminator `T` scores pairs `(e_aw, S)`. Positives pair each sample's
//! scenario-aware embedding with its own compact weighting matrix; negatives
//! pair the matrix with the embedding of another sample in the batch:
//!
//! `L_mi = -(1/B) sum_i [ln T(e_i, S_i) + ln(1 - T(e_pi(i), S_i))]`
//!
//! Each modulated layer has its own discriminator (shared between its
//! positive and negative terms) and the per-layer losses are averaged.

use crate::error::{Error, Result};
use crate::model::{BatchForward, BoundMlp, Model};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Binding;

pub const PROB_EPS: f64 = 1e-7;

const DERANGEMENT_RETRIES: usize = 8;

/// Uniform permutation of `0..batch`, redrawn up to 8 times while it has a
/// fixed point; the last draw is kept regardless.
pub fn shuffle_negatives(batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::Config(format!("negative shuffling needs a batch of at least 2, got {batch}")));
    }
    let mut perm = rng.permutation(batch);
    for _ in 0..DERANGEMENT_RETRIES {
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
        perm = rng.permutation(batch);
    }
    Ok(perm)
}

/// `sigmoid(T([e_aw, factors]))`, shape `[B, 1]`.
pub fn discriminator_score(tape: &mut Tape, disc: &BoundMlp, e_aw: Var, factors: Var) -> Result<Var> {
    let input = tape.concat(&[e_aw, factors])?;
    let expected = tape.shape(disc.w1)[0];
    if tape.shape(input)[1] != expected {
        return Err(Error::ShapeMismatch {
            op: "discriminator input",
            lhs: tape.shape(input).to_vec(),
            rhs: vec![tape.shape(input)[0], expected],
        });
    }
    let logit = disc.apply(tape, input)?;
    Ok(tape.sigmoid(logit))
}

/// Inputs to the MI loss for one batch.
#[derive(Debug, Clone)]
pub struct MirBatchView {
    /// `[B, aware_width]`
    pub e_aw: Var,
    /// Per regularised layer, `[B, d_r * d_c]`.
    pub factors: Vec<Var>,
    /// Negative partner of each sample.
    pub permutation: Vec<usize>,
}

impl MirBatchView {
    pub fn from_forward(tape: &mut Tape, fwd: &BatchForward, permutation: Vec<usize>) -> Result<Self> {
        let batch = tape.shape(fwd.e_aw)[0];
        if permutation.len() != batch {
            return Err(Error::Config(format!(
                "permutation of length {} for a batch of {batch}",
                permutation.len()
            )));
        }
        let mut factors = Vec::with_capacity(fwd.layers.len());
        for lw in &fwd.layers {
            let n = tape.value(lw.compact).len() / batch;
            factors.push(tape.reshape(lw.compact, vec![batch, n])?);
        }
        Ok(Self {
            e_aw: fwd.e_aw,
            factors,
            permutation,
        })
    }
}

/// Single-layer term `-(mean ln T+ + mean ln(1 - T-))` from score nodes.
fn layer_term(tape: &mut Tape, pos: Var, neg: Var) -> Var {
    let pos = tape.clamp(pos, PROB_EPS, 1.0 - PROB_EPS);
    let neg = tape.clamp(neg, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(pos);
    let one_minus = tape.affine(neg, -1.0, 1.0);
    let ln = tape.ln(one_minus);
    let lp = tape.mean(lp);
    let ln = tape.mean(ln);
    let s = tape.add(lp, ln).expect("scalars");
    tape.scale(s, -1.0)
}

/// Layer-averaged MI loss; `discs[l]` scores layer `l`.
pub fn mi_loss(tape: &mut Tape, view: &MirBatchView, discs: &[BoundMlp]) -> Result<Var> {
    if view.factors.is_empty() || view.factors.len() != discs.len() {
        return Err(Error::Config(format!(
            "{} factor sets for {} discriminators",
            view.factors.len(),
            discs.len()
        )));
    }
    let negative_aw = tape.gather_rows(view.e_aw, &view.permutation)?;
    let mut total: Option<Var> = None;
    for (&factors, disc) in view.factors.iter().zip(discs) {
        let pos = discriminator_score(tape, disc, view.e_aw, factors)?;
        let neg = discriminator_score(tape, disc, negative_aw, factors)?;
        let term = layer_term(tape, pos, neg);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one layer");
    Ok(tape.scale(total, 1.0 / discs.len() as f64))
}

/// Binds the model's discriminators and evaluates [`mi_loss`] for `fwd`.
pub fn model_mi_loss(
    tape: &mut Tape,
    model: &Model,
    binding: &Binding,
    fwd: &BatchForward,
    permutation: Vec<usize>,
) -> Result<Var> {
    let view = MirBatchView::from_forward(tape, fwd, permutation)?;
    let discs: Vec<BoundMlp> = model.discriminators().iter().map(|d| d.bind(binding)).collect();
    mi_loss(tape, &view, &discs)
}

/// Closed-form loss from raw scores, for reporting and checks.
pub fn mi_loss_from_scores(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.len() != negative.len() || positive.is_empty() {
        return Err(Error::Config("positive and negative scores must be non-empty and equal length".into()));
    }
    let n = positive.len() as f64;
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let sum: f64 = positive
        .iter()
        .zip(negative)
        .map(|(&p, &q)| clamp(p).ln() + (1.0 - clamp(q)).ln())
        .sum();
    Ok(-sum / n)
}
