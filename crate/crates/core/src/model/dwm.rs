//! Decomposable weighting matrices.
//!
//! Every variant produces a compact matrix `sigmoid(row . col)` of shape
//! `[B, d_r, d_c]` (or the full `[B, d_m, d_n]` for [`DwmVariant::Non`]),
//! which the repeat operator expands to the backbone layer shape.
//!
//! | variant | row factor        | column factor     |
//! |---------|-------------------|-------------------|
//! | `Rc`    | generated per row | generated per col |
//! | `R`     | generated         | shared `C_share`  |
//! | `C`     | shared `R_share`  | generated         |

use serde::{Deserialize, Serialize};

use super::layers::BoundMlp;
use crate::error::{Error, Result};
use crate::tape::{RepeatMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DwmVariant {
    Non,
    Rc,
    R,
    C,
}

impl DwmVariant {
    pub const ALL: [DwmVariant; 4] = [DwmVariant::Non, DwmVariant::Rc, DwmVariant::R, DwmVariant::C];

    pub fn as_str(self) -> &'static str {
        match self {
            DwmVariant::Non => "non",
            DwmVariant::Rc => "rc",
            DwmVariant::R => "r",
            DwmVariant::C => "c",
        }
    }
}

impl std::str::FromStr for DwmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "non" => Ok(DwmVariant::Non),
            "rc" => Ok(DwmVariant::Rc),
            "r" => Ok(DwmVariant::R),
            "c" => Ok(DwmVariant::C),
            other => Err(Error::Config(format!("unknown DWM variant `{other}` (non, rc, r, c)"))),
        }
    }
}

impl std::fmt::Display for DwmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Low-rank factor sizes for one backbone layer of shape `d_m x d_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LowRank {
    pub d_r: usize,
    pub d_c: usize,
    pub d_k: usize,
}

impl LowRank {
    pub fn full(d_m: usize, d_n: usize) -> Self {
        Self { d_r: d_m, d_c: d_n, d_k: 1 }
    }

    pub fn validate(&self, d_m: usize, d_n: usize) -> Result<()> {
        if self.d_r == 0 || self.d_r > d_m || !d_m.is_multiple_of(self.d_r) {
            return Err(Error::Config(format!(
                "d_r = {} must divide d_m = {d_m}",
                self.d_r
            )));
        }
        if self.d_c == 0 || self.d_c > d_n || !d_n.is_multiple_of(self.d_c) {
            return Err(Error::Config(format!(
                "d_c = {} must divide d_n = {d_n}",
                self.d_c
            )));
        }
        if self.d_k == 0 || self.d_k > d_m.min(d_n) {
            return Err(Error::Config(format!(
                "d_k = {} must be in [1, min(d_m, d_n) = {}]",
                self.d_k,
                d_m.min(d_n)
            )));
        }
        Ok(())
    }

    /// `(d_r / d_m) * (d_c / d_n) * d_k`
    pub fn size_fraction(&self, d_m: usize, d_n: usize) -> f64 {
        (self.d_r as f64 / d_m as f64) * (self.d_c as f64 / d_n as f64) * self.d_k as f64
    }
}

/// Low-rank size fraction of a factorisation against its layer shape.
pub fn low_rank_size_fraction(size: &LowRank, d_m: usize, d_n: usize) -> Result<f64> {
    size.validate(d_m, d_n)?;
    Ok(size.size_fraction(d_m, d_n))
}

/// Tape nodes of one layer's weighting factors for a batch.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeighting {
    /// Row factor `[B, d_r, d_k]` (generated or broadcast shared).
    pub row: Option<Var>,
    /// Column factor `[B, d_k, d_c]`.
    pub col: Option<Var>,
    /// Pre-sigmoid compact product `[B, d_r, d_c]`.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub compact: Var,
}

fn generated(tape: &mut Tape, gen: &BoundMlp, input: Var, rows: usize, cols: usize) -> Result<Var> {
    let batch = tape.shape(input)[0];
    let out = gen.apply(tape, input)?;
    let arity = tape.shape(out)[1];
    if arity != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "generator output",
            lhs: vec![batch, arity],
            rhs: vec![batch, rows, cols],
        });
    }
    tape.reshape(out, vec![batch, rows, cols])
}

fn finish(tape: &mut Tape, row: Option<Var>, col: Option<Var>, logits: Var) -> LayerWeighting {
    let compact = tape.sigmoid(logits);
    LayerWeighting {
        row,
        col,
        logits,
        compact,
    }
}

fn shared(tape: &mut Tape, factor: Var, batch: usize, rows: usize, cols: usize) -> Result<Var> {
    if tape.shape(factor) != [rows, cols] {
        return Err(Error::ShapeMismatch {
            op: "shared factor",
            lhs: tape.shape(factor).to_vec(),
            rhs: vec![rows, cols],
        });
    }
    tape.broadcast_batch(factor, batch)
}

/// Undecomposed: `S = sigmoid(G(input))` reshaped to `d_m x d_n`.
pub fn dwm_non(tape: &mut Tape, gen: &BoundMlp, input: Var, d_m: usize, d_n: usize) -> Result<LayerWeighting> {
    let logits = generated(tape, gen, input, d_m, d_n)?;
    Ok(finish(tape, None, None, logits))
}

/// Both factors generated: `sigmoid(G_R(input) . G_C(input))`.
pub fn dwm_rc(tape: &mut Tape, gen_r: &BoundMlp, gen_c: &BoundMlp, input: Var, size: LowRank) -> Result<LayerWeighting> {
    let row = generated(tape, gen_r, input, size.d_r, size.d_k)?;
    let col = generated(tape, gen_c, input, size.d_k, size.d_c)?;
    let logits = tape.batch_matmul(row, col)?;
    Ok(finish(tape, Some(row), Some(col), logits))
}

/// Generated rows, shared columns: `sigmoid(G_R(input) . C_share)`.
pub fn dwm_r(tape: &mut Tape, gen_r: &BoundMlp, c_share: Var, input: Var, size: LowRank) -> Result<LayerWeighting> {
    let batch = tape.shape(input)[0];
    let row = generated(tape, gen_r, input, size.d_r, size.d_k)?;
    let col = shared(tape, c_share, batch, size.d_k, size.d_c)?;
    let logits = tape.batch_matmul(row, col)?;
    Ok(finish(tape, Some(row), Some(col), logits))
}

/// Shared rows, generated columns: `sigmoid(R_share . G_C(input))`.
pub fn dwm_c(tape: &mut Tape, r_share: Var, gen_c: &BoundMlp, input: Var, size: LowRank) -> Result<LayerWeighting> {
    let batch = tape.shape(input)[0];
    let row = shared(tape, r_share, batch, size.d_r, size.d_k)?;
    let col = generated(tape, gen_c, input, size.d_k, size.d_c)?;
    let logits = tape.batch_matmul(row, col)?;
    Ok(finish(tape, Some(row), Some(col), logits))
}

/// Expands a compact `[.., d_r, d_c]` tensor to `[.., d_m, d_n]`.
pub fn psi_repeat(compact: &Tensor, d_m: usize, d_n: usize, mode: RepeatMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(compact);
    let out = tape.repeat(x, d_m, d_n, mode)?;
    Ok(tape.tensor(out))
}
