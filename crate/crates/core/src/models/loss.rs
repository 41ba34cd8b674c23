use dyhgn_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::schema::DatasetKind;

/// One supervised row of the logit matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledRow {
    pub row: usize,
    pub binary: u8,
    pub risk: Option<u8>,
}

/// Two-class cross-entropy on the first two logit columns. On MassReg the
/// risk-level cross-entropy over the remaining columns is added and the two
/// terms averaged.
pub fn loss(tape: &mut Tape, logits: Var, rows: &[LabeledRow], dataset: DatasetKind) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Validation("loss over an empty row set".into()));
    }
    let cols = tape.value(logits).cols();
    let binary_logits = tape.slice_cols(logits, 0, 2)?;
    let binary: Vec<(usize, usize)> = rows.iter().map(|r| (r.row, r.binary as usize)).collect();
    let l_bin = tape.cross_entropy(binary_logits, &binary)?;
    if !dataset.has_risk_levels() {
        return Ok(l_bin);
    }
    let risk = rows
        .iter()
        .map(|r| {
            r.risk
                .map(|k| (r.row, k as usize))
                .ok_or_else(|| Error::Validation(format!("row {} lacks a risk level", r.row)))
        })
        .collect::<Result<Vec<_>>>()?;
    if cols <= 2 {
        return Err(Error::Config("logits have no risk-level columns".into()));
    }
    let risk_logits = tape.slice_cols(logits, 2, cols)?;
    let l_risk = tape.cross_entropy(risk_logits, &risk)?;
    let total = tape.add(l_bin, l_risk)?;
    Ok(tape.scale(total, 0.5))
}

/// Softmax probability of the positive class from the first two columns.
pub fn binary_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            1.0 / (1.0 + (r[0] - r[1]).exp())
        })
        .collect()
}
