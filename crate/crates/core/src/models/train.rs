use std::time::Instant;

use dyhgn_tensor::{stream_seed, AdamW, AdamWConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{binary_scores, loss, GraphContext, LabeledRow, Model, ModelConfig, Variant};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::{average_precision, roc_auc};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ap: f64,
    /// Absent when the subset holds a single class.
    pub auc: Option<f64>,
    pub n: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub n_params: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
}

fn labeled_rows(ctx: &GraphContext, indices: &[usize]) -> Result<Vec<LabeledRow>> {
    let targets = ctx.graph.targets();
    indices
        .iter()
        .map(|&i| {
            let t = targets
                .get(i)
                .ok_or_else(|| Error::Validation(format!("split index {i} outside {} targets", targets.len())))?;
            Ok(LabeledRow {
                row: i,
                binary: t.binary,
                risk: t.risk_level,
            })
        })
        .collect()
}

/// Eval-mode logits of every target.
pub fn predict(model: &dyn Model, ctx: &GraphContext) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.params().bind_frozen(&mut tape);
    let out = model.forward(&mut tape, &p, ctx, &mut ForwardCtx::eval())?;
    Ok(tape.value(out.logits).clone())
}

fn metrics_from_logits(logits: &Tensor, ctx: &GraphContext, indices: &[usize]) -> Result<EvalMetrics> {
    let rows = labeled_rows(ctx, indices)?;
    let all = binary_scores(logits);
    let scores: Vec<f64> = rows.iter().map(|r| all[r.row]).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.binary).collect();
    let ap = average_precision(&scores, &labels)?;
    let auc = roc_auc(&scores, &labels).ok();
    Ok(EvalMetrics {
        ap,
        auc,
        n: rows.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
    })
}

/// AP and ROC AUC of the binary scores over `indices`.
pub fn evaluate(model: &dyn Model, ctx: &GraphContext, indices: &[usize]) -> Result<EvalMetrics> {
    metrics_from_logits(&predict(model, ctx)?, ctx, indices)
}

/// Full-batch AdamW with early stopping on validation AP. The parameters of
/// the best validation epoch are restored before the test evaluation.
pub fn train(model: &mut dyn Model, ctx: &GraphContext, split: &Split, config: &ModelConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let train_rows = labeled_rows(ctx, &split.train)?;
    let val_rows = labeled_rows(ctx, &split.val)?;
    if train_rows.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    if !val_rows.iter().any(|r| r.binary == 1) {
        return Err(Error::UndefinedMetric("validation split has no positive targets".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let mut fwd = ForwardCtx::train(config.dropout, stream_seed(config.seed, epoch as u64));
        let out = model.forward(&mut tape, &p, ctx, &mut fwd)?;
        let l = loss(&mut tape, out.logits, &train_rows, ctx.dataset)?;
        let train_loss = tape.value(l).data()[0];
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {train_loss} at epoch {epoch}")));
        }
        tape.backward(l)?;
        let grads: Vec<Option<Tensor>> = p
            .grads(&tape)
            .into_iter()
            .zip(model.params().values())
            .map(|(g, v)| Some(g.unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect();
        opt.step(model.params_mut().values_mut(), &grads)?;

        let val = evaluate(&*model, ctx, &split.val)?;
        log::debug!("{} epoch {epoch}: loss {train_loss:.5}, val AP {:.4}", config.variant, val.ap);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_ap: val.ap,
        });
        if best.as_ref().map_or(true, |(ap, _, _)| val.ap > *ap) {
            best = Some((val.ap, epoch, model.params().values().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, values)) => {
            let names = model.params().names().to_vec();
            model.params_mut().load(&names, values)?;
            epoch
        }
        None => 0,
    };
    let logits = predict(&*model, ctx)?;
    let val = metrics_from_logits(&logits, ctx, &split.val)?;
    let test = metrics_from_logits(&logits, ctx, &split.test)?;
    Ok(TrainReport {
        variant: config.variant,
        seed: config.seed,
        n_params: model.params().n_scalars(),
        best_epoch,
        epochs_run: history.len(),
        val,
        test,
        history,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Test-set mean and standard deviation across seed runs.
pub fn summarize(reports: &[TrainReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(Error::Validation("no runs to summarize".into()));
    }
    let aps: Vec<f64> = reports.iter().map(|r| r.test.ap).collect();
    let (ap_mean, ap_std) = mean_std(&aps);
    let aucs: Option<Vec<f64>> = reports.iter().map(|r| r.test.auc).collect();
    let (auc_mean, auc_std) = match aucs {
        Some(a) => {
            let (m, s) = mean_std(&a);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(SeedSummary {
        n: reports.len(),
        ap_mean,
        ap_std,
        auc_mean,
        auc_std,
    })
}
