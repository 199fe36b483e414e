//! Predictive temporal contrastive objective.
//!
//! Context over one modality's past predicts the other modality's features
//! `k` steps ahead; predictions are scored against the in-batch targets with
//! InfoNCE over cosine similarities.

use std::rc::Rc;

use crate::autograd::{log_sum_exp, Graph, ParamStore, Var};
use crate::encoders::{context_states, prediction_head, EncoderConfig, Encoded, CTX_F2V, CTX_V2F};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveConfig {
    pub temperature: f64,
    pub offset: usize,
    pub fmri_to_video: bool,
    pub video_to_fmri: bool,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            offset: 2,
            fmri_to_video: true,
            video_to_fmri: true,
        }
    }
}

impl PredictiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("predictive temperature must be > 0"));
        }
        if self.offset == 0 {
            return Err(Error::config("predictive offset must be >= 1"));
        }
        if !self.fmri_to_video && !self.video_to_fmri {
            return Err(Error::config("predictive needs at least one prediction direction"));
        }
        Ok(())
    }
}

/// InfoNCE over rows: `-(1/B) sum_i log softmax_j(s(p_i, t_j) / tau)[i]`.
pub fn predictive_loss(g: &mut Graph, predictions: Var, targets: Var, temperature: f64) -> Result<Var> {
    let b = g.value(predictions).rows();
    if g.value(predictions).is_empty() || g.value(targets).is_empty() {
        return Err(Error::EmptyBatch);
    }
    if g.value(targets).rows() != b {
        return Err(Error::shape(
            "predictive_loss",
            "predictions",
            g.shape(predictions),
            "targets",
            g.shape(targets),
        ));
    }
    let sims = g.cosine_matrix(predictions, targets)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let log_probs = g.log_softmax_rows(logits);
    let positives = g.pick(log_probs, (0..b).collect())?;
    let mean = g.mean(positives);
    Ok(g.scale(mean, -1.0))
}

/// Plain evaluation of the InfoNCE loss from a precomputed similarity matrix.
pub fn info_nce_from_similarities(sims: &Tensor, temperature: f64) -> Result<f64> {
    let (b, c) = sims.dims2();
    if sims.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if b != c {
        return Err(Error::shape("info_nce", "similarities", sims.shape(), "square", &[b, b]));
    }
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = sims.row(i).iter().map(|s| s / temperature).collect();
        total += log_sum_exp(&row) - row[i];
    }
    Ok(total / b as f64)
}

/// Mean InfoNCE over every valid prediction position for one direction.
#[allow(clippy::too_many_arguments)]
pub fn direction_loss(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    cfg: &PredictiveConfig,
    prefix: &str,
    context_seq: Var,
    context_len: usize,
    target_seq: Var,
    target_len: usize,
) -> Result<Var> {
    let k = cfg.offset;
    let span = context_len.min(target_len);
    if span <= k {
        return Err(Error::config(format!(
            "sequence length {span} must exceed prediction offset {k}"
        )));
    }
    let batch = g.value(context_seq).rows() / context_len;
    let positions = span - k;
    let ctx = context_states(g, store, enc, prefix, context_seq, context_len)?;

    // gather states at every valid t, grouped by t: row t*B + b
    let rows: Rc<[Option<usize>]> = (0..positions)
        .flat_map(|t| (0..batch).map(move |b| Some(b * context_len + t)))
        .collect();
    let at_t = g.gather_rows(ctx.states, rows)?;
    let preds = prediction_head(g, store, prefix, at_t)?;

    let mut total: Option<Var> = None;
    for t in 0..positions {
        let pred_rows: Rc<[Option<usize>]> = (0..batch).map(|b| Some(t * batch + b)).collect();
        let target_rows: Rc<[Option<usize>]> = (0..batch).map(|b| Some(b * target_len + t + k)).collect();
        let p = g.gather_rows(preds, pred_rows)?;
        let y = g.gather_rows(target_seq, target_rows)?;
        let l = predictive_loss(g, p, y, cfg.temperature)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("positions >= 1"), 1.0 / positions as f64))
}

/// Average of the enabled directions (fMRI -> video, video -> fMRI).
pub fn predictive_bidirectional(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    cfg: &PredictiveConfig,
    encoded: &Encoded,
) -> Result<Var> {
    cfg.validate()?;
    let mut parts = Vec::new();
    if cfg.fmri_to_video {
        parts.push(direction_loss(
            g,
            store,
            enc,
            cfg,
            CTX_F2V,
            encoded.fmri_seq,
            enc.t_fmri,
            encoded.video_seq,
            enc.t_video,
        )?);
    }
    if cfg.video_to_fmri {
        parts.push(direction_loss(
            g,
            store,
            enc,
            cfg,
            CTX_V2F,
            encoded.video_seq,
            enc.t_video,
            encoded.fmri_seq,
            enc.t_fmri,
        )?);
    }
    let n = parts.len();
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(if n == 1 { total } else { g.scale(total, 1.0 / n as f64) })
}
