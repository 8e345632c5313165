//! One optimisation step over a collated batch.

use crate::autograd::Graph;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::Tower;
use crate::objective::{combined_loss, hard_only_loss, AlphaPolicy, LossBreakdown, Positions};
use crate::train::optim::{clip_global_norm, AdamW};

pub enum StepObjective<'a> {
    /// Cross-entropy only; no teacher involved.
    HardOnly,
    /// Selective mixture against a frozen teacher fed the student's KV cache.
    Distill { teacher: &'a Tower, policy: &'a AlphaPolicy },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Global gradient norm before clipping (0 when skipped).
    pub grad_norm: f64,
    /// Why no update was applied, if one was not.
    pub skipped: Option<String>,
    /// Teacher-graph nodes that could have received a gradient.
    pub teacher_trainable_nodes: usize,
    pub teacher_ran: bool,
}

/// Forward pair, loss, backward, clip and AdamW update on the parameters for
/// which `trainable` holds.
pub fn train_step(
    student: &mut Tower,
    batch: &Batch,
    objective: &StepObjective<'_>,
    trainable: &dyn Fn(&str) -> bool,
    opt: &mut AdamW,
    lr: f64,
    max_norm: f64,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = student.params.bind(&mut g, trainable);
    let seq = student.build_sequence(&mut g, &bound, batch)?;
    let out = student.forward(&mut g, &bound, seq.embeds, &seq.layout.attention)?;
    let labels = seq.layout.flat_labels();
    let mask = seq.layout.flat_mask();
    let pos = Positions {
        labels: &labels,
        mask: &mask,
        seq_len: seq.layout.seq_len,
        tags: &batch.tags,
    };
    let mut teacher_trainable_nodes = 0;
    let mut teacher_ran = false;
    let obj = match objective {
        StepObjective::HardOnly => hard_only_loss(&mut g, out.logits, &pos)?,
        StepObjective::Distill { teacher, policy } => {
            let counted = pos.counted();
            let needs_teacher = batch.tags.iter().enumerate().any(|(b, tag)| {
                policy.alpha_for(tag).map_or(true, |a| a > 0.0)
                    && counted[b * pos.seq_len..(b + 1) * pos.seq_len].iter().any(|&c| c)
            });
            let z_t = if needs_teacher {
                let mode = student.config().teacher_embeds;
                let x_t = teacher.teacher_embeddings(&g, &seq, batch, mode)?;
                let (z, nodes) = teacher.forward_shared_kv(&x_t, &seq.layout.attention, &g, &out.cache)?;
                teacher_trainable_nodes = nodes;
                teacher_ran = true;
                let v = z.shape()[2];
                Some(z.reshape([batch.len() * seq.layout.seq_len, v])?)
            } else {
                None
            };
            combined_loss(&mut g, z_t.as_ref(), out.logits, &pos, policy)?
        }
    };
    let mut outcome = StepOutcome {
        breakdown: obj.breakdown,
        grad_norm: 0.0,
        skipped: None,
        teacher_trainable_nodes,
        teacher_ran,
    };
    if outcome.breakdown.empty {
        log::warn!("batch has no counted positions; update skipped");
        outcome.skipped = Some("no counted positions".into());
        return Ok(outcome);
    }
    g.backward(obj.loss)?;
    let mut grads = bound.grads(&g);
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        log::warn!("non-finite gradient; update skipped");
        outcome.skipped = Some("non-finite gradient".into());
        return Ok(outcome);
    }
    outcome.grad_norm = clip_global_norm(&mut grads, max_norm)?;
    if !outcome.grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    opt.update(&mut student.params, &grads, lr)?;
    Ok(outcome)
}
