//! Training objectives and the three phase losses built from them.
//!
//! All reductions are batch means. Phase losses sum the per-domain terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, NormMode, Tape, Var};
use crate::data::Batch;
use crate::error::{config_err, shape_err, AmelError, Result};
use crate::model::{dea, AmelModel, BaseVars, ExpertVars, StatsPolicy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub consistency_target: ConsistencyTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 0.1,
            consistency_target: ConsistencyTarget::ExpertFeature,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_con >= 0.0 && self.lambda_con.is_finite()) {
            return Err(config_err("lambda_con", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Which side of the consistency loss is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// The held-out expert's feature is the target; only the aggregate moves.
    #[default]
    ExpertFeature,
    /// The aggregate is the target; only the held-out expert moves.
    AggregatedFeature,
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cls_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean over the batch of the squared L2 distance between depth maps.
pub fn depth_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.sq_dist_mean(pred, target)
}

/// Mean over the batch of `||F_own - F_agg||^2`, with the gradient blocked
/// through the side named by `target`.
pub fn consistency_loss(tape: &mut Tape, own: Var, agg: Var, target: ConsistencyTarget) -> Result<Var> {
    match target {
        ConsistencyTarget::ExpertFeature => {
            let own = tape.detach(own);
            tape.sq_dist_mean(agg, own)
        }
        ConsistencyTarget::AggregatedFeature => {
            let agg = tape.detach(agg);
            tape.sq_dist_mean(own, agg)
        }
    }
}

/// Tape handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub base: BaseVars,
    pub experts: Vec<ExpertVars>,
}

impl ModelVars {
    /// Fresh leaves; `track_experts[k]` selects whether expert `k` is tracked.
    pub fn bind(model: &AmelModel, tape: &mut Tape, track_base: bool, track_experts: &[bool]) -> Self {
        Self {
            base: model.bind_base(tape, track_base),
            experts: model
                .experts
                .iter()
                .enumerate()
                .map(|(k, e)| e.bind(tape, track_experts.get(k).copied().unwrap_or(false)))
                .collect(),
        }
    }
}

/// Scalar handles of one phase loss.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub depth: Var,
    /// Present for the meta-test loss. Not part of `total` when `lambda_con == 0`.
    pub consistency: Option<Var>,
}

/// Values of [`LossParts`] read off a tape.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub depth: f64,
    pub consistency: Option<f64>,
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            cls: tape.value(self.cls).item(),
            depth: tape.value(self.depth).item(),
            consistency: self.consistency.map(|c| tape.value(c).item()),
        }
    }
}

/// Backbone feature of each batch from one forward over their concatenation,
/// so batch-norm statistics pool every domain.
pub fn common_by_batch(
    tape: &mut Tape,
    model: &AmelModel,
    base: &BaseVars,
    batches: &[Batch],
    policy: StatsPolicy,
) -> Result<(Vec<Var>, Vec<BatchNormState>)> {
    if batches.is_empty() {
        return Err(shape_err("common_by_batch", "no batches"));
    }
    let images: Vec<&Tensor> = batches.iter().map(|b| &b.images).collect();
    let x = Tensor::concat(&images)?;
    model.check_input(&x)?;
    let xv = tape.leaf(x, false);
    let (fc, stats) = model.common_on_tape(tape, base, xv, policy)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(batches.len());
    for b in batches {
        out.push(tape.slice_batch(fc, start, b.len())?);
        start += b.len();
    }
    Ok((out, stats))
}

fn expert_index(model: &AmelModel, batch: &Batch) -> Result<usize> {
    if batch.domain >= model.num_experts() {
        return Err(AmelError::IndexOutOfRange {
            what: "batch domain",
            index: batch.domain,
            len: model.num_experts(),
        });
    }
    Ok(batch.domain)
}

/// Classification and depth losses of the heads applied to `f`.
fn head_terms(tape: &mut Tape, model: &AmelModel, base: &BaseVars, f: Var, batch: &Batch) -> Result<(Var, Var)> {
    let (logits, depth) = model.heads_on_tape(tape, base, f)?;
    let cls = cls_loss(tape, logits, &batch.labels)?;
    let target = tape.leaf(batch.depth.clone(), false);
    let dep = depth_loss(tape, depth, target)?;
    Ok((cls, dep))
}

fn sum_terms(tape: &mut Tape, terms: &[(Var, Var)]) -> Result<(Var, Var, Var)> {
    let (mut cls, mut dep) = terms[0];
    for &(c, d) in &terms[1..] {
        cls = tape.add(cls, c)?;
        dep = tape.add(dep, d)?;
    }
    let total = tape.add(cls, dep)?;
    Ok((total, cls, dep))
}

/// Per-domain expert forward on its own samples in train mode.
fn own_expert_terms(
    tape: &mut Tape,
    model: &AmelModel,
    vars: &ModelVars,
    common: &[Var],
    batches: &[Batch],
    use_experts: bool,
) -> Result<(Vec<(Var, Var)>, Vec<(usize, Option<BatchNormState>)>)> {
    let mut terms = Vec::with_capacity(batches.len());
    let mut stats = Vec::new();
    for (&fc, batch) in common.iter().zip(batches) {
        let f = if use_experts {
            let k = expert_index(model, batch)?;
            let (fk, st) = model.experts[k].forward(tape, &vars.experts[k], fc, NormMode::Train)?;
            stats.push((k, st));
            tape.add(fc, fk)?
        } else {
            fc
        };
        terms.push(head_terms(tape, model, &vars.base, f, batch)?);
    }
    Ok((terms, stats))
}

/// Output of [`loss_b`].
#[derive(Debug, Clone)]
pub struct BaseLoss {
    pub parts: LossParts,
    /// New running statistics of the backbone batch-norm layers.
    pub backbone_stats: Vec<BatchNormState>,
    /// New running statistics of each expert that saw its own domain.
    pub expert_stats: Vec<(usize, Option<BatchNormState>)>,
}

/// Normal-train loss: every batch goes through the backbone and its own
/// expert; summed classification and depth losses. With `use_experts`
/// false the heads see the backbone feature alone.
pub fn loss_b(
    tape: &mut Tape,
    model: &AmelModel,
    vars: &ModelVars,
    batches: &[Batch],
    policy: StatsPolicy,
    use_experts: bool,
) -> Result<BaseLoss> {
    let (common, backbone_stats) = common_by_batch(tape, model, &vars.base, batches, policy)?;
    let (terms, expert_stats) = own_expert_terms(tape, model, vars, &common, batches, use_experts)?;
    let (total, cls, depth) = sum_terms(tape, &terms)?;
    Ok(BaseLoss {
        parts: LossParts {
            total,
            cls,
            depth,
            consistency: None,
        },
        backbone_stats,
        expert_stats,
    })
}

/// Meta-train loss over the meta-train batches, each through its own expert.
/// `common[i]` is the backbone feature of `batches[i]`.
pub fn loss_trn(
    tape: &mut Tape,
    model: &AmelModel,
    vars: &ModelVars,
    common: &[Var],
    batches: &[Batch],
) -> Result<(LossParts, Vec<(usize, Option<BatchNormState>)>)> {
    if common.len() != batches.len() || batches.is_empty() {
        return Err(shape_err(
            "loss_trn",
            format!("{} features for {} batches", common.len(), batches.len()),
        ));
    }
    let (terms, stats) = own_expert_terms(tape, model, vars, common, batches, true)?;
    let (total, cls, depth) = sum_terms(tape, &terms)?;
    Ok((
        LossParts {
            total,
            cls,
            depth,
            consistency: None,
        },
        stats,
    ))
}

/// Meta-test loss on the held-out domain's batch. The meta-train experts
/// (bound in `vars`, typically at their inner-updated values) are aggregated
/// by DEA; the held-out expert provides the consistency target. All expert
/// forwards here use running statistics.
pub fn loss_val(
    tape: &mut Tape,
    model: &AmelModel,
    vars: &ModelVars,
    common: Var,
    batch: &Batch,
    meta_train: &[usize],
    weights: LossWeights,
) -> Result<LossParts> {
    let held_out = expert_index(model, batch)?;
    if meta_train.is_empty() || meta_train.contains(&held_out) {
        return Err(shape_err(
            "loss_val",
            format!("meta-train experts {:?} with held-out {}", meta_train, held_out),
        ));
    }
    let mut feats = Vec::with_capacity(meta_train.len());
    for &k in meta_train {
        let e = model.experts.get(k).ok_or(AmelError::IndexOutOfRange {
            what: "expert",
            index: k,
            len: model.num_experts(),
        })?;
        feats.push(e.forward(tape, &vars.experts[k], common, NormMode::Eval)?.0);
    }
    let agg = dea(tape, common, &feats)?;
    let f = tape.add(common, agg.features)?;
    let (cls, depth) = head_terms(tape, model, &vars.base, f, batch)?;
    let heads = tape.add(cls, depth)?;

    let (own, _) = model.experts[held_out].forward(tape, &vars.experts[held_out], common, NormMode::Eval)?;
    let con = consistency_loss(tape, own, agg.features, weights.consistency_target)?;
    let total = if weights.lambda_con == 0.0 {
        heads
    } else {
        let scaled = tape.scale(con, weights.lambda_con);
        tape.add(heads, scaled)?
    };
    Ok(LossParts {
        total,
        cls,
        depth,
        consistency: Some(con),
    })
}
