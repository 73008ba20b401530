//! Scoring a trained model on a domain, evaluation reports, the two
//! training/evaluation protocols, strategy ablations and feature dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, DomainData, Sample};
use crate::error::{config_err, Result};
use crate::metrics::{self, RocPoint};
use crate::model::{live_probabilities, AggregationStrategy, AmelModel, InferenceOutput, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{self, IterationRecord, TrainConfig, TrainHooks, TrainVariant};

/// Samples per inference chunk. Eval-mode forwards are per-sample, so the
/// chunk size does not change any output.
pub const EVAL_CHUNK: usize = 64;

/// The fixed threshold reported alongside the EER threshold.
pub const FIXED_THRESHOLD: f64 = 0.5;

/// Which forward path produces the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Aggregated(AggregationStrategy),
    SingleExpert(usize),
    BackboneOnly,
}

impl InferenceMode {
    /// Headline path of a trained variant.
    pub fn for_variant(variant: TrainVariant) -> Self {
        match variant {
            TrainVariant::Baseline => InferenceMode::BackboneOnly,
            _ => InferenceMode::Aggregated(AggregationStrategy::Dea),
        }
    }

    pub fn label(self) -> String {
        match self {
            InferenceMode::Aggregated(s) => s.label().to_string(),
            InferenceMode::SingleExpert(k) => format!("expert_{}", k),
            InferenceMode::BackboneOnly => "backbone_only".to_string(),
        }
    }

    pub fn forward(self, model: &AmelModel, x: &Tensor) -> Result<InferenceOutput> {
        match self {
            InferenceMode::Aggregated(s) => model.forward_with_strategy(x, s),
            InferenceMode::SingleExpert(k) => model.forward_single_expert(x, k),
            InferenceMode::BackboneOnly => model.forward_backbone_only(x),
        }
    }
}

fn chunks(domain: &DomainData) -> impl Iterator<Item = Result<Batch>> + '_ {
    domain.samples.chunks(EVAL_CHUNK).map(move |c| {
        let refs: Vec<&Sample> = c.iter().collect();
        Batch::from_samples(domain.spec.domain_id, &refs)
    })
}

/// Live scores, labels and per-sample expert weights over a whole domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainScores {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major `[n, K]`; empty for the backbone-only path.
    pub weights: Vec<f64>,
    pub experts: usize,
}

impl DomainScores {
    pub fn scored(&self) -> Vec<metrics::Scored> {
        metrics::scored(&self.scores, &self.labels)
    }

    /// Column means of the weight matrix.
    pub fn mean_weights(&self) -> Vec<f64> {
        if self.experts == 0 || self.scores.is_empty() {
            return Vec::new();
        }
        let n = self.scores.len() as f64;
        let mut mean = vec![0.0; self.experts];
        for row in self.weights.chunks(self.experts) {
            for (m, w) in mean.iter_mut().zip(row) {
                *m += w / n;
            }
        }
        mean
    }
}

pub fn score_domain(model: &AmelModel, domain: &DomainData, mode: InferenceMode) -> Result<DomainScores> {
    let mut out = DomainScores {
        scores: Vec::with_capacity(domain.len()),
        labels: Vec::with_capacity(domain.len()),
        weights: Vec::new(),
        experts: 0,
    };
    for batch in chunks(domain) {
        let batch = batch?;
        let inf = mode.forward(model, &batch.images)?;
        out.scores.extend(live_probabilities(&inf.logits));
        out.labels.extend_from_slice(&batch.labels);
        out.experts = inf.weights.shape()[1];
        out.weights.extend_from_slice(inf.weights.data());
    }
    Ok(out)
}

/// AUC and HTER of one inference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub auc: f64,
    /// HTER at the path's own EER threshold.
    pub hter: f64,
}

impl StrategyResult {
    pub fn from_scores(s: &DomainScores) -> Result<Self> {
        let scored = s.scored();
        Ok(Self {
            auc: metrics::auc(&scored)?,
            hter: metrics::eer(&scored)?,
        })
    }
}

/// Lightweight evaluation attached to training-log records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub auc: f64,
    pub hter: f64,
}

pub fn snapshot(model: &AmelModel, domain: &DomainData, variant: TrainVariant) -> Result<EvalSnapshot> {
    let r = StrategyResult::from_scores(&score_domain(model, domain, InferenceMode::for_variant(variant))?)?;
    Ok(EvalSnapshot { auc: r.auc, hter: r.hter })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Headline inference path.
    pub mode: String,
    pub roc_points: Vec<RocPoint>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    /// HTER under each threshold policy (`eer_threshold`, `fixed_0.5`).
    pub hter_at: BTreeMap<String, f64>,
    /// Mean DEA weight per expert on the evaluated domain.
    pub mean_expert_weights: Vec<f64>,
    pub per_strategy: BTreeMap<String, StrategyResult>,
}

/// Full report of `model` on `domain`. Aggregation strategies are compared
/// whenever the variant uses experts.
pub fn evaluate(model: &AmelModel, domain: &DomainData, variant: TrainVariant) -> Result<EvalReport> {
    let mode = InferenceMode::for_variant(variant);
    let head = score_domain(model, domain, mode)?;
    let scored = head.scored();
    let eer_threshold = metrics::eer_threshold(&scored)?;
    let mut hter_at = BTreeMap::new();
    hter_at.insert("eer_threshold".to_string(), metrics::hter(&scored, eer_threshold)?);
    hter_at.insert(format!("fixed_{}", FIXED_THRESHOLD), metrics::hter(&scored, FIXED_THRESHOLD)?);
    let per_strategy = if variant.uses_experts() {
        ablate_aggregation(model, domain)?
    } else {
        BTreeMap::from([(mode.label(), StrategyResult::from_scores(&head)?)])
    };
    let mean_expert_weights = if variant.uses_experts() {
        head.mean_weights()
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        mode: mode.label(),
        roc_points: metrics::roc(&scored)?,
        auc: metrics::auc(&scored)?,
        eer: hter_at["eer_threshold"],
        eer_threshold,
        hter_at,
        mean_expert_weights,
        per_strategy,
    })
}

/// Every aggregation strategy on `domain`.
pub fn ablate_aggregation(model: &AmelModel, domain: &DomainData) -> Result<BTreeMap<String, StrategyResult>> {
    let mut out = BTreeMap::new();
    for s in AggregationStrategy::ALL {
        let mode = InferenceMode::Aggregated(s);
        out.insert(mode.label(), StrategyResult::from_scores(&score_domain(model, domain, mode)?)?);
    }
    Ok(out)
}

/// One row per single-expert path, then the aggregated path.
pub fn ablate_inference(model: &AmelModel, domain: &DomainData) -> Result<Vec<(String, StrategyResult)>> {
    let mut modes: Vec<InferenceMode> = (0..model.num_experts()).map(InferenceMode::SingleExpert).collect();
    modes.push(InferenceMode::Aggregated(AggregationStrategy::Dea));
    modes
        .into_iter()
        .map(|m| {
            let label = match m {
                InferenceMode::SingleExpert(k) => format!("common+expert_{}", k),
                _ => "common+aggregated".to_string(),
            };
            Ok((label, StrategyResult::from_scores(&score_domain(model, domain, m)?)?))
        })
        .collect()
}

fn pooled(t: &Tensor, i: usize) -> Vec<f64> {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    let row = &t.data()[i * c * hw..(i + 1) * c * hw];
    row.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect()
}

/// CSV rows of `domain_id,label`, pooled common feature, pooled aggregated
/// feature and DEA weights, one per sample, with a header line.
pub fn feature_table(model: &AmelModel, domains: &[&DomainData]) -> Result<String> {
    let c = model.config.channels;
    let k = model.num_experts();
    let mut header = vec!["domain_id".to_string(), "label".to_string()];
    header.extend((0..c).map(|i| format!("common_{}", i)));
    header.extend((0..c).map(|i| format!("aggregated_{}", i)));
    header.extend((0..k).map(|i| format!("weight_{}", i)));
    let mut out = header.join(",");
    out.push('\n');
    for d in domains {
        for batch in chunks(d) {
            let batch = batch?;
            let inf = model.forward_inference(&batch.images)?;
            for i in 0..batch.len() {
                let mut fields = vec![d.spec.domain_id.to_string(), batch.labels[i].to_string()];
                let values = pooled(&inf.common, i)
                    .into_iter()
                    .chain(pooled(&inf.residual, i))
                    .chain(inf.weights.data()[i * k..(i + 1) * k].iter().copied());
                fields.extend(values.map(|v| format!("{:e}", v)));
                let _ = writeln!(out, "{}", fields.join(","));
            }
        }
    }
    Ok(out)
}

pub fn dump_features(model: &AmelModel, domains: &[&DomainData], path: &Path) -> Result<()> {
    fs::write(path, feature_table(model, domains)?)?;
    Ok(())
}

/// ROC points as CSV with a header line.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        let _ = writeln!(out, "{:e},{:e},{:e}", p.threshold, p.far, p.frr);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train on every domain but one, test on the one left out.
    #[default]
    Loo,
    /// Train on two domains, test on each remaining one.
    Limited,
}

/// Domains trained on and the domain tested on, as dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: usize,
}

/// Folds over a dataset of `n` domains. With `target` set only folds testing
/// on it are produced.
pub fn folds(n: usize, protocol: Protocol, target: Option<usize>) -> Result<Vec<Fold>> {
    if let Some(t) = target {
        if t >= n {
            return Err(config_err("target_domain", format!("{} out of range for {} domains", t, n)));
        }
    }
    let tests: Vec<usize> = match target {
        Some(t) => vec![t],
        None => match protocol {
            Protocol::Loo => (0..n).collect(),
            Protocol::Limited => (2..n).collect(),
        },
    };
    let mut out = Vec::new();
    for test in tests {
        let mut train: Vec<usize> = (0..n).filter(|&d| d != test).collect();
        if protocol == Protocol::Limited {
            train.truncate(2);
        }
        if train.len() < 2 {
            return Err(config_err("protocol", format!("fold testing {} has fewer than 2 training domains", test)));
        }
        out.push(Fold { train, test });
    }
    if out.is_empty() {
        return Err(config_err("protocol", format!("no folds for {} domains", n)));
    }
    Ok(out)
}

/// A trained fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: Fold,
    pub model: AmelModel,
    pub records: Vec<IterationRecord>,
    pub report: EvalReport,
}

/// Trains a fresh model per fold (model seed = training seed) and evaluates
/// it on the fold's test domain. The model's domain count is set from the fold.
pub fn run_protocol(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    protocol: Protocol,
    target: Option<usize>,
) -> Result<Vec<FoldOutcome>> {
    let target = target.or(dataset.target);
    folds(dataset.domains.len(), protocol, target)?
        .into_iter()
        .map(|fold| {
            let (model, records) = train_fold(dataset, model_config, train_config, &fold, TrainHooks::default())?;
            let report = evaluate(&model, &dataset.domains[fold.test], train_config.variant)?;
            Ok(FoldOutcome {
                fold,
                model,
                records,
                report,
            })
        })
        .collect()
}

pub fn train_fold(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    fold: &Fold,
    hooks: TrainHooks<'_>,
) -> Result<(AmelModel, Vec<IterationRecord>)> {
    let mut config = model_config.clone();
    config.num_domains = fold.train.len();
    let mut model = AmelModel::new(config, train_config.seed)?;
    let sources: Vec<&DomainData> = fold.train.iter().map(|&d| &dataset.domains[d]).collect();
    let records = trainer::train(&mut model, &sources, train_config, hooks)?;
    Ok((model, records))
}
