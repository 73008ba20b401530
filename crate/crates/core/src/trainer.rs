//! Episodic training loop.
//!
//! Each iteration draws `B` samples from every source domain, then runs
//! normal train on the base parameters, meta-train on the experts of the
//! meta-train domains, meta-test on the held-out domain at the
//! inner-updated expert values, and finally the outer expert update.
//! Meta-gradients are first order.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{Batch, DomainData};
use crate::error::{config_err, shape_err, AmelError, Result};
use crate::eval::{self, EvalSnapshot};
use crate::losses::{self, ConsistencyTarget, LossValues, LossWeights, ModelVars};
use crate::model::{checkpoint, AmelModel, StatsPolicy};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

/// Which parts of the method are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Backbone and heads only; experts are never used.
    Baseline,
    /// Experts trained on their own domain, no episodes.
    Experts,
    /// Experts trained episodically with the meta-test loss.
    #[default]
    Full,
}

impl TrainVariant {
    pub fn uses_experts(self) -> bool {
        self != TrainVariant::Baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the base update and of the inner expert step.
    pub beta: f64,
    /// Learning rate of the outer expert update.
    pub gamma: f64,
    pub loss: LossWeights,
    pub batch_per_domain: usize,
    pub max_epochs: usize,
    /// Iterations per epoch.
    pub max_iters: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub first_order: bool,
    pub variant: TrainVariant,
    /// Iterations between evaluation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Iterations between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            gamma: 1e-4,
            loss: LossWeights::default(),
            batch_per_domain: 8,
            max_epochs: 1,
            max_iters: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            first_order: true,
            variant: TrainVariant::Full,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_domains: usize) -> Result<()> {
        for (name, lr) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err(name, format!("must be finite and > 0, got {}", lr)));
            }
        }
        self.validate_structure(num_domains)
    }

    /// Everything except the learning-rate range.
    fn validate_structure(&self, num_domains: usize) -> Result<()> {
        self.loss.validate()?;
        if self.batch_per_domain < 2 {
            return Err(config_err("batch_per_domain", "must be >= 2 for batch statistics"));
        }
        if self.max_epochs == 0 || self.max_iters == 0 {
            return Err(config_err("max_iters", "max_epochs and max_iters must be >= 1"));
        }
        if !self.first_order {
            return Err(config_err("first_order", "second-order meta-gradients are not implemented"));
        }
        if self.variant == TrainVariant::Full && num_domains < 2 {
            return Err(config_err(
                "num_domains",
                format!("meta-learning needs >= 2 source domains, got {}", num_domains),
            ));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.max_epochs * self.max_iters
    }
}

/// Meta-train/meta-test split of the source domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: usize,
}

/// Holds out one of `k` domains uniformly at random.
pub fn split_episode<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<EpisodeSplit> {
    if k < 2 {
        return Err(config_err("num_domains", format!("an episode needs >= 2 domains, got {}", k)));
    }
    let meta_test = rng.gen_range(0..k);
    Ok(EpisodeSplit {
        meta_train: (0..k).filter(|&d| d != meta_test).collect(),
        meta_test,
    })
}

/// One batch per source domain; `batches[d].domain == d`.
pub fn sample_batches<R: Rng + ?Sized>(sources: &[&DomainData], b: usize, rng: &mut R) -> Result<Vec<Batch>> {
    sources
        .iter()
        .enumerate()
        .map(|(d, data)| data.sample_batch(d, b, rng))
        .collect()
}

/// Parameters of every expert, expert by expert, in `ExpertBlock::params` order.
pub fn expert_params(model: &AmelModel) -> Vec<&Tensor> {
    model.experts.iter().flat_map(|e| e.params()).collect()
}

pub fn expert_params_mut(model: &mut AmelModel) -> Vec<&mut Tensor> {
    model.experts.iter_mut().flat_map(|e| e.params_mut()).collect()
}

/// Start of each expert's slots in the flat expert parameter list.
fn expert_offsets(model: &AmelModel) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(model.num_experts() + 1);
    let mut n = 0;
    for e in &model.experts {
        offsets.push(n);
        n += e.params().len();
    }
    offsets.push(n);
    offsets
}

/// `theta - beta * g` per tensor; a missing gradient leaves the tensor as is.
pub fn inner_step(theta: &[Tensor], grads: &[Option<Tensor>], beta: f64) -> Result<Vec<Tensor>> {
    if theta.len() != grads.len() {
        return Err(shape_err(
            "inner_step",
            format!("{} tensors, {} gradients", theta.len(), grads.len()),
        ));
    }
    theta
        .iter()
        .zip(grads)
        .map(|(t, g)| match g {
            None => Ok(t.clone()),
            Some(g) => t.zip_map(g, |w, gw| w - beta * gw),
        })
        .collect()
}

pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

fn collect(grads: &Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.get(v).cloned()).collect()
}

fn check_finite(v: &LossValues, phase: &str, iteration: usize) -> Result<()> {
    if v.total.is_finite() {
        Ok(())
    } else {
        Err(AmelError::NonFinite(format!(
            "{} = {} at iteration {}",
            phase, v.total, iteration
        )))
    }
}

/// Backbone features of each batch with batch statistics, as constants.
pub fn detached_common(model: &AmelModel, batches: &[Batch]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let base = model.bind_base(&mut tape, false);
    let (vars, _) = losses::common_by_batch(&mut tape, model, &base, batches, StatsPolicy::BatchOnly)?;
    Ok(vars.iter().map(|&v| tape.value(v).clone()).collect())
}

#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub loss: LossValues,
    pub grads: Vec<Option<Tensor>>,
}

/// Result of the meta-train step.
#[derive(Debug, Clone)]
pub struct MetaTrain {
    pub loss: LossValues,
    /// `dL_trn/dtheta_E`, one slot per expert parameter (flat).
    pub g_trn: Vec<Option<Tensor>>,
    /// Inner-updated values of every expert parameter (flat); experts
    /// outside the meta-train set keep their current values.
    pub fast: Vec<Tensor>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub meta_test_domain: Option<usize>,
    pub loss_b: LossValues,
    pub loss_trn: Option<LossValues>,
    pub loss_val: Option<LossValues>,
    pub grad_norm_b: f64,
    pub grad_norm_trn: Option<f64>,
    pub grad_norm_val: Option<f64>,
    /// Milliseconds since training started.
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

/// Optimizer state and sampling stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub opt_base: OptimizerState,
    pub opt_experts: OptimizerState,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    /// Learning rates are only required to be >= 0 here; [`train`] enforces
    /// the strict range.
    pub fn new(model: &AmelModel, config: TrainConfig) -> Result<Self> {
        config.validate_structure(model.num_experts())?;
        let opt_base = OptimizerState::new(config.optimizer, config.beta, &model.base_params())?;
        let opt_experts = OptimizerState::new(config.optimizer, config.gamma, &expert_params(model))?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            opt_base,
            opt_experts,
            rng,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One optimizer step on the base parameters from `L_B`. Expert
    /// parameters are constants; running statistics of the backbone and of
    /// each expert on its own domain are committed.
    pub fn normal_train_step(&mut self, model: &mut AmelModel, batches: &[Batch]) -> Result<PhaseOutput> {
        let use_experts = self.config.variant.uses_experts();
        let mut tape = Tape::new();
        let vars = ModelVars::bind(model, &mut tape, true, &[]);
        let out = losses::loss_b(&mut tape, model, &vars, batches, StatsPolicy::Update, use_experts)?;
        let loss = out.parts.values(&tape);
        check_finite(&loss, "loss_b", self.iteration)?;
        let grads = collect(&tape.backward(out.parts.total)?, &vars.base.list());
        self.opt_base.step(model.base_params_mut(), &grads)?;
        model.commit_backbone_stats(out.backbone_stats);
        for (k, st) in out.expert_stats {
            model.experts[k].commit_stats(st);
        }
        Ok(PhaseOutput { loss, grads })
    }

    /// `L_trn` over `batches` (each through its own expert) and the inner
    /// update. Expert parameters of `model` are not changed; running
    /// statistics of the participating experts are committed.
    pub fn meta_train_step(&self, model: &mut AmelModel, common: &[Tensor], batches: &[Batch]) -> Result<MetaTrain> {
        let domains: Vec<usize> = batches.iter().map(|b| b.domain).collect();
        let mut track = vec![false; model.num_experts()];
        for &d in &domains {
            *track.get_mut(d).ok_or(AmelError::IndexOutOfRange {
                what: "batch domain",
                index: d,
                len: model.num_experts(),
            })? = true;
        }
        let mut tape = Tape::new();
        let vars = ModelVars::bind(model, &mut tape, false, &track);
        let fc: Vec<Var> = common.iter().map(|c| tape.leaf(c.clone(), false)).collect();
        let (parts, stats) = losses::loss_trn(&mut tape, model, &vars, &fc, batches)?;
        let loss = parts.values(&tape);
        check_finite(&loss, "loss_trn", self.iteration)?;
        let expert_vars: Vec<Var> = vars.experts.iter().flat_map(|e| e.list()).collect();
        let g_trn = collect(&tape.backward(parts.total)?, &expert_vars);
        let theta: Vec<Tensor> = expert_params(model).into_iter().cloned().collect();
        let fast = inner_step(&theta, &g_trn, self.config.beta)?;
        for (k, st) in stats {
            model.experts[k].commit_stats(st);
        }
        Ok(MetaTrain { loss, g_trn, fast })
    }

    /// `L_val` on the held-out batch with the meta-train experts at `fast`.
    /// Gradients are taken with respect to the fast values (first order).
    /// The held-out expert is tracked only when the consistency loss moves it.
    pub fn meta_test_step(
        &self,
        model: &AmelModel,
        fast: &[Tensor],
        common: &Tensor,
        batch: &Batch,
        meta_train: &[usize],
    ) -> Result<PhaseOutput> {
        let offsets = expert_offsets(model);
        if fast.len() != *offsets.last().expect("non-empty") {
            return Err(shape_err(
                "meta_test_step",
                format!("{} fast tensors for {} expert parameters", fast.len(), offsets.last().unwrap()),
            ));
        }
        let weights = self.config.loss;
        let mut tape = Tape::new();
        let mut vars = ModelVars::bind(model, &mut tape, false, &[]);
        let mut tracked: Vec<usize> = meta_train.to_vec();
        if weights.consistency_target == ConsistencyTarget::AggregatedFeature && weights.lambda_con != 0.0 {
            tracked.push(batch.domain);
        }
        for &k in &tracked {
            let values: &[Tensor] = if meta_train.contains(&k) {
                &fast[offsets[k]..offsets[k + 1]]
            } else {
                &[]
            };
            let leaves: Vec<Var> = if values.is_empty() {
                model.experts[k].params().into_iter().map(|p| tape.leaf(p.clone(), true)).collect()
            } else {
                values.iter().map(|p| tape.leaf(p.clone(), true)).collect()
            };
            vars.experts[k] = model.experts[k].vars_from(&mut tape, &leaves)?;
        }
        let fc = tape.leaf(common.clone(), false);
        let parts = losses::loss_val(&mut tape, model, &vars, fc, batch, meta_train, weights)?;
        let loss = parts.values(&tape);
        check_finite(&loss, "loss_val", self.iteration)?;
        let expert_vars: Vec<Var> = vars.experts.iter().flat_map(|e| e.list()).collect();
        let grads = collect(&tape.backward(parts.total)?, &expert_vars);
        Ok(PhaseOutput { loss, grads })
    }

    /// Outer expert update from `g_trn + g_val`, starting from the current
    /// (pre-inner-step) expert parameters. Slots with no gradient are skipped.
    pub fn meta_optimize(
        &mut self,
        model: &mut AmelModel,
        g_trn: &[Option<Tensor>],
        g_val: &[Option<Tensor>],
    ) -> Result<()> {
        if g_trn.len() != g_val.len() {
            return Err(shape_err(
                "meta_optimize",
                format!("{} and {} gradient slots", g_trn.len(), g_val.len()),
            ));
        }
        let total: Vec<Option<Tensor>> = g_trn
            .iter()
            .zip(g_val)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    let mut s = a.clone();
                    s.axpy(1.0, b);
                    Some(s)
                }
                (Some(g), None) | (None, Some(g)) => Some(g.clone()),
                (None, None) => None,
            })
            .collect();
        self.opt_experts.step(expert_params_mut(model), &total)
    }

    /// Experts trained on their own domains with no episode.
    fn expert_train_step(&mut self, model: &mut AmelModel, common: &[Tensor], batches: &[Batch]) -> Result<MetaTrain> {
        let out = self.meta_train_step(model, common, batches)?;
        let none = vec![None; out.g_trn.len()];
        self.meta_optimize(model, &out.g_trn, &none)?;
        Ok(out)
    }

    /// Samples a batch per domain and runs one full iteration.
    pub fn step(&mut self, model: &mut AmelModel, sources: &[&DomainData], epoch: usize) -> Result<IterationRecord> {
        if sources.len() != model.num_experts() {
            return Err(shape_err(
                "train",
                format!("{} source domains for {} experts", sources.len(), model.num_experts()),
            ));
        }
        let split = match self.config.variant {
            TrainVariant::Full => Some(split_episode(sources.len(), &mut self.rng)?),
            _ => None,
        };
        let batches = sample_batches(sources, self.config.batch_per_domain, &mut self.rng)?;
        let normal = self.normal_train_step(model, &batches)?;
        let mut record = IterationRecord {
            epoch,
            iteration: self.iteration,
            meta_test_domain: split.as_ref().map(|s| s.meta_test),
            loss_b: normal.loss,
            loss_trn: None,
            loss_val: None,
            grad_norm_b: grad_norm(&normal.grads),
            grad_norm_trn: None,
            grad_norm_val: None,
            wall_ms: 0.0,
            eval: None,
        };
        match (self.config.variant, split) {
            (TrainVariant::Full, Some(split)) => {
                let common = detached_common(model, &batches)?;
                let trn_batches: Vec<Batch> = split.meta_train.iter().map(|&d| batches[d].clone()).collect();
                let trn_common: Vec<Tensor> = split.meta_train.iter().map(|&d| common[d].clone()).collect();
                let mt = self.meta_train_step(model, &trn_common, &trn_batches)?;
                let val = self.meta_test_step(
                    model,
                    &mt.fast,
                    &common[split.meta_test],
                    &batches[split.meta_test],
                    &split.meta_train,
                )?;
                self.meta_optimize(model, &mt.g_trn, &val.grads)?;
                record.loss_trn = Some(mt.loss);
                record.loss_val = Some(val.loss);
                record.grad_norm_trn = Some(grad_norm(&mt.g_trn));
                record.grad_norm_val = Some(grad_norm(&val.grads));
            }
            (TrainVariant::Experts, _) => {
                let common = detached_common(model, &batches)?;
                let out = self.expert_train_step(model, &common, &batches)?;
                record.loss_trn = Some(out.loss);
                record.grad_norm_trn = Some(grad_norm(&out.g_trn));
            }
            _ => {}
        }
        self.iteration += 1;
        Ok(record)
    }
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one JSON record per iteration.
    pub log: Option<&'a mut dyn Write>,
    /// Checkpoint path, written every `checkpoint_every` iterations and at the end.
    pub checkpoint: Option<&'a Path>,
    /// Domain scored for the periodic evaluation snapshots.
    pub eval_domain: Option<&'a DomainData>,
}

/// Runs `max_epochs * max_iters` iterations on `sources` (domain `d` feeds
/// expert `d`) and returns the per-iteration records.
pub fn train(
    model: &mut AmelModel,
    sources: &[&DomainData],
    config: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<Vec<IterationRecord>> {
    config.validate(model.num_experts())?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(config.total_iters());
    for epoch in 0..config.max_epochs {
        for _ in 0..config.max_iters {
            let mut record = trainer.step(model, sources, epoch)?;
            let done = trainer.iteration();
            if let Some(domain) = hooks.eval_domain {
                if config.eval_every > 0 && done % config.eval_every == 0 {
                    record.eval = Some(eval::snapshot(model, domain, config.variant)?);
                }
            }
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(log) = hooks.log.as_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(log, "{}", line)?;
            }
            if let Some(path) = hooks.checkpoint {
                if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                    checkpoint::save(model, path)?;
                }
            }
            records.push(record);
        }
    }
    if let Some(path) = hooks.checkpoint {
        checkpoint::save(model, path)?;
    }
    Ok(records)
}
