//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{default_source_spec, Batch, DomainData, Geometry};
use crate::error::{config_err, shape_err, AmelError, Result};
use crate::losses::{self, LossWeights, ModelVars};
use crate::model::{AmelModel, ModelConfig, StatsPolicy};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Result of comparing tape gradients with central differences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(AmelError::NonScalarLoss {
            shape: value.shape().to_vec(),
        });
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(AmelError::NonFinite(format!("objective evaluated to {}", v)));
    }
    Ok(v)
}

/// Tape gradient of `f` at `params`, one tensor per param.
pub fn tape_gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(AmelError::NonFinite(format!("objective evaluated to {}", value)));
    }
    let grads = tape.backward(out)?;
    let g = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((value, g))
}

/// Compares the tape gradient of `f` with central differences of step
/// `step`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a scalar node. It is called `2 * n + 1` times for `n` coordinates,
/// so it must be deterministic.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AmelError::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {}", step),
        });
    }
    let (_, analytic) = tape_gradient(&f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut coordinates = 0;
    for p in 0..params.len() {
        let mut worst: f64 = 0.0;
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
            coordinates += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        coordinates,
    })
}

/// Gradient checks of the three phase losses on one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseGradCheck {
    /// `L_B` with respect to the base parameters.
    pub loss_b: GradCheckReport,
    /// `L_trn` with respect to the meta-train experts.
    pub loss_trn: GradCheckReport,
    /// `L_val` with respect to the meta-train experts it aggregates.
    pub loss_val: GradCheckReport,
    pub parameters: usize,
}

impl PhaseGradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.loss_b
            .max_rel_error
            .max(self.loss_trn.max_rel_error)
            .max(self.loss_val.max_rel_error)
    }
}

/// Binds the given experts from `vars` (consumed in order) and every other
/// expert as an untracked constant.
fn bind_selected(model: &AmelModel, tape: &mut Tape, selected: &[usize], vars: &[Var]) -> Result<ModelVars> {
    let mut mv = ModelVars::bind(model, tape, false, &[]);
    let mut offset = 0;
    for &k in selected {
        let n = model.experts[k].params().len();
        mv.experts[k] = model.experts[k].vars_from(tape, &vars[offset..offset + n])?;
        offset += n;
    }
    Ok(mv)
}

/// Checks `L_B`, `L_trn` and `L_val` gradients with batches holding one
/// batch per domain, `held_out` naming the meta-test domain. Batch-norm
/// statistics are read but never written.
pub fn check_phase_gradients(
    model: &AmelModel,
    batches: &[Batch],
    held_out: usize,
    weights: LossWeights,
    step: f64,
) -> Result<PhaseGradCheck> {
    let val_batch = batches
        .iter()
        .find(|b| b.domain == held_out)
        .ok_or_else(|| shape_err("check_phase_gradients", format!("no batch for domain {}", held_out)))?;
    let trn_batches: Vec<Batch> = batches.iter().filter(|b| b.domain != held_out).cloned().collect();
    let meta_train: Vec<usize> = trn_batches.iter().map(|b| b.domain).collect();

    let base: Vec<Tensor> = model.base_params().into_iter().cloned().collect();
    let loss_b = finite_difference_check(
        |tape, vars| {
            let mut mv = ModelVars::bind(model, tape, false, &[]);
            mv.base = model.base_vars_from(tape, vars)?;
            let out = losses::loss_b(tape, model, &mv, batches, StatsPolicy::BatchOnly, true)?;
            Ok(out.parts.total)
        },
        &base,
        step,
    )?;

    // meta phases see the backbone as a constant
    let common: Vec<Tensor> = {
        let mut tape = Tape::new();
        let bv = model.bind_base(&mut tape, false);
        let (vars, _) = losses::common_by_batch(&mut tape, model, &bv, batches, StatsPolicy::BatchOnly)?;
        vars.iter().map(|&v| tape.value(v).clone()).collect()
    };
    let common_of = |domain: usize| -> &Tensor {
        let i = batches.iter().position(|b| b.domain == domain).expect("present");
        &common[i]
    };

    let expert_params: Vec<Tensor> = meta_train
        .iter()
        .flat_map(|&k| model.experts[k].params().into_iter().cloned())
        .collect();
    let loss_trn = finite_difference_check(
        |tape, vars| {
            let mv = bind_selected(model, tape, &meta_train, vars)?;
            let fc: Vec<Var> = meta_train.iter().map(|&k| tape.leaf(common_of(k).clone(), false)).collect();
            Ok(losses::loss_trn(tape, model, &mv, &fc, &trn_batches)?.0.total)
        },
        &expert_params,
        step,
    )?;
    let loss_val = finite_difference_check(
        |tape, vars| {
            let mv = bind_selected(model, tape, &meta_train, vars)?;
            let fc = tape.leaf(common_of(held_out).clone(), false);
            Ok(losses::loss_val(tape, model, &mv, fc, val_batch, &meta_train, weights)?.total)
        },
        &expert_params,
        step,
    )?;
    Ok(PhaseGradCheck {
        parameters: model.param_count(),
        loss_b,
        loss_trn,
        loss_val,
    })
}

/// Settings of the micro-model phase gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub num_domains: usize,
    pub batch_per_domain: usize,
    pub held_out: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            num_domains: 3,
            batch_per_domain: 2,
            held_out: 1,
            step: DEFAULT_FD_STEP,
            tolerance: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(config_err("gradcheck.num_domains", "must be >= 2"));
        }
        if self.batch_per_domain < 2 {
            return Err(config_err("gradcheck.batch_per_domain", "must be >= 2"));
        }
        if self.held_out >= self.num_domains {
            return Err(config_err(
                "gradcheck.held_out",
                format!("{} is not a domain index (< {})", self.held_out, self.num_domains),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(config_err("gradcheck.step", "must be finite and > 0"));
        }
        self.loss.validate()
    }
}

/// Micro model with non-trivial expert running statistics and one batch
/// per domain of 8x8 synthetic data.
pub fn micro_fixture(num_domains: usize, b: usize, seed: u64) -> Result<(AmelModel, Vec<Batch>)> {
    let mut model = AmelModel::new(ModelConfig::micro(num_domains), seed)?;
    // eval-mode expert forwards should not see the (0, 1) seed statistics
    for (i, e) in model.experts.iter_mut().enumerate() {
        if let Some(bn) = e.bn.as_mut() {
            bn.state.running_mean.iter_mut().for_each(|v| *v = 0.1 * i as f64);
            bn.state.running_var.iter_mut().for_each(|v| *v = 0.5 + 0.2 * i as f64);
        }
    }
    let g = Geometry {
        image_hw: 8,
        depth_hw: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batches = (0..num_domains)
        .map(|d| DomainData::generate(default_source_spec(d, seed), b, b, g).sample_batch(d, b, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, batches))
}

/// Runs the phase gradient check on the micro fixture.
pub fn run_micro_check(config: &GradCheckConfig) -> Result<PhaseGradCheck> {
    config.validate()?;
    let (model, batches) = micro_fixture(config.num_domains, config.batch_per_domain, config.seed)?;
    check_phase_gradients(&model, &batches, config.held_out, config.loss, config.step)
}
