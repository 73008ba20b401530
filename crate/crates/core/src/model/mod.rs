//! The network: a shared backbone, one residual expert per source domain,
//! dynamic expert aggregation, a binary classifier and a depth estimator.
//!
//! For an input `x` with common feature `F_c`, the per-domain feature is
//! `F_c + E_k(F_c)`; at inference the residual is replaced by the
//! aggregation of all experts, `F_c + sum_k w_k E_k(F_c)`, with `w` the
//! masked-softmax routing weights.

mod aggregate;
pub mod checkpoint;
mod layers;

pub use aggregate::{aggregate_with, dea, expert_mask, AggregationStrategy, AggregationVars};
pub use layers::{
    BackboneBlock, BatchNorm, BlockNorm, BlockVars, Conv, ConvVars, DepthHead, ExpertBlock,
    ExpertDesign, ExpertVars, Linear, NormVars,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, NormMode, Tape, Var, DEFAULT_NORM_EPS};
use crate::error::{config_err, shape_err, AmelError, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
/// Logit index of the positive (live) class.
pub const LIVE_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_hw: usize,
    pub channels: usize,
    pub num_domains: usize,
    pub depth_map_hw: usize,
    pub backbone_blocks: usize,
    pub expert_design: ExpertDesign,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_hw: 32,
            channels: 32,
            num_domains: 3,
            depth_map_hw: 16,
            backbone_blocks: 3,
            expert_design: ExpertDesign::ConvBnRelu,
        }
    }
}

impl ModelConfig {
    /// 8x8 input, 4 channels, 4x4 depth map: small enough for exhaustive
    /// finite-difference checks.
    pub fn micro(num_domains: usize) -> Self {
        Self {
            input_hw: 8,
            channels: 4,
            num_domains,
            depth_map_hw: 4,
            backbone_blocks: 3,
            expert_design: ExpertDesign::ConvBnRelu,
        }
    }

    /// Spatial size of the backbone feature map.
    pub fn feature_hw(&self) -> usize {
        self.input_hw >> self.backbone_blocks.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_blocks == 0 {
            return Err(config_err("backbone_blocks", "must be >= 1"));
        }
        let down = 1usize << (self.backbone_blocks - 1);
        if self.input_hw == 0 || self.input_hw % down != 0 {
            return Err(config_err(
                "input_hw",
                format!("must be a positive multiple of {}", down),
            ));
        }
        if self.num_domains == 0 {
            return Err(config_err("num_domains", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(config_err("channels", "must be >= 1"));
        }
        let h = self.feature_hw();
        if self.depth_map_hw < h
            || self.depth_map_hw % h != 0
            || !(self.depth_map_hw / h).is_power_of_two()
        {
            return Err(config_err(
                "depth_map_hw",
                format!("must be a power-of-two multiple of the feature size {}", h),
            ));
        }
        Ok(())
    }
}

/// Tape handles for the base parameters (backbone, classifier, depth head).
#[derive(Debug, Clone)]
pub struct BaseVars {
    pub blocks: Vec<BlockVars>,
    pub cls_weight: Var,
    pub cls_bias: Var,
    pub depth1: ConvVars,
    pub depth2: ConvVars,
}

impl BaseVars {
    /// Vars in the order of [`AmelModel::base_params`].
    pub fn list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.conv.push_into(&mut out);
            if let Some(n) = &b.norm {
                out.push(n.gamma);
                out.push(n.beta);
            }
        }
        out.push(self.cls_weight);
        out.push(self.cls_bias);
        self.depth1.push_into(&mut out);
        self.depth2.push_into(&mut out);
        out
    }
}

/// What a backbone forward does with batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsPolicy {
    /// Batch statistics; running statistics are updated.
    Update,
    /// Batch statistics; running statistics are left untouched.
    BatchOnly,
    /// Running statistics.
    Running,
}

impl StatsPolicy {
    fn mode(self) -> NormMode {
        match self {
            StatsPolicy::Update | StatsPolicy::BatchOnly => NormMode::Train,
            StatsPolicy::Running => NormMode::Eval,
        }
    }
}

/// Output of [`AmelModel::aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutput {
    pub features: Tensor,
    pub weights: Tensor,
}

/// Output of an eval-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub logits: Tensor,
    pub depth: Tensor,
    /// Per-sample expert weights `[B, K]`; empty for backbone-only forwards.
    pub weights: Tensor,
    pub common: Tensor,
    /// Residual feature added to `common` before the heads.
    pub residual: Tensor,
}

impl InferenceOutput {
    /// Probability of the live class per sample.
    pub fn live_scores(&self) -> Vec<f64> {
        live_probabilities(&self.logits)
    }
}

pub fn live_probabilities(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|row| {
            let max = row[0].max(row[1]);
            let e0 = (row[0] - max).exp();
            let e1 = (row[1] - max).exp();
            [e0, e1][LIVE_CLASS] / (e0 + e1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmelModel {
    pub config: ModelConfig,
    pub backbone: Vec<BackboneBlock>,
    pub experts: Vec<ExpertBlock>,
    pub classifier: Linear,
    pub depth_head: DepthHead,
}

impl AmelModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let mut backbone = Vec::with_capacity(config.backbone_blocks);
        for i in 0..config.backbone_blocks {
            let (cin, stride, norm) = if i == 0 {
                (IMAGE_CHANNELS, 1, BlockNorm::Instance)
            } else {
                (c, 2, BlockNorm::Batch(BatchNorm::new(c)))
            };
            backbone.push(BackboneBlock {
                conv: Conv::new(cin, c, 3, stride, false, &mut rng),
                norm,
            });
        }
        let experts = (0..config.num_domains)
            .map(|_| ExpertBlock::new(c, config.expert_design, &mut rng))
            .collect();
        let classifier = Linear::new(c, 2, &mut rng);
        let mid = (c / 2).max(1);
        let depth_head = DepthHead {
            conv1: Conv::new(c, mid, 3, 1, true, &mut rng),
            conv2: Conv::new(mid, 1, 3, 1, true, &mut rng),
            upsample_steps: (config.depth_map_hw / config.feature_hw()).trailing_zeros() as usize,
        };
        Ok(Self {
            config,
            backbone,
            experts,
            classifier,
            depth_head,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Shape of the backbone feature for a batch of `b`.
    pub fn feature_shape(&self, b: usize) -> [usize; 4] {
        let h = self.config.feature_hw();
        [b, self.config.channels, h, h]
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let hw = self.config.input_hw;
        match x.shape() {
            [b, c, h, w] if *b > 0 && *c == IMAGE_CHANNELS && *h == hw && *w == hw => Ok(()),
            s => Err(shape_err(
                "model input",
                format!("expected [B,{},{},{}], got {:?}", IMAGE_CHANNELS, hw, hw, s),
            )),
        }
    }

    /// Base parameters: backbone, classifier, depth head, in declaration order.
    pub fn base_params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.backbone.iter().flat_map(|b| b.params()).collect();
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out.extend(self.depth_head.params());
        out
    }

    pub fn base_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .backbone
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out.extend(self.depth_head.params_mut());
        out
    }

    /// Backbone feature-extractor parameters only (no heads).
    pub fn backbone_param_count(&self) -> usize {
        self.backbone
            .iter()
            .flat_map(|b| b.params())
            .map(|p| p.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.base_params().iter().map(|p| p.len()).sum::<usize>()
            + self.experts.iter().map(|e| e.param_count()).sum::<usize>()
    }

    pub fn bind_base(&self, tape: &mut Tape, track: bool) -> BaseVars {
        self.bind_base_with(tape, &mut layers::fresh_leaf(track))
    }

    /// Reuses existing vars, given in [`AmelModel::base_params`] order.
    pub fn base_vars_from(&self, tape: &mut Tape, vars: &[Var]) -> Result<BaseVars> {
        layers::rebind(tape, &self.base_params(), vars, |tape, leaf| {
            self.bind_base_with(tape, leaf)
        })
    }

    fn bind_base_with(&self, tape: &mut Tape, leaf: &mut layers::LeafFn) -> BaseVars {
        BaseVars {
            blocks: self.backbone.iter().map(|b| b.bind_with(tape, leaf)).collect(),
            cls_weight: leaf(tape, &self.classifier.weight),
            cls_bias: leaf(tape, &self.classifier.bias),
            depth1: self.depth_head.conv1.bind_with(tape, leaf),
            depth2: self.depth_head.conv2.bind_with(tape, leaf),
        }
    }

    /// Common feature `F_c` on the tape. With [`StatsPolicy::Update`] the
    /// returned states hold the new running statistics of each BN block, to
    /// be passed to [`AmelModel::commit_backbone_stats`].
    pub fn common_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BaseVars,
        x: Var,
        policy: StatsPolicy,
    ) -> Result<(Var, Vec<BatchNormState>)> {
        let mut h = x;
        let mut updated = Vec::new();
        for (block, bv) in self.backbone.iter().zip(&vars.blocks) {
            h = block.conv.forward(tape, &bv.conv, h)?;
            h = match &block.norm {
                BlockNorm::Instance => tape.instance_norm(h, DEFAULT_NORM_EPS)?,
                BlockNorm::Batch(bn) => {
                    let mut state = bn.state.clone();
                    let nv = bv.norm.as_ref().expect("bound BN");
                    let out = BatchNorm::forward_with(tape, nv, h, &mut state, policy.mode())?;
                    if policy == StatsPolicy::Update {
                        updated.push(state);
                    }
                    out
                }
            };
            h = tape.relu(h);
        }
        Ok((h, updated))
    }

    pub fn commit_backbone_stats(&mut self, states: Vec<BatchNormState>) {
        let mut states = states.into_iter();
        for block in &mut self.backbone {
            if let BlockNorm::Batch(bn) = &mut block.norm {
                if let Some(s) = states.next() {
                    bn.state = s;
                }
            }
        }
    }

    /// Classifier logits `[B,2]` and depth map `[B,1,d,d]` for feature `f`.
    pub fn heads_on_tape(&self, tape: &mut Tape, vars: &BaseVars, f: Var) -> Result<(Var, Var)> {
        let pooled = tape.global_avg_pool(f)?;
        let logits = tape.linear(pooled, vars.cls_weight, vars.cls_bias)?;
        let mut d = self.depth_head.conv1.forward(tape, &vars.depth1, f)?;
        d = tape.relu(d);
        for _ in 0..self.depth_head.upsample_steps {
            d = tape.upsample2x(d)?;
        }
        let depth = self.depth_head.conv2.forward(tape, &vars.depth2, d)?;
        Ok((logits, depth))
    }

    fn expert(&self, k: usize) -> Result<&ExpertBlock> {
        self.experts.get(k).ok_or(AmelError::IndexOutOfRange {
            what: "expert",
            index: k,
            len: self.experts.len(),
        })
    }

    /// Eval-mode common feature `F_c`.
    pub fn forward_common(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind_base(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let (fc, _) = self.common_on_tape(&mut tape, &vars, xv, StatsPolicy::Running)?;
        Ok(tape.value(fc).clone())
    }

    /// Eval-mode residual feature `E_k(F_c)`.
    pub fn forward_expert(&self, k: usize, common: &Tensor) -> Result<Tensor> {
        let expert = self.expert(k)?;
        let expect = self.feature_shape(common.shape().first().copied().unwrap_or(0));
        if common.shape() != expect {
            return Err(shape_err(
                "forward_expert",
                format!("expected {:?}, got {:?}", expect, common.shape()),
            ));
        }
        let mut tape = Tape::new();
        let vars = expert.bind(&mut tape, false);
        let fc = tape.leaf(common.clone(), false);
        let (fk, _) = expert.forward(&mut tape, &vars, fc, NormMode::Eval)?;
        Ok(tape.value(fk).clone())
    }

    /// Masked-softmax aggregation of precomputed expert features.
    pub fn aggregate(&self, common: &Tensor, expert_feats: &[Tensor]) -> Result<AggregationOutput> {
        let mut tape = Tape::new();
        let fc = tape.leaf(common.clone(), false);
        let feats: Vec<Var> = expert_feats
            .iter()
            .map(|f| tape.leaf(f.clone(), false))
            .collect();
        let agg = dea(&mut tape, fc, &feats)?;
        Ok(AggregationOutput {
            features: tape.value(agg.features).clone(),
            weights: agg.weights,
        })
    }

    /// Eval-mode forward using all experts combined with `strategy`.
    pub fn forward_with_strategy(&self, x: &Tensor, strategy: AggregationStrategy) -> Result<InferenceOutput> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let base = self.bind_base(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let (fc, _) = self.common_on_tape(&mut tape, &base, xv, StatsPolicy::Running)?;
        let mut feats = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let ev = e.bind(&mut tape, false);
            feats.push(e.forward(&mut tape, &ev, fc, NormMode::Eval)?.0);
        }
        let agg = aggregate_with(&mut tape, strategy, fc, &feats)?;
        let f = tape.add(fc, agg.features)?;
        let (logits, depth) = self.heads_on_tape(&mut tape, &base, f)?;
        Ok(InferenceOutput {
            logits: tape.value(logits).clone(),
            depth: tape.value(depth).clone(),
            weights: agg.weights,
            common: tape.value(fc).clone(),
            residual: tape.value(agg.features).clone(),
        })
    }

    /// `F_c + DEA(E_1..E_K)` through both heads.
    pub fn forward_inference(&self, x: &Tensor) -> Result<InferenceOutput> {
        self.forward_with_strategy(x, AggregationStrategy::Dea)
    }

    /// `F_c + E_k(F_c)` through both heads.
    pub fn forward_single_expert(&self, x: &Tensor, k: usize) -> Result<InferenceOutput> {
        let expert = self.expert(k)?;
        self.check_input(x)?;
        let mut tape = Tape::new();
        let base = self.bind_base(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let (fc, _) = self.common_on_tape(&mut tape, &base, xv, StatsPolicy::Running)?;
        let ev = expert.bind(&mut tape, false);
        let (fk, _) = expert.forward(&mut tape, &ev, fc, NormMode::Eval)?;
        let f = tape.add(fc, fk)?;
        let (logits, depth) = self.heads_on_tape(&mut tape, &base, f)?;
        let b = x.shape()[0];
        let mut weights = Tensor::zeros(&[b, self.experts.len()]);
        for i in 0..b {
            weights.data_mut()[i * self.experts.len() + k] = 1.0;
        }
        Ok(InferenceOutput {
            logits: tape.value(logits).clone(),
            depth: tape.value(depth).clone(),
            weights,
            common: tape.value(fc).clone(),
            residual: tape.value(fk).clone(),
        })
    }

    /// Heads applied to `F_c` alone.
    pub fn forward_backbone_only(&self, x: &Tensor) -> Result<InferenceOutput> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let base = self.bind_base(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let (fc, _) = self.common_on_tape(&mut tape, &base, xv, StatsPolicy::Running)?;
        let (logits, depth) = self.heads_on_tape(&mut tape, &base, fc)?;
        let common = tape.value(fc).clone();
        Ok(InferenceOutput {
            logits: tape.value(logits).clone(),
            depth: tape.value(depth).clone(),
            weights: Tensor::zeros(&[x.shape()[0], 0]),
            residual: Tensor::zeros(common.shape()),
            common,
        })
    }
}
