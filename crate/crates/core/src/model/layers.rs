use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, NormMode, Tape, Var, DEFAULT_NORM_EPS};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Produces the tape var standing for one parameter tensor.
pub(crate) type LeafFn<'a> = dyn FnMut(&mut Tape, &Tensor) -> Var + 'a;

pub(crate) fn fresh_leaf(track: bool) -> impl FnMut(&mut Tape, &Tensor) -> Var {
    move |tape, value| tape.leaf(value.clone(), track)
}

/// Binds with `vars` standing in for `params`, checking count and shapes.
pub(crate) fn rebind<T>(
    tape: &mut Tape,
    params: &[&Tensor],
    vars: &[Var],
    bind: impl FnOnce(&mut Tape, &mut LeafFn) -> T,
) -> Result<T> {
    if params.len() != vars.len() {
        return Err(shape_err(
            "rebind",
            format!("{} vars for {} parameters", vars.len(), params.len()),
        ));
    }
    for (i, (p, &v)) in params.iter().zip(vars).enumerate() {
        if tape.shape(v) != p.shape() {
            return Err(shape_err(
                "rebind",
                format!("var {} has shape {:?}, parameter {:?}", i, tape.shape(v), p.shape()),
            ));
        }
    }
    let mut it = vars.iter().copied();
    Ok(bind(tape, &mut |_, _| it.next().expect("count checked")))
}

/// Uniform fan-in initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = he_uniform(&[cout, cin, kernel, kernel], fan_in, rng);
        let bias = with_bias.then(|| Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.weight.shape()[2] / 2
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> ConvVars {
        self.bind_with(tape, &mut fresh_leaf(track))
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, leaf: &mut LeafFn) -> ConvVars {
        let weight = leaf(tape, &self.weight);
        let bias = match &self.bias {
            Some(b) => leaf(tape, b),
            // absent bias is a constant zero
            None => tape.leaf(Tensor::zeros(&[self.out_channels()]), false),
        };
        ConvVars {
            weight,
            bias,
            has_bias: self.bias.is_some(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ConvVars, x: Var) -> Result<Var> {
        tape.conv2d(x, vars.weight, vars.bias, self.stride, self.padding())
    }

    /// Same convolution with the bias replaced by zeros.
    pub fn forward_without_bias(&self, tape: &mut Tape, vars: &ConvVars, x: Var) -> Result<Var> {
        let zero = tape.leaf(Tensor::zeros(&[self.out_channels()]), false);
        tape.conv2d(x, vars.weight, zero, self.stride, self.padding())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    has_bias: bool,
}

impl ConvVars {
    pub(crate) fn push_into(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        if self.has_bias {
            out.push(self.bias);
        }
    }
}

/// Batch-norm layer: learned affine plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNorm {
    /// Affine at identity; running statistics seeded to zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        let mut state = BatchNormState::new(channels);
        state.mark_seeded();
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            state,
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> NormVars {
        self.bind_with(tape, &mut fresh_leaf(track))
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, leaf: &mut LeafFn) -> NormVars {
        let gamma = leaf(tape, &self.gamma);
        NormVars {
            gamma,
            beta: leaf(tape, &self.beta),
        }
    }

    /// Train mode writes running statistics into `state`, which callers may
    /// point at a scratch copy to keep the layer's own statistics frozen.
    pub fn forward_with(
        tape: &mut Tape,
        vars: &NormVars,
        x: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        tape.batch_norm(x, vars.gamma, vars.beta, state, mode)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

/// Arrangement of the layers inside one expert block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertDesign {
    #[default]
    ConvBnRelu,
    InConvRelu,
    BnConvRelu,
    ConvInRelu,
}

impl ExpertDesign {
    pub const ALL: [ExpertDesign; 4] = [
        ExpertDesign::InConvRelu,
        ExpertDesign::BnConvRelu,
        ExpertDesign::ConvInRelu,
        ExpertDesign::ConvBnRelu,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ExpertDesign::ConvBnRelu => "Conv+BN+Relu",
            ExpertDesign::InConvRelu => "IN+Conv+Relu",
            ExpertDesign::BnConvRelu => "BN+Conv+Relu",
            ExpertDesign::ConvInRelu => "Conv+IN+Relu",
        }
    }

    fn has_bn(self) -> bool {
        matches!(self, ExpertDesign::ConvBnRelu | ExpertDesign::BnConvRelu)
    }
}

/// One domain expert: a lightweight residual branch `[C,h,w] -> [C,h,w]`
/// built from a 1x1 convolution, a normalization layer and a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBlock {
    pub design: ExpertDesign,
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
}

impl ExpertBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, design: ExpertDesign, rng: &mut R) -> Self {
        Self {
            design,
            conv: Conv::new(channels, channels, 1, 1, true, rng),
            bn: design.has_bn().then(|| BatchNorm::new(channels)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters in declaration order: conv weight, conv bias, BN gamma, BN beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.conv.params();
        if let Some(bn) = &self.bn {
            out.extend(bn.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv.params_mut();
        if let Some(bn) = &mut self.bn {
            out.extend(bn.params_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> ExpertVars {
        self.bind_with(tape, &mut fresh_leaf(track))
    }

    /// Reuses existing vars, given in [`ExpertBlock::params`] order.
    pub fn vars_from(&self, tape: &mut Tape, vars: &[Var]) -> Result<ExpertVars> {
        rebind(tape, &self.params(), vars, |tape, leaf| self.bind_with(tape, leaf))
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, leaf: &mut LeafFn) -> ExpertVars {
        ExpertVars {
            conv: self.conv.bind_with(tape, leaf),
            norm: self.bn.as_ref().map(|bn| bn.bind_with(tape, leaf)),
        }
    }

    /// Computes the residual feature. In train mode the BN layer normalizes
    /// with batch statistics and the updated running statistics are
    /// returned for the caller to commit; eval mode reads them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ExpertVars,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchNormState>)> {
        let mut state = self.bn.as_ref().map(|bn| bn.state.clone());
        let mut bn_step = |tape: &mut Tape, h: Var| -> Result<Var> {
            let st = state.as_mut().expect("design has BN");
            let nv = vars.norm.as_ref().expect("bound BN");
            BatchNorm::forward_with(tape, nv, h, st, mode)
        };
        let conv = &self.conv;
        let h = match self.design {
            // A bias ahead of batch statistics cancels exactly, so it is left
            // out of the graph and enters only through the running mean.
            ExpertDesign::ConvBnRelu if mode == NormMode::Train => {
                let h = conv.forward_without_bias(tape, &vars.conv, x)?;
                let out = bn_step(tape, h)?;
                let st = state.as_mut().expect("design has BN");
                let keep = 1.0 - st.momentum;
                for (r, b) in st.running_mean.iter_mut().zip(tape.value(vars.conv.bias).data()) {
                    *r += keep * b;
                }
                out
            }
            ExpertDesign::ConvBnRelu => {
                let h = conv.forward(tape, &vars.conv, x)?;
                bn_step(tape, h)?
            }
            ExpertDesign::BnConvRelu => {
                let h = bn_step(tape, x)?;
                conv.forward(tape, &vars.conv, h)?
            }
            ExpertDesign::InConvRelu => {
                let h = tape.instance_norm(x, DEFAULT_NORM_EPS)?;
                conv.forward(tape, &vars.conv, h)?
            }
            ExpertDesign::ConvInRelu => {
                // instance statistics cancel the bias in every mode
                let h = conv.forward_without_bias(tape, &vars.conv, x)?;
                tape.instance_norm(h, DEFAULT_NORM_EPS)?
            }
        };
        let updated = match mode {
            NormMode::Train => state,
            NormMode::Eval => None,
        };
        Ok((tape.relu(h), updated))
    }

    pub fn commit_stats(&mut self, state: Option<BatchNormState>) {
        if let (Some(bn), Some(st)) = (self.bn.as_mut(), state) {
            bn.state = st;
        }
    }

    /// Zeroes the convolution and resets the BN affine to identity, making
    /// the residual branch output exactly zero.
    pub fn zero_out(&mut self) {
        self.conv.weight.data_mut().fill(0.0);
        if let Some(b) = &mut self.conv.bias {
            b.data_mut().fill(0.0);
        }
        if let Some(bn) = &mut self.bn {
            bn.gamma.data_mut().fill(1.0);
            bn.beta.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertVars {
    pub conv: ConvVars,
    pub norm: Option<NormVars>,
}

impl ExpertVars {
    /// Vars in the same order as [`ExpertBlock::params`].
    pub fn list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.conv.push_into(&mut out);
        if let Some(n) = &self.norm {
            out.push(n.gamma);
            out.push(n.beta);
        }
        out
    }
}

/// First backbone block normalizes per instance; later ones use batch norm.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockNorm {
    Instance,
    Batch(BatchNorm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBlock {
    pub conv: Conv,
    pub norm: BlockNorm,
}

impl BackboneBlock {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.conv.params();
        if let BlockNorm::Batch(bn) = &self.norm {
            out.extend(bn.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv.params_mut();
        if let BlockNorm::Batch(bn) = &mut self.norm {
            out.extend(bn.params_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BlockVars {
        self.bind_with(tape, &mut fresh_leaf(track))
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, leaf: &mut LeafFn) -> BlockVars {
        BlockVars {
            conv: self.conv.bind_with(tape, leaf),
            norm: match &self.norm {
                BlockNorm::Batch(bn) => Some(bn.bind_with(tape, leaf)),
                BlockNorm::Instance => None,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub conv: ConvVars,
    pub norm: Option<NormVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthHead {
    pub conv1: Conv,
    pub conv2: Conv,
    pub upsample_steps: usize,
}

impl DepthHead {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }
}
