use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{BatchNormState, NormMode, Op, Tape, UnaryFn, Var};
use crate::error::{shape_err, AmelError, Result};
use crate::tensor::Tensor;

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(shape_err(op, format!("expected 4-d tensor, got {:?}", s))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref s => Err(shape_err(op, format!("expected 2-d tensor, got {:?}", s))),
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `[cin,h,w]` into `[cin*kh*kw, ho*wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.col_cols();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters `cols` back onto `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.col_cols();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeom)> {
    const OP: &str = "conv2d";
    let [b, cin, h, w] = dims4(input, OP)?;
    let [cout, kcin, kh, kw] = dims4(kernel, OP)?;
    if kcin != cin {
        return Err(shape_err(
            OP,
            format!("input channels: input has {}, kernel expects {}", cin, kcin),
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err(
            OP,
            format!("bias: expected [{}], got {:?}", cout, bias.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err(
            OP,
            format!("kernel height/width must be odd, got {}x{}", kh, kw),
        ));
    }
    if stride == 0 {
        return Err(AmelError::InvalidArgument {
            op: OP,
            detail: "stride must be >= 1".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err(OP, "spatial size smaller than kernel"));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok((
        b,
        cout,
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        },
    ))
}

/// Per-group normalization statistics over contiguous or strided groups.
fn normalize_groups(
    x: &[f64],
    groups: usize,
    index: impl Fn(usize, usize) -> usize,
    group_len: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    let mut means = vec![0.0; groups];
    let mut vars = vec![0.0; groups];
    let n = group_len as f64;
    for g in 0..groups {
        let mean = (0..group_len).map(|i| x[index(g, i)]).sum::<f64>() / n;
        let var = (0..group_len)
            .map(|i| {
                let d = x[index(g, i)] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..group_len {
            let j = index(g, i);
            xhat[j] = (x[j] - mean) * inv;
        }
        inv_std[g] = inv;
        means[g] = mean;
        vars[g] = var;
    }
    (xhat, inv_std, means, vars)
}

/// `dx = inv/n * (n*dy - sum(dy) - xhat*sum(dy*xhat))` for each group.
fn normalize_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    index: impl Fn(usize, usize) -> usize,
    group_len: usize,
    dx: &mut [f64],
) {
    let n = group_len as f64;
    for (g, &inv) in inv_std.iter().enumerate() {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..group_len {
            let j = index(g, i);
            sum_dy += dy[j];
            sum_dy_xhat += dy[j] * xhat[j];
        }
        for i in 0..group_len {
            let j = index(g, i);
            dx[j] = inv / n * (n * dy[j] - sum_dy - xhat[j] * sum_dy_xhat);
        }
    }
}

impl Tape {
    /// Cross-correlation with zero padding. Output spatial size is
    /// `(H + 2*padding - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let (b, cout, geom) = conv_geom(x, k, bv, stride, padding)?;
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.cin * geom.h * geom.w;
        let mut out = vec![0.0; b * cout * n];
        let mut cols = vec![0.0; rows * n];
        for s in 0..b {
            geom.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
            let o = &mut out[s * cout * n..(s + 1) * cout * n];
            for (co, &bias_v) in bv.data().iter().enumerate() {
                o[co * n..(co + 1) * n].fill(bias_v);
            }
            gemm_nn(cout, rows, n, k.data(), &cols, o);
        }
        let value = Tensor::new(&[b, cout, geom.ho, geom.wo], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-(sample, channel) normalization with biased variance; no affine.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "instance_norm")?;
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err("instance_norm", "H*W must be >= 1"));
        }
        let (xhat, inv_std, _, _) = normalize_groups(x.data(), b * c, |g, i| g * hw + i, hw, eps);
        let value = Tensor::new(&[b, c, h, w], xhat.clone())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            rg,
            Op::InstanceNorm {
                input,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization. Train mode normalizes with batch statistics and
    /// updates `state`; eval mode reads `state` and leaves it untouched.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    OP,
                    format!("{}: expected [{}], got {:?}", name, c, self.shape(v)),
                ));
            }
        }
        if state.channels() != c {
            return Err(shape_err(
                OP,
                format!("state has {} channels, input has {}", state.channels(), c),
            ));
        }
        let hw = h * w;
        let per_channel = b * hw;
        let index = |ch: usize, i: usize| ((i / hw) * c + ch) * hw + i % hw;
        let (xhat, inv_std, batch_stats) = match mode {
            NormMode::Train => {
                if per_channel < 2 {
                    return Err(shape_err(OP, "train mode requires B*H*W >= 2"));
                }
                let (xhat, inv_std, means, vars) =
                    normalize_groups(x.data(), c, index, per_channel, state.epsilon);
                let scale = per_channel as f64 / (per_channel as f64 - 1.0);
                let unbiased: Vec<f64> = vars.iter().map(|v| v * scale).collect();
                state.update(&means, &unbiased);
                (xhat, inv_std, true)
            }
            NormMode::Eval => {
                if !state.is_initialized() {
                    return Err(AmelError::UninitializedStats);
                }
                let inv_std: Vec<f64> = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + state.epsilon).sqrt())
                    .collect();
                let mut xhat = vec![0.0; x.len()];
                for ch in 0..c {
                    for i in 0..per_channel {
                        let j = index(ch, i);
                        xhat[j] = (x.data()[j] - state.running_mean[ch]) * inv_std[ch];
                    }
                }
                (xhat, inv_std, false)
            }
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xhat.len()];
        for ch in 0..c {
            for i in 0..per_channel {
                let j = index(ch, i);
                out[j] = gv[ch] * xhat[j] + bv[ch];
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// `[B,C,H,W] -> [B,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4(t, "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = t
            .data()
            .chunks(hw)
            .map(|s| s.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(x)))
    }

    /// `x[B,I] * weight[O,I]^T + bias[O]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let [b, i] = dims2(self.value(input), OP)?;
        let [o, wi] = dims2(self.value(weight), OP)?;
        if wi != i {
            return Err(shape_err(
                OP,
                format!("input features: input has {}, weight expects {}", i, wi),
            ));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err(OP, format!("bias: expected [{}]", o)));
        }
        let mut out = vec![0.0; b * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm_nt(
            b,
            i,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let value = Tensor::new(&[b, o], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Stacks `parts` along the batch axis in the given order, so row
    /// `k*B + i` of the result is row `i` of `parts[k]`.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&refs)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatBatch(parts.to_vec())))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_batch(start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::SliceBatch { input: x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    /// `a[M,K] * b[K,N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.value(a), "matmul")?;
        let [k2, n] = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// `a[M,K] * b[N,K]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.value(a), "matmul_bt")?;
        let [n, k2] = dims2(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMulBt(a, b)))
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked
    /// entries are exactly zero; the max is taken over the unmasked support.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(scores);
        let [rows, cols] = dims2(s, "masked_softmax")?;
        if mask.len() != rows * cols {
            return Err(shape_err(
                "masked_softmax",
                format!("mask has {} entries, scores have {}", mask.len(), rows * cols),
            ));
        }
        let out = masked_softmax_rows(s.data(), mask, rows, cols)?;
        let value = Tensor::new(&[rows, cols], out)?;
        let rg = self.any_grad(&[scores]);
        Ok(self.push(
            value,
            rg,
            Op::MaskedSoftmax {
                scores,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4(t, "upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for (plane, src) in t.data().chunks(h * w).enumerate() {
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[b, c, h2, w2], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Upsample2x(x)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [b, classes] = dims2(t, "cross_entropy")?;
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for batch of {}", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AmelError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let mut probs = vec![0.0; b * classes];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(classes).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for (j, v) in row.iter().enumerate() {
                probs[i * classes + j] = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over the leading (batch) axis of the per-sample squared L2
    /// distance between `a` and `b`.
    pub fn sq_dist_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "sq_dist_mean",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let batch = ta.shape().first().copied().unwrap_or(1).max(1);
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / batch as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::SqDistMean(a, b)))
    }

    /// Elementwise `f` whose backward rule multiplies by `derivative`.
    /// The caller is responsible for `derivative` actually being `f'`.
    pub fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, derivative: UnaryFn) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            rg,
            Op::MapUnary {
                input: x,
                derivative,
            },
        )
    }
}

pub(crate) fn masked_softmax_rows(
    scores: &[f64],
    mask: &[bool],
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let s = &scores[r * cols..(r + 1) * cols];
        let m = &mask[r * cols..(r + 1) * cols];
        let max = s
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(AmelError::EmptyMaskRow { row: r });
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for j in 0..cols {
            if m[j] {
                let e = (s[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub(super) fn backward_node(
    tape: &Tape,
    op: &Op,
    out: &Tensor,
    dy: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    let val = |v: Var| tape.value(v);
    let tracked = |v: Var| tape.requires_grad(v);
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (x, k) = (val(*input), val(*kernel));
            let (b, cout, geom) =
                conv_geom(x, k, val(*bias), *stride, *padding).expect("validated in forward");
            let (rows, n) = (geom.col_rows(), geom.col_cols());
            let in_len = geom.cin * geom.h * geom.w;
            let mut dk = vec![0.0; k.len()];
            let mut db = vec![0.0; cout];
            let mut dx = vec![0.0; x.len()];
            let mut cols = vec![0.0; rows * n];
            let mut dcols = vec![0.0; rows * n];
            for s in 0..b {
                let g = &dy.data()[s * cout * n..(s + 1) * cout * n];
                if tracked(*bias) {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += g[co * n..(co + 1) * n].iter().sum::<f64>();
                    }
                }
                if tracked(*kernel) {
                    geom.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    gemm_nt(cout, n, rows, g, &cols, &mut dk);
                }
                if tracked(*input) {
                    dcols.fill(0.0);
                    gemm_tn(rows, cout, n, k.data(), g, &mut dcols);
                    geom.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            tape.accumulate(grads, *kernel, Tensor::new(k.shape(), dk).unwrap());
            tape.accumulate(grads, *bias, Tensor::from_vec(db));
            tape.accumulate(grads, *input, Tensor::new(x.shape(), dx).unwrap());
        }
        Op::InstanceNorm {
            input,
            xhat,
            inv_std,
        } => {
            let shape = val(*input).shape();
            let hw = shape[2] * shape[3];
            let mut dx = vec![0.0; xhat.len()];
            normalize_backward(dy.data(), xhat, inv_std, |g, i| g * hw + i, hw, &mut dx);
            tape.accumulate(grads, *input, Tensor::new(shape, dx).unwrap());
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = val(*input).shape();
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let per_channel = b * hw;
            let index = |ch: usize, i: usize| ((i / hw) * c + ch) * hw + i % hw;
            let gv = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dxhat = vec![0.0; xhat.len()];
            for ch in 0..c {
                for i in 0..per_channel {
                    let j = index(ch, i);
                    dgamma[ch] += dy.data()[j] * xhat[j];
                    dbeta[ch] += dy.data()[j];
                    dxhat[j] = dy.data()[j] * gv[ch];
                }
            }
            if tracked(*input) {
                let mut dx = vec![0.0; xhat.len()];
                if *batch_stats {
                    normalize_backward(&dxhat, xhat, inv_std, index, per_channel, &mut dx);
                } else {
                    for ch in 0..c {
                        for i in 0..per_channel {
                            let j = index(ch, i);
                            dx[j] = dxhat[j] * inv_std[ch];
                        }
                    }
                }
                tape.accumulate(grads, *input, Tensor::new(shape, dx).unwrap());
            }
            tape.accumulate(grads, *gamma, Tensor::from_vec(dgamma));
            tape.accumulate(grads, *beta, Tensor::from_vec(dbeta));
        }
        Op::Relu(x) => {
            let g = out.zip_map(dy, |o, d| if o > 0.0 { d } else { 0.0 }).unwrap();
            tape.accumulate(grads, *x, g);
        }
        Op::GlobalAvgPool(x) => {
            let shape = val(*x).shape();
            let hw = shape[2] * shape[3];
            let mut dx = vec![0.0; val(*x).len()];
            for (plane, &d) in dy.data().iter().enumerate() {
                dx[plane * hw..(plane + 1) * hw].fill(d / hw as f64);
            }
            tape.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (b, i) = (x.shape()[0], x.shape()[1]);
            let o = w.shape()[0];
            if tracked(*input) {
                let mut dx = vec![0.0; b * i];
                gemm_nn(b, o, i, dy.data(), w.data(), &mut dx);
                tape.accumulate(grads, *input, Tensor::new(x.shape(), dx).unwrap());
            }
            if tracked(*weight) {
                let mut dw = vec![0.0; o * i];
                gemm_tn(o, b, i, dy.data(), x.data(), &mut dw);
                tape.accumulate(grads, *weight, Tensor::new(w.shape(), dw).unwrap());
            }
            if tracked(*bias) {
                let mut db = vec![0.0; o];
                for row in dy.data().chunks(o) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                tape.accumulate(grads, *bias, Tensor::from_vec(db));
            }
        }
        Op::ConcatBatch(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = val(p).shape()[0];
                if tracked(p) {
                    tape.accumulate(grads, p, dy.slice_batch(start, rows).unwrap());
                }
                start += rows;
            }
        }
        Op::SliceBatch { input, start } => {
            let x = val(*input);
            let row = x.row_len();
            let mut dx = vec![0.0; x.len()];
            dx[start * row..start * row + dy.len()].copy_from_slice(dy.data());
            tape.accumulate(grads, *input, Tensor::new(x.shape(), dx).unwrap());
        }
        Op::Reshape(x) => {
            tape.accumulate(grads, *x, dy.reshape(val(*x).shape()).unwrap());
        }
        Op::Add(a, b) => {
            tape.accumulate(grads, *a, dy.clone());
            tape.accumulate(grads, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            tape.accumulate(grads, *a, dy.clone());
            tape.accumulate(grads, *b, dy.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if tracked(*a) {
                tape.accumulate(grads, *a, dy.zip_map(val(*b), |d, y| d * y).unwrap());
            }
            if tracked(*b) {
                tape.accumulate(grads, *b, dy.zip_map(val(*a), |d, x| d * x).unwrap());
            }
        }
        Op::Scale(x, factor) => {
            tape.accumulate(grads, *x, dy.map(|v| v * factor));
        }
        Op::Sum(x) => {
            tape.accumulate(grads, *x, Tensor::full(val(*x).shape(), dy.item()));
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if tracked(*a) {
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, dy.data(), tb.data(), &mut da);
                tape.accumulate(grads, *a, Tensor::new(ta.shape(), da).unwrap());
            }
            if tracked(*b) {
                let mut db = vec![0.0; k * n];
                gemm_tn(k, m, n, ta.data(), dy.data(), &mut db);
                tape.accumulate(grads, *b, Tensor::new(tb.shape(), db).unwrap());
            }
        }
        Op::MatMulBt(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if tracked(*a) {
                let mut da = vec![0.0; m * k];
                gemm_nn(m, n, k, dy.data(), tb.data(), &mut da);
                tape.accumulate(grads, *a, Tensor::new(ta.shape(), da).unwrap());
            }
            if tracked(*b) {
                let mut db = vec![0.0; n * k];
                gemm_tn(n, m, k, dy.data(), ta.data(), &mut db);
                tape.accumulate(grads, *b, Tensor::new(tb.shape(), db).unwrap());
            }
        }
        Op::MaskedSoftmax { scores, mask } => {
            let cols = out.shape()[1];
            let mut ds = vec![0.0; out.len()];
            for ((o_row, d_row), (m_row, ds_row)) in out
                .data()
                .chunks(cols)
                .zip(dy.data().chunks(cols))
                .zip(mask.chunks(cols).zip(ds.chunks_mut(cols)))
            {
                let dot: f64 = o_row.iter().zip(d_row).map(|(o, d)| o * d).sum();
                for j in 0..cols {
                    if m_row[j] {
                        ds_row[j] = o_row[j] * (d_row[j] - dot);
                    }
                }
            }
            tape.accumulate(grads, *scores, Tensor::new(out.shape(), ds).unwrap());
        }
        Op::Upsample2x(x) => {
            let shape = val(*x).shape();
            let (h, w) = (shape[2], shape[3]);
            let (h2, w2) = (2 * h, 2 * w);
            let mut dx = vec![0.0; val(*x).len()];
            for (plane, src) in dy.data().chunks(h2 * w2).enumerate() {
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            tape.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let shape = val(*logits).shape();
            let (b, classes) = (shape[0], shape[1]);
            let scale = dy.item() / b as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * classes + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            tape.accumulate(grads, *logits, Tensor::new(shape, d).unwrap());
        }
        Op::SqDistMean(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let batch = ta.shape().first().copied().unwrap_or(1).max(1);
            let scale = 2.0 * dy.item() / batch as f64;
            let diff = ta.zip_map(tb, |x, y| scale * (x - y)).unwrap();
            if tracked(*b) {
                tape.accumulate(grads, *b, diff.map(|v| -v));
            }
            tape.accumulate(grads, *a, diff);
        }
        Op::MapUnary { input, derivative } => {
            let g = val(*input)
                .zip_map(dy, |x, d| d * derivative(x))
                .unwrap();
            tape.accumulate(grads, *input, g);
        }
    }
}
