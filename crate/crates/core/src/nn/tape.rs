//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! The network architecture is static, so instead of a general graph there is
//! a linear tape: every op appends a node holding its output value and the
//! context its backward pass needs. `backward` walks the tape once in
//! reverse. Every op output is checked for NaN/Inf so divergence surfaces as
//! an error at the op that produced it.

use super::tensor::{gemm_a_bt, gemm_at_b, gemm_rowmajor};
use super::{Element, NnError, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-norm execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batch norm, used by
/// the caller to update running statistics.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (1/M) variance.
    pub var: Vec<f64>,
    /// Number of samples per channel (N·H·W).
    pub count: usize,
}

struct BnCtx {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

enum Back<T: Element> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        ctx: BnCtx,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        ca: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    Rotate2d {
        x: usize,
        theta: usize,
    },
    CosineRows {
        a: usize,
        b: usize,
        dots: Vec<(f64, f64, f64)>,
    },
    HingeMargin {
        pos: usize,
        neg: usize,
        active: Vec<bool>,
    },
    NegLogHalfPlus {
        s: usize,
    },
    MeanAll {
        x: usize,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
    DotConst {
        x: usize,
        w: Tensor<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    back: Back<T>,
    requires_grad: bool,
}

/// Gradients of a scalar tape output with respect to every grad-requiring
/// node.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, back: Back<T>, requires_grad: bool, op: &'static str) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            back,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a leaf tensor. Parameters set `requires_grad`; constants and
    /// inputs that need no gradient leave it false.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NnError> {
        self.push(value, Back::Leaf, requires_grad, "leaf")
    }

    /// 3×3 convolution with padding 1 and the given stride, NCHW layout.
    /// Output spatial size is `ceil(in / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {xs:?}, w {ws:?} (need NCHW and O×C×3×3)"),
            });
        }
        if xs[1] != ws[1] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs kernel channels {}", xs[1], ws[1]),
            });
        }
        if bs != [ws[0]] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {bs:?} vs out channels {}", ws[0]),
            });
        }
        if !(stride == 1 || stride == 2) {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("unsupported stride {stride}"),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let c9 = c * 9;
        let hw = ho * wo;

        let mut out = Tensor::<T>::zeros(&[n, o, ho, wo]);
        let mut cols = vec![T::ZERO; c9 * hw];
        for ni in 0..n {
            let xin = &self.value(x).data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            im2col(xin, c, h, wd, stride, ho, wo, &mut cols);
            let dst = &mut out.data_mut()[ni * o * hw..(ni + 1) * o * hw];
            gemm_rowmajor(o, c9, hw, T::ONE, self.nodes[w.0].value.data(), &cols, T::ZERO, dst);
            let bias = self.nodes[b.0].value.data();
            for oi in 0..o {
                let bo = bias[oi];
                for v in dst[oi * hw..(oi + 1) * hw].iter_mut() {
                    *v += bo;
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            out,
            Back::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
            rg,
            "conv2d",
        )
    }

    /// Batch normalization over N·H·W per channel. Train mode normalizes by
    /// batch statistics (and reports them); eval mode normalizes by the
    /// provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: Mode,
    ) -> Result<(Var, Option<BnStats>), NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(NnError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("expected NCHW, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n * h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(NnError::ShapeMismatch {
                op: "batch_norm",
                detail: "gamma/beta must be per-channel".into(),
            });
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(NnError::Degenerate {
                        op: "batch_norm",
                        detail: format!("need at least 2 samples per channel, have {m}"),
                    });
                }
                let data = self.value(x).data();
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    let mut sum2 = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for v in &data[base..base + h * w] {
                            let vf = v.to_f64();
                            sum += vf;
                            sum2 += vf * vf;
                        }
                    }
                    let mu = sum / m as f64;
                    mean[ci] = mu;
                    var[ci] = (sum2 / m as f64 - mu * mu).max(0.0);
                }
                (mean, var)
            }
            Mode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(NnError::ShapeMismatch {
                        op: "batch_norm",
                        detail: "running statistics must be per-channel".into(),
                    });
                }
                (running_mean.to_vec(), running_var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut out = Tensor::<T>::zeros(&xs);
        {
            let data = self.value(x).data().to_vec();
            let g = self.value(gamma).data().to_vec();
            let be = self.value(beta).data().to_vec();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let (gc, bc) = (g[ci].to_f64(), be[ci].to_f64());
                    for i in base..base + h * w {
                        let xh = (data[i].to_f64() - mu) * is;
                        od[i] = T::from_f64(gc * xh + bc);
                    }
                }
            }
        }
        let stats = match mode {
            Mode::Train => Some(BnStats {
                mean: mean.clone(),
                var: var.clone(),
                count: m,
            }),
            Mode::Eval => None,
        };
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let var_node = self.push(
            out,
            Back::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                ctx: BnCtx {
                    mean,
                    inv_std,
                    train: mode == Mode::Train,
                },
            },
            rg,
            "batch_norm",
        )?;
        Ok((var_node, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let rg = self.requires(x);
        self.push(out, Back::Relu { x: x.0 }, rg, "relu")
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(NnError::ShapeMismatch {
                op: "max_pool2d",
                detail: format!("expected NCHW with H,W >= 2, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::<T>::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let data = self.value(x).data().to_vec();
        {
            let od = out.data_mut();
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best_i = ibase + (2 * oy) * w + 2 * ox;
                        let mut best = data[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ibase + (2 * oy + dy) * w + (2 * ox + dx);
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                        od[obase + oy * wo + ox] = best;
                        argmax[obase + oy * wo + ox] = best_i as u32;
                    }
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, Back::MaxPool { x: x.0, argmax }, rg, "max_pool2d")
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(NnError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected NCHW, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::<T>::zeros(&[n, c]);
        let data = self.value(x).data();
        for nc in 0..n * c {
            let base = nc * h * w;
            let s: f64 = data[base..base + h * w].iter().map(|v| v.to_f64()).sum();
            out.data_mut()[nc] = T::from_f64(s / (h * w) as f64);
        }
        let rg = self.requires(x);
        self.push(out, Back::GlobalAvgPool { x: x.0 }, rg, "global_avg_pool")
    }

    /// Fully connected layer: `[N, F] × [O, F]ᵀ + [O] -> [N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs:?} vs w {ws:?}"),
            });
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                detail: "bias must match output features".into(),
            });
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::<T>::zeros(&[n, o]);
        gemm_a_bt(
            n,
            f,
            o,
            T::ONE,
            self.value(x).data(),
            self.value(w).data(),
            T::ZERO,
            out.data_mut(),
        );
        let bias = self.value(b).data().to_vec();
        for ni in 0..n {
            for oi in 0..o {
                out.data_mut()[ni * o + oi] += bias[oi];
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            out,
            Back::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
            "linear",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, v) in out.data_mut().iter_mut().zip(bd) {
            *o += v;
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Back::Add { a: a.0, b: b.0 }, rg, "add")
    }

    /// Channel concatenation of two NCHW maps with equal N, H, W.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(NnError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let mut out = Tensor::<T>::zeros(&[n, ca + cb, h, w]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let hw = h * w;
        {
            let od = out.data_mut();
            for ni in 0..n {
                let dst = ni * (ca + cb) * hw;
                od[dst..dst + ca * hw].copy_from_slice(&ad[ni * ca * hw..(ni + 1) * ca * hw]);
                od[dst + ca * hw..dst + (ca + cb) * hw]
                    .copy_from_slice(&bd[ni * cb * hw..(ni + 1) * cb * hw]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            out,
            Back::ConcatChannels {
                a: a.0,
                b: b.0,
                ca,
            },
            rg,
            "concat_channels",
        )
    }

    /// Slice along the first dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(NnError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {xs:?}", start + len),
            });
        }
        let row: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = len;
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.requires(x);
        self.push(out, Back::SliceRows { x: x.0, start }, rg, "slice_rows")
    }

    /// View the same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.requires(x);
        self.push(out, Back::Reshape { x: x.0 }, rg, "reshape")
    }

    /// Flatten all but the first dimension: `[N, ...] -> [N, rest]`.
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[xs[0], rest])
    }

    /// Normalize each row of `[N, F]` to unit L2 norm. Rows with norm below
    /// 1e-8 are a degenerate-regression error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "l2_normalize_rows",
                detail: format!("expected [N, F], got {xs:?}"),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let mut out = Tensor::<T>::zeros(&xs);
        let mut norms = vec![0.0f64; n];
        let data = self.value(x).data();
        for ni in 0..n {
            let row = &data[ni * f..(ni + 1) * f];
            let norm: f64 = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(NnError::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {ni} has norm {norm:e}"),
                });
            }
            norms[ni] = norm;
            for fi in 0..f {
                out.data_mut()[ni * f + fi] = T::from_f64(row[fi].to_f64() / norm);
            }
        }
        let rg = self.requires(x);
        self.push(
            out,
            Back::L2NormalizeRows { x: x.0, norms },
            rg,
            "l2_normalize_rows",
        )
    }

    /// Rotate each sample's channels about the map center by the in-plane
    /// angle encoded as `theta[n] = (cos, sin)`, using bilinear sampling with
    /// zero padding. Gradients flow to both the map and the angle vector.
    pub fn rotate2d(&mut self, x: Var, theta: Var) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ts = self.value(theta).shape().to_vec();
        if xs.len() != 4 || xs[2] != xs[3] {
            return Err(NnError::ShapeMismatch {
                op: "rotate2d",
                detail: format!("expected square NCHW, got {xs:?}"),
            });
        }
        if ts != [xs[0], 2] {
            return Err(NnError::ShapeMismatch {
                op: "rotate2d",
                detail: format!("theta {ts:?} for batch {}", xs[0]),
            });
        }
        let (n, c, h) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::<T>::zeros(&xs);
        let data = self.value(x).data();
        let th = self.value(theta).data();
        let center = (h as f64 - 1.0) / 2.0;
        {
            let od = out.data_mut();
            for ni in 0..n {
                let (ct, st) = (th[ni * 2].to_f64(), th[ni * 2 + 1].to_f64());
                for ci in 0..c {
                    let base = (ni * c + ci) * h * h;
                    for y in 0..h {
                        let qy = y as f64 - center;
                        for xx in 0..h {
                            let qx = xx as f64 - center;
                            // Source position: inverse rotation of the
                            // output coordinate.
                            let sx = ct * qx + st * qy + center;
                            let sy = -st * qx + ct * qy + center;
                            od[base + y * h + xx] =
                                T::from_f64(bilinear(&data[base..base + h * h], h, sx, sy));
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(theta);
        self.push(
            out,
            Back::Rotate2d {
                x: x.0,
                theta: theta.0,
            },
            rg,
            "rotate2d",
        )
    }

    /// Row-wise cosine similarity of two `[N, F]` tensors, in `[-1, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.value(a).shape().to_vec();
        if sa != self.value(b).shape() || sa.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "cosine_rows",
                detail: format!("{sa:?} vs {:?}", self.value(b).shape()),
            });
        }
        let (n, f) = (sa[0], sa[1]);
        let mut out = Tensor::<T>::zeros(&[n]);
        let mut dots = Vec::with_capacity(n);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for ni in 0..n {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for fi in 0..f {
                let (x, y) = (ad[ni * f + fi].to_f64(), bd[ni * f + fi].to_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            if na < 1e-12 || nb < 1e-12 {
                return Err(NnError::Degenerate {
                    op: "cosine_rows",
                    detail: format!("zero vector in row {ni}"),
                });
            }
            out.data_mut()[ni] = T::from_f64(dot / (na * nb));
            dots.push((dot, na, nb));
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(
            out,
            Back::CosineRows {
                a: a.0,
                b: b.0,
                dots,
            },
            rg,
            "cosine_rows",
        )
    }

    /// Ranking hinge `max(neg − pos + margin, 0)` per element.
    pub fn hinge_margin(&mut self, pos: Var, neg: Var, margin: f64) -> Result<Var, NnError> {
        let sp = self.value(pos).shape().to_vec();
        if sp != self.value(neg).shape() {
            return Err(NnError::ShapeMismatch {
                op: "hinge_margin",
                detail: format!("{sp:?} vs {:?}", self.value(neg).shape()),
            });
        }
        let mut out = Tensor::<T>::zeros(&sp);
        let mut active = vec![false; out.len()];
        let pd = self.value(pos).data();
        let nd = self.value(neg).data();
        for i in 0..out.len() {
            let v = nd[i].to_f64() - pd[i].to_f64() + margin;
            if v > 0.0 {
                out.data_mut()[i] = T::from_f64(v);
                active[i] = true;
            }
        }
        let rg = self.requires(pos) || self.requires(neg);
        self.push(
            out,
            Back::HingeMargin {
                pos: pos.0,
                neg: neg.0,
                active,
            },
            rg,
            "hinge_margin",
        )
    }

    /// `−ln((1 + s) / 2)` per element; `s` is clamped to `[−1 + 1e-7, 1]`.
    pub fn neg_log_half_plus(&mut self, s: Var) -> Result<Var, NnError> {
        let mut out = self.value(s).clone();
        for v in out.data_mut() {
            let sv = v.to_f64().clamp(-1.0 + 1e-7, 1.0);
            *v = T::from_f64(-((1.0 + sv) / 2.0).ln());
        }
        let rg = self.requires(s);
        self.push(out, Back::NegLogHalfPlus { s: s.0 }, rg, "neg_log_half_plus")
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var, NnError> {
        let len = self.value(x).len().max(1);
        let mean = self.value(x).sum_f64() / len as f64;
        let out = Tensor::from_vec(&[1], vec![T::from_f64(mean)])?;
        let rg = self.requires(x);
        self.push(out, Back::MeanAll { x: x.0 }, rg, "mean_all")
    }

    /// Weighted sum of `[1]` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NnError> {
        let mut total = 0.0f64;
        for (v, w) in terms {
            if self.value(*v).shape() != [1] {
                return Err(NnError::ShapeMismatch {
                    op: "weighted_sum",
                    detail: format!("term has shape {:?}", self.value(*v).shape()),
                });
            }
            total += self.value(*v).data()[0].to_f64() * w;
        }
        let out = Tensor::from_vec(&[1], vec![T::from_f64(total)])?;
        let rg = terms.iter().any(|(v, _)| self.requires(*v));
        self.push(
            out,
            Back::WeightedSum {
                terms: terms.iter().map(|(v, w)| (v.0, *w)).collect(),
            },
            rg,
            "weighted_sum",
        )
    }

    /// Dot product with a constant tensor, as a `[1]` scalar. Used to
    /// scalarize multi-output ops in gradient checks.
    pub fn dot_const(&mut self, x: Var, w: Tensor<T>) -> Result<Var, NnError> {
        if self.value(x).len() != w.len() {
            return Err(NnError::ShapeMismatch {
                op: "dot_const",
                detail: format!("{} vs {}", self.value(x).len(), w.len()),
            });
        }
        let dot: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum();
        let out = Tensor::from_vec(&[1], vec![T::from_f64(dot)])?;
        let rg = self.requires(x);
        self.push(out, Back::DotConst { x: x.0, w }, rg, "dot_const")
    }

    /// Reverse pass from a `[1]` scalar node. Returns gradients for every
    /// node on a path from a grad-requiring leaf to `from`.
    pub fn backward(&self, from: Var) -> Result<Gradients<T>, NnError> {
        if self.value(from).shape() != [1] {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                detail: format!("expected scalar [1], got {:?}", self.value(from).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[from.0] = Some(Tensor::from_vec(&[1], vec![T::ONE])?);

        for i in (0..=from.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads)?;
            // Keep leaf gradients for the caller; interior grads are dropped
            // once consumed.
            if matches!(self.nodes[i].back, Back::Leaf) {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        node: usize,
        delta: Tensor<T>,
    ) -> Result<(), NnError> {
        if !self.nodes[node].requires_grad {
            return Ok(());
        }
        match &mut grads[node] {
            Some(g) => g.add_assign_tensor(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        i: usize,
        gout: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<(), NnError> {
        match &self.nodes[i].back {
            Back::Leaf => {}
            Back::Conv2d { x, w, b, stride } => {
                self.backprop_conv2d(*x, *w, *b, *stride, gout, grads)?;
            }
            Back::BatchNorm {
                x,
                gamma,
                beta,
                ctx,
            } => {
                self.backprop_batch_norm(*x, *gamma, *beta, ctx, gout, grads)?;
            }
            Back::Relu { x } => {
                if self.nodes[*x].requires_grad {
                    let mut g = gout.clone();
                    for (gv, xv) in g.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                        if *xv <= T::ZERO {
                            *gv = T::ZERO;
                        }
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::MaxPool { x, argmax } => {
                if self.nodes[*x].requires_grad {
                    let mut g = Tensor::<T>::zeros(self.nodes[*x].value.shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        g.data_mut()[src as usize] += gout.data()[o];
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::GlobalAvgPool { x } => {
                if self.nodes[*x].requires_grad {
                    let xs = self.nodes[*x].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let scale = 1.0 / (h * w) as f64;
                    let mut g = Tensor::<T>::zeros(xs);
                    for nc in 0..xs[0] * xs[1] {
                        let gv = T::from_f64(gout.data()[nc].to_f64() * scale);
                        for v in g.data_mut()[nc * h * w..(nc + 1) * h * w].iter_mut() {
                            *v = gv;
                        }
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let ws = self.nodes[*w].value.shape().to_vec();
                let (n, f, o) = (xs[0], xs[1], ws[0]);
                if self.nodes[*x].requires_grad {
                    let mut gx = Tensor::<T>::zeros(&xs);
                    gemm_rowmajor(
                        n,
                        o,
                        f,
                        T::ONE,
                        gout.data(),
                        self.nodes[*w].value.data(),
                        T::ZERO,
                        gx.data_mut(),
                    );
                    self.accumulate(grads, *x, gx)?;
                }
                if self.nodes[*w].requires_grad {
                    let mut gw = Tensor::<T>::zeros(&ws);
                    gemm_at_b(
                        o,
                        n,
                        f,
                        T::ONE,
                        gout.data(),
                        self.nodes[*x].value.data(),
                        T::ZERO,
                        gw.data_mut(),
                    );
                    self.accumulate(grads, *w, gw)?;
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = Tensor::<T>::zeros(&[o]);
                    for ni in 0..n {
                        for oi in 0..o {
                            gb.data_mut()[oi] += gout.data()[ni * o + oi];
                        }
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Back::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone())?;
                self.accumulate(grads, *b, gout.clone())?;
            }
            Back::ConcatChannels { a, b, ca } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let (n, h, w) = (sa[0], sa[2], sa[3]);
                let cb = sb[1];
                let hw = h * w;
                if self.nodes[*a].requires_grad {
                    let mut ga = Tensor::<T>::zeros(&sa);
                    for ni in 0..n {
                        let src = ni * (ca + cb) * hw;
                        ga.data_mut()[ni * ca * hw..(ni + 1) * ca * hw]
                            .copy_from_slice(&gout.data()[src..src + ca * hw]);
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = Tensor::<T>::zeros(&sb);
                    for ni in 0..n {
                        let src = ni * (ca + cb) * hw + ca * hw;
                        gb.data_mut()[ni * cb * hw..(ni + 1) * cb * hw]
                            .copy_from_slice(&gout.data()[src..src + cb * hw]);
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Back::SliceRows { x, start } => {
                if self.nodes[*x].requires_grad {
                    let xs = self.nodes[*x].value.shape();
                    let row: usize = xs[1..].iter().product();
                    let mut g = Tensor::<T>::zeros(xs);
                    let dst = &mut g.data_mut()[start * row..start * row + gout.len()];
                    for (d, s) in dst.iter_mut().zip(gout.data()) {
                        *d = *s;
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::Reshape { x } => {
                if self.nodes[*x].requires_grad {
                    let g = gout.reshaped(self.nodes[*x].value.shape())?;
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::L2NormalizeRows { x, norms } => {
                if self.nodes[*x].requires_grad {
                    let xs = self.nodes[*x].value.shape().to_vec();
                    let (n, f) = (xs[0], xs[1]);
                    let y = self.nodes[i].value.data();
                    let mut g = Tensor::<T>::zeros(&xs);
                    for ni in 0..n {
                        let mut gy_dot_y = 0.0f64;
                        for fi in 0..f {
                            gy_dot_y +=
                                gout.data()[ni * f + fi].to_f64() * y[ni * f + fi].to_f64();
                        }
                        for fi in 0..f {
                            let gv = (gout.data()[ni * f + fi].to_f64()
                                - gy_dot_y * y[ni * f + fi].to_f64())
                                / norms[ni];
                            g.data_mut()[ni * f + fi] = T::from_f64(gv);
                        }
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::Rotate2d { x, theta } => {
                self.backprop_rotate2d(*x, *theta, gout, grads)?;
            }
            Back::CosineRows { a, b, dots } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let (n, f) = (sa[0], sa[1]);
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                let mut ga = Tensor::<T>::zeros(&sa);
                let mut gb = Tensor::<T>::zeros(&sa);
                for ni in 0..n {
                    let (dot, na, nb) = dots[ni];
                    let gv = gout.data()[ni].to_f64();
                    let y = dot / (na * nb);
                    for fi in 0..f {
                        let av = ad[ni * f + fi].to_f64();
                        let bv = bd[ni * f + fi].to_f64();
                        ga.data_mut()[ni * f + fi] =
                            T::from_f64(gv * (bv / (na * nb) - y * av / (na * na)));
                        gb.data_mut()[ni * f + fi] =
                            T::from_f64(gv * (av / (na * nb) - y * bv / (nb * nb)));
                    }
                }
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Back::HingeMargin { pos, neg, active } => {
                let shape = self.nodes[*pos].value.shape().to_vec();
                let mut gp = Tensor::<T>::zeros(&shape);
                let mut gn = Tensor::<T>::zeros(&shape);
                for (idx, &act) in active.iter().enumerate() {
                    if act {
                        gp.data_mut()[idx] = -gout.data()[idx];
                        gn.data_mut()[idx] = gout.data()[idx];
                    }
                }
                self.accumulate(grads, *pos, gp)?;
                self.accumulate(grads, *neg, gn)?;
            }
            Back::NegLogHalfPlus { s } => {
                if self.nodes[*s].requires_grad {
                    let mut g = gout.clone();
                    for (gv, sv) in g.data_mut().iter_mut().zip(self.nodes[*s].value.data()) {
                        let s_clamped = sv.to_f64().clamp(-1.0 + 1e-7, 1.0);
                        *gv = T::from_f64(-gv.to_f64() / (1.0 + s_clamped));
                    }
                    self.accumulate(grads, *s, g)?;
                }
            }
            Back::MeanAll { x } => {
                if self.nodes[*x].requires_grad {
                    let len = self.nodes[*x].value.len().max(1);
                    let gv = T::from_f64(gout.data()[0].to_f64() / len as f64);
                    let g = Tensor::filled(self.nodes[*x].value.shape(), gv);
                    self.accumulate(grads, *x, g)?;
                }
            }
            Back::WeightedSum { terms } => {
                for (t, wgt) in terms {
                    if self.nodes[*t].requires_grad {
                        let g = Tensor::from_vec(
                            &[1],
                            vec![T::from_f64(gout.data()[0].to_f64() * wgt)],
                        )?;
                        self.accumulate(grads, *t, g)?;
                    }
                }
            }
            Back::DotConst { x, w } => {
                if self.nodes[*x].requires_grad {
                    let gv = gout.data()[0].to_f64();
                    let mut g = Tensor::<T>::zeros(self.nodes[*x].value.shape());
                    for (gd, wd) in g.data_mut().iter_mut().zip(w.data()) {
                        *gd = T::from_f64(gv * wd.to_f64());
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_conv2d(
        &self,
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        gout: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<(), NnError> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let os = gout.shape();
        let (ho, wo) = (os[2], os[3]);
        let c9 = c * 9;
        let hw = ho * wo;

        let need_x = self.nodes[x].requires_grad;
        let need_w = self.nodes[w].requires_grad;
        let need_b = self.nodes[b].requires_grad;

        let mut gx = need_x.then(|| Tensor::<T>::zeros(&xs));
        let mut gw = need_w.then(|| Tensor::<T>::zeros(&ws));
        let mut gb = need_b.then(|| Tensor::<T>::zeros(&[o]));

        let mut cols = vec![T::ZERO; c9 * hw];
        let mut dcols = vec![T::ZERO; c9 * hw];
        for ni in 0..n {
            let gslice = &gout.data()[ni * o * hw..(ni + 1) * o * hw];
            if need_w {
                let xin = &self.nodes[x].value.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
                im2col(xin, c, h, wd, stride, ho, wo, &mut cols);
                gemm_a_bt(
                    o,
                    hw,
                    c9,
                    T::ONE,
                    gslice,
                    &cols,
                    T::ONE,
                    gw.as_mut().unwrap().data_mut(),
                );
            }
            if need_x {
                gemm_at_b(
                    c9,
                    o,
                    hw,
                    T::ONE,
                    self.nodes[w].value.data(),
                    gslice,
                    T::ZERO,
                    &mut dcols,
                );
                let gxd = gx.as_mut().unwrap().data_mut();
                col2im_accumulate(
                    &dcols,
                    c,
                    h,
                    wd,
                    stride,
                    ho,
                    wo,
                    &mut gxd[ni * c * h * wd..(ni + 1) * c * h * wd],
                );
            }
            if need_b {
                let gbd = gb.as_mut().unwrap().data_mut();
                for oi in 0..o {
                    let mut s = 0.0f64;
                    for v in &gslice[oi * hw..(oi + 1) * hw] {
                        s += v.to_f64();
                    }
                    gbd[oi] += T::from_f64(s);
                }
            }
        }
        if let Some(g) = gx {
            self.accumulate(grads, x, g)?;
        }
        if let Some(g) = gw {
            self.accumulate(grads, w, g)?;
        }
        if let Some(g) = gb {
            self.accumulate(grads, b, g)?;
        }
        Ok(())
    }

    fn backprop_batch_norm(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        ctx: &BnCtx,
        gout: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<(), NnError> {
        let xs = self.nodes[x].value.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = (n * h * w) as f64;
        let xd = self.nodes[x].value.data();
        let gd = self.nodes[gamma].value.data();

        // Per-channel reductions of dy and dy·xhat.
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (mu, is) = (ctx.mean[ci], ctx.inv_std[ci]);
                for idx in base..base + h * w {
                    let dy = gout.data()[idx].to_f64();
                    let xhat = (xd[idx].to_f64() - mu) * is;
                    sum_dy[ci] += dy;
                    sum_dy_xhat[ci] += dy * xhat;
                }
            }
        }

        if self.nodes[x].requires_grad {
            let mut gx = Tensor::<T>::zeros(&xs);
            let gxd = gx.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let (mu, is) = (ctx.mean[ci], ctx.inv_std[ci]);
                    let gc = gd[ci].to_f64();
                    for idx in base..base + h * w {
                        let dy = gout.data()[idx].to_f64();
                        let dx = if ctx.train {
                            let xhat = (xd[idx].to_f64() - mu) * is;
                            gc * is / m * (m * dy - sum_dy[ci] - xhat * sum_dy_xhat[ci])
                        } else {
                            gc * is * dy
                        };
                        gxd[idx] = T::from_f64(dx);
                    }
                }
            }
            self.accumulate(grads, x, gx)?;
        }
        if self.nodes[gamma].requires_grad {
            let mut gg = Tensor::<T>::zeros(&[c]);
            for ci in 0..c {
                gg.data_mut()[ci] = T::from_f64(sum_dy_xhat[ci]);
            }
            self.accumulate(grads, gamma, gg)?;
        }
        if self.nodes[beta].requires_grad {
            let mut gb = Tensor::<T>::zeros(&[c]);
            for ci in 0..c {
                gb.data_mut()[ci] = T::from_f64(sum_dy[ci]);
            }
            self.accumulate(grads, beta, gb)?;
        }
        Ok(())
    }

    fn backprop_rotate2d(
        &self,
        x: usize,
        theta: usize,
        gout: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<(), NnError> {
        let xs = self.nodes[x].value.shape().to_vec();
        let (n, c, h) = (xs[0], xs[1], xs[2]);
        let center = (h as f64 - 1.0) / 2.0;
        let xd = self.nodes[x].value.data();
        let th = self.nodes[theta].value.data();

        let need_x = self.nodes[x].requires_grad;
        let need_t = self.nodes[theta].requires_grad;
        let mut gx = need_x.then(|| Tensor::<T>::zeros(&xs));
        let mut gt = need_t.then(|| Tensor::<T>::zeros(&[n, 2]));

        for ni in 0..n {
            let (ct, st) = (th[ni * 2].to_f64(), th[ni * 2 + 1].to_f64());
            let (mut dct, mut dst) = (0.0f64, 0.0f64);
            for ci in 0..c {
                let base = (ni * c + ci) * h * h;
                let plane = &xd[base..base + h * h];
                for y in 0..h {
                    let qy = y as f64 - center;
                    for xx in 0..h {
                        let g = gout.data()[base + y * h + xx].to_f64();
                        if g == 0.0 {
                            continue;
                        }
                        let qx = xx as f64 - center;
                        let sx = ct * qx + st * qy + center;
                        let sy = -st * qx + ct * qy + center;
                        if need_x {
                            scatter_bilinear(
                                gx.as_mut().unwrap().data_mut(),
                                base,
                                h,
                                sx,
                                sy,
                                g,
                            );
                        }
                        if need_t {
                            let (dvx, dvy) = bilinear_grad(plane, h, sx, sy);
                            dct += g * (dvx * qx + dvy * qy);
                            dst += g * (dvx * qy - dvy * qx);
                        }
                    }
                }
            }
            if let Some(gt) = gt.as_mut() {
                gt.data_mut()[ni * 2] = T::from_f64(dct);
                gt.data_mut()[ni * 2 + 1] = T::from_f64(dst);
            }
        }
        if let Some(g) = gx {
            self.accumulate(grads, x, g)?;
        }
        if let Some(g) = gt {
            self.accumulate(grads, theta, g)?;
        }
        Ok(())
    }
}

fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + wo].fill(T::ZERO);
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate<T: Element>(
    dcols: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += dcols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample with zero padding outside the image.
fn bilinear<T: Element>(plane: &[T], size: usize, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let get = |ix: i64, iy: i64| -> f64 {
        if ix < 0 || iy < 0 || ix >= size as i64 || iy >= size as i64 {
            0.0
        } else {
            plane[iy as usize * size + ix as usize].to_f64()
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    get(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + get(x0 + 1, y0) * fx * (1.0 - fy)
        + get(x0, y0 + 1) * (1.0 - fx) * fy
        + get(x0 + 1, y0 + 1) * fx * fy
}

/// Derivative of the bilinear sample with respect to the sample coordinates.
fn bilinear_grad<T: Element>(plane: &[T], size: usize, sx: f64, sy: f64) -> (f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let get = |ix: i64, iy: i64| -> f64 {
        if ix < 0 || iy < 0 || ix >= size as i64 || iy >= size as i64 {
            0.0
        } else {
            plane[iy as usize * size + ix as usize].to_f64()
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v00 = get(x0, y0);
    let v10 = get(x0 + 1, y0);
    let v01 = get(x0, y0 + 1);
    let v11 = get(x0 + 1, y0 + 1);
    let dvx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let dvy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    (dvx, dvy)
}

/// Scatter a gradient value to the four bilinear corners.
fn scatter_bilinear<T: Element>(
    gx: &mut [T],
    base: usize,
    size: usize,
    sx: f64,
    sy: f64,
    g: f64,
) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut put = |ix: i64, iy: i64, wgt: f64| {
        if ix >= 0 && iy >= 0 && ix < size as i64 && iy < size as i64 {
            gx[base + iy as usize * size + ix as usize] += T::from_f64(g * wgt);
        }
    };
    put(x0, y0, (1.0 - fx) * (1.0 - fy));
    put(x0 + 1, y0, fx * (1.0 - fy));
    put(x0, y0 + 1, (1.0 - fx) * fy);
    put(x0 + 1, y0 + 1, fx * fy);
}
