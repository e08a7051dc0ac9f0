use super::kernels::{self, ConvGeom};
use super::{shape_err, OpKind, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics of one batch-norm call in training mode (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        kind: OpKind,
        x: Var,
        w: Var,
        geom: ConvGeom,
        n: usize,
        cin: usize,
        cout: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Silu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        channels: usize,
        spatial: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a loss with respect to the graph's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_var.get_mut(var.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast output.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.set_requires_grad(false);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, kind: OpKind, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dense convolution, `x: N×Cin×H×W`, `w: Cout×Cin×k×k`, odd `k`, zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(w)?;
        let kind = if self.shape(w).len() == 4 && self.shape(w)[2] == 1 {
            OpKind::PointwiseConv2d
        } else {
            OpKind::Conv2d
        };
        let (n, cin, h, wd) = self.value(x).dims4(kind)?;
        let (cout, wcin, k, k2) = self.value(w).dims4(kind)?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(shape_err(
                kind,
                format!("input {:?} incompatible with weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::InvalidAttribute {
                op: kind,
                detail: format!("stride {stride} not in {{1,2}}"),
            });
        }
        let geom = ConvGeom::new(h, wd, k, stride);
        let out = kernels::conv_forward(self.value(x).data(), n, cin, self.value(w).data(), cout, &geom);
        let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        self.push(
            kind,
            value,
            Op::Conv {
                kind,
                x,
                w,
                geom,
                n,
                cin,
                cout,
            },
            &[x, w],
        )
    }

    /// Per-channel convolution, `x: N×C×H×W`, `w: C×1×k×k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(w)?;
        let kind = OpKind::DepthwiseConv2d;
        let (n, c, h, wd) = self.value(x).dims4(kind)?;
        let (wc, one, k, k2) = self.value(w).dims4(kind)?;
        if wc != c || one != 1 || k != k2 || k % 2 == 0 {
            return Err(shape_err(
                kind,
                format!("input {:?} incompatible with weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::InvalidAttribute {
                op: kind,
                detail: format!("stride {stride} not in {{1,2}}"),
            });
        }
        let geom = ConvGeom::new(h, wd, k, stride);
        let out = kernels::depthwise_forward(self.value(x).data(), n, c, self.value(w).data(), &geom);
        let value = Tensor::new(&[n, c, geom.ho, geom.wo], out)?;
        self.push(
            kind,
            value,
            Op::Conv {
                kind,
                x,
                w,
                geom,
                n,
                cin: c,
                cout: c,
            },
            &[x, w],
        )
    }

    /// `(M×K) · (K×N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(shape_err(OpKind::MatMul, format!("expected 2-D operands, got {sa:?} and {sb:?}")));
            }
        };
        if k != k2 {
            return Err(shape_err(OpKind::MatMul, format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        self.push(OpKind::MatMul, value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(kind, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| if kind == OpKind::Add { x + y } else { x * y };
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ta, &tb, |i, oa, ob| out[i] = f(va[oa], vb[ob]));
            out
        };
        let value = Tensor::new(&out_shape, data)?;
        let op = if kind == OpKind::Add { Op::Add { a, b } } else { Op::Mul { a, b } };
        self.push(kind, value, op, &[a, b])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(OpKind::Add, a, b)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push(OpKind::Silu, value, Op::Silu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push(OpKind::Sigmoid, value, Op::Sigmoid { x }, &[x])
    }

    /// Per-channel normalization of an `N×C×H×W` (or `N×C`) input followed by
    /// the affine map `gamma·x̂ + beta`. In training mode the batch statistics
    /// are returned so the caller can fold them into running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let kind = OpKind::BatchNorm;
        let (n, c, spatial) = match self.shape(x) {
            &[n, c, h, w] => (n, c, h * w),
            &[n, c] => (n, c, 1),
            s => return Err(shape_err(kind, format!("expected N×C×H×W or N×C input, got {s:?}"))),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                kind,
                format!(
                    "{c} channels but scale has {} and shift has {}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let count = n * spatial;
        if count == 0 {
            return Err(shape_err(kind, "empty batch"));
        }
        let xs = self.value(x).data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xs[base..base + spatial].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        ss += xs[base..base + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err(kind, "running statistics do not match channel count"));
                }
                (running_mean.to_vec(), running_var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gs[ch] * h + bs[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let stats = train.then(|| BatchStats { mean, var, count });
        let v = self.push(
            kind,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels: c,
                spatial,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4(OpKind::GlobalAvgPool)?;
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err(OpKind::GlobalAvgPool, "empty spatial extent"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        self.push(OpKind::GlobalAvgPool, value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(x)?;
        let value = self.value(x).reshaped(shape)?;
        self.push(OpKind::Reshape, value, Op::Reshape { x }, &[x])
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err(OpKind::Mean, "mean of empty tensor"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(OpKind::Mean, value, Op::Mean { x }, &[x])
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(OpKind::Sum, value, Op::Sum { x }, &[x])
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push(OpKind::Scale, value, Op::Scale { x, factor }, &[x])
    }

    /// Row-wise log-softmax of an `N×C` tensor, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let cols = match self.shape(x) {
            &[_, c] if c > 0 => c,
            s => return Err(shape_err(OpKind::LogSoftmax, format!("expected N×C input, got {s:?}"))),
        };
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push(OpKind::LogSoftmax, value, Op::LogSoftmax { x, cols }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    None => grads[v.0] = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), gout)?);
                }
                Op::Conv {
                    kind,
                    x,
                    w,
                    geom,
                    n,
                    cin,
                    cout,
                } => {
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    let (dx, dw) = if *kind == OpKind::DepthwiseConv2d {
                        kernels::depthwise_backward(xv, *n, *cin, wv, geom, &gout, wants(*x), wants(*w))
                    } else {
                        kernels::conv_backward(xv, *n, *cin, wv, *cout, geom, &gout, wants(*x), wants(*w))
                    };
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    if wants(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm(*m, *n, *k, &gout, false, nodes[b.0].value.data(), true, &mut da, 0.0);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm(*k, *m, *n, nodes[a.0].value.data(), true, &gout, false, &mut db, 0.0);
                        acc(*b, db);
                    }
                }
                Op::Add { a, b } | Op::Mul { a, b } => {
                    let is_mul = matches!(node.op, Op::Mul { .. });
                    let out_shape = node.value.shape();
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if ta.shape() == tb.shape() {
                        if wants(*a) {
                            let d = if is_mul {
                                gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect()
                            } else {
                                gout.clone()
                            };
                            acc(*a, d);
                        }
                        if wants(*b) {
                            let d = if is_mul {
                                gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect()
                            } else {
                                gout.clone()
                            };
                            acc(*b, d);
                        }
                    } else {
                        let sa = broadcast_strides(ta.shape(), out_shape);
                        let sb = broadcast_strides(tb.shape(), out_shape);
                        let mut da = vec![0.0; if wants(*a) { ta.len() } else { 0 }];
                        let mut db = vec![0.0; if wants(*b) { tb.len() } else { 0 }];
                        let (va, vb) = (ta.data(), tb.data());
                        let (need_a, need_b) = (wants(*a), wants(*b));
                        for_each_broadcast(out_shape, &sa, &sb, |j, oa, ob| {
                            let g = gout[j];
                            if need_a {
                                da[oa] += if is_mul { g * vb[ob] } else { g };
                            }
                            if need_b {
                                db[ob] += if is_mul { g * va[oa] } else { g };
                            }
                        });
                        if need_a {
                            acc(*a, da);
                        }
                        if need_b {
                            acc(*b, db);
                        }
                    }
                }
                Op::Silu { x } => {
                    let d = gout
                        .iter()
                        .zip(nodes[x.0].value.data())
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    acc(*x, d);
                }
                Op::Sigmoid { x } => {
                    let d = gout
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    acc(*x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                    channels,
                    spatial,
                } => {
                    let c = *channels;
                    let sp = *spatial;
                    let n = xhat.len() / (c * sp);
                    let m = (n * sp) as f64;
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * sp;
                            for j in base..base + sp {
                                sum_dy[ch] += gout[j];
                                sum_dy_xhat[ch] += gout[j] * xhat[j];
                            }
                        }
                    }
                    if wants(*x) {
                        let gs = nodes[gamma.0].value.data();
                        let mut dx = vec![0.0; xhat.len()];
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * sp;
                                let k = gs[ch] * inv_std[ch];
                                for j in base..base + sp {
                                    dx[j] = if *train {
                                        k * (gout[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xhat[ch] / m)
                                    } else {
                                        k * gout[j]
                                    };
                                }
                            }
                        }
                        acc(*x, dx);
                    }
                    acc(*gamma, sum_dy_xhat);
                    acc(*beta, sum_dy);
                }
                Op::GlobalAvgPool { x } => {
                    let (_, _, h, w) = nodes[x.0].value.dims4(OpKind::GlobalAvgPool)?;
                    let hw = h * w;
                    let mut d = Vec::with_capacity(gout.len() * hw);
                    for g in &gout {
                        d.extend(std::iter::repeat_n(g / hw as f64, hw));
                    }
                    acc(*x, d);
                }
                Op::Reshape { x } => acc(*x, gout),
                Op::Mean { x } => {
                    let len = nodes[x.0].value.len();
                    acc(*x, vec![gout[0] / len as f64; len]);
                }
                Op::Sum { x } => {
                    let len = nodes[x.0].value.len();
                    acc(*x, vec![gout[0]; len]);
                }
                Op::Scale { x, factor } => acc(*x, gout.iter().map(|g| g * factor).collect()),
                Op::LogSoftmax { x, cols } => {
                    let mut d = vec![0.0; gout.len()];
                    for ((drow, grow), yrow) in d
                        .chunks_mut(*cols)
                        .zip(gout.chunks(*cols))
                        .zip(node.value.data().chunks(*cols))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..*cols {
                            drow[j] = grow[j] - yrow[j].exp() * s;
                        }
                    }
                    acc(*x, d);
                }
            }
        }

        // Drop saved intermediates; values stay readable.
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(Gradients { by_var: leaf_grads })
    }
}
