//! Flat reverse-mode tape. Nodes are appended in execution order and never
//! mutated; backward walks the list once in reverse. A tape lives for one
//! forward window and is dropped afterwards, which is what bounds memory at
//! O(timesteps x layers).
//!
//! Gradient storage is additive: each `backward` call runs a fresh pass and
//! adds its result into the persistent per-node accumulators, so two calls
//! without `zero_grads` double every gradient. Replays are deterministic;
//! there is no parallelism inside a tape.

use crate::error::{Error, Result};
use crate::surrogate::{
    heaviside, sg_argument, sg_derivative, ScaleMode, SurrogateConfig,
};
use crate::tensor::{
    avgpool2d, avgpool2d_backward, channel_view, conv2d, conv2d_backward, matmul, matmul_nt,
    matmul_tn, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Saved context for a batch-norm node.
#[derive(Clone, Debug)]
pub struct BnSaved<S> {
    /// Normalized input, needed for d(gain) in both modes.
    xhat: Tensor<S>,
    /// Per-channel 1/sqrt(var + eps).
    inv_std: Vec<S>,
    /// True when normalization used the batch statistics (training path);
    /// false when it used running statistics (eval path).
    batch_stats: bool,
}

/// Backward rule for a value recorded with `custom_grad`. The registry is
/// closed: every rule the kit uses is a variant here, so an unknown rule is
/// unrepresentable rather than a runtime error.
#[derive(Clone, Debug)]
pub enum CustomRule<S> {
    /// Binary spike S = H(M - V_thr) with surrogate backward.
    /// Inputs are [membrane, vthr]. `x` is the saved surrogate argument,
    /// `m` the membrane values, `vthr` the threshold at forward time.
    Spike {
        cfg: SurrogateConfig,
        x: Tensor<S>,
        m: Tensor<S>,
        vthr: S,
    },
}

enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Multiply by a compile-time constant (not a node).
    ScalarMul(NodeId, S),
    /// Elementwise product; one side may be a 1-element tensor, which
    /// broadcasts.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// x [B,F] + bias [F], or x [N,C,H,W] + bias [C].
    AddBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
        stride: usize,
    },
    Relu(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        rows: usize,
    },
    /// Identity. Exists so a consumer-specific gradient can be read off the
    /// alias node while still accumulating into the source.
    Alias(NodeId),
    /// M = (1 - 1/tau) U + (1/tau) I with scalar node tau.
    MembraneUpdate {
        u: NodeId,
        i: NodeId,
        tau: NodeId,
    },
    /// U = M - vthr * S, spikes treated as constant in backward.
    ResetSoft {
        m: NodeId,
        vthr: NodeId,
        s: Tensor<S>,
    },
    /// U = M * (1 - S), spikes treated as constant in backward.
    ResetHard {
        m: NodeId,
        s: Tensor<S>,
    },
    /// tau = 1 / sigmoid(w), scalar.
    ReparamTau(NodeId),
    /// vthr = softplus(k), scalar.
    ReparamVthr(NodeId),
    BatchNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        saved: BnSaved<S>,
    },
    /// Scalar mean of -log softmax(logits)[label] over the batch.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: Tensor<S>,
    },
    CustomGrad {
        inputs: Vec<NodeId>,
        rule: CustomRule<S>,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.index()].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        id
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::ScalarMul(a, c), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        // scalar coefficients broadcast; a scalar-scalar product takes b's shape
        let v = if va.is_scalar() {
            vb.scale(va.scalar_value())
        } else if vb.is_scalar() {
            va.scale(vb.scalar_value())
        } else {
            if va.shape() != vb.shape() {
                return Err(Error::shape(
                    "mul",
                    format!("{:?} vs {:?}", va.shape(), vb.shape()),
                ));
            }
            va.zip(vb, |x, y| x * y)?
        };
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, c, inner) = channel_view(xv.shape())?;
        if bv.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} on input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        {
            let bd = bv.data().to_vec();
            let od = out.data_mut();
            for (i, o) in od.iter_mut().enumerate() {
                let ch = (i / inner) % c;
                *o = *o + bd[ch];
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, v))
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let v = avgpool2d(self.value(x), k, stride)?;
        Ok(self.push(Op::AvgPool2d { x, k, stride }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > S::zero() { a } else { S::zero() });
        self.push(Op::Relu(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar_tensor(self.value(x).mean());
        self.push(Op::Mean(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: S = self.value(x).data().iter().copied().sum();
        let v = Tensor::scalar_tensor(s);
        self.push(Op::Sum(x), v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != first[1..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", s, first),
                ));
            }
            rows += s[0];
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if start + rows > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + rows, shape),
            ));
        }
        let stride: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = rows;
        let data = xv.data()[start * stride..(start + rows) * stride].to_vec();
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(Op::SliceRows { x, start, rows }, v))
    }

    pub fn alias(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(Op::Alias(x), v)
    }

    /// Leak-integrate: M = (1 - 1/tau) U + (1/tau) I. `tau` must be a scalar
    /// node with value > 1.
    pub fn membrane_update(&mut self, u: NodeId, i: NodeId, tau: NodeId) -> Result<NodeId> {
        self.same_shape("membrane_update", u, i)?;
        let tv = self.value(tau);
        if !tv.is_scalar() {
            return Err(Error::invalid("membrane_update", "tau must be scalar"));
        }
        let t = tv.scalar_value();
        if !(t > S::one()) {
            return Err(Error::invalid(
                "membrane_update",
                format!("tau must be > 1, got {}", t),
            ));
        }
        let inv = t.recip();
        let keep = S::one() - inv;
        let v = self.value(u).zip(self.value(i), |uu, ii| keep * uu + inv * ii)?;
        Ok(self.push(Op::MembraneUpdate { u, i, tau }, v))
    }

    /// Spike with surrogate backward. Returns the node holding the binary
    /// spikes; callers handle output scaling (`ThresholdInvariant` multiplies
    /// by the vthr node). `vthr` must be a positive scalar node.
    pub fn spike(&mut self, m: NodeId, vthr: NodeId, cfg: &SurrogateConfig) -> Result<NodeId> {
        let vv = self.value(vthr);
        if !vv.is_scalar() {
            return Err(Error::invalid("spike", "vthr must be scalar"));
        }
        let v = vv.scalar_value();
        if !(v > S::zero()) {
            return Err(Error::invalid(
                "spike",
                format!("vthr must be > 0, got {}", v),
            ));
        }
        let mv = self.value(m).clone();
        let s = mv.map(|x| heaviside(x, v));
        let x = mv.map(|x| sg_argument(cfg.mode, x, v));
        self.custom_grad(
            s,
            &[m, vthr],
            CustomRule::Spike {
                cfg: *cfg,
                x,
                m: mv,
                vthr: v,
            },
        )
    }

    /// Record a precomputed value with a registered backward rule.
    pub fn custom_grad(
        &mut self,
        value: Tensor<S>,
        inputs: &[NodeId],
        rule: CustomRule<S>,
    ) -> Result<NodeId> {
        match &rule {
            CustomRule::Spike { x, m, .. } => {
                if inputs.len() != 2 {
                    return Err(Error::invalid("custom_grad", "spike rule wants [m, vthr]"));
                }
                if x.shape() != value.shape() || m.shape() != value.shape() {
                    return Err(Error::shape("custom_grad", "saved context vs value"));
                }
            }
        }
        Ok(self.push(
            Op::CustomGrad {
                inputs: inputs.to_vec(),
                rule,
            },
            value,
        ))
    }

    /// Soft reset: U = M - vthr * S. S is saved as a constant; backward sends
    /// nothing through it (straight-through), so dU/dM = 1 and
    /// dU/dvthr = -sum(g * S).
    pub fn reset_soft(&mut self, m: NodeId, vthr: NodeId, s: &Tensor<S>) -> Result<NodeId> {
        if self.value(m).shape() != s.shape() {
            return Err(Error::shape("reset_soft", "spikes vs membrane"));
        }
        let v = self.value(vthr).scalar_value();
        let out = self.value(m).zip(s, |mm, ss| mm - v * ss)?;
        Ok(self.push(
            Op::ResetSoft {
                m,
                vthr,
                s: s.clone(),
            },
            out,
        ))
    }

    /// Hard reset: U = M * (1 - S), S constant in backward.
    pub fn reset_hard(&mut self, m: NodeId, s: &Tensor<S>) -> Result<NodeId> {
        if self.value(m).shape() != s.shape() {
            return Err(Error::shape("reset_hard", "spikes vs membrane"));
        }
        let out = self.value(m).zip(s, |mm, ss| mm * (S::one() - ss))?;
        Ok(self.push(Op::ResetHard { m, s: s.clone() }, out))
    }

    /// tau = 1 / sigmoid(w_raw), always in (1, inf) for finite w_raw.
    pub fn reparam_tau(&mut self, w_raw: NodeId) -> Result<NodeId> {
        let wv = self.value(w_raw);
        if !wv.is_scalar() {
            return Err(Error::invalid("reparam_tau", "w_raw must be scalar"));
        }
        let tau = crate::lif::tau_from_raw(wv.scalar_value());
        Ok(self.push(Op::ReparamTau(w_raw), Tensor::scalar_tensor(tau)))
    }

    /// vthr = softplus(k_raw), always in (0, inf).
    pub fn reparam_vthr(&mut self, k_raw: NodeId) -> Result<NodeId> {
        let kv = self.value(k_raw);
        if !kv.is_scalar() {
            return Err(Error::invalid("reparam_vthr", "k_raw must be scalar"));
        }
        let vthr = crate::lif::vthr_from_raw(kv.scalar_value());
        Ok(self.push(Op::ReparamVthr(k_raw), Tensor::scalar_tensor(vthr)))
    }

    /// Channelwise normalization. With `running: None` the statistics come
    /// from `x` itself (training path; the caller updates its running
    /// estimates from the returned stats); otherwise `running` supplies them
    /// (eval path).
    /// Input is [B,C] or [N,C,H,W]; the caller has already folded time into
    /// the batch dimension.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c, inner) = channel_view(xv.shape())?;
        let gv = self.value(gain);
        let sv = self.value(shift);
        if gv.shape() != [c] || sv.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine {:?}/{:?} on {} channels", gv.shape(), sv.shape(), c),
            ));
        }
        let count = (n * inner) as f64;
        if count == 0.0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }

        // statistics in f64 regardless of S, for stability
        let (mean, var, batch_stats) = match running {
            None => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                let xd = xv.data();
                for (i, v) in xd.iter().enumerate() {
                    mean[(i / inner) % c] += v.as_f64();
                }
                for m in &mut mean {
                    *m /= count;
                }
                for (i, v) in xd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    let d = v.as_f64() - mean[ch];
                    var[ch] += d * d;
                }
                for v in &mut var {
                    *v /= count; // biased, used for normalization
                }
                (mean, var, true)
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };

        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let mean_s: Vec<S> = mean.iter().map(|&m| S::from_f64(m)).collect();

        let mut xhat = xv.clone();
        {
            let xd = xhat.data_mut();
            for (i, v) in xd.iter_mut().enumerate() {
                let ch = (i / inner) % c;
                *v = (*v - mean_s[ch]) * inv_std[ch];
            }
        }
        let mut out = xhat.clone();
        {
            let gd = gv.data().to_vec();
            let sd = sv.data().to_vec();
            let od = out.data_mut();
            for (i, v) in od.iter_mut().enumerate() {
                let ch = (i / inner) % c;
                *v = gd[ch] * *v + sd[ch];
            }
        }
        let saved = BnSaved {
            xhat,
            inv_std,
            batch_stats,
        };
        let id = self.push(
            Op::BatchNorm {
                x,
                gain,
                shift,
                saved,
            },
            out,
        );
        Ok((id, mean, var))
    }

    /// Mean cross-entropy between softmax(logits) and integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, classes) = lv.dims2()?;
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {}", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {} out of range {}", bad, classes),
            ));
        }
        let mut p = lv.clone();
        let mut loss = 0.0f64;
        {
            let pd = p.data_mut();
            for (i, &label) in labels.iter().enumerate() {
                let row = &mut pd[i * classes..(i + 1) * classes];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z = z + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
                loss -= row[label].as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        let value = Tensor::scalar_tensor(S::from_f64(loss / b as f64));
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax: p,
            },
            value,
        ))
    }

    // -- backward ----------------------------------------------------------

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.index()].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse pass from a scalar loss node. Results are added into the
    /// persistent accumulators (see module docs).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut work: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        work[loss.index()] = Some(Tensor::scalar_tensor(S::one()));

        for idx in (0..=loss.index()).rev() {
            let Some(g) = work[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut work)?;
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        // nodes after the loss can't influence it but may carry grads from a
        // previous backward; leave them untouched
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, work: &mut [Option<Tensor<S>>]) -> Result<()> {
        fn accum<S: Scalar>(work: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
            match &mut work[id.index()] {
                Some(acc) => acc.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        }

        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(work, *a, g.clone());
                accum(work, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(work, *a, g.clone());
                accum(work, *b, g.scale(-S::one()));
            }
            Op::ScalarMul(a, c) => {
                accum(work, *a, g.scale(*c));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.is_scalar() {
                    let dot: S = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .sum();
                    accum(work, *a, Tensor::from_vec(va.shape(), vec![dot])?);
                    accum(work, *b, g.scale(va.scalar_value()));
                } else if vb.is_scalar() {
                    let dot: S = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &av)| gv * av)
                        .sum();
                    accum(work, *b, Tensor::from_vec(vb.shape(), vec![dot])?);
                    accum(work, *a, g.scale(vb.scalar_value()));
                } else {
                    accum(work, *a, g.zip(vb, |gv, bv| gv * bv)?);
                    accum(work, *b, g.zip(va, |gv, av| gv * av)?);
                }
            }
            Op::MatMul(a, b) => {
                accum(work, *a, matmul_nt(g, self.value(*b))?);
                accum(work, *b, matmul_tn(self.value(*a), g)?);
            }
            Op::AddBias(x, bias) => {
                let (_, c, inner) = channel_view(self.value(*x).shape())?;
                let mut db = vec![S::zero(); c];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[(i / inner) % c] = db[(i / inner) % c] + gv;
                }
                accum(work, *x, g.clone());
                accum(work, *bias, Tensor::from_vec(&[c], db)?);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = conv2d_backward(self.value(*x), self.value(*k), g, *stride, *pad)?;
                accum(work, *x, dx);
                accum(work, *k, dk);
            }
            Op::AvgPool2d { x, k, stride } => {
                let dx = avgpool2d_backward(self.value(*x).shape(), *k, *stride, g)?;
                accum(work, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip(self.value(*x), |gv, xv| {
                    if xv > S::zero() {
                        gv
                    } else {
                        S::zero()
                    }
                })?;
                accum(work, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g.scalar_value() / S::from_f64(n as f64);
                accum(work, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Sum(x) => {
                accum(
                    work,
                    *x,
                    Tensor::full(self.value(*x).shape(), g.scalar_value()),
                );
            }
            Op::Reshape(x) => {
                accum(work, *x, g.reshaped(self.value(*x).shape())?);
            }
            Op::ConcatRows(parts) => {
                let stride: usize = g.shape()[1..].iter().product();
                let mut row = 0usize;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    let data = g.data()[row * stride..(row + rows) * stride].to_vec();
                    accum(work, p, Tensor::from_vec(self.value(p).shape(), data)?);
                    row += rows;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let xs = self.value(*x).shape();
                let stride: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * stride..(start + rows) * stride]
                    .copy_from_slice(g.data());
                accum(work, *x, dx);
            }
            Op::Alias(x) => {
                accum(work, *x, g.clone());
            }
            Op::MembraneUpdate { u, i, tau } => {
                let t = self.value(*tau).scalar_value();
                let inv = t.recip();
                let keep = S::one() - inv;
                accum(work, *u, g.scale(keep));
                accum(work, *i, g.scale(inv));
                // dM/dtau = (U - I) / tau^2
                let uv = self.value(*u);
                let iv = self.value(*i);
                let mut dt = S::zero();
                for ((&gv, &uu), &ii) in g.data().iter().zip(uv.data()).zip(iv.data()) {
                    dt = dt + gv * (uu - ii);
                }
                dt = dt / (t * t);
                accum(work, *tau, Tensor::scalar_tensor(dt));
            }
            Op::ResetSoft { m, vthr, s } => {
                accum(work, *m, g.clone());
                let mut dv = S::zero();
                for (&gv, &sv) in g.data().iter().zip(s.data()) {
                    dv = dv - gv * sv;
                }
                accum(work, *vthr, Tensor::scalar_tensor(dv));
            }
            Op::ResetHard { m, s } => {
                let dm = g.zip(s, |gv, sv| gv * (S::one() - sv))?;
                accum(work, *m, dm);
            }
            Op::ReparamTau(w) => {
                // dtau/dw = 1 - tau
                let tau = node.value.scalar_value();
                accum(
                    work,
                    *w,
                    Tensor::scalar_tensor(g.scalar_value() * (S::one() - tau)),
                );
            }
            Op::ReparamVthr(k) => {
                // d softplus / dk = sigmoid(k)
                let kv = self.value(*k).scalar_value();
                let sig = crate::surrogate::sigmoid(kv);
                accum(work, *k, Tensor::scalar_tensor(g.scalar_value() * sig));
            }
            Op::BatchNorm {
                x,
                gain,
                shift,
                saved,
            } => {
                let (_, c, inner) = channel_view(self.value(*x).shape())?;
                let gd = self.value(*gain).data().to_vec();
                let mut dgain = vec![S::zero(); c];
                let mut dshift = vec![S::zero(); c];
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    dgain[ch] = dgain[ch] + gv * saved.xhat.data()[i];
                    dshift[ch] = dshift[ch] + gv;
                }
                let dx = if saved.batch_stats {
                    // dx = inv_std/n * gain * (n*g - sum(g) - xhat * sum(g*xhat))
                    let nctot = self.value(*x).len();
                    let per_ch = (nctot / c) as f64;
                    let n_s = S::from_f64(per_ch);
                    let mut dx = g.clone();
                    let dxd = dx.data_mut();
                    for (i, v) in dxd.iter_mut().enumerate() {
                        let ch = (i / inner) % c;
                        let term = n_s * *v - dshift[ch] - saved.xhat.data()[i] * dgain[ch];
                        *v = saved.inv_std[ch] * gd[ch] * term / n_s;
                    }
                    dx
                } else {
                    let mut dx = g.clone();
                    let dxd = dx.data_mut();
                    for (i, v) in dxd.iter_mut().enumerate() {
                        let ch = (i / inner) % c;
                        *v = *v * gd[ch] * saved.inv_std[ch];
                    }
                    dx
                };
                accum(work, *x, dx);
                accum(work, *gain, Tensor::from_vec(&[c], dgain)?);
                accum(work, *shift, Tensor::from_vec(&[c], dshift)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let (b, classes) = softmax.dims2()?;
                let scale = g.scalar_value() / S::from_f64(b as f64);
                let mut dl = softmax.clone();
                {
                    let d = dl.data_mut();
                    for (i, &label) in labels.iter().enumerate() {
                        d[i * classes + label] = d[i * classes + label] - S::one();
                    }
                    for v in d.iter_mut() {
                        *v = *v * scale;
                    }
                }
                accum(work, *logits, dl);
            }
            Op::CustomGrad { inputs, rule } => match rule {
                CustomRule::Spike { cfg, x, m, vthr } => {
                    let gamma = S::from_f64(cfg.gamma);
                    let v = *vthr;
                    // node-local dS/dM
                    let dm = g.zip(x, |gv, xv| {
                        let f = sg_derivative(cfg.shape, xv, gamma);
                        match cfg.mode {
                            ScaleMode::Absolute => gv * f,
                            ScaleMode::Relative | ScaleMode::ThresholdInvariant => gv * f / v,
                        }
                    })?;
                    accum(work, inputs[0], dm);
                    // node-local dS/dvthr
                    let mut dv = S::zero();
                    match cfg.mode {
                        ScaleMode::Absolute => {
                            for (&gv, &xv) in g.data().iter().zip(x.data()) {
                                dv = dv - gv * sg_derivative(cfg.shape, xv, gamma);
                            }
                        }
                        ScaleMode::Relative | ScaleMode::ThresholdInvariant => {
                            for ((&gv, &xv), &mv) in
                                g.data().iter().zip(x.data()).zip(m.data())
                            {
                                let f = sg_derivative(cfg.shape, xv, gamma);
                                dv = dv - gv * f * mv / (v * v);
                            }
                        }
                    }
                    accum(work, inputs[1], Tensor::scalar_tensor(dv));
                }
            },
        }
        Ok(())
    }
}
