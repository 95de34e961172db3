use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Hadamard product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// max(x,0) + a*min(x,0) with learnable scalar `alpha`.
    PRelu { x: NodeId, alpha: NodeId },
    /// Dilated 1-D correlation with replication padding, length-preserving.
    Conv1d {
        signal: NodeId,
        kernel: NodeId,
        dilation: usize,
    },
    /// Multi-channel 1-D correlation: input [cin,p], kernel [cout,cin,k] -> [cout,p].
    ConvMc { input: NodeId, kernel: NodeId },
    /// Time-space correlation for the dilated causal stack: input [T,p],
    /// kernel [kt,ks] -> [T-(kt-1)*dl, p]. Causal in time (no time padding),
    /// replication padding in space.
    ConvTs {
        input: NodeId,
        kernel: NodeId,
        time_dilation: usize,
    },
    /// x [c,p] + b [c] broadcast over space.
    BiasChannel { x: NodeId, b: NodeId },
    /// x [c,p] * s [c] broadcast over space.
    ScaleChannel { x: NodeId, s: NodeId },
    /// mat [p,m] * vec [m] -> [p].
    MatVec { mat: NodeId, vec: NodeId },
    Sum(NodeId),
    SumSq(NodeId),
    /// Sum of Huber losses rho(x_j) with width gamma.
    HuberSum { x: NodeId, gamma: f64 },
    /// out[i] = x[i] - 2 x[i+1] + x[i+2], [p] -> [p-2].
    SecondDiff(NodeId),
    /// Same data, new shape.
    Reshape(NodeId),
    /// x + s broadcast, s scalar.
    Shift { x: NodeId, s: NodeId },
    /// n vectors of length p stacked into [n,p].
    StackRows(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list rebuilt per forward pass. Ops are recorded in topological
/// order; `backward` replays them once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, zero-filled when the loss does not depend on it.
    pub fn wrt_or_zero(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads[id.0] {
            Some(ref g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn clamp(i: isize, len: usize) -> usize {
    i.max(0).min(len as isize - 1) as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn binary_shape_check(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check(a, b, "add")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check(a, b, "sub")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check(a, b, "hadamard")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a))
    }

    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        if !self.value(alpha).is_scalar() {
            return Err(Error::ShapeMismatch("prelu alpha must be scalar".into()));
        }
        let a = self.value(alpha).item();
        let data = self
            .value(x)
            .data
            .iter()
            .map(|v| v.max(0.0) + a * v.min(0.0))
            .collect();
        let shape = self.value(x).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::PRelu { x, alpha }))
    }

    /// Length-preserving dilated 1-D correlation with replication padding.
    pub fn conv1d(&mut self, signal: NodeId, kernel: NodeId, dilation: usize) -> Result<NodeId> {
        let sig = self.value(signal);
        let ker = self.value(kernel);
        if sig.shape.len() != 1 || ker.shape.len() != 1 {
            return Err(Error::ShapeMismatch("conv1d expects 1-D tensors".into()));
        }
        let (p, k) = (sig.numel(), ker.numel());
        if k % 2 == 0 {
            return Err(Error::InvalidArgument("conv1d kernel length must be odd".into()));
        }
        if dilation < 1 {
            return Err(Error::InvalidArgument("conv1d dilation must be >= 1".into()));
        }
        let half = dilation * (k - 1) / 2;
        if k > p + 2 * half {
            return Err(Error::InvalidArgument(
                "conv1d kernel longer than padded signal".into(),
            ));
        }
        let mut out = vec![0.0; p];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k {
                let idx = clamp(i as isize + (j * dilation) as isize - half as isize, p);
                acc += ker.data[j] * sig.data[idx];
            }
            *o = acc;
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::Conv1d {
                signal,
                kernel,
                dilation,
            },
        ))
    }

    /// Multi-channel 1-D correlation, replication padding, dilation 1.
    /// input [cin,p], kernel [cout,cin,k] -> [cout,p].
    pub fn conv_mc(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(kernel);
        if x.shape.len() != 2 || w.shape.len() != 3 {
            return Err(Error::ShapeMismatch(
                "conv_mc expects input [cin,p], kernel [cout,cin,k]".into(),
            ));
        }
        let (cin, p) = (x.shape[0], x.shape[1]);
        let (cout, wcin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv_mc channel mismatch: input {cin}, kernel {wcin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument("conv_mc kernel length must be odd".into()));
        }
        let half = (k - 1) / 2;
        let mut out = vec![0.0; cout * p];
        for co in 0..cout {
            for ci in 0..cin {
                let wk = &w.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                let xs = &x.data[ci * p..(ci + 1) * p];
                let os = &mut out[co * p..(co + 1) * p];
                // interior: no clamping needed
                let lo = half.min(p);
                let hi = p.saturating_sub(half).max(lo);
                for (i, o) in os.iter_mut().enumerate().take(lo) {
                    let mut acc = 0.0;
                    for (j, &w_j) in wk.iter().enumerate() {
                        acc += w_j * xs[clamp(i as isize + j as isize - half as isize, p)];
                    }
                    *o += acc;
                }
                for i in lo..hi {
                    let base = i - half;
                    let mut acc = 0.0;
                    for (j, &w_j) in wk.iter().enumerate() {
                        acc += w_j * xs[base + j];
                    }
                    os[i] += acc;
                }
                for (i, o) in os.iter_mut().enumerate().skip(hi) {
                    let mut acc = 0.0;
                    for (j, &w_j) in wk.iter().enumerate() {
                        acc += w_j * xs[clamp(i as isize + j as isize - half as isize, p)];
                    }
                    *o += acc;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![cout, p], out)?,
            Op::ConvMc { input, kernel },
        ))
    }

    /// Time-space correlation: input [T,p], kernel [kt,ks], causal valid in
    /// time with dilation, replication-padded (length-preserving) in space.
    pub fn conv_ts(&mut self, input: NodeId, kernel: NodeId, time_dilation: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(kernel);
        if x.shape.len() != 2 || w.shape.len() != 2 {
            return Err(Error::ShapeMismatch(
                "conv_ts expects input [T,p], kernel [kt,ks]".into(),
            ));
        }
        let (t_in, p) = (x.shape[0], x.shape[1]);
        let (kt, ks) = (w.shape[0], w.shape[1]);
        if ks % 2 == 0 {
            return Err(Error::InvalidArgument("conv_ts spatial kernel must be odd".into()));
        }
        let span = (kt - 1) * time_dilation;
        if t_in <= span {
            return Err(Error::ShapeMismatch(format!(
                "conv_ts needs more than {span} input frames, got {t_in}"
            )));
        }
        let half = (ks - 1) / 2;
        let t_out = t_in - span;
        let mut out = vec![0.0; t_out * p];
        for to in 0..t_out {
            for a in 0..kt {
                let frame = &x.data[(to + a * time_dilation) * p..(to + a * time_dilation + 1) * p];
                let wk = &w.data[a * ks..(a + 1) * ks];
                let os = &mut out[to * p..(to + 1) * p];
                for (s, o) in os.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &w_j) in wk.iter().enumerate() {
                        acc += w_j * frame[clamp(s as isize + j as isize - half as isize, p)];
                    }
                    *o += acc;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_out, p], out)?,
            Op::ConvTs {
                input,
                kernel,
                time_dilation,
            },
        ))
    }

    pub fn bias_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.shape.len() != 2 || bv.shape != vec![xv.shape[0]] {
            return Err(Error::ShapeMismatch("bias_channel: x [c,p], b [c]".into()));
        }
        let (c, p) = (xv.shape[0], xv.shape[1]);
        let mut data = xv.data.clone();
        for ci in 0..c {
            let bi = bv.data[ci];
            for v in &mut data[ci * p..(ci + 1) * p] {
                *v += bi;
            }
        }
        Ok(self.push(Tensor::new(vec![c, p], data)?, Op::BiasChannel { x, b }))
    }

    pub fn scale_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let sv = self.value(s);
        if xv.shape.len() != 2 || sv.shape != vec![xv.shape[0]] {
            return Err(Error::ShapeMismatch("scale_channel: x [c,p], s [c]".into()));
        }
        let (c, p) = (xv.shape[0], xv.shape[1]);
        let mut data = xv.data.clone();
        for ci in 0..c {
            let si = sv.data[ci];
            for v in &mut data[ci * p..(ci + 1) * p] {
                *v *= si;
            }
        }
        Ok(self.push(Tensor::new(vec![c, p], data)?, Op::ScaleChannel { x, s }))
    }

    /// mat [p,m] * vec [m] -> [p].
    pub fn matvec(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let m = self.value(mat);
        let v = self.value(vec);
        if m.shape.len() != 2 || v.shape.len() != 1 || m.shape[1] != v.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {:?} x {:?}",
                m.shape, v.shape
            )));
        }
        let (p, cols) = (m.shape[0], m.shape[1]);
        let mut out = vec![0.0; p];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &m.data[i * cols..(i + 1) * cols];
            *o = row.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec { mat, vec }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSq(a))
    }

    /// Sum of Huber losses: rho(x) = x^2 for |x| <= gamma/2, else gamma|x| - gamma^2/4.
    pub fn huber_sum(&mut self, a: NodeId, gamma: f64) -> Result<NodeId> {
        if gamma <= 0.0 {
            return Err(Error::InvalidArgument("huber gamma must be positive".into()));
        }
        let s = self
            .value(a)
            .data
            .iter()
            .map(|&x| crate::phase1::huber(x, gamma))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::HuberSum { x: a, gamma }))
    }

    /// Second difference along a 1-D tensor: [p] -> [p-2].
    pub fn second_diff(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape.len() != 1 || x.numel() < 3 {
            return Err(Error::ShapeMismatch(
                "second_diff expects a 1-D tensor of length >= 3".into(),
            ));
        }
        let p = x.numel();
        let out = (0..p - 2)
            .map(|i| x.data[i] - 2.0 * x.data[i + 1] + x.data[i + 2])
            .collect();
        Ok(self.push(Tensor::vector(out), Op::SecondDiff(a)))
    }

    /// Same storage under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.value(a).shape,
                shape
            )));
        }
        let data = self.value(a).data.clone();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a)))
    }

    /// Broadcast-add a scalar node to every entry.
    pub fn shift(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch("shift offset must be scalar".into()));
        }
        let sv = self.value(s).item();
        let data = self.value(x).data.iter().map(|v| v + sv).collect();
        let shape = self.value(x).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Shift { x, s }))
    }

    /// Stack n equal-length vectors into an [n,p] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("stack_rows needs rows".into()));
        }
        let p = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            let v = self.value(r);
            if v.shape.len() != 1 || v.numel() != p {
                return Err(Error::ShapeMismatch(
                    "stack_rows: all rows must be vectors of one length".into(),
                ));
            }
            data.extend_from_slice(&v.data);
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), p], data)?,
            Op::StackRows(rows.to_vec()),
        ))
    }

    /// Reverse pass from a scalar loss node. Visits each node exactly once
    /// in reverse topological order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    context: "gradient".into(),
                });
            }
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, update: impl Fn(&mut [f64])) {
        let slot = grads[id.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(id).shape.clone()));
        update(&mut slot.data);
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                self.accum(grads, *b, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                self.accum(grads, *b, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * c;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value.data;
                let y = y.clone();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data.clone();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data.clone();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g.data[i];
                        }
                    }
                });
            }
            Op::PRelu { x, alpha } => {
                let xv = self.value(*x).data.clone();
                let a = self.value(*alpha).item();
                self.accum(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g.data[i] * if xv[i] > 0.0 { 1.0 } else { a };
                    }
                });
                let da: f64 = xv
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gi)| gi * x.min(0.0))
                    .sum();
                self.accum(grads, *alpha, |d| d[0] += da);
            }
            Op::Conv1d {
                signal,
                kernel,
                dilation,
            } => {
                let sig = self.value(*signal).data.clone();
                let ker = self.value(*kernel).data.clone();
                let (p, k, dil) = (sig.len(), ker.len(), *dilation);
                let half = dil * (k - 1) / 2;
                self.accum(grads, *signal, |d| {
                    for i in 0..p {
                        for (j, &kj) in ker.iter().enumerate() {
                            let idx = clamp(i as isize + (j * dil) as isize - half as isize, p);
                            d[idx] += g.data[i] * kj;
                        }
                    }
                });
                self.accum(grads, *kernel, |d| {
                    for i in 0..p {
                        for (j, dj) in d.iter_mut().enumerate() {
                            let idx = clamp(i as isize + (j * dil) as isize - half as isize, p);
                            *dj += g.data[i] * sig[idx];
                        }
                    }
                });
            }
            Op::ConvMc { input, kernel } => {
                let x = self.value(*input).clone();
                let w = self.value(*kernel).clone();
                let (cin, p) = (x.shape[0], x.shape[1]);
                let (cout, k) = (w.shape[0], w.shape[2]);
                let half = (k - 1) / 2;
                self.accum(grads, *input, |d| {
                    for co in 0..cout {
                        let go = &g.data[co * p..(co + 1) * p];
                        for ci in 0..cin {
                            let wk = &w.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                            let ds = &mut d[ci * p..(ci + 1) * p];
                            for (i, &gi) in go.iter().enumerate() {
                                for (j, &wj) in wk.iter().enumerate() {
                                    let idx =
                                        clamp(i as isize + j as isize - half as isize, p);
                                    ds[idx] += gi * wj;
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *kernel, |d| {
                    for co in 0..cout {
                        let go = &g.data[co * p..(co + 1) * p];
                        for ci in 0..cin {
                            let xs = &x.data[ci * p..(ci + 1) * p];
                            let dk = &mut d[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                            for (i, &gi) in go.iter().enumerate() {
                                for (j, dj) in dk.iter_mut().enumerate() {
                                    let idx =
                                        clamp(i as isize + j as isize - half as isize, p);
                                    *dj += gi * xs[idx];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTs {
                input,
                kernel,
                time_dilation,
            } => {
                let x = self.value(*input).clone();
                let w = self.value(*kernel).clone();
                let (_, p) = (x.shape[0], x.shape[1]);
                let (kt, ks) = (w.shape[0], w.shape[1]);
                let dl = *time_dilation;
                let half = (ks - 1) / 2;
                let t_out = g.shape[0];
                self.accum(grads, *input, |d| {
                    for to in 0..t_out {
                        let go = &g.data[to * p..(to + 1) * p];
                        for a in 0..kt {
                            let tin = to + a * dl;
                            let wk = &w.data[a * ks..(a + 1) * ks];
                            let ds = &mut d[tin * p..(tin + 1) * p];
                            for (s, &gs) in go.iter().enumerate() {
                                for (j, &wj) in wk.iter().enumerate() {
                                    let idx =
                                        clamp(s as isize + j as isize - half as isize, p);
                                    ds[idx] += gs * wj;
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *kernel, |d| {
                    for to in 0..t_out {
                        let go = &g.data[to * p..(to + 1) * p];
                        for a in 0..kt {
                            let tin = to + a * dl;
                            let frame = &x.data[tin * p..(tin + 1) * p];
                            let dk = &mut d[a * ks..(a + 1) * ks];
                            for (s, &gs) in go.iter().enumerate() {
                                for (j, dj) in dk.iter_mut().enumerate() {
                                    let idx =
                                        clamp(s as isize + j as isize - half as isize, p);
                                    *dj += gs * frame[idx];
                                }
                            }
                        }
                    }
                });
            }
            Op::BiasChannel { x, b } => {
                let (c, p) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                self.accum(grads, *x, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                self.accum(grads, *b, |d| {
                    for ci in 0..c {
                        d[ci] += g.data[ci * p..(ci + 1) * p].iter().sum::<f64>();
                    }
                });
            }
            Op::ScaleChannel { x, s } => {
                let xv = self.value(*x).clone();
                let sv = self.value(*s).data.clone();
                let (c, p) = (xv.shape[0], xv.shape[1]);
                self.accum(grads, *x, |d| {
                    for ci in 0..c {
                        for i in 0..p {
                            d[ci * p + i] += g.data[ci * p + i] * sv[ci];
                        }
                    }
                });
                self.accum(grads, *s, |d| {
                    for ci in 0..c {
                        d[ci] += g.data[ci * p..(ci + 1) * p]
                            .iter()
                            .zip(&xv.data[ci * p..(ci + 1) * p])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::MatVec { mat, vec } => {
                let m = self.value(*mat).clone();
                let v = self.value(*vec).data.clone();
                let (p, cols) = (m.shape[0], m.shape[1]);
                self.accum(grads, *vec, |d| {
                    for i in 0..p {
                        let row = &m.data[i * cols..(i + 1) * cols];
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj += g.data[i] * row[j];
                        }
                    }
                });
                self.accum(grads, *mat, |d| {
                    for i in 0..p {
                        for (j, &vj) in v.iter().enumerate() {
                            d[i * cols + j] += g.data[i] * vj;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.item();
                self.accum(grads, *a, |d| d.iter_mut().for_each(|x| *x += gs));
            }
            Op::SumSq(a) => {
                let gs = g.item();
                let x = self.value(*a).data.clone();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gs * 2.0 * x[i];
                    }
                });
            }
            Op::HuberSum { x, gamma } => {
                let gs = g.item();
                let gamma = *gamma;
                let xv = self.value(*x).data.clone();
                self.accum(grads, *x, |d| {
                    for i in 0..d.len() {
                        let v = xv[i];
                        let dv = if v.abs() <= gamma / 2.0 {
                            2.0 * v
                        } else {
                            gamma * v.signum()
                        };
                        d[i] += gs * dv;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
            }
            Op::Shift { x, s } => {
                self.accum(grads, *x, |d| {
                    d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y)
                });
                let gs: f64 = g.data.iter().sum();
                self.accum(grads, *s, |d| d[0] += gs);
            }
            Op::StackRows(rows) => {
                let p = self.value(rows[0]).numel();
                for (i, &r) in rows.iter().enumerate() {
                    self.accum(grads, r, |d| {
                        d.iter_mut()
                            .zip(&g.data[i * p..(i + 1) * p])
                            .for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::SecondDiff(a) => {
                self.accum(grads, *a, |d| {
                    for (i, &gi) in g.data.iter().enumerate() {
                        d[i] += gi;
                        d[i + 1] -= 2.0 * gi;
                        d[i + 2] += gi;
                    }
                });
            }
        }
        Ok(())
    }
}
