use super::{gemm, shape_err, Real, Tensor, TensorError};

/// Variance floor of the channel normalization. Variances at or above it are
/// used as-is, so a standardized input passes through unchanged.
pub const NORM_EPS: Real = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics used by [`Tape::channel_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch (differentiable).
    Batch,
    /// Normalize with fixed, externally calibrated statistics.
    Fixed(&'a NormStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, stride: usize, pad: (usize, usize) },
    Depthwise { x: Var, w: Var, stride: usize, pad: (usize, usize) },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<Real>, inv_std: Vec<Real>, batch: bool, clamped: Vec<bool>, stats: NormStats },
    Relu { x: Var },
    Add { a: Var, b: Var },
    AddScalar { x: Var },
    GlobalAvgPool { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Real> },
    Crop { x: Var, offset: usize, full: Vec<usize> },
    Dot { x: Var, coeffs: Vec<Real> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Records a forward pass and differentiates it once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

// Geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: (usize, usize),
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(op: &'static str, x: &[usize], kh: usize, kw: usize, stride: usize, pad: (usize, usize)) -> Result<Self, TensorError> {
        if x.len() != 4 {
            return Err(shape_err(op, format!("input must be [N,C,H,W], got {x:?}")));
        }
        let (c, h, w) = (x[1], x[2], x[3]);
        if stride == 0 || h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(shape_err(op, format!("kernel {kh}x{kw} stride {stride} pad {pad:?} does not fit input {x:?}")));
        }
        let ho = (h + 2 * pad.0 - kh) / stride + 1;
        let wo = (w + 2 * pad.1 - kw) / stride + 1;
        Ok(Self { c, h, w, kh, kw, stride, pad, ho, wo })
    }

    fn is_identity_1x1(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == (0, 0)
    }

    // Source row/column for an output position and kernel offset, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(pad)?;
        (p < limit).then_some(p)
    }

    // cols[(c, ky, kx), (oy, ox)]
    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in 0..self.ho {
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        match self.src(oy, ky, self.pad.0, self.h) {
                            None => out.fill(0.0),
                            Some(iy) => {
                                for (ox, o) in out.iter_mut().enumerate() {
                                    *o = match self.src(ox, kx, self.pad.1, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[Real], dx: &mut [Real]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.pad.0, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.pad.1, self.w) {
                                plane[iy * self.w + ix] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], g: Vec<Real>) {
    match &mut grads[var.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, trainable: false, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: false, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf; [`Tape::backward`] leaves its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: true, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Batch statistics recorded by a [`Tape::channel_norm`] node.
    pub fn norm_stats(&self, var: Var) -> Option<&NormStats> {
        match &self.nodes[var.0].op {
            Op::Norm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("x {xs:?} incompatible with w {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("dense", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let mut y = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, din, dout, self.value(x).data(), (din, 1), self.value(w).data(), (1, din), beta, &mut y, (dout, 1));
        let value = Tensor::new(vec![n, dout], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Dense { x, w, b }, &inputs))
    }

    /// Standard convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: (usize, usize)) -> Result<Var, TensorError> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 {
            return Err(shape_err("conv2d", format!("weight must be [Cout,Cin,kh,kw], got {ws:?}")));
        }
        let g = ConvGeom::new("conv2d", &xs, ws[2], ws[3], stride, pad)?;
        if ws[1] != g.c {
            return Err(shape_err("conv2d", format!("input has {} channels, weight expects {}", g.c, ws[1])));
        }
        let (n, cout) = (xs[0], ws[0]);
        let k = g.c * g.kh * g.kw;
        let hw = g.ho * g.wo;
        let mut y = vec![0.0; n * cout * hw];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![0.0; if g.is_identity_1x1() { 0 } else { k * hw }];
        for i in 0..n {
            let xi = &xd[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
            let src: &[Real] = if g.is_identity_1x1() {
                xi
            } else {
                g.im2col(xi, &mut cols);
                &cols
            };
            gemm(cout, k, hw, wd, (k, 1), src, (hw, 1), 0.0, &mut y[i * cout * hw..(i + 1) * cout * hw], (hw, 1));
        }
        let value = Tensor::new(vec![n, cout, g.ho, g.wo], y)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    /// Per-channel convolution, `x: [N, C, H, W]`, `w: [C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: (usize, usize)) -> Result<Var, TensorError> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || ws[1] != 1 {
            return Err(shape_err("depthwise_conv2d", format!("weight must be [C,1,kh,kw], got {ws:?}")));
        }
        let g = ConvGeom::new("depthwise_conv2d", &xs, ws[2], ws[3], stride, pad)?;
        if ws[0] != g.c {
            return Err(shape_err("depthwise_conv2d", format!("input has {} channels, weight has {}", g.c, ws[0])));
        }
        let n = xs[0];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![0.0; n * g.c * g.ho * g.wo];
        for i in 0..n {
            for c in 0..g.c {
                let plane = &xd[(i * g.c + c) * g.h * g.w..][..g.h * g.w];
                let kernel = &wd[c * g.kh * g.kw..][..g.kh * g.kw];
                let out = &mut y[(i * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
                for ky in 0..g.kh {
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ky, g.pad.0, g.h) else { continue };
                        for kx in 0..g.kw {
                            let kv = kernel[ky * g.kw + kx];
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.pad.1, g.w) {
                                    out[oy * g.wo + ox] += kv * plane[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, g.c, g.ho, g.wo], y)?;
        Ok(self.push(value, Op::Depthwise { x, w, stride, pad }, &[x, w]))
    }

    /// Per-channel normalization followed by a per-channel affine map,
    /// over `[N, C]` or `[N, C, H, W]` inputs.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(shape_err("channel_norm", format!("input must be [N,C] or [N,C,H,W], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "channel_norm",
                format!("{c} channels but gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let m = (n * plane) as Real;
        if n * plane == 0 {
            return Err(shape_err("channel_norm", "empty input"));
        }
        let xd = self.value(x).data();
        let stats = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xd[(i * c + ch) * plane..][..plane].iter().sum::<Real>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for i in 0..n {
                        v += xd[(i * c + ch) * plane..][..plane].iter().map(|&e| (e - mu) * (e - mu)).sum::<Real>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                NormStats { mean, var }
            }
            NormMode::Fixed(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(shape_err("channel_norm", format!("fixed stats for {} channels, input has {c}", stats.mean.len())));
                }
                stats.clone()
            }
        };
        let clamped: Vec<bool> = stats.var.iter().map(|&v| v < NORM_EPS).collect();
        let inv_std: Vec<Real> = stats.var.iter().map(|&v| 1.0 / v.max(NORM_EPS).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    let h = (xd[p] - stats.mean[ch]) * inv_std[ch];
                    xhat[p] = h;
                    y[p] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(xs, y)?;
        let batch = matches!(mode, NormMode::Batch);
        Ok(self.push(value, Op::Norm { x, gamma, beta, xhat, inv_std, batch, clamped, stats }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b).data());
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v += c;
        }
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input must be [N,C,H,W], got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let y: Vec<Real> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<Real>() / plane as Real)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], y)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err("softmax_cross_entropy", format!("logits {ls:?} with {} labels", labels.len())));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let mut probs = vec![0.0; ls[0] * k];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let sum: Real = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for (p, &z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / ls[0] as Real);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Views `x[offset..]` as a tensor of shape `full` and keeps the leading
    /// `crop` sub-block (row-major, leading indices on every axis).
    pub fn crop(&mut self, x: Var, offset: usize, full: &[usize], crop: &[usize]) -> Result<Var, TensorError> {
        let full_numel: usize = full.iter().product();
        if offset + full_numel > self.value(x).numel() {
            return Err(shape_err("crop", format!("offset {offset} + {full:?} exceeds {} values", self.value(x).numel())));
        }
        if full.len() != crop.len() || full.iter().zip(crop).any(|(f, c)| c > f) {
            return Err(shape_err("crop", format!("cannot crop {crop:?} out of {full:?}")));
        }
        let src = &self.value(x).data()[offset..offset + full_numel];
        let mut out = Vec::with_capacity(crop.iter().product());
        for_each_crop_row(full, crop, |start, len| out.extend_from_slice(&src[start..start + len]));
        let value = Tensor::new(crop.to_vec(), out)?;
        Ok(self.push(value, Op::Crop { x, offset, full: full.to_vec() }, &[x]))
    }

    /// `sum(x * coeffs)`, a scalar probe used to build test losses.
    pub fn dot(&mut self, x: Var, coeffs: &Tensor) -> Result<Var, TensorError> {
        if self.shape(x) != coeffs.shape() {
            return Err(shape_err("dot", format!("{:?} vs {:?}", self.shape(x), coeffs.shape())));
        }
        let s: Real = self.value(x).data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, coeffs: coeffs.data().to_vec() }, &[x]))
    }

    /// Reverse pass from a scalar loss. Gradients are kept for trainable
    /// leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let node = self.nodes.get(loss.0).ok_or(TensorError::BackwardBeforeForward)?;
        if matches!(node.op, Op::Leaf) {
            return Err(TensorError::BackwardBeforeForward);
        }
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.needs_grad {
            return Err(TensorError::Detached);
        }
        let seed = Tensor::new(node.value.shape().to_vec(), vec![1.0])?;
        self.backpropagated = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g.data(), &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[Real], grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g, (dout, 1), self.value(*w).data(), (din, 1), 0.0, &mut dx, (din, 1));
                    accumulate(grads, *x, xs, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, g, (1, dout), self.value(*x).data(), (din, 1), 0.0, &mut dw, (din, 1));
                    accumulate(grads, *w, ws, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += *r;
                            }
                        }
                        accumulate(grads, *b, &[dout], db);
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geom = ConvGeom::new("conv2d", &xs, ws[2], ws[3], *stride, *pad).expect("recorded geometry");
                let (n, cout) = (xs[0], ws[0]);
                let k = geom.c * geom.kh * geom.kw;
                let hw = geom.ho * geom.wo;
                let in_size = geom.c * geom.h * geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let identity = geom.is_identity_1x1();
                let mut cols = vec![0.0; if identity { 0 } else { k * hw }];
                let mut dcols = vec![0.0; if identity { 0 } else { k * hw }];
                let mut dw = self.needs(*w).then(|| vec![0.0; cout * k]);
                let mut dx = self.needs(*x).then(|| vec![0.0; n * in_size]);
                for i in 0..n {
                    let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                    let xi = &xd[i * in_size..(i + 1) * in_size];
                    if let Some(dw) = dw.as_mut() {
                        let src: &[Real] = if identity {
                            xi
                        } else {
                            geom.im2col(xi, &mut cols);
                            &cols
                        };
                        gemm(cout, hw, k, gi, (hw, 1), src, (1, hw), 1.0, dw, (k, 1));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[i * in_size..(i + 1) * in_size];
                        if identity {
                            gemm(k, cout, hw, wd, (1, k), gi, (hw, 1), 0.0, dxi, (hw, 1));
                        } else {
                            gemm(k, cout, hw, wd, (1, k), gi, (hw, 1), 0.0, &mut dcols, (hw, 1));
                            geom.col2im_add(&dcols, dxi);
                        }
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, &ws, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, &xs, dx);
                }
            }
            Op::Depthwise { x, w, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geom = ConvGeom::new("depthwise_conv2d", &xs, ws[2], ws[3], *stride, *pad).expect("recorded geometry");
                let n = xs[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let kk = geom.kh * geom.kw;
                for i in 0..n {
                    for c in 0..geom.c {
                        let base = (i * geom.c + c) * geom.h * geom.w;
                        let gplane = &g[(i * geom.c + c) * geom.ho * geom.wo..][..geom.ho * geom.wo];
                        for ky in 0..geom.kh {
                            for oy in 0..geom.ho {
                                let Some(iy) = geom.src(oy, ky, geom.pad.0, geom.h) else { continue };
                                for kx in 0..geom.kw {
                                    let kv = wd[c * kk + ky * geom.kw + kx];
                                    let mut acc = 0.0;
                                    for ox in 0..geom.wo {
                                        if let Some(ix) = geom.src(ox, kx, geom.pad.1, geom.w) {
                                            let go = gplane[oy * geom.wo + ox];
                                            acc += go * xd[base + iy * geom.w + ix];
                                            dx[base + iy * geom.w + ix] += go * kv;
                                        }
                                    }
                                    dw[c * kk + ky * geom.kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, &xs, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, &ws, dw);
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, batch, clamped, .. } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let plane: usize = xs[2..].iter().product();
                let m = (n * plane) as Real;
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                // per-channel sums of dxhat and dxhat * xhat
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in off..off + plane {
                            dgamma[ch] += g[p] * xhat[p];
                            dbeta[ch] += g[p];
                            let dh = g[p] * gd[ch];
                            s1[ch] += dh;
                            s2[ch] += dh * xhat[p];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            let is = inv_std[ch];
                            for p in off..off + plane {
                                let dh = g[p] * gd[ch];
                                dx[p] = if !*batch {
                                    dh * is
                                } else if clamped[ch] {
                                    is * (dh - s1[ch] / m)
                                } else {
                                    is / m * (m * dh - s1[ch] - xhat[p] * s2[ch])
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, xs, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &[c], dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &[c], dbeta);
                }
            }
            Op::Relu { x } => {
                let dx = self.value(*x).data().iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, self.shape(*v), g.to_vec());
                    }
                }
            }
            Op::AddScalar { x } => accumulate(grads, *x, self.shape(*x), g.to_vec()),
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as Real;
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &d in g {
                    dx.extend(std::iter::repeat(d * inv).take(plane));
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as Real;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, self.shape(*logits), d);
            }
            Op::Crop { x, offset, full } => {
                let xs = self.shape(*x);
                let mut dx = vec![0.0; xs.iter().product()];
                let dst = &mut dx[*offset..];
                let crop = node.value.shape();
                let mut read = 0;
                for_each_crop_row(full, crop, |start, len| {
                    for (d, s) in dst[start..start + len].iter_mut().zip(&g[read..read + len]) {
                        *d += *s;
                    }
                    read += len;
                });
                accumulate(grads, *x, xs, dx);
            }
            Op::Dot { x, coeffs } => {
                let dx = coeffs.iter().map(|c| c * g[0]).collect();
                accumulate(grads, *x, self.shape(*x), dx);
            }
        }
    }
}

// Calls `f(start, len)` for each contiguous last-axis run of the leading
// `crop` block inside a row-major `full` array, in row-major order.
fn for_each_crop_row(full: &[usize], crop: &[usize], mut f: impl FnMut(usize, usize)) {
    if crop.iter().any(|&c| c == 0) {
        return;
    }
    let rank = full.len();
    if rank == 0 {
        f(0, 1);
        return;
    }
    let mut strides = vec![1; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * full[d + 1];
    }
    let mut idx = vec![0usize; rank - 1];
    loop {
        let start: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(start, crop[rank - 1]);
        // odometer over the leading axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < crop[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[-1.0, -2.0, -0.5, -3.0]));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_1x1_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 3, 5, 4], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, 1, (0, 0)).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, cin, h, w, cout, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
        let x = Tensor::uniform(&[n, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::uniform(&[cout, cin, k, k], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.conv2d(xv, wv, s, (p, p)).unwrap();
        let ys = tape.value(y).shape().to_vec();
        assert_eq!(ys, vec![n, cout, 4, 3]);
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..ys[2] {
                    for ox in 0..ys[3] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((i * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        let got = tape.value(y).data()[((i * cout + co) * ys[2] + oy) * ys[3] + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[3, 7], 2.5));
        let loss = tape.softmax_cross_entropy(z, &[0, 3, 6]).unwrap();
        assert!((tape.value(loss).item() - (7.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_finite_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2, 3], &[50.0, -50.0, 0.0, -50.0, 50.0, 49.0]));
        let loss = tape.softmax_cross_entropy(z, &[1, 0]).unwrap();
        assert!(tape.value(loss).item().is_finite());
        let expected = 100.0 + (1.0 + (-1.0 as Real).exp()).ln() / 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn norm_of_standardized_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c, plane) = (6, 3, 10);
        let mut data = vec![0.0; n * c * plane];
        for ch in 0..c {
            let vals: Vec<Real> = (0..n * plane).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mean = vals.iter().sum::<Real>() / vals.len() as Real;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / vals.len() as Real;
            for (j, v) in vals.iter().enumerate() {
                let (i, p) = (j / plane, j % plane);
                data[(i * c + ch) * plane + p] = (v - mean) / var.sqrt();
            }
        }
        let x = t(&[n, c, 2, 5], &data);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full(&[c], 1.0));
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = tape.channel_norm(xv, g, b, NormMode::Batch).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_weight_grad_is_outer_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
        let w = tape.param(t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
        let y = tape.dense(x, w, None).unwrap();
        let upstream = t(&[1, 2], &[2.0, -1.0]);
        let loss = tape.dot(y, &upstream).unwrap();
        tape.backward(loss).unwrap();
        let expect = [2.0, -4.0, 1.0, -1.0, 2.0, -0.5];
        assert_eq!(tape.grad(w).unwrap().data(), &expect);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 2, 4, 4], 1.0, &mut rng));
        let w = tape.param(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng));
        let y = tape.conv2d(x, w, 1, (1, 1)).unwrap();
        let loss = tape.dot(y, &Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(TensorError::BackwardBeforeForward)));
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        let loss = tape.dot(y, &t(&[2], &[1.0, 1.0])).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::Detached)));
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));

        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = tape.dot(w, &t(&[2], &[1.0, 1.0])).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::AlreadyBackpropagated)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 5, 3, 3]));
        let err = tape.conv2d(x, w, 1, (1, 1)).unwrap_err();
        assert!(err.to_string().starts_with("conv2d"), "{err}");
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(tape.dense(a, b, None).unwrap_err().to_string().starts_with("dense"));
    }

    #[test]
    fn crop_takes_leading_block() {
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..30).map(|v| v as Real).collect();
        let x = tape.param(t(&[30], &data));
        // offset 6, full [2, 3, 4] -> crop [1, 2, 3]
        let y = tape.crop(x, 6, &[2, 3, 4], &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 7.0, 8.0, 10.0, 11.0, 12.0]);
        let loss = tape.dot(y, &Tensor::full(&[1, 2, 3], 1.0)).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        let hot: Vec<usize> = (0..30).filter(|&i| g[i] != 0.0).collect();
        assert_eq!(hot, vec![6, 7, 8, 10, 11, 12]);
    }
}
