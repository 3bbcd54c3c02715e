//! Arena-style reverse-mode tape.
//!
//! Every op appends a node holding its output value. Inputs always precede
//! outputs in the arena, so walking indices downward from the loss is a valid
//! reverse topological order.

use crate::error::{Error, Result};

use super::dense::Tensor;
use super::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution, fixed at record time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        hw: usize,
        groups: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        cols: usize,
        probs: Vec<S>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Exp {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records a forward computation for one backward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_eq(op: &'static str, axes: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, axes, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank(op: &'static str, shape: &[usize], want: usize) -> Result<()> {
    if shape.len() != want {
        return Err(Error::dim(
            op,
            "rank",
            format!("expected rank {want}, got shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "tape already consumed by backward; reset and re-run the forward pass".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad()))
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        rank("matmul", sa, 2)?;
        rank("matmul", sb, 2)?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::dim("matmul", "a.1/b.0", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `y = x wᵀ + b` with `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        rank("linear", &sx, 2)?;
        rank("linear", &sw, 2)?;
        let (rows, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if sw[1] != fan_in {
            return Err(Error::dim("linear", "x.1/w.1", format!("x {sx:?}, w {sw:?}")));
        }
        if let Some(b) = b {
            dims_eq("linear", "bias", self.shape(b), &[fan_out])?;
        }
        let mut out = vec![S::zero(); rows * fan_out];
        S::gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![rows, fan_out],
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x: [n, c, h, w]` with `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        self.check_live()?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        rank("conv2d", &sx, 4)?;
        rank("conv2d", &sw, 4)?;
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                "input channels (x.1/w.1)",
                format!("x {sx:?}, w {sw:?}"),
            ));
        }
        if opts.stride == 0 {
            return Err(Error::dim("conv2d", "stride", "stride must be positive"));
        }
        let (ph, pw) = (sx[2] + 2 * opts.padding, sx[3] + 2 * opts.padding);
        if ph < sw[2] || pw < sw[3] {
            return Err(Error::dim(
                "conv2d",
                "spatial (h/w)",
                format!("padded input {ph}x{pw} smaller than kernel {}x{}", sw[2], sw[3]),
            ));
        }
        if let Some(b) = b {
            dims_eq("conv2d", "bias", self.shape(b), &[sw[0]])?;
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: (ph - sw[2]) / opts.stride + 1,
            ow: (pw - sw[3]) / opts.stride + 1,
            stride: opts.stride,
            pad: opts.padding,
        };
        let cols = im2col(self.value(x), &geom);
        let cols_n = geom.n * geom.ohw();
        let mut flat = vec![S::zero(); geom.o * cols_n];
        S::gemm(
            geom.o,
            geom.ckk(),
            cols_n,
            self.value(w),
            false,
            &cols,
            false,
            &mut flat,
            false,
        );
        // [o, n*ohw] -> [n, o, ohw]
        let ohw = geom.ohw();
        let mut out = vec![S::zero(); geom.n * geom.o * ohw];
        let bias = b.map(|b| self.value(b).to_vec());
        for o in 0..geom.o {
            let bo = bias.as_ref().map_or(S::zero(), |bv| bv[o]);
            for s in 0..geom.n {
                let src = &flat[o * cols_n + s * ohw..o * cols_n + (s + 1) * ohw];
                let dst = &mut out[(s * geom.o + o) * ohw..(s * geom.o + o + 1) * ohw];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bo);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![geom.n, geom.o, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > S::zero() || v.to_f64().is_nan() { v } else { S::zero() })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu { x }, rg))
    }

    /// Non-overlapping `k × k` max pooling; trailing rows/cols that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        rank("max_pool2d", &sx, 4)?;
        if k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::dim(
                "max_pool2d",
                "spatial (h/w)",
                format!("window {k} does not fit input {sx:?}"),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            // strict > keeps the first maximum on ties; NaN wins so it propagates
                            if xv[idx] > xv[best] || (xv[idx].to_f64().is_nan() && !xv[best].to_f64().is_nan()) {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Group normalization over `x: [n, c, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::dim("group_norm", "rank", format!("need [n, c, ...], got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let hw: usize = sx[2..].iter().product();
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(
                "group_norm",
                "channels/groups",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        dims_eq("group_norm", "gamma", self.shape(gamma), &[c])?;
        dims_eq("group_norm", "beta", self.shape(beta), &[c])?;
        let cg = c / groups;
        let m = cg * hw;
        let inv_m = S::one() / S::from_usize(m);
        let eps = S::from_f64(eps);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(n * groups);
        for (gi, chunk) in xv.chunks(m).enumerate() {
            let mean = chunk.iter().copied().sum::<S>() * inv_m;
            let var = chunk
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                * inv_m;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            let g = gi % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let idx = gi * m + j;
                let ch = g * cg + j / hw;
                let xh = (v - mean) * r;
                xhat[idx] = xh;
                out[idx] = gv[ch] * xh + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            sx,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                hw,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a `[rows, cols]` node.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        rank("softmax", &sx, 2)?;
        let cols = sx[1];
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(softmax_row)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(sx, out, Op::Softmax { x, cols }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        rank("log_softmax", &sx, 2)?;
        let cols = sx[1];
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(log_softmax_row)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(sx, out, Op::LogSoftmax { x, cols }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_live()?;
        let sl = self.shape(logits).to_vec();
        rank("cross_entropy", &sl, 2)?;
        let (rows, cols) = (sl[0], sl[1]);
        if labels.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                "batch (logits.0/labels)",
                format!("{rows} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::dim(
                "cross_entropy",
                "label",
                format!("label {bad} out of range for {cols} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = S::zero();
        for (row, &label) in self.value(logits).chunks(cols).zip(labels) {
            let ls = log_softmax_row(row);
            total -= ls[label];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let loss = total / S::from_usize(rows);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                cols,
                probs,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Vec<usize>, Vec<S>)> {
        self.check_live()?;
        dims_eq(name, "all", self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let c = S::from_f64(c);
        let out = self.value(a).iter().map(|&v| v * c).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).iter().map(|v| v.exp()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Exp { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![s], Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_live()?;
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::dim(
                "reshape",
                "numel",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rows = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, vec![rows, rest])
    }

    /// Mean Shannon entropy of the row-wise softmax of `logits: [rows, cols]`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let rows = self.shape(logits).first().copied().unwrap_or(1);
        let ls = self.log_softmax(logits)?;
        let p = self.exp(ls)?;
        let plogp = self.mul(p, ls)?;
        let total = self.sum(plogp)?;
        self.scale(total, -1.0 / rows as f64)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let g = slot(grads, *a, m * k);
                    S::gemm(m, n, k, dy, false, self.value(*b), true, g, true);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, k * n);
                    S::gemm(k, m, n, self.value(*a), true, dy, false, g, true);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (rows, fan_in, fan_out) = (*rows, *fan_in, *fan_out);
                if self.rg(*x) {
                    let g = slot(grads, *x, rows * fan_in);
                    S::gemm(rows, fan_out, fan_in, dy, false, self.value(*w), false, g, true);
                }
                if self.rg(*w) {
                    let g = slot(grads, *w, fan_out * fan_in);
                    S::gemm(fan_out, rows, fan_in, dy, true, self.value(*x), false, g, true);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let g = slot(grads, b, fan_out);
                    for row in dy.chunks(fan_out) {
                        g.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ohw = geom.ohw();
                let cols_n = geom.n * ohw;
                // [n, o, ohw] -> [o, n*ohw]
                let mut dflat = vec![S::zero(); geom.o * cols_n];
                for s in 0..geom.n {
                    for o in 0..geom.o {
                        let src = &dy[(s * geom.o + o) * ohw..(s * geom.o + o + 1) * ohw];
                        dflat[o * cols_n + s * ohw..o * cols_n + (s + 1) * ohw]
                            .copy_from_slice(src);
                    }
                }
                if self.rg(*w) {
                    let g = slot(grads, *w, geom.o * geom.ckk());
                    S::gemm(geom.o, cols_n, geom.ckk(), &dflat, false, cols, true, g, true);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let g = slot(grads, b, geom.o);
                    for (o, gv) in g.iter_mut().enumerate() {
                        *gv += dflat[o * cols_n..(o + 1) * cols_n].iter().copied().sum::<S>();
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![S::zero(); geom.ckk() * cols_n];
                    S::gemm(
                        geom.ckk(),
                        geom.o,
                        cols_n,
                        self.value(*w),
                        true,
                        &dflat,
                        false,
                        &mut dcols,
                        false,
                    );
                    let g = slot(grads, *x, geom.n * geom.c * geom.h * geom.w);
                    col2im_add(&dcols, geom, g);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let g = slot(grads, *x, xv.len());
                for ((gv, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                    if v > S::zero() {
                        *gv += d;
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let g = slot(grads, *x, self.value(*x).len());
                for (&idx, &d) in argmax.iter().zip(dy) {
                    g[idx] += d;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                hw,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, hw, groups) = (*n, *c, *hw, *groups);
                let cg = c / groups;
                let m = cg * hw;
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    let g = slot(grads, *gamma, c);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            g[ch] += dy[off..off + hw]
                                .iter()
                                .zip(&xhat[off..off + hw])
                                .map(|(&d, &xh)| d * xh)
                                .sum::<S>();
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = slot(grads, *beta, c);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            g[ch] += dy[off..off + hw].iter().copied().sum::<S>();
                        }
                    }
                }
                if self.rg(*x) {
                    let g = slot(grads, *x, n * c * hw);
                    let inv_m = S::one() / S::from_usize(m);
                    for gi in 0..n * groups {
                        let grp = gi % groups;
                        let off = gi * m;
                        let dxhat: Vec<S> = (0..m)
                            .map(|j| dy[off + j] * gv[grp * cg + j / hw])
                            .collect();
                        let sum_d = dxhat.iter().copied().sum::<S>();
                        let sum_dx = dxhat
                            .iter()
                            .zip(&xhat[off..off + m])
                            .map(|(&d, &xh)| d * xh)
                            .sum::<S>();
                        let r = rstd[gi];
                        for j in 0..m {
                            g[off + j] += r * (dxhat[j] - inv_m * sum_d - xhat[off + j] * inv_m * sum_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let g = slot(grads, *x, dy.len());
                for ((grow, drow), prow) in g
                    .chunks_mut(*cols)
                    .zip(dy.chunks(*cols))
                    .zip(node.value.chunks(*cols))
                {
                    let dot: S = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                    for ((gv, &d), &p) in grow.iter_mut().zip(drow).zip(prow) {
                        *gv += p * (d - dot);
                    }
                }
            }
            Op::LogSoftmax { x, cols } => {
                let g = slot(grads, *x, dy.len());
                for ((grow, drow), lrow) in g
                    .chunks_mut(*cols)
                    .zip(dy.chunks(*cols))
                    .zip(node.value.chunks(*cols))
                {
                    let total: S = drow.iter().copied().sum();
                    for ((gv, &d), &l) in grow.iter_mut().zip(drow).zip(lrow) {
                        *gv += d - l.exp() * total;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                cols,
                probs,
            } => {
                let scale = dy[0] / S::from_usize(labels.len());
                let g = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..*cols {
                        let onehot = if j == label { S::one() } else { S::zero() };
                        g[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let g = slot(grads, v, dy.len());
                        g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    let g = slot(grads, *a, dy.len());
                    g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += d);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, dy.len());
                    g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv -= d);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let g = slot(grads, *a, dy.len());
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gv += d * o;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let g = slot(grads, *b, dy.len());
                    for ((gv, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gv += d * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                let g = slot(grads, *a, dy.len());
                g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += d * *c);
            }
            Op::Exp { a } => {
                let g = slot(grads, *a, dy.len());
                for ((gv, &d), &e) in g.iter_mut().zip(dy).zip(&node.value) {
                    *gv += d * e;
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                let g = slot(grads, *a, len);
                g.iter_mut().for_each(|gv| *gv += dy[0]);
            }
            Op::Reshape { a } => {
                let g = slot(grads, *a, dy.len());
                g.iter_mut().zip(dy).for_each(|(gv, &d)| *gv += d);
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row
        .iter()
        .copied()
        .fold(row[0], |m, v| if v > m { v } else { m });
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row
        .iter()
        .copied()
        .fold(row[0], |m, v| if v > m { v } else { m });
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// `[ckk, n*ohw]` patch matrix, zero outside the padded border.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let ohw = g.ohw();
    let cols_n = g.n * ohw;
    let mut cols = vec![S::zero(); g.ckk() * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                for s in 0..g.n {
                    let plane = &x[(s * g.c + ci) * g.h * g.w..(s * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            row[s * ohw + oy * g.ow + ox] = plane[iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(dcols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let ohw = g.ohw();
    let cols_n = g.n * ohw;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &dcols[r * cols_n..(r + 1) * cols_n];
                for s in 0..g.n {
                    let base = (s * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dx[base + iy * g.w + ix as usize] += row[s * ohw + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
