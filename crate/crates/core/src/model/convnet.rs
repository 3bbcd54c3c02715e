use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Scalar, Tape, Tensor, Var};

use super::params::{Bound, Group, Param, ParamBundle};

/// Number of rotation classes of the pretext task.
pub const ROTATIONS: usize = 4;

/// Architecture of the dual-branch ConvNet.
///
/// Three conv blocks (conv → GroupNorm → ReLU → 2×2 max-pool). The first two
/// form the shared extractor; the supervised head is block 3 plus two fully
/// connected layers; the rotation head is an independent replica of block 3
/// plus two fully connected layers ending in four logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub width: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub gn_groups: usize,
    pub gn_eps: f64,
}

impl ConvNetSpec {
    /// 3×32×32 input, 128 filters of 5×5, GroupNorm(8), 200 hidden units, 10 classes.
    pub fn reference() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            width: 128,
            kernel: 5,
            hidden: 200,
            num_classes: 10,
            gn_groups: 8,
            gn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.{f}");
        if self.in_channels == 0 {
            return Err(Error::config(field("in_channels"), "must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::config(field("image_size"), "three 2x2 poolings need at least 8 pixels"));
        }
        if self.width == 0 || self.hidden == 0 {
            return Err(Error::config(field("width"), "layer widths must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(field("kernel"), "same padding needs an odd kernel"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(field("num_classes"), "need at least two classes"));
        }
        if self.gn_groups == 0 || !self.width.is_multiple_of(self.gn_groups) {
            return Err(Error::config(field("gn_groups"), "must divide width"));
        }
        if !(self.gn_eps > 0.0) {
            return Err(Error::config(field("gn_eps"), "must be positive"));
        }
        Ok(())
    }

    /// Spatial side after the three poolings.
    pub fn final_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn flat_features(&self) -> usize {
        self.width * self.final_side() * self.final_side()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }
}

/// The dual-branch network; stateless apart from its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    spec: ConvNetSpec,
}

fn kaiming<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
        .expect("init shape")
        .with_requires_grad(true)
}

fn filled<S: Scalar>(shape: Vec<usize>, v: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape, vec![S::from_f64(v); n])
        .expect("init shape")
        .with_requires_grad(true)
}

fn param<S>(name: &str, tensor: Tensor<S>) -> Param<S> {
    Param {
        name: name.to_string(),
        tensor,
    }
}

impl ConvNet {
    pub fn new(spec: ConvNetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    /// Kaiming-uniform (fan-in) weights, zero biases, unit GroupNorm scale.
    /// The rotation head's conv block starts as a copy of block 3.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamBundle<S> {
        let s = &self.spec;
        let k2 = s.kernel * s.kernel;
        let conv_block = |rng: &mut R, prefix: &str, cin: usize| {
            vec![
                param(
                    &format!("{prefix}conv.weight"),
                    kaiming(rng, vec![s.width, cin, s.kernel, s.kernel], cin * k2),
                ),
                param(&format!("{prefix}conv.bias"), filled(vec![s.width], 0.0)),
                param(&format!("{prefix}gn.weight"), filled(vec![s.width], 1.0)),
                param(&format!("{prefix}gn.bias"), filled(vec![s.width], 0.0)),
            ]
        };
        let mut omega = conv_block(rng, "block1.", s.in_channels);
        omega.extend(conv_block(rng, "block2.", s.width));
        let block3 = conv_block(rng, "block3.", s.width);
        let fc = |rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize| {
            vec![
                param(
                    &format!("{prefix}.weight"),
                    kaiming(rng, vec![fan_out, fan_in], fan_in),
                ),
                param(&format!("{prefix}.bias"), filled(vec![fan_out], 0.0)),
            ]
        };
        let mut phi_sup = block3.clone();
        phi_sup.extend(fc(rng, "sup.fc1", s.flat_features(), s.hidden));
        phi_sup.extend(fc(rng, "sup.fc2", s.hidden, s.num_classes));
        let mut phi_ssl: Vec<Param<S>> = block3
            .into_iter()
            .map(|p| param(&p.name.replacen("block3.", "ssl.block3.", 1), p.tensor))
            .collect();
        phi_ssl.extend(fc(rng, "ssl.fc1", s.flat_features(), s.hidden));
        phi_ssl.extend(fc(rng, "ssl.fc2", s.hidden, ROTATIONS));
        ParamBundle::new(omega, phi_ssl, phi_sup).expect("generated names are unique")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::dim(
                "convnet",
                "input (c/h/w)",
                format!("expected [n, {}, {}, {}], got {shape:?}", want[0], want[1], want[2]),
            ));
        }
        Ok(())
    }

    fn block<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{prefix}conv.weight"))?;
        let b = p.var(&format!("{prefix}conv.bias"))?;
        let h = tape.conv2d(
            x,
            w,
            Some(b),
            Conv2dOpts {
                stride: 1,
                padding: self.spec.kernel / 2,
            },
        )?;
        let g = p.var(&format!("{prefix}gn.weight"))?;
        let bb = p.var(&format!("{prefix}gn.bias"))?;
        let h = tape.group_norm(h, g, bb, self.spec.gn_groups, self.spec.gn_eps)?;
        let h = tape.relu(h)?;
        tape.max_pool2d(h, 2)
    }

    fn head<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, prefix: &str, feat: Var) -> Result<Var> {
        let h = self.block(tape, p, &format!("{prefix}block3."), feat)?;
        let h = tape.flatten(h)?;
        let fc = if prefix.is_empty() { "sup." } else { prefix };
        let h = tape.linear(
            h,
            p.var(&format!("{fc}fc1.weight"))?,
            Some(p.var(&format!("{fc}fc1.bias"))?),
        )?;
        let h = tape.relu(h)?;
        tape.linear(
            h,
            p.var(&format!("{fc}fc2.weight"))?,
            Some(p.var(&format!("{fc}fc2.bias"))?),
        )
    }

    /// Shared extractor (omega) on a batch `[n, c, h, w]`.
    pub fn features<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let h = self.block(tape, p, "block1.", x)?;
        self.block(tape, p, "block2.", h)
    }

    /// Class logits `[n, num_classes]` through omega and phi_sup.
    pub fn forward_sup<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        self.head(tape, p, "", f)
    }

    /// Rotation logits `[n, 4]` through omega and phi_ssl.
    pub fn forward_ssl<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        self.head(tape, p, "ssl.", f)
    }

    /// Rotation-prediction loss of a batch `[n, c, h, w]`: mean over samples
    /// and over all four rotations of the cross-entropy against the rotation
    /// index. No class label is involved.
    pub fn ssl_loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: &Tensor<S>) -> Result<Var> {
        self.check_input(x.shape())?;
        let (batch, labels) = rotation_batch(x)?;
        let xv = tape.constant(&batch)?;
        let logits = self.forward_ssl(tape, p, xv)?;
        tape.cross_entropy(logits, &labels)
    }

    /// Supervised cross-entropy of a batch.
    pub fn sup_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        x: &Tensor<S>,
        labels: &[usize],
    ) -> Result<Var> {
        let xv = tape.constant(x)?;
        let logits = self.forward_sup(tape, p, xv)?;
        tape.cross_entropy(logits, labels)
    }

    /// Forward-only class logits, one row per sample.
    pub fn logits<S: Scalar>(&self, params: &ParamBundle<S>, x: &Tensor<S>) -> Result<Vec<Vec<S>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &[])?;
        let xv = tape.constant(x)?;
        let out = self.forward_sup(&mut tape, &p, xv)?;
        Ok(tape
            .value(out)
            .chunks(self.spec.num_classes)
            .map(<[S]>::to_vec)
            .collect())
    }

    /// Arg-max class per sample; ties go to the lowest index.
    pub fn predict<S: Scalar>(&self, params: &ParamBundle<S>, x: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.logits(params, x)?.iter().map(|row| argmax(row)).collect())
    }

    /// Forward-only rotation loss value.
    pub fn ssl_loss_value<S: Scalar>(&self, params: &ParamBundle<S>, x: &Tensor<S>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, &[])?;
        let l = self.ssl_loss(&mut tape, &p, x)?;
        Ok(tape.item(l).to_f64())
    }

    /// Gradient of the rotation loss on `x` with respect to `groups`, in canonical order.
    pub fn ssl_grad<S: Scalar>(
        &self,
        params: &ParamBundle<S>,
        x: &Tensor<S>,
        groups: &[Group],
    ) -> Result<(S, Vec<S>)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, groups)?;
        let l = self.ssl_loss(&mut tape, &p, x)?;
        let loss = tape.item(l);
        let grads = tape.backward(l)?;
        Ok((loss, params.collect_grads(&p, &grads, groups)?))
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Rotates every `h × w` plane of `x` (rank ≥ 2) counter-clockwise by `k · 90°`.
/// Exact index permutation; requires square planes.
pub fn rotate90<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::dim("rotate90", "rank", format!("need [.., h, w], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w {
        return Err(Error::dim("rotate90", "h/w", format!("non-square plane {h}x{w}")));
    }
    let n = h;
    let k = k % 4;
    let mut out = x.data().to_vec();
    if k == 0 {
        return Tensor::new(shape.to_vec(), out);
    }
    for (src, dst) in x.data().chunks(n * n).zip(out.chunks_mut(n * n)) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match k {
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                dst[i * n + j] = src[si * n + sj];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Stacks all four rotations of each sample: `[4n, c, h, w]`, grouped by rotation.
pub fn rotation_batch<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(x.numel() * ROTATIONS);
    let mut labels = Vec::with_capacity(n * ROTATIONS);
    for k in 0..ROTATIONS {
        data.extend_from_slice(rotate90(x, k)?.data());
        labels.extend(std::iter::repeat_n(k, n));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = n * ROTATIONS;
    Ok((Tensor::new(shape, data)?, labels))
}
