use super::config::InnerMode;
use crate::data::Stream;
use crate::error::{Error, Result};
use crate::model::{ConvNet, Group, ParamBundle};
use crate::tensor::{Scalar, Tensor};

/// One recorded inner update: the loss it minimized was `scale · l_s(input)`
/// evaluated at the parameters held in the matching snapshot.
#[derive(Clone, Debug)]
pub struct InnerStep<S> {
    pub input: Tensor<S>,
    pub scale: f64,
    pub loss: f64,
}

/// Record of an inner loop run from `θ_0`.
#[derive(Clone, Debug)]
pub struct InnerTrajectory<S> {
    /// Version of `θ_0` when the loop ran.
    pub origin_version: u64,
    pub alpha: f64,
    pub steps: Vec<InnerStep<S>>,
    /// Flattened `(ω, φ_ssl)` before each step; empty unless requested.
    pub snapshots: Vec<Vec<S>>,
}

impl<S> InnerTrajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// One rotation-loss SGD step on `(ω, φ_ssl)`; returns the loss before the step.
///
/// This is the single update rule shared by meta-training and test-time adaptation.
pub fn ssl_step<S: Scalar>(net: &ConvNet, params: &mut ParamBundle<S>, x: &Tensor<S>, lr: f64, scale: f64) -> Result<f64> {
    let (loss, grad) = net.ssl_grad(params, x, &Group::ADAPTED)?;
    let loss = loss.to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("rotation loss is {loss}")));
    }
    if scale == 1.0 {
        params.axpy(&Group::ADAPTED, lr, &grad)?;
    } else {
        let c = S::from_f64(scale);
        let g: Vec<S> = grad.into_iter().map(|v| v * c).collect();
        params.axpy(&Group::ADAPTED, lr, &g)?;
    }
    Ok(loss)
}

/// Runs the inner loop. `θ_0` is left untouched; the returned bundle is
/// `(ω_L, φ_L, ϕ_0)`. Snapshots are kept only when `record` is set.
pub fn inner_loop_with<S: Scalar>(
    net: &ConvNet,
    theta0: &ParamBundle<S>,
    stream: &Stream,
    alpha: f64,
    mode: InnerMode,
    record: bool,
) -> Result<(ParamBundle<S>, InnerTrajectory<S>)> {
    if stream.is_empty() {
        return Err(Error::Data("inner loop needs a nonempty stream".into()));
    }
    let mut theta = theta0.clone();
    let mut traj = InnerTrajectory {
        origin_version: theta0.version(),
        alpha,
        steps: Vec::new(),
        snapshots: Vec::new(),
    };
    let inputs: Vec<(Tensor<S>, f64)> = match mode {
        InnerMode::Sequential => (0..stream.len())
            .map(|t| Ok((stream.input(t)?.cast::<S>(), 1.0)))
            .collect::<Result<_>>()?,
        // the batch loss is a mean, so scaling by L gives the sum
        InnerMode::Batch => vec![(stream.inputs(0, stream.len())?.cast::<S>(), stream.len() as f64)],
        InnerMode::Skip => Vec::new(),
    };
    for (input, scale) in inputs {
        if record {
            traj.snapshots.push(theta.flatten(&Group::ADAPTED));
        }
        let loss = ssl_step(net, &mut theta, &input, alpha, scale)?;
        traj.steps.push(InnerStep { input, scale, loss });
    }
    Ok((theta, traj))
}

/// Sequential inner loop with snapshots recorded.
pub fn inner_loop<S: Scalar>(
    net: &ConvNet,
    theta0: &ParamBundle<S>,
    stream: &Stream,
    alpha: f64,
) -> Result<(ParamBundle<S>, InnerTrajectory<S>)> {
    inner_loop_with(net, theta0, stream, alpha, InnerMode::Sequential, true)
}
