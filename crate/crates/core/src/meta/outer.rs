use super::inner::InnerTrajectory;
use crate::data::SupportSet;
use crate::error::{Error, Result};
use crate::model::{ConvNet, Group, ParamBundle};
use crate::tensor::{Dual, Scalar, Tape, Tensor};

fn support_batch<S: Scalar>(support: &SupportSet) -> Result<(Tensor<S>, Vec<usize>)> {
    if support.is_empty() {
        return Err(Error::Data("support set is empty".into()));
    }
    let (x, y) = support.batch()?;
    Ok((x.cast(), y))
}

/// Mean over the support set of supervised cross-entropy through `(ω, ϕ)`
/// plus rotation loss through `(ω, φ_ssl)`, and its gradient over all groups.
pub fn outer_grad<S: Scalar>(net: &ConvNet, theta: &ParamBundle<S>, support: &SupportSet) -> Result<(f64, Vec<S>)> {
    let (x, y) = support_batch::<S>(support)?;
    let mut tape = Tape::new();
    let p = theta.bind(&mut tape, &Group::ALL)?;
    let lm = net.sup_loss(&mut tape, &p, &x, &y)?;
    let ls = net.ssl_loss(&mut tape, &p, &x)?;
    let total = tape.add(lm, ls)?;
    let loss = tape.item(total).to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("outer loss is {loss}")));
    }
    let grads = tape.backward(total)?;
    Ok((loss, theta.collect_grads(&p, &grads, &Group::ALL)?))
}

/// Value of the outer loss.
pub fn outer_loss<S: Scalar>(net: &ConvNet, theta: &ParamBundle<S>, support: &SupportSet) -> Result<f64> {
    let (x, y) = support_batch::<S>(support)?;
    let mut tape = Tape::new();
    let p = theta.bind(&mut tape, &[])?;
    let lm = net.sup_loss(&mut tape, &p, &x, &y)?;
    let ls = net.ssl_loss(&mut tape, &p, &x)?;
    let total = tape.add(lm, ls)?;
    Ok(tape.item(total).to_f64())
}

/// Hessian of `scale · l_s(x)` over `(ω, φ_ssl)` at `theta`, applied to `v`.
///
/// Forward-over-reverse: the reverse pass runs on dual numbers whose tangent
/// is `v`, so the tangent of the gradient is the Hessian-vector product.
pub fn ssl_hvp<S: Scalar>(net: &ConvNet, theta: &ParamBundle<S>, x: &Tensor<S>, scale: f64, v: &[S]) -> Result<Vec<S>> {
    let mut dual: ParamBundle<Dual<S>> = theta.cast();
    let mut off = 0;
    for g in Group::ADAPTED {
        for p in dual.group_mut(g) {
            for d in p.tensor.data_mut() {
                d.eps = v[off];
                off += 1;
            }
        }
    }
    if off != v.len() {
        return Err(Error::dim("ssl_hvp", "numel", format!("adapted groups hold {off}, vector has {}", v.len())));
    }
    let (_, g) = net.ssl_grad(&dual, &x.cast::<Dual<S>>(), &Group::ADAPTED)?;
    let c = S::from_f64(scale);
    Ok(g.into_iter().map(|d| d.eps * c).collect())
}

/// Gradient of the outer loss with respect to `θ_0`.
///
/// First-order mode returns `∂𝓛/∂θ_L` unchanged. Exact mode pulls the
/// `(ω, φ_ssl)` part back through every recorded update with
/// `v ← v − α·H_t v`; `ϕ` does not take part in the inner loop, so its part
/// passes through as is.
pub fn meta_gradient<S: Scalar>(
    net: &ConvNet,
    theta0: &ParamBundle<S>,
    theta_l: &ParamBundle<S>,
    traj: &InnerTrajectory<S>,
    support: &SupportSet,
    first_order: bool,
) -> Result<(f64, Vec<S>)> {
    if traj.origin_version != theta0.version() {
        return Err(Error::StaleTrajectory {
            recorded: traj.origin_version,
            current: theta0.version(),
        });
    }
    let (loss, mut grad) = outer_grad(net, theta_l, support)?;
    if first_order {
        return Ok((loss, grad));
    }
    if traj.snapshots.len() != traj.steps.len() {
        return Err(Error::Data("exact meta-gradient needs a trajectory recorded with snapshots".into()));
    }
    let n_adapted: usize = Group::ADAPTED.iter().map(|&g| theta0.group_numel(g)).sum();
    let mut v = grad[..n_adapted].to_vec();
    let alpha = S::from_f64(traj.alpha);
    let mut at = theta0.clone();
    for (snap, step) in traj.snapshots.iter().zip(&traj.steps).rev() {
        at.unflatten(&Group::ADAPTED, snap)?;
        let hv = ssl_hvp(net, &at, &step.input, step.scale, &v)?;
        for (vi, h) in v.iter_mut().zip(hv) {
            *vi -= alpha * h;
        }
    }
    grad[..n_adapted].copy_from_slice(&v);
    Ok((loss, grad))
}

/// Outcome of one outer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Updates `θ_0` in place; `θ_L` and the trajectory are consumed.
///
/// `velocity` carries heavy-ball state when `momentum > 0`.
#[allow(clippy::too_many_arguments)]
pub fn outer_step<S: Scalar>(
    net: &ConvNet,
    theta0: &mut ParamBundle<S>,
    theta_l: ParamBundle<S>,
    traj: InnerTrajectory<S>,
    support: &SupportSet,
    gamma: f64,
    first_order: bool,
    momentum: Option<(f64, &mut Vec<S>)>,
) -> Result<OuterReport> {
    let (loss, grad) = meta_gradient(net, theta0, &theta_l, &traj, support, first_order)?;
    drop(theta_l);
    let grad_norm = grad.iter().map(|g| g.to_f64().powi(2)).sum::<f64>().sqrt();
    apply_update_to(theta0, &Group::ALL, &grad, gamma, momentum)?;
    Ok(OuterReport { loss, grad_norm })
}

/// `θ ← θ − γ·g`, or the heavy-ball form when `momentum > 0`.
pub(crate) fn apply_update_to<S: Scalar>(
    theta: &mut ParamBundle<S>,
    groups: &[Group],
    grad: &[S],
    gamma: f64,
    momentum: Option<(f64, &mut Vec<S>)>,
) -> Result<()> {
    match momentum {
        Some((mu, vel)) if mu > 0.0 => {
            if vel.len() != grad.len() {
                *vel = vec![S::zero(); grad.len()];
            }
            let mu = S::from_f64(mu);
            for (v, &g) in vel.iter_mut().zip(grad) {
                *v = mu * *v + g;
            }
            theta.axpy(groups, gamma, vel)
        }
        _ => theta.axpy(groups, gamma, grad),
    }
}
