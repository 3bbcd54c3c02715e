use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{MetaConfig, SupportMode};
use super::inner::inner_loop_with;
use super::outer::{apply_update_to, outer_step};
use crate::data::{build_support_set, build_training_stream, Dataset, DomainSet, Stream, SupportSet};
use crate::error::{Error, Result};
use crate::model::{ConvNet, Group, ParamBundle};
use crate::seed;
use crate::tensor::{Scalar, Tape};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub inner_losses: Vec<f64>,
    pub outer_loss: f64,
    pub inner_updates: usize,
    pub outer_updates: usize,
    pub support_size: usize,
    /// Support samples whose clean image also occurs in the inner stream.
    pub support_overlap: usize,
    pub wall_ms: f64,
}

/// What the outer update optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Outer loss after simulated online adaptation.
    Meta,
    /// Supervised plus rotation loss at `θ_0`, no inner loop.
    Joint,
    /// Supervised loss only, on `(ω, ϕ)`.
    Supervised,
}

/// Called after every epoch with the epoch index and current parameters.
pub type EpochHook<'a, S> = dyn FnMut(usize, &ParamBundle<S>) -> Result<()> + 'a;

fn draw<R: rand::Rng>(
    cfg: &MetaConfig,
    source: &DomainSet,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<(Stream, SupportSet)> {
    let inner = build_training_stream(source, dataset, cfg.d, cfg.k, rng)?;
    let support = match cfg.support {
        SupportMode::Resample => build_support_set(source, &inner, cfg.d_extra, cfg.k, dataset, rng)?,
        SupportMode::Reuse => SupportSet::reuse(&inner),
    };
    Ok((inner, support))
}

/// Gradient step on `θ_0` for the joint or supervised objective; returns the loss.
fn direct_step<S: Scalar>(
    net: &ConvNet,
    theta: &mut ParamBundle<S>,
    support: &SupportSet,
    objective: Objective,
    gamma: f64,
    momentum: Option<(f64, &mut Vec<S>)>,
) -> Result<f64> {
    let groups: &[Group] = match objective {
        Objective::Supervised => &[Group::Omega, Group::PhiSup],
        _ => &Group::ALL,
    };
    let (x, y) = support.batch()?;
    let x = x.cast::<S>();
    let mut tape = Tape::new();
    let p = theta.bind(&mut tape, groups)?;
    let mut loss = net.sup_loss(&mut tape, &p, &x, &y)?;
    if objective == Objective::Joint {
        let ls = net.ssl_loss(&mut tape, &p, &x)?;
        loss = tape.add(loss, ls)?;
    }
    let value = tape.item(loss).to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    if momentum.as_ref().is_some_and(|(mu, _)| *mu > 0.0) {
        let g = theta.collect_grads(&p, &grads, groups)?;
        apply_update_to(theta, groups, &g, gamma, momentum)?;
    } else {
        theta.absorb_grads(&p, &grads, groups)?;
        theta.sgd_step(groups, gamma)?;
    }
    Ok(value)
}

/// Trains `init` for `cfg.epochs` epochs. Every objective draws the same
/// inner streams and support sets from the `"meta"` sub-seed, so runs that
/// differ only in objective see identical data.
pub fn train_with<S: Scalar>(
    cfg: &MetaConfig,
    objective: Objective,
    net: &ConvNet,
    source: &DomainSet,
    dataset: &Dataset,
    init: ParamBundle<S>,
    on_epoch: &mut EpochHook<'_, S>,
) -> Result<(ParamBundle<S>, Vec<IterRecord>)> {
    cfg.validate()?;
    let mut theta = init;
    let mut log = Vec::new();
    let mut rng = seed::rng(seed::sub_seed(cfg.seed, "meta"));
    let mut velocity: Vec<S> = Vec::new();
    let iterations = cfg.iterations(dataset.len());
    for epoch in 0..cfg.epochs {
        let (alpha, gamma) = cfg.lrs(epoch);
        for it in 0..iterations {
            let start = Instant::now();
            let (inner, support) = draw(cfg, source, dataset, &mut rng)?;
            let inner_ids = inner.ids();
            let overlap = support.samples.iter().filter(|s| inner_ids.contains(&s.source_id)).count();
            let (inner_losses, outer_loss) = match objective {
                Objective::Meta => {
                    let (theta_l, traj) = inner_loop_with(net, &theta, &inner, alpha, cfg.inner, !cfg.first_order)?;
                    let losses = traj.losses();
                    let mom = Some((cfg.momentum, &mut velocity));
                    let r = outer_step(net, &mut theta, theta_l, traj, &support, gamma, cfg.first_order, mom)?;
                    (losses, r.loss)
                }
                _ => (Vec::new(), direct_step(net, &mut theta, &support, objective, gamma, Some((cfg.momentum, &mut velocity)))?),
            };
            log.push(IterRecord {
                epoch,
                iteration: epoch * iterations + it,
                alpha,
                gamma,
                inner_updates: inner_losses.len(),
                inner_losses,
                outer_loss,
                outer_updates: 1,
                support_size: support.len(),
                support_overlap: overlap,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        on_epoch(epoch, &theta)?;
    }
    Ok((theta, log))
}

/// Meta-training.
pub fn train<S: Scalar>(
    cfg: &MetaConfig,
    net: &ConvNet,
    source: &DomainSet,
    dataset: &Dataset,
    init: ParamBundle<S>,
) -> Result<(ParamBundle<S>, Vec<IterRecord>)> {
    train_with(cfg, Objective::Meta, net, source, dataset, init, &mut |_, _| Ok(()))
}

/// Joint supervised + rotation training at `θ_0` (the TTT-style baseline).
pub fn train_joint<S: Scalar>(
    cfg: &MetaConfig,
    net: &ConvNet,
    source: &DomainSet,
    dataset: &Dataset,
    init: ParamBundle<S>,
) -> Result<(ParamBundle<S>, Vec<IterRecord>)> {
    train_with(cfg, Objective::Joint, net, source, dataset, init, &mut |_, _| Ok(()))
}

/// Plain supervised training (the vanilla baseline).
pub fn train_vanilla<S: Scalar>(
    cfg: &MetaConfig,
    net: &ConvNet,
    source: &DomainSet,
    dataset: &Dataset,
    init: ParamBundle<S>,
) -> Result<(ParamBundle<S>, Vec<IterRecord>)> {
    train_with(cfg, Objective::Supervised, net, source, dataset, init, &mut |_, _| Ok(()))
}
