use serde::{Deserialize, Serialize};

use super::metrics::{StepRecord, StreamResult};
use crate::data::Stream;
use crate::error::{Error, Result};
use crate::meta::ssl_step;
use crate::model::{argmax, ConvNet, Group, ParamBundle};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// One rotation-loss step per sample on `(ω, φ_ssl)`.
    OursSample,
    /// Forward predictions only.
    NoAdapt,
    /// `OursSample` applied to a jointly trained checkpoint.
    TttSample,
    /// Batch entropy minimization on the GroupNorm affine parameters.
    EntropyBatch,
}

impl AdaptMode {
    pub fn is_batch(self) -> bool {
        self == AdaptMode::EntropyBatch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictOrder {
    AdaptThenPredict,
    PredictThenAdapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub beta: f64,
    pub mode: AdaptMode,
    pub batch_size: usize,
    /// `None` picks the mode's default: adapt-then-predict for per-sample
    /// modes, predict-then-adapt for batch modes.
    pub predict_order: Option<PredictOrder>,
    /// Restart every step from the checkpoint (diagnostics only).
    pub episodic_reset: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            beta: 0.0003,
            mode: AdaptMode::OursSample,
            batch_size: 64,
            predict_order: None,
            episodic_reset: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if self.mode.is_batch() && self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn order(&self) -> PredictOrder {
        self.predict_order.unwrap_or(if self.mode.is_batch() {
            PredictOrder::PredictThenAdapt
        } else {
            PredictOrder::AdaptThenPredict
        })
    }
}

fn is_norm_affine(name: &str) -> bool {
    name.contains(".gn.") && !name.starts_with("ssl.")
}

/// One step of mean-entropy minimization over `x` on the GroupNorm scale and
/// shift of the classification path.
fn entropy_step<S: Scalar>(net: &ConvNet, params: &mut ParamBundle<S>, x: &Tensor<S>, lr: f64) -> Result<()> {
    let groups = [Group::Omega, Group::PhiSup];
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &groups)?;
    let xv = tape.constant(x)?;
    let logits = net.forward_sup(&mut tape, &b, xv)?;
    let h = tape.softmax_entropy(logits)?;
    let value = tape.item(h).to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("batch entropy is {value}")));
    }
    let grads = tape.backward(h)?;
    let lr = S::from_f64(lr);
    for g in groups {
        for p in params.group_mut(g) {
            if !is_norm_affine(&p.name) {
                continue;
            }
            if let Some(gv) = grads.get(b.var(&p.name)?) {
                for (v, &d) in p.tensor.data_mut().iter_mut().zip(gv) {
                    *v -= lr * d;
                }
            }
        }
    }
    Ok(())
}

fn predict_one<S: Scalar>(net: &ConvNet, params: &ParamBundle<S>, x: &Tensor<S>) -> Result<usize> {
    Ok(argmax(&net.logits(params, x)?[0]))
}

/// Runs `stream` through the model starting from `theta0`. Labels are read
/// only when scoring.
pub fn adapt_stream<S: Scalar>(
    net: &ConvNet,
    theta0: &ParamBundle<S>,
    stream: &Stream,
    cfg: &AdaptConfig,
) -> Result<(StreamResult, ParamBundle<S>)> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Data("stream is empty".into()));
    }
    if cfg.mode.is_batch() && cfg.batch_size > stream.len() {
        return Err(Error::config(
            "batch_size",
            format!("batch of {} exceeds stream length {}", cfg.batch_size, stream.len()),
        ));
    }
    let order = cfg.order();
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(stream.len());
    let mut updates = 0;
    for t in 0..stream.len() {
        if cfg.episodic_reset {
            theta = theta0.clone();
        }
        let x = stream.input(t)?.cast::<S>();
        let sample = &stream.samples[t];
        let (pred, ssl_loss) = match cfg.mode {
            AdaptMode::OursSample | AdaptMode::TttSample => {
                let early = match order {
                    PredictOrder::PredictThenAdapt => Some(predict_one(net, &theta, &x)?),
                    PredictOrder::AdaptThenPredict => None,
                };
                let loss = ssl_step(net, &mut theta, &x, cfg.beta, 1.0)?;
                updates += 1;
                let pred = match early {
                    Some(p) => p,
                    None => predict_one(net, &theta, &x)?,
                };
                (pred, loss)
            }
            AdaptMode::NoAdapt => (predict_one(net, &theta, &x)?, net.ssl_loss_value(&theta, &x)?),
            AdaptMode::EntropyBatch => {
                let loss = net.ssl_loss_value(&theta, &x)?;
                let end = t + 1;
                let full = end % cfg.batch_size == 0;
                let adapt = |theta: &mut ParamBundle<S>| entropy_step(net, theta, &stream.inputs(end - cfg.batch_size, end)?.cast(), cfg.beta);
                let pred = match order {
                    PredictOrder::PredictThenAdapt => {
                        let p = predict_one(net, &theta, &x)?;
                        if full {
                            adapt(&mut theta)?;
                            updates += 1;
                        }
                        p
                    }
                    PredictOrder::AdaptThenPredict => {
                        if full {
                            adapt(&mut theta)?;
                            updates += 1;
                        }
                        predict_one(net, &theta, &x)?
                    }
                };
                (pred, loss)
            }
        };
        records.push(StepRecord {
            t,
            domain_index: sample.domain_index,
            pred,
            label: sample.label,
            ssl_loss,
        });
    }
    let domains = stream.domains.iter().map(|d| d.to_string()).collect();
    Ok((StreamResult { records, domains, updates }, theta))
}
