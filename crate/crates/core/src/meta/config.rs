use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the outer loop builds its labeled batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Fresh samples from the inner domains plus `d_extra` extra domains.
    Resample,
    /// The inner stream's own samples (ablation).
    Reuse,
}

/// How the inner loop consumes its stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// One update per sample, in stream order.
    Sequential,
    /// One update on the summed loss of the whole stream (ablation).
    Batch,
    /// No inner updates (`L = 0`); the outer loss is taken at `θ_0`.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_final: f64,
    pub gamma_final: f64,
    /// Domains per inner stream.
    pub d: usize,
    /// Samples per domain.
    pub k: usize,
    /// Extra support domains.
    pub d_extra: usize,
    pub epochs: usize,
    /// First epoch (0-based) that uses the final learning rates.
    pub lr_drop_epoch: usize,
    /// Iterations per epoch; `None` means `dataset_len / (k·d + d_extra)`.
    pub iterations_per_epoch: Option<usize>,
    pub first_order: bool,
    /// Heavy-ball momentum of the outer update.
    pub momentum: f64,
    pub seed: u64,
    pub support: SupportMode,
    pub inner: InnerMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.003,
            gamma: 0.01,
            alpha_final: 0.0003,
            gamma_final: 0.001,
            d: 3,
            k: 5,
            d_extra: 20,
            epochs: 100,
            lr_drop_epoch: 80,
            iterations_per_epoch: None,
            first_order: true,
            momentum: 0.0,
            seed: 0,
            support: SupportMode::Resample,
            inner: InnerMode::Sequential,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("alpha_final", self.alpha_final),
            ("gamma_final", self.gamma_final),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "learning rate must be finite and > 0"));
            }
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(Error::config("lr_drop_epoch", "must not exceed epochs"));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::config("iterations_per_epoch", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Inner stream length `L = K·D`.
    pub fn stream_len(&self) -> usize {
        self.k * self.d
    }

    /// Support-set size `N`.
    pub fn support_len(&self) -> usize {
        match self.support {
            SupportMode::Resample => self.k * self.d + self.d_extra,
            SupportMode::Reuse => self.k * self.d,
        }
    }

    /// `(alpha, gamma)` in force during `epoch`.
    pub fn lrs(&self, epoch: usize) -> (f64, f64) {
        if epoch >= self.lr_drop_epoch {
            (self.alpha_final, self.gamma_final)
        } else {
            (self.alpha, self.gamma)
        }
    }

    pub fn iterations(&self, dataset_len: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| (dataset_len / self.support_len().max(1)).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_drop_schedule() {
        let c = MetaConfig::default();
        assert_eq!(c.lrs(0), (0.003, 0.01));
        assert_eq!(c.lrs(79), (0.003, 0.01));
        assert_eq!(c.lrs(80), (0.0003, 0.001));
        assert_eq!(c.lrs(99), (0.0003, 0.001));
    }

    #[test]
    fn validation() {
        assert!(MetaConfig::default().validate().is_ok());
        let bad = MetaConfig { alpha: 0.0, ..MetaConfig::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = MetaConfig { lr_drop_epoch: 101, ..MetaConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(MetaConfig::default().support_len(), 35);
    }
}
