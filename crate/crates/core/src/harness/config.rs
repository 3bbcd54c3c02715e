use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{validate_disjoint, CorruptionKind, DomainSet, DomainSpec, Role, ScheduleKind};
use crate::error::{Error, Result};
use crate::meta::{MetaConfig, Objective};
use crate::model::ConvNetSpec;
use crate::seed;
use crate::tta::AdaptConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Binary training set manifest (binary source only).
    pub train_path: Option<PathBuf>,
    /// Binary test set manifest (binary source only).
    pub test_path: Option<PathBuf>,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_path: None,
            test_path: None,
            num_classes: 5,
            channels: 3,
            image_size: 16,
            train_size: 2000,
            test_size: 500,
        }
    }
}

/// Architecture knobs; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub gn_groups: usize,
    pub gn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            kernel: 5,
            hidden: 32,
            gn_groups: 4,
            gn_eps: 1e-5,
        }
    }
}

/// A kind × severity grid plus explicitly listed domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainGrid {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub variants: u32,
    pub extra: Vec<DomainSpec>,
}

impl Default for DomainGrid {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            severities: vec![1, 2, 3, 4, 5],
            variants: 1,
            extra: Vec::new(),
        }
    }
}

impl DomainGrid {
    pub fn build(&self, role: Role) -> Result<DomainSet> {
        let mut domains = Vec::new();
        for v in 0..self.variants.max(1) {
            for &kind in &self.kinds {
                for &severity in &self.severities {
                    domains.push(DomainSpec {
                        kind,
                        severity,
                        seed: 0,
                        variant: v,
                    });
                }
            }
        }
        domains.extend(self.extra.iter().copied());
        DomainSet::new(role, domains)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainsConfig {
    pub source: DomainGrid,
    pub target: DomainGrid,
}

impl Default for DomainsConfig {
    fn default() -> Self {
        use CorruptionKind::*;
        Self {
            source: DomainGrid {
                kinds: vec![ImpulseNoise, MotionBlur, JpegQuantize, Spatter, Brightness],
                ..DomainGrid::default()
            },
            target: DomainGrid {
                kinds: Vec::new(),
                severities: Vec::new(),
                variants: 1,
                extra: vec![
                    DomainSpec::new(GaussianNoise, 5),
                    DomainSpec::new(Contrast, 5),
                    DomainSpec::new(ElasticWarp, 5),
                ],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub schedule: ScheduleKind,
    /// Periods to evaluate; every adaptation command runs each one.
    pub periods: Vec<usize>,
    pub length: usize,
    /// Target domain indices in visiting order; empty means `0..|target|`.
    pub order: Vec<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Periodic,
            periods: vec![10],
            length: 600,
            order: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 1e-1],
        }
    }
}

/// Fixed values that replace the derived sub-seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedOverrides {
    pub data: Option<u64>,
    pub init: Option<u64>,
    pub train: Option<u64>,
    pub stream: Option<u64>,
    pub adapt: Option<u64>,
}

/// Sub-seeds for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSeeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub stream: u64,
    /// Recorded for completeness; the adapters are deterministic.
    pub adapt: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Training objective used by `train` and by the checkpoint `adapt` loads.
    pub objective: Objective,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub domains: DomainsConfig,
    pub stream: StreamConfig,
    pub meta: MetaConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
    pub seeding: SeedOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs/default"),
            objective: Objective::Meta,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            domains: DomainsConfig::default(),
            stream: StreamConfig::default(),
            meta: MetaConfig {
                epochs: 5,
                lr_drop_epoch: 4,
                iterations_per_epoch: Some(60),
                momentum: 0.9,
                ..MetaConfig::default()
            },
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
            seeding: SeedOverrides::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` layered over the defaults: any key left out takes its
    /// default, any key not known to the schema is rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string().trim_end().to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::config("config", e.to_string()))?;
        merge(&mut merged, user, "");
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.train_size == 0 || d.test_size == 0 {
                    return Err(Error::config("data.train_size", "synthetic sets must be nonempty"));
                }
            }
            DataSource::Binary => {
                if d.train_path.is_none() {
                    return Err(Error::config("data.train_path", "required when data.source = \"binary\""));
                }
                if d.test_path.is_none() {
                    return Err(Error::config("data.test_path", "required when data.source = \"binary\""));
                }
            }
        }
        if d.source == DataSource::Synthetic {
            self.model_spec(d.channels, d.image_size, d.num_classes).validate()?;
        }
        let (source, target) = self.domain_sets()?;
        if self.stream.periods.is_empty() || self.stream.periods.contains(&0) {
            return Err(Error::config("stream.periods", "needs at least one positive period"));
        }
        if self.stream.length == 0 {
            return Err(Error::config("stream.length", "must be positive"));
        }
        if self.stream.schedule == ScheduleKind::InnerTraining {
            return Err(Error::config("stream.schedule", "inner_training is not a test schedule"));
        }
        if let Some(&bad) = self.stream.order.iter().find(|&&i| i >= target.len()) {
            return Err(Error::config("stream.order", format!("index {bad} exceeds {} target domains", target.len())));
        }
        if self.meta.d > source.len() {
            return Err(Error::config("meta.d", format!("{} inner domains but only {} source domains", self.meta.d, source.len())));
        }
        self.meta.validate()?;
        self.adapt.validate()?;
        if let Some(b) = self.sweep.betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::config("sweep.betas", format!("{b} is not a valid learning rate")));
        }
        Ok(())
    }

    pub fn domain_sets(&self) -> Result<(DomainSet, DomainSet)> {
        let source = self.domains.source.build(Role::Source)?;
        let target = self.domains.target.build(Role::Target)?;
        validate_disjoint(&source, &target)?;
        Ok((source, target))
    }

    pub fn model_spec(&self, channels: usize, image_size: usize, num_classes: usize) -> ConvNetSpec {
        let m = &self.model;
        ConvNetSpec {
            in_channels: channels,
            image_size,
            width: m.width,
            kernel: m.kernel,
            hidden: m.hidden,
            num_classes,
            gn_groups: m.gn_groups,
            gn_eps: m.gn_eps,
        }
    }

    pub fn order(&self, num_targets: usize) -> Vec<usize> {
        if self.stream.order.is_empty() {
            (0..num_targets).collect()
        } else {
            self.stream.order.clone()
        }
    }

    pub fn sub_seeds(&self, master: u64) -> SubSeeds {
        let s = &self.seeding;
        SubSeeds {
            data: s.data.unwrap_or_else(|| seed::sub_seed(master, "data")),
            init: s.init.unwrap_or_else(|| seed::sub_seed(master, "init")),
            train: s.train.unwrap_or_else(|| seed::sub_seed(master, "train")),
            stream: s.stream.unwrap_or_else(|| seed::sub_seed(master, "stream")),
            adapt: s.adapt.unwrap_or_else(|| seed::sub_seed(master, "adapt")),
        }
    }
}

/// Deep merge, except that a domain grid given by the user replaces the
/// default grid whole.
fn merge(base: &mut toml::Table, over: toml::Table, path: &str) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if path != "domains" => merge(b, o, &k),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
