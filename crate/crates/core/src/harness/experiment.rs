use std::path::Path;

use super::config::{DataSource, RunConfig, SubSeeds};
use crate::data::{
    build_test_stream, generate_synthetic_glyphs, read_binary, Dataset, DomainSet, ScheduleKind, Stream, StreamSchedule,
};
use crate::error::{Error, Result};
use crate::meta::{train_with, IterRecord, MetaConfig, Objective};
use crate::model::{ConvNet, ParamBundle};
use crate::seed;
use crate::tta::{adapt_stream, AdaptConfig, StreamResult};

/// Everything one seed of a run needs: data, domains and the network.
pub struct Experiment {
    pub cfg: RunConfig,
    pub seed: u64,
    pub seeds: SubSeeds,
    pub net: ConvNet,
    pub source: DomainSet,
    pub target: DomainSet,
    pub train_data: Dataset,
    pub test_data: Dataset,
}

impl Experiment {
    pub fn new(cfg: &RunConfig, master: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = cfg.sub_seeds(master);
        let (train_data, test_data) = load_data(cfg, seeds.data)?;
        let spec = cfg.model_spec(train_data.channels(), train_data.size(), train_data.num_classes());
        let net = ConvNet::new(spec)?;
        let (source, target) = cfg.domain_sets()?;
        Ok(Self {
            cfg: cfg.clone(),
            seed: master,
            seeds,
            net,
            source,
            target,
            train_data,
            test_data,
        })
    }

    /// The configured meta settings, seeded from the train sub-seed.
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: self.seeds.train,
            ..self.cfg.meta.clone()
        }
    }

    pub fn init(&self) -> ParamBundle<f32> {
        self.net.init(&mut seed::rng(self.seeds.init))
    }

    pub fn train(&self, objective: Objective, meta: &MetaConfig) -> Result<(ParamBundle<f32>, Vec<IterRecord>)> {
        train_with(meta, objective, &self.net, &self.source, &self.train_data, self.init(), &mut |_, _| Ok(()))
    }

    /// Test stream for one period. Clean images and corruption draws depend on
    /// the stream sub-seed only, so every period sees the same samples.
    pub fn test_stream(&self, period: usize) -> Result<Stream> {
        let length = self.cfg.stream.length;
        let schedule = match self.cfg.stream.schedule {
            ScheduleKind::Periodic => StreamSchedule::periodic(period, self.cfg.order(self.target.len()), length)?,
            ScheduleKind::Randomized => {
                let mut rng = seed::rng(seed::sub_seed(self.seeds.stream, "schedule"));
                StreamSchedule::randomized(period, self.target.len(), length, &mut rng)?
            }
            ScheduleKind::InnerTraining => {
                return Err(Error::config("stream.schedule", "inner_training is not a test schedule"));
            }
        };
        build_test_stream(&self.target, &schedule, &self.test_data, &mut seed::rng(self.seeds.stream))
    }

    pub fn evaluate(&self, params: &ParamBundle<f32>, stream: &Stream, adapt: &AdaptConfig) -> Result<StreamResult> {
        Ok(adapt_stream(&self.net, params, stream, adapt)?.0)
    }
}

/// Training and test sets for a run.
pub fn load_data(cfg: &RunConfig, data_seed: u64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => Ok((
            generate_synthetic_glyphs(d.train_size, d.num_classes, d.channels, d.image_size, seed::sub_seed(data_seed, "train"))?,
            generate_synthetic_glyphs(d.test_size, d.num_classes, d.channels, d.image_size, seed::sub_seed(data_seed, "test"))?,
        )),
        DataSource::Binary => {
            let path = |p: &Option<std::path::PathBuf>, field: &str| {
                p.clone().ok_or_else(|| Error::config(field, "required when data.source = \"binary\""))
            };
            let train = read_binary(&path(&d.train_path, "data.train_path")?)?;
            let test = read_binary(&path(&d.test_path, "data.test_path")?)?;
            if (train.channels(), train.size(), train.num_classes()) != (test.channels(), test.size(), test.num_classes()) {
                return Err(Error::config("data.test_path", "test set shape differs from the training set"));
            }
            Ok((train, test))
        }
    }
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Meta => "meta",
        Objective::Joint => "joint",
        Objective::Supervised => "vanilla",
    }
}

/// `{dir}/seed-{seed}/{name}` without extension.
pub fn seed_path(dir: &Path, seed: u64, name: &str) -> std::path::PathBuf {
    dir.join(format!("seed-{seed}")).join(name)
}
