//! Schedules, realized streams and support sets.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corruption::{apply_corruption, DomainSpec};
use super::dataset::Dataset;
use super::domains::DomainSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Periodic,
    Randomized,
    InnerTraining,
}

/// Time-indexed assignment of domains to steps.
///
/// For every kind the domain at step `t` is
/// `domain_order[(t / period) % domain_order.len()]`. A randomized schedule
/// stores its realized block draws in `domain_order`; an inner-training
/// schedule has `period = K` and `domain_order = 0..D`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSchedule {
    pub kind: ScheduleKind,
    pub period: usize,
    pub domain_order: Vec<usize>,
    pub length: usize,
}

impl StreamSchedule {
    pub fn periodic(period: usize, domain_order: Vec<usize>, length: usize) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::Periodic,
            period,
            domain_order,
            length,
        };
        s.validate()?;
        Ok(s)
    }

    /// A fresh uniform draw over `num_domains` every `period` steps.
    pub fn randomized<R: Rng + ?Sized>(period: usize, num_domains: usize, length: usize, rng: &mut R) -> Result<Self> {
        if period == 0 {
            return Err(Error::config("period", "must be positive"));
        }
        if num_domains == 0 {
            return Err(Error::config("target", "no domains to draw from"));
        }
        let blocks = length.div_ceil(period);
        let s = Self {
            kind: ScheduleKind::Randomized,
            period,
            domain_order: (0..blocks).map(|_| rng.random_range(0..num_domains)).collect(),
            length,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn inner_training(d: usize, k: usize) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::InnerTraining,
            period: k,
            domain_order: (0..d).collect(),
            length: k * d,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::config("period", "must be positive"));
        }
        if self.length == 0 {
            return Err(Error::config("stream_length", "must be positive"));
        }
        if self.domain_order.is_empty() {
            return Err(Error::config("domain_order", "must name at least one domain"));
        }
        Ok(())
    }

    pub fn domain_at(&self, t: usize) -> usize {
        self.domain_order[(t / self.period) % self.domain_order.len()]
    }

    pub fn sequence(&self) -> Vec<usize> {
        (0..self.length).map(|t| self.domain_at(t)).collect()
    }
}

/// One realized stream element. `source_id` indexes the clean pool the
/// image came from; it is the identity used for support-set exclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: usize,
    pub source_id: usize,
    pub domain_index: usize,
    pub corruption_seed: u64,
    pub label: usize,
    pub x: Vec<f32>,
}

fn realize(ds: &Dataset, t: usize, id: usize, domain_index: usize, spec: &DomainSpec, seed: u64) -> Result<Sample> {
    Ok(Sample {
        t,
        source_id: id,
        domain_index,
        corruption_seed: seed,
        label: ds.label(id),
        x: apply_corruption(ds.image(id), ds.channels(), spec, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub schedule: StreamSchedule,
    /// Domains referenced by `Sample::domain_index`.
    pub domains: Vec<DomainSpec>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample `t` as a `[1, c, h, w]` batch.
    pub fn input(&self, t: usize) -> Result<Tensor<f32>> {
        Tensor::new(vec![1, self.channels, self.size, self.size], self.samples[t].x.clone())
    }

    /// Samples `[start, end)` as one batch.
    pub fn inputs(&self, start: usize, end: usize) -> Result<Tensor<f32>> {
        let data = self.samples[start..end].iter().flat_map(|s| s.x.iter().copied()).collect();
        Tensor::new(vec![end - start, self.channels, self.size, self.size], data)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn domain_indices(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.domain_index).collect()
    }

    pub fn ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.source_id).collect()
    }

    /// Copy with every label replaced by 0.
    pub fn with_labels_zeroed(&self) -> Stream {
        let mut s = self.clone();
        for x in &mut s.samples {
            x.label = 0;
        }
        s
    }

    /// True when the stored domain sequence is exactly what the schedule prescribes.
    pub fn matches_schedule(&self) -> bool {
        self.samples.len() == self.schedule.length
            && self
                .samples
                .iter()
                .enumerate()
                .all(|(t, s)| s.t == t && s.domain_index == self.schedule.domain_at(t))
    }
}

/// `D` distinct source domains in sequence, `K` samples each drawn with replacement.
pub fn build_training_stream<R: Rng + ?Sized>(
    source: &DomainSet,
    dataset: &Dataset,
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<Stream> {
    if d == 0 || k == 0 {
        return Err(Error::config(if d == 0 { "d" } else { "k" }, "must be positive"));
    }
    if d > source.len() {
        return Err(Error::config("d", format!("{d} domains requested, source set has {}", source.len())));
    }
    if dataset.is_empty() {
        return Err(Error::Data("training pool is empty".into()));
    }
    let schedule = StreamSchedule::inner_training(d, k)?;
    let chosen: Vec<DomainSpec> = index::sample(rng, source.len(), d).into_iter().map(|i| source.domains[i]).collect();
    let mut samples = Vec::with_capacity(d * k);
    for (di, spec) in chosen.iter().enumerate() {
        for _ in 0..k {
            let id = rng.random_range(0..dataset.len());
            let seed = rng.random();
            samples.push(realize(dataset, samples.len(), id, di, spec, seed)?);
        }
    }
    Ok(Stream {
        schedule,
        domains: chosen,
        channels: dataset.channels(),
        size: dataset.size(),
        num_classes: dataset.num_classes(),
        samples,
    })
}

/// Labeled outer-loop batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub domains: Vec<DomainSpec>,
    pub channels: usize,
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl SupportSet {
    /// The inner stream's own samples as the support set (ablation only).
    pub fn reuse(inner: &Stream) -> Self {
        Self {
            domains: inner.domains.clone(),
            channels: inner.channels,
            size: inner.size,
            samples: inner.samples.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.source_id).collect()
    }

    pub fn batch(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        let data = self.samples.iter().flat_map(|s| s.x.iter().copied()).collect();
        let x = Tensor::new(vec![self.samples.len(), self.channels, self.size, self.size], data)?;
        Ok((x, self.samples.iter().map(|s| s.label).collect()))
    }
}

/// `K` fresh samples from each inner domain plus one from each of `d_extra`
/// further source domains. All ids are distinct and none occurs in `inner`.
pub fn build_support_set<R: Rng + ?Sized>(
    source: &DomainSet,
    inner: &Stream,
    d_extra: usize,
    k: usize,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<SupportSet> {
    let inner_keys: BTreeSet<_> = inner.domains.iter().map(DomainSpec::key).collect();
    let others: Vec<DomainSpec> = source
        .domains
        .iter()
        .filter(|d| !inner_keys.contains(&d.key()))
        .copied()
        .collect();
    if others.len() < d_extra {
        return Err(Error::config(
            "d_extra",
            format!("{d_extra} extra domains requested, only {} source domains lie outside the inner stream", others.len()),
        ));
    }
    let exclude = inner.ids();
    let pool: Vec<usize> = (0..dataset.len()).filter(|i| !exclude.contains(i)).collect();
    let need = k * inner.domains.len() + d_extra;
    if pool.len() < need {
        return Err(Error::Data(format!(
            "support set needs {need} distinct samples, {} remain after excluding the inner stream",
            pool.len()
        )));
    }
    let extra: Vec<DomainSpec> = index::sample(rng, others.len(), d_extra).into_iter().map(|i| others[i]).collect();
    let ids: Vec<usize> = index::sample(rng, pool.len(), need).into_iter().map(|i| pool[i]).collect();
    let domains: Vec<DomainSpec> = inner.domains.iter().chain(&extra).copied().collect();
    let mut samples = Vec::with_capacity(need);
    for (j, &id) in ids.iter().enumerate() {
        let di = if j < k * inner.domains.len() { j / k } else { inner.domains.len() + j - k * inner.domains.len() };
        let seed = rng.random();
        samples.push(realize(dataset, j, id, di, &domains[di], seed)?);
    }
    Ok(SupportSet {
        domains,
        channels: dataset.channels(),
        size: dataset.size(),
        samples,
    })
}

/// Realizes `schedule` over `target`. Clean images are taken from successive
/// random permutations of the pool.
pub fn build_test_stream<R: Rng + ?Sized>(
    target: &DomainSet,
    schedule: &StreamSchedule,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<Stream> {
    schedule.validate()?;
    if schedule.kind == ScheduleKind::InnerTraining {
        return Err(Error::config("schedule", "test streams are periodic or randomized"));
    }
    if let Some(&i) = schedule.domain_order.iter().find(|&&i| i >= target.len()) {
        return Err(Error::config(
            "domain_order",
            format!("index {i} out of range for {} target domains", target.len()),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Data("test pool is empty".into()));
    }
    let mut perm: Vec<usize> = Vec::new();
    let mut samples = Vec::with_capacity(schedule.length);
    for t in 0..schedule.length {
        if t % dataset.len() == 0 {
            perm = index::sample(rng, dataset.len(), dataset.len()).into_vec();
        }
        let id = perm[t % dataset.len()];
        let di = schedule.domain_at(t);
        let seed = rng.random();
        samples.push(realize(dataset, t, id, di, &target.domains[di], seed)?);
    }
    Ok(Stream {
        schedule: schedule.clone(),
        domains: target.domains.clone(),
        channels: dataset.channels(),
        size: dataset.size(),
        num_classes: dataset.num_classes(),
        samples,
    })
}
