use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::corruption::{CorruptionKind, DomainSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSet {
    pub role: Role,
    pub domains: Vec<DomainSpec>,
}

impl DomainSet {
    pub fn new(role: Role, domains: Vec<DomainSpec>) -> Result<Self> {
        let set = Self { role, domains };
        set.validate()?;
        Ok(set)
    }

    /// Every kind in `kinds` at every severity in `severities`, for each variant `0..variants`.
    pub fn grid(role: Role, kinds: &[CorruptionKind], severities: &[u8], variants: u32) -> Result<Self> {
        let mut domains = Vec::new();
        for v in 0..variants.max(1) {
            for &kind in kinds {
                for &severity in severities {
                    domains.push(DomainSpec {
                        kind,
                        severity,
                        seed: 0,
                        variant: v,
                    });
                }
            }
        }
        Self::new(role, domains)
    }

    /// All eight parametric kinds at all five severities: 40 domains.
    pub fn default_source() -> Self {
        Self::grid(Role::Source, &CorruptionKind::PARAMETRIC, &[1, 2, 3, 4, 5], 1).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let field = match self.role {
            Role::Source => "source",
            Role::Target => "target",
        };
        if self.domains.is_empty() {
            return Err(Error::config(field, "domain set is empty"));
        }
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            d.validate().map_err(|e| Error::config(field, e.to_string()))?;
            if !seen.insert(d.key()) {
                return Err(Error::config(field, format!("domain {d} listed twice")));
            }
        }
        Ok(())
    }
}

/// Rejects any distribution present in both sets.
pub fn validate_disjoint(source: &DomainSet, target: &DomainSet) -> Result<()> {
    let keys: BTreeSet<_> = source.domains.iter().map(DomainSpec::key).collect();
    if let Some(d) = target.domains.iter().find(|d| keys.contains(&d.key())) {
        return Err(Error::config("target", format!("domain {d} also appears in the source set")));
    }
    Ok(())
}
