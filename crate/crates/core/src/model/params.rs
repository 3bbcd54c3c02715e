use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{apply_update, Gradients, Scalar, Tape, Tensor, Var};

/// The three disjoint parameter groups of the dual-branch network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Shared feature extractor.
    Omega,
    /// Self-supervised (rotation) branch.
    PhiSsl,
    /// Supervised classification branch.
    PhiSup,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Omega, Group::PhiSsl, Group::PhiSup];
    /// The groups that adapt online.
    pub const ADAPTED: [Group; 2] = [Group::Omega, Group::PhiSsl];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Omega => "omega",
            Group::PhiSsl => "phi_ssl",
            Group::PhiSup => "phi_sup",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Partitioned parameter set `(omega, phi_ssl, phi_sup)`.
///
/// `version` increases on every mutable access so that derived state (an
/// inner-loop trajectory, say) can detect that it was recorded against older
/// values.
#[derive(Clone, Debug)]
pub struct ParamBundle<S> {
    omega: Vec<Param<S>>,
    phi_ssl: Vec<Param<S>>,
    phi_sup: Vec<Param<S>>,
    version: u64,
}

impl<S: Scalar> ParamBundle<S> {
    pub fn new(
        omega: Vec<Param<S>>,
        phi_ssl: Vec<Param<S>>,
        phi_sup: Vec<Param<S>>,
    ) -> Result<Self> {
        let bundle = Self {
            omega,
            phi_ssl,
            phi_sup,
            version: 0,
        };
        let mut names: Vec<&str> = bundle.iter().map(|(_, p)| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate parameter name `{}`", w[0])));
        }
        Ok(bundle)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn group(&self, g: Group) -> &[Param<S>] {
        match g {
            Group::Omega => &self.omega,
            Group::PhiSsl => &self.phi_ssl,
            Group::PhiSup => &self.phi_sup,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [Param<S>] {
        self.version += 1;
        match g {
            Group::Omega => &mut self.omega,
            Group::PhiSsl => &mut self.phi_ssl,
            Group::PhiSup => &mut self.phi_sup,
        }
    }

    /// All parameters in canonical order: omega, phi_ssl, phi_sup.
    pub fn iter(&self) -> impl Iterator<Item = (Group, &Param<S>)> {
        Group::ALL
            .into_iter()
            .flat_map(move |g| self.group(g).iter().map(move |p| (g, p)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.iter().find(|(_, p)| p.name == name).map(|(_, p)| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.version += 1;
        [&mut self.omega, &mut self.phi_ssl, &mut self.phi_sup]
            .into_iter()
            .flat_map(|g| g.iter_mut())
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn group_numel(&self, g: Group) -> usize {
        self.group(g).iter().map(|p| p.tensor.numel()).sum()
    }

    /// Concatenated values of the given groups, canonical order.
    pub fn flatten(&self, groups: &[Group]) -> Vec<S> {
        let mut out = Vec::new();
        for &g in groups {
            for p in self.group(g) {
                out.extend_from_slice(p.tensor.data());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, groups: &[Group], values: &[S]) -> Result<()> {
        let want: usize = groups.iter().map(|&g| self.group_numel(g)).sum();
        if want != values.len() {
            return Err(Error::dim(
                "unflatten",
                "numel",
                format!("groups hold {want} values, got {}", values.len()),
            ));
        }
        let mut off = 0;
        for &g in groups {
            for p in self.group_mut(g) {
                let n = p.tensor.numel();
                p.tensor.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamBundle<T> {
        let conv = |ps: &[Param<S>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        ParamBundle {
            omega: conv(&self.omega),
            phi_ssl: conv(&self.phi_ssl),
            phi_sup: conv(&self.phi_sup),
            version: 0,
        }
    }

    /// True when every value matches bit-for-bit (NaN payloads included).
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        S: BitRepr,
    {
        self.iter().count() == other.iter().count()
            && self.iter().zip(other.iter()).all(|((ga, a), (gb, b))| {
                ga == gb
                    && a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.bits() == y.bits())
            })
    }

    pub fn group_bit_eq(&self, other: &Self, g: Group) -> bool
    where
        S: BitRepr,
    {
        let (a, b) = (self.group(g), other.group(g));
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.name == y.name
                    && x.tensor
                        .data()
                        .iter()
                        .zip(y.tensor.data())
                        .all(|(p, q)| p.bits() == q.bits())
            })
    }

    /// Registers every parameter on `tape`; those in `trainable` require gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: &[Group]) -> Result<Bound> {
        let mut entries = Vec::new();
        for (g, p) in self.iter() {
            let t = p.tensor.clone().with_requires_grad(trainable.contains(&g));
            entries.push((p.name.clone(), g, tape.leaf(&t)?));
        }
        Ok(Bound { entries })
    }

    /// Adds tape gradients into the parameters selected by `groups`.
    /// Parameters the loss does not reach receive no gradient.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &Gradients<S>, groups: &[Group]) -> Result<()> {
        for &g in groups {
            for p in self.group_mut(g) {
                if let Some(gv) = grads.get(bound.var(&p.name)?) {
                    p.tensor.accumulate_grad(gv)?;
                }
            }
        }
        Ok(())
    }

    /// Plain SGD on the selected groups using their stored gradients, which are then cleared.
    pub fn sgd_step(&mut self, groups: &[Group], lr: f64) -> Result<()> {
        for &g in groups {
            for p in self.group_mut(g) {
                apply_update(&p.name, &mut p.tensor, lr, None)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in Group::ALL {
            for p in self.group_mut(g) {
                p.tensor.zero_grad();
            }
        }
    }

    /// Per-group gradient vectors (canonical order) read off a backward pass.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<S>, groups: &[Group]) -> Result<Vec<S>> {
        let mut out = Vec::new();
        for &g in groups {
            for p in self.group(g) {
                match grads.get(bound.var(&p.name)?) {
                    Some(gv) => out.extend_from_slice(gv),
                    None => out.extend(std::iter::repeat_n(S::zero(), p.tensor.numel())),
                }
            }
        }
        Ok(out)
    }

    /// `θ_g ← θ_g − lr·step` over the concatenated groups.
    pub fn axpy(&mut self, groups: &[Group], lr: f64, step: &[S]) -> Result<()> {
        let want: usize = groups.iter().map(|&g| self.group_numel(g)).sum();
        if want != step.len() {
            return Err(Error::dim(
                "axpy",
                "numel",
                format!("groups hold {want} values, step has {}", step.len()),
            ));
        }
        let lr = S::from_f64(lr);
        let mut off = 0;
        for &g in groups {
            for p in self.group_mut(g) {
                for v in p.tensor.data_mut() {
                    *v -= lr * step[off];
                    off += 1;
                }
            }
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamBundle`].
#[derive(Clone, Debug)]
pub struct Bound {
    entries: Vec<(String, Group, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| *v)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self, group: Group) -> impl Iterator<Item = (&str, Var)> {
        self.entries
            .iter()
            .filter(move |(_, g, _)| *g == group)
            .map(|(n, _, v)| (n.as_str(), *v))
    }
}

/// Access to the raw bit pattern of a float, for exact comparisons.
pub trait BitRepr: Copy {
    fn bits(self) -> u64;
}

impl BitRepr for f32 {
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}
