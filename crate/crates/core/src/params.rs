//! Named parameter collections and their federated roles.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How a tensor participates in federation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// Node-count independent global-branch weights, fused on the server.
    Shared,
    /// Never leaves the client.
    Personal,
    /// The global pattern bank, exchanged through pattern sharing.
    Bank,
    /// A graph prototype vector.
    Prototype,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Shared => "shared",
            Role::Personal => "personal",
            Role::Bank => "bank",
            Role::Prototype => "prototype",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Role::Shared, Role::Personal, Role::Bank, Role::Prototype]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

pub const GLOBAL_BANK: &str = "global.bank";

/// Role of a model tensor, decided by name. Global-branch node embeddings
/// stay personal because their shape depends on the client's node count.
pub fn role_of(name: &str) -> Role {
    if name == GLOBAL_BANK {
        Role::Bank
    } else if name.starts_with("global.") && name != "global.enc.embed" {
        Role::Shared
    } else {
        Role::Personal
    }
}

/// An ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Option<Matrix> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    /// Like [`get`](Self::get) but panics on a missing name; for internal
    /// lookups of tensors the model itself created.
    pub fn expect(&self, name: &str) -> &Matrix {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// The subset whose names have the given role.
    pub fn with_role(&self, role: Role) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| role_of(k) == role)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape())).collect()
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Overwrites existing tensors with the ones in `other`; every name in
    /// `other` must exist here with the same shape.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(dst) if dst.shape() == v.shape() => *dst = v.clone(),
                Some(dst) => {
                    return Err(Error::Shape {
                        op: "install",
                        expected: dst.shape(),
                        found: v.shape(),
                    })
                }
                None => return Err(Error::InvalidArgument(alloc::format!("unknown tensor {k}"))),
            }
        }
        Ok(())
    }

    /// Sum of squared entries over all tensors.
    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Matrix::sq_norm).sum()
    }

    /// `sum_k w_k * sets_k`, tensor by tensor. All sets must share a layout.
    pub fn weighted_sum(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidArgument("no parameter sets to combine".to_string()))?;
        if sets.len() != weights.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} sets but {} weights",
                sets.len(),
                weights.len()
            )));
        }
        for s in sets {
            if !s.same_layout(first) {
                return Err(Error::InvalidArgument("parameter sets differ in layout".to_string()));
            }
        }
        let mut out = ParamSet::new();
        for (name, t) in first.iter() {
            let mut acc = Matrix::zeros(t.rows(), t.cols());
            for (s, &w) in sets.iter().zip(weights) {
                acc.axpy(w, s.expect(name));
            }
            out.insert(name, acc);
        }
        Ok(out)
    }
}

impl FromIterator<(String, Matrix)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
