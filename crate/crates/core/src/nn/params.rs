use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Real;

/// Freezable unit of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Shared image encoder feeding both branches.
    Vision,
    /// Detail-oriented inference branch, including both of its projections.
    Detail,
    /// Global feature matching branch.
    Global,
    Compositor,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Vision,
        ParamGroup::Detail,
        ParamGroup::Global,
        ParamGroup::Compositor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Vision => "vision",
            ParamGroup::Detail => "detail",
            ParamGroup::Global => "global",
            ParamGroup::Compositor => "compositor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, σ) truncated at ±2σ.
    TruncNormal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, ordered arena of every learnable tensor plus per-group frozen flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: BTreeMap<ParamGroup, bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: ParamGroup::ALL.iter().map(|&g| (g, false)).collect(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(sigma) => {
                let normal = Normal::new(0.0, sigma).expect("valid sigma");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * sigma {
                            break T::lit(v);
                        }
                    })
                    .collect()
            }
        };
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            group,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Drop every parameter from index `len` on; used to rebuild trailing components.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| p.data.as_mut_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.get(&group).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen.insert(group, frozen);
    }

    pub fn frozen_flags(&self) -> &BTreeMap<ParamGroup, bool> {
        &self.frozen
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.data.len())
            .sum()
    }

    /// Replace every value in `group` with fresh `N(0, scale)` draws.
    ///
    /// Used by tests to move away from the near-zero initialization before
    /// comparing gradients.
    pub fn randomize_group<R: Rng + ?Sized>(&mut self, group: ParamGroup, scale: f64, rng: &mut R) {
        let normal = Normal::new(0.0, scale).expect("valid scale");
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            for v in &mut p.data {
                *v = T::lit(normal.sample(rng));
            }
        }
    }

    /// Copy every parameter of `group` from `other`, which must share the layout.
    pub fn copy_group_from(&mut self, other: &ParamStore<T>, group: ParamGroup) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.group == group {
                debug_assert_eq!(dst.name, src.name);
                dst.data.clone_from(&src.data);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                    data: p
                        .data
                        .iter()
                        .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                        .collect(),
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            bufs: store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.bufs
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.bufs {
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}
