use std::collections::BTreeSet;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Named trainable tensors addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform `rows × cols` weight.
    pub fn add_weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Tensor::random_uniform(&[rows, cols], bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (v, n))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose tensors differ bitwise between `self` and `other`.
    pub fn changed_ids(&self, other: &ParamStore) -> BTreeSet<ParamId> {
        self.ids()
            .filter(|&id| {
                let (a, b) = (self.get(id), other.get(id));
                a.shape() != b.shape() || a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Which parameters are recorded as trainable leaves on a tape; the rest
/// enter as constants and receive no gradient.
#[derive(Clone, Copy, Debug)]
pub struct ParamView<'a> {
    store: &'a ParamStore,
    live: Option<&'a BTreeSet<ParamId>>,
}

impl<'a> ParamView<'a> {
    pub fn all(store: &'a ParamStore) -> Self {
        ParamView { store, live: None }
    }

    pub fn only(store: &'a ParamStore, live: &'a BTreeSet<ParamId>) -> Self {
        ParamView { store, live: Some(live) }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        static EMPTY: BTreeSet<ParamId> = BTreeSet::new();
        ParamView { store, live: Some(&EMPTY) }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_live(&self, id: ParamId) -> bool {
        self.live.is_none_or(|set| set.contains(&id))
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        let value = self.store.get(id).clone();
        if self.is_live(id) {
            tape.param(id, value)
        } else {
            tape.constant(value)
        }
    }
}
