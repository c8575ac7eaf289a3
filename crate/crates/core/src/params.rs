//! Named parameters organised into freezable groups, and the forward
//! [`Session`] that binds them into a [`Graph`].

use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: GroupId,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    groups: Vec<ParamGroup>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add_group(&mut self, name: &str) -> GroupId {
        self.groups.push(ParamGroup {
            name: name.to_string(),
            params: Vec::new(),
            frozen: false,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn insert(&mut self, group: GroupId, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.groups[group.0].params.push(id);
        id
    }

    /// Convolution weight `[out, in, kh, kw]` drawn uniformly from
    /// `±sqrt(6 / fan_in)`.
    pub fn conv_weight(
        &mut self,
        group: GroupId,
        name: impl Into<String>,
        shape: [usize; 4],
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let value = Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)));
        self.insert(group, name, value)
    }

    pub fn zeros(&mut self, group: GroupId, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(group, name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn group_by_name(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn set_frozen(&mut self, id: GroupId, frozen: bool) {
        self.groups[id.0].frozen = frozen;
    }

    /// Freezes every group except the named ones.
    pub fn train_only(&mut self, trainable: &[&str]) -> Result<()> {
        for name in trainable {
            if self.group_by_name(name).is_none() {
                return Err(Error::InvalidArgument(format!("unknown parameter group `{name}`")));
            }
        }
        for g in &mut self.groups {
            g.frozen = !trainable.contains(&g.name.as_str());
        }
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.groups[self.params[id.0].group.0].frozen
    }

    /// Snapshot of every value in a group, in insertion order.
    pub fn group_values(&self, id: GroupId) -> Vec<Tensor<T>> {
        self.groups[id.0]
            .params
            .iter()
            .map(|&p| self.params[p.0].value.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            groups: self.groups.clone(),
        }
    }
}

/// Which parameters become differentiable leaves in a [`Session`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Parameters of unfrozen groups.
    Trainable,
    /// Every parameter, regardless of freezing.
    All,
    /// No parameter; pure inference.
    None,
}

/// A forward pass in progress: a graph plus lazily bound parameters.
pub struct Session<'p, T: Scalar> {
    graph: Graph<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: GradMode,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: GradMode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// The graph node of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires_grad = match self.mode {
            GradMode::All => true,
            GradMode::Trainable => self.store.is_trainable(id),
            GradMode::None => false,
        };
        let v = self.graph.leaf(self.store.value(id).clone(), requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of every bound differentiable parameter.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T: Scalar> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}
