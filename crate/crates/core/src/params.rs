//! Named parameter storage and per-step binding into a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Float, Gradients, Graph, Tensor, Var};

/// Training partitions. Each stage trains a subset; the rest stay fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Scalar encoder and its decoder; fitted once, then frozen.
    Numeric,
    ItemEncoder,
    UserEncoder,
    Reader,
    ReconHead,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Numeric,
        Group::ItemEncoder,
        Group::UserEncoder,
        Group::Reader,
        Group::ReconHead,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<F>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    /// Weight matrix with entries N(0, 1/fan_in).
    pub fn add_weight<R: Rng + ?Sized>(&mut self, name: &str, group: Group, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let t = Tensor::randn([rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        self.add(name, group, t)
    }

    pub fn add_zeros(&mut self, name: &str, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape.to_vec()))
    }

    pub fn add_ones(&mut self, name: &str, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::full(shape.to_vec(), F::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
    }

    pub fn count(&self, groups: &[Group]) -> usize {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
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
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names, shapes and f32 little-endian values of the
    /// selected groups.
    pub fn fingerprint(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.iter().filter(|(_, p)| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lazily places parameters on a graph as leaves. Only parameters in the
/// trainable groups require gradients.
pub struct Binder<'a, F: Float> {
    graph: &'a Graph<F>,
    store: &'a ParamStore<F>,
    trainable: Vec<Group>,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, F: Float> Binder<'a, F> {
    pub fn new(graph: &'a Graph<F>, store: &'a ParamStore<F>, trainable: &[Group]) -> Self {
        Self {
            graph,
            store,
            trainable: trainable.to_vec(),
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Uses `vars[i]` for the i-th parameter of `store`, e.g. leaves
    /// created by a gradient check.
    pub fn from_vars(graph: &'a Graph<F>, store: &'a ParamStore<F>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            graph,
            store,
            trainable: Group::ALL.to_vec(),
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
        }
    }

    pub fn graph(&self) -> &'a Graph<F> {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter, in id order.
    pub fn collect(&self, grads: &mut Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        let vars = self.vars.borrow();
        let mut out = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}
