use std::cell::RefCell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::rng::{truncated_normals, StreamRng};
use crate::numerics::{Grads, Graph, Tensor, Var};

/// Which of the three sub-models a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Prior transport.
    Alpha,
    /// Sequence generator.
    Beta,
    /// Property regressor.
    Gamma,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Alpha, Group::Beta, Group::Gamma];

    pub fn index(self) -> usize {
        match self {
            Group::Alpha => 0,
            Group::Beta => 1,
            Group::Gamma => 2,
        }
    }
}

/// Set of groups that receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupMask([bool; 3]);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask([false; 3]);
    pub const ALL: GroupMask = GroupMask([true; 3]);

    pub fn of(groups: &[Group]) -> Self {
        let mut m = [false; 3];
        for g in groups {
            m[g.index()] = true;
        }
        GroupMask(m)
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0[g.index()]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub(crate) names: Vec<String>,
    pub(crate) groups: Vec<Group>,
    pub(crate) tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn group(&self, i: usize) -> Group {
        self.groups[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn indices_of(&self, group: Group) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == group).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.indices_of(group).iter().map(|&i| self.tensors[i].numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Group, &Tensor)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, g), t)| (n.as_str(), *g, &**t))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// Registers parameters while a layout is being constructed.
pub(crate) struct ParamBuilder<'r> {
    set: ParamSet,
    rng: Option<&'r mut StreamRng>,
    std: f64,
}

impl<'r> ParamBuilder<'r> {
    /// With `rng = None` every tensor is zero; used to rebuild layouts before loading.
    pub fn new(rng: Option<&'r mut StreamRng>, std: f64) -> Self {
        ParamBuilder {
            set: ParamSet {
                names: Vec::new(),
                groups: Vec::new(),
                tensors: Vec::new(),
            },
            rng,
            std,
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], group: Group, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match (init, self.rng.as_deref_mut()) {
            (Init::Normal, Some(rng)) => truncated_normals(rng, n, self.std),
            (Init::Ones, _) => vec![1.0; n],
            _ => vec![0.0; n],
        };
        self.set.names.push(name);
        self.set.groups.push(group);
        self.set
            .tensors
            .push(Arc::new(Tensor::new(shape.to_vec(), data).unwrap()));
        self.set.len() - 1
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// Parameters bound into one graph. Each tensor becomes a graph node on first
/// use: a gradient leaf if its group is in the mask, a constant otherwise.
pub struct Bound<'g, 'p> {
    graph: &'g Graph,
    params: &'p ParamSet,
    mask: GroupMask,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 'p> Bound<'g, 'p> {
    pub fn new(graph: &'g Graph, params: &'p ParamSet, mask: GroupMask) -> Self {
        Bound {
            graph,
            params,
            mask,
            vars: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn p(&self, i: usize) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[i] {
            return v;
        }
        let t = self.params.tensors[i].clone();
        let v = if self.mask.contains(self.params.groups[i]) {
            self.graph.leaf_shared(t)
        } else {
            self.graph.constant_shared(t)
        };
        self.vars.borrow_mut()[i] = Some(v);
        v
    }

    /// Gradient per parameter; exact zeros for parameters the loss never touched
    /// or whose group was masked out.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        (0..self.params.len())
            .map(|i| match vars[i] {
                Some(v) if self.mask.contains(self.params.groups[i]) => grads.take(v),
                _ => Tensor::zeros(self.params.tensors[i].shape()),
            })
            .collect()
    }
}
