//! Named parameter storage with a frozen/trainable flag per array.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter belongs to; used for the partition audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Frozen backbone weights (projections, MLPs, norms, patch embedding).
    Backbone,
    /// DoMoRA adapter tensors `m`, `A`, `B`, `M`.
    Adapter,
    /// Convolutional neck and head of the depth network.
    DepthHead,
    /// Feed-forward pose regression head.
    PoseHead,
    /// Anything registered outside the two networks (tests, grad checks).
    Other,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Backbone => "backbone",
            ParamRole::Adapter => "adapter",
            ParamRole::DepthHead => "depth_head",
            ParamRole::PoseHead => "pose_head",
            ParamRole::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "backbone" => ParamRole::Backbone,
            "adapter" => ParamRole::Adapter,
            "depth_head" => ParamRole::DepthHead,
            "pose_head" => ParamRole::PoseHead,
            "other" => ParamRole::Other,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate name, which is always a
    /// wiring bug in the network constructors.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
            role,
        });
        id
    }

    pub fn frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, false, ParamRole::Backbone)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn scalar_count(&self, trainable: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable == trainable)
            .map(|p| p.value.len())
            .sum()
    }
}
