use indexmap::IndexMap;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    /// False for buffers such as norm running statistics.
    pub learnable: bool,
    /// Excluded from optimizer updates (and running-stat updates).
    pub frozen: bool,
}

/// Ordered named parameters of a model; ids are insertion positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: String, tensor: Tensor, learnable: bool) -> usize {
        let (id, prev) = self.map.insert_full(
            name,
            Param {
                tensor,
                learnable,
                frozen: false,
            },
        );
        debug_assert!(prev.is_none(), "duplicate parameter");
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        self.map.get_index(id).expect("valid id").0
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.map[id]
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Param {
        &mut self.map[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.map[id].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn learnable_scalars(&self) -> u64 {
        self.map
            .values()
            .filter(|p| p.learnable)
            .map(|p| p.tensor.numel() as u64)
            .sum()
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.map[id].frozen
    }

    /// Freezes every parameter whose name starts with one of `prefixes`;
    /// everything else is unfrozen. Returns the frozen names.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) -> Vec<String> {
        let mut frozen = Vec::new();
        for (name, p) in self.map.iter_mut() {
            p.frozen = prefixes.iter().any(|pre| name.starts_with(pre));
            if p.frozen {
                frozen.push(name.clone());
            }
        }
        frozen
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: usize, grad: Tensor) {
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn accumulate_slice(&mut self, id: usize, shape: &[usize], grad: Vec<f32>) {
        let t = Tensor::from_vec(shape, grad).expect("gradient matches parameter shape");
        self.accumulate(id, t);
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.slots[id].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
