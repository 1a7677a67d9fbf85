use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    KaimingUniform { fan_in: usize, bound: f32 },
    Constant { value: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub data: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered named parameter collection. Registration order is deterministic
/// for a given architecture, so ids are stable across builds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let len = shape.iter().product();
        let data = match init {
            Init::Constant { value } => vec![value; len],
            // Filled by `initialize`.
            Init::KaimingUniform { .. } => vec![0.0; len],
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            init,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// Draws every random parameter, in registration order.
    pub fn initialize(&mut self, rng: &mut impl Rng) {
        for p in &mut self.params {
            match p.init {
                Init::KaimingUniform { bound, .. } => p.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound)),
                Init::Constant { value } => p.data.fill(value),
            }
        }
    }

    pub fn zero_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.data.fill(0.0));
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Zero-filled buffers shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}
