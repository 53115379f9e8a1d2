use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::graph::{Grads, Graph};
use crate::tensor::Tensor;

/// Index of a parameter inside the store that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with fan-out scaling, as used for ReLU convolution stacks.
    KaimingNormal { fan_out: usize },
    Normal { std: f32 },
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

/// Owns the trainable parameters and buffers of one network.
///
/// Every store has an identity, so gradients from a graph that mixes several
/// networks land only in the store that owns each parameter. Clones share the
/// identity of their source.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
            frozen: false,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid && id.index < self.params.len()
    }

    pub fn add_param(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let value = init_tensor(shape, init, rng);
        let grad = Tensor::zeros(shape);
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId {
            store: self.uid,
            index: self.params.len() - 1,
        }
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        assert!(self.owns(id), "parameter {id:?} belongs to another store");
        &self.params[id.index]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        assert!(self.owns(id), "parameter {id:?} belongs to another store");
        &mut self.params[id.index]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    /// A frozen store contributes no gradient-requiring nodes to a graph.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of this store's parameter nodes in `graph` into `.grad`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Grads) {
        for (pid, g) in graph.param_grads(grads) {
            if pid.store == self.uid {
                self.params[pid.index].grad.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    /// SHA-256 over names and exact bit patterns of all parameters and buffers.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for b in &self.buffers {
            h.update(b.name.as_bytes());
            for v in b.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        let mut bad = Vec::new();
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(NnError::Checkpoint("parameter lists differ in length".into()));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                bad.push(a.name.clone());
            }
        }
        if !bad.is_empty() {
            return Err(NnError::Checkpoint(format!("mismatched layers: {}", bad.join(", "))));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value = b.value.clone();
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.value = b.value.clone();
        }
        Ok(())
    }
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::KaimingNormal { fan_out } => {
            let std = (2.0 / fan_out.max(1) as f32).sqrt();
            sample_normal(shape, std, rng)
        }
        Init::Normal { std } => sample_normal(shape, std, rng),
    }
}

fn sample_normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("std is finite and positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
