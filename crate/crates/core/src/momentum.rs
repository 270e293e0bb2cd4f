//! Momentum (EMA) copy of the online parameters and the FIFO queues of
//! momentum projections used as contrastive negatives.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSource, ParamStore, RasaModel, TensorMap};

/// `hat <- m * hat + (1 - m) * theta`, elementwise, for every named parameter.
pub fn ema_update(theta: &impl ParamSource, hat: &mut TensorMap, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must be in [0, 1], got {m}")));
    }
    for (name, slow) in hat.iter_mut() {
        let fast = theta.tensor(name)?.detach();
        if fast.dims() != slow.dims() {
            return Err(Error::Dimension(format!(
                "momentum parameter {name} has shape {:?}, online has {:?}",
                slow.dims(),
                fast.dims()
            )));
        }
        *slow = (slow.affine(m, 0.0)? + fast.to_dtype(slow.dtype())?.affine(1.0 - m, 0.0)?)?;
    }
    Ok(())
}

/// The momentum parameters `theta_hat` and their coefficient.
#[derive(Debug, Clone)]
pub struct MomentumState {
    params: Option<TensorMap>,
    m: f64,
}

impl MomentumState {
    /// A state with no parameters yet; [`MomentumState::model`] fails until initialized.
    pub fn uninitialized(m: f64) -> Self {
        Self { params: None, m }
    }

    /// Exact copy of the online parameters.
    pub fn from_online(online: &ParamStore, m: f64) -> Result<Self> {
        let mut s = Self::uninitialized(m);
        s.initialize(online)?;
        Ok(s)
    }

    pub fn from_tensors(params: TensorMap, m: f64) -> Self {
        Self { params: Some(params), m }
    }

    pub fn initialize(&mut self, online: &ParamStore) -> Result<()> {
        self.params = Some(online.snapshot()?);
        Ok(())
    }

    pub fn coefficient(&self) -> f64 {
        self.m
    }

    pub fn params(&self) -> Result<&TensorMap> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("momentum parameters used before initialization".into()))
    }

    pub fn update(&mut self, online: &impl ParamSource) -> Result<()> {
        let m = self.m;
        let params = self
            .params
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("ema_update before initialization".into()))?;
        ema_update(online, params, m)
    }

    /// The momentum network. Its outputs carry no gradient to any variable.
    pub fn model(&self, config: &ModelConfig) -> Result<RasaModel> {
        RasaModel::from_source(config, self.params()?)
    }
}

/// Fixed-capacity FIFO ring of unit vectors with the identity each came from.
#[derive(Debug, Clone)]
pub struct RepQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    ids: Vec<u32>,
    /// Slot the next push writes to.
    head: usize,
    fill: usize,
}

impl RepQueue {
    /// Norm deviation accepted on push (vectors come from f32 compute).
    pub const UNIT_TOLERANCE: f64 = 1e-3;

    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dim must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            ids: vec![0; capacity],
            head: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Appends rows of `vectors` (`n * dim` values) in order, evicting the oldest entries.
    pub fn push(&mut self, vectors: &[f64], ids: &[u32]) -> Result<()> {
        if vectors.len() != ids.len() * self.dim {
            return Err(Error::Dimension(format!(
                "{} values for {} ids of dim {}",
                vectors.len(),
                ids.len(),
                self.dim
            )));
        }
        for row in vectors.chunks_exact(self.dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > Self::UNIT_TOLERANCE {
                return Err(Error::Contract(format!("queue vector has norm {norm}")));
            }
        }
        for (row, &id) in vectors.chunks_exact(self.dim).zip(ids) {
            self.data[self.head * self.dim..(self.head + 1) * self.dim].copy_from_slice(row);
            self.ids[self.head] = id;
            self.head = (self.head + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Pushes a `[n, dim]` tensor.
    pub fn push_tensor(&mut self, vectors: &Tensor, ids: &[u32]) -> Result<()> {
        let flat = vectors.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        self.push(&flat, ids)
    }

    fn oldest(&self) -> usize {
        (self.head + self.capacity - self.fill) % self.capacity
    }

    /// Contents oldest-first: flat vectors and ids.
    pub fn contents(&self) -> (Vec<f64>, Vec<u32>) {
        let mut vecs = Vec::with_capacity(self.fill * self.dim);
        let mut ids = Vec::with_capacity(self.fill);
        let start = self.oldest();
        for k in 0..self.fill {
            let slot = (start + k) % self.capacity;
            vecs.extend_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
            ids.push(self.ids[slot]);
        }
        (vecs, ids)
    }

    /// Frozen snapshot for loss computation; `None` while empty.
    pub fn view(&self, dtype: DType, device: &Device) -> Result<Option<QueueView>> {
        if self.fill == 0 {
            return Ok(None);
        }
        let (vecs, ids) = self.contents();
        let vectors = Tensor::from_vec(vecs, (self.fill, self.dim), device)?.to_dtype(dtype)?;
        Ok(Some(QueueView { vectors, ids }))
    }
}

/// Queue contents as a constant tensor `[R, P]` plus identity ids.
#[derive(Debug, Clone)]
pub struct QueueView {
    pub vectors: Tensor,
    pub ids: Vec<u32>,
}
