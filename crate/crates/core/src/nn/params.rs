use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{backprop::GradStore, DType, Device, Shape, Tensor, Var};

use crate::rng::SeedStream;
use crate::{Error, Result};

/// Named parameters of one model, in stable (sorted) name order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Var>> {
        self.vars.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&self, name: String, tensor: Tensor) -> Result<Var> {
        let mut vars = self.lock();
        if vars.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().get(name).cloned()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.lock().values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.lock()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect::<candle_core::Result<Vec<_>>>()
            .expect("copying a cpu tensor cannot fail")
    }

    /// Overwrites every parameter from `tensors`. All names and shapes are validated before
    /// any parameter is touched.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let vars = self.lock();
        let mut problems = Vec::new();
        for (name, var) in vars.iter() {
            match tensors.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(t) if t.dims() != var.dims() => problems.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (name, var) in vars.iter() {
            var.set(&tensors[name].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Gradients for every parameter present in `grads`, keyed by parameter name and cut off
    /// from the autograd graph that produced them.
    pub fn collect_grads(&self, grads: &GradStore) -> Grads {
        let map = self
            .lock()
            .iter()
            .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k.clone(), g.detach())))
            .collect();
        Grads(map)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads(pub BTreeMap<String, Tensor>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    /// `self += scale * other`, inserting names absent from `self`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) -> Result<()> {
        for (name, g) in &other.0 {
            let scaled = g.affine(scale, 0.0)?;
            let entry = match self.0.remove(name) {
                Some(acc) => (acc + scaled)?,
                None => scaled,
            };
            self.0.insert(name.clone(), entry);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) -> Result<()> {
        for g in self.0.values_mut() {
            *g = g.affine(s, 0.0)?;
        }
        Ok(())
    }

    /// Global L2 norm.
    pub fn norm(&self) -> Result<f64> {
        let mut total = 0.0;
        for g in self.0.values() {
            total += g
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(total.sqrt())
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> Result<f64> {
        let norm = self.norm()?;
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm)?;
        }
        Ok(norm)
    }
}

struct BuilderState {
    store: ParamStore,
    rng: SeedStream,
    frozen: bool,
}

/// Creates named, seeded parameters under a dotted prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self::with_rng(store, SeedStream::new(seed), false)
    }

    /// Parameters created through a frozen builder are returned detached, so no gradient
    /// is ever accumulated for them.
    pub fn frozen(store: &ParamStore, seed: u64) -> Self {
        Self::with_rng(store, SeedStream::new(seed), true)
    }

    fn with_rng(store: &ParamStore, rng: SeedStream, frozen: bool) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                store: store.clone(),
                rng,
                frozen,
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, segment: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.prefix)
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().store.dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().store.device.clone()
    }

    fn register(&self, name: &str, tensor: Tensor) -> Result<Tensor> {
        let state = self.state.borrow();
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = state.store.insert(full, tensor)?;
        Ok(if state.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Parameter drawn from U(-bound, bound).
    pub fn uniform(&self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        let (dtype, device) = (self.dtype(), self.device());
        let t = self
            .state
            .borrow_mut()
            .rng
            .uniform_tensor(shape, bound, dtype, &device)?;
        self.register(name, t)
    }

    pub fn normal(&self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        let (dtype, device) = (self.dtype(), self.device());
        let t = self
            .state
            .borrow_mut()
            .rng
            .normal_tensor(shape, dtype, &device)?
            .affine(std, 0.0)?;
        self.register(name, t)
    }

    pub fn constant(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype(), &self.device())?.affine(value, 0.0)?;
        self.register(name, t)
    }
}
