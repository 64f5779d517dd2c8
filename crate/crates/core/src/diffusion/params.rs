//! Named parameter registry with per-parameter trainable flags.
//!
//! Trainable parameters are backed by a [`Var`] so autograd tracks them;
//! frozen ones are plain tensors and never enter the gradient graph.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone,
    Reference,
    Control,
    NullContext,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "backbone" => Some(Self::Backbone),
            "reference" => Some(Self::Reference),
            "control" => Some(Self::Control),
            "null_ctx" => Some(Self::NullContext),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Reference => "reference",
            Self::Control => "control",
            Self::NullContext => "null_ctx",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub var: Option<Var>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.tensor.elem_count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Flips the trainable flag without touching the underlying storage.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .filter_map(|p| p.var.clone())
            .collect()
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values of every
    /// parameter in `group`, in name order.
    pub fn group_hash(&self, group: ParamGroup) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if ParamGroup::of(name) != Some(group) {
                continue;
            }
            h.update(name.as_bytes());
            for d in p.tensor.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f64> = p.tensor.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn norms(&self) -> Result<BTreeMap<ParamGroup, f64>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            if let Some(g) = ParamGroup::of(name) {
                let sq = p.tensor.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                *out.entry(g).or_insert(0.0) += sq;
            }
        }
        Ok(out.into_iter().map(|(g, s)| (g, s.sqrt())).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-bound, bound)`.
    Uniform(f64),
    Zeros,
    Ones,
    Constant(f64),
}

impl Init {
    /// Default for weights feeding `fan_in` inputs: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Creates parameters in a fixed order from one seeded stream.
///
/// A parameter is resolved, in order, from the loaded checkpoint (if any),
/// from a registered alias to an already-built parameter (so the reference
/// network can start as a copy of the backbone), or from its initializer.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    trainable: bool,
    loaded: Option<HashMap<String, Tensor>>,
    aliases: Vec<(String, String)>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            trainable: false,
            loaded: None,
            aliases: Vec::new(),
        }
    }

    pub fn from_checkpoint(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        let mut b = Self::new(0, dtype, device);
        b.loaded = Some(tensors);
        b
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Parameters created under `to_prefix` copy the already-built parameter
    /// with the same suffix under `from_prefix`, when one exists.
    pub fn alias(&mut self, to_prefix: &str, from_prefix: &str) {
        self.aliases.push((to_prefix.to_string(), from_prefix.to_string()));
    }

    pub fn clear_aliases(&mut self) {
        self.aliases.clear();
    }

    fn aliased_source(&self, name: &str) -> Option<Tensor> {
        self.aliases.iter().find_map(|(to, from)| {
            let suffix = name.strip_prefix(to.as_str())?;
            self.store
                .params
                .get(&format!("{from}{suffix}"))
                .map(|p| p.tensor.clone())
        })
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` created twice")));
        }
        let t = if let Some(loaded) = &mut self.loaded {
            let t = loaded.remove(name).ok_or_else(|| {
                Error::invalid(format!("checkpoint has no tensor `{name}`"))
            })?;
            if t.dims() != shape {
                return Err(Error::shape(
                    name,
                    format!("checkpoint shape {:?}, model expects {shape:?}", t.dims()),
                ));
            }
            t.to_dtype(self.dtype)?
        } else if let Some(src) = self.aliased_source(name) {
            if src.dims() != shape {
                return Err(Error::shape(name, format!("alias shape {:?} vs {shape:?}", src.dims())));
            }
            src.copy()?
        } else {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..bound)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant(v) => vec![v; n],
            };
            Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
        };
        let (tensor, var) = if self.trainable {
            let var = Var::from_tensor(&t)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (t.detach(), None)
        };
        self.store.params.insert(
            name.to_string(),
            Param {
                tensor: tensor.clone(),
                var,
                trainable: self.trainable,
            },
        );
        Ok(tensor)
    }

    /// Returns the store; errors if a checkpoint supplied tensors the model
    /// never asked for.
    pub fn finish(self) -> Result<ParamStore> {
        if let Some(rest) = &self.loaded {
            if let Some(name) = rest.keys().min() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor `{name}` does not belong to this model"
                )));
            }
        }
        Ok(self.store)
    }
}
