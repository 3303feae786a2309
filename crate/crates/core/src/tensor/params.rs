use std::collections::HashMap;

use super::{BatchNormState, Float, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T: Float> {
    name: String,
    tensor: Tensor<T>,
    norm: bool,
}

/// Named learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Entry<T>>,
    bn: Vec<(String, BatchNormState<T>)>,
    names: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            bn: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        self.names.insert(name.to_string(), self.params.len());
        Ok(())
    }

    /// Registers a learnable tensor. `norm` marks normalisation/activation
    /// parameters (BN affine terms, PReLU slopes).
    pub fn add(&mut self, name: &str, tensor: Tensor<T>, norm: bool) -> Result<ParamId> {
        self.claim(name)?;
        self.params.push(Entry {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(true),
            norm,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_bn_state(&mut self, name: &str, channels: usize) -> Result<BnId> {
        if self.bn.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate batch-norm name {name}")));
        }
        self.bn.push((name.to_string(), BatchNormState::new(channels)));
        Ok(BnId(self.bn.len() - 1))
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_norm(&self, id: ParamId) -> bool {
        self.params[id.0].norm
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn bn(&self, id: BnId) -> &BatchNormState<T> {
        &self.bn[id.0].1
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BatchNormState<T> {
        &mut self.bn[id.0].1
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BatchNormState<T>)> {
        self.bn.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Every stored tensor, parameters first, then the three running
    /// buffers of each batch norm (`running_mean`, `running_var`,
    /// `num_batches_tracked`).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|e| (e.name.clone(), Tensor::new(e.tensor.shape(), e.tensor.data().to_vec()).unwrap()))
            .collect();
        for (name, s) in &self.bn {
            let c = s.running_mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], s.running_mean.clone()).unwrap(),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], s.running_var.clone()).unwrap(),
            ));
            out.push((
                format!("{name}.num_batches_tracked"),
                Tensor::new(&[1], vec![T::lit(s.batches_tracked as f64)]).unwrap(),
            ));
        }
        out
    }

    /// Copies values from `source` into every tensor of this store. Extra
    /// tensors in `source` are ignored; missing or mis-shaped ones are errors.
    pub fn load_named(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            source.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = lookup
                .get(name)
                .ok_or_else(|| Error::State(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != shape {
                return Err(dim_err!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    shape
                ));
            }
            Ok(t.data().to_vec())
        };
        for e in &mut self.params {
            let data = fetch(&e.name, e.tensor.shape())?;
            e.tensor.data_mut().copy_from_slice(&data);
            e.tensor.zero_grad();
        }
        for (name, s) in &mut self.bn {
            let c = s.running_mean.len();
            s.running_mean = fetch(&format!("{name}.running_mean"), &[c])?;
            s.running_var = fetch(&format!("{name}.running_var"), &[c])?;
            let n = fetch(&format!("{name}.num_batches_tracked"), &[1])?;
            s.batches_tracked = n[0].to_f64_lossy().round().max(0.0) as u64;
        }
        Ok(())
    }
}
