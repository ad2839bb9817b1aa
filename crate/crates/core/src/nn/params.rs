use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named trainable tensors, initialized from a seeded generator so that a model
/// built twice with the same seed has identical weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::domain(format!("parameter `{name}` defined twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Gaussian parameter with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = snapshot
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks `{name}`")))?;
            var.set(t)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `(shape, values)` pairs; names and shapes must match exactly.
    pub fn load_values(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        for (name, var) in &self.vars {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_unique() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        let ta = a.normal("w", &[4, 5], 1.0).unwrap();
        let tb = b.normal("w", &[4, 5], 1.0).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        assert!(a.normal("w", &[1], 1.0).is_err());
        a.constant("b", &[3], 0.5).unwrap();
        assert_eq!(a.num_params(), 23);
    }

    #[test]
    fn snapshot_restore_and_load() {
        let mut s = ParamStore::new(DType::F64, 1);
        let w = s.normal("w", &[2], 1.0).unwrap();
        let snap = s.snapshot().unwrap();
        s.get("w")
            .unwrap()
            .set(&Tensor::new(&[9.0f64, 9.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![9.0, 9.0]);
        s.restore(&snap).unwrap();
        assert_ne!(w.to_vec1::<f64>().unwrap(), vec![9.0, 9.0]);
        let mut vals = BTreeMap::new();
        vals.insert("w".to_string(), (vec![2], vec![1.0f32, 2.0]));
        s.load_values(&vals).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
        vals.insert("w".to_string(), (vec![3], vec![1.0f32, 2.0, 3.0]));
        assert!(s.load_values(&vals).is_err());
    }
}
