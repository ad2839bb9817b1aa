//! Small neural-network toolkit on top of candle: seeded parameter storage,
//! layers, optimizer with plateau decay, checkpoints and a U-Net.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::ParamStore;
pub use unet::{UNet, UNetConfig};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Fails with a divergence error when `value` is not finite.
pub(crate) fn check_finite(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} became {value} at step {step}")))
    }
}

pub(crate) fn tensor_from_f32(values: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub(crate) fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
