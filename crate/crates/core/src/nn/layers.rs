use candle_core::{Tensor, D};

use super::params::ParamStore;
use crate::error::Result;

/// Negative-side slope of every leaky ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Fan-in scaled normal initialization suited to (leaky) ReLU layers.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square `kernel`, weight shape `(c_out, c_in, kernel, kernel)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            he_std(c_in * kernel * kernel),
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.align_remainders(x)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

impl Conv2d {
    /// candle derives the input-gradient size of a strided convolution from the
    /// height alone, which is wrong when `(n + 2p - k) % stride` differs between
    /// height and width. Trailing zeros equalize the remainders; they fall past
    /// the last window, so the output is unchanged.
    fn align_remainders(&self, x: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            return Ok(x.clone());
        }
        let (_, _, h, w) = x.dims4()?;
        let k = self.weight.dim(2)?;
        let rem = |n: usize| (n + 2 * self.padding).saturating_sub(k) % self.stride;
        let (rh, rw) = (rem(h), rem(w));
        Ok(match rh.cmp(&rw) {
            std::cmp::Ordering::Less => x.pad_with_zeros(2, 0, rw - rh)?,
            std::cmp::Ordering::Greater => x.pad_with_zeros(3, 0, rh - rw)?,
            std::cmp::Ordering::Equal => x.clone(),
        })
    }
}

/// 2x2 transposed convolution with stride 2: doubles height and width.
#[derive(Clone, Debug)]
pub struct Upconv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Upconv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Upconv2d {
            weight: store.normal(&format!("{name}.weight"), &[c_in, c_out, 2, 2], he_std(c_in))?,
            bias: store.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Conv1d {
            weight: store.normal(&format!("{name}.weight"), &[c_out, c_in, kernel], he_std(c_in * kernel))?,
            bias: store.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.as_conv2d(x)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1))?)?)
    }

    /// candle's conv1d returns a wrong weight gradient for batches larger than
    /// one, so the layer runs as a height-1 conv2d. Samples past the last
    /// window are cropped so the stride remainder is zero in both axes.
    fn as_conv2d(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let x = x.pad_with_zeros(D::Minus1, self.padding, self.padding)?;
        let n = x.dim(D::Minus1)?;
        let used = n - n.saturating_sub(k) % self.stride;
        let x = x.narrow(D::Minus1, 0, used)?.unsqueeze(2)?;
        let y = x.conv2d(&self.weight.unsqueeze(2)?, 0, self.stride, 1, 1)?;
        Ok(y.squeeze(2)?)
    }
}

/// `y = x W^T + b` over the last dimension of a 2-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: Option<f64>) -> Result<Self> {
        let std = std.unwrap_or_else(|| (1.0 / d_in as f64).sqrt());
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[d_out, d_in], std)?,
            bias: store.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * LEAKY_SLOPE)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(-|x|))`, the shared tail of softplus and logistic losses.
fn log1p_exp_neg_abs(x: &Tensor) -> Result<Tensor> {
    Ok((x.abs()?.neg()?.exp()? + 1.0)?.log()?)
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + log1p_exp_neg_abs(x)?)?)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, evaluated stably.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let per = ((logits.relu()? - (logits * targets)?)? + log1p_exp_neg_abs(logits)?)?;
    Ok(per.mean_all()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// MSE against a constant target.
pub fn mse_to(a: &Tensor, target: f64) -> Result<Tensor> {
    Ok((a - target)?.sqr()?.mean_all()?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn bce_matches_naive_formula() {
        let x = [-3.0f64, -0.5, 0.0, 0.7, 12.0];
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let naive: f64 = x
            .iter()
            .zip(&y)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 5.0;
        let got = bce_with_logits(&t(&x), &t(&y)).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - naive).abs() < 1e-12);
        let huge = bce_with_logits(&t(&[-500.0, 500.0]), &t(&[0.0, 1.0])).unwrap();
        assert_eq!(huge.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn activations() {
        let v = leaky_relu(&t(&[-2.0, 3.0])).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![-0.2, 3.0]);
        let s = softplus(&t(&[0.0, 40.0, -40.0])).unwrap().to_vec1::<f64>().unwrap();
        assert!((s[0] - 2f64.ln()).abs() < 1e-15 && (s[1] - 40.0).abs() < 1e-12 && (0.0..1e-15).contains(&s[2]));
    }

    #[test]
    fn layer_shapes() {
        let mut store = ParamStore::new(DType::F32, 0);
        let x = Tensor::zeros((2, 3, 8, 10), DType::F32, &Device::Cpu).unwrap();
        let c = Conv2d::new(&mut store, "c", 3, 4, 3, 2, 1, true).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 4, 4, 5]);
        let u = Upconv2d::new(&mut store, "u", 3, 5).unwrap();
        assert_eq!(u.forward(&x).unwrap().dims(), &[2, 5, 16, 20]);
        let l = Linear::new(&mut store, "l", 10, 7, None).unwrap();
        assert_eq!(
            l.forward(&Tensor::zeros((3, 10), DType::F32, &Device::Cpu).unwrap())
                .unwrap()
                .dims(),
            &[3, 7]
        );
        let c1 = Conv1d::new(&mut store, "c1", 3, 6, 3, 2, 1).unwrap();
        let x1 = Tensor::zeros((2, 3, 126), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c1.forward(&x1).unwrap().dims(), &[2, 6, 63]);
    }
}
