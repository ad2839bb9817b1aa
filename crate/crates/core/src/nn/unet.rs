use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, Conv2d, Upconv2d};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the full-resolution level; doubles per level up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of halvings.
    pub depth: usize,
    pub convs_per_level: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 8,
            max_channels: 64,
            depth: 5,
            convs_per_level: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("depth", self.depth),
            ("convs_per_level", self.convs_per_level),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{field}.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(16)).min(self.max_channels).max(1)
    }

    /// Side lengths are zero-padded up to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Encoder-decoder with skip connections. Each encoder level halves height
/// and width; inputs are zero-padded to a multiple of `2^depth` and the output
/// is cropped back, so output and input share their spatial shape.
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Vec<Conv2d>>,
    down: Vec<Conv2d>,
    bottleneck: Vec<Conv2d>,
    up: Vec<Upconv2d>,
    decoder: Vec<Vec<Conv2d>>,
    head: Conv2d,
}

fn conv_stack(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, n: usize) -> Result<Vec<Conv2d>> {
    (0..n)
        .map(|i| {
            let c = if i == 0 { c_in } else { c_out };
            Conv2d::new(store, &format!("{name}.{i}"), c, c_out, 3, 1, 1, true)
        })
        .collect()
}

fn run_stack(stack: &[Conv2d], x: Tensor) -> Result<Tensor> {
    stack.iter().try_fold(x, |h, c| leaky_relu(&c.forward(&h)?))
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, config: &UNetConfig) -> Result<Self> {
        config.validate(name)?;
        let n = config.convs_per_level;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        let mut c_in = config.in_channels;
        for d in 0..config.depth {
            let c = config.channels(d);
            encoder.push(conv_stack(store, &format!("{name}.enc{d}"), c_in, c, n)?);
            down.push(Conv2d::new(
                store,
                &format!("{name}.down{d}"),
                c,
                config.channels(d + 1),
                2,
                2,
                0,
                true,
            )?);
            c_in = config.channels(d + 1);
        }
        let cb = config.channels(config.depth);
        let bottleneck = conv_stack(store, &format!("{name}.mid"), cb, cb, n)?;
        for d in (0..config.depth).rev() {
            let c = config.channels(d);
            up.push(Upconv2d::new(
                store,
                &format!("{name}.up{d}"),
                config.channels(d + 1),
                c,
            )?);
            decoder.push(conv_stack(store, &format!("{name}.dec{d}"), 2 * c, c, n)?);
        }
        let head = Conv2d::new(
            store,
            &format!("{name}.head"),
            config.channels(0),
            config.out_channels,
            1,
            1,
            0,
            true,
        )?;
        Ok(UNet {
            config: config.clone(),
            encoder,
            down,
            bottleneck,
            up,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// `(B, in, H, W)` to unbounded `(B, out, H, W)` outputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::domain(format!(
                "u-net expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut hcur = x.pad_with_zeros(2, 0, hp - h)?.pad_with_zeros(3, 0, wp - w)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (stack, down) in self.encoder.iter().zip(&self.down) {
            let s = run_stack(stack, hcur)?;
            hcur = leaky_relu(&down.forward(&s)?)?;
            skips.push(s);
        }
        hcur = run_stack(&self.bottleneck, hcur)?;
        for (up, stack) in self.up.iter().zip(&self.decoder) {
            let skip = skips.pop().expect("one skip per level");
            let u = leaky_relu(&up.forward(&hcur)?)?;
            hcur = run_stack(stack, Tensor::cat(&[&u, &skip], 1)?)?;
        }
        let out = self.head.forward(&hcur)?;
        Ok(out.narrow(D::Minus2, 0, h)?.narrow(D::Minus1, 0, w)?)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn pads_and_crops_to_input_shape() {
        let cfg = UNetConfig {
            base_channels: 2,
            max_channels: 4,
            convs_per_level: 1,
            ..UNetConfig::default()
        };
        let mut store = ParamStore::new(DType::F32, 0);
        let net = UNet::new(&mut store, "g", &cfg).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 1, 88, 100), &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x).unwrap().dims(), &[2, 1, 88, 100]);
        assert_eq!(cfg.multiple(), 32);
        let bad = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&bad).is_err());
    }
}
