//! Toy-sized f64 instances of every trainable component, checked against
//! central finite differences.

use candle_core::{DType, Device, Tensor, Var};
use pianovis_core::nn::gradcheck::{gradient_check, projection, GradCheck};
use pianovis_core::nn::layers::sigmoid;
use pianovis_core::nn::{ParamStore, UNetConfig};
use pianovis_core::roll2midi::{Discriminator, Generator};
use pianovis_core::synth::{PerfNet, PerfNetConfig, Refiner};
use pianovis_core::video2roll::{feature_refine, Correlation, FeatureTransform};
use pianovis_core::Result;

pub const COMPONENTS: [&str; 7] = [
    "feature_transform",
    "feature_refine",
    "correlate",
    "generator",
    "discriminator",
    "perfnet",
    "refiner",
];

pub const MAX_REL_ERROR: f64 = 1e-4;
const EPS: f64 = 1e-5;
const PER_VAR: usize = 12;

fn input(shape: &[usize], seed: u64, offset: f64, std: f64) -> Var {
    let mut store = ParamStore::new(DType::F64, seed);
    let t = (store.normal("x", shape, std).unwrap() + offset).unwrap();
    Var::from_tensor(&t).unwrap()
}

/// Values in [0.15, 0.85], away from the generator's input clamp.
fn probability_input(shape: &[usize], seed: u64) -> Var {
    let x = input(shape, seed, 0.0, 1.0);
    let p = sigmoid(x.as_tensor()).unwrap();
    Var::from_tensor(&((p * 0.7).unwrap() + 0.15).unwrap()).unwrap()
}

/// Moves every parameter off exact zero: zero-initialised biases meeting
/// zero-padded inputs would put activations on the leaky-relu kink, where
/// finite differences are meaningless.
fn jitter(store: &ParamStore) {
    let mut noise = ParamStore::new(DType::F64, 77);
    for (name, var) in store.named() {
        let n = noise.normal(name, var.dims(), 0.05).unwrap();
        var.set(&(var.as_tensor() + n).unwrap()).unwrap();
    }
}

fn vars_of(store: &ParamStore, inputs: &[(&str, &Var)]) -> Vec<(String, Var)> {
    jitter(store);
    let mut out: Vec<(String, Var)> = store.named().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.extend(inputs.iter().map(|(n, v)| (n.to_string(), (*v).clone())));
    out
}

fn set_scale(store: &ParamStore, value: f64) {
    store
        .get("scale")
        .unwrap()
        .set(&Tensor::new(&[value], &Device::Cpu).unwrap())
        .unwrap();
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        max_channels: 4,
        depth: 2,
        convs_per_level: 1,
        ..UNetConfig::default()
    }
}

fn check<F: Fn() -> Result<Tensor>>(out: F, shape: &[usize], vars: &[(String, Var)]) -> Result<GradCheck> {
    let w = projection(shape, 99)?;
    gradient_check(|| Ok((out()? * &w)?.sum_all()?), vars, PER_VAR, EPS, 5)
}

pub fn check_component(name: &str) -> Result<GradCheck> {
    let mut store = ParamStore::new(DType::F64, 11);
    match name {
        "feature_transform" => {
            let ft = FeatureTransform::new(&mut store, "ft", 3, 8, 4)?;
            let x = input(&[2, 3, 4, 5], 1, 0.0, 1.0);
            check(
                || ft.forward(x.as_tensor()),
                &[2, 8, 4, 5],
                &vars_of(&store, &[("x", &x)]),
            )
        }
        "feature_refine" => {
            let maps = [
                input(&[2, 4, 2, 3], 1, 0.0, 1.0),
                input(&[2, 4, 3, 5], 2, 0.0, 1.0),
                input(&[2, 4, 5, 9], 3, 0.0, 1.0),
            ];
            let vars: Vec<(String, Var)> = maps
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("map{i}"), v.clone()))
                .collect();
            check(
                || feature_refine(&maps.iter().map(|v| v.as_tensor().clone()).collect::<Vec<_>>()),
                &[2, 4, 5, 9],
                &vars,
            )
        }
        "correlate" => {
            let c = Correlation::new(&mut store, "corr", 6, 4)?;
            let x = input(&[2, 6, 3, 3], 1, 0.0, 1.0);
            check(
                || c.forward(x.as_tensor()),
                &[2, 6, 3, 3],
                &vars_of(&store, &[("x", &x)]),
            )
        }
        "generator" => {
            let g = Generator::new(&mut store, &tiny_unet())?;
            set_scale(&store, 0.7);
            let x = probability_input(&[2, 1, 6, 10], 1);
            check(
                || g.forward(x.as_tensor()),
                &[2, 1, 6, 10],
                &vars_of(&store, &[("x", &x)]),
            )
        }
        "discriminator" => {
            let d = Discriminator::new(&mut store, &[2, 3, 4, 4])?;
            let x = probability_input(&[2, 1, 16, 20], 2);
            check(|| d.forward(x.as_tensor()), &[2], &vars_of(&store, &[("x", &x)]))
        }
        "perfnet" => {
            let cfg = PerfNetConfig {
                channels: 4,
                bottleneck_channels: 6,
                kernel: 3,
            };
            let p = PerfNet::new(&mut store, &cfg, 5, 7)?;
            let x = probability_input(&[2, 5, 8], 3);
            check(|| p.forward(x.as_tensor()), &[2, 7, 8], &vars_of(&store, &[("x", &x)]))
        }
        "refiner" => {
            let r = Refiner::new(&mut store, &tiny_unet())?;
            set_scale(&store, 0.3);
            let x = input(&[1, 1, 8, 12], 4, 2.0, 0.3);
            check(
                || r.forward(x.as_tensor()),
                &[1, 1, 8, 12],
                &vars_of(&store, &[("x", &x)]),
            )
        }
        other => panic!("unknown component {other}"),
    }
}
