#![allow(dead_code)]

pub mod checks;

use branchynet_core::data::Dataset;
use branchynet_core::graph::{BranchSpec, Network, NetworkSpec};
use branchynet_core::layers::LayerSpec;
use branchynet_core::params::{ParameterStore, Precision};
use branchynet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Two exits on 6×6 single-channel input, three classes, under 500
/// parameters, using every layer kind.
pub fn tiny_two_exit() -> NetworkSpec {
    use LayerSpec::*;
    NetworkSpec {
        input: vec![1, 6, 6],
        trunk: vec![
            Conv { out_channels: 2, kernel: 3, stride: 1, padding: 0 },
            ReLU,
            MaxPool { window: 2, stride: 2 },
            Flatten,
            Dense { out_features: 6 },
            ReLU,
            Dense { out_features: 3 },
        ],
        branches: vec![BranchSpec {
            attach_after: 1,
            layers: vec![
                Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                MaxPool { window: 2, stride: 2 },
                Flatten,
                Dense { out_features: 3 },
            ],
        }],
        num_classes: 3,
    }
}

/// Three exits on 8×8 input with four classes.
pub fn three_exit_8x8() -> NetworkSpec {
    use LayerSpec::*;
    NetworkSpec {
        input: vec![1, 8, 8],
        trunk: vec![
            Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            ReLU,
            MaxPool { window: 2, stride: 2 },
            Conv { out_channels: 4, kernel: 3, stride: 1, padding: 0 },
            ReLU,
            Flatten,
            Dense { out_features: 8 },
            ReLU,
            Dense { out_features: 4 },
        ],
        branches: vec![
            BranchSpec {
                attach_after: 1,
                layers: vec![
                    MaxPool { window: 4, stride: 4 },
                    Flatten,
                    Dense { out_features: 4 },
                ],
            },
            BranchSpec {
                attach_after: 4,
                layers: vec![
                    Conv { out_channels: 2, kernel: 2, stride: 2, padding: 0 },
                    Flatten,
                    Dense { out_features: 4 },
                ],
            },
        ],
        num_classes: 4,
    }
}

/// Randomly initialised parameters kept in double precision.
pub fn double_params(net: &Network, seed: u64) -> ParameterStore {
    let mut p = net.init_params(seed).unwrap();
    p.set_precision(Precision::Double);
    // Break the f32 grid and the zero biases so every parameter matters.
    let mut r = rng(seed ^ 0x9e37);
    for param in p.iter_mut() {
        for v in param.value.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    p
}

/// Uniform noise images with random labels.
pub fn noise_dataset(sample_dims: &[usize], classes: usize, n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let per: usize = sample_dims.iter().product();
    let features = (0..per * n).map(|_| r.gen::<f32>()).collect();
    let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
    Dataset::new(sample_dims.to_vec(), features, labels, classes).unwrap()
}

/// Images whose class is the quadrant holding a bright blob; easily learnable.
pub fn quadrant_dataset(side: usize, classes: usize, n: usize, seed: u64) -> Dataset {
    assert!(classes <= 4);
    let mut r = rng(seed);
    let half = side / 2;
    let mut features = Vec::with_capacity(side * side * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.gen_range(0..classes);
        let (qy, qx) = (label / 2, label % 2);
        for y in 0..side {
            for x in 0..side {
                let inside = y / half == qy && x / half == qx;
                let base = if inside { 0.8 } else { 0.1 };
                features.push(base + r.gen_range(0.0..0.2f32));
            }
        }
        labels.push(label);
    }
    Dataset::new(vec![1, side, side], features, labels, classes).unwrap()
}

/// Below this magnitude a gradient entry is compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}
