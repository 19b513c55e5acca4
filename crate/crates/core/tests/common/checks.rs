//! Reusable checks that panic on failure; shared by the property suites and
//! the acceptance run.

use branchynet_core::graph::{joint_loss, ExitWeights, Network, NetworkSpec};
use branchynet_core::inference::{entropy, evaluate, fast_inference, ThresholdVector};
use branchynet_core::layers::{argmax, one_hot, Layer, LayerSpec, Mode};
use branchynet_core::params::{ParameterStore, Precision};
use branchynet_core::tensor::{conv2d, maxpool2d, Tensor};
use branchynet_core::training::{AdamConfig, AdamState};
use rand::Rng;

use super::{double_params, noise_dataset, random_tensor, rel_err, rng};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const FD_SEEDS: u64 = 20;

pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [o, _, kh, kw] = [k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oi * c + ci) * kh + dy) * kw + dx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

pub fn naive_pool(x: &Tensor, win: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..win {
                        for dx in 0..win {
                            m = m.max(x.data()[((ni * c + ci) * h + y * stride + dy) * w + xo * stride + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out).unwrap()
}

/// `(n, c, o, h, w, k, stride, pad)`
pub type ConvShape = (usize, usize, usize, usize, usize, usize, usize, usize);

pub fn check_conv_against_oracle(shape: ConvShape, seed: u64) {
    let (n, c, o, h, w, k, stride, pad) = shape;
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[n, c, h, w]);
    let kernel = random_tensor(&mut r, &[o, c, k, k]);
    let b = random_tensor(&mut r, &[o]);
    let fast = conv2d(&x, &kernel, &b, stride, pad).unwrap();
    let slow = naive_conv(&x, &kernel, &b, stride, pad);
    assert_eq!(fast.dims(), slow.dims(), "{shape:?}");
    let diff = fast.max_abs_diff(&slow);
    assert!(diff <= 1e-10, "{shape:?}: max diff {diff}");
}

pub fn check_pool_against_oracle(dims: [usize; 4], win: usize, stride: usize, seed: u64) {
    let x = random_tensor(&mut rng(seed), &dims);
    let (fast, argmax) = maxpool2d(&x, win, stride).unwrap();
    let slow = naive_pool(&x, win, stride);
    assert_eq!(fast.dims(), slow.dims());
    assert_eq!(fast.data(), slow.data(), "{dims:?} win {win} stride {stride}");
    for (v, &i) in fast.data().iter().zip(&argmax) {
        assert_eq!(*v, x.data()[i]);
    }
}

/// Every shape in the small grid (N, C ≤ 3; H, W ≤ 9; k ≤ 5; stride ≤ 3;
/// pad ≤ 2), sampled `count` times.
pub fn random_conv_shapes(count: usize, seed: u64) -> Vec<ConvShape> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let shape = (
            r.gen_range(1..=3),
            r.gen_range(1..=3),
            r.gen_range(1..=3),
            r.gen_range(1..=9),
            r.gen_range(1..=9),
            r.gen_range(1..=5),
            r.gen_range(1..=3),
            r.gen_range(0..=2),
        );
        let (_, _, _, h, w, k, _, pad) = shape;
        if k <= h + 2 * pad && k <= w + 2 * pad {
            out.push(shape);
        }
    }
    out
}

/// `Σ r ⊙ layer(x)`, a scalar whose gradient w.r.t. the output is `r`.
fn projected(layer: &Layer, params: &ParameterStore, x: &Tensor, r: &Tensor) -> f64 {
    let (y, _) = layer.forward(params, x, Mode::Infer).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// One configuration per layer kind (and a few geometries for conv and pool).
pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>, usize)> {
    use LayerSpec::*;
    vec![
        (Conv { out_channels: 3, kernel: 3, stride: 1, padding: 0 }, vec![2, 5, 5], 2),
        (Conv { out_channels: 2, kernel: 3, stride: 2, padding: 1 }, vec![2, 6, 5], 2),
        (Conv { out_channels: 2, kernel: 1, stride: 1, padding: 2 }, vec![1, 3, 3], 1),
        (Dense { out_features: 4 }, vec![7], 3),
        (ReLU, vec![2, 3, 3], 2),
        (ReLU, vec![9], 3),
        (MaxPool { window: 2, stride: 2 }, vec![2, 4, 6], 2),
        (MaxPool { window: 3, stride: 2 }, vec![1, 7, 7], 2),
        (Flatten, vec![2, 3, 2], 2),
    ]
}

pub fn check_layer_gradients(spec: LayerSpec, input: &[usize], batch: usize) {
    for seed in 0..FD_SEEDS {
        let mut r = rng(seed);
        let mut next = 0;
        let (layer, decls) = Layer::new("l", spec, input, &mut next).unwrap();
        let mut params = ParameterStore::new(Precision::Double);
        for d in &decls {
            params.add(d.name.clone(), random_tensor(&mut r, &d.dims)).unwrap();
        }
        let mut dims = vec![batch];
        dims.extend_from_slice(input);
        let mut x = random_tensor(&mut r, &dims);
        let mut out_dims = vec![batch];
        out_dims.extend_from_slice(layer.output_dims());
        let proj = random_tensor(&mut r, &out_dims);

        let (_, cache) = layer.forward(&params, &x, Mode::Train).unwrap();
        let gx = layer.backward(&mut params, cache.as_ref(), &proj).unwrap();

        for i in 0..x.numel() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + FD_EPS;
            let up = projected(&layer, &params, &x, &proj);
            x.data_mut()[i] = orig - FD_EPS;
            let down = projected(&layer, &params, &x, &proj);
            x.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let e = rel_err(gx.data()[i], numeric);
            assert!(e <= FD_TOL, "{spec} seed {seed}: input[{i}] analytic {} numeric {numeric} rel {e}", gx.data()[i]);
        }

        for &id in layer.param_ids() {
            let analytic = params.grad(id).clone();
            for i in 0..analytic.numel() {
                let orig = params.value(id).data()[i];
                params.value_mut(id).data_mut()[i] = orig + FD_EPS;
                let up = projected(&layer, &params, &x, &proj);
                params.value_mut(id).data_mut()[i] = orig - FD_EPS;
                let down = projected(&layer, &params, &x, &proj);
                params.value_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_EPS);
                let e = rel_err(analytic.data()[i], numeric);
                assert!(
                    e <= FD_TOL,
                    "{spec} seed {seed}: {}[{i}] analytic {} numeric {numeric} rel {e}",
                    params.get(id).name,
                    analytic.data()[i]
                );
            }
        }
    }
}

/// Every parameter gradient of the joint weighted loss against central differences.
pub fn check_joint_gradients(net: &Network, weights: &[f64], batch: usize) {
    let weights = ExitWeights::new(weights.to_vec()).unwrap();
    for seed in 0..FD_SEEDS {
        let mut r = rng(100 + seed);
        let mut params = double_params(net, seed);
        let mut dims = vec![batch];
        dims.extend_from_slice(&net.spec().input);
        let x = random_tensor(&mut r, &dims);
        let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..net.num_classes())).collect();
        let y = one_hot(&labels, net.num_classes()).unwrap();

        let loss = |params: &ParameterStore| {
            let (logits, _) = net.forward_all_exits(params, &x, Mode::Infer).unwrap();
            joint_loss(&logits, &y, &weights).unwrap()
        };

        params.zero_grads();
        let (_, cache) = net.forward_all_exits(&params, &x, Mode::Train).unwrap();
        net.backward_joint(&mut params, &cache, &y, &weights).unwrap();

        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = params.id(&name).unwrap();
            let analytic = params.grad(id).clone();
            for i in 0..analytic.numel() {
                let orig = params.value(id).data()[i];
                params.value_mut(id).data_mut()[i] = orig + FD_EPS;
                let up = loss(&params);
                params.value_mut(id).data_mut()[i] = orig - FD_EPS;
                let down = loss(&params);
                params.value_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_EPS);
                let e = rel_err(analytic.data()[i], numeric);
                assert!(
                    e <= FD_TOL,
                    "seed {seed}: {name}[{i}] analytic {} numeric {numeric} rel {e}",
                    analytic.data()[i]
                );
            }
        }
    }
}

/// Gate-closed fast inference agrees with a plain trunk forward on random inputs.
pub fn check_closed_gates(spec: NetworkSpec, samples: usize, seed: u64) {
    let net = Network::new(spec).unwrap();
    let params = net.init_params(seed).unwrap();
    let closed = ThresholdVector::closed(net.num_exits());
    let mut r = rng(seed + 1);
    let mut dims = vec![1];
    dims.extend_from_slice(&net.spec().input);
    for i in 0..samples {
        let x = random_tensor(&mut r, &dims);
        let (decision, cost) = fast_inference(&net, &params, &x, &closed).unwrap();
        let trunk = net.forward_trunk(&params, &x).unwrap();
        assert_eq!(decision.predicted_class, argmax(trunk.data()), "sample {i}");
        assert_eq!(decision.exit_index, net.num_exits());
        assert_eq!(cost.macs_evaluated, net.full_macs());
    }
}

/// Thresholds above ln|C| send every sample out of exit 1.
pub fn check_open_gates(spec: NetworkSpec, samples: usize, seed: u64) {
    let net = Network::new(spec).unwrap();
    let params = net.init_params(seed).unwrap();
    let data = noise_dataset(&net.spec().input, net.num_classes(), samples, seed + 1);
    let open = ThresholdVector::open(net.num_exits(), net.num_classes());
    let report = evaluate(&net, &params, &data, &open, None).unwrap();
    assert_eq!(report.exit_fractions[0], 1.0);
    assert_eq!(report.expected_macs, net.cumulative_macs(1) as f64);
}

pub fn check_entropy_values() {
    let mut one_hot = vec![0.0; 10];
    one_hot[3] = 1.0;
    assert_eq!(entropy(&one_hot), 0.0);
    let uniform = entropy(&[0.1; 10]);
    assert!((uniform - 10f64.ln()).abs() <= 1e-9, "uniform entropy {uniform}");
}

/// Textbook Adam on one scalar.
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, theta: f64, g: f64, c: &AdamConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        theta - c.alpha * m_hat / (v_hat.sqrt() + c.epsilon)
    }
}

pub fn check_adam_oracle(sequences: u64) {
    for seed in 0..sequences {
        let mut r = rng(seed);
        let config = AdamConfig {
            alpha: r.gen_range(1e-4..1e-1),
            ..AdamConfig::default()
        };
        let start: f64 = r.gen_range(-2.0..2.0);
        let mut store = ParameterStore::new(Precision::Double);
        let id = store.add("theta", Tensor::new([1], vec![start]).unwrap()).unwrap();
        let mut adam = AdamState::new(config, &store).unwrap();
        let mut oracle = ScalarAdam::new();
        let mut expected = start;
        for _ in 0..r.gen_range(1..200) {
            let g = if r.gen_bool(0.1) { 0.0 } else { r.gen_range(-5.0..5.0) };
            store.accumulate_grad(id, &Tensor::new([1], vec![g]).unwrap()).unwrap();
            adam.step(&mut store).unwrap();
            expected = oracle.step(expected, g, &config);
            let got = store.value(id).data()[0];
            assert!((got - expected).abs() <= 1e-12, "seed {seed}: {got} vs {expected}");
            assert_eq!(store.grad(id).data()[0], 0.0);
        }
    }
}

pub fn check_adam_zero_gradient_noop() {
    let mut store = ParameterStore::new(Precision::Double);
    let id = store.add("theta", Tensor::new([3], vec![0.75, -1.5, 0.0]).unwrap()).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
    for _ in 0..10 {
        adam.step(&mut store).unwrap();
    }
    assert_eq!(store.value(id).data(), &[0.75, -1.5, 0.0]);
}
