//! A sequential trunk with numbered side branches.
//!
//! Exits are numbered from the shallowest branch (1) to the trunk's own head
//! (N). Every trunk segment is computed once per forward and shared by all
//! exits downstream of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{cross_entropy, softmax, ActivationCache, Layer, LayerSpec, Mode, ParamDecl};
use crate::params::{ParameterStore, Precision};
use crate::tensor::Tensor;

/// A side branch attached after trunk layer `attach_after` (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub attach_after: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Per-sample input dims, `[C, H, W]` or `[features]`.
    pub input: Vec<usize>,
    pub trunk: Vec<LayerSpec>,
    /// Ordered by attach point; branch `i` is exit `i + 1`.
    pub branches: Vec<BranchSpec>,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn num_exits(&self) -> usize {
        self.branches.len() + 1
    }

    /// The same trunk with every branch removed.
    pub fn trunk_only(&self) -> NetworkSpec {
        NetworkSpec {
            branches: Vec::new(),
            ..self.clone()
        }
    }

    /// Default B-LeNet: a three-conv, two-dense trunk on 28×28 greyscale
    /// input, ReLU after every conv, with one conv+dense branch after the
    /// first pooled conv block.
    pub fn b_lenet() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec {
            input: vec![1, 28, 28],
            trunk: vec![
                Conv { out_channels: 20, kernel: 5, stride: 1, padding: 0 },
                ReLU,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 50, kernel: 5, stride: 1, padding: 0 },
                ReLU,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 50, kernel: 3, stride: 1, padding: 0 },
                ReLU,
                Flatten,
                Dense { out_features: 500 },
                ReLU,
                Dense { out_features: 10 },
            ],
            branches: vec![BranchSpec {
                attach_after: 2,
                layers: vec![
                    Conv { out_channels: 10, kernel: 3, stride: 1, padding: 0 },
                    ReLU,
                    MaxPool { window: 2, stride: 2 },
                    Flatten,
                    Dense { out_features: 10 },
                ],
            }],
            num_classes: 10,
        }
    }

    /// Checks structure and runs a symbolic shape pass over every layer.
    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    fn build(&self) -> Result<Network> {
        if self.trunk.is_empty() {
            return Err(Error::Validation("no trunk defined".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::Validation(format!("invalid input shape {:?}", self.input)));
        }
        let head = LayerSpec::Dense {
            out_features: self.num_classes,
        };
        if self.trunk.last() != Some(&head) {
            return Err(Error::Validation(format!(
                "trunk must end in `{head}`, ends in `{}`",
                self.trunk.last().expect("non-empty")
            )));
        }
        let mut previous: Option<usize> = None;
        for (i, b) in self.branches.iter().enumerate() {
            let exit = i + 1;
            if b.attach_after + 1 >= self.trunk.len() {
                return Err(Error::Validation(format!(
                    "branch {exit} attaches after trunk layer {} but the trunk's last non-head layer is {}",
                    b.attach_after,
                    self.trunk.len() as isize - 2
                )));
            }
            if previous.is_some_and(|p| b.attach_after <= p) {
                return Err(Error::Validation(format!(
                    "branch {exit} attach point {} must be strictly after branch {}'s ({})",
                    b.attach_after,
                    exit - 1,
                    previous.expect("checked")
                )));
            }
            previous = Some(b.attach_after);
            if b.layers.last() != Some(&head) {
                return Err(Error::Validation(format!(
                    "branch {exit} must end in `{head}`"
                )));
            }
        }

        let mut next_param = 0;
        let mut decls = Vec::new();
        let mut trunk = Vec::with_capacity(self.trunk.len());
        let mut dims = self.input.clone();
        let mut attach_dims = Vec::new();
        for (i, spec) in self.trunk.iter().enumerate() {
            let (layer, d) = Layer::new(format!("trunk.{i}"), *spec, &dims, &mut next_param)?;
            dims = layer.output_dims().to_vec();
            decls.extend(d);
            trunk.push(layer);
            attach_dims.push(dims.clone());
        }
        let mut branches = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            let mut dims = attach_dims[b.attach_after].clone();
            let mut layers = Vec::with_capacity(b.layers.len());
            for (j, spec) in b.layers.iter().enumerate() {
                let (layer, d) = Layer::new(format!("branch{}.{j}", i + 1), *spec, &dims, &mut next_param)
                    .map_err(|e| Error::Dimension(format!("branch {}: {e}", i + 1)))?;
                dims = layer.output_dims().to_vec();
                decls.extend(d);
                layers.push(layer);
            }
            branches.push(layers);
        }
        Ok(Network {
            spec: self.clone(),
            trunk,
            branches,
            decls,
        })
    }
}

/// Per-exit loss weights `w_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitWeights(Vec<f64>);

impl ExitWeights {
    /// Weights must be finite and non-negative with at least one positive entry.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation("exit weights must not be empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!(
                "exit weights must be finite and non-negative: {weights:?}"
            )));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Validation("at least one exit weight must be positive".into()));
        }
        Ok(ExitWeights(weights))
    }

    /// `[1.0, 0.3]`-style default: 1.0 on the first exit, 0.3 on the last,
    /// 1.0 on any in between.
    pub fn default_for(num_exits: usize) -> Self {
        let mut w = vec![1.0; num_exits];
        if num_exits > 1 {
            w[num_exits - 1] = 0.3;
        }
        ExitWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A validated [`NetworkSpec`] with its layers bound to shapes and parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    trunk: Vec<Layer>,
    branches: Vec<Vec<Layer>>,
    decls: Vec<ParamDecl>,
}

/// Saved state of a train-mode [`Network::forward_all_exits`].
#[derive(Debug, Clone)]
pub struct JointCache {
    trunk: ActivationCache,
    branches: Vec<ActivationCache>,
    logits: Vec<Tensor>,
    batch: usize,
}

impl JointCache {
    pub fn logits(&self) -> &[Tensor] {
        &self.logits
    }
}

/// Total and per-exit (unweighted) losses of one joint evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub per_exit: Vec<f64>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Network> {
        spec.build()
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_exits(&self) -> usize {
        self.spec.num_exits()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    /// Layers of branch for exit `exit` (1-based, `exit < N`).
    pub fn branch(&self, exit: usize) -> &[Layer] {
        &self.branches[exit - 1]
    }

    /// Trunk layer index after which exit `exit` reads its input; for the
    /// final exit this is the last trunk layer.
    pub fn attach_point(&self, exit: usize) -> usize {
        if exit == self.num_exits() {
            self.trunk.len() - 1
        } else {
            self.spec.branches[exit - 1].attach_after
        }
    }

    pub fn param_decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    /// Fresh parameters: fan-in-scaled uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(Precision::Single);
        for d in &self.decls {
            store.add(d.name.clone(), d.init(&mut rng)?)?;
        }
        Ok(store)
    }

    /// Checks that `params` has exactly this network's parameter layout.
    pub fn check_params(&self, params: &ParameterStore) -> Result<()> {
        if params.len() != self.decls.len() {
            return Err(Error::Validation(format!(
                "parameter store has {} entries, network needs {}",
                params.len(),
                self.decls.len()
            )));
        }
        for (p, d) in params.iter().zip(&self.decls) {
            if p.name != d.name || p.value.dims() != d.dims.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter {:?} {} does not match expected {:?} {:?}",
                    p.name,
                    p.value.shape(),
                    d.name,
                    d.dims
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims().len() != self.spec.input.len() + 1 || x.dims()[1..] != self.spec.input[..] {
            return Err(Error::Dimension(format!(
                "network expects per-sample input {:?}, got {}",
                self.spec.input,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run_stack(
        layers: &[Layer],
        params: &ParameterStore,
        mut x: Tensor,
        mode: Mode,
        cache: &mut ActivationCache,
    ) -> Result<Tensor> {
        for layer in layers {
            let (y, c) = layer.forward(params, &x, mode)?;
            cache.push(c);
            x = y;
        }
        Ok(x)
    }

    /// Logits at every exit, in exit order. In `Mode::Train` the returned
    /// cache can be handed to [`Network::backward_joint`].
    pub fn forward_all_exits(
        &self,
        params: &ParameterStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Vec<Tensor>, JointCache)> {
        self.check_input(x)?;
        let mut trunk_cache = ActivationCache::default();
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut logits = Vec::with_capacity(self.num_exits());
        let mut act = x.clone();
        let mut next_branch = 0;
        for (i, layer) in self.trunk.iter().enumerate() {
            let (y, c) = layer.forward(params, &act, mode)?;
            trunk_cache.push(c);
            act = y;
            while next_branch < self.branches.len() && self.spec.branches[next_branch].attach_after == i {
                let mut bc = ActivationCache::default();
                let out = Self::run_stack(&self.branches[next_branch], params, act.clone(), mode, &mut bc)?;
                branch_caches.push(bc);
                logits.push(out);
                next_branch += 1;
            }
        }
        logits.push(act);
        let cache = JointCache {
            trunk: trunk_cache,
            branches: branch_caches,
            logits: if mode == Mode::Train { logits.clone() } else { Vec::new() },
            batch: x.dims()[0],
        };
        Ok((logits, cache))
    }

    /// Plain forward through the trunk alone (the baseline network).
    pub fn forward_trunk(&self, params: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut scratch = ActivationCache::default();
        Self::run_stack(&self.trunk, params, x.clone(), Mode::Infer, &mut scratch)
    }

    /// Back-propagates per-exit logit gradients (`None` = exit contributes
    /// nothing), accumulating into `params`.
    pub fn backward_from_logit_grads(
        &self,
        params: &mut ParameterStore,
        cache: &JointCache,
        logit_grads: &[Option<Tensor>],
    ) -> Result<()> {
        if logit_grads.len() != self.num_exits() {
            return Err(Error::Validation(format!(
                "{} logit gradients for {} exits",
                logit_grads.len(),
                self.num_exits()
            )));
        }
        if cache.trunk.len() != self.trunk.len() || cache.branches.len() != self.branches.len() {
            return Err(Error::State("joint cache does not come from this network".into()));
        }

        // Gradient w.r.t. the input of each branch, i.e. w.r.t. the trunk
        // activation at its attach point.
        let mut branch_input_grads: Vec<Option<Tensor>> = Vec::with_capacity(self.branches.len());
        for (b, layers) in self.branches.iter().enumerate() {
            let grad = match &logit_grads[b] {
                None => None,
                Some(g) => {
                    let mut g = g.clone();
                    for (j, layer) in layers.iter().enumerate().rev() {
                        g = layer.backward(params, cache.branches[b].get(j), &g)?;
                    }
                    Some(g)
                }
            };
            branch_input_grads.push(grad);
        }

        let mut grad: Option<Tensor> = logit_grads[self.num_exits() - 1].clone();
        for i in (0..self.trunk.len()).rev() {
            for (b, spec) in self.spec.branches.iter().enumerate().rev() {
                if spec.attach_after != i {
                    continue;
                }
                if let Some(bg) = branch_input_grads[b].take() {
                    grad = Some(match grad {
                        None => bg,
                        Some(mut g) => {
                            for (a, d) in g.data_mut().iter_mut().zip(bg.data()) {
                                *a += d;
                            }
                            g
                        }
                    });
                }
            }
            if let Some(g) = grad {
                grad = Some(self.trunk[i].backward(params, cache.trunk.get(i), &g)?);
            }
        }
        Ok(())
    }

    /// Gradient of `Σ w_n L_n` for the batch cached by a train-mode forward.
    pub fn backward_joint(
        &self,
        params: &mut ParameterStore,
        cache: &JointCache,
        one_hot: &Tensor,
        weights: &ExitWeights,
    ) -> Result<JointLoss> {
        if cache.logits.len() != self.num_exits() {
            return Err(Error::State(
                "backward_joint needs the cache of a train-mode forward".into(),
            ));
        }
        if one_hot.dims().first() != Some(&cache.batch) {
            return Err(Error::Dimension(format!(
                "labels {} do not match cached batch of {}",
                one_hot.shape(),
                cache.batch
            )));
        }
        let (loss, grads) = joint_loss_and_grads(&cache.logits, one_hot, weights)?;
        let grads: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
        self.backward_from_logit_grads(params, cache, &grads)?;
        Ok(loss)
    }

    /// Multiply-accumulates of trunk layers `0..=last` for one sample.
    pub fn trunk_macs_through(&self, last: usize) -> u64 {
        self.trunk[..=last].iter().map(Layer::macs).sum()
    }

    pub fn branch_macs(&self, exit: usize) -> u64 {
        self.branches[exit - 1].iter().map(Layer::macs).sum()
    }

    /// Per-sample cost of the baseline (trunk-only) network.
    pub fn baseline_macs(&self) -> u64 {
        self.trunk_macs_through(self.trunk.len() - 1)
    }

    /// Per-sample cost of leaving at `exit`: the trunk up to its attach
    /// point plus every branch classifier evaluated on the way, including
    /// the ones whose gates failed.
    pub fn cumulative_macs(&self, exit: usize) -> u64 {
        let evaluated = exit.min(self.num_exits() - 1);
        let branches: u64 = (1..=evaluated).map(|e| self.branch_macs(e)).sum();
        self.trunk_macs_through(self.attach_point(exit)) + branches
    }

    /// Everything: full trunk and every branch.
    pub fn full_macs(&self) -> u64 {
        self.cumulative_macs(self.num_exits())
    }
}

/// `Σ w_n · L_n` with `L_n` the normalised cross-entropy of `softmax(logits_n)`.
pub fn joint_loss(logits: &[Tensor], one_hot: &Tensor, weights: &ExitWeights) -> Result<f64> {
    Ok(joint_loss_and_grads(logits, one_hot, weights)?.0.total)
}

/// Joint loss plus the weighted gradient with respect to each exit's logits.
pub fn joint_loss_and_grads(
    logits: &[Tensor],
    one_hot: &Tensor,
    weights: &ExitWeights,
) -> Result<(JointLoss, Vec<Tensor>)> {
    if logits.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} exit weights for {} exits",
            weights.len(),
            logits.len()
        )));
    }
    let mut total = 0.0;
    let mut per_exit = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &w) in logits.iter().zip(weights.as_slice()) {
        let (loss, mut g) = cross_entropy(&softmax(z), one_hot)?;
        total += w * loss;
        per_exit.push(loss);
        for v in g.data_mut() {
            *v *= w;
        }
        grads.push(g);
    }
    Ok((JointLoss { total, per_exit }, grads))
}
