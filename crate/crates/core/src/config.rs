//! Line-oriented network/training config format.
//!
//! ```text
//! # comment
//! [network]
//! input = 1,28,28
//! classes = 10
//!
//! [trunk]
//! layer = conv out=20 kernel=5 stride=1 pad=0
//! layer = maxpool window=2 stride=2
//! layer = flatten
//! layer = dense out=10
//!
//! [branch]            # one section per branch, in exit order
//! attach_after = 1
//! layer = flatten
//! layer = dense out=10
//!
//! [train]             # optional
//! epochs = 10
//! batch_size = 64
//! alpha = 0.001
//! beta1 = 0.99
//! beta2 = 0.999
//! epsilon = 1e-8
//! exit_weights = 1,0.3
//! seed = 42
//! phase = branchy
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{BranchSpec, NetworkSpec};
use crate::layers::LayerSpec;
use crate::training::{Phase, TrainConfig};

/// The bundled B-LeNet config.
pub const B_LENET_CONFIG: &str = include_str!("../configs/b-lenet.cfg");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Network,
    Trunk,
    Branch,
    Train,
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn number<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| err(line, format!("invalid value {value:?} for `{key}`")))
}

fn list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| number(line, key, v)).collect()
}

/// Parses `conv out=20 kernel=5 stride=1 pad=0` and friends.
pub fn parse_layer(text: &str, line: usize) -> Result<LayerSpec> {
    let mut words = text.split_whitespace();
    let kind = words.next().ok_or_else(|| err(line, "empty layer description"))?;
    let mut out = None;
    let mut kernel = None;
    let mut stride = None;
    let mut pad = None;
    let mut window = None;
    for word in words {
        let (k, v) = word
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, found {word:?}")))?;
        let slot = match (kind, k) {
            ("conv" | "dense", "out") => &mut out,
            ("conv", "kernel") => &mut kernel,
            ("conv" | "maxpool", "stride") => &mut stride,
            ("conv", "pad") => &mut pad,
            ("maxpool", "window") => &mut window,
            _ => return Err(err(line, format!("unknown key `{k}` for {kind} layer"))),
        };
        if slot.is_some() {
            return Err(err(line, format!("duplicate key `{k}`")));
        }
        *slot = Some(number::<usize>(line, k, v)?);
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| err(line, format!("{kind} layer needs `{k}`")));
    let spec = match kind {
        "conv" => LayerSpec::Conv {
            out_channels: need(out, "out")?,
            kernel: need(kernel, "kernel")?,
            stride: stride.unwrap_or(1),
            padding: pad.unwrap_or(0),
        },
        "dense" => LayerSpec::Dense {
            out_features: need(out, "out")?,
        },
        "maxpool" => {
            let window = need(window, "window")?;
            LayerSpec::MaxPool {
                window,
                stride: stride.unwrap_or(window),
            }
        }
        "relu" => LayerSpec::ReLU,
        "flatten" => LayerSpec::Flatten,
        other => return Err(err(line, format!("unknown layer kind `{other}`"))),
    };
    spec.validate().map_err(|e| err(line, e.to_string()))?;
    Ok(spec)
}

struct PendingBranch {
    header_line: usize,
    attach_after: Option<(usize, usize)>,
    layers: Vec<(usize, LayerSpec)>,
}

/// Parses and fully validates a config: structure, branch ordering and a
/// symbolic shape pass over every layer. Errors carry the offending line.
pub fn parse_config(text: &str) -> Result<(NetworkSpec, TrainConfig)> {
    let mut section = Section::None;
    let mut input: Option<(usize, Vec<usize>)> = None;
    let mut classes: Option<(usize, usize)> = None;
    let mut trunk: Vec<(usize, LayerSpec)> = Vec::new();
    let mut branches: Vec<PendingBranch> = Vec::new();
    let mut train = TrainConfig::default();
    let mut seen_train_keys: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name.trim() {
                "network" => Section::Network,
                "trunk" => Section::Trunk,
                "branch" => {
                    branches.push(PendingBranch {
                        header_line: line,
                        attach_after: None,
                        layers: Vec::new(),
                    });
                    Section::Branch
                }
                "train" => Section::Train,
                other => return Err(err(line, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(line, format!("expected `key = value`, found {content:?}")))?;
        match (section, key) {
            (Section::None, _) => {
                return Err(err(line, format!("key `{key}` outside of any section")))
            }
            (Section::Network, "input") => input = Some((line, list(line, key, value)?)),
            (Section::Network, "classes") => classes = Some((line, number(line, key, value)?)),
            (Section::Trunk, "layer") => trunk.push((line, parse_layer(value, line)?)),
            (Section::Branch, "attach_after") => {
                let b = branches.last_mut().expect("inside a branch section");
                b.attach_after = Some((line, number(line, key, value)?));
            }
            (Section::Branch, "layer") => {
                let b = branches.last_mut().expect("inside a branch section");
                b.layers.push((line, parse_layer(value, line)?));
            }
            (Section::Train, _) => {
                if seen_train_keys.iter().any(|k| k == key) {
                    return Err(err(line, format!("duplicate key `{key}`")));
                }
                match key {
                    "epochs" => train.epochs = number(line, key, value)?,
                    "batch_size" => train.batch_size = number(line, key, value)?,
                    "alpha" => train.adam.alpha = number(line, key, value)?,
                    "beta1" => train.adam.beta1 = number(line, key, value)?,
                    "beta2" => train.adam.beta2 = number(line, key, value)?,
                    "epsilon" => train.adam.epsilon = number(line, key, value)?,
                    "exit_weights" => train.exit_weights = Some(list(line, key, value)?),
                    "seed" => train.seed = number(line, key, value)?,
                    "phase" => {
                        train.phase = match value {
                            "baseline" => Phase::Baseline,
                            "branchy" => Phase::Branchy,
                            _ => return Err(err(line, format!("unknown phase {value:?}"))),
                        }
                    }
                    _ => return Err(err(line, format!("unknown key `{key}` in [train]"))),
                }
                seen_train_keys.push(key.to_string());
                train.validate().map_err(|e| err(line, e.to_string()))?;
            }
            (_, _) => return Err(err(line, format!("unknown key `{key}`"))),
        }
    }

    if trunk.is_empty() {
        return Err(Error::Validation("no trunk defined".into()));
    }
    let (input_line, input) = input.ok_or_else(|| err(1, "[network] needs `input`"))?;
    let (_, num_classes) = classes.ok_or_else(|| err(input_line, "[network] needs `classes`"))?;

    // Symbolic shape pass, so a break is reported at its own line.
    let mut dims = input.clone();
    let mut trunk_dims = Vec::with_capacity(trunk.len());
    for (line, spec) in &trunk {
        dims = spec
            .output_dims(&dims)
            .map_err(|e| err(*line, format!("shape chain breaks at `{spec}`: {e}")))?;
        trunk_dims.push(dims.clone());
    }
    let mut branch_specs = Vec::with_capacity(branches.len());
    for (i, b) in branches.iter().enumerate() {
        let (attach_line, attach_after) = b
            .attach_after
            .ok_or_else(|| err(b.header_line, format!("branch {} needs `attach_after`", i + 1)))?;
        let mut dims = trunk_dims
            .get(attach_after)
            .cloned()
            .ok_or_else(|| {
                err(
                    attach_line,
                    format!(
                        "branch {} attaches after layer {attach_after} but the trunk has {} layers",
                        i + 1,
                        trunk.len()
                    ),
                )
            })?;
        for (line, spec) in &b.layers {
            dims = spec
                .output_dims(&dims)
                .map_err(|e| err(*line, format!("shape chain breaks at `{spec}`: {e}")))?;
        }
        branch_specs.push(BranchSpec {
            attach_after,
            layers: b.layers.iter().map(|(_, s)| *s).collect(),
        });
    }

    let spec = NetworkSpec {
        input,
        trunk: trunk.iter().map(|(_, s)| *s).collect(),
        branches: branch_specs,
        num_classes,
    };
    if let Err(e) = spec.validate() {
        let line = branches
            .last()
            .map(|b| b.header_line)
            .unwrap_or_else(|| trunk.last().expect("non-empty").0);
        return Err(err(line, e.to_string()));
    }
    Ok((spec, train))
}

/// Parses a config that only needs its network sections.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    Ok(parse_config(text)?.0)
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical text for the network sections.
pub fn network_to_text(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "[network]\ninput = {}\nclasses = {}\n", join(&spec.input), spec.num_classes).unwrap();
    writeln!(w, "[trunk]").unwrap();
    for layer in &spec.trunk {
        writeln!(w, "layer = {layer}").unwrap();
    }
    for b in &spec.branches {
        writeln!(w, "\n[branch]\nattach_after = {}", b.attach_after).unwrap();
        for layer in &b.layers {
            writeln!(w, "layer = {layer}").unwrap();
        }
    }
    out
}

/// Canonical text for a full config; `parse_config` of the result gives
/// back the same values.
pub fn config_to_text(spec: &NetworkSpec, train: &TrainConfig) -> String {
    let mut out = network_to_text(spec);
    let w = &mut out;
    writeln!(w, "\n[train]").unwrap();
    writeln!(w, "epochs = {}", train.epochs).unwrap();
    writeln!(w, "batch_size = {}", train.batch_size).unwrap();
    writeln!(w, "alpha = {}", train.adam.alpha).unwrap();
    writeln!(w, "beta1 = {}", train.adam.beta1).unwrap();
    writeln!(w, "beta2 = {}", train.adam.beta2).unwrap();
    writeln!(w, "epsilon = {}", train.adam.epsilon).unwrap();
    if let Some(weights) = &train.exit_weights {
        writeln!(w, "exit_weights = {}", join(weights)).unwrap();
    }
    writeln!(w, "seed = {}", train.seed).unwrap();
    let phase = match train.phase {
        Phase::Baseline => "baseline",
        Phase::Branchy => "branchy",
    };
    writeln!(w, "phase = {phase}").unwrap();
    out
}
