use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConfigError, HyperParams};
use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named model weights in a fixed enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    entries: Vec<(String, Tensor)>,
}

/// Parameters registered on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl ParamVars {
    /// Binds parameter names to existing tape variables, in order.
    pub fn from_pairs(order: Vec<(String, Var)>) -> Self {
        Self {
            vars: order.iter().cloned().collect(),
            order,
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.order.iter()
    }

    /// Gradient tensors in parameter order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.order.iter().map(|(_, v)| grads.tensor(*v)).collect()
    }
}

/// Parameter names, shapes and fan-in, in enumeration order.
pub(crate) fn layout(hp: &HyperParams) -> Vec<(String, Vec<usize>, usize)> {
    let d = hp.dim;
    let c = hp.num_classes;
    let kk = hp.conv_kernel;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| out.push((name, shape, fan_in));

    for (m, raw) in [("audio", hp.audio_dim), ("visual", hp.visual_dim)] {
        push(format!("proj.{m}.conv1.w"), vec![kk, raw, d], kk * raw);
        if hp.proj_bias {
            push(format!("proj.{m}.conv1.b"), vec![1, d], kk * raw);
        }
        push(format!("proj.{m}.conv2.w"), vec![kk, d, d], kk * d);
        if hp.proj_bias {
            push(format!("proj.{m}.conv2.b"), vec![1, d], kk * d);
        }
    }
    for m in ["audio", "visual"] {
        push(format!("meae.{m}.w1"), vec![d, d], d);
        if hp.meae_bias {
            push(format!("meae.{m}.b1"), vec![1, d], d);
        }
        push(format!("meae.{m}.w2"), vec![d, c], d);
        if hp.meae_bias {
            push(format!("meae.{m}.b2"), vec![1, c], d);
        }
    }
    let mk = hp.local_anchor_total();
    for m in ["audio", "visual"] {
        push(format!("csai.align.{m}"), vec![hp.global_anchors, mk], mk);
    }
    push("csai.w3".into(), vec![2 * d, 2 * d], 2 * d);
    push("csai.w4".into(), vec![2 * d, d], 2 * d);
    for m in ["audio", "visual"] {
        push(format!("enc.{m}.ln1.g"), vec![1, d], 0);
        push(format!("enc.{m}.ln1.b"), vec![1, d], 0);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("enc.{m}.attn.{w}"), vec![d, d], d);
        }
        push(format!("enc.{m}.ln2.g"), vec![1, d], 0);
        push(format!("enc.{m}.ln2.b"), vec![1, d], 0);
        push(format!("enc.{m}.ffn.w1"), vec![d, 2 * d], d);
        push(format!("enc.{m}.ffn.b1"), vec![1, 2 * d], d);
        push(format!("enc.{m}.ffn.w2"), vec![2 * d, d], 2 * d);
        push(format!("enc.{m}.ffn.b2"), vec![1, d], 2 * d);
    }
    for m in ["audio", "visual"] {
        for w in ["wq", "wk", "wv"] {
            push(format!("atp.{m}.{w}"), vec![d, d], d);
        }
    }
    for m in ["audio", "visual"] {
        push(format!("head.fg.{m}.w"), vec![d, 1], d);
        push(format!("head.fg.{m}.b"), vec![1, 1], d);
    }
    push("head.cls.w".into(), vec![2 * d, c], 2 * d);
    push("head.cls.b".into(), vec![1, c], 2 * d);
    out
}

impl ModelParameters {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization; layer
    /// norm gains start at one and their biases at zero.
    pub fn init(hp: &HyperParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(hp)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let numel: usize = shape.iter().product();
                let data = if name.contains(".ln") {
                    let v = if name.ends_with(".g") { 1.0 } else { 0.0 };
                    vec![v; numel]
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Self { entries }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `hp`.
    pub fn from_named(hp: &HyperParams, named: Vec<(String, Tensor)>) -> Result<Self, ConfigError> {
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut entries = Vec::new();
        for (name, shape, _) in layout(hp) {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| ConfigError(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ConfigError(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            entries.push((name, t));
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(ConfigError(format!("unexpected parameter {extra}")));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let order: Vec<(String, Var)> = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        ParamVars {
            vars: order.iter().cloned().collect(),
            order,
        }
    }

    /// Registers every parameter as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        let order: Vec<(String, Var)> = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        ParamVars {
            vars: order.iter().cloned().collect(),
            order,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}
