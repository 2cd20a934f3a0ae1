//! Encoder/decoder/policy models in two configurations.
//!
//! [`SharedModel`] (conv trunk): the policies read the same fully connected
//! layer the encoder uses, so policy gradients can shape the trunk.
//! [`SeparateModel`]: encoder, decoder and each policy own disjoint
//! parameters, with policy `k` a plain softmax over a per-policy weight
//! matrix applied to the flattened observation.

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Padding, Tape};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Shared,
    Separate,
}

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Shared => "shared",
            ModelVariant::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(ModelVariant::Shared),
            "separate" => Ok(ModelVariant::Separate),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected shared|separate)"
            ))),
        }
    }
}

/// Model hyperparameters. `latent` and `hidden` accept 0 for the variant
/// default (shared: 4 features / 32-unit trunk; separate: 8 features /
/// 64-unit hidden layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub latent: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    /// Allow pairing a model variant with the other env variant.
    pub allow_variant_mismatch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Shared,
            latent: 0,
            hidden: 0,
            conv_channels: 16,
            allow_variant_mismatch: false,
        }
    }
}

impl ModelConfig {
    pub fn resolved_latent(&self) -> usize {
        if self.latent != 0 {
            self.latent
        } else {
            match self.variant {
                ModelVariant::Shared => 4,
                ModelVariant::Separate => 8,
            }
        }
    }

    pub fn resolved_hidden(&self) -> usize {
        if self.hidden != 0 {
            self.hidden
        } else {
            match self.variant {
                ModelVariant::Shared => 32,
                ModelVariant::Separate => 64,
            }
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// The three parameter groups of the method: encoder weights, decoder
/// weights, and one group per policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Policy(usize),
}

/// Group membership is encoded in the parameter name prefix.
pub fn param_group(name: &str) -> ParamGroup {
    if let Some(rest) = name.strip_prefix("pol.") {
        let k: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("policy param name carries its index");
        ParamGroup::Policy(k)
    } else if name.starts_with("dec.") {
        ParamGroup::Decoder
    } else {
        ParamGroup::Encoder
    }
}

/// Tape node ids for every parameter, in `params()` order.
pub struct Registered(pub Vec<NodeId>);

/// Nodes produced by an encoder forward pass.
pub struct Encoding {
    /// Latent features, flat `[n]`.
    pub h: NodeId,
    /// Shared model only: the fully connected trunk output the policies read.
    pub trunk: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    pub obs_h: usize,
    pub obs_w: usize,
    pub latent: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub n_actions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedModel<T> {
    pub dims: Dims,
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparateModel<T> {
    pub dims: Dims,
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Shared(SharedModel<T>),
    Separate(SeparateModel<T>),
}

fn glorot<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
}

fn fc<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    glorot(rng, vec![rows, cols], rows, cols)
}

fn conv_kernels<T: Scalar, R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Tensor<T> {
    glorot(rng, vec![co, ci, k, k], ci * k * k, co * k * k)
}

impl<T: Scalar> SharedModel<T> {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        let (h, w) = (dims.obs_h, dims.obs_w);
        let c = dims.conv_channels;
        let flat = c * h * w;
        let mut params = Vec::new();
        let mut push = |name: &str, value: Tensor<T>| {
            params.push(Param {
                name: name.to_string(),
                value,
            })
        };
        push("enc.conv1.w", conv_kernels(rng, c, 1, 3));
        push("enc.conv1.b", Tensor::zeros(vec![c]));
        push("enc.conv2.w", conv_kernels(rng, c, c, 3));
        push("enc.conv2.b", Tensor::zeros(vec![c]));
        push("enc.fc1.w", fc(rng, flat, dims.hidden));
        push("enc.fc1.b", Tensor::zeros(vec![1, dims.hidden]));
        push("enc.fc2.w", fc(rng, dims.hidden, dims.latent));
        push("enc.fc2.b", Tensor::zeros(vec![1, dims.latent]));
        push("dec.fc1.w", fc(rng, dims.latent, dims.hidden));
        push("dec.fc1.b", Tensor::zeros(vec![1, dims.hidden]));
        push("dec.fc2.w", fc(rng, dims.hidden, flat));
        push("dec.fc2.b", Tensor::zeros(vec![1, flat]));
        push("dec.deconv1.w", conv_kernels(rng, c, c, 3));
        push("dec.deconv1.b", Tensor::zeros(vec![c]));
        push("dec.deconv2.w", conv_kernels(rng, c, 1, 3));
        push("dec.deconv2.b", Tensor::zeros(vec![1]));
        for k in 0..dims.latent {
            push(&format!("pol.{k}.w"), fc(rng, dims.hidden, dims.n_actions));
            push(&format!("pol.{k}.b"), Tensor::zeros(vec![1, dims.n_actions]));
        }
        SharedModel { dims, params }
    }
}

impl<T: Scalar> SeparateModel<T> {
    pub fn new<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        let flat = dims.obs_h * dims.obs_w;
        let mut params = Vec::new();
        let mut push = |name: &str, value: Tensor<T>| {
            params.push(Param {
                name: name.to_string(),
                value,
            })
        };
        push("enc.fc1.w", fc(rng, flat, dims.hidden));
        push("enc.fc1.b", Tensor::zeros(vec![1, dims.hidden]));
        push("enc.fc2.w", fc(rng, dims.hidden, dims.latent));
        push("enc.fc2.b", Tensor::zeros(vec![1, dims.latent]));
        push("dec.fc1.w", fc(rng, dims.latent, dims.hidden));
        push("dec.fc1.b", Tensor::zeros(vec![1, dims.hidden]));
        push("dec.fc2.w", fc(rng, dims.hidden, flat));
        push("dec.fc2.b", Tensor::zeros(vec![1, flat]));
        // zero-initialized policies start exactly uniform
        for k in 0..dims.latent {
            push(
                &format!("pol.{k}.w"),
                Tensor::zeros(vec![flat, dims.n_actions]),
            );
        }
        SeparateModel { dims, params }
    }
}

impl<T: Scalar> Model<T> {
    /// Build a model matching the environment's observation and action
    /// spaces.
    pub fn new<R: Rng>(cfg: &ModelConfig, env: &EnvConfig, rng: &mut R) -> Self {
        let dims = Dims {
            obs_h: env.grid_height,
            obs_w: env.grid_width,
            latent: cfg.resolved_latent(),
            hidden: cfg.resolved_hidden(),
            conv_channels: cfg.conv_channels,
            n_actions: env.action_count(),
        };
        Self::from_dims(cfg.variant, dims, rng)
    }

    pub fn from_dims<R: Rng>(variant: ModelVariant, dims: Dims, rng: &mut R) -> Self {
        match variant {
            ModelVariant::Shared => Model::Shared(SharedModel::new(dims, rng)),
            ModelVariant::Separate => Model::Separate(SeparateModel::new(dims, rng)),
        }
    }

    pub fn variant(&self) -> ModelVariant {
        match self {
            Model::Shared(_) => ModelVariant::Shared,
            Model::Separate(_) => ModelVariant::Separate,
        }
    }

    pub fn dims(&self) -> &Dims {
        match self {
            Model::Shared(m) => &m.dims,
            Model::Separate(m) => &m.dims,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.dims().latent
    }

    /// One policy per latent feature.
    pub fn num_policies(&self) -> usize {
        self.dims().latent
    }

    pub fn num_actions(&self) -> usize {
        self.dims().n_actions
    }

    pub fn obs_shape(&self) -> Vec<usize> {
        vec![1, self.dims().obs_h, self.dims().obs_w]
    }

    pub fn params(&self) -> &[Param<T>] {
        match self {
            Model::Shared(m) => &m.params,
            Model::Separate(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        match self {
            Model::Shared(m) => &mut m.params,
            Model::Separate(m) => &mut m.params,
        }
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.params()
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_all_finite())
    }

    /// Put every parameter on the tape as a leaf, in `params()` order.
    pub fn register(&self, tape: &mut Tape<T>) -> Registered {
        Registered(
            self.params()
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        )
    }

    fn node(&self, reg: &Registered, name: &str) -> NodeId {
        reg.0[self.param_index(name)]
    }

    fn check_obs(&self, tape: &Tape<T>, obs: NodeId) -> Result<()> {
        let shape = tape.value(obs).shape();
        if shape != self.obs_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: tape.value(obs).fmt_shape(),
                rhs: crate::tensor::fmt_shape(&self.obs_shape()),
            });
        }
        Ok(())
    }

    /// Encoder forward pass on the tape. Returns the flat `[n]` latent node
    /// and, for the shared model, the trunk node the policies consume.
    pub fn encode_nodes(
        &self,
        tape: &mut Tape<T>,
        reg: &Registered,
        obs: NodeId,
    ) -> Result<Encoding> {
        self.check_obs(tape, obs)?;
        match self {
            Model::Shared(m) => {
                let d = &m.dims;
                let c1 = tape.conv2d(obs, self.node(reg, "enc.conv1.w"), 1, Padding::Same)?;
                let c1b = tape.channel_bias(c1, self.node(reg, "enc.conv1.b"))?;
                let r1 = tape.relu(c1b);
                let c2 = tape.conv2d(r1, self.node(reg, "enc.conv2.w"), 1, Padding::Same)?;
                let c2b = tape.channel_bias(c2, self.node(reg, "enc.conv2.b"))?;
                let r2 = tape.relu(c2b);
                let flat = tape.reshape(r2, vec![1, d.conv_channels * d.obs_h * d.obs_w])?;
                let f1 = tape.matmul(flat, self.node(reg, "enc.fc1.w"))?;
                let f1b = tape.add(f1, self.node(reg, "enc.fc1.b"))?;
                let trunk = tape.relu(f1b);
                let f2 = tape.matmul(trunk, self.node(reg, "enc.fc2.w"))?;
                let f2b = tape.add(f2, self.node(reg, "enc.fc2.b"))?;
                let th = tape.tanh(f2b);
                let h = tape.reshape(th, vec![d.latent])?;
                Ok(Encoding {
                    h,
                    trunk: Some(trunk),
                })
            }
            Model::Separate(m) => {
                let d = &m.dims;
                let flat = tape.reshape(obs, vec![1, d.obs_h * d.obs_w])?;
                let f1 = tape.matmul(flat, self.node(reg, "enc.fc1.w"))?;
                let f1b = tape.add(f1, self.node(reg, "enc.fc1.b"))?;
                let r1 = tape.relu(f1b);
                let f2 = tape.matmul(r1, self.node(reg, "enc.fc2.w"))?;
                let f2b = tape.add(f2, self.node(reg, "enc.fc2.b"))?;
                let th = tape.tanh(f2b);
                let h = tape.reshape(th, vec![d.latent])?;
                Ok(Encoding { h, trunk: None })
            }
        }
    }

    /// Decoder forward pass: latent `[n]` back to an observation-shaped
    /// tensor. The separate model ends in a ReLU; the shared model's output
    /// layer mirrors the (linear) input side of its encoder.
    pub fn decode_nodes(&self, tape: &mut Tape<T>, reg: &Registered, h: NodeId) -> Result<NodeId> {
        let d = self.dims();
        if tape.value(h).numel() != d.latent {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: tape.value(h).fmt_shape(),
                rhs: crate::tensor::fmt_shape(&[d.latent]),
            });
        }
        let row = tape.reshape(h, vec![1, d.latent])?;
        match self {
            Model::Shared(_) => {
                let f1 = tape.matmul(row, self.node(reg, "dec.fc1.w"))?;
                let f1b = tape.add(f1, self.node(reg, "dec.fc1.b"))?;
                let r1 = tape.relu(f1b);
                let f2 = tape.matmul(r1, self.node(reg, "dec.fc2.w"))?;
                let f2b = tape.add(f2, self.node(reg, "dec.fc2.b"))?;
                let r2 = tape.relu(f2b);
                let img = tape.reshape(r2, vec![d.conv_channels, d.obs_h, d.obs_w])?;
                let t1 = tape.conv2d_transpose(img, self.node(reg, "dec.deconv1.w"), 1, Padding::Same)?;
                let t1b = tape.channel_bias(t1, self.node(reg, "dec.deconv1.b"))?;
                let r3 = tape.relu(t1b);
                let t2 = tape.conv2d_transpose(r3, self.node(reg, "dec.deconv2.w"), 1, Padding::Same)?;
                tape.channel_bias(t2, self.node(reg, "dec.deconv2.b"))
            }
            Model::Separate(_) => {
                let f1 = tape.matmul(row, self.node(reg, "dec.fc1.w"))?;
                let f1b = tape.add(f1, self.node(reg, "dec.fc1.b"))?;
                let r1 = tape.relu(f1b);
                let f2 = tape.matmul(r1, self.node(reg, "dec.fc2.w"))?;
                let f2b = tape.add(f2, self.node(reg, "dec.fc2.b"))?;
                let r2 = tape.relu(f2b);
                tape.reshape(r2, vec![1, d.obs_h, d.obs_w])
            }
        }
    }

    /// Policy `k` as a probability node over the action set. The shared
    /// model reads `trunk` (optionally behind a stop-gradient); the separate
    /// model applies its per-policy matrix to the flattened observation.
    pub fn policy_nodes(
        &self,
        tape: &mut Tape<T>,
        reg: &Registered,
        obs: NodeId,
        trunk: Option<NodeId>,
        k: usize,
        detach_trunk: bool,
    ) -> Result<NodeId> {
        let d = self.dims();
        if k >= d.latent {
            return Err(Error::PolicyOutOfRange {
                index: k,
                count: d.latent,
            });
        }
        let logits_row = match self {
            Model::Shared(_) => {
                let mut t = trunk.expect("shared policy needs the encoder trunk node");
                if detach_trunk {
                    t = tape.stop_gradient(t);
                }
                let l = tape.matmul(t, self.node(reg, &format!("pol.{k}.w")))?;
                tape.add(l, self.node(reg, &format!("pol.{k}.b")))?
            }
            Model::Separate(_) => {
                let flat = tape.reshape(obs, vec![1, d.obs_h * d.obs_w])?;
                tape.matmul(flat, self.node(reg, &format!("pol.{k}.w")))?
            }
        };
        let logits = tape.reshape(logits_row, vec![d.n_actions])?;
        Ok(tape.softmax(logits))
    }

    // -- value-mode conveniences (throwaway tape, no backward) --------------

    pub fn encode_value(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let o = tape.constant(obs.clone());
        let enc = self.encode_nodes(&mut tape, &reg, o)?;
        Ok(tape.value(enc.h).clone())
    }

    pub fn decode_value(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let hn = tape.leaf(h.clone());
        let out = self.decode_nodes(&mut tape, &reg, hn)?;
        Ok(tape.value(out).clone())
    }

    pub fn reconstruct_value(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let o = tape.constant(obs.clone());
        let enc = self.encode_nodes(&mut tape, &reg, o)?;
        let out = self.decode_nodes(&mut tape, &reg, enc.h)?;
        Ok(tape.value(out).clone())
    }

    pub fn policy_probs(&self, obs: &Tensor<T>, k: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let o = tape.constant(obs.clone());
        let trunk = match self {
            Model::Shared(_) => Some(self.encode_nodes(&mut tape, &reg, o)?.trunk.unwrap()),
            Model::Separate(_) => None,
        };
        let probs = self.policy_nodes(&mut tape, &reg, o, trunk, k, false)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Draw an action from policy `k`.
    pub fn sample_action<R: Rng>(&self, obs: &Tensor<T>, k: usize, rng: &mut R) -> Result<usize> {
        let probs = self.policy_probs(obs, k)?;
        Ok(sample_index(&probs, rng))
    }
}

/// Categorical draw by inverse CDF over `probs` (assumed to sum to 1).
pub fn sample_index<T: Scalar, R: Rng>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += (*p).as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
