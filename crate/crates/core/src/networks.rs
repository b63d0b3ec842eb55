//! Shared actor and critic networks.
//!
//! Input rows are `frames` stacked observation frames, oldest first. Two
//! encoders are available:
//!
//! * `conv1d`: the frames are channels and each frame is a 1-D signal. Three
//!   convolutions (kernel 3, padding same/valid/valid, strides configurable and
//!   `(2, 1, 1)` by default) feed a `256 -> 128` ReLU head.
//! * `mlp`: the flattened stack goes through the `net_arch` dense layers, which
//!   must end with the same `256 -> 128` head.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_tensors, write_tensors, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const HEAD: [usize; 2] = [256, 128];
const KERNEL: usize = 3;
/// Std of a unit normal truncated to `[-2, 2]`.
const TRUNC_STD: f64 = 0.879_625_661_034_239_8;
const INIT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[serde(alias = "cnn")]
    Conv1d,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Conv filters per layer, or dense widths for `mlp`.
    pub channels: Vec<usize>,
    pub frames: usize,
    pub strides: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Mlp, channels: HEAD.to_vec(), frames: 1, strides: [2, 1, 1] }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("algo.frames", "must be at least 1"));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("algo.net_arch", "layer sizes must be positive"));
        }
        match self.kind {
            EncoderKind::Conv1d => {
                if self.channels.len() != 3 {
                    return Err(Error::config("algo.net_arch", "conv1d takes exactly three filter counts"));
                }
                if self.strides.contains(&0) {
                    return Err(Error::config("algo.conv_strides", "strides must be positive"));
                }
            }
            EncoderKind::Mlp => {
                if !self.channels.ends_with(&HEAD) {
                    return Err(Error::config("algo.net_arch", "mlp layers must end with [256, 128]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Conv { c_in: usize, c_out: usize, stride: usize, pad_left: usize, pad_right: usize },
    Dense { fan_in: usize, fan_out: usize, relu: bool },
}

impl Layer {
    fn shapes(&self) -> [Vec<usize>; 2] {
        match *self {
            Layer::Conv { c_in, c_out, .. } => [vec![c_out, c_in, KERNEL], vec![c_out]],
            Layer::Dense { fan_in, fan_out, .. } => [vec![fan_in, fan_out], vec![fan_out]],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv { c_in, .. } => c_in * KERNEL,
            Layer::Dense { fan_in, .. } => fan_in,
        }
    }
}

/// A feed-forward network layout; the weights live in a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    frames: usize,
    frame_dim: usize,
    out_dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(cfg: &EncoderConfig, frame_dim: usize, out_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if frame_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("network input and output must be non-empty".into()));
        }
        let mut layers = Vec::new();
        let mut width = match cfg.kind {
            EncoderKind::Conv1d => {
                let mut c_in = cfg.frames;
                let mut len = frame_dim;
                for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
                    let (pad_left, pad_right) = if i == 0 {
                        // "same": output length is ceil(len / stride)
                        let out = len.div_ceil(stride);
                        let total = ((out - 1) * stride + KERNEL).saturating_sub(len);
                        (total / 2, total - total / 2)
                    } else {
                        (0, 0)
                    };
                    let padded = len + pad_left + pad_right;
                    if padded < KERNEL {
                        return Err(Error::config(
                            "algo.net_arch",
                            format!("observation of length {frame_dim} is too short for three conv1d layers"),
                        ));
                    }
                    len = (padded - KERNEL) / stride + 1;
                    layers.push(Layer::Conv { c_in, c_out, stride, pad_left, pad_right });
                    c_in = c_out;
                }
                let mut fan_in = c_in * len;
                for &w in &HEAD {
                    layers.push(Layer::Dense { fan_in, fan_out: w, relu: true });
                    fan_in = w;
                }
                fan_in
            }
            EncoderKind::Mlp => {
                let mut fan_in = cfg.frames * frame_dim;
                for &w in &cfg.channels {
                    layers.push(Layer::Dense { fan_in, fan_out: w, relu: true });
                    fan_in = w;
                }
                fan_in
            }
        };
        layers.push(Layer::Dense { fan_in: width, fan_out: out_dim, relu: false });
        width = out_dim;
        debug_assert_eq!(width, out_dim);
        Ok(Self { frames: cfg.frames, frame_dim, out_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.frames * self.frame_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Freshly initialised weights: truncated normal with variance
    /// `2 / fan_in` (cut at two standard deviations), zero biases.
    pub fn init(&self, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let [w_shape, b_shape] = layer.shapes();
            let std = (INIT_SCALE / layer.fan_in() as f64).sqrt() / TRUNC_STD;
            let n: usize = w_shape.iter().product();
            let w = (0..n).map(|_| truncated_normal(rng) * std).collect();
            out.push((format!("{prefix}.{i}.weight"), Tensor::new(w_shape, w).unwrap().with_grad()));
            out.push((format!("{prefix}.{i}.bias"), Tensor::zeros(b_shape).with_grad()));
        }
        out
    }

    /// Expected parameter shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.shapes()).collect()
    }

    /// Forward pass for a `[batch, input_dim]` input; returns `[batch, out_dim]`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!(
                "network needs {} parameter tensors, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        let shape = g.value(input).shape().to_vec();
        let &[batch, dim] = shape.as_slice() else {
            return Err(Error::Shape(format!("network input must be a matrix, got {shape:?}")));
        };
        if dim != self.input_dim() {
            return Err(Error::Shape(format!("network expects {} inputs, got {dim}", self.input_dim())));
        }
        let mut h = input;
        let mut flat = true;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            match *layer {
                Layer::Conv { stride, pad_left, pad_right, .. } => {
                    if flat {
                        h = g.reshape(h, vec![batch, self.frames, self.frame_dim])?;
                        flat = false;
                    }
                    h = g.conv1d(h, w, Some(b), stride, pad_left, pad_right)?;
                    h = g.relu(h)?;
                }
                Layer::Dense { relu, fan_in, .. } => {
                    if !flat {
                        h = g.reshape(h, vec![batch, fan_in])?;
                        flat = true;
                    }
                    h = g.matmul(h, w)?;
                    h = g.add(h, b)?;
                    if relu {
                        h = g.relu(h)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Actor parameters `theta` and critic parameters `phi`, shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub theta: Vec<(String, Tensor)>,
    pub phi: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.theta.iter().chain(&self.phi).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.theta.iter_mut().chain(&mut self.phi).map(|(_, t)| t)
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn n_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every value; equal iff bit-identical
    /// (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let items = self.theta.iter().chain(&self.phi).map(|(n, t)| (n.as_str(), t));
        write_tensors(w, items)
    }

    /// Loads a file written by [`ParameterSet::save`]; `theta.*` tensors go
    /// to the actor, `phi.*` to the critic.
    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut set = ParameterSet { theta: Vec::new(), phi: Vec::new() };
        for (name, t) in read_tensors(r)? {
            if name.starts_with("theta.") {
                set.theta.push((name, t));
            } else if name.starts_with("phi.") {
                set.phi.push((name, t));
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(set)
    }
}

/// Categorical action distribution with its log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Self { probs, log_probs }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(&p, &lp)| if p > 0.0 { p * lp } else { 0.0 })
            .sum::<f64>()
    }
}

/// Where the critic takes its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Each agent's own observation.
    #[default]
    Local,
    /// The environment's full state.
    Centralized,
}

/// Actor and critic layouts for one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: Network,
    pub critic: Network,
    pub n_actions: usize,
}

impl ActorCritic {
    pub fn new(
        encoder: &EncoderConfig,
        policy_frame_dim: usize,
        critic_frame_dim: usize,
        n_actions: usize,
    ) -> Result<Self> {
        Ok(Self {
            actor: Network::new(encoder, policy_frame_dim, n_actions)?,
            critic: Network::new(encoder, critic_frame_dim, 1)?,
            n_actions,
        })
    }

    /// Deterministic in `seed`; actor weights are drawn before critic weights.
    pub fn init_parameters(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = self.actor.init("theta", &mut rng);
        let phi = self.critic.init("phi", &mut rng);
        ParameterSet { theta, phi }
    }

    pub fn check_parameters(&self, params: &ParameterSet) -> Result<()> {
        for (net, set, which) in [(&self.actor, &params.theta, "theta"), (&self.critic, &params.phi, "phi")] {
            let want = net.param_shapes();
            let got: Vec<Vec<usize>> = set.iter().map(|(_, t)| t.shape().to_vec()).collect();
            if want != got {
                return Err(Error::Checkpoint(format!("{which} shapes {got:?} do not match network {want:?}")));
            }
        }
        Ok(())
    }

    /// Action logits `[batch, n_actions]`.
    pub fn policy_logits(&self, g: &mut Graph, theta: &[Var], input: Var) -> Result<Var> {
        self.actor.forward(g, theta, input)
    }

    /// Values `[batch]`.
    pub fn values(&self, g: &mut Graph, phi: &[Var], input: Var) -> Result<Var> {
        let out = self.critic.forward(g, phi, input)?;
        let batch = g.value(out).shape()[0];
        g.reshape(out, vec![batch])
    }

    /// Action distributions for `rows` stacked inputs, without gradients.
    pub fn policy_forward(&self, theta: &[(String, Tensor)], inputs: &[f64], rows: usize) -> Result<Vec<Categorical>> {
        let mut g = Graph::new();
        let vars = constants(&mut g, theta);
        let x = input_matrix(&mut g, inputs, rows, self.actor.input_dim())?;
        let logits = self.policy_logits(&mut g, &vars, x)?;
        let logp = g.log_softmax(logits)?;
        let p = g.softmax(logits)?;
        let n = self.n_actions;
        Ok(g.value(p)
            .data()
            .chunks(n)
            .zip(g.value(logp).data().chunks(n))
            .map(|(p, lp)| Categorical { probs: p.to_vec(), log_probs: lp.to_vec() })
            .collect())
    }

    /// Critic values for `rows` stacked inputs, without gradients.
    pub fn value_forward(&self, phi: &[(String, Tensor)], inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = constants(&mut g, phi);
        let x = input_matrix(&mut g, inputs, rows, self.critic.input_dim())?;
        let v = self.values(&mut g, &vars, x)?;
        Ok(g.value(v).data().to_vec())
    }
}

fn constants(g: &mut Graph, params: &[(String, Tensor)]) -> Vec<Var> {
    params
        .iter()
        .map(|(_, t)| g.constant(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")))
        .collect()
}

/// Leaf variables for training; gradients accumulate on the tape.
pub fn trainable(g: &mut Graph, params: &[(String, Tensor)]) -> Vec<Var> {
    params
        .iter()
        .map(|(_, t)| g.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor").with_grad()))
        .collect()
}

pub(crate) fn input_matrix(g: &mut Graph, inputs: &[f64], rows: usize, dim: usize) -> Result<Var> {
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("network input contains a non-finite value".into()));
    }
    if inputs.len() != rows * dim {
        return Err(Error::Shape(format!("{} inputs for {rows} rows of width {dim}", inputs.len())));
    }
    Ok(g.constant(Tensor::new(vec![rows, dim], inputs.to_vec())?))
}

/// The last `frames` frames of one agent's current episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHistory {
    frames: usize,
    buf: VecDeque<Vec<f64>>,
}

impl FrameHistory {
    pub fn new(frames: usize) -> Self {
        Self { frames: frames.max(1), buf: VecDeque::new() }
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        if self.buf.len() == self.frames {
            self.buf.pop_front();
        }
        self.buf.push_back(frame);
    }

    /// Forgets everything; call at episode boundaries.
    pub fn clear(&mut self) {
        self.buf.clear();
    }

    pub fn stacked(&self, frame_dim: usize) -> Vec<f64> {
        let frames: Vec<&[f64]> = self.buf.iter().map(Vec::as_slice).collect();
        stack_frames(&frames, self.frames, frame_dim)
    }
}

/// Concatenates the most recent `frames` entries of `history` oldest-first,
/// front-padding with zero frames when the history is shorter.
pub fn stack_frames(history: &[&[f64]], frames: usize, frame_dim: usize) -> Vec<f64> {
    let take = history.len().min(frames);
    let mut out = vec![0.0; (frames - take) * frame_dim];
    for f in &history[history.len() - take..] {
        out.extend_from_slice(f);
    }
    out
}
