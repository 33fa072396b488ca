//! Spatial and temporal pose streams.
//!
//! A stream is an encoder (SEU, TEU, or the plain convolutional baseline)
//! followed by three post convolutions, a residual connection from the
//! encoder output and layer normalization. The two streams are fused by
//! concatenation along the time axis.

use rand::Rng;

use crate::config::{join, KvMap};
use crate::error::{Error, Result};
use crate::params::{init_conv, Bound, ParamStore};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Nonlinearity placed between convolutions inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        })
    }
}

/// Layer widths and kernel sizes of both pose streams.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub seu_filters: [usize; 3],
    pub teu_filters: [usize; 3],
    pub post_filters: [usize; 3],
    pub seu_kernels: [usize; 3],
    pub teu_kernels: [usize; 3],
    pub post_kernels: [usize; 3],
    /// Kernel widths of the plain encoder used when SEU/TEU are ablated.
    pub baseline_kernels: [usize; 3],
    pub channel_dim: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            seu_filters: [32, 48, 64],
            teu_filters: [32, 48, 64],
            post_filters: [96, 112, 120],
            seu_kernels: [1, 1, 1],
            teu_kernels: [3, 3, 3],
            post_kernels: [3, 3, 3],
            baseline_kernels: [1, 1, 1],
            channel_dim: 120,
            activation: Activation::Relu,
            layer_norm_eps: 1e-6,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.seu_filters,
            self.teu_filters,
            self.post_filters,
            self.seu_kernels,
            self.teu_kernels,
            self.post_kernels,
            self.baseline_kernels,
        ];
        if all.iter().flatten().any(|&v| v == 0) {
            return Err(Error::contract("filter counts and kernel widths must be positive"));
        }
        if self.post_filters[2] != self.channel_dim {
            return Err(Error::contract(format!(
                "final post-layer filter count {} must equal channel_dim {}",
                self.post_filters[2], self.channel_dim
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::contract("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, kv: &mut KvMap) {
        kv.set("seu_filters", join(&self.seu_filters));
        kv.set("teu_filters", join(&self.teu_filters));
        kv.set("post_filters", join(&self.post_filters));
        kv.set("seu_kernels", join(&self.seu_kernels));
        kv.set("teu_kernels", join(&self.teu_kernels));
        kv.set("post_kernels", join(&self.post_kernels));
        kv.set("baseline_kernels", join(&self.baseline_kernels));
        kv.set("channel_dim", self.channel_dim);
        kv.set("activation", self.activation);
        kv.set("layer_norm_eps", self.layer_norm_eps);
    }

    pub(crate) fn read_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_array("seu_filters", &mut self.seu_filters)?;
        kv.read_array("teu_filters", &mut self.teu_filters)?;
        kv.read_array("post_filters", &mut self.post_filters)?;
        kv.read_array("seu_kernels", &mut self.seu_kernels)?;
        kv.read_array("teu_kernels", &mut self.teu_kernels)?;
        kv.read_array("post_kernels", &mut self.post_kernels)?;
        kv.read_array("baseline_kernels", &mut self.baseline_kernels)?;
        kv.read_into("channel_dim", &mut self.channel_dim)?;
        kv.read_into("activation", &mut self.activation)?;
        kv.read_into("layer_norm_eps", &mut self.layer_norm_eps)?;
        Ok(())
    }

    pub(crate) const KEYS: &'static [&'static str] = &[
        "seu_filters",
        "teu_filters",
        "post_filters",
        "seu_kernels",
        "teu_kernels",
        "post_kernels",
        "baseline_kernels",
        "channel_dim",
        "activation",
        "layer_norm_eps",
    ];
}

/// Preprocessed pose: `[T, J, D_in]` finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTensor(Tensor);

impl PoseTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::dim("pose", "rank", 3, values.rank()));
        }
        if !values.is_finite() {
            return Err(Error::contract("pose contains non-finite values"));
        }
        Ok(PoseTensor(values))
    }

    pub fn frames(&self) -> usize {
        self.0.dim(0)
    }

    pub fn joints(&self) -> usize {
        self.0.dim(1)
    }

    pub fn coords(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Which encoder heads a pose stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    /// Per-frame convolution over joints (channels = coordinates).
    Spatial,
    /// Convolution over the joint-trajectory axis (channels = frames),
    /// transposed so the filter axis becomes the sequence axis.
    Temporal,
    /// Convolution over time on flattened raw coordinates.
    Plain,
}

/// Number of (sequence, channel) positions an encoder produces for a pose
/// of `frames x joints x coords`, given its final filter count.
pub fn encoder_output_shape(encoder: Encoder, frames: usize, joints: usize, coords: usize, filters: usize) -> (usize, usize) {
    match encoder {
        Encoder::Spatial => (frames, joints * filters),
        Encoder::Temporal => (filters, joints * coords),
        Encoder::Plain => (frames, filters),
    }
}

/// Registers three `same`-padded convolutions under `{prefix}.{i}`.
pub fn init_conv_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    filters: [usize; 3],
    kernels: [usize; 3],
    rng: &mut R,
) {
    let mut c = c_in;
    for i in 0..3 {
        init_conv(store, &format!("{prefix}.{i}"), kernels[i], c, filters[i], rng);
        c = filters[i];
    }
}

/// Three convolutions with `activation` after the first two; the last
/// layer is linear.
pub fn conv_block(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var, activation: Activation) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        let layer = format!("{prefix}.{i}");
        h = tape.conv1d(h, bound.var(&layer, "kernel")?, bound.var(&layer, "bias")?, Padding::Same)?;
        if i < 2 && activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Spatial encoding: each `[J, D_in]` frame passes through the block
/// independently; the `[J, F]` maps are flattened and stacked to `[T, J*F]`.
pub fn seu_encode(tape: &mut Tape, bound: &Bound, prefix: &str, pose: Var, cfg: &StreamConfig) -> Result<Var> {
    let (t, j) = pose_dims(tape, pose)?;
    let maps = conv_block(tape, bound, prefix, pose, cfg.activation)?;
    let f = tape.shape(maps)[2];
    tape.reshape(maps, &[t, j * f])
}

/// Temporal encoding: the `J*D_in` coordinate trajectories form the
/// sequence axis with the `T` frames as channels. The block maps frames to
/// `F` learned filters and the result is transposed to `[F, J*D_in]`.
pub fn teu_encode(tape: &mut Tape, bound: &Bound, prefix: &str, pose: Var, cfg: &StreamConfig) -> Result<Var> {
    let trajectories = teu_trajectory_map(tape, bound, prefix, pose, cfg)?;
    tape.transpose(trajectories)
}

/// TEU output before the final transpose: `[J*D_in, F]`.
pub fn teu_trajectory_map(tape: &mut Tape, bound: &Bound, prefix: &str, pose: Var, cfg: &StreamConfig) -> Result<Var> {
    let (t, _) = pose_dims(tape, pose)?;
    let n = tape.value(pose).len() / t;
    let flat = tape.reshape(pose, &[t, n])?;
    let per_joint = tape.transpose(flat)?;
    conv_block(tape, bound, prefix, per_joint, cfg.activation)
}

/// Plain encoder on `[T, J*D_in]`.
pub fn plain_encode(tape: &mut Tape, bound: &Bound, prefix: &str, pose: Var, cfg: &StreamConfig) -> Result<Var> {
    let (t, _) = pose_dims(tape, pose)?;
    let n = tape.value(pose).len() / t;
    let flat = tape.reshape(pose, &[t, n])?;
    conv_block(tape, bound, prefix, flat, cfg.activation)
}

fn pose_dims(tape: &Tape, pose: Var) -> Result<(usize, usize)> {
    match *tape.shape(pose) {
        [t, j, _] => Ok((t, j)),
        ref s => Err(Error::dim("pose stream", "pose rank", 3, s.len())),
    }
}

/// Registers post layers, residual projection (only when `c_in` differs from
/// `channel_dim`) and layer-norm parameters.
pub fn init_stream<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c_in: usize, cfg: &StreamConfig, rng: &mut R) {
    init_conv_block(store, &format!("{prefix}.post"), c_in, cfg.post_filters, cfg.post_kernels, rng);
    if c_in != cfg.channel_dim {
        init_conv(store, &format!("{prefix}.residual"), 1, c_in, cfg.channel_dim, rng);
    }
    store.insert(format!("{prefix}.norm.gain"), Tensor::full([cfg.channel_dim], 1.0));
    store.insert(format!("{prefix}.norm.shift"), Tensor::zeros([cfg.channel_dim]));
}

/// `layer_norm(post(encoded) + residual(encoded))`, shape `[L, channel_dim]`.
pub fn stream_forward(tape: &mut Tape, bound: &Bound, prefix: &str, encoded: Var, cfg: &StreamConfig) -> Result<Var> {
    let conv = conv_block(tape, bound, &format!("{prefix}.post"), encoded, cfg.activation)?;
    let c_in = tape.shape(encoded)[1];
    let skip = if c_in == cfg.channel_dim {
        encoded
    } else {
        let res = format!("{prefix}.residual");
        tape.conv1d(encoded, bound.var(&res, "kernel")?, bound.var(&res, "bias")?, Padding::Same)?
    };
    let sum = tape.add(conv, skip)?;
    let norm = format!("{prefix}.norm");
    tape.layer_norm(sum, bound.var(&norm, "gain")?, bound.var(&norm, "shift")?, cfg.layer_norm_eps)
}

/// Registers the encoder (`{prefix}.enc`) and stream parameters.
pub fn init_pose_stream<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    encoder: Encoder,
    plain_filters: [usize; 3],
    pose_shape: (usize, usize, usize),
    cfg: &StreamConfig,
    rng: &mut R,
) {
    let (frames, joints, coords) = pose_shape;
    let enc = format!("{prefix}.enc");
    let (c_in, filters) = match encoder {
        Encoder::Spatial => (coords, cfg.seu_filters),
        Encoder::Temporal => (frames, cfg.teu_filters),
        Encoder::Plain => (joints * coords, plain_filters),
    };
    let kernels = match encoder {
        Encoder::Spatial => cfg.seu_kernels,
        Encoder::Temporal => cfg.teu_kernels,
        Encoder::Plain => cfg.baseline_kernels,
    };
    init_conv_block(store, &enc, c_in, filters, kernels, rng);
    let (_, channels) = encoder_output_shape(encoder, frames, joints, coords, filters[2]);
    init_stream(store, prefix, channels, cfg, rng);
}

/// Encoder then stream; returns `[L, channel_dim]`.
pub fn pose_stream_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    encoder: Encoder,
    pose: Var,
    cfg: &StreamConfig,
) -> Result<Var> {
    let enc = format!("{prefix}.enc");
    let encoded = match encoder {
        Encoder::Spatial => seu_encode(tape, bound, &enc, pose, cfg)?,
        Encoder::Temporal => teu_encode(tape, bound, &enc, pose, cfg)?,
        Encoder::Plain => plain_encode(tape, bound, &enc, pose, cfg)?,
    };
    stream_forward(tape, bound, prefix, encoded, cfg)
}

/// Time-axis concatenation, spatial rows first.
pub fn fuse_pose_streams(tape: &mut Tape, spatial: Var, temporal: Var) -> Result<Var> {
    let (cs, ct) = (tape.shape(spatial)[1], tape.shape(temporal)[1]);
    if cs != ct {
        return Err(Error::dim("fuse_pose_streams", "channel axis", cs, ct));
    }
    tape.concat(&[spatial, temporal], 0)
}
