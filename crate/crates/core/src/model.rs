//! The hybrid-fusion network and its ablation variants.
//!
//! Pose branch: spatial and temporal streams fused on the time axis,
//! optional multi-head self-attention, bi-LSTM. RGB branch: precomputed
//! per-frame features, optional attention, bi-LSTM. Branch sequences are
//! fused late, pooled over time and classified by a dense layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_attention, multi_head_self_attention, AttentionConfig, HeadProjection};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::params::{init_dense, Bound, ParamStore};
use crate::recurrent::{bilstm, init_bilstm};
use crate::streams::{fuse_pose_streams, init_pose_stream, pose_stream_forward, Encoder, PoseTensor, StreamConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature width of the RGB backbone output.
pub const RGB_FEATURE_DIM: usize = 1536;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Pose,
    Rgb,
    Both,
}

impl Branch {
    pub fn uses_pose(self) -> bool {
        matches!(self, Branch::Pose | Branch::Both)
    }

    pub fn uses_rgb(self) -> bool {
        matches!(self, Branch::Rgb | Branch::Both)
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(Branch::Pose),
            "rgb" => Ok(Branch::Rgb),
            "both" => Ok(Branch::Both),
            _ => Err(Error::Config(format!("unknown branch `{s}` (pose|rgb|both)"))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Pose => "pose",
            Branch::Rgb => "rgb",
            Branch::Both => "both",
        })
    }
}

/// How the two branch sequences are combined before classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateFusion {
    /// Concatenate on the time axis, then pool once.
    Time,
    /// Pool each branch, then concatenate on the feature axis.
    Feature,
}

impl std::str::FromStr for LateFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(LateFusion::Time),
            "feature" => Ok(LateFusion::Feature),
            _ => Err(Error::Config(format!("unknown late fusion `{s}` (time|feature)"))),
        }
    }
}

impl std::fmt::Display for LateFusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LateFusion::Time => "time",
            LateFusion::Feature => "feature",
        })
    }
}

/// Selects which sub-modules a model contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub use_seu: bool,
    pub use_teu: bool,
    pub use_attention: bool,
    pub branch: Branch,
    /// Diagnostic: branches return their (attention) features directly,
    /// skipping the bi-LSTM.
    pub bypass_recurrent: bool,
}

impl AblationConfig {
    pub fn full(branch: Branch) -> Self {
        AblationConfig {
            use_seu: true,
            use_teu: true,
            use_attention: true,
            branch,
            bypass_recurrent: false,
        }
    }

    pub fn baseline(branch: Branch) -> Self {
        AblationConfig {
            use_seu: false,
            use_teu: false,
            use_attention: false,
            branch,
            bypass_recurrent: false,
        }
    }

    /// Named variants: `baseline`, `seu`, `seu+teu`, `full`.
    pub fn variant(name: &str, branch: Branch) -> Result<Self> {
        let (use_seu, use_teu, use_attention) = match name {
            "baseline" => (false, false, false),
            "seu" => (true, false, false),
            "seu+teu" => (true, true, false),
            "full" => (true, true, true),
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{name}` (baseline|seu|seu+teu|full)"
                )))
            }
        };
        Ok(AblationConfig {
            use_seu,
            use_teu,
            use_attention,
            branch,
            bypass_recurrent: false,
        })
    }

    pub(crate) fn write_kv(&self, kv: &mut KvMap) {
        kv.set("use_seu", self.use_seu);
        kv.set("use_teu", self.use_teu);
        kv.set("use_attention", self.use_attention);
        kv.set("branch", self.branch);
        kv.set("bypass_recurrent", self.bypass_recurrent);
    }

    pub(crate) fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut a = AblationConfig::full(Branch::Pose);
        kv.read_into("use_seu", &mut a.use_seu)?;
        kv.read_into("use_teu", &mut a.use_teu)?;
        kv.read_into("use_attention", &mut a.use_attention)?;
        kv.read_into("branch", &mut a.branch)?;
        kv.read_into("bypass_recurrent", &mut a.bypass_recurrent)?;
        Ok(a)
    }
}

/// Input sizes and layer widths.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub frames: usize,
    /// Joints per frame after subject concatenation.
    pub joints: usize,
    pub coords: usize,
    pub streams: StreamConfig,
    pub heads: usize,
    pub projection: HeadProjection,
    pub tied_attention: bool,
    pub hidden: usize,
    pub rgb_dim: usize,
    pub num_classes: usize,
    pub late_fusion: LateFusion,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            frames: 20,
            joints: 25,
            coords: 3,
            streams: StreamConfig::default(),
            heads: 4,
            projection: HeadProjection::Full,
            tied_attention: false,
            hidden: 128,
            rgb_dim: RGB_FEATURE_DIM,
            num_classes: 4,
            late_fusion: LateFusion::Time,
        }
    }
}

impl ModelDims {
    /// Small dimensions used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelDims {
            frames: 4,
            joints: 3,
            coords: 3,
            streams: StreamConfig {
                seu_filters: [4, 4, 4],
                teu_filters: [4, 4, 4],
                post_filters: [6, 6, 8],
                channel_dim: 8,
                ..StreamConfig::default()
            },
            heads: 2,
            hidden: 4,
            rgb_dim: 8,
            num_classes: 3,
            ..ModelDims::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.streams.validate()?;
        for (name, v) in [
            ("frames", self.frames),
            ("joints", self.joints),
            ("coords", self.coords),
            ("hidden", self.hidden),
            ("rgb_dim", self.rgb_dim),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::contract("num_classes must be at least 2"));
        }
        self.pose_attention().validate()?;
        self.rgb_attention().validate()
    }

    pub fn pose_attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.streams.channel_dim,
            heads: self.heads,
            projection: self.projection,
            tied: self.tied_attention,
        }
    }

    pub fn rgb_attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.rgb_dim,
            ..self.pose_attention()
        }
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("frames", self.frames);
        kv.set("joints", self.joints);
        kv.set("coords", self.coords);
        self.streams.write_kv(kv);
        kv.set("heads", self.heads);
        kv.set("head_projection", self.projection);
        kv.set("tied_attention", self.tied_attention);
        kv.set("hidden", self.hidden);
        kv.set("rgb_dim", self.rgb_dim);
        kv.set("num_classes", self.num_classes);
        kv.set("late_fusion", self.late_fusion);
    }

    /// Overrides defaults with whatever keys `kv` carries.
    pub fn read_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("frames", &mut self.frames)?;
        kv.read_into("joints", &mut self.joints)?;
        kv.read_into("coords", &mut self.coords)?;
        self.streams.read_kv(kv)?;
        kv.read_into("heads", &mut self.heads)?;
        kv.read_into("head_projection", &mut self.projection)?;
        kv.read_into("tied_attention", &mut self.tied_attention)?;
        kv.read_into("hidden", &mut self.hidden)?;
        kv.read_into("rgb_dim", &mut self.rgb_dim)?;
        kv.read_into("num_classes", &mut self.num_classes)?;
        kv.read_into("late_fusion", &mut self.late_fusion)?;
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "frames",
        "joints",
        "coords",
        "heads",
        "head_projection",
        "tied_attention",
        "hidden",
        "rgb_dim",
        "num_classes",
        "late_fusion",
    ];

    pub fn is_key(key: &str) -> bool {
        Self::KEYS.contains(&key) || StreamConfig::KEYS.contains(&key)
    }
}

/// One example as seen by the network.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelInput<'a> {
    pub pose: Option<&'a PoseTensor>,
    /// `[T, rgb_dim]` frame features.
    pub features: Option<&'a Tensor>,
}

/// A built network: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub ablation: AblationConfig,
    pub seed: u64,
    pub params: ParamStore,
}

const SPATIAL: &str = "pose.spatial";
const TEMPORAL: &str = "pose.temporal";
const POSE_ATTENTION: &str = "pose.attention";
const RGB_ATTENTION: &str = "rgb.attention";
const CLASSIFIER: &str = "classifier";

impl Model {
    /// Constructs and initializes exactly the sub-modules `ablation` needs.
    /// Parameters depend only on `(ablation, dims, seed)`.
    pub fn build(ablation: AblationConfig, dims: ModelDims, seed: u64) -> Result<Model> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &dims.streams;
        let pose_shape = (dims.frames, dims.joints, dims.coords);
        if ablation.branch.uses_pose() {
            init_pose_stream(&mut store, SPATIAL, spatial_encoder(&ablation), cfg.seu_filters, pose_shape, cfg, &mut rng);
            init_pose_stream(&mut store, TEMPORAL, temporal_encoder(&ablation), cfg.teu_filters, pose_shape, cfg, &mut rng);
            if ablation.use_attention {
                init_attention(&mut store, POSE_ATTENTION, &dims.pose_attention(), &mut rng);
            }
            if !ablation.bypass_recurrent {
                init_bilstm(&mut store, "pose.lstm", cfg.channel_dim, dims.hidden, &mut rng);
            }
        }
        if ablation.branch.uses_rgb() {
            if ablation.use_attention {
                init_attention(&mut store, RGB_ATTENTION, &dims.rgb_attention(), &mut rng);
            }
            if !ablation.bypass_recurrent {
                init_bilstm(&mut store, "rgb.lstm", dims.rgb_dim, dims.hidden, &mut rng);
            }
        }
        let width = classifier_width(&ablation, &dims)?;
        init_dense(&mut store, CLASSIFIER, width, dims.num_classes, &mut rng);
        Ok(Model {
            dims,
            ablation,
            seed,
            params: store,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Pose branch hidden sequence, `[T_s + T_t, 2H]`.
    pub fn pose_branch(&self, tape: &mut Tape, bound: &Bound, pose: Var) -> Result<Var> {
        let fused = self.pose_features(tape, bound, pose)?;
        let attended = if self.ablation.use_attention {
            multi_head_self_attention(tape, bound, POSE_ATTENTION, fused, &self.dims.pose_attention())?
        } else {
            fused
        };
        if self.ablation.bypass_recurrent {
            return Ok(attended);
        }
        bilstm(tape, bound, "pose.lstm.fwd", "pose.lstm.bwd", attended)
    }

    /// Both pose streams fused on the time axis, before attention.
    pub fn pose_features(&self, tape: &mut Tape, bound: &Bound, pose: Var) -> Result<Var> {
        let expect = [self.dims.frames, self.dims.joints, self.dims.coords];
        let got = tape.shape(pose).to_vec();
        if got.len() != 3 {
            return Err(Error::dim("pose_branch", "pose rank", 3, got.len()));
        }
        for (axis, name) in ["frames", "joints", "coords"].iter().enumerate() {
            if got[axis] != expect[axis] {
                return Err(Error::dim("pose_branch", *name, expect[axis], got[axis]));
            }
        }
        let cfg = &self.dims.streams;
        let s = pose_stream_forward(tape, bound, SPATIAL, spatial_encoder(&self.ablation), pose, cfg)?;
        let t = pose_stream_forward(tape, bound, TEMPORAL, temporal_encoder(&self.ablation), pose, cfg)?;
        fuse_pose_streams(tape, s, t)
    }

    /// RGB branch hidden sequence, `[T, 2H]`.
    pub fn rgb_branch(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        match *tape.shape(features) {
            [_, w] if w == self.dims.rgb_dim => {}
            [_, w] => return Err(Error::dim("rgb_branch", "feature width", self.dims.rgb_dim, w)),
            ref s => return Err(Error::dim("rgb_branch", "feature rank", 2, s.len())),
        }
        let attended = if self.ablation.use_attention {
            multi_head_self_attention(tape, bound, RGB_ATTENTION, features, &self.dims.rgb_attention())?
        } else {
            features
        };
        if self.ablation.bypass_recurrent {
            return Ok(attended);
        }
        bilstm(tape, bound, "rgb.lstm.fwd", "rgb.lstm.bwd", attended)
    }

    /// Late fusion, global average pooling, dense layer and softmax.
    pub fn late_fuse_and_classify(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pose_out: Option<Var>,
        rgb_out: Option<Var>,
    ) -> Result<Var> {
        let pooled = match (pose_out, rgb_out) {
            (Some(p), Some(r)) => match self.dims.late_fusion {
                LateFusion::Time => {
                    let (wp, wr) = (tape.shape(p)[1], tape.shape(r)[1]);
                    if wp != wr {
                        return Err(Error::dim("late_fuse_and_classify", "feature width", wp, wr));
                    }
                    let seq = tape.concat(&[p, r], 0)?;
                    tape.global_avg_pool(seq)?
                }
                LateFusion::Feature => {
                    let gp = tape.global_avg_pool(p)?;
                    let gr = tape.global_avg_pool(r)?;
                    tape.concat(&[gp, gr], 0)?
                }
            },
            (Some(x), None) | (None, Some(x)) => tape.global_avg_pool(x)?,
            (None, None) => return Err(Error::contract("no branch output to classify")),
        };
        let width = tape.shape(pooled)[0];
        let row = tape.reshape(pooled, &[1, width])?;
        let logits = tape.dense(row, bound.var(CLASSIFIER, "weight")?, bound.var(CLASSIFIER, "bias")?)?;
        let probs = tape.softmax(logits);
        tape.reshape(probs, &[self.dims.num_classes])
    }

    /// Class probabilities for one example, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: ModelInput<'_>) -> Result<Var> {
        let pose_out = if self.ablation.branch.uses_pose() {
            let pose = input
                .pose
                .ok_or_else(|| Error::contract("model needs the pose modality but the example has none"))?;
            let pv = tape.constant(pose.tensor());
            Some(self.pose_branch(tape, bound, pv)?)
        } else {
            None
        };
        let rgb_out = if self.ablation.branch.uses_rgb() {
            let feats = input
                .features
                .ok_or_else(|| Error::contract("model needs the rgb modality but the example has none"))?;
            let fv = tape.constant(feats);
            Some(self.rgb_branch(tape, bound, fv)?)
        } else {
            None
        };
        self.late_fuse_and_classify(tape, bound, pose_out, rgb_out)
    }

    /// Class probabilities without recording gradients.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let probs = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Cross-entropy loss of one example; its gradient is added to every
    /// parameter's gradient slot. Returns the loss and the class
    /// probabilities of the forward pass.
    pub fn accumulate_gradients(&mut self, input: ModelInput<'_>, label: usize) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let probs = self.forward(&mut tape, &bound, input)?;
        let loss = tape.cross_entropy(probs, label)?;
        tape.backward(loss)?;
        self.params.accumulate_grads(&tape, &bound);
        Ok((tape.value(loss).item(), tape.value(probs).data().to_vec()))
    }

    pub fn manifest(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("seed", self.seed);
        self.ablation.write_kv(&mut kv);
        self.dims.write_kv(&mut kv);
        kv
    }
}

fn spatial_encoder(a: &AblationConfig) -> Encoder {
    if a.use_seu {
        Encoder::Spatial
    } else {
        Encoder::Plain
    }
}

fn temporal_encoder(a: &AblationConfig) -> Encoder {
    if a.use_teu {
        Encoder::Temporal
    } else {
        Encoder::Plain
    }
}

fn branch_width(a: &AblationConfig, dims: &ModelDims, pose: bool) -> usize {
    match (a.bypass_recurrent, pose) {
        (false, _) => 2 * dims.hidden,
        (true, true) => dims.streams.channel_dim,
        (true, false) => dims.rgb_dim,
    }
}

fn classifier_width(a: &AblationConfig, dims: &ModelDims) -> Result<usize> {
    let wp = branch_width(a, dims, true);
    let wr = branch_width(a, dims, false);
    Ok(match a.branch {
        Branch::Pose => wp,
        Branch::Rgb => wr,
        Branch::Both => match dims.late_fusion {
            LateFusion::Time if wp != wr => {
                return Err(Error::contract(
                    "time-axis late fusion needs equal branch widths; use feature fusion with bypass_recurrent",
                ))
            }
            LateFusion::Time => wp,
            LateFusion::Feature => wp + wr,
        },
    })
}
