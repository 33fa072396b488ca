//! Finite-difference gradient suites over primitives, modules and a whole
//! model.
//!
//! Every component is reduced to a scalar by a fixed random projection of
//! its output, then each input and parameter entry is compared against a
//! central difference. A component's score is its worst per-entry
//! [`relative_error`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_attention, multi_head_self_attention, scaled_dot_attention, AttentionConfig, HeadProjection};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check_inputs, relative_error};
use crate::model::{AblationConfig, Branch, Model, ModelDims};
use crate::params::{init_dense, Bound, ParamStore};
use crate::recurrent::{bilstm, init_bilstm, init_lstm, lstm_forward};
use crate::streams::{
    conv_block, fuse_pose_streams, init_conv_block, init_pose_stream, init_stream, plain_encode, pose_stream_forward,
    seu_encode, stream_forward, teu_encode, Encoder, StreamConfig,
};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Components at or above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown scope `{s}` (op|module|model)"))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentError {
    pub component: String,
    pub max_rel_error: f64,
}

impl ComponentError {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

pub fn run_gradcheck(scope: Scope, seed: u64) -> Result<Vec<ComponentError>> {
    match scope {
        Scope::Op => op_suite(seed),
        Scope::Module => module_suite(seed),
        Scope::Model => model_suite(seed),
    }
}

type Body = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// `sum(f(inputs) * R)` for a fixed random `R` shaped like `f`'s output.
fn projected(f: &Body, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t)).collect();
    let out = f(&mut probe, &vars)?;
    let weights = Tensor::uniform(probe.shape(out).to_vec(), 1.0, rng);
    let errs = gradient_check_inputs(
        |tape, vars| {
            let y = f(tape, vars)?;
            let w = tape.constant(&weights);
            let prod = tape.mul(y, w)?;
            Ok(tape.sum(prod))
        },
        inputs,
        GRADCHECK_EPS,
    )?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Uniform values kept at least 0.1 away from zero, clear of the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn op_suite(seed: u64) -> Result<Vec<ComponentError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(&str, Box<Body>, Vec<Tensor>)> = Vec::new();
    cases.push(("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])]));
    cases.push((
        "dense",
        Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 5]), rand_t(r, &[5])],
    ));
    let conv_inputs = |r: &mut ChaCha8Rng, x: &[usize], k: &[usize]| vec![rand_t(r, x), rand_t(r, k), rand_t(r, &[k[2]])];
    cases.push((
        "conv1d_same",
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Same)),
        conv_inputs(r, &[6, 3], &[3, 3, 4]),
    ));
    cases.push((
        "conv1d_same_even_kernel",
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Same)),
        conv_inputs(r, &[5, 2], &[2, 2, 3]),
    ));
    cases.push((
        "conv1d_valid",
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Valid)),
        conv_inputs(r, &[6, 3], &[3, 3, 2]),
    ));
    cases.push((
        "conv1d_batched",
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], Padding::Same)),
        conv_inputs(r, &[2, 4, 3], &[3, 3, 2]),
    ));
    cases.push(("softmax", Box::new(|t, v| Ok(t.softmax(v[0]))), vec![rand_t(r, &[3, 5])]));
    cases.push((
        "layer_norm",
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
    ));
    cases.push(("add", Box::new(|t, v| t.add(v[0], v[1])), vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])]));
    cases.push(("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])]));
    cases.push(("scale", Box::new(|t, v| Ok(t.scale(v[0], -1.7))), vec![rand_t(r, &[2, 3])]));
    cases.push(("relu", Box::new(|t, v| Ok(t.relu(v[0]))), vec![away_from_zero(r, &[2, 4])]));
    cases.push(("sigmoid", Box::new(|t, v| Ok(t.sigmoid(v[0]))), vec![rand_t(r, &[2, 4])]));
    cases.push(("tanh", Box::new(|t, v| Ok(t.tanh(v[0]))), vec![rand_t(r, &[2, 4])]));
    cases.push((
        "concat_axis0",
        Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
        vec![rand_t(r, &[2, 3]), rand_t(r, &[4, 3])],
    ));
    cases.push((
        "concat_axis1",
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 1])],
    ));
    cases.push(("slice", Box::new(|t, v| t.slice(v[0], 1, 1, 2)), vec![rand_t(r, &[3, 4])]));
    cases.push(("transpose", Box::new(|t, v| t.transpose(v[0])), vec![rand_t(r, &[3, 4])]));
    cases.push(("reshape", Box::new(|t, v| t.reshape(v[0], &[2, 6])), vec![rand_t(r, &[3, 4])]));
    cases.push(("global_avg_pool", Box::new(|t, v| t.global_avg_pool(v[0])), vec![rand_t(r, &[5, 3])]));
    cases.push(("sum", Box::new(|t, v| Ok(t.sum(v[0]))), vec![rand_t(r, &[2, 3])]));
    let mut probs = Tensor::uniform([4], 0.4, r);
    probs.data_mut().iter_mut().for_each(|p| *p += 0.5);
    cases.push(("cross_entropy", Box::new(|t, v| t.cross_entropy(v[0], 2)), vec![probs]));

    let mut out = Vec::with_capacity(cases.len());
    for (name, f, inputs) in cases {
        out.push(ComponentError {
            component: name.to_string(),
            max_rel_error: projected(f.as_ref(), &inputs, &mut rng)?,
        });
    }
    Ok(out)
}

/// Adds `U(-0.1, 0.1)` noise to every parameter. Freshly initialized
/// biases are exactly zero, which together with dead units can leave a
/// ReLU input exactly on its kink where no derivative exists.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

/// Checks `f` with respect to `inputs` and every (jittered) parameter in
/// `store`.
fn module_check(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'static,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut store = store.clone();
    jitter(&mut store, rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let body = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound: Bound = names.iter().cloned().zip(vars[n_in..].iter().copied()).collect();
        f(tape, &bound, &vars[..n_in])
    };
    projected(&body, &all, rng)
}

fn tiny_streams() -> StreamConfig {
    StreamConfig {
        seu_filters: [3, 3, 2],
        teu_filters: [3, 3, 2],
        post_filters: [4, 4, 5],
        channel_dim: 5,
        ..StreamConfig::default()
    }
}

fn module_suite(seed: u64) -> Result<Vec<ComponentError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_streams();
    let (frames, joints, coords) = (4, 3, 3);
    let pose_shape = [frames, joints, coords];
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(ComponentError {
            component: name.to_string(),
            max_rel_error: err,
        })
    };

    let mut s = ParamStore::new();
    init_conv_block(&mut s, "b", 2, [3, 3, 2], [3, 3, 3], &mut rng);
    let x = rand_t(&mut rng, &[5, 2]);
    let c = cfg.clone();
    push("conv_block", module_check(&s, vec![x], move |t, b, v| conv_block(t, b, "b", v[0], c.activation), &mut rng)?);

    let mut s = ParamStore::new();
    init_conv_block(&mut s, "e", coords, cfg.seu_filters, cfg.seu_kernels, &mut rng);
    let x = rand_t(&mut rng, &pose_shape);
    let c = cfg.clone();
    push("spatial_encoder", module_check(&s, vec![x], move |t, b, v| seu_encode(t, b, "e", v[0], &c), &mut rng)?);

    let mut s = ParamStore::new();
    init_conv_block(&mut s, "e", frames, cfg.teu_filters, cfg.teu_kernels, &mut rng);
    let x = rand_t(&mut rng, &pose_shape);
    let c = cfg.clone();
    push("temporal_encoder", module_check(&s, vec![x], move |t, b, v| teu_encode(t, b, "e", v[0], &c), &mut rng)?);

    let mut s = ParamStore::new();
    init_conv_block(&mut s, "e", joints * coords, [3, 3, 2], cfg.baseline_kernels, &mut rng);
    let x = rand_t(&mut rng, &pose_shape);
    let c = cfg.clone();
    push("plain_encoder", module_check(&s, vec![x], move |t, b, v| plain_encode(t, b, "e", v[0], &c), &mut rng)?);

    for (name, c_in) in [("stream_with_residual_projection", 3), ("stream_identity_residual", cfg.channel_dim)] {
        let mut s = ParamStore::new();
        init_stream(&mut s, "s", c_in, &cfg, &mut rng);
        let x = rand_t(&mut rng, &[4, c_in]);
        let c = cfg.clone();
        push(name, module_check(&s, vec![x], move |t, b, v| stream_forward(t, b, "s", v[0], &c), &mut rng)?);
    }

    let mut s = ParamStore::new();
    init_pose_stream(&mut s, "sp", Encoder::Spatial, cfg.seu_filters, (frames, joints, coords), &cfg, &mut rng);
    init_pose_stream(&mut s, "tp", Encoder::Temporal, cfg.teu_filters, (frames, joints, coords), &cfg, &mut rng);
    let x = rand_t(&mut rng, &pose_shape);
    let c = cfg.clone();
    push(
        "early_fusion",
        module_check(
            &s,
            vec![x],
            move |t, b, v| {
                let sp = pose_stream_forward(t, b, "sp", Encoder::Spatial, v[0], &c)?;
                let tp = pose_stream_forward(t, b, "tp", Encoder::Temporal, v[0], &c)?;
                fuse_pose_streams(t, sp, tp)
            },
            &mut rng,
        )?,
    );

    let q = rand_t(&mut rng, &[3, 4]);
    let k = rand_t(&mut rng, &[5, 4]);
    let v = rand_t(&mut rng, &[5, 2]);
    push(
        "scaled_dot_attention",
        module_check(&ParamStore::new(), vec![q, k, v], |t, _, v| scaled_dot_attention(t, v[0], v[1], v[2], 4.0), &mut rng)?,
    );

    let layouts = [
        ("attention_full", HeadProjection::Full, false),
        ("attention_split", HeadProjection::Split, false),
        ("attention_tied", HeadProjection::Full, true),
    ];
    for (name, projection, tied) in layouts {
        let acfg = AttentionConfig {
            projection,
            tied,
            ..AttentionConfig::new(4, 2)
        };
        let mut s = ParamStore::new();
        init_attention(&mut s, "a", &acfg, &mut rng);
        let x = rand_t(&mut rng, &[5, 4]);
        push(
            name,
            module_check(&s, vec![x], move |t, b, v| multi_head_self_attention(t, b, "a", v[0], &acfg), &mut rng)?,
        );
    }

    let mut s = ParamStore::new();
    init_lstm(&mut s, "l", 3, 2, &mut rng);
    let x = rand_t(&mut rng, &[4, 3]);
    push("lstm", module_check(&s, vec![x], |t, b, v| lstm_forward(t, b, "l", v[0]), &mut rng)?);

    let mut s = ParamStore::new();
    init_bilstm(&mut s, "l", 3, 2, &mut rng);
    let x = rand_t(&mut rng, &[4, 3]);
    push("bilstm", module_check(&s, vec![x], |t, b, v| bilstm(t, b, "l.fwd", "l.bwd", v[0]), &mut rng)?);

    let mut s = ParamStore::new();
    init_dense(&mut s, "c", 3, 4, &mut rng);
    let x = rand_t(&mut rng, &[5, 3]);
    push(
        "classifier_head",
        module_check(
            &s,
            vec![x],
            |t, b, v| {
                let pooled = t.global_avg_pool(v[0])?;
                let row = t.reshape(pooled, &[1, 3])?;
                let logits = t.dense(row, b.get("c.weight")?, b.get("c.bias")?)?;
                let probs = t.softmax(logits);
                let flat = t.reshape(probs, &[4])?;
                t.cross_entropy(flat, 1)
            },
            &mut rng,
        )?,
    );
    Ok(out)
}

/// Every parameter tensor of the full two-branch model at tiny dims
/// (jittered), with the cross-entropy loss of one random example as the
/// objective.
fn model_suite(seed: u64) -> Result<Vec<ComponentError>> {
    let dims = ModelDims::tiny();
    let mut model = Model::build(AblationConfig::full(Branch::Both), dims.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    jitter(&mut model.params, &mut rng);
    let pose = crate::streams::PoseTensor::new(rand_t(&mut rng, &[dims.frames, dims.joints, dims.coords]))?;
    let feats = rand_t(&mut rng, &[dims.frames, dims.rgb_dim]);
    let label = rng.random_range(0..dims.num_classes);
    let input = crate::model::ModelInput {
        pose: Some(&pose),
        features: Some(&feats),
    };

    model.params.zero_grads();
    model.accumulate_gradients(input, label)?;
    let loss_of = |m: &Model| -> Result<f64> { crate::training::cross_entropy(&m.predict(input)?, label) };

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let analytic = model
            .params
            .get(&name)?
            .grad()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::contract(format!("no gradient reached `{name}`")))?;
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.params.get(&name)?.data()[j];
            model.params.get_mut(&name)?.data_mut()[j] = orig + GRADCHECK_EPS;
            let plus = loss_of(&model)?;
            model.params.get_mut(&name)?.data_mut()[j] = orig - GRADCHECK_EPS;
            let minus = loss_of(&model)?;
            model.params.get_mut(&name)?.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            worst = worst.max(relative_error(a, numeric));
        }
        out.push(ComponentError {
            component: name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
