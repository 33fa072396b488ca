//! Loss, optimizers and the training and evaluation loops.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvMap;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Branch, Model, ModelDims};
use crate::params::ParamStore;
use crate::tape::PROB_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (adam|sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Inverse-time decay: step `s` uses `lr / (1 + lr_decay * s)`.
    pub lr_decay: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of every class held out for validation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            lr_decay: 1e-6,
            l2_lambda: 1e-5,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            holdout: 0.2,
        }
    }
}

impl TrainConfig {
    /// SGD at 0.1 for skeleton-only training, Adam at 1e-3 otherwise.
    pub fn for_branch(branch: Branch) -> Self {
        match branch {
            Branch::Pose => TrainConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 0.1,
                ..TrainConfig::default()
            },
            _ => TrainConfig::default(),
        }
    }

    pub const KEYS: &'static [&'static str] =
        &["optimizer", "lr", "lr_decay", "l2_lambda", "batch_size", "epochs", "seed", "holdout"];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_decay < 0.0 || self.l2_lambda < 0.0 {
            return Err(Error::Config("lr_decay and l2_lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout must be in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }

    /// Learning rate of the zero-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr / (1.0 + self.lr_decay * step as f64)
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("optimizer", self.optimizer);
        kv.set("lr", self.lr);
        kv.set("lr_decay", self.lr_decay);
        kv.set("l2_lambda", self.l2_lambda);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("holdout", self.holdout);
    }

    pub fn read_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("optimizer", &mut self.optimizer)?;
        kv.read_into("lr", &mut self.lr)?;
        kv.read_into("lr_decay", &mut self.lr_decay)?;
        kv.read_into("l2_lambda", &mut self.l2_lambda)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("holdout", &mut self.holdout)?;
        Ok(())
    }
}

/// Checks that every example of `data` fits a model built with `dims`.
pub fn check_dataset(dims: &ModelDims, data: &Dataset) -> Result<()> {
    if data.num_classes > dims.num_classes {
        return Err(Error::dim("dataset", "class count", dims.num_classes, data.num_classes));
    }
    for e in &data.examples {
        if let Some(p) = &e.pose {
            if p.frames() != dims.frames {
                return Err(Error::dim("dataset", "pose frames", dims.frames, p.frames()));
            }
            if p.joints() != dims.joints {
                return Err(Error::dim("dataset", "pose joints (joints x subjects)", dims.joints, p.joints()));
            }
            if p.coords() != dims.coords {
                return Err(Error::dim("dataset", "pose coordinates", dims.coords, p.coords()));
            }
        }
        if let Some(f) = &e.features {
            if f.dim(0) != dims.frames {
                return Err(Error::dim("dataset", "feature frames", dims.frames, f.dim(0)));
            }
            if f.dim(1) != dims.rgb_dim {
                return Err(Error::dim("dataset", "feature width", dims.rgb_dim, f.dim(1)));
            }
        }
    }
    Ok(())
}

/// `-ln(probs[label])`, with the probability clamped below at `1e-12`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::contract(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

fn check_lengths(op: &'static str, params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(op, "gradient length", params.len(), grads.len()));
    }
    Ok(())
}

/// `p <- p - lr * (g + l2 * p)`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, l2_lambda: f64) -> Result<()> {
    check_lengths("sgd_step", params, grads)?;
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + l2_lambda * *p);
    }
    Ok(())
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with the L2 term folded into the gradient.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
    l2_lambda: f64,
) -> Result<()> {
    check_lengths("adam_step", params, grads)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::contract(format!(
            "adam state holds {}/{} moments for {} parameters",
            state.m.len(),
            state.v.len(),
            params.len()
        )));
    }
    state.t += 1;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] + l2_lambda * params[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one optimizer update to every parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    states: BTreeMap<String, AdamState>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            hyper: AdamHyper::default(),
            states: BTreeMap::new(),
            step: 0,
        }
    }

    /// Updates completed so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates with the accumulated gradients multiplied by `grad_scale`,
    /// then clears them. Every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, grad_scale: f64) -> Result<()> {
        let lr = cfg.lr_at(self.step);
        for (name, tensor) in store.iter_mut() {
            let grads: Vec<f64> = tensor
                .grad()
                .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?
                .iter()
                .map(|g| g * grad_scale)
                .collect();
            match self.kind {
                OptimizerKind::Sgd => sgd_step(tensor.data_mut(), &grads, lr, cfg.l2_lambda)?,
                OptimizerKind::Adam => {
                    let len = tensor.len();
                    let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState::new(len));
                    adam_step(tensor.data_mut(), &grads, state, lr, self.hyper, cfg.l2_lambda)?;
                }
            }
        }
        store.zero_grads();
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Percent.
    pub accuracy: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} accuracy={:.2}",
            self.epoch, self.split, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Percent correct.
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest probability; the first wins ties.
pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let classes = model.dims.num_classes;
    if data.num_classes > classes {
        return Err(Error::dim("evaluate", "class count", classes, data.num_classes));
    }
    let mut confusion = vec![vec![0; classes]; classes];
    let mut loss = 0.0;
    for e in &data.examples {
        let probs = model.predict(e.input())?;
        loss += cross_entropy(&probs, e.label)?;
        confusion[e.label][argmax(&probs)] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: Model,
    /// Parameters of the epoch with the best held-out accuracy (ties go to
    /// the lower loss, then the earlier epoch). Equals `last` without a
    /// held-out set.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Held-out records in epoch order.
    pub fn test_records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.log.iter().filter(|r| r.split == Split::Test)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.test_records().last().map(|r| r.accuracy)
    }
}

/// Mini-batch training. Every epoch visits `train` in a fresh order drawn
/// from `cfg.seed`, averages gradients over each batch and logs a train
/// record (mean loss and accuracy of the forward passes seen during the
/// epoch) followed by a test record when `test` is given. `on_record` sees
/// each record as soon as it exists.
pub fn train(
    mut model: Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    check_dataset(&model.dims, train)?;
    let test = test.filter(|t| !t.is_empty());
    if let Some(test) = test {
        check_dataset(&model.dims, test)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(2 * cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);
    model.params.zero_grads();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let e = &train.examples[i];
                let (loss, probs) = model.accumulate_gradients(e.input(), e.label)?;
                loss_sum += loss;
                correct += usize::from(argmax(&probs) == e.label);
            }
            opt.step(&mut model.params, cfg, 1.0 / batch.len() as f64)?;
        }
        if !model.params.all_finite() {
            return Err(Error::contract(format!("parameters diverged to non-finite values in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            accuracy: 100.0 * correct as f64 / train.len() as f64,
        };
        on_record(&record);
        log.push(record);
        if let Some(test) = test {
            let ev = evaluate(&model, test)?;
            let record = EpochRecord {
                epoch,
                split: Split::Test,
                loss: ev.loss,
                accuracy: ev.accuracy,
            };
            on_record(&record);
            log.push(record);
            if ev.accuracy > best.2 || (ev.accuracy == best.2 && ev.loss < best.3) {
                best = (model.clone(), epoch, ev.accuracy, ev.loss);
            }
        }
    }
    let (best_model, best_epoch) = if test.is_some() && cfg.epochs > 0 {
        (best.0, best.1)
    } else {
        (model.clone(), cfg.epochs)
    };
    Ok(TrainOutcome {
        last: model,
        best: best_model,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[0.25, 0.75], 1).unwrap(), -(0.75f64.ln()));
        assert_eq!(cross_entropy(&[1.0, 0.0], 1).unwrap(), -(1e-12f64.ln()));
        assert!(matches!(cross_entropy(&[1.0], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_closed_forms() {
        let mut p = [1.0, -3.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, 0.0).unwrap();
        assert_eq!(p, [1.0, -3.0]);
        let mut p = [1.0];
        sgd_step(&mut p, &[1.0], 0.1, 0.0).unwrap();
        assert_eq!(p, [0.9]);
        let mut p = [2.0];
        sgd_step(&mut p, &[0.0], 0.1, 1e-5).unwrap();
        assert_eq!(p, [2.0 - 0.1 * 2e-5]);
        assert!(sgd_step(&mut p, &[0.0, 1.0], 0.1, 0.0).is_err());
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = [1.0, 2.0];
        let mut s = AdamState::new(3);
        assert!(matches!(
            adam_step(&mut p, &[0.1, 0.1], &mut s, 1e-3, AdamHyper::default(), 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn optimizer_requires_every_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let err = opt.step(&mut store, &TrainConfig::default(), 1.0).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn inverse_time_decay() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(2), 0.05);
    }

    #[test]
    fn config_kv_round_trip_and_branch_defaults() {
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            ..TrainConfig::for_branch(Branch::Pose)
        };
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.lr, 0.1);
        assert_eq!(TrainConfig::for_branch(Branch::Both).optimizer, OptimizerKind::Adam);
        let mut kv = KvMap::new();
        cfg.write_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.read_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn record_format_is_stable() {
        let r = EpochRecord {
            epoch: 3,
            split: Split::Test,
            loss: 0.5,
            accuracy: 87.5,
        };
        assert_eq!(r.to_string(), "epoch=3 split=test loss=0.500000 accuracy=87.50");
    }
}
