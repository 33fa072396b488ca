//! Seeded generator of a small activity dataset with known structure.
//!
//! Every class moves each joint of a shared rest skeleton along a sinusoid
//! whose frequency identifies the class (`base + c * step` cycles per
//! sequence), with per-class amplitude, phase and direction patterns over
//! joints. Each sample is then randomly translated and scaled, which spine
//! normalization removes, and Gaussian noise is added. Paired frame
//! features are Gaussian clusters around per-class centres.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{FrameFeatureSequence, RawSkeletonSample};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::RGB_FEATURE_DIM;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub joints: usize,
    /// Raw frames per sequence, before sampling.
    pub frames_raw: usize,
    pub spine_index: usize,
    /// Mean per-joint motion amplitude relative to the rest skeleton.
    pub amplitude: f64,
    /// Cycles per sequence for class 0.
    pub base_frequency: f64,
    /// Frequency gap between consecutive classes.
    pub frequency_step: f64,
    pub noise_sigma: f64,
    /// Per-value standard deviation of frame features around their class centre.
    pub feature_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 50,
            joints: 25,
            frames_raw: 40,
            spine_index: 1,
            amplitude: 0.3,
            base_frequency: 1.0,
            frequency_step: 1.0,
            noise_sigma: 0.1,
            feature_sigma: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub const KEYS: &'static [&'static str] = &[
        "num_classes",
        "samples_per_class",
        "joints",
        "frames_raw",
        "spine_index",
        "amplitude",
        "base_frequency",
        "frequency_step",
        "noise_sigma",
        "feature_sigma",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return bad("num_classes and samples_per_class must be positive".into());
        }
        if self.joints < 2 || self.spine_index >= self.joints {
            return bad(format!("need at least 2 joints and spine_index < joints, got {} / {}", self.joints, self.spine_index));
        }
        if self.frames_raw == 0 {
            return bad("frames_raw must be positive".into());
        }
        if !(self.base_frequency > 0.0 && self.frequency_step > 0.0 && self.amplitude > 0.0) {
            return bad("amplitude, base_frequency and frequency_step must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.feature_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn frequency(&self, class: usize) -> f64 {
        self.base_frequency + class as f64 * self.frequency_step
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("num_classes", self.num_classes);
        kv.set("samples_per_class", self.samples_per_class);
        kv.set("joints", self.joints);
        kv.set("frames_raw", self.frames_raw);
        kv.set("spine_index", self.spine_index);
        kv.set("amplitude", self.amplitude);
        kv.set("base_frequency", self.base_frequency);
        kv.set("frequency_step", self.frequency_step);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("feature_sigma", self.feature_sigma);
        kv.set("seed", self.seed);
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn read_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("num_classes", &mut self.num_classes)?;
        kv.read_into("samples_per_class", &mut self.samples_per_class)?;
        kv.read_into("joints", &mut self.joints)?;
        kv.read_into("frames_raw", &mut self.frames_raw)?;
        kv.read_into("spine_index", &mut self.spine_index)?;
        kv.read_into("amplitude", &mut self.amplitude)?;
        kv.read_into("base_frequency", &mut self.base_frequency)?;
        kv.read_into("frequency_step", &mut self.frequency_step)?;
        kv.read_into("noise_sigma", &mut self.noise_sigma)?;
        kv.read_into("feature_sigma", &mut self.feature_sigma)?;
        kv.read_into("seed", &mut self.seed)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub skeleton: RawSkeletonSample,
    pub features: FrameFeatureSequence,
}

impl SyntheticSample {
    pub fn label(&self) -> usize {
        self.skeleton.label
    }
}

struct ClassMotion {
    frequency: f64,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    direction: Vec<[f64; 3]>,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Samples in class-major order, `samples_per_class` per class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (j_count, t_count) = (spec.joints, spec.frames_raw);

    let rest: Vec<[f64; 3]> = (0..j_count)
        .map(|j| {
            if j == spec.spine_index {
                [0.0; 3]
            } else {
                std::array::from_fn(|_| rng.random_range(-1.0..1.0))
            }
        })
        .collect();
    let motions: Vec<ClassMotion> = (0..spec.num_classes)
        .map(|c| ClassMotion {
            frequency: spec.frequency(c),
            amplitude: (0..j_count).map(|_| spec.amplitude * rng.random_range(0.5..1.5)).collect(),
            phase: (0..j_count).map(|_| rng.random_range(0.0..TAU)).collect(),
            direction: (0..j_count).map(|_| unit_vector(&mut rng)).collect(),
        })
        .collect();
    let centres: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..RGB_FEATURE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let feature_noise = Normal::new(0.0, spec.feature_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, motion) in motions.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let scale = rng.random_range(0.8..1.25);
            let mut coords = Vec::with_capacity(t_count * j_count * 3);
            for t in 0..t_count {
                let time = t as f64 / t_count as f64;
                for (j, rest_j) in rest.iter().enumerate() {
                    let s = motion.amplitude[j] * (TAU * motion.frequency * time + motion.phase[j]).sin();
                    for c in 0..3 {
                        let local = rest_j[c] + s * motion.direction[j][c] + noise.sample(&mut rng);
                        coords.push(scale * local + offset[c]);
                    }
                }
            }
            let skeleton = RawSkeletonSample {
                frames: t_count,
                joints: j_count,
                subjects: 1,
                spine_index: spec.spine_index,
                label,
                coords,
            };
            let mut feats = Vec::with_capacity(t_count * RGB_FEATURE_DIM);
            for _ in 0..t_count {
                feats.extend(centres[label].iter().map(|&m| m + feature_noise.sample(&mut rng)));
            }
            let features = FrameFeatureSequence::new(Tensor::new([t_count, RGB_FEATURE_DIM], feats)?, label)?;
            out.push(SyntheticSample { skeleton, features });
        }
    }
    Ok(out)
}
