use crate::data::RawSkeletonSample;
use crate::error::{Error, Result};
use crate::streams::PoseTensor;
use crate::tensor::Tensor;

/// `n` frame indices spread evenly over a sequence of length `len`.
///
/// For `len >= n` the indices are `round(i * (len - 1) / (n - 1))` with
/// halves rounded up. Shorter sequences are stretched by duplication,
/// `floor(i * len / n)`, so every frame repeats an equal number of times
/// when `n` is a multiple of `len`. Output is nondecreasing, starts at 0 and
/// ends at `len - 1`.
pub fn sample_frames(len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if n == 0 {
        return Err(Error::contract("cannot sample zero frames"));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let idx = if len >= n {
        let den = 2 * (n - 1);
        (0..n).map(|i| (2 * i * (len - 1) + (n - 1)) / den).collect()
    } else {
        (0..n).map(|i| i * len / n).collect()
    };
    Ok(idx)
}

/// Body-centred coordinates, each subject handled independently.
///
/// Every joint has the subject's spine joint of the same frame subtracted,
/// then all coordinates are divided by the mean (over frames and non-spine
/// joints) distance to the spine. Returns `[T, subjects * J, 3]` with
/// subjects concatenated on the joint axis.
pub fn normalize_spine(sample: &RawSkeletonSample) -> Result<PoseTensor> {
    sample.validate()?;
    let (t_len, subjects, joints, spine) = (sample.frames, sample.subjects, sample.joints, sample.spine_index);
    let mut out = vec![0.0; sample.coords.len()];
    for s in 0..subjects {
        let at = |t: usize, j: usize| ((t * subjects + s) * joints + j) * 3;
        let mut dist_sum = 0.0;
        for t in 0..t_len {
            let sp = at(t, spine);
            let origin = [sample.coords[sp], sample.coords[sp + 1], sample.coords[sp + 2]];
            for j in 0..joints {
                let p = at(t, j);
                let mut d2 = 0.0;
                for c in 0..3 {
                    let v = sample.coords[p + c] - origin[c];
                    out[p + c] = v;
                    d2 += v * v;
                }
                if j != spine {
                    dist_sum += d2.sqrt();
                }
            }
        }
        let count = t_len * (joints - 1);
        let scale = if count == 0 { 0.0 } else { dist_sum / count as f64 };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::DegenerateSkeleton);
        }
        for t in 0..t_len {
            for j in 0..joints {
                let p = at(t, j);
                out[p..p + 3].iter_mut().for_each(|v| *v /= scale);
            }
        }
    }
    PoseTensor::new(Tensor::new([t_len, subjects * joints, 3], out)?)
}

/// Normalization, zero-padding to `target_subjects`, then frame sampling.
pub fn preprocess_pose(sample: &RawSkeletonSample, frames: usize, target_subjects: usize) -> Result<PoseTensor> {
    if sample.subjects > target_subjects {
        return Err(Error::contract(format!(
            "sample has {} subjects, dataset allows {target_subjects}",
            sample.subjects
        )));
    }
    let norm = normalize_spine(sample)?;
    let width = sample.subjects * sample.joints * 3;
    let padded = target_subjects * sample.joints * 3;
    let src = norm.tensor().data();
    let mut out = Vec::with_capacity(frames * padded);
    for t in sample_frames(sample.frames, frames)? {
        out.extend_from_slice(&src[t * width..(t + 1) * width]);
        out.resize(out.len() + padded - width, 0.0);
    }
    PoseTensor::new(Tensor::new([frames, target_subjects * sample.joints, 3], out)?)
}

/// Rows of a `[T_raw, W]` feature matrix at the sampled frame indices.
pub fn sample_feature_rows(features: &Tensor, frames: usize) -> Result<Tensor> {
    let (len, width) = match *features.shape() {
        [l, w] => (l, w),
        ref s => return Err(Error::dim("sample_feature_rows", "rank", 2, s.len())),
    };
    let mut out = Vec::with_capacity(frames * width);
    for t in sample_frames(len, frames)? {
        out.extend_from_slice(features.row(t));
    }
    Tensor::new([frames, width], out)
}
