//! `SKL1` skeleton and `FTR1` feature files.
//!
//! Both are little-endian: a four-byte magic, `u32` header fields, then
//! row-major `f64` values.
//!
//! ```text
//! SKL1  T_raw J subjects spine_index label  T_raw*subjects*J*3 x f64
//! FTR1  T_raw width label                   T_raw*width x f64   (width = 1536)
//! ```

use std::fs;
use std::path::Path;

use super::{FrameFeatureSequence, RawSkeletonSample};
use crate::bytes::{put_f64s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::model::RGB_FEATURE_DIM;
use crate::tensor::Tensor;

pub const SKELETON_MAGIC: &[u8; 4] = b"SKL1";
pub const FEATURE_MAGIC: &[u8; 4] = b"FTR1";

pub fn encode_skeleton(s: &RawSkeletonSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * s.coords.len());
    out.extend_from_slice(SKELETON_MAGIC);
    for v in [s.frames, s.joints, s.subjects, s.spine_index, s.label] {
        put_u32(&mut out, v);
    }
    put_f64s(&mut out, &s.coords);
    out
}

pub fn decode_skeleton(bytes: &[u8]) -> Result<RawSkeletonSample> {
    let mut r = ByteReader::new(bytes);
    r.magic(SKELETON_MAGIC)?;
    let at = r.offset();
    let frames = r.usize("frame count")?;
    let joints = r.usize("joint count")?;
    let subjects = r.usize("subject count")?;
    let spine_index = r.usize("spine index")?;
    let label = r.usize("label")?;
    if frames == 0 || joints == 0 || !(1..=2).contains(&subjects) || spine_index >= joints {
        return Err(Error::parse(
            at,
            format!("invalid header: frames={frames} joints={joints} subjects={subjects} spine={spine_index}"),
        ));
    }
    let n = frames * subjects * joints * 3;
    let coords = r.f64s(n, "skeleton payload")?;
    r.finish()?;
    Ok(RawSkeletonSample {
        frames,
        joints,
        subjects,
        spine_index,
        label,
        coords,
    })
}

pub fn encode_features(f: &FrameFeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * f.features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, f.features.dim(0));
    put_u32(&mut out, f.features.dim(1));
    put_u32(&mut out, f.label);
    put_f64s(&mut out, f.features.data());
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FrameFeatureSequence> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let frames = r.usize("frame count")?;
    let at = r.offset();
    let width = r.usize("feature width")?;
    if width != RGB_FEATURE_DIM {
        return Err(Error::parse(at, format!("feature width {width}, expected {RGB_FEATURE_DIM}")));
    }
    if frames == 0 {
        return Err(Error::parse(4, "feature file has zero frames"));
    }
    let label = r.usize("label")?;
    let data = r.f64s(frames * width, "feature payload")?;
    r.finish()?;
    Ok(FrameFeatureSequence {
        features: Tensor::new([frames, width], data)?,
        label,
    })
}

pub fn save_skeleton_file(path: impl AsRef<Path>, s: &RawSkeletonSample) -> Result<()> {
    s.validate()?;
    fs::write(path, encode_skeleton(s))?;
    Ok(())
}

pub fn load_skeleton_file(path: impl AsRef<Path>) -> Result<RawSkeletonSample> {
    decode_skeleton(&fs::read(path)?)
}

pub fn save_feature_file(path: impl AsRef<Path>, f: &FrameFeatureSequence) -> Result<()> {
    fs::write(path, encode_features(f))?;
    Ok(())
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FrameFeatureSequence> {
    decode_features(&fs::read(path)?)
}
