//! Importer for the NTU RGB+D `.skeleton` text layout.
//!
//! ```text
//! frame_count
//! per frame:  body_count
//!   per body: 10 body info values (id, clipped edges, hand states, lean, tracking)
//!             joint_count
//!             per joint: x y z depthX depthY colorX colorY qw qx qy qz tracking
//! ```
//!
//! Only the camera-space `x y z` of each joint is kept. Frames without any
//! body are dropped; bodies beyond the second are ignored and a missing
//! second body is zero-filled.

use std::fs;
use std::path::Path;

use super::{RawSkeletonSample, NTU_SPINE_INDEX};
use crate::error::{Error, Result};

const BODY_INFO_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;
const MAX_SUBJECTS: usize = 2;

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let skipped = rest.len() - rest.trim_start().len();
        let start = self.pos + skipped;
        let tail = &self.text[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        if len == 0 {
            return Err(Error::parse(start, format!("unexpected end of file, expected {what}")));
        }
        self.pos = start + len;
        Ok((start, &tail[..len]))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        self.count_at(what).map(|(_, n)| n)
    }

    fn count_at(&mut self, what: &str) -> Result<(usize, usize)> {
        let (at, tok) = self.next(what)?;
        let n = tok.parse().map_err(|_| Error::parse(at, format!("invalid {what} `{tok}`")))?;
        Ok((at, n))
    }

    fn real(&mut self, what: &str) -> Result<f64> {
        let (at, tok) = self.next(what)?;
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::parse(at, format!("invalid {what} `{tok}`"))),
        }
    }
}

/// Parses one `.skeleton` document. All bodies must share a joint count.
pub fn parse_ntu_skeleton(text: &str, label: usize) -> Result<RawSkeletonSample> {
    let mut tok = Tokens { text, pos: 0 };
    let frame_count = tok.count("frame count")?;
    let mut joints: Option<usize> = None;
    // Per kept frame, up to two bodies of flat xyz.
    let mut frames: Vec<Vec<Vec<f64>>> = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let bodies = tok.count("body count")?;
        let mut kept = Vec::new();
        for b in 0..bodies {
            for _ in 0..BODY_INFO_FIELDS {
                tok.next("body info")?;
            }
            let (at, n) = tok.count_at("joint count")?;
            match joints {
                None if n == 0 => return Err(Error::parse(at, "body with zero joints")),
                None => joints = Some(n),
                Some(j) if j != n => return Err(Error::parse(at, format!("joint count {n}, earlier bodies had {j}"))),
                _ => {}
            }
            let mut xyz = Vec::with_capacity(3 * n);
            for _ in 0..n {
                for _ in 0..3 {
                    xyz.push(tok.real("joint coordinate")?);
                }
                for _ in 3..JOINT_FIELDS {
                    tok.next("joint field")?;
                }
            }
            if b < MAX_SUBJECTS {
                kept.push(xyz);
            }
        }
        if !kept.is_empty() {
            frames.push(kept);
        }
    }
    let rest = &text[tok.pos..];
    if !rest.trim().is_empty() {
        return Err(Error::parse(tok.pos + rest.len() - rest.trim_start().len(), "trailing content"));
    }
    let joints = joints.ok_or(Error::EmptySequence)?;
    if NTU_SPINE_INDEX >= joints {
        return Err(Error::contract(format!("{joints} joints leave no spine joint")));
    }
    let subjects = frames.iter().map(Vec::len).max().unwrap_or(0);
    let mut coords = Vec::with_capacity(frames.len() * subjects * joints * 3);
    for bodies in &frames {
        for s in 0..subjects {
            match bodies.get(s) {
                Some(xyz) => coords.extend_from_slice(xyz),
                None => coords.resize(coords.len() + joints * 3, 0.0),
            }
        }
    }
    let sample = RawSkeletonSample {
        frames: frames.len(),
        joints,
        subjects,
        spine_index: NTU_SPINE_INDEX,
        label,
        coords,
    };
    sample.validate()?;
    Ok(sample)
}

/// Zero-based action class from an NTU file name such as
/// `S001C002P003R002A013.skeleton` (action 13, label 12).
pub fn ntu_label_from_name(name: &str) -> Option<usize> {
    let i = name.find('A')?;
    let digits: String = name[i + 1..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse::<usize>().ok().filter(|&a| a >= 1).map(|a| a - 1)
}

pub fn load_ntu_skeleton(path: impl AsRef<Path>) -> Result<RawSkeletonSample> {
    let path = path.as_ref();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let label = ntu_label_from_name(&name)
        .ok_or_else(|| Error::contract(format!("no action code (A###) in file name `{name}`")))?;
    parse_ntu_skeleton(&fs::read_to_string(path)?, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(joints: usize, base: f64) -> String {
        let mut s = String::from("72057594037931101 0 1 1 1 1 0 0.02 -0.2 2\n");
        s.push_str(&format!("{joints}\n"));
        for j in 0..joints {
            let v = base + j as f64;
            s.push_str(&format!("{v} {} {} 250.1 200.2 900.3 500.4 0.1 0.2 0.3 0.4 2\n", v + 0.5, v * 2.0));
        }
        s
    }

    #[test]
    fn parses_frames_and_bodies() {
        let text = format!("3\n1\n{}2\n{}{}0\n", body(3, 0.0), body(3, 10.0), body(3, 20.0));
        let s = parse_ntu_skeleton(&text, 4).unwrap();
        assert_eq!((s.frames, s.joints, s.subjects, s.label), (2, 3, 2, 4));
        assert_eq!(&s.coords[..3], &[0.0, 0.5, 0.0]);
        // Second subject absent in the first frame.
        assert!(s.coords[9..18].iter().all(|&v| v == 0.0));
        assert_eq!(&s.coords[18..21], &[10.0, 10.5, 20.0]);
        assert_eq!(&s.coords[27..30], &[20.0, 20.5, 40.0]);
    }

    #[test]
    fn truncation_reports_offset() {
        let text = format!("2\n1\n{}", body(3, 0.0));
        match parse_ntu_skeleton(&text, 0) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.len()),
            other => panic!("{other:?}"),
        }
        let bad = "1\nx";
        assert!(matches!(parse_ntu_skeleton(bad, 0), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn label_from_file_name() {
        assert_eq!(ntu_label_from_name("S001C002P003R002A013.skeleton"), Some(12));
        assert_eq!(ntu_label_from_name("clip.skeleton"), None);
    }
}
