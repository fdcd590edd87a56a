//! The NTU RGB+D `.skeleton` text format.
//!
//! ```text
//! frameCount
//! per frame:  bodyCount
//!   per body: bodyID clippedEdges handLeftConfidence handLeftState
//!             handRightConfidence handRightState isRestricted leanX leanY trackingState
//!             jointCount
//!             per joint: x y z depthX depthY colorX colorY
//!                        orientationW orientationX orientationY orientationZ trackingState
//! ```
//!
//! Only the camera-space `x y z` of each joint is kept.

use std::fmt::Write as _;

use super::{Body, RawSkeletonSample, SampleMeta, NTU_JOINTS, NUCLA_JOINTS};
use crate::error::{Error, Result};

const BODY_META_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-blank line split into tokens, with its 1-based line number.
    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((i + 1, tokens));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let (line, tokens) = self.next(what)?;
        if tokens.len() != 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected a single {what}, found {} fields", tokens.len()),
            });
        }
        tokens[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("{what} `{}` is not a non-negative integer", tokens[0]),
        })
    }
}

fn number(token: &str, line: usize) -> Result<f64> {
    token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric token `{token}`"),
    })
}

/// Parses the text of an NTU `.skeleton` file. Label and metadata are left
/// at their defaults; see [`parse_ntu_filename`].
pub fn parse_ntu_skeleton(text: &str) -> Result<RawSkeletonSample> {
    let mut lines = Lines::new(text);
    let frame_count = lines.count("frame count")?;
    let mut joints_per_body: Option<usize> = None;
    let mut frames = Vec::with_capacity(frame_count);
    for f in 0..frame_count {
        let body_count = lines.count(&format!("body count of frame {} of {frame_count}", f + 1))?;
        let mut bodies = Vec::with_capacity(body_count);
        for _ in 0..body_count {
            let (line, meta) = lines.next("body metadata")?;
            if meta.len() != BODY_META_FIELDS {
                return Err(Error::Parse {
                    line,
                    message: format!("body metadata has {} fields, expected {BODY_META_FIELDS}", meta.len()),
                });
            }
            for token in &meta[1..] {
                number(token, line)?;
            }
            let joint_count = lines.count("joint count")?;
            if joint_count != NTU_JOINTS && joint_count != NUCLA_JOINTS {
                return Err(Error::Parse {
                    line: lines.last,
                    message: format!("unsupported joint count {joint_count}"),
                });
            }
            if let Some(expected) = joints_per_body {
                if expected != joint_count {
                    return Err(Error::Parse {
                        line: lines.last,
                        message: format!("joint count {joint_count} differs from earlier bodies ({expected})"),
                    });
                }
            }
            joints_per_body = Some(joint_count);
            let mut joints = Vec::with_capacity(joint_count);
            for j in 0..joint_count {
                let (line, fields) = lines.next(&format!("joint {} of {joint_count}", j + 1))?;
                if fields.len() != JOINT_FIELDS {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "joint {} of {joint_count} has {} fields, expected {JOINT_FIELDS}",
                            j + 1,
                            fields.len()
                        ),
                    });
                }
                let mut xyz = [0.0; 3];
                for (k, token) in fields.iter().enumerate() {
                    let v = number(token, line)?;
                    if k < 3 {
                        xyz[k] = v;
                    }
                }
                joints.push(xyz);
            }
            bodies.push(Body { joints });
        }
        frames.push(bodies);
    }
    if frames.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "frame count must be at least 1".into(),
        });
    }
    Ok(RawSkeletonSample {
        frames,
        joints_per_body: joints_per_body.unwrap_or(NTU_JOINTS),
        label: 0,
        meta: SampleMeta::default(),
    })
}

/// Writes a sample in the `.skeleton` grammar. Discarded fields are written
/// as zeros; coordinates use the shortest exact decimal form.
pub fn write_ntu_skeleton(sample: &RawSkeletonSample) -> String {
    let mut out = String::new();
    writeln!(out, "{}", sample.frames.len()).unwrap();
    for frame in &sample.frames {
        writeln!(out, "{}", frame.len()).unwrap();
        for (b, body) in frame.iter().enumerate() {
            writeln!(out, "{} 0 0 0 0 0 0 0 0 2", 72057594037931101u64 + b as u64).unwrap();
            writeln!(out, "{}", body.joints.len()).unwrap();
            for [x, y, z] in &body.joints {
                writeln!(out, "{x:?} {y:?} {z:?} 0 0 0 0 0 0 0 0 2").unwrap();
            }
        }
    }
    out
}

/// Parses `SsssCcccPpppRrrrAaaa` (with any extension) into metadata and a
/// 0-based action label.
pub fn parse_ntu_filename(name: &str) -> Result<(SampleMeta, usize)> {
    let stem = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = stem.split('.').next().unwrap_or(stem);
    let bad = || Error::contract(format!("`{name}` does not match SsssCcccPpppRrrrAaaa"));
    let bytes = stem.as_bytes();
    if bytes.len() != 20 {
        return Err(bad());
    }
    let mut fields = [0u32; 5];
    for (k, tag) in [b'S', b'C', b'P', b'R', b'A'].iter().enumerate() {
        let chunk = &stem[k * 4..k * 4 + 4];
        if chunk.as_bytes()[0].to_ascii_uppercase() != *tag {
            return Err(bad());
        }
        fields[k] = chunk[1..].parse().map_err(|_| bad())?;
    }
    if fields[4] == 0 {
        return Err(bad());
    }
    let meta = SampleMeta {
        setup: Some(fields[0]),
        camera: Some(fields[1]),
        subject: Some(fields[2]),
        replication: Some(fields[3]),
    };
    Ok((meta, fields[4] as usize - 1))
}
