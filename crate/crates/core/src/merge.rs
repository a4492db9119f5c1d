//! Two-checkpoint interpolation over named parameter tensors.
//!
//! `alpha` weighs the first checkpoint: `alpha = 1` returns `a`, `alpha = 0`
//! returns `b`. SLERP works per tensor, with the angle taken between the
//! flattened tensors.
//!
//! File formats. Binary (`.pmap`), all integers little-endian:
//!
//! ```text
//! magic   b"PMAP"
//! u32     version (1)
//! u32     entry count
//! per entry, in name order:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then rank x u64 dims
//! then every entry's values in the same order, as f32
//! ```
//!
//! Text: one entry per line, `name<TAB>d1xd2x...<TAB>v1 v2 ...`, values
//! printed with full f64 precision. `#` starts a comment line. A scalar
//! has the empty shape.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PMAP";
const VERSION: u32 = 1;
pub const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("entry {name:?}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("entry {0:?} is a zero vector, its direction is undefined")]
    ZeroVector(String),
    #[error("entry {0:?}: tensors point in opposite directions, the interpolation plane is undefined")]
    Antipodal(String),
    #[error("alpha={0} is outside [0, 1]")]
    BadAlpha(f64),
    #[error("entry {name:?}: shape {shape:?} holds {expected} values, got {actual}")]
    BadTensor {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, MergeError> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(MergeError::BadTensor {
                name: String::new(),
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub entries: BTreeMap<String, Tensor>,
}

impl ParamMap {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn check_mergeable(&self, other: &ParamMap) -> Result<(), MergeError> {
        for name in self.entries.keys().chain(other.entries.keys()) {
            let (Some(a), Some(b)) = (self.entries.get(name), other.entries.get(name)) else {
                return Err(MergeError::ShapeMismatch {
                    name: name.clone(),
                    detail: "present in only one checkpoint".into(),
                });
            };
            if a.shape != b.shape {
                return Err(MergeError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?} vs {:?}", a.shape, b.shape),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Lerp,
    Slerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub alpha: f64,
}

impl MergeSpec {
    pub fn new(method: MergeMethod, alpha: f64) -> Result<Self, MergeError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(MergeError::BadAlpha(alpha));
        }
        Ok(MergeSpec { method, alpha })
    }
}

fn lerp_values(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect()
}

fn slerp_values(name: &str, a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>, MergeError> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MergeError::ZeroVector(name.to_string()));
    }
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    if omega < SMALL_ANGLE {
        return Ok(lerp_values(a, b, alpha));
    }
    if std::f64::consts::PI - omega < SMALL_ANGLE {
        return Err(MergeError::Antipodal(name.to_string()));
    }
    let sin_omega = omega.sin();
    let wa = (alpha * omega).sin() / sin_omega;
    let wb = ((1.0 - alpha) * omega).sin() / sin_omega;
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

fn interpolate<F>(a: &ParamMap, b: &ParamMap, alpha: f64, f: F) -> Result<ParamMap, MergeError>
where
    F: Fn(&str, &[f64], &[f64]) -> Result<Vec<f64>, MergeError> + Sync,
{
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MergeError::BadAlpha(alpha));
    }
    a.check_mergeable(b)?;
    let entries = a
        .entries
        .par_iter()
        .map(|(name, ta)| {
            let tb = &b.entries[name];
            let values = f(name, &ta.values, &tb.values)?;
            Ok((
                name.clone(),
                Tensor {
                    shape: ta.shape.clone(),
                    values,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>, MergeError>>()?;
    Ok(ParamMap { entries })
}

/// `alpha * a + (1 - alpha) * b`, element-wise.
pub fn lerp(a: &ParamMap, b: &ParamMap, alpha: f64) -> Result<ParamMap, MergeError> {
    interpolate(a, b, alpha, |_, x, y| Ok(lerp_values(x, y, alpha)))
}

/// Spherical interpolation per tensor:
/// `[sin(alpha·Ω)·a + sin((1 - alpha)·Ω)·b] / sin Ω`, Ω the angle between
/// `a` and `b`. Falls back to [`lerp`] when Ω is below [`SMALL_ANGLE`].
pub fn slerp(a: &ParamMap, b: &ParamMap, alpha: f64) -> Result<ParamMap, MergeError> {
    interpolate(a, b, alpha, |name, x, y| slerp_values(name, x, y, alpha))
}

pub fn merge(a: &ParamMap, b: &ParamMap, spec: &MergeSpec) -> Result<ParamMap, MergeError> {
    match spec.method {
        MergeMethod::Lerp => lerp(a, b, spec.alpha),
        MergeMethod::Slerp => slerp(a, b, spec.alpha),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, MergeError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, MergeError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Values are narrowed to f32.
pub fn write_binary<W: Write>(mut w: W, map: &ParamMap) -> Result<(), MergeError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(map.entries.len() as u32).to_le_bytes())?;
    for (name, t) in &map.entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
    }
    for t in map.entries.values() {
        for v in &t.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<ParamMap, MergeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MergeError::Format("missing PMAP magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(MergeError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| MergeError::Format("entry name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let mut map = ParamMap::default();
    for (name, shape) in table {
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        if map.entries.insert(name.clone(), Tensor { shape, values }).is_some() {
            return Err(MergeError::Format(format!("duplicate entry {name:?}")));
        }
    }
    Ok(map)
}

pub fn write_text<W: Write>(mut w: W, map: &ParamMap) -> Result<(), MergeError> {
    for (name, t) in &map.entries {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        let values: Vec<String> = t.values.iter().map(f64::to_string).collect();
        writeln!(w, "{name}\t{}\t{}", shape.join("x"), values.join(" "))?;
    }
    Ok(())
}

pub fn read_text<R: Read>(mut r: R) -> Result<ParamMap, MergeError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut map = ParamMap::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| MergeError::Format(format!("line {}: {what}", i + 1));
        let mut parts = line.split('\t');
        let (Some(name), Some(shape), values) = (parts.next(), parts.next(), parts.next().unwrap_or("")) else {
            return Err(bad("expected name<TAB>shape<TAB>values"));
        };
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                .collect::<Result<Vec<_>, _>>()?
        };
        let values = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| match e {
            MergeError::BadTensor {
                shape,
                expected,
                actual,
                ..
            } => MergeError::BadTensor {
                name: name.to_string(),
                shape,
                expected,
                actual,
            },
            other => other,
        })?;
        if map.entries.insert(name.to_string(), tensor).is_some() {
            return Err(bad("duplicate entry"));
        }
    }
    Ok(map)
}

/// Read either format, sniffing the binary magic.
pub fn read_any(bytes: &[u8]) -> Result<ParamMap, MergeError> {
    if bytes.starts_with(MAGIC) {
        read_binary(bytes)
    } else {
        read_text(bytes)
    }
}
