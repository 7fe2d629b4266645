//! LWMC checkpoint files: a step counter plus named f32 tensors.

use std::collections::HashSet;
use std::path::Path;

use crate::bytes::{checked_product, ByteReader, ByteWriter};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::ParamSet;

pub const LWMC_MAGIC: &[u8; 4] = b"LWMC";
pub const LWMC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape(format!(
                "tensor {name} with dims {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f32>) -> Self {
        let dims = vec![data.len()];
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::TensorMismatch {
            missing: vec![name.to_string()],
            extra: Vec::new(),
        })
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Appends every tensor of `ps`, with names prefixed by `prefix`.
    pub fn push_params(&mut self, ps: &ParamSet, values: &[f32], prefix: &str) {
        for s in ps.specs() {
            self.tensors.push(Tensor {
                name: format!("{prefix}{}", s.name),
                dims: s.dims.clone(),
                data: values[s.range()].to_vec(),
            });
        }
    }

    /// Reads the tensors named after `ps` (plus `prefix`) into `out`.
    /// Every expected tensor must be present with matching dims.
    pub fn read_params(&self, ps: &ParamSet, prefix: &str, out: &mut [f32]) -> Result<()> {
        let mut missing = Vec::new();
        for s in ps.specs() {
            let name = format!("{prefix}{}", s.name);
            match self.get(&name) {
                Some(t) if t.dims == s.dims => out[s.range()].copy_from_slice(&t.data),
                Some(t) => {
                    return Err(shape(format!(
                        "tensor {name} has dims {:?}, model expects {:?}",
                        t.dims, s.dims
                    )))
                }
                None => missing.push(name),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::TensorMismatch {
                missing,
                extra: Vec::new(),
            })
        }
    }

    /// Checks that the tensors under `prefixes` are exactly the ones named
    /// in `expected`, listing both directions of any difference.
    pub fn check_names(&self, expected: &[String], prefixes: &[&str]) -> Result<()> {
        let want: HashSet<&str> = expected.iter().map(String::as_str).collect();
        let have: HashSet<&str> = self
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        let mut missing: Vec<String> = want.difference(&have).map(|s| s.to_string()).collect();
        let mut extra: Vec<String> = have.difference(&want).map(|s| s.to_string()).collect();
        if missing.is_empty() && extra.is_empty() {
            return Ok(());
        }
        missing.sort();
        extra.sort();
        Err(Error::TensorMismatch { missing, extra })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(16 + self.num_values() * 4);
        w.bytes(LWMC_MAGIC);
        w.u32(LWMC_VERSION);
        w.u64(self.step);
        w.u32(u32::try_from(self.tensors.len()).map_err(|_| invalid("too many tensors"))?);
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(invalid(format!("duplicate tensor name {}", t.name)));
            }
            let name = t.name.as_bytes();
            w.u16(u16::try_from(name.len()).map_err(|_| invalid("tensor name too long"))?);
            w.bytes(name);
            w.u8(u8::try_from(t.dims.len()).map_err(|_| invalid("too many tensor dims"))?);
            for &d in &t.dims {
                w.u32(u32::try_from(d).map_err(|_| {
                    Error::DimensionOverflow(format!("tensor {} dim {d}", t.name))
                })?);
            }
            w.f32s(&t.data);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "LWMC");
        r.magic(LWMC_MAGIC)?;
        let version = r.u32()?;
        if version != LWMC_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: LWMC_VERSION,
            });
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| invalid("tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(invalid(format!("duplicate tensor name {name}")));
            }
            let ndims = r.u8()? as usize;
            let dims = (0..ndims)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = checked_product(&dims, "LWMC tensor")?;
            let data = r.f32s(n)?;
            tensors.push(Tensor { name, dims, data });
        }
        r.finish()?;
        Ok(Self { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::at_path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Save followed by load.
pub fn checkpoint_roundtrip(ckpt: &Checkpoint, path: &Path) -> Result<Checkpoint> {
    ckpt.save(path)?;
    Checkpoint::load(path)
}

/// Recovers a config value stored as f32, snapping to the shortest decimal
/// that prints the same (so 0.01 comes back as exactly 0.01).
pub(crate) fn meta_f64(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

pub(crate) fn meta_usize(v: f32, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(invalid(format!("checkpoint metadata {what} is not a count: {v}")))
    }
}
