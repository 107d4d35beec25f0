//! Binary checkpoints: `DIVA`, version, tensor count, then per tensor its
//! name, rank, dims and little-endian f32 values. All integers are u32 LE.

use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DIVA";
pub const FORMAT_VERSION: u32 = 1;
/// Tensor holding the configuration fingerprint of the writer.
pub const FINGERPRINT_TENSOR: &str = "meta.config_fingerprint";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Every store parameter in store order, preceded by the fingerprint.
    pub fn from_store(store: &ParamStore, fingerprint: &str) -> Self {
        let mut tensors = vec![NamedTensor {
            name: FINGERPRINT_TENSOR.into(),
            dims: vec![4],
            values: fingerprint_values(fingerprint).to_vec(),
        }];
        tensors.extend(store.iter().map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            dims: p.tensor.shape().to_vec(),
            values: p.tensor.values().iter().map(|&v| v as f32).collect(),
        }));
        Self {
            version: FORMAT_VERSION,
            tensors,
        }
    }

    pub fn fingerprint(&self) -> Option<&[f32]> {
        self.tensors
            .iter()
            .find(|t| t.name == FINGERPRINT_TENSOR)
            .map(|t| t.values.as_slice())
    }

    /// Overwrites every parameter of `store` with the checkpoint values.
    /// Names, shapes and the fingerprint are all checked before anything is
    /// written, so a failed load leaves `store` untouched.
    pub fn apply_to(&self, store: &mut ParamStore, fingerprint: &str) -> Result<()> {
        match self.fingerprint() {
            Some(f) if f == fingerprint_values(fingerprint) => {}
            Some(_) => {
                return Err(Error::Format(format!(
                "checkpoint was written for a different configuration (expected `{fingerprint}`)"
            )))
            }
            None => {
                return Err(Error::Format(format!(
                    "checkpoint lacks the `{FINGERPRINT_TENSOR}` tensor"
                )))
            }
        }
        let expected = store.names();
        let mut updates = Vec::with_capacity(expected.len());
        for t in self.tensors.iter().filter(|t| t.name != FINGERPRINT_TENSOR) {
            let Some(id) = store.id(&t.name) else {
                return Err(Error::Format(format!(
                    "unknown tensor `{}`; expected names: {}",
                    t.name,
                    expected.join(", ")
                )));
            };
            let shape = store.value(id).shape();
            if shape != t.dims.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` has dims {:?}, expected {shape:?}",
                    t.name, t.dims
                )));
            }
            updates.push((
                id,
                t.values.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>(),
            ));
        }
        if updates.len() != expected.len() {
            let present: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
            let missing: Vec<&String> = expected
                .iter()
                .filter(|n| !present.contains(&n.as_str()))
                .collect();
            return Err(Error::Format(format!(
                "checkpoint is missing tensors: {missing:?}"
            )));
        }
        store.restore(&updates);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut out, self.tensors.len(), "tensor count")?;
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.values.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` has {} values for dims {:?}",
                    t.name,
                    t.values.len(),
                    t.dims
                )));
            }
            put_u32(&mut out, t.name.len(), "name length")?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len(), "rank")?;
            for &d in &t.dims {
                put_u32(&mut out, d, "dimension")?;
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic: found {magic:?}, expected {MAGIC:?} (\"DIVA\")"
            )));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version: found {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims {dims:?} overflow")))?;
            let raw = r.take(n.saturating_mul(4), "tensor values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { version, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// 64-bit FNV-1a hash of the description split into four 16-bit words,
/// each exactly representable as f32.
pub fn fingerprint_values(description: &str) -> [f32; 4] {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in description.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    [0, 16, 32, 48].map(|s| ((h >> s) & 0xffff) as f32)
}

/// Rounds every parameter to f32 precision so an in-memory model equals
/// its reloaded checkpoint.
pub fn round_to_f32(store: &mut ParamStore) {
    for p in store.iter_mut() {
        for v in p.tensor.values_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

fn put_u32(out: &mut Vec<u8>, value: usize, what: &str) -> Result<()> {
    let v = u32::try_from(value)
        .map_err(|_| Error::Format(format!("{what} {value} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "file truncated while reading {what} at byte {} ({} bytes total)",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
