//! `AUKAI-CKPT/1` binary checkpoints.
//!
//! Layout (all integers little-endian): the magic string, a `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` × `u64` dims and the `f64` payload. Tensors are written in name
//! order. Two reserved tensors carry metadata as four 16-bit limbs each:
//! `@step` and `@config_hash`. Polyak target tensors are stored under
//! `target/`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParameterSet;

pub const MAGIC: &[u8] = b"AUKAI-CKPT/1";
const STEP_KEY: &str = "@step";
const HASH_KEY: &str = "@config_hash";
const TARGET_PREFIX: &str = "target/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub params: ParameterSet,
    pub target: ParameterSet,
}

fn limbs(v: u64) -> Tensor {
    let data = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect();
    Tensor::new(vec![4], data).expect("four limbs")
}

fn from_limbs(t: &Tensor, key: &str) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Checkpoint(format!("{key} must have shape [4]")));
    }
    let mut v = 0u64;
    for (i, &x) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&x) || x.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("{key} limb {i} is not a 16-bit integer")));
        }
        v |= (x as u64) << (16 * i);
    }
    Ok(v)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    fn all_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut all = BTreeMap::new();
        for (n, t) in self.params.iter() {
            all.insert(n.clone(), t.clone());
        }
        for (n, t) in self.target.iter() {
            all.insert(format!("{TARGET_PREFIX}{n}"), t.clone());
        }
        all.insert(STEP_KEY.into(), limbs(self.step));
        all.insert(HASH_KEY.into(), limbs(self.config_hash));
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let all = self.all_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in &all {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if !buf.starts_with(MAGIC) {
            return Err(Error::Checkpoint("bad magic; not an AUKAI-CKPT/1 file".into()));
        }
        let mut r = Reader { buf, pos: MAGIC.len() };
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        let mut target = BTreeMap::new();
        let (mut step, mut hash) = (None, None);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.as_str() {
                STEP_KEY => step = Some(from_limbs(&t, STEP_KEY)?),
                HASH_KEY => hash = Some(from_limbs(&t, HASH_KEY)?),
                _ => {
                    let (map, key) = match name.strip_prefix(TARGET_PREFIX) {
                        Some(rest) => (&mut target, rest.to_string()),
                        None => (&mut params, name.clone()),
                    };
                    if map.insert(key, t).is_some() {
                        return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                    }
                }
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            step: step.ok_or_else(|| Error::Checkpoint("missing @step".into()))?,
            config_hash: hash.ok_or_else(|| Error::Checkpoint("missing @config_hash".into()))?,
            params: ParameterSet::from_map(params),
            target: ParameterSet::from_map(target),
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `Some(warning)` when the stored config hash differs from `expected`.
    pub fn hash_warning(&self, expected: u64) -> Option<String> {
        (self.config_hash != expected).then(|| {
            format!(
                "checkpoint config hash {:016x} differs from current config {:016x}; loading because shapes match",
                self.config_hash, expected
            )
        })
    }
}
