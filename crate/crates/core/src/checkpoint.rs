//! Binary container shared by checkpoints and feature-extractor weights.
//!
//! Layout (little-endian): magic `VXRY`, `u32` version, `u32` section count,
//! then per section: `u32` name length, UTF-8 name, `u8` dtype tag, `u32`
//! rank, `u64` dims, raw values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VXRY";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl SectionData {
    fn tag(&self) -> u8 {
        match self {
            SectionData::F32(_) => 0,
            SectionData::U8(_) => 1,
            SectionData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            SectionData::F32(v) => v.len(),
            SectionData::U8(v) => v.len(),
            SectionData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: SectionData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: SectionData) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let s = Section { name, shape, data };
        match self.sections.iter_mut().find(|x| x.name == s.name) {
            Some(slot) => *slot = s,
            None => self.sections.push(s),
        }
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.put(name, t.shape().to_vec(), SectionData::F32(t.data().to_vec()));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        let n = bytes.len();
        self.put(name, vec![n], SectionData::U8(bytes));
    }

    pub fn put_params(&mut self, params: &ParamSet<f32>) {
        for (name, t) in params.iter() {
            self.put_tensor(name, t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name).ok_or_else(|| Error::MissingSection(name.into()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::F32(v) => Tensor::new(s.shape.clone(), v.clone()),
            _ => Err(Error::InvalidArgument(format!("section `{name}` is not f32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.data {
            SectionData::U8(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("section `{name}` is not bytes"))),
        }
    }

    /// Every section whose name starts with `prefix`, in file order.
    pub fn params_with_prefix(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        for s in self.sections.iter().filter(|s| s.name.starts_with(prefix)) {
            p.insert(s.name.clone(), self.tensor(&s.name)?);
        }
        Ok(p)
    }

    /// Loads the named tensors of `template` from this container.
    pub fn params_like(&self, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        for (name, t) in template.iter() {
            let v = self.tensor(name)?;
            if v.shape() != t.shape() {
                return Err(Error::shape("checkpoint", format!("section `{name}` has shape {:?}, expected {:?}", v.shape(), t.shape())));
            }
            p.insert(name, v);
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.data.tag());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for d in &s.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &s.data {
                SectionData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                SectionData::U8(v) => out.extend_from_slice(v),
                SectionData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Truncated("section name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| Error::Truncated(format!("section `{name}` is too large")))?;
            let data = match tag {
                0 => SectionData::F32(r.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(name.clone()))?)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => SectionData::U8(r.take(n)?.to_vec()),
                2 => SectionData::U64(r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(name.clone()))?)?.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
                t => return Err(Error::Truncated(format!("section `{name}` has unknown dtype tag {t}"))),
            };
            c.sections.push(Section { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Truncated("trailing bytes after last section".into()));
        }
        Ok(c)
    }

    /// Atomic write: temporary file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
        ));
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.put_tensor("w", &Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 1.0));
        c.put_bytes("config", b"{}".to_vec());
        c.put("state", vec![4], SectionData::U64(vec![1, 2, 3, u64::MAX]));
        c
    }

    #[test]
    fn roundtrip_and_idempotent_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        sample().save(&a).unwrap();
        let loaded = Container::load(&a).unwrap();
        assert_eq!(loaded, sample());
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Container::from_bytes(&bad).unwrap_err().to_string(), "not a checkpoint");
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(Container::from_bytes(&v2), Err(Error::CheckpointVersion { found: 9, .. })));
        for cut in [5, 12, 30, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }
}
