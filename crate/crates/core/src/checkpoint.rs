//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   6 bytes  "CGVRG1"
//! count   u32      number of parameter entries
//! step    u64      optimizer step counter
//! entry*  count times, sorted by parameter path:
//!   name_len u32, name utf-8 bytes
//!   ndim     u32, dims u32 * ndim
//!   flags    u8   bit 0: Adam moments present
//!   data     f32 * numel
//!   m, v     f32 * numel each, if flags bit 0
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const MAGIC: &[u8; 6] = b"CGVRG1";

pub fn save(path: &Path, params: &Parameters<f32>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    buf.extend_from_slice(&params.step_count().to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(1u8);
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.m {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.v {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Parameters<f32>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::MissingPrerequisite(format!("checkpoint {}: {e}", path.display()))
    })?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic = r.take(6)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let count = r.u32()? as usize;
    let step = r.u64()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid parameter name: {e}")))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let flags = r.u8()?;
        let data = r.f32s(numel)?;
        params.insert(&name, &shape, data);
        if flags & 1 != 0 {
            let m = r.f32s(numel)?;
            let v = r.f32s(numel)?;
            let p = params.get_mut(&name);
            p.m = m;
            p.v = v;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    params.set_step(step);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::AdamConfig;

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let mut params: Parameters<f32> = Parameters::new();
        params.insert("mil/ff/w", &[2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        params.insert("mil/ff/b", &[3], vec![0.0, 0.25, -1.5]);
        params.get_mut("mil/ff/w").grad.iter_mut().for_each(|g| *g = 1.0);
        params.adam_step(&AdamConfig::default());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save(&path, &params).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.step_count(), 1);
        for (name, p) in params.iter() {
            let q = loaded.get(name);
            assert_eq!(p.shape, q.shape);
            assert_eq!(p.data, q.data);
            assert_eq!(p.m, q.m);
            assert_eq!(p.v, q.v);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTCKPT123").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_a_prerequisite_error() {
        let err = load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)));
    }
}
