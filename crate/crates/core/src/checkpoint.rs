//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `b"OMCKPT01" | version u32 | digest str | epoch u32 | step u64 | rng blob |
//! architecture (JSON str) | n u32 | n × param | has_velocity u8 | [n × f-buffer]`
//! where `str`/`blob` are `u32 length | bytes` and a param is
//! `name str | ndim u32 | dims u32… | dtype u8 | data`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier, Param};
use crate::tensor::{DType, Real};

pub const MAGIC: &[u8; 8] = b"OMCKPT01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub architecture: Architecture,
    pub parameters: Vec<Param<T>>,
    /// Optimizer momentum buffers, aligned with `parameters`.
    pub velocity: Option<Vec<Vec<T>>>,
    pub config_digest: String,
    /// Completed epochs.
    pub epoch: u32,
    pub step: u64,
    /// Opaque; the trainer stores its seeds here.
    pub rng_state: Vec<u8>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Classifier<T>, config_digest: &str) -> Self {
        Self {
            architecture: model.arch().clone(),
            parameters: model.params().to_vec(),
            velocity: None,
            config_digest: config_digest.to_string(),
            epoch: 0,
            step: 0,
            rng_state: Vec::new(),
        }
    }

    pub fn model(&self) -> Result<Classifier<T>> {
        Classifier::from_parts(self.architecture.clone(), self.parameters.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut w, self.config_digest.as_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut w, &self.rng_state);
        let arch = serde_json::to_vec(&self.architecture).expect("architecture serializes");
        put_bytes(&mut w, &arch);
        w.extend_from_slice(&(self.parameters.len() as u32).to_le_bytes());
        for p in &self.parameters {
            put_bytes(&mut w, p.name.as_bytes());
            w.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            w.push(dtype_tag(T::DTYPE));
            w.extend_from_slice(&T::to_le_bytes_vec(&p.data));
        }
        match &self.velocity {
            None => w.push(0),
            Some(v) => {
                w.push(1);
                for buf in v {
                    put_bytes(&mut w, &T::to_le_bytes_vec(buf));
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let config_digest = r.string()?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let rng_state = r.blob()?.to_vec();
        let architecture: Architecture =
            serde_json::from_slice(r.blob()?).map_err(|e| r.error(&format!("architecture: {e}")))?;
        let n = r.u32()? as usize;
        let mut parameters = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let dtype = r.u8()?;
            if dtype != dtype_tag(T::DTYPE) {
                return Err(r.error(&format!("parameter {name}: dtype tag {dtype} does not match")));
            }
            let count: usize = shape.iter().product();
            let data = T::from_le_bytes_slice(r.take(count * T::DTYPE.size())?);
            parameters.push(Param { name, shape, data });
        }
        let velocity = match r.u8()? {
            0 => None,
            _ => Some(
                (0..n)
                    .map(|_| r.blob().map(T::from_le_bytes_slice))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            architecture,
            parameters,
            velocity,
            config_digest,
            epoch,
            step,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u32).to_le_bytes());
    w.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Decode {
            path: self.origin.to_path_buf(),
            message: format!("{message} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.blob()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_reference_cnn;
    use crate::tensor::ImageShape;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_reference_cnn(6, 16, ImageShape::new(16, 16, 1), 3).unwrap();
        let mut ck = Checkpoint::from_model(&m, "abc123");
        ck.epoch = 9;
        ck.step = 1234;
        ck.rng_state = vec![1, 2, 3];
        ck.velocity = Some(m.zero_grads());
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let restored = back.model().unwrap();
        for (a, b) in m.params().iter().zip(restored.params()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let m = build_reference_cnn(3, 8, ImageShape::new(16, 16, 1), 3).unwrap();
        let bytes = Checkpoint::from_model(&m, "d").to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"OMDX0001", Path::new("x")).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
