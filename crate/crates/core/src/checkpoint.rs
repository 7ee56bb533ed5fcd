//! Binary parameter files: `MDET1`, then per tensor `u32` name length, name,
//! `u8` dtype, `u32` rank, `u64` dims and little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 5] = b"MDET1";

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + store.scalar_count() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                Some(record),
                "truncated checkpoint",
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: usize) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, record)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, record: usize) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, record)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes a checkpoint into a store of the requested precision.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, None, "missing MDET1 header"));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let mut store = ParamStore::new();
    let mut record = 0;
    while cur.pos < bytes.len() {
        let name_len = cur.u32(record)? as usize;
        let name = std::str::from_utf8(cur.take(name_len, record)?)
            .map_err(|_| Error::format(path, Some(record), "name is not UTF-8"))?
            .to_string();
        let code = cur.take(1, record)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| {
            Error::format(path, Some(record), format!("unknown dtype code {code}"))
        })?;
        let rank = cur.u32(record)? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64(record).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => cur
                .take(4 * len, record)?
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => cur
                .take(8 * len, record)?
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(path, Some(record), e.to_string()))?;
        store.add(name, tensor);
        record += 1;
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies values from `loaded` into `target` by name, checking shapes.
pub fn restore_into<T: Real>(
    target: &mut ParamStore<T>,
    loaded: &ParamStore<T>,
    path: &Path,
) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::format(
            path,
            None,
            format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                target.len()
            ),
        ));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::format(path, None, format!("missing tensor {name}")))?;
        let value = loaded.get(src);
        if value.shape() != target.get(id).shape() {
            return Err(Error::format(
                path,
                None,
                format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    target.get(id).shape()
                ),
            ));
        }
        target.set(id, value.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0),
        );
        s.add("b", Tensor::scalar(3.25f32));
        s
    }

    #[test]
    fn save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mdet");
        save(&store(), &path).unwrap();
        let loaded: ParamStore<f32> = load(&path).unwrap();
        assert_eq!(encode(&loaded), std::fs::read(&path).unwrap());
        assert_eq!(
            loaded.get(loaded.find("a.weight").unwrap()).shape(),
            &[2, 3]
        );
    }

    #[test]
    fn layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..5], b"MDET1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 8);
        assert_eq!(&bytes[9..17], b"a.weight");
        assert_eq!(bytes[17], 0);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 2);
    }

    #[test]
    fn f64_checkpoints() {
        let s: ParamStore<f64> = store().cast();
        let bytes = encode(&s);
        let back: ParamStore<f64> = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_file() {
        let bytes = encode(&store());
        let err = decode::<f32>(&bytes[..bytes.len() - 2], Path::new("x")).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                record: Some(1),
                ..
            }
        ));
        assert!(decode::<f32>(b"NOPE", Path::new("x")).is_err());
    }
}
