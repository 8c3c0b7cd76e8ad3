//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic   8 bytes  "ATXCKPT\0"
//! version u32
//! header  u64 length + UTF-8 JSON
//! count   u32
//! count × { name: u32 length + UTF-8, rank: u32, dims: rank × u64, data: numel × f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"ATXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, tensors: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ParamSet)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = c.len()?;
    let header: H = serde_json::from_slice(c.take(header_len)?)?;
    let count = c.u32()?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = c.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((header, tensors))
}

/// Written to a sibling temporary file first, then renamed into place.
pub fn save<H: Serialize>(path: impl AsRef<Path>, header: &H, tensors: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(header, tensors)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, ParamSet)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn sample() -> ParamSet {
        let mut rng = SeedStream::new(1).fork("ckpt");
        let mut p = ParamSet::new();
        p.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        p.insert("b/c", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e308]))
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let header = serde_json::json!({"epoch": 3, "note": "ok"});
        save(&path, &header, &sample()).unwrap();
        let (h, t): (serde_json::Value, ParamSet) = load(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(t.names(), sample().names());
        for (a, b) in t.tensors().iter().zip(sample().tensors()) {
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&1u32, &sample()).unwrap();
        assert!(decode::<u32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<u32>(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode::<u32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<u32>(&extra).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_survive(values in proptest::collection::vec(proptest::num::f64::ANY, 1..50)) {
            let mut p = ParamSet::new();
            let n = values.len();
            p.insert("v", Tensor::from_parts(vec![n], values.clone())).unwrap();
            let (_, back): ((), ParamSet) = decode(&encode(&(), &p).unwrap()).unwrap();
            let got: Vec<u64> = back.get("v").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
