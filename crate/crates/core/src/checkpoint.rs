//! Versioned binary container: magic, version, JSON config, named tensors.
//!
//! Layout (little-endian): `b"CQRS"`, `u32` version, `u64` store seed,
//! `u64` config length + JSON bytes, `u32` tensor count, then per tensor
//! `u32` name length + UTF-8 name, `u8` dtype (0 = f64), `u8` trainable,
//! `u32` rank, `u64` extents, payload.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ctxsql_autograd::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CQRS";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_checkpoint(params: &ParamStore, config: &serde_json::Value) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed().to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("JSON values always serialize");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if (n as u64) > remaining {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = Reader(Cursor::new(bytes));
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint or unsupported version".into()));
    }
    r.bytes(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let seed = r.u64()?;
    let cfg_len = r.len()?;
    let cfg = r.bytes(cfg_len)?;
    let config: serde_json::Value =
        serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name =
            String::from_utf8(r.bytes(name_len)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {dtype}")));
        }
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        store
            .insert(&name, t, trainable)
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    }
    if r.0.position() as usize != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((store, config))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore, config: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::test_runner::{Config, RngSeed};

    fn store(seed: u64, shapes: &[(usize, usize)]) -> ParamStore {
        let mut s = ParamStore::new(seed);
        for (i, &(r, c)) in shapes.iter().enumerate() {
            s.init_uniform(&format!("p{i}"), &[r, c]).unwrap();
        }
        if !shapes.is_empty() {
            s.set_trainable("p0", false).unwrap();
        }
        s
    }

    proptest! {
        #![proptest_config(Config {
            cases: 64,
            rng_seed: RngSeed::Fixed(11),
            failure_persistence: None,
            ..Config::default()
        })]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), shapes in prop::collection::vec((1usize..5, 1usize..5), 0..6)) {
            let s = store(seed, &shapes);
            let cfg = serde_json::json!({"seed": seed, "n": shapes.len()});
            let (back, cfg_back) = decode_checkpoint(&encode_checkpoint(&s, &cfg)).unwrap();
            prop_assert_eq!(cfg_back, cfg);
            prop_assert_eq!(back.seed(), s.seed());
            prop_assert_eq!(back.len(), s.len());
            for ((n1, p1), (n2, p2)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(p1.trainable, p2.trainable);
                prop_assert_eq!(p1.value.shape(), p2.value.shape());
                let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&p1.value), bits(&p2.value));
            }
        }
    }

    #[test]
    fn corrupt_magic_and_truncation_are_rejected() {
        let s = store(1, &[(2, 3)]);
        let mut bytes = encode_checkpoint(&s, &serde_json::json!({}));
        let cut = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(cut.to_string().contains("truncated"), "{cut}");
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let s = store(1, &[(1, 1)]);
        let mut bytes = encode_checkpoint(&s, &serde_json::json!({}));
        bytes[4] = 9;
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version"));
    }
}
