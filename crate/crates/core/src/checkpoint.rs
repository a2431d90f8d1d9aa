//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes   "DSPN"
//! version      u32 LE    currently 1
//! count        u64 LE    number of parameters
//! per parameter, in name order:
//!   name_len   u64 LE
//!   name       name_len bytes of UTF-8
//!   rank       u64 LE
//!   extents    rank × u64 LE
//!   values     product(extents) × f64 LE
//! config_len   u64 LE
//! config       config_len bytes of UTF-8 JSON (the run configuration)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{bail, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSPN";
pub const VERSION: u32 = 1;

// Guards against absurd allocations from corrupt headers.
const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    /// Run configuration as JSON text.
    pub config: String,
}

impl Checkpoint {
    /// The configuration the checkpoint was trained under.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_json_str(&self.config)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "bad checkpoint magic {magic:?}");
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let count = read_u64(r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = read_u64(r)?;
            if len > MAX_NAME_LEN {
                bail!(Format, "parameter name length {len} too large");
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| crate::Error::Format(e.to_string()))?;
            let rank = read_u64(r)?;
            if rank > MAX_RANK {
                bail!(Format, "rank {rank} too large");
            }
            let shape = (0..rank).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(r)?);
            }
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        let len = read_u64(r)?;
        let mut config = Vec::new();
        r.take(len).read_to_end(&mut config)?;
        if config.len() as u64 != len {
            bail!(Format, "truncated configuration block");
        }
        let config = String::from_utf8(config).map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(Self { params, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap()).unwrap();
        params.insert("b", Tensor::new(&[0, 4], vec![]).unwrap()).unwrap();
        Checkpoint { params, config: "{\"x\":1}".into() }
    }

    #[test]
    fn layout_starts_with_header() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DSPN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        // first record: name length 8, "a.weight"
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 8);
        assert_eq!(&buf[24..32], b"a.weight");
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
                                   config in "[ -~]{0,40}") {
            let mut params = ParamSet::new();
            params.insert("p", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
            let ck = Checkpoint { params, config };
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            let mut buf2 = Vec::new();
            back.write_to(&mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
            prop_assert!(back.params.get("p").unwrap().bitwise_eq(ck.params.get("p").unwrap()));
        }
    }
}
