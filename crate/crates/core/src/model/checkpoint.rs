//! Binary checkpoint: `GSLC`, a version byte, a little-endian `u32`
//! parameter count, then per parameter a `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims and `f64` values, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Encoder, ModelError, Param};
use crate::diffcore::DenseArray;

const MAGIC: &[u8; 4] = b"GSLC";
const VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(enc: &Encoder, mut w: W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(enc.params().len() as u32).to_le_bytes())?;
    for p in enc.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| ModelError::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Sanity bound on any single length field, to fail fast on garbage input.
const MAX_LEN: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Encoder, ModelError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let [version] = read_array::<1, _>(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut params = Vec::with_capacity(count.min(64) as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1024 {
            return Err(ModelError::Checkpoint(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| ModelError::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        if ndim > 8 {
            return Err(ModelError::Checkpoint(format!("rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut n: u64 = 1;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(read_array(&mut r)?);
            n = n.saturating_mul(d);
            shape.push(d as usize);
        }
        if n > MAX_LEN {
            return Err(ModelError::Checkpoint(format!("{name} has {n} values")));
        }
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let value = DenseArray::new(shape, data)?;
        params.push(Param { name, value });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Encoder::from_params(params)
}

pub fn save_checkpoint(enc: &Encoder, path: &Path) -> Result<(), ModelError> {
    write_checkpoint(enc, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn enc() -> Encoder {
        let cfg = EncoderConfig {
            input_dim: 7,
            hidden: 5,
            embed_dim: 4,
            proj_dim: 3,
        };
        let mut e = Encoder::new(cfg, 11).unwrap();
        // awkward values must survive bit-exactly
        e.params_mut()[1].value.data_mut()[0] = -0.0;
        e.params_mut()[1].value.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        e
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = enc();
        let mut buf = Vec::new();
        write_checkpoint(&e, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"GSLC");
        assert_eq!(buf[4], 1);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        for (a, b) in e.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |x: &DenseArray| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&enc(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
