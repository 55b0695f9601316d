//! CVST binary tensor files.
//!
//! Layout, all little-endian: the four bytes `CVST`, a `u32` rank, `rank`
//! `u64` extents, then the `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CVST_MAGIC: &[u8; 4] = b"CVST";

pub fn write_tensor_to<W: Write>(tensor: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(CVST_MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_tensor_from<R: Read>(mut r: R) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != CVST_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| e.to_string())?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 16 {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut b8 = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|e| e.to_string())?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or("extent product overflows")?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8).map_err(|e| e.to_string())?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after payload".into());
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(tensor, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(BufReader::new(f)).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        let mut want = b"CVST".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensor_from(&b"CVSX\x01\0\0\0"[..]).is_err());
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        assert!(read_tensor_from(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_tensor_from(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let t = Tensor::randn(&shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor_to(&t, &mut buf).unwrap();
            let back = read_tensor_from(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
