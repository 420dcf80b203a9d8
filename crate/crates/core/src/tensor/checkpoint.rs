//! "VXW1" weight container: named tensors with little-endian f32 payloads.
//!
//! Layout: 4-byte magic `VXW1`, then one record per tensor:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u32 LE each),
//! then `numel` f32 values. Records run to end of file. Writes go through a
//! temporary file and a rename so a crash cannot leave a half-written
//! checkpoint behind.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VXW1";

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("vxw.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        for (name, t) in tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint file too short for magic"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected VXW1"
        )));
    }
    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // A partial length prefix means the file was truncated.
                let mut rest = vec![0u8; 4 - n];
                if r.read_exact(&mut rest).is_err() {
                    return Err(Error::format("truncated checkpoint record"));
                }
                len_buf[n..].copy_from_slice(&rest);
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::format("truncated checkpoint record (name)"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("checkpoint tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format("truncated checkpoint record (payload)"))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(tensors)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(format!("truncated checkpoint record ({what})")))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f32_representable(t: Tensor) -> Tensor {
        let data = t.data().iter().map(|&v| v as f32 as f64).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = tempfile::tempdir().unwrap();
        let tensors: Vec<(String, Tensor)> = vec![
            (
                "enc.w".into(),
                f32_representable(Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng)),
            ),
            (
                "enc.b".into(),
                f32_representable(Tensor::rand_uniform(&[2], -1.0, 1.0, &mut rng)),
            ),
        ];
        let p1 = dir.path().join("a.vxw");
        let p2 = dir.path().join("b.vxw");
        write_checkpoint(&p1, &tensors).unwrap();
        let loaded = read_checkpoint(&p1).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "enc.w");
        assert_eq!(loaded[0].1, tensors[0].1);
        write_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vxw");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vxw");
        let t = vec![("w".to_string(), Tensor::full(&[4, 4], 0.5))];
        write_checkpoint(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }
}
