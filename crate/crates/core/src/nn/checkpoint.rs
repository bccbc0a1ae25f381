//! Checkpoint file format: magic `OVCK`, u16 format version, then ordered
//! records of (u16 name length, name bytes, u8 dtype tag, u8 rank, u32 dims,
//! raw little-endian f32 payload).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{NnError, Tensor};

const MAGIC: &[u8; 4] = b"OVCK";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// One named tensor read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Write ordered named tensors.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    entries: &[(String, &Tensor<f32>)],
) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(NnError::Checkpoint {
                path: path.as_ref().display().to_string(),
                message: format!("record name too long: {name}"),
            });
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F32])?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(NnError::Checkpoint {
                path: path.as_ref().display().to_string(),
                message: "tensor rank exceeds u8".into(),
            });
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all records in file order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointRecord>, NnError> {
    let path = path.as_ref();
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let fail = |message: String| NnError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    if data.len() < 6 {
        return Err(fail("file too short for header".into()));
    }
    if &data[0..4] != MAGIC {
        return Err(fail("bad magic (expected OVCK)".into()));
    }
    let version = u16::from_le_bytes(data[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let mut off = 6usize;
    let mut records = Vec::new();
    while off < data.len() {
        let take = |off: &mut usize, len: usize| -> Result<&[u8], NnError> {
            if *off + len > data.len() {
                return Err(NnError::Checkpoint {
                    path: path.display().to_string(),
                    message: format!("truncated record at byte {}", *off),
                });
            }
            let s = &data[*off..*off + len];
            *off += len;
            Ok(s)
        };
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| fail("record name is not UTF-8".into()))?;
        let dtype = take(&mut off, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(fail(format!("unsupported dtype tag {dtype}")));
        }
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let payload = take(&mut off, count * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord {
            name,
            tensor: Tensor::from_vec(&shape, values)?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.ovck");
        let a = Tensor::<f32>::from_vec(&[2, 3], vec![0.1, -2.5, 3.25, 0.0, 1e-20, 9.75]).unwrap();
        let b = Tensor::<f32>::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_checkpoint(&p, &[("layer.w".into(), &a), ("layer.b".into(), &b)]).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "layer.w");
        assert_eq!(back[0].tensor, a);
        assert_eq!(back[1].tensor, b);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("net.ovck");
        let a = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        write_checkpoint(&p, &[("w".into(), &a)]).unwrap();

        let good = std::fs::read(&p).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(NnError::Checkpoint { .. })));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        match read_checkpoint(&p) {
            Err(NnError::Checkpoint { message, .. }) => {
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
