//! Tensor dump files: four little-endian u64 extents, then the values as
//! little-endian f64, row-major with channels innermost. Tensors of lower
//! rank are padded with leading extents of 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{KernelError, Result, Tensor, MAX_RANK};

fn io_err(e: std::io::Error) -> KernelError {
    KernelError::Dump(e.to_string())
}

pub fn write_tensor_to<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    let mut header = [1u64; MAX_RANK];
    let pad = MAX_RANK - tensor.shape().len();
    for (slot, &e) in header[pad..].iter_mut().zip(tensor.shape()) {
        *slot = e as u64;
    }
    for e in header {
        out.write_all(&e.to_le_bytes()).map_err(io_err)?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a dump; the result always has rank 4.
pub fn read_tensor_from<R: Read>(mut input: R) -> Result<Tensor> {
    let mut buf = [0u8; 8];
    let mut shape = [0usize; MAX_RANK];
    for slot in &mut shape {
        input.read_exact(&mut buf).map_err(io_err)?;
        *slot = usize::try_from(u64::from_le_bytes(buf)).map_err(|_| KernelError::Dump("extent overflows usize".into()))?;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| KernelError::Dump("extent product overflows".into()))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() != n * 8 {
        return Err(KernelError::Dump(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            n * 8,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(io_err)?;
    write_tensor_to(tensor, BufWriter::new(f))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(io_err)?;
    read_tensor_from(BufReader::new(f))
}
