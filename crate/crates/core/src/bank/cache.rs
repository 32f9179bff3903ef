//! Binary sidecar holding every entry's foreground bitmaps.
//!
//! Layout (little-endian): magic `BKBANK\0\0`, u32 version, 32-byte checksum,
//! u32 height, u32 width, u32 entry count, then per entry a u32 bitmap count
//! followed by the bitmaps.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::BankEntry;
use crate::layout::{Canvas, CategoryBitmap, Taxonomy};

const MAGIC: &[u8; 8] = b"BKBANK\0\0";
const VERSION: u32 = 1;

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn checksum_bytes(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    out
}

/// `Ok(None)` when the file is missing or belongs to other inputs.
pub(super) fn load(path: &Path, checksum: &str, canvas: Canvas, taxonomy: &Taxonomy) -> io::Result<Option<Vec<Vec<CategoryBitmap>>>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC || read_u32(&mut r)? != VERSION {
        return Ok(None);
    }
    let mut sum = [0u8; 32];
    r.read_exact(&mut sum)?;
    if sum != checksum_bytes(checksum) {
        return Ok(None);
    }
    if (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize) != (canvas.height, canvas.width) {
        return Ok(None);
    }
    let n = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let k = read_u32(&mut r)? as usize;
        let mut bitmaps = Vec::with_capacity(k.min(256));
        for _ in 0..k {
            let b = CategoryBitmap::read_from(&mut r, canvas)?;
            if taxonomy.foreground_index(b.category()).is_none() || b.is_empty() {
                return Err(invalid("cached bitmap is not a present foreground category"));
            }
            bitmaps.push(b);
        }
        entries.push(bitmaps);
    }
    Ok(Some(entries))
}

pub(super) fn store(path: &Path, checksum: &str, canvas: Canvas, entries: &[BankEntry]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("bank.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&checksum_bytes(checksum))?;
        w.write_all(&(canvas.height as u32).to_le_bytes())?;
        w.write_all(&(canvas.width as u32).to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for e in entries {
            w.write_all(&(e.bitmaps().len() as u32).to_le_bytes())?;
            for b in e.bitmaps() {
                b.write_to(&mut w)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)
}
