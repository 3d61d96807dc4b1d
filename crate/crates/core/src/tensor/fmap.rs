//! FMAP binary format: the magic bytes `FMAP`, then `C`, `H`, `W` as
//! little-endian `u32`, then `C·H·W` little-endian `f32` values, row-major.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{FeatureMap, TensorError};

pub const MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"FMAP\"")]
    BadMagic([u8; 4]),
    #[error("file ends after {got} of {want} values")]
    Truncated { got: usize, want: usize },
    #[error("unexpected bytes after the last value")]
    TrailingBytes,
    #[error("dimensions {0:?} overflow")]
    Overflow([u32; 3]),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Writes `fm`, narrowing every value to `f32`.
pub fn write_fmap<W: Write>(mut w: W, fm: &FeatureMap) -> Result<(), FmapError> {
    let (c, h, wd) = fm.shape();
    w.write_all(MAGIC)?;
    for d in [c, h, wd] {
        let d = u32::try_from(d).map_err(|_| io::Error::other("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in fm.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fmap<R: Read>(mut r: R) -> Result<FeatureMap, FmapError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FmapError::BadMagic(magic));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b);
    }
    let n = (dims[0] as usize)
        .checked_mul(dims[1] as usize)
        .and_then(|v| v.checked_mul(dims[2] as usize))
        .ok_or(FmapError::Overflow(dims))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    let mut b = [0u8; 4];
    for got in 0..n {
        match r.read_exact(&mut b) {
            Ok(()) => data.push(f32::from_le_bytes(b) as f64),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(FmapError::Truncated { got, want: n })
            }
            Err(e) => return Err(e.into()),
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(FmapError::TrailingBytes);
    }
    Ok(FeatureMap::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        data,
    )?)
}

pub fn save(path: &Path, fm: &FeatureMap) -> Result<(), FmapError> {
    write_fmap(BufWriter::new(File::create(path)?), fm)
}

pub fn load(path: &Path) -> Result<FeatureMap, FmapError> {
    read_fmap(BufReader::new(File::open(path)?))
}

/// Rounds every value through `f32`, matching what a save/load cycle yields.
pub fn quantize(fm: &FeatureMap) -> FeatureMap {
    let (c, h, w) = fm.shape();
    FeatureMap::new(
        c,
        h,
        w,
        fm.data().iter().map(|&v| v as f32 as f64).collect(),
    )
    .expect("same shape")
}
