//! CNT1 tensor files: the magic `CNT1`, a `u32` rank, `rank` `u32`
//! extents, then every element as a little-endian `f32` in row-major order.
//! All integers are little-endian. Values widen to `f64` on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use collidenet_core::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CNT1";

/// Ranks above this are treated as corruption rather than allocated.
const MAX_RANK: u32 = 8;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).context("extent does not fit in u32")?;
        w.write_all(&e.to_le_bytes())?;
    }
    for &v in t.data() {
        let x = v as f32;
        ensure!(x.is_finite() || !v.is_finite(), "value {v} overflows f32");
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("reading tensor header")?;
    if &magic != MAGIC {
        bail!("not a CNT1 tensor (magic {:?})", magic);
    }
    let rank = read_u32(r)?;
    ensure!(rank <= MAX_RANK, "implausible tensor rank {rank}");
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .context("tensor extents overflow")?;
    let mut bytes = vec![0u8; numel.checked_mul(4).context("tensor too large")?];
    r.read_exact(&mut bytes).context("truncated tensor payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_tensor(&mut r).with_context(|| format!("reading {}", path.display()))
}
