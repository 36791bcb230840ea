//! Trained-model files.
//!
//! Layout (little-endian): `CNCK`, `u32` version, `u32` length and the
//! UTF-8 model config text, `u32` parameter count, then per parameter a
//! `u32` name length, the name, and a CNT1 tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use collidenet_core::temporal::CollideNet;

use crate::cnt::{read_tensor, read_u32, write_tensor};
use crate::config::RunConfig;

const MAGIC: &[u8; 4] = b"CNCK";
const VERSION: u32 = 1;
const MAX_STRING: u32 = 1 << 20;

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&u32::try_from(s.len())?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)?;
    ensure!(len <= MAX_STRING, "implausible string length {len}");
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

pub fn write(w: &mut impl Write, config: &RunConfig, model: &CollideNet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(w, &config.model_text())?;
    w.write_all(&u32::try_from(model.params.len())?.to_le_bytes())?;
    for (name, t) in model.params.iter() {
        write_str(w, name)?;
        write_tensor(w, t).with_context(|| format!("parameter `{name}`"))?;
    }
    Ok(())
}

/// Rebuilds the model from the stored config and fills in its parameters.
/// The returned config carries the stored model keys on top of the desk
/// preset; training and data keys are not recorded.
pub fn read(r: &mut impl Read) -> Result<(RunConfig, CollideNet)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("reading checkpoint header")?;
    if &magic != MAGIC {
        bail!("not a checkpoint (magic {magic:?})");
    }
    let version = read_u32(r)?;
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let config = RunConfig::parse(&read_str(r)?).context("checkpoint config")?;
    let mut model = CollideNet::new(config.model.clone(), 0)?;
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = read_str(r)?;
        let t = read_tensor(r).with_context(|| format!("parameter `{name}`"))?;
        entries.push((name, t));
    }
    model.params.load_from(entries.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
    Ok((config, model))
}

pub fn save(path: &Path, config: &RunConfig, model: &CollideNet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write(&mut w, config, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, CollideNet)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read(&mut r).with_context(|| format!("reading {}", path.display()))
}
