//! Dataset manifests: one CNT1 file per clip plus a CSV index with columns
//! `id, path, ttc_label, split`. Paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collidenet_core::datagen::{ClipSample, Dataset, Split};
use collidenet_core::temporal::ClipInput;
use serde::{Deserialize, Serialize};

use crate::cnt;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    id: String,
    path: String,
    ttc_label: f64,
    split: String,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Writes `clips/<id>.cnt` under `dir` and `dir/manifest.csv`; returns the manifest path.
pub fn write(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    let clips = dir.join("clips");
    fs::create_dir_all(&clips).with_context(|| format!("creating {}", clips.display()))?;
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for split in SPLITS {
        for s in data.split(split) {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                bail!("clip id `{}` cannot be used as a file name", s.id);
            }
            let rel = format!("clips/{}.cnt", s.id);
            let tensor = match &s.input {
                ClipInput::Frames(t) | ClipInput::Embeddings(t) => t,
            };
            cnt::save(&dir.join(&rel), tensor)?;
            w.serialize(Entry {
                id: s.id.clone(),
                path: rel,
                ttc_label: s.ttc_label,
                split: split.as_str().into(),
            })?;
        }
    }
    w.flush()?;
    Ok(path)
}

/// Rank-4 tensors load as frames, rank-2 as embedding sequences.
pub fn read(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest).with_context(|| format!("opening {}", manifest.display()))?;
    let mut data = Dataset::default();
    for (i, row) in r.deserialize::<Entry>().enumerate() {
        let e = row.with_context(|| format!("{} row {}", manifest.display(), i + 1))?;
        let t = cnt::load(&base.join(&e.path))?;
        let input = match t.rank() {
            4 => ClipInput::Frames(t),
            2 => ClipInput::Embeddings(t),
            r => bail!("clip `{}` has rank {r}, expected 2 or 4", e.id),
        };
        let sample = ClipSample {
            input,
            ttc_label: e.ttc_label,
            id: e.id,
        };
        match e.split.as_str() {
            "train" => data.train.push(sample),
            "val" => data.val.push(sample),
            "test" => data.test.push(sample),
            other => bail!("clip `{}` has unknown split `{other}`", sample.id),
        }
    }
    Ok(data)
}

pub fn parse_split(s: &str) -> Result<Split> {
    SPLITS
        .into_iter()
        .find(|x| x.as_str() == s)
        .with_context(|| format!("unknown split `{s}` (expected train, val or test)"))
}
