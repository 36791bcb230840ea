//! Hierarchical spatial stream: patch embedding with fixed sinusoidal
//! positions, then stages of transformer blocks. Early stages attend inside
//! non-overlapping mask units, later ones globally; every stage after the
//! first opens with a block that pools the query grid and widens channels.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::numerics::{AttentionGroups, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Attention inside `mask_unit × mask_unit` token windows of the stage's
    /// output grid.
    Local { mask_unit: usize },
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Query-pooling factor per spatial extent at the stage entry (1 = none).
    pub pool: usize,
    pub attention: AttentionMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stages: Vec<StageConfig>,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl SpatialConfig {
    /// Desk-scale schedule with `num_stages` stages: width doubles and the
    /// grid halves at each stage; all but the last stage are local.
    pub fn hierarchical(image_size: usize, patch_size: usize, base_width: usize, num_stages: usize, embed_dim: usize) -> Self {
        let stages = (0..num_stages)
            .map(|s| StageConfig {
                width: base_width << s,
                blocks: 1,
                heads: (1usize << s).min(4),
                pool: if s == 0 { 1 } else { 2 },
                attention: if s + 1 == num_stages {
                    AttentionMode::Global
                } else {
                    AttentionMode::Local { mask_unit: 2 }
                },
            })
            .collect();
        Self {
            image_size,
            patch_size,
            stages,
            embed_dim,
            mlp_ratio: 2,
        }
    }

    /// Token grid side after stage `s` (or the patch grid for `None`).
    pub fn grid_after(&self, stage: Option<usize>) -> usize {
        let mut g = self.image_size / self.patch_size.max(1);
        if let Some(s) = stage {
            for st in &self.stages[..=s] {
                g /= st.pool.max(1);
            }
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image size {} not divisible by patch size {}", self.image_size, self.patch_size);
        }
        if self.stages.is_empty() || self.stages.len() > 4 {
            bail!(Config, "spatial stage count must be 1..=4, got {}", self.stages.len());
        }
        let mut grid = self.image_size / self.patch_size;
        let mut width = 0;
        let mut seen_global = false;
        for (s, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.heads == 0 || st.width == 0 || st.width % st.heads != 0 {
                bail!(Config, "stage {}: blocks, heads and width must be positive with width divisible by heads", s);
            }
            if s == 0 && st.pool != 1 {
                bail!(Config, "the first stage cannot pool");
            }
            if s > 0 {
                if st.pool < 2 {
                    bail!(Config, "stage {} must pool to reduce the token count", s);
                }
                if st.width <= width {
                    bail!(Config, "stage {} width {} must exceed previous width {}", s, st.width, width);
                }
                if grid % st.pool != 0 {
                    bail!(Config, "stage {}: grid {} not divisible by pool {}", s, grid, st.pool);
                }
                grid /= st.pool;
            }
            if s == 0 && st.width % 4 != 0 {
                bail!(Config, "first-stage width must be divisible by 4 for 2-D positional encodings");
            }
            match st.attention {
                AttentionMode::Global => seen_global = true,
                AttentionMode::Local { mask_unit } => {
                    if seen_global {
                        bail!(Config, "stage {}: local attention after a global stage", s);
                    }
                    if mask_unit == 0 || grid % mask_unit != 0 {
                        bail!(Config, "stage {}: mask unit {} does not divide grid {}", s, mask_unit, grid);
                    }
                }
            }
            width = st.width;
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            bail!(Config, "embedding dim and mlp ratio must be positive");
        }
        Ok(())
    }
}

/// Tokens of one or more frames laid out frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokenGrid {
    /// `(frames·h·w) × c`
    pub tokens: Tensor,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub stage: usize,
}

/// 2-D sinusoidal encodings for a `side × side` grid at width `c`
/// (row and column each use `c/2` channels of sin/cos pairs).
pub fn positional_encoding(side: usize, c: usize) -> Tensor {
    let quarter = c / 4;
    let mut data = vec![0.0; side * side * c];
    for r in 0..side {
        for col in 0..side {
            let base = (r * side + col) * c;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                data[base + i] = (r as f64 * freq).sin();
                data[base + quarter + i] = (r as f64 * freq).cos();
                data[base + 2 * quarter + i] = (col as f64 * freq).sin();
                data[base + 3 * quarter + i] = (col as f64 * freq).cos();
            }
        }
    }
    Tensor::new(&[side * side, c], data).expect("positional encoding shape")
}

fn unit_tokens(frame: usize, side: usize, ur: usize, uc: usize, unit: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(unit * unit);
    for r in ur * unit..(ur + 1) * unit {
        for c in uc * unit..(uc + 1) * unit {
            out.push(frame * side * side + r * side + c);
        }
    }
    out
}

/// Attention groups for a grid of `out_side` query tokens per frame
/// attending to `out_side·pool` key tokens per frame.
fn attention_groups(frames: usize, out_side: usize, pool: usize, mode: AttentionMode) -> AttentionGroups {
    let in_side = out_side * pool;
    let unit = match mode {
        AttentionMode::Global => out_side,
        AttentionMode::Local { mask_unit } => mask_unit,
    };
    let per = out_side / unit;
    let mut q = Vec::new();
    let mut kv = Vec::new();
    for f in 0..frames {
        for ur in 0..per {
            for uc in 0..per {
                q.push(unit_tokens(f, out_side, ur, uc, unit));
                kv.push(unit_tokens(f, in_side, ur, uc, unit * pool));
            }
        }
    }
    AttentionGroups { q, kv }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    /// Residual widening projection for pooling blocks.
    proj: Option<(ParamId, ParamId)>,
    ln2: (ParamId, ParamId),
    mlp1: (ParamId, ParamId),
    mlp2: (ParamId, ParamId),
    pool: usize,
    heads: usize,
    mode: AttentionMode,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, pool: usize, heads: usize, mode: AttentionMode, mlp_ratio: usize) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        let hidden = c_out * mlp_ratio;
        let proj = if pool > 1 || c_in != c_out {
            Some((
                store.init(&n("proj.w"), &[c_in, c_out], Init::Xavier)?,
                store.init(&n("proj.b"), &[c_out], Init::Zeros)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln1: (
                store.init(&n("ln1.g"), &[c_in], Init::Ones)?,
                store.init(&n("ln1.b"), &[c_in], Init::Zeros)?,
            ),
            wq: store.init(&n("attn.wq"), &[c_in, c_out], Init::Xavier)?,
            wk: store.init(&n("attn.wk"), &[c_in, c_out], Init::Xavier)?,
            wv: store.init(&n("attn.wv"), &[c_in, c_out], Init::Xavier)?,
            wo: store.init(&n("attn.wo"), &[c_out, c_out], Init::Xavier)?,
            bo: store.init(&n("attn.bo"), &[c_out], Init::Zeros)?,
            proj,
            ln2: (
                store.init(&n("ln2.g"), &[c_out], Init::Ones)?,
                store.init(&n("ln2.b"), &[c_out], Init::Zeros)?,
            ),
            mlp1: (
                store.init(&n("mlp.w1"), &[c_out, hidden], Init::Xavier)?,
                store.init(&n("mlp.b1"), &[hidden], Init::Zeros)?,
            ),
            mlp2: (
                store.init(&n("mlp.w2"), &[hidden, c_out], Init::Xavier)?,
                store.init(&n("mlp.b2"), &[c_out], Init::Zeros)?,
            ),
            pool,
            heads,
            mode,
        })
    }

    /// `x` holds `frames·side²` tokens; returns `frames·(side/pool)²` tokens.
    fn forward(&self, tape: &mut Tape, p: &mut Bound<'_>, x: Var, frames: usize, side: usize) -> Result<Var> {
        let out_side = side / self.pool;
        let (g1, b1) = (p.var(tape, self.ln1.0), p.var(tape, self.ln1.1));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (wq, wk, wv) = (p.var(tape, self.wq), p.var(tape, self.wk), p.var(tape, self.wv));
        let mut q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let residual = match self.proj {
            Some((w, b)) => {
                let (w, b) = (p.var(tape, w), p.var(tape, b));
                let r = tape.linear(h, w, b)?;
                avg_pool(tape, r, frames, side, self.pool)?
            }
            None => x,
        };
        if self.pool > 1 {
            q = avg_pool(tape, q, frames, side, self.pool)?;
        }
        let groups = Rc::new(attention_groups(frames, out_side, self.pool, self.mode));
        let a = tape.attention(q, k, v, self.heads, groups)?;
        let (wo, bo) = (p.var(tape, self.wo), p.var(tape, self.bo));
        let a = tape.linear(a, wo, bo)?;
        let x = tape.add(residual, a)?;
        let (g2, b2) = (p.var(tape, self.ln2.0), p.var(tape, self.ln2.1));
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let (w1, bb1) = (p.var(tape, self.mlp1.0), p.var(tape, self.mlp1.1));
        let h = tape.linear(h, w1, bb1)?;
        let h = tape.gelu(h)?;
        let (w2, bb2) = (p.var(tape, self.mlp2.0), p.var(tape, self.mlp2.1));
        let h = tape.linear(h, w2, bb2)?;
        tape.add(x, h)
    }
}

/// Average pooling of `pool × pool` windows of a per-frame token grid.
fn avg_pool(tape: &mut Tape, x: Var, frames: usize, side: usize, pool: usize) -> Result<Var> {
    let out_side = side / pool;
    let mut acc: Option<Var> = None;
    for dr in 0..pool {
        for dc in 0..pool {
            let mut rows = Vec::with_capacity(frames * out_side * out_side);
            for f in 0..frames {
                for r in 0..out_side {
                    for cc in 0..out_side {
                        rows.push(f * side * side + (r * pool + dr) * side + cc * pool + dc);
                    }
                }
            }
            let g = tape.gather_rows(x, &rows)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, g)?,
                None => g,
            });
        }
    }
    tape.scale(acc.expect("pool >= 1"), 1.0 / (pool * pool) as f64)
}

/// Parameters and schedule of the spatial stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEncoder {
    pub config: SpatialConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    stages: Vec<Vec<Block>>,
    final_ln: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
    pos: Tensor,
}

impl SpatialEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: SpatialConfig) -> Result<Self> {
        config.validate()?;
        let n = |s: &str| format!("{prefix}.{s}");
        let patch_dim = config.patch_size * config.patch_size * 3;
        let c0 = config.stages[0].width;
        let patch_w = store.init(&n("patch.w"), &[patch_dim, c0], Init::Xavier)?;
        let patch_b = store.init(&n("patch.b"), &[c0], Init::Zeros)?;
        let mut stages = Vec::new();
        let mut c_prev = c0;
        for (s, st) in config.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..st.blocks {
                let (c_in, pool) = if b == 0 { (c_prev, st.pool) } else { (st.width, 1) };
                blocks.push(Block::new(store, &format!("{prefix}.stage{s}.block{b}"), c_in, st.width, pool, st.heads, st.attention, config.mlp_ratio)?);
            }
            c_prev = st.width;
            stages.push(blocks);
        }
        let final_ln = (
            store.init(&n("final_ln.g"), &[c_prev], Init::Ones)?,
            store.init(&n("final_ln.b"), &[c_prev], Init::Zeros)?,
        );
        let head_w = store.init(&n("head.w"), &[c_prev, config.embed_dim], Init::Xavier)?;
        let head_b = store.init(&n("head.b"), &[config.embed_dim], Init::Zeros)?;
        let pos = positional_encoding(config.grid_after(None), c0);
        Ok(Self {
            config,
            patch_w,
            patch_b,
            stages,
            final_ln,
            head_w,
            head_b,
            pos,
        })
    }

    fn frame_geometry(&self, frames: &Tensor) -> Result<usize> {
        let s = self.config.image_size;
        match frames.shape() {
            [f, h, w, 3] if *h == s && *w == s => Ok(*f),
            [h, w, 3] if *h == s && *w == s => Ok(1),
            other => bail!(Input, "expected frames of shape [F, {s}, {s}, 3], got {:?}", other),
        }
    }

    /// Patch tokens plus positional encodings for `[F, H, W, 3]` (or one `[H, W, 3]`) frames.
    pub fn patchify_embed_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, frames: Var) -> Result<Var> {
        let f = self.frame_geometry(tape.value(frames))?;
        let size = self.config.image_size;
        let ps = self.config.patch_size;
        let side = size / ps;
        let patch_dim = ps * ps * 3;
        let mut index = Vec::with_capacity(f * side * side * patch_dim);
        for fr in 0..f {
            for pr in 0..side {
                for pc in 0..side {
                    for r in 0..ps {
                        for c in 0..ps {
                            for ch in 0..3 {
                                index.push(((fr * size + pr * ps + r) * size + pc * ps + c) * 3 + ch);
                            }
                        }
                    }
                }
            }
        }
        let patches = tape.gather(frames, Rc::new(index), &[f * side * side, patch_dim])?;
        let (w, b) = (p.var(tape, self.patch_w), p.var(tape, self.patch_b));
        let tokens = tape.linear(patches, w, b)?;
        let c0 = self.config.stages[0].width;
        let mut pos = Vec::with_capacity(f * side * side * c0);
        for _ in 0..f {
            pos.extend_from_slice(self.pos.data());
        }
        let pos = tape.constant(Tensor::new(&[f * side * side, c0], pos)?);
        tape.add(tokens, pos)
    }

    /// Runs the blocks of stage `stage` on `frames·side²` tokens.
    pub fn stage_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, x: Var, frames: usize, side: usize, stage: usize) -> Result<(Var, usize)> {
        let Some(blocks) = self.stages.get(stage) else {
            bail!(Config, "stage {} out of range", stage);
        };
        let mut x = x;
        let mut side = side;
        for b in blocks {
            if side % b.pool != 0 {
                bail!(Config, "grid {} not divisible by pool {}", side, b.pool);
            }
            if let AttentionMode::Local { mask_unit } = b.mode {
                if (side / b.pool) % mask_unit != 0 {
                    bail!(Config, "mask unit {} does not divide grid {}", mask_unit, side / b.pool);
                }
            }
            x = b.forward(tape, p, x, frames, side)?;
            side /= b.pool;
        }
        Ok((x, side))
    }

    /// Frame embeddings `F × d` for `[F, H, W, 3]` frames.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, frames: Var) -> Result<Var> {
        let f = self.frame_geometry(tape.value(frames))?;
        let mut x = self.patchify_embed_on_tape(tape, p, frames)?;
        let mut side = self.config.grid_after(None);
        for s in 0..self.stages.len() {
            (x, side) = self.stage_on_tape(tape, p, x, f, side, s)?;
        }
        let (g, b) = (p.var(tape, self.final_ln.0), p.var(tape, self.final_ln.1));
        let x = tape.layer_norm(x, g, b, LN_EPS)?;
        let per = side * side;
        let mut avg = vec![0.0; f * f * per];
        for fr in 0..f {
            for t in 0..per {
                avg[fr * f * per + fr * per + t] = 1.0 / per as f64;
            }
        }
        let avg = tape.constant(Tensor::new(&[f, f * per], avg)?);
        let pooled = tape.matmul(avg, x)?;
        let (w, b) = (p.var(tape, self.head_w), p.var(tape, self.head_b));
        tape.linear(pooled, w, b)
    }

    pub fn patchify_embed(&self, store: &ParamStore, frame: &Tensor) -> Result<FrameTokenGrid> {
        let mut tape = Tape::new();
        let mut p = Bound::new(store, false);
        let fv = tape.constant(frame.clone());
        let frames = self.frame_geometry(frame)?;
        let t = self.patchify_embed_on_tape(&mut tape, &mut p, fv)?;
        let side = self.config.grid_after(None);
        Ok(FrameTokenGrid {
            tokens: tape.value(t).clone(),
            frames,
            h: side,
            w: side,
            stage: 0,
        })
    }

    /// Applies stage `stage` to a token grid (the grid's `stage` field is
    /// the index of the stage that will consume it).
    pub fn stage_forward(&self, store: &ParamStore, grid: &FrameTokenGrid, stage: usize) -> Result<FrameTokenGrid> {
        let mut tape = Tape::new();
        let mut p = Bound::new(store, false);
        let x = tape.constant(grid.tokens.clone());
        if grid.h != grid.w {
            bail!(Input, "square grids only");
        }
        let (y, side) = self.stage_on_tape(&mut tape, &mut p, x, grid.frames, grid.h, stage)?;
        Ok(FrameTokenGrid {
            tokens: tape.value(y).clone(),
            frames: grid.frames,
            h: side,
            w: side,
            stage: stage + 1,
        })
    }

    /// Embedding of one `[H, W, 3]` frame as a `d`-vector.
    pub fn encode_frame(&self, store: &ParamStore, frame: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_clip(store, frame)?.into_data())
    }

    /// Frame-wise embeddings of `[F, H, W, 3]` frames as an `F × d` sequence.
    pub fn encode_clip(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut p = Bound::new(store, false);
        let fv = tape.constant(frames.clone());
        let z = self.encode_on_tape(&mut tape, &mut p, fv)?;
        Ok(tape.value(z).clone())
    }
}
