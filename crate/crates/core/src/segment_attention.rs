//! Segment-wise correlation attention, its multi-scale form and the
//! predictive (lagged) cross-attention form used by the decoder.
//!
//! A length-`n` sequence is cut into `n/L` contiguous segments. The score
//! between query segment `i` and key segment `j` is the aligned
//! within-segment dot product
//!
//! ```text
//! c_ij = 1/(L·√d_h) · Σ_t Q_i[t]·K_j[t]
//! w_ij = softmax_j(τ·c_ij + Δ_j)
//! Y_i  = Σ_j w_ij · V_j
//! ```
//!
//! In the predictive pairing the query of segment `i` is `Q_{i-1}` and key
//! `j` weighs value `V_{j+1}`; both ends replicate the boundary segment.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::stationarity::Rescalers;

/// How query, key and value segments are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// `Y_i = Σ_j w(Q_i, K_j)·V_j`
    Aligned,
    /// `Y_i = Σ_j w(Q_{i-1}, K_j)·V_{j+1}`
    Predictive,
}

/// How the per-scale outputs of a multi-scale block are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFusion {
    Mean,
    /// Softmax-normalised learned weights (zero-initialised, so they start at the mean).
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAttentionConfig {
    pub base_segment_len: usize,
    pub num_scales: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    /// Pad sequences to a multiple of the largest segment length by
    /// replicating the final row; padded key segments are masked.
    pub pad_to_fit: bool,
    pub fusion: ScaleFusion,
}

impl SegmentAttentionConfig {
    pub fn model_dim(&self) -> usize {
        self.head_dim * self.num_heads
    }

    /// `L, 2L, …, 2^(S-1)·L`.
    pub fn segment_lengths(&self) -> Vec<usize> {
        (0..self.num_scales)
            .map(|s| self.base_segment_len << s)
            .collect()
    }

    pub fn max_segment_len(&self) -> usize {
        self.base_segment_len << (self.num_scales.max(1) - 1)
    }

    pub fn padded_len(&self, n: usize) -> usize {
        let l = self.max_segment_len();
        n.div_ceil(l) * l
    }

    /// Number of key segments at the coarsest scale, i.e. the length of Δ.
    pub fn coarsest_segments(&self, n: usize) -> usize {
        self.padded_len(n) / self.max_segment_len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.base_segment_len == 0 || self.num_scales == 0 {
            bail!(Config, "segment length and scale count must be positive");
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            bail!(Config, "head count and head dim must be positive");
        }
        if self.num_scales > 16 {
            bail!(Config, "too many scales: {}", self.num_scales);
        }
        let l = self.max_segment_len();
        if l > n {
            bail!(Config, "largest segment length {} exceeds sequence length {}", l, n);
        }
        if !self.pad_to_fit && n % l != 0 {
            bail!(Config, "sequence length {} not divisible by segment length {} and padding disabled", n, l);
        }
        Ok(())
    }
}

/// One single-scale evaluation, as recorded on the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub seg_len: usize,
    pub heads: usize,
    pub pairing: Pairing,
    /// Rows at or beyond this index are padding; key segments starting there are masked.
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct SegmentForward {
    pub y: Vec<f64>,
    /// `heads × n_seg × n_valid` softmax weights.
    pub weights: Vec<f64>,
    /// `heads × n_seg × n_valid` normalised correlations `c_ij`.
    pub corr: Vec<f64>,
    pub n_seg: usize,
    pub n_valid: usize,
    pub flops: u64,
}

pub(crate) struct SegmentGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dtau: f64,
    pub ddelta: Vec<f64>,
}

struct Layout {
    l: usize,
    dh: usize,
    n_seg: usize,
    n_valid: usize,
    scale: f64,
}

impl Layout {
    fn new(plan: &SegmentPlan, n: usize, d: usize, delta_len: usize) -> Result<Self> {
        let l = plan.seg_len;
        if l == 0 || n % l != 0 {
            bail!(Config, "sequence length {} not divisible by segment length {}", n, l);
        }
        if plan.heads == 0 || d % plan.heads != 0 {
            bail!(Dimension, "width {} not divisible into {} heads", d, plan.heads);
        }
        let n_seg = n / l;
        let n_valid = plan.valid_len.min(n).div_ceil(l);
        if n_valid == 0 {
            bail!(Dimension, "no valid key segments");
        }
        if plan.pairing == Pairing::Predictive && n_valid < 2 {
            bail!(Config, "predictive pairing needs at least 2 segments, got {}", n_valid);
        }
        if delta_len != 0 && (delta_len > n_seg || n_seg % delta_len != 0) {
            bail!(Dimension, "delta of length {} cannot broadcast over {} segments", delta_len, n_seg);
        }
        let dh = d / plan.heads;
        Ok(Self {
            l,
            dh,
            n_seg,
            n_valid,
            scale: 1.0 / (l as f64 * (dh as f64).sqrt()),
        })
    }

    fn q_src(&self, pairing: Pairing, i: usize) -> usize {
        match pairing {
            Pairing::Aligned => i,
            Pairing::Predictive => i.saturating_sub(1),
        }
    }

    fn v_src(&self, pairing: Pairing, j: usize) -> usize {
        match pairing {
            Pairing::Aligned => j,
            Pairing::Predictive => (j + 1).min(self.n_valid - 1),
        }
    }

    fn delta_at(&self, delta: &[f64], j: usize) -> f64 {
        if delta.is_empty() {
            0.0
        } else {
            delta[j * delta.len() / self.n_seg]
        }
    }
}

fn seg_dot(a: &[f64], a_seg: usize, b: &[f64], b_seg: usize, lay: &Layout, d: usize, off: usize) -> f64 {
    let mut s = 0.0;
    for t in 0..lay.l {
        let ra = (a_seg * lay.l + t) * d + off;
        let rb = (b_seg * lay.l + t) * d + off;
        for e in 0..lay.dh {
            s += a[ra + e] * b[rb + e];
        }
    }
    s
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_forward(
    plan: &SegmentPlan,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    tau: f64,
    delta: &[f64],
) -> Result<SegmentForward> {
    let lay = Layout::new(plan, n, d, delta.len())?;
    let (ns, nv) = (lay.n_seg, lay.n_valid);
    let mut y = vec![0.0; n * d];
    let mut weights = vec![0.0; plan.heads * ns * nv];
    let mut corr = vec![0.0; plan.heads * ns * nv];
    let mut flops = 0u64;
    for h in 0..plan.heads {
        let off = h * lay.dh;
        for i in 0..ns {
            let qs = lay.q_src(plan.pairing, i);
            let base = (h * ns + i) * nv;
            for j in 0..nv {
                let c = lay.scale * seg_dot(q, qs, k, j, &lay, d, off);
                corr[base + j] = c;
                weights[base + j] = tau * c + lay.delta_at(delta, j);
            }
            crate::numerics::softmax_in_place(&mut weights[base..base + nv]);
            for j in 0..nv {
                let w = weights[base + j];
                let vs = lay.v_src(plan.pairing, j);
                for t in 0..lay.l {
                    let ro = (i * lay.l + t) * d + off;
                    let rv = (vs * lay.l + t) * d + off;
                    for e in 0..lay.dh {
                        y[ro + e] += w * v[rv + e];
                    }
                }
            }
            flops += 2 * (nv * lay.l * lay.dh) as u64 + 3 * nv as u64;
        }
    }
    Ok(SegmentForward {
        y,
        weights,
        corr,
        n_seg: ns,
        n_valid: nv,
        flops,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_backward(
    plan: &SegmentPlan,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    tau: f64,
    delta: &[f64],
    fwd: &SegmentForward,
    dy: &[f64],
) -> SegmentGrads {
    let lay = Layout::new(plan, n, d, delta.len()).expect("plan validated in forward");
    let (ns, nv) = (lay.n_seg, lay.n_valid);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dtau = 0.0;
    let mut ddelta = vec![0.0; delta.len()];
    let mut dw = vec![0.0; nv];
    for h in 0..plan.heads {
        let off = h * lay.dh;
        for i in 0..ns {
            let qs = lay.q_src(plan.pairing, i);
            let base = (h * ns + i) * nv;
            let w = &fwd.weights[base..base + nv];
            for j in 0..nv {
                let vs = lay.v_src(plan.pairing, j);
                dw[j] = seg_dot(dy, i, v, vs, &lay, d, off);
                for t in 0..lay.l {
                    let ro = (i * lay.l + t) * d + off;
                    let rv = (vs * lay.l + t) * d + off;
                    for e in 0..lay.dh {
                        dv[rv + e] += w[j] * dy[ro + e];
                    }
                }
            }
            let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for j in 0..nv {
                let ds = w[j] * (dw[j] - dot);
                dtau += ds * fwd.corr[base + j];
                if !delta.is_empty() {
                    ddelta[j * delta.len() / ns] += ds;
                }
                let dc = ds * tau * lay.scale;
                for t in 0..lay.l {
                    let rq = (qs * lay.l + t) * d + off;
                    let rk = (j * lay.l + t) * d + off;
                    for e in 0..lay.dh {
                        dq[rq + e] += dc * k[rk + e];
                        dk[rk + e] += dc * q[rq + e];
                    }
                }
            }
        }
    }
    SegmentGrads {
        dq,
        dk,
        dv,
        dtau,
        ddelta,
    }
}

/// Options for a single-scale evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentOptions {
    pub seg_len: usize,
    pub heads: usize,
    pub pairing: Pairing,
    pub pad: bool,
}

impl SegmentOptions {
    pub fn new(seg_len: usize) -> Self {
        Self {
            seg_len,
            heads: 1,
            pairing: Pairing::Aligned,
            pad: false,
        }
    }

    pub fn heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn pairing(mut self, pairing: Pairing) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn padded(mut self, pad: bool) -> Self {
        self.pad = pad;
        self
    }
}

/// Result of one single-scale evaluation.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub y: Tensor,
    /// `weights[h][i][j]` over the valid key segments.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Multiply-add count of the correlation and aggregation plus softmax work.
    pub flops: u64,
}

fn pad_rows(x: &Tensor, n_pad: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut data = x.data().to_vec();
    for _ in n..n_pad {
        data.extend_from_slice(&x.data()[(n - 1) * d..n * d]);
    }
    Tensor::new(&[n_pad, d], data)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        bail!(Dimension, "q, k, v shapes differ: {:?} {:?} {:?}", q.shape(), k.shape(), v.shape());
    }
    Ok((n, d))
}

fn run_padded(q: &Tensor, k: &Tensor, v: &Tensor, n_pad: usize, plan: &SegmentPlan, r: &Rescalers) -> Result<SegmentOutput> {
    let (n, d) = check_qkv(q, k, v)?;
    let (qp, kp, vp) = (pad_rows(q, n_pad)?, pad_rows(k, n_pad)?, pad_rows(v, n_pad)?);
    let fwd = segment_forward(plan, qp.data(), kp.data(), vp.data(), n_pad, d, r.tau, &r.delta)?;
    let weights = (0..plan.heads)
        .map(|h| {
            (0..fwd.n_seg)
                .map(|i| {
                    let base = (h * fwd.n_seg + i) * fwd.n_valid;
                    fwd.weights[base..base + fwd.n_valid].to_vec()
                })
                .collect()
        })
        .collect();
    Ok(SegmentOutput {
        y: Tensor::new(&[n, d], fwd.y[..n * d].to_vec())?,
        weights,
        flops: fwd.flops,
    })
}

/// Single-scale segment-wise correlation.
pub fn segment_correlation(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: &SegmentOptions,
    rescalers: &Rescalers,
) -> Result<SegmentOutput> {
    let (n, _) = check_qkv(q, k, v)?;
    if opts.seg_len == 0 {
        bail!(Config, "segment length must be positive");
    }
    if n % opts.seg_len != 0 && !opts.pad {
        bail!(Config, "sequence length {} not divisible by segment length {} and padding disabled", n, opts.seg_len);
    }
    let plan = SegmentPlan {
        seg_len: opts.seg_len,
        heads: opts.heads,
        pairing: opts.pairing,
        valid_len: n,
    };
    run_padded(q, k, v, n.div_ceil(opts.seg_len) * opts.seg_len, &plan, rescalers)
}

fn multi_scale(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &SegmentAttentionConfig, rescalers: &Rescalers, pairing: Pairing) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    cfg.validate(n)?;
    let n_pad = cfg.padded_len(n);
    let mut acc = Tensor::zeros(&[n, d]);
    for l in cfg.segment_lengths() {
        let plan = SegmentPlan {
            seg_len: l,
            heads: cfg.num_heads,
            pairing,
            valid_len: n,
        };
        let out = run_padded(q, k, v, n_pad, &plan, rescalers)?;
        acc = acc.add(&out.y)?;
    }
    Ok(acc.scale(1.0 / cfg.num_scales as f64))
}

/// Multi-scale segment-wise correlation: the mean over scales of
/// [`segment_correlation`] at doubling segment lengths.
pub fn mssc(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &SegmentAttentionConfig, rescalers: &Rescalers) -> Result<Tensor> {
    multi_scale(q, k, v, cfg, rescalers, Pairing::Aligned)
}

/// Predictive multi-scale cross-attention: decoder queries, encoder keys
/// and values, one-segment lag between keys and values.
pub fn pre_mssc(q_dec: &Tensor, k_enc: &Tensor, v_enc: &Tensor, cfg: &SegmentAttentionConfig, rescalers: &Rescalers) -> Result<Tensor> {
    let (n, _) = check_qkv(q_dec, k_enc, v_enc)?;
    cfg.validate(n)?;
    if n.div_ceil(cfg.max_segment_len()) < 2 {
        bail!(Config, "predictive attention needs at least 2 segments at every scale");
    }
    multi_scale(q_dec, k_enc, v_enc, cfg, rescalers, Pairing::Predictive)
}

/// Tape version of the multi-scale block. `fusion_logits`, when given,
/// holds one logit per scale for [`ScaleFusion::Learned`].
#[allow(clippy::too_many_arguments)]
pub fn mssc_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &SegmentAttentionConfig,
    tau: Var,
    delta: Option<Var>,
    pairing: Pairing,
    fusion_logits: Option<Var>,
) -> Result<Var> {
    let (n, _) = tape.value(q).dims2()?;
    cfg.validate(n)?;
    let n_pad = cfg.padded_len(n);
    let (qp, kp, vp) = if n_pad != n {
        let rows: Vec<usize> = (0..n_pad).map(|i| i.min(n - 1)).collect();
        (
            tape.gather_rows(q, &rows)?,
            tape.gather_rows(k, &rows)?,
            tape.gather_rows(v, &rows)?,
        )
    } else {
        (q, k, v)
    };
    let weights = match fusion_logits {
        Some(logits) => Some(tape.softmax(logits)?),
        None => None,
    };
    let mut acc: Option<Var> = None;
    for (s, l) in cfg.segment_lengths().into_iter().enumerate() {
        let plan = SegmentPlan {
            seg_len: l,
            heads: cfg.num_heads,
            pairing,
            valid_len: n,
        };
        let y = tape.segment_correlation(qp, kp, vp, tau, delta, plan)?;
        let y = match weights {
            Some(w) => {
                let cols = tape.value(y).shape()[1];
                let ws = tape.gather(w, Rc::new(vec![s; cols]), &[cols])?;
                tape.row_op(crate::numerics::RowOp::Mul, y, ws)?
            }
            None => y,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    let mut out = acc.expect("at least one scale");
    if weights.is_none() && cfg.num_scales > 1 {
        out = tape.scale(out, 1.0 / cfg.num_scales as f64)?;
    }
    if n_pad != n {
        let rows: Vec<usize> = (0..n).collect();
        out = tape.gather_rows(out, &rows)?;
    }
    Ok(out)
}
