//! Per-sequence normalisation and the learned de-stationary rescalers.
//!
//! `normalize` removes each dimension's temporal mean and scale; the
//! projector maps those statistics to a positive scale `tau` and per-segment
//! offsets `delta` that re-enter attention as `tau·score + delta_j`.

use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::decomposition::EmbeddingSequence;
use crate::error::{bail, Result};
use crate::numerics::{RowOp, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Lower clamp for per-dimension standard deviations.
pub const SIGMA_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SeriesStats {
    /// Stats whose normalisation is the identity map.
    pub fn identity(d: usize) -> Self {
        Self {
            mu: alloc::vec![0.0; d],
            sigma: alloc::vec![1.0; d],
        }
    }
}

/// Attention rescaling factors; `tau = 1`, empty `delta` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescalers {
    pub tau: f64,
    pub delta: Vec<f64>,
}

impl Rescalers {
    pub fn identity() -> Self {
        Self {
            tau: 1.0,
            delta: Vec::new(),
        }
    }
}

/// Column statistics (population std, clamped at [`SIGMA_EPS`]).
pub fn series_stats(z: &EmbeddingSequence) -> Result<SeriesStats> {
    let (n, d) = z.dims2()?;
    if n < 2 {
        bail!(Usage, "normalisation needs at least 2 time steps, got {}", n);
    }
    let mut mu = alloc::vec![0.0; d];
    for t in 0..n {
        for (m, v) in mu.iter_mut().zip(z.row(t)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = alloc::vec![0.0; d];
    for t in 0..n {
        for ((s, v), m) in var.iter_mut().zip(z.row(t)).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    let sigma = var
        .iter()
        .map(|s| (s / n as f64).sqrt().max(SIGMA_EPS))
        .collect();
    Ok(SeriesStats { mu, sigma })
}

/// `z'[t] = (z[t] - mu) / sigma` per dimension.
pub fn normalize(z: &EmbeddingSequence) -> Result<(EmbeddingSequence, SeriesStats)> {
    let stats = series_stats(z)?;
    let (n, d) = z.dims2()?;
    let mut out = z.clone();
    out.requires_grad = false;
    let data = out.data_mut();
    for t in 0..n {
        for j in 0..d {
            data[t * d + j] = (data[t * d + j] - stats.mu[j]) / stats.sigma[j];
        }
    }
    Ok((out, stats))
}

/// Inverse of [`normalize`]: `z[t] = z'[t]·sigma + mu`.
pub fn denormalize(z: &EmbeddingSequence, stats: &SeriesStats) -> Result<EmbeddingSequence> {
    let (n, d) = z.dims2()?;
    if stats.mu.len() != d || stats.sigma.len() != d {
        bail!(Dimension, "stats for {} dims applied to {} dims", stats.mu.len(), d);
    }
    let mut out = z.clone();
    out.requires_grad = false;
    let data = out.data_mut();
    for t in 0..n {
        for j in 0..d {
            data[t * d + j] = data[t * d + j] * stats.sigma[j] + stats.mu[j];
        }
    }
    Ok(out)
}

/// Differentiable normalisation on the tape: returns `(z', mu, sigma)`
/// with `mu`, `sigma` as `1×d` rows.
pub fn normalize_on_tape(tape: &mut Tape, z: Var) -> Result<(Var, Var, Var)> {
    let (n, _) = tape.value(z).dims2()?;
    if n < 2 {
        bail!(Usage, "normalisation needs at least 2 time steps, got {}", n);
    }
    let stats = tape.column_stats(z, SIGMA_EPS)?;
    let mu = tape.gather_rows(stats, &[0])?;
    let sigma = tape.gather_rows(stats, &[1])?;
    let centred = tape.row_op(RowOp::Sub, z, mu)?;
    let zn = tape.row_op(RowOp::Div, centred, sigma)?;
    Ok((zn, mu, sigma))
}

pub fn denormalize_on_tape(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    let scaled = tape.row_op(RowOp::Mul, z, sigma)?;
    tape.row_op(RowOp::Add, scaled, mu)
}

/// Two-layer perceptron from `[mu, sigma, mean_t z]` to `(tau, delta)`.
///
/// The output layer starts at zero so a fresh projector yields `tau = 1`
/// and `delta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub dim: usize,
    pub hidden: usize,
    pub delta_len: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Projector {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, delta_len: usize) -> Result<Self> {
        let name = |s: &str| alloc::format!("{prefix}.{s}");
        Ok(Self {
            dim,
            hidden,
            delta_len,
            w1: store.init(&name("w1"), &[3 * dim, hidden], Init::Xavier)?,
            b1: store.init(&name("b1"), &[hidden], Init::Zeros)?,
            w2: store.init(&name("w2"), &[hidden, 1 + delta_len], Init::Zeros)?,
            b2: store.init(&name("b2"), &[1 + delta_len], Init::Zeros)?,
        })
    }

    /// Returns `(tau, delta)` vars of shapes `[1]` and `[delta_len]`.
    pub fn forward(&self, tape: &mut Tape, params: &mut Bound<'_>, mu: Var, sigma: Var, z: Var) -> Result<(Var, Var)> {
        let pooled = tape.mean_rows(z)?;
        let mu = tape.reshape(mu, &[1, self.dim])?;
        let sigma = tape.reshape(sigma, &[1, self.dim])?;
        let x = tape.concat_cols(&[mu, sigma, pooled])?;
        let (w1, b1) = (params.var(tape, self.w1), params.var(tape, self.b1));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h)?;
        let (w2, b2) = (params.var(tape, self.w2), params.var(tape, self.b2));
        let out = tape.linear(h, w2, b2)?;
        let log_tau = tape.gather(out, alloc::rc::Rc::new(alloc::vec![0]), &[1])?;
        let tau = tape.exp(log_tau)?;
        let delta = tape.gather(out, alloc::rc::Rc::new((1..=self.delta_len).collect()), &[self.delta_len])?;
        Ok((tau, delta))
    }

    /// Evaluates the projector outside training.
    pub fn project(&self, store: &ParamStore, stats: &SeriesStats, z: &EmbeddingSequence) -> Result<Rescalers> {
        let (_, d) = z.dims2()?;
        if d != self.dim || stats.mu.len() != d || stats.sigma.len() != d {
            bail!(Dimension, "projector built for {} dims, got {}", self.dim, d);
        }
        let mut tape = Tape::new();
        let mut params = Bound::new(store, false);
        let mu = tape.constant(Tensor::new(&[1, d], stats.mu.clone())?);
        let sigma = tape.constant(Tensor::new(&[1, d], stats.sigma.clone())?);
        let zv = tape.constant(z.clone());
        let (tau, delta) = self.forward(&mut tape, &mut params, mu, sigma, zv)?;
        Ok(Rescalers {
            tau: tape.value(tau).data()[0],
            delta: tape.value(delta).data().to_vec(),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
